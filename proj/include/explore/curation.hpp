#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "explore/clustering.hpp"
#include "explore/corpus.hpp"

namespace explore {

inline constexpr int kDefaultPerLabelCap = 10;

// One novel interest transition: the user's two most recent distinct
// clusters (older first) followed by a cluster outside that pair.
struct TransitionExample {
  ClusterId c1;
  ClusterId c2;
  ClusterId label;
  std::int64_t support = 1;

  bool operator==(const TransitionExample&) const = default;
};

struct CuratedDataset {
  std::vector<TransitionExample> examples;
  int per_label_cap = kDefaultPerLabelCap;
  int planning_level = kDefaultPlanningLevel;
};

struct SftRecord {
  std::string prompt;
  std::string completion;
};

// Prompt text with `{context1}` and `{context2}` placeholders.
class PromptTemplate {
 public:
  static constexpr std::string_view kDefault =
      "A user watched videos about {context1} and {context2}. Predict one new interest, "
      "different from both, described in the same style.";

  PromptTemplate() : PromptTemplate(std::string(kDefault)) {}
  // Throws ArgumentError unless both placeholders occur exactly once, in order.
  explicit PromptTemplate(std::string text);

  const std::string& text() const { return text_; }
  std::string render(std::string_view context1, std::string_view context2) const;
  // Every way of splitting `prompt` back into the two context strings.
  std::vector<std::pair<std::string, std::string>> parse(std::string_view prompt) const;

 private:
  std::string text_;
  std::string prefix_;
  std::string middle_;
  std::string suffix_;
};

// Scans each user's high-quality events in time order and emits
// ((C1, C2), C_L) whenever the event's cluster is outside the user's two most
// recent distinct clusters. Identical triples are merged into support counts;
// the output is sorted by (label, c1, c2). Events on items missing from the
// tree are skipped.
std::vector<TransitionExample> mine_transitions(std::span<const UserHistory> histories,
                                                const ClusterTree& tree, int level,
                                                double quality_threshold);

// Deterministic user-level split: a user lands in `.second` (held out) when
// a seeded hash of its id falls below `holdout_fraction`.
std::pair<std::vector<UserHistory>, std::vector<UserHistory>> split_histories(
    std::span<const UserHistory> histories, double holdout_fraction, std::uint64_t seed);

// Keeps, per label, the `per_label_cap` context pairs with the highest
// support. Ties go to the lexicographically smaller (c1, c2) index pair.
CuratedDataset curate_balanced(std::span<const TransitionExample> raw, int per_label_cap);

// Uniform sample of `n` logged occurrences (each example counts `support`
// times) without replacement. Every sampled occurrence becomes one example
// with support 1.
CuratedDataset curate_random(std::span<const TransitionExample> raw, std::size_t n,
                             std::uint64_t seed);

std::vector<SftRecord> export_sft(const CuratedDataset& dataset, const ClusterTree& tree,
                                  const PromptTemplate& prompt_template);

// Inverse of export_sft: recovers cluster ids from prompts and completions by
// exact normalized description match. Throws ParseError naming the record.
CuratedDataset dataset_from_sft(std::span<const SftRecord> records, const ClusterTree& tree,
                                int level, const PromptTemplate& prompt_template);

void write_transitions(std::span<const TransitionExample> examples, std::ostream& out);
std::vector<TransitionExample> read_transitions(std::istream& in, int level);
void save_transitions(std::span<const TransitionExample> examples,
                      const std::filesystem::path& path);
std::vector<TransitionExample> load_transitions(const std::filesystem::path& path, int level);

void write_sft(std::span<const SftRecord> records, std::ostream& out);
std::vector<SftRecord> read_sft(std::istream& in);
void save_sft(std::span<const SftRecord> records, const std::filesystem::path& path);
std::vector<SftRecord> load_sft(const std::filesystem::path& path);

}  // namespace explore
