#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "explore/clustering.hpp"
#include "explore/corpus.hpp"

namespace explore {

struct ScoredItem {
  std::string item_id;
  double score = 0.0;
  bool operator==(const ScoredItem&) const = default;
};

struct RetrievalResult {
  std::vector<ScoredItem> ranked;  // score descending, then item_id ascending
  std::optional<ClusterId> target_cluster;
  bool truncated = false;  // fewer than k candidates were available
};

// Next-item scorer over a fixed item index space (the corpus order).
// Implementations are immutable after fitting and safe to share.
class SequenceScorer {
 public:
  virtual ~SequenceScorer() = default;
  virtual std::string id() const = 0;
  virtual std::size_t num_items() const = 0;
  // `history` is oldest first. Writes one finite score per candidate; a
  // candidate's score never depends on the other candidates.
  virtual void score(std::span<const std::size_t> history, std::span<const std::size_t> candidates,
                     std::span<double> out) const = 0;

  std::vector<double> score(const Corpus& corpus, std::span<const std::string> history,
                            std::span<const std::string> candidates) const;
};

inline constexpr double kDefaultSmoothing = 0.05;
inline constexpr double kLag1Weight = 0.7;

// Interpolated lag-1/lag-2 successor model with additive smoothing toward a
// traffic popularity prior:
//   term_j(c) = (n_j(x_j, c) + b * pi(c)) / (N_j(x_j) + b),  b = smoothing * V
//   score     = 0.7 * term_1 + 0.3 * term_2
// where x_1 is the latest history item and x_2 the one before. A one-item
// history uses term_1 alone; an empty history scores pi(c).
class ReferenceScorer : public SequenceScorer {
 public:
  struct Successors {
    std::vector<std::uint32_t> item;  // ascending
    std::vector<std::uint32_t> count;
    std::uint64_t total = 0;
  };

  ReferenceScorer(std::vector<std::string> item_ids, std::vector<double> popularity,
                  std::vector<Successors> lag1, std::vector<Successors> lag2, double smoothing);

  std::string id() const override { return "reference-order2"; }
  std::size_t num_items() const override { return item_ids_.size(); }
  using SequenceScorer::score;
  void score(std::span<const std::size_t> history, std::span<const std::size_t> candidates,
             std::span<double> out) const override;

  const std::vector<std::string>& item_ids() const { return item_ids_; }
  const std::vector<double>& popularity() const { return popularity_; }
  double smoothing() const { return smoothing_; }
  const std::vector<Successors>& lag1() const { return lag1_; }
  const std::vector<Successors>& lag2() const { return lag2_; }

 private:
  std::vector<std::string> item_ids_;
  std::vector<double> popularity_;
  std::vector<Successors> lag1_;
  std::vector<Successors> lag2_;
  double smoothing_;
  double beta_;
};

// Counts successors within each user's time-ordered high-quality events.
// Throws TrainingError on empty events or events naming unknown items,
// ArgumentError unless smoothing > 0.
ReferenceScorer train_reference_scorer(std::span<const InteractionEvent> events,
                                       const Corpus& corpus, double smoothing = kDefaultSmoothing,
                                       double quality_threshold = kDefaultQualityThreshold);

void write_scorer(const ReferenceScorer& scorer, std::ostream& out);
ReferenceScorer read_scorer(std::istream& in);
void save_scorer(const ReferenceScorer& scorer, const std::filesystem::path& path);
ReferenceScorer load_scorer(const std::filesystem::path& path);

// Corpus indices of the known ids, in order; unknown ids are skipped.
std::vector<std::size_t> to_indices(const Corpus& corpus, std::span<const std::string> item_ids);

// Ranks only the members of `target` (tree index == corpus index). `exclude`
// is either empty or a per-item mask; masked items are never returned.
// Throws ArgumentError for an unknown cluster or k < 1.
RetrievalResult restricted_retrieval(const SequenceScorer& scorer, const ClusterTree& tree,
                                     std::span<const std::size_t> history, ClusterId target,
                                     std::size_t k, std::span<const std::uint8_t> exclude = {});

RetrievalResult unrestricted_retrieval(const SequenceScorer& scorer, const Corpus& corpus,
                                       std::span<const std::size_t> history, std::size_t k,
                                       std::span<const std::uint8_t> exclude = {});

}  // namespace explore
