#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "explore/clustering.hpp"
#include "explore/curation.hpp"

namespace explore {

// Ordered context: `first` is the older cluster.
struct ContextPair {
  ClusterId first;
  ClusterId second;
  auto operator<=>(const ContextPair&) const = default;
};

struct GenerationOutcome {
  std::string raw;
  std::optional<ClusterId> matched;
  bool novelty_ok = false;  // matched and outside the context
};

// Exact match after normalization; never fuzzy.
GenerationOutcome match_generation(std::string_view raw, const DescriptionIndex& index,
                                   std::span<const ClusterId> context = {});
GenerationOutcome match_generation(std::string_view raw, const ClusterTree& tree, int level,
                                   std::span<const ClusterId> context = {});

// All M*M ordered pairs including self-pairs, row-major.
std::vector<ContextPair> enumerate_context_pairs(const ClusterTree& tree, int level);
std::vector<ContextPair> enumerate_context_pairs(int level, int num_clusters);

// Most frequent label per distinct context pair: by record count, then summed
// support, then lower index. Sorted by pair.
std::vector<std::pair<ContextPair, ClusterId>> dominant_labels(
    std::span<const TransitionExample> examples);

// Maps the descriptions of a context (oldest first) to free text that
// should name one cluster.
class InterestGenerator {
 public:
  virtual ~InterestGenerator() = default;
  virtual std::string id() const = 0;
  // Must be safe to call concurrently.
  virtual std::string generate(std::span<const std::string> context) const = 0;
};

// Nearest centroid to the mean of the context centroids, context excluded,
// ties to the lower index. Needs at least three clusters at the level.
class EmbeddingFallbackGenerator : public InterestGenerator {
 public:
  EmbeddingFallbackGenerator(const ClusterTree& tree, int level);
  std::string id() const override { return "embedding-fallback"; }
  std::string generate(std::span<const std::string> context) const override;
  ClusterId nearest_novel(std::span<const ClusterId> context) const;

 private:
  const ClusterTree* tree_;
  int level_;
  DescriptionIndex index_;
};

std::string embedding_fallback_generate(const ContextPair& pair, const ClusterTree& tree,
                                        int level);

// Count-based stand-in for a model fine-tuned on `dataset`. A pair seen in the
// dataset yields its most frequent label (records, then support, then lower
// index). An unseen pair yields the label of the nearest seen pair by summed
// centroid distance, skipping seen pairs whose label lies in the query.
class MemorizingGenerator : public InterestGenerator {
 public:
  // Throws ArgumentError on an empty dataset.
  MemorizingGenerator(const CuratedDataset& dataset, const ClusterTree& tree);
  std::string id() const override { return "memorizing"; }
  std::string generate(std::span<const std::string> context) const override;
  ClusterId predict(const ContextPair& pair) const;

 private:
  const ClusterTree* tree_;
  int level_;
  DescriptionIndex index_;
  std::vector<std::pair<ContextPair, ClusterId>> best_;  // sorted by pair
  std::vector<double> distance_;                          // M*M centroid distances
};

std::string memorizing_generate(const CuratedDataset& dataset, const ClusterTree& tree,
                                const ContextPair& pair);

// ---------------------------------------------------------------------------
// Transition table

enum class EntrySource : std::uint8_t { kModel, kFallback };

struct TableEntry {
  int target = 0;
  EntrySource source = EntrySource::kModel;
};

struct TableProvenance {
  std::string generator_id;
  std::string fallback_id;
  std::string built_at;  // ISO-8601 UTC
  double match_rate = 0.0;
  std::int64_t fallback_count = 0;
  std::uint64_t tree_fingerprint = 0;
};

// Total map from ordered cluster pairs to a novel target. Immutable.
class TransitionTable {
 public:
  TransitionTable() = default;
  // Entries are row-major over (c1, c2). Throws ValidationError unless the
  // table is total, in range and novel.
  TransitionTable(int level, int num_clusters, std::vector<TableEntry> entries,
                  TableProvenance provenance);

  int level() const { return level_; }
  int num_clusters() const { return m_; }
  std::size_t size() const { return entries_.size(); }
  const TableProvenance& provenance() const { return provenance_; }

  // Unchecked hot path.
  int lookup(int c1, int c2) const noexcept {
    return entries_[static_cast<std::size_t>(c1) * static_cast<std::size_t>(m_) +
                    static_cast<std::size_t>(c2)]
        .target;
  }
  // Throws ArgumentError on a level mismatch or out-of-range index.
  ClusterId lookup(const ContextPair& pair) const;
  const TableEntry& entry(int c1, int c2) const;

  // Occurrences of each cluster as a target, indexed by cluster.
  std::vector<std::int64_t> label_frequencies() const;

 private:
  int level_ = 0;
  int m_ = 0;
  std::vector<TableEntry> entries_;
  TableProvenance provenance_;
};

struct BulkInferOptions {
  std::size_t concurrency = 1;
  int retries = 1;
  // Fixed timestamp for reproducible sidecars; current time when unset.
  std::optional<std::string> built_at;
};

// Fills every ordered pair: the generator gets one try plus `retries`, after
// which the fallback decides. Generator exceptions count as failed tries.
// Throws BuildError listing the pairs the fallback could not fill either.
TransitionTable bulk_infer(const InterestGenerator& generator, const ClusterTree& tree,
                           int level, const InterestGenerator& fallback,
                           const BulkInferOptions& options = {});

// table.tsv holds "c1\tc2\ttarget\tsource" lines; the sidecar holds provenance.
void write_table(const TransitionTable& table, std::ostream& tsv, std::ostream& sidecar);
TransitionTable read_table(std::istream& tsv, std::istream& sidecar);
std::filesystem::path sidecar_path(const std::filesystem::path& table_path);
void save_table(const TransitionTable& table, const std::filesystem::path& path);
TransitionTable load_table(const std::filesystem::path& path);

std::string utc_timestamp();

}  // namespace explore
