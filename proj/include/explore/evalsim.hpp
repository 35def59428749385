#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "explore/clustering.hpp"
#include "explore/corpus.hpp"
#include "explore/curation.hpp"
#include "explore/genpolicy.hpp"
#include "json.hpp"

namespace explore {

inline constexpr std::int64_t kUciWindow = 7 * 86400;

// Fraction of probes whose generation resolves to some cluster description.
// Generator exceptions count as misses. Throws ArgumentError on no probes.
double compute_match_rate(const InterestGenerator& generator, const ClusterTree& tree, int level,
                          std::span<const ContextPair> probes);

// Evaluated once per distinct context pair against its dominant label (see
// dominant_labels). 0 when `held_out` is empty.
double compute_recall(const TransitionTable& table, std::span<const TransitionExample> held_out);
double compute_recall(const InterestGenerator& generator, const ClusterTree& tree, int level,
                      std::span<const TransitionExample> held_out);

// Users with at least N distinct clusters among consumed (quality > 0) events
// in (as_of - window, as_of]. Events naming unknown items are ignored.
std::map<int, std::int64_t> compute_uci(std::span<const InteractionEvent> events,
                                        const ClusterTree& tree, int level,
                                        std::span<const int> n_values, std::int64_t as_of,
                                        std::int64_t window = kUciWindow);

struct FrequencyBucket {
  std::int64_t lower = 0;
  std::optional<std::int64_t> upper;  // exclusive; unset for the last bucket
  double label_share = 0.0;
  std::string name() const;  // "[lower,upper)" or "[lower,inf)"
};

struct DistributionStats {
  std::vector<std::int64_t> frequencies;  // per label, zeros included
  std::vector<FrequencyBucket> histogram;
  double gini = 0.0;
  double max_share = 0.0;  // largest single-label share of all outputs
};

inline const std::vector<std::int64_t> kDefaultBucketEdges = {1, 10, 100, 1000, 10000};

// Buckets are [0, e0), [e0, e1), ..., [e_last, inf). Throws ArgumentError
// when `frequencies` is empty or sums to zero, or the edges are not
// strictly increasing and positive.
DistributionStats compute_distribution_stats(
    std::span<const std::int64_t> frequencies,
    std::span<const std::int64_t> edges = kDefaultBucketEdges);

// Sorted-rank form of sum |xi - xj| / (2 n^2 mean).
double gini_coefficient(std::span<const std::int64_t> frequencies);

struct MetricsReport {
  std::optional<double> match_rate;
  std::optional<double> recall_finetune;
  std::optional<double> recall_test;
  std::map<int, std::int64_t> uci;
  std::optional<double> novel_impression_ratio;
  std::optional<double> positive_feedback_rate;
  std::optional<DistributionStats> distribution;
};

nlohmann::json report_to_json(const MetricsReport& report);

// Gaussian kernel over squared centroid distances, bandwidth the mean
// off-diagonal squared distance. Row-major M*M, diagonal 1.
std::vector<double> centroid_similarity(const ClusterTree& tree, int level);

struct LogSynthConfig {
  std::size_t num_users = 1000;
  int days = 30;
  double events_per_day = 3.0;
  double novel_probability = 0.1;
  double zipf_exponent = 1.0;
  std::uint64_t seed = 0;
  std::int64_t start = 1'700'000'000;
};

// Seeded interaction log. Clusters get Zipf attractiveness over a seeded
// rank order. Each user starts knowing a home cluster and one similar
// cluster; an event revisits a known cluster by attractiveness or, with
// `novel_probability`, discovers an unknown one by attractiveness times
// similarity to the last visited cluster. Items are drawn by traffic within
// the cluster and quality is uniform on [0, 1). Events sorted by (user, ts).
std::vector<InteractionEvent> synthesize_log(const Corpus& corpus, const ClusterTree& tree,
                                             int level, const LogSynthConfig& config);

}  // namespace explore
