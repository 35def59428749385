#include "explore/evalsim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <unordered_map>
#include <unordered_set>

#include "explore/errors.hpp"
#include "explore/util.hpp"

namespace explore {

using nlohmann::json;

namespace {

std::array<std::string, 2> describe_pair(const ClusterTree& tree, const ContextPair& pair) {
  return {tree.description_text(pair.first), tree.description_text(pair.second)};
}

// Index drawn with probability proportional to `weights`; all-zero weights
// fall back to uniform.
std::size_t draw_weighted(std::span<const double> weights, std::mt19937_64& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (total <= 0.0) {
    return std::uniform_int_distribution<std::size_t>(0, weights.size() - 1)(rng);
  }
  double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return i;
  }
  return 0;
}

}  // namespace

double compute_match_rate(const InterestGenerator& generator, const ClusterTree& tree, int level,
                          std::span<const ContextPair> probes) {
  if (probes.empty()) throw ArgumentError("match rate needs at least one probe pair");
  const DescriptionIndex index(tree, level);
  std::size_t matched = 0;
  for (const ContextPair& pair : probes) {
    const auto context = describe_pair(tree, pair);
    try {
      const std::string raw = generator.generate(context);
      if (index.find(raw)) ++matched;
    } catch (const std::exception&) {
    }
  }
  return static_cast<double>(matched) / static_cast<double>(probes.size());
}

double compute_recall(const TransitionTable& table, std::span<const TransitionExample> held_out) {
  const auto targets = dominant_labels(held_out);
  if (targets.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& [pair, label] : targets) {
    if (table.lookup(pair) == label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(targets.size());
}

double compute_recall(const InterestGenerator& generator, const ClusterTree& tree, int level,
                      std::span<const TransitionExample> held_out) {
  const auto targets = dominant_labels(held_out);
  if (targets.empty()) return 0.0;
  const DescriptionIndex index(tree, level);
  std::size_t hits = 0;
  for (const auto& [pair, label] : targets) {
    const auto context = describe_pair(tree, pair);
    try {
      if (index.find(generator.generate(context)) == label) ++hits;
    } catch (const std::exception&) {
    }
  }
  return static_cast<double>(hits) / static_cast<double>(targets.size());
}

std::map<int, std::int64_t> compute_uci(std::span<const InteractionEvent> events,
                                        const ClusterTree& tree, int level,
                                        std::span<const int> n_values, std::int64_t as_of,
                                        std::int64_t window) {
  std::unordered_map<std::string_view, std::unordered_set<int>> clusters;
  for (const InteractionEvent& e : events) {
    if (e.quality <= 0.0 || e.timestamp <= as_of - window || e.timestamp > as_of) continue;
    const auto index = tree.item_index(e.item_id);
    if (!index) continue;
    clusters[e.user_id].insert(tree.cluster_of(*index, level).index);
  }
  std::map<int, std::int64_t> out;
  for (int n : n_values) {
    std::int64_t count = 0;
    for (const auto& [user, seen] : clusters) {
      if (static_cast<std::int64_t>(seen.size()) >= n) ++count;
    }
    out[n] = count;
  }
  return out;
}

std::string FrequencyBucket::name() const {
  return "[" + std::to_string(lower) + "," + (upper ? std::to_string(*upper) : "inf") + ")";
}

double gini_coefficient(std::span<const std::int64_t> frequencies) {
  std::vector<std::int64_t> sorted(frequencies.begin(), frequencies.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double total = 0.0;
  double weighted = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double x = static_cast<double>(sorted[i]);
    total += x;
    weighted += (2.0 * static_cast<double>(i + 1) - n - 1.0) * x;
  }
  if (total <= 0.0) return 0.0;
  return std::clamp(weighted / (n * total), 0.0, 1.0);
}

DistributionStats compute_distribution_stats(std::span<const std::int64_t> frequencies,
                                             std::span<const std::int64_t> edges) {
  if (frequencies.empty()) throw ArgumentError("distribution stats need at least one label");
  std::int64_t total = 0;
  std::int64_t max_frequency = 0;
  for (auto f : frequencies) {
    if (f < 0) throw ArgumentError("label frequencies must be non-negative");
    total += f;
    max_frequency = std::max(max_frequency, f);
  }
  if (total == 0) throw ArgumentError("distribution stats need at least one output");
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (edges[i] <= 0 || (i > 0 && edges[i] <= edges[i - 1])) {
      throw ArgumentError("bucket edges must be positive and strictly increasing");
    }
  }

  DistributionStats out;
  out.frequencies.assign(frequencies.begin(), frequencies.end());
  std::int64_t lower = 0;
  for (std::size_t i = 0; i <= edges.size(); ++i) {
    FrequencyBucket b;
    b.lower = lower;
    if (i < edges.size()) b.upper = edges[i];
    std::size_t count = 0;
    for (auto f : frequencies) {
      if (f >= b.lower && (!b.upper || f < *b.upper)) ++count;
    }
    b.label_share = static_cast<double>(count) / static_cast<double>(frequencies.size());
    out.histogram.push_back(b);
    if (i < edges.size()) lower = edges[i];
  }
  out.gini = gini_coefficient(frequencies);
  out.max_share = static_cast<double>(max_frequency) / static_cast<double>(total);
  return out;
}

json report_to_json(const MetricsReport& report) {
  json j = json::object();
  if (report.match_rate) j["match_rate"] = *report.match_rate;
  if (report.recall_finetune) j["recall_finetune"] = *report.recall_finetune;
  if (report.recall_test) j["recall_test"] = *report.recall_test;
  if (!report.uci.empty()) {
    json uci = json::object();
    for (const auto& [n, count] : report.uci) uci[std::to_string(n)] = count;
    j["uci"] = uci;
  }
  if (report.novel_impression_ratio) j["novel_impression_ratio"] = *report.novel_impression_ratio;
  if (report.positive_feedback_rate) j["positive_feedback_rate"] = *report.positive_feedback_rate;
  if (report.distribution) {
    const DistributionStats& d = *report.distribution;
    json histogram = json::object();
    for (const auto& b : d.histogram) histogram[b.name()] = b.label_share;
    j["label_histogram"] = histogram;
    j["label_frequencies"] = d.frequencies;
    j["gini"] = d.gini;
    j["max_share"] = d.max_share;
  }
  return j;
}

std::vector<double> centroid_similarity(const ClusterTree& tree, int level) {
  const auto& clusters = tree.level(level);
  const std::size_t m = clusters.size();
  std::vector<double> d2(m * m, 0.0);
  double sum = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      const double d = squared_distance(clusters[a].centroid, clusters[b].centroid);
      d2[a * m + b] = d2[b * m + a] = d;
      sum += d;
    }
  }
  const double pairs = static_cast<double>(m * (m - 1) / 2);
  const double bandwidth = pairs > 0.0 && sum > 0.0 ? sum / pairs : 1.0;
  std::vector<double> out(m * m);
  for (std::size_t i = 0; i < m * m; ++i) out[i] = std::exp(-d2[i] / bandwidth);
  return out;
}

std::vector<InteractionEvent> synthesize_log(const Corpus& corpus, const ClusterTree& tree,
                                             int level, const LogSynthConfig& config) {
  if (tree.num_items() != corpus.size()) {
    throw ArgumentError("cluster tree and corpus cover different item sets");
  }
  if (config.days < 1 || config.events_per_day <= 0.0) {
    throw ArgumentError("log synthesis needs at least one day and a positive event rate");
  }
  if (config.novel_probability < 0.0 || config.novel_probability > 1.0) {
    throw ArgumentError("novel probability must lie in [0, 1]");
  }
  const auto& clusters = tree.level(level);
  const std::size_t m = clusters.size();
  const auto similarity = centroid_similarity(tree, level);

  std::mt19937_64 world_rng(derive_seed(config.seed, {0}));
  std::vector<std::size_t> rank(m);
  for (std::size_t i = 0; i < m; ++i) rank[i] = i;
  std::shuffle(rank.begin(), rank.end(), world_rng);
  std::vector<double> attractiveness(m);
  for (std::size_t r = 0; r < m; ++r) {
    attractiveness[rank[r]] = 1.0 / std::pow(static_cast<double>(r + 1), config.zipf_exponent);
  }

  // Per-cluster traffic weights over members, for item draws.
  std::vector<std::vector<double>> member_weight(m);
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t item : clusters[c].members) {
      member_weight[c].push_back(std::max(corpus.item(item).traffic_weight, 1e-12));
    }
  }

  std::vector<InteractionEvent> out;
  std::vector<double> weights(m);
  for (std::size_t u = 0; u < config.num_users; ++u) {
    std::mt19937_64 rng(derive_seed(config.seed, {1, u}));
    char id[32];
    std::snprintf(id, sizeof id, "u%05zu", u);
    const std::string user_id = id;

    std::vector<std::uint8_t> known(m, 0);
    const std::size_t home = draw_weighted(attractiveness, rng);
    known[home] = 1;
    if (m > 1) {
      for (std::size_t c = 0; c < m; ++c) {
        weights[c] = c == home ? 0.0 : similarity[home * m + c];
      }
      known[draw_weighted(weights, rng)] = 1;
    }
    std::size_t last = home;

    std::poisson_distribution<int> per_day(config.events_per_day);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<InteractionEvent> events;
    for (int day = 0; day < config.days; ++day) {
      const int n = per_day(rng);
      for (int k = 0; k < n; ++k) {
        const bool discover = unit(rng) < config.novel_probability;
        bool any = false;
        for (std::size_t c = 0; c < m; ++c) {
          const bool eligible = discover ? !known[c] : known[c] != 0;
          weights[c] = eligible ? attractiveness[c] * (discover ? similarity[last * m + c] : 1.0)
                                : 0.0;
          any = any || weights[c] > 0.0;
        }
        if (!any) {
          for (std::size_t c = 0; c < m; ++c) weights[c] = known[c] ? attractiveness[c] : 0.0;
        }
        const std::size_t c = draw_weighted(weights, rng);
        known[c] = 1;
        last = c;
        const std::size_t item = clusters[c].members[draw_weighted(member_weight[c], rng)];
        const auto ts = config.start + static_cast<std::int64_t>(day) * 86400 +
                        std::uniform_int_distribution<std::int64_t>(0, 86399)(rng);
        events.push_back({user_id, tree.item_ids()[item], ts, unit(rng)});
      }
    }
    std::stable_sort(events.begin(), events.end(),
                     [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
    out.insert(out.end(), std::make_move_iterator(events.begin()),
               std::make_move_iterator(events.end()));
  }
  return out;
}

}  // namespace explore
