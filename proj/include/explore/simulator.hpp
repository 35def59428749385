#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "explore/clustering.hpp"
#include "explore/corpus.hpp"
#include "explore/evalsim.hpp"
#include "explore/genpolicy.hpp"
#include "json.hpp"

namespace explore {

enum class SimPolicy { kExploration, kExploitation, kBandit };

// Throws ConfigError on anything but exploration|exploitation|bandit.
SimPolicy parse_policy(std::string_view name);
std::string to_string(SimPolicy policy);

struct SimConfig {
  std::size_t num_users = 300;
  std::size_t num_items = 2000;
  int num_clusters = 16;  // at the planning level
  std::size_t dim = 16;
  int days = 30;
  std::uint64_t seed = 0;
  // Gamma shape of the per-cluster affinity noise; larger means less spread.
  double affinity_concentration = 4.0;
  // Multiplier on a dormant cluster's latent affinity once it is consumed.
  double discovery_gain = 1.2;
  // Dormant clusters act at this fraction of their latent affinity.
  double dormant_discount = 0.35;
  std::size_t slate_size = 10;
  std::size_t explore_slots = 2;
  int warmup_days = 14;
  SimPolicy policy = SimPolicy::kExploration;
  int planning_level = kDefaultPlanningLevel;
  double quality_threshold = kDefaultQualityThreshold;
  std::vector<int> uci_n = {2, 5, 10};
  double scorer_smoothing = 0.01;
  double bandit_exploration = 1.0;  // UCB bonus scale
  // Pseudo-count pulling each user's logged cluster propensity toward the
  // global cluster shares. Exploit ranking is scorer times propensity.
  double propensity_prior = 1.0;

  // Throws ConfigError. Zero users is allowed and yields an empty report.
  void validate() const;
};

// Reads the [simulation] table; keys mirror the field names.
SimConfig load_sim_config(const std::filesystem::path& path);

// Everything a run shares across policies for one seed.
struct SimWorld {
  Corpus corpus;
  ClusterTree tree;
  TransitionTable table;  // embedding-fallback table at the planning level
  std::vector<double> similarity;
};

SimWorld build_sim_world(const SimConfig& config);

struct DayMetrics {
  int day = 0;
  std::map<int, std::int64_t> uci;
  std::int64_t impressions = 0;
  std::int64_t novel_impressions = 0;  // cluster never consumed before
  std::int64_t consumed = 0;
  std::int64_t positives = 0;  // consumed with quality >= threshold
  std::int64_t explore_impressions = 0;
  std::int64_t novelty_violations = 0;
  double novel_impression_ratio() const;
  double positive_feedback_rate() const;
};

struct SimReport {
  SimPolicy policy = SimPolicy::kExploration;
  std::uint64_t seed = 0;
  std::size_t num_users = 0;
  std::vector<DayMetrics> days;
  std::map<int, double> mean_uci;  // over days
  MetricsReport summary;           // ratios pooled over days; uci of the last day
  std::int64_t novelty_violations = 0;
};

// Deterministic in (config, world). An exploration slot whose target lies in
// its own sampled context counts as a novelty violation.
SimReport run_simulation(const SimConfig& config, const SimWorld& world);
SimReport run_simulation(const SimConfig& config);

nlohmann::json sim_report_to_json(const SimReport& report);

}  // namespace explore
