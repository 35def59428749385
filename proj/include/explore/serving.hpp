#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "explore/clustering.hpp"
#include "explore/corpus.hpp"
#include "explore/genpolicy.hpp"
#include "explore/itempolicy.hpp"
#include "json.hpp"

namespace explore {

inline constexpr std::int64_t kSecondsPerDay = 86400;

enum class SeedMode { kSeeded, kEntropy };

struct ServiceConfig {
  int context_size = 2;  // K; the pair-keyed table requires 2
  int planning_level = kDefaultPlanningLevel;
  std::int64_t history_window = 30 * kSecondsPerDay;
  double quality_threshold = kDefaultQualityThreshold;
  std::size_t k_default = 10;
  int resample_budget = 5;  // R

  std::filesystem::path corpus_path;
  std::filesystem::path clusters_path;
  std::filesystem::path table_path;
  std::filesystem::path scorer_path;
  std::filesystem::path events_path;  // optional; enables user_id lookups

  std::string listen_host = "127.0.0.1";
  int listen_port = 8080;

  SeedMode seed_mode = SeedMode::kSeeded;
  std::uint64_t seed = 0;

  // Throws ConfigError on K != 2, a non-positive window, k_default < 1 or R < 0.
  void validate() const;
};

// Reads serve.toml. Sections: [service] context_size, planning_level,
// history_window_days, quality_threshold, k_default, resample_budget;
// [artifacts] corpus, clusters, table, scorer, events (relative to the file);
// [listen] host, port; [random] mode (seeded|entropy), seed.
// EXPLORE_LISTEN=host:port overrides [listen].
ServiceConfig load_service_config(const std::filesystem::path& path);
// Applies EXPLORE_LISTEN when set.
void apply_listen_override(ServiceConfig& config);

// Immutable bundle shared by all requests.
struct ServingState {
  Corpus corpus;
  ClusterTree tree;
  TransitionTable table;
  std::shared_ptr<const SequenceScorer> scorer;
  std::unordered_map<std::string, UserHistory> histories;
  std::map<std::string, std::string> artifact_hashes;
};

// Cross-checks the artifacts; throws ConsistencyError when the tree's item
// order differs from the corpus, the table was built from another tree or
// level, or the scorer covers other items.
void check_consistency(const ServingState& state, int planning_level);
ServingState load_serving_state(const ServiceConfig& config);

struct ContextSample {
  std::vector<ClusterId> clusters;  // oldest first, size K
  std::vector<std::string> item_ids;
  int draws = 0;  // 1 + resamples used
};

// Draws K window-filtered high-quality events without replacement, weighted
// by quality, and orders their clusters by recency. Resamples up to
// `resample_budget` times while clusters repeat, then keeps the last draw.
// Histories with a single usable event yield a repeated cluster. Throws
// ColdStartError when no event survives the filters.
ContextSample sample_context(const UserHistory& history, const ClusterTree& tree, int level,
                             int context_size, std::int64_t window, std::int64_t as_of,
                             double quality_threshold, int resample_budget, std::mt19937_64& rng);

struct RecommendRequest {
  std::optional<std::string> user_id;
  std::optional<UserHistory> history;
  std::optional<std::size_t> k;
  std::optional<std::int64_t> as_of;  // defaults to the latest history timestamp
};

struct RecommendResponse {
  std::optional<ClusterId> novel_cluster;
  std::string description;
  std::vector<ScoredItem> items;
  std::optional<ContextPair> context_pair;
  std::optional<EntrySource> table_source;
  bool fallback = false;  // cold start: unrestricted retrieval
  bool truncated = false;
};

// Seeded mode derives the sampling seed from the config seed, the user key
// and as_of, so repeated requests agree.
RecommendResponse recommend(const RecommendRequest& request, const ServiceConfig& config,
                            const ServingState& state);
RecommendResponse recommend(const RecommendRequest& request, const ServiceConfig& config,
                            const ServingState& state, std::mt19937_64& rng);

// Throws ArgumentError on malformed fields.
RecommendRequest request_from_json(const nlohmann::json& j);
nlohmann::json response_to_json(const RecommendResponse& response, const ServingState& state);

// HTTP front end: POST /recommend, GET /healthz. One JSON access-log line per
// request goes to `access_log` when non-null.
class RecommendServer {
 public:
  RecommendServer(ServiceConfig config, std::shared_ptr<const ServingState> state,
                  std::ostream* access_log = nullptr);
  ~RecommendServer();
  RecommendServer(const RecommendServer&) = delete;
  RecommendServer& operator=(const RecommendServer&) = delete;

  // Binds (port 0 picks a free port), serves on a background thread and
  // returns the bound port. Throws Error when binding fails.
  int start();
  // Binds and serves on the calling thread until stop().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace explore
