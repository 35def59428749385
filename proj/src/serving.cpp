#include "explore/serving.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "explore/config.hpp"
#include "explore/curation.hpp"
#include "explore/errors.hpp"
#include "explore/util.hpp"
#include "httplib.h"
#include "jsonl.hpp"

namespace explore {

using nlohmann::json;

namespace {

std::string file_hash(const std::filesystem::path& path) {
  auto in = jsonl::open_input(path);
  Fnv1a h;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    h.update(std::string_view(buf, static_cast<std::size_t>(in.gcount())));
  }
  return to_hex(h.digest());
}

std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& value) {
  std::filesystem::path p(value);
  return p.is_absolute() ? p : base / p;
}

// Window-filtered, high-quality events in time order.
std::vector<const InteractionEvent*> usable_events(const UserHistory& history,
                                                   std::int64_t window, std::int64_t as_of,
                                                   double quality_threshold) {
  std::vector<const InteractionEvent*> out;
  for (const auto& e : history.events) {
    if (e.timestamp <= as_of - window || e.timestamp > as_of) continue;
    if (e.quality < quality_threshold || !(e.quality > 0.0)) continue;
    out.push_back(&e);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto* a, const auto* b) { return a->timestamp < b->timestamp; });
  return out;
}

std::string source_name(EntrySource s) { return s == EntrySource::kModel ? "model" : "fallback"; }

}  // namespace

void ServiceConfig::validate() const {
  if (context_size != 2) {
    throw ConfigError("context_size must be 2 for a pair-keyed table, got " +
                      std::to_string(context_size));
  }
  if (planning_level < 1 || planning_level > kTreeLevels) {
    throw ConfigError("planning_level must lie in 1..4");
  }
  if (history_window <= 0) throw ConfigError("history window must be positive");
  if (k_default < 1) throw ConfigError("k_default must be at least 1");
  if (resample_budget < 0) throw ConfigError("resample_budget must be non-negative");
  if (listen_port < 0 || listen_port > 65535) throw ConfigError("listen port out of range");
}

void apply_listen_override(ServiceConfig& config) {
  const char* v = std::getenv("EXPLORE_LISTEN");
  if (!v || !*v) return;
  const std::string s(v);
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw ConfigError("EXPLORE_LISTEN must be host:port");
  config.listen_host = s.substr(0, colon);
  try {
    config.listen_port = std::stoi(s.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("EXPLORE_LISTEN has a bad port: '" + s + "'");
  }
}

ServiceConfig load_service_config(const std::filesystem::path& path) {
  const ConfigMap c = read_config_file(path);
  const auto base = path.parent_path();
  ServiceConfig out;
  if (auto v = config_int(c, "service.context_size")) out.context_size = static_cast<int>(*v);
  if (auto v = config_int(c, "service.planning_level")) out.planning_level = static_cast<int>(*v);
  if (auto v = config_double(c, "service.history_window_days")) {
    out.history_window = static_cast<std::int64_t>(*v * kSecondsPerDay);
  }
  if (auto v = config_double(c, "service.quality_threshold")) out.quality_threshold = *v;
  if (auto v = config_int(c, "service.k_default")) {
    if (*v < 1) throw ConfigError("k_default must be at least 1");
    out.k_default = static_cast<std::size_t>(*v);
  }
  if (auto v = config_int(c, "service.resample_budget")) out.resample_budget = static_cast<int>(*v);
  if (auto v = config_string(c, "artifacts.corpus")) out.corpus_path = resolve_path(base, *v);
  if (auto v = config_string(c, "artifacts.clusters")) out.clusters_path = resolve_path(base, *v);
  if (auto v = config_string(c, "artifacts.table")) out.table_path = resolve_path(base, *v);
  if (auto v = config_string(c, "artifacts.scorer")) out.scorer_path = resolve_path(base, *v);
  if (auto v = config_string(c, "artifacts.events")) out.events_path = resolve_path(base, *v);
  if (auto v = config_string(c, "listen.host")) out.listen_host = *v;
  if (auto v = config_int(c, "listen.port")) out.listen_port = static_cast<int>(*v);
  if (auto v = config_string(c, "random.mode")) {
    if (*v == "seeded") {
      out.seed_mode = SeedMode::kSeeded;
    } else if (*v == "entropy") {
      out.seed_mode = SeedMode::kEntropy;
    } else {
      throw ConfigError("random.mode must be 'seeded' or 'entropy', got '" + *v + "'");
    }
  }
  if (auto v = config_int(c, "random.seed")) out.seed = static_cast<std::uint64_t>(*v);
  apply_listen_override(out);
  out.validate();
  return out;
}

void check_consistency(const ServingState& state, int planning_level) {
  const auto& ids = state.tree.item_ids();
  if (ids.size() != state.corpus.size()) {
    throw ConsistencyError("cluster tree covers " + std::to_string(ids.size()) +
                           " items but the corpus has " + std::to_string(state.corpus.size()));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != state.corpus.item(i).item_id) {
      throw ConsistencyError("cluster tree item " + std::to_string(i) + " is '" + ids[i] +
                             "' but the corpus has '" + state.corpus.item(i).item_id + "'");
    }
  }
  if (state.table.provenance().tree_fingerprint != state.tree.fingerprint()) {
    throw ConsistencyError("transition table was built from tree " +
                           to_hex(state.table.provenance().tree_fingerprint) +
                           ", loaded tree is " + to_hex(state.tree.fingerprint()));
  }
  if (state.table.level() != planning_level) {
    throw ConsistencyError("transition table is at level " + std::to_string(state.table.level()) +
                           ", service plans at level " + std::to_string(planning_level));
  }
  if (state.table.num_clusters() != state.tree.num_clusters(planning_level)) {
    throw ConsistencyError("transition table size does not match the tree level");
  }
  if (!state.scorer) throw ConsistencyError("no scorer loaded");
  if (state.scorer->num_items() != state.corpus.size()) {
    throw ConsistencyError("scorer covers a different item count than the corpus");
  }
  if (const auto* ref = dynamic_cast<const ReferenceScorer*>(state.scorer.get())) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ref->item_ids()[i] != ids[i]) {
        throw ConsistencyError("scorer item order differs from the corpus at index " +
                               std::to_string(i));
      }
    }
  }
}

ServingState load_serving_state(const ServiceConfig& config) {
  config.validate();
  ServingState state;
  state.corpus = load_corpus(config.corpus_path);
  state.tree = load_cluster_tree(config.clusters_path);
  state.table = load_table(config.table_path);
  state.scorer = std::make_shared<ReferenceScorer>(load_scorer(config.scorer_path));
  state.artifact_hashes["corpus"] = file_hash(config.corpus_path);
  state.artifact_hashes["clusters"] = file_hash(config.clusters_path);
  state.artifact_hashes["table"] = file_hash(config.table_path);
  state.artifact_hashes["scorer"] = file_hash(config.scorer_path);
  state.artifact_hashes["tree_fingerprint"] = to_hex(state.tree.fingerprint());
  if (!config.events_path.empty()) {
    const auto events = load_events(config.events_path, &state.corpus);
    for (auto& h : group_by_user(events)) state.histories.emplace(h.user_id, std::move(h));
    state.artifact_hashes["events"] = file_hash(config.events_path);
  }
  check_consistency(state, config.planning_level);
  return state;
}

ContextSample sample_context(const UserHistory& history, const ClusterTree& tree, int level,
                             int context_size, std::int64_t window, std::int64_t as_of,
                             double quality_threshold, int resample_budget,
                             std::mt19937_64& rng) {
  if (context_size < 1) throw ArgumentError("context size must be positive");
  std::vector<const InteractionEvent*> pool;
  std::vector<ClusterId> cluster;
  for (const auto* e : usable_events(history, window, as_of, quality_threshold)) {
    if (auto idx = tree.item_index(e->item_id)) {
      pool.push_back(e);
      cluster.push_back(tree.cluster_of(*idx, level));
    }
  }
  if (pool.empty()) {
    throw ColdStartError("user '" + history.user_id + "' has no usable history in the window");
  }
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(context_size), pool.size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  ContextSample out;
  std::vector<std::size_t> picked;
  for (int attempt = 0; attempt <= resample_budget; ++attempt) {
    ++out.draws;
    picked.clear();
    std::vector<double> weight(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) weight[i] = pool[i]->quality;
    for (std::size_t d = 0; d < k; ++d) {
      double total = 0.0;
      for (double w : weight) total += w;
      double r = unif(rng) * total;
      std::size_t chosen = pool.size();
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (weight[i] <= 0.0) continue;
        chosen = i;
        if (r < weight[i]) break;
        r -= weight[i];
      }
      picked.push_back(chosen);
      weight[chosen] = 0.0;
    }
    std::sort(picked.begin(), picked.end());  // pool is time ordered
    std::vector<ClusterId> distinct;
    for (std::size_t i : picked) distinct.push_back(cluster[i]);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() == static_cast<std::size_t>(context_size)) break;
    if (pool.size() < static_cast<std::size_t>(context_size)) break;  // resampling cannot help
  }
  for (std::size_t i : picked) {
    out.clusters.push_back(cluster[i]);
    out.item_ids.push_back(pool[i]->item_id);
  }
  while (out.clusters.size() < static_cast<std::size_t>(context_size)) {
    out.clusters.push_back(out.clusters.back());
    out.item_ids.push_back(out.item_ids.back());
  }
  return out;
}

RecommendResponse recommend(const RecommendRequest& request, const ServiceConfig& config,
                            const ServingState& state) {
  std::mt19937_64 rng;
  if (config.seed_mode == SeedMode::kEntropy) {
    std::random_device rd;
    rng.seed((static_cast<std::uint64_t>(rd()) << 32) ^ rd());
    return recommend(request, config, state, rng);
  }
  Fnv1a key;
  if (request.user_id) {
    key.update(*request.user_id);
  } else if (request.history) {
    for (const auto& e : request.history->events) {
      key.update(e.item_id);
      key.update(static_cast<std::uint64_t>(e.timestamp));
    }
  }
  std::int64_t as_of = request.as_of.value_or(0);
  if (!request.as_of) {
    const UserHistory* h = request.history ? &*request.history : nullptr;
    if (!h && request.user_id) {
      auto it = state.histories.find(*request.user_id);
      if (it != state.histories.end()) h = &it->second;
    }
    if (h) {
      for (const auto& e : h->events) as_of = std::max(as_of, e.timestamp);
    }
  }
  rng.seed(derive_seed(config.seed, {key.digest(), static_cast<std::uint64_t>(as_of)}));
  return recommend(request, config, state, rng);
}

RecommendResponse recommend(const RecommendRequest& request, const ServiceConfig& config,
                            const ServingState& state, std::mt19937_64& rng) {
  static const UserHistory kEmpty;
  const UserHistory* history = &kEmpty;
  if (request.history) {
    history = &*request.history;
  } else if (request.user_id) {
    auto it = state.histories.find(*request.user_id);
    if (it != state.histories.end()) history = &it->second;
  } else {
    throw ArgumentError("request needs a user_id or an inline history");
  }
  const std::size_t k = request.k.value_or(config.k_default);
  if (k < 1) throw ArgumentError("k must be at least 1");
  std::int64_t as_of = 0;
  if (request.as_of) {
    as_of = *request.as_of;
  } else {
    for (const auto& e : history->events) as_of = std::max(as_of, e.timestamp);
  }

  std::vector<std::size_t> recent;
  for (const auto* e : usable_events(*history, config.history_window, as_of,
                                     config.quality_threshold)) {
    if (auto idx = state.corpus.find(e->item_id)) recent.push_back(*idx);
  }

  RecommendResponse out;
  ContextSample sample;
  try {
    sample = sample_context(*history, state.tree, config.planning_level, config.context_size,
                            config.history_window, as_of, config.quality_threshold,
                            config.resample_budget, rng);
  } catch (const ColdStartError&) {
    auto r = unrestricted_retrieval(*state.scorer, state.corpus, recent, k);
    out.items = std::move(r.ranked);
    out.truncated = r.truncated;
    out.fallback = true;
    return out;
  }
  const ContextPair pair{sample.clusters[0], sample.clusters[1]};
  const TableEntry& entry = state.table.entry(pair.first.index, pair.second.index);
  const ClusterId target{config.planning_level, entry.target};
  auto r = restricted_retrieval(*state.scorer, state.tree, recent, target, k);
  out.novel_cluster = target;
  out.description = state.tree.description_text(target);
  out.items = std::move(r.ranked);
  out.truncated = r.truncated;
  out.context_pair = pair;
  out.table_source = entry.source;
  return out;
}

RecommendRequest request_from_json(const json& j) {
  if (!j.is_object()) throw ArgumentError("request body must be a JSON object");
  RecommendRequest r;
  try {
    if (j.contains("user_id") && !j["user_id"].is_null()) {
      r.user_id = j["user_id"].get<std::string>();
    }
    if (j.contains("k") && !j["k"].is_null()) {
      const auto k = j["k"].get<std::int64_t>();
      if (k < 1) throw ArgumentError("k must be at least 1");
      r.k = static_cast<std::size_t>(k);
    }
    if (j.contains("as_of") && !j["as_of"].is_null()) r.as_of = j["as_of"].get<std::int64_t>();
    if (j.contains("history") && !j["history"].is_null()) {
      UserHistory h;
      h.user_id = r.user_id.value_or("");
      for (const auto& e : j["history"]) {
        h.events.push_back({h.user_id, e.at("item_id").get<std::string>(),
                            e.at("timestamp").get<std::int64_t>(), e.value("quality", 1.0)});
      }
      r.history = std::move(h);
    }
  } catch (const json::exception& e) {
    throw ArgumentError(std::string("malformed request: ") + e.what());
  }
  if (!r.user_id && !r.history) throw ArgumentError("request needs a user_id or a history");
  return r;
}

json response_to_json(const RecommendResponse& response, const ServingState& state) {
  json j;
  if (response.novel_cluster) {
    j["novel_cluster"] = {{"level", response.novel_cluster->level},
                          {"id", response.novel_cluster->index},
                          {"description", response.description}};
  } else {
    j["novel_cluster"] = nullptr;
  }
  j["items"] = json::array();
  for (const auto& s : response.items) j["items"].push_back({{"item_id", s.item_id}, {"score", s.score}});
  if (response.context_pair) {
    const auto& p = *response.context_pair;
    j["context_pair"] = json::array(
        {{{"id", p.first.index}, {"description", state.tree.description_text(p.first)}},
         {{"id", p.second.index}, {"description", state.tree.description_text(p.second)}}});
  } else {
    j["context_pair"] = nullptr;
  }
  j["table_source"] = response.table_source ? json(source_name(*response.table_source)) : json();
  j["fallback"] = response.fallback;
  j["truncated"] = response.truncated;
  return j;
}

// ---------------------------------------------------------------------------
// HTTP server

struct RecommendServer::Impl {
  ServiceConfig config;
  std::shared_ptr<const ServingState> state;
  std::ostream* access_log;
  std::mutex log_mu;
  httplib::Server server;
  std::thread thread;

  void log(const httplib::Request& req, const httplib::Response& res, double millis,
           const std::string& user) {
    if (!access_log) return;
    json j;
    j["ts"] = utc_timestamp();
    j["method"] = req.method;
    j["path"] = req.path;
    j["status"] = res.status;
    j["latency_ms"] = millis;
    if (!user.empty()) j["user_id"] = user;
    std::lock_guard lock(log_mu);
    *access_log << j.dump() << '\n';
    access_log->flush();
  }

  void install() {
    // Small JSON replies; Nagle plus delayed ACK would add tens of ms each.
    server.set_tcp_nodelay(true);
    server.Post("/recommend", [this](const httplib::Request& req, httplib::Response& res) {
      const auto start = std::chrono::steady_clock::now();
      std::string user;
      try {
        const auto request = request_from_json(json::parse(req.body));
        user = request.user_id.value_or("");
        const auto response = recommend(request, config, *state);
        res.set_content(response_to_json(response, *state).dump(), "application/json");
      } catch (const json::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", std::string("malformed JSON: ") + e.what()}}.dump(),
                        "application/json");
      } catch (const ArgumentError& e) {
        res.status = 400;
        res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      } catch (const std::exception& e) {
        res.status = 500;
        res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      }
      log(req, res,
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
              .count(),
          user);
    });
    server.Get("/healthz", [this](const httplib::Request& req, httplib::Response& res) {
      const auto start = std::chrono::steady_clock::now();
      json j;
      j["status"] = "ok";
      j["artifacts"] = state->artifact_hashes;
      j["planning_level"] = config.planning_level;
      j["table_entries"] = state->table.size();
      j["items"] = state->corpus.size();
      res.set_content(j.dump(), "application/json");
      log(req, res,
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
              .count(),
          "");
    });
  }

  int bind() {
    const int port = config.listen_port == 0
                         ? server.bind_to_any_port(config.listen_host)
                         : (server.bind_to_port(config.listen_host, config.listen_port)
                                ? config.listen_port
                                : -1);
    if (port < 0) {
      throw Error("cannot listen on " + config.listen_host + ":" +
                  std::to_string(config.listen_port));
    }
    return port;
  }
};

RecommendServer::RecommendServer(ServiceConfig config, std::shared_ptr<const ServingState> state,
                                 std::ostream* access_log)
    : impl_(std::make_unique<Impl>()) {
  config.validate();
  if (!state) throw ArgumentError("server needs a serving state");
  check_consistency(*state, config.planning_level);
  impl_->config = std::move(config);
  impl_->state = std::move(state);
  impl_->access_log = access_log;
  impl_->install();
}

RecommendServer::~RecommendServer() { stop(); }

int RecommendServer::start() {
  const int port = impl_->bind();
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void RecommendServer::run() {
  impl_->bind();
  impl_->server.listen_after_bind();
}

void RecommendServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace explore
