#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "explore/errors.hpp"
#include "explore/serving.hpp"
#include "explore/util.hpp"
#include "httplib.h"
#include "test_support.hpp"

using namespace explore;
namespace fs = std::filesystem;

namespace {

constexpr std::int64_t kDay = kSecondsPerDay;

UserHistory history_of(const std::string& user,
                       std::vector<std::tuple<std::string, std::int64_t, double>> events) {
  UserHistory h{user, {}};
  for (auto& [item, t, q] : events) h.events.push_back({user, item, t, q});
  return h;
}

std::vector<InteractionEvent> synth_events(const Corpus& corpus, int users, int per_user,
                                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> item(0, corpus.size() - 1);
  std::uniform_real_distribution<double> q(0.0, 1.0);
  std::vector<InteractionEvent> out;
  for (int u = 0; u < users; ++u) {
    for (int t = 0; t < per_user; ++t) {
      out.push_back({"user" + std::to_string(u), corpus.item(item(rng)).item_id,
                     1000 + t * 3600, q(rng)});
    }
  }
  return out;
}

struct Desk {
  ServiceConfig config;
  std::shared_ptr<ServingState> state = std::make_shared<ServingState>();

  explicit Desk(std::size_t items = 400) {
    state->corpus = synth_corpus(items, 12, 8, 4);
    ClusterBuildOptions opts;
    opts.counts = {4, 16, 32, 64};
    opts.seed = 1;
    state->tree = build_cluster_tree(state->corpus, opts);
    const EmbeddingFallbackGenerator stub(state->tree, 2);
    state->table = bulk_infer(stub, state->tree, 2, stub);
    const auto events = synth_events(state->corpus, 40, 30, 9);
    state->scorer = std::make_shared<ReferenceScorer>(train_reference_scorer(events, state->corpus));
    for (auto& h : group_by_user(events)) state->histories.emplace(h.user_id, std::move(h));
    config.seed = 11;
  }
};

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("explore_serving_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Writes a consistent artifact set and a serve.toml pointing at it.
fs::path write_artifacts(const Desk& desk, const fs::path& dir) {
  save_corpus(desk.state->corpus, dir / "items.jsonl");
  save_cluster_tree(desk.state->tree, dir / "clusters.json");
  save_table(desk.state->table, dir / "table.tsv");
  save_scorer(dynamic_cast<const ReferenceScorer&>(*desk.state->scorer), dir / "scorer.model");
  std::vector<InteractionEvent> events;
  for (const auto& [id, h] : desk.state->histories) {
    events.insert(events.end(), h.events.begin(), h.events.end());
  }
  save_events(events, dir / "events.jsonl");
  std::ofstream toml(dir / "serve.toml");
  toml << "[service]\ncontext_size = 2\nplanning_level = 2\nhistory_window_days = 30\n"
          "quality_threshold = 0.5\nk_default = 7\nresample_budget = 5\n"
          "[artifacts]\ncorpus = \"items.jsonl\"\nclusters = \"clusters.json\"\n"
          "table = \"table.tsv\"\nscorer = \"scorer.model\"\nevents = \"events.jsonl\"\n"
          "[listen]\nhost = \"127.0.0.1\"\nport = 0\n[random]\nmode = \"seeded\"\nseed = 5\n";
  return dir / "serve.toml";
}

}  // namespace

TEST_CASE("sample_context prefers distinct clusters and orders by recency") {
  const auto tree = explore::testing::numbered_tree(4, 2);
  using explore::testing::item_name;
  // A at t=1,3 and B at t=2,4, equal quality.
  const auto h = history_of("u", {{item_name(0, 0), 1, 1.0},
                                  {item_name(1, 0), 2, 1.0},
                                  {item_name(0, 1), 3, 1.0},
                                  {item_name(1, 1), 4, 1.0}});
  std::mt19937_64 rng(1);
  std::map<std::pair<int, int>, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto s = sample_context(h, tree, 2, 2, 30 * kDay, 4, 0.5, 5, rng);
    ++counts[{s.clusters[0].index, s.clusters[1].index}];
  }
  // Oracle: one draw repeats a cluster with p = 1/3, so six draws leave a
  // self-pair with p = 3^-6 ~ 0.0014. Of the four distinct event pairs three
  // end in B.
  const double self = (counts[{0, 0}] + counts[{1, 1}]) / static_cast<double>(n);
  CHECK(self < 0.005);
  const double ab = counts[{0, 1}] / static_cast<double>(n);
  CHECK(ab == doctest::Approx(0.75 * (1 - self)).epsilon(0.05));
  CHECK(counts.size() <= 4);
}

TEST_CASE("sample_context falls back to a self-pair") {
  const auto tree = explore::testing::numbered_tree(4, 3);
  using explore::testing::item_name;
  std::mt19937_64 rng(2);
  const auto one_cluster = history_of("u", {{item_name(2, 0), 1, 0.9}, {item_name(2, 1), 2, 0.8}});
  auto s = sample_context(one_cluster, tree, 2, 2, 30 * kDay, 10, 0.5, 5, rng);
  CHECK(s.clusters == std::vector<ClusterId>{{2, 2}, {2, 2}});
  CHECK(s.draws == 6);
  const auto single = history_of("u", {{item_name(3, 0), 1, 0.9}});
  s = sample_context(single, tree, 2, 2, 30 * kDay, 10, 0.5, 5, rng);
  CHECK(s.clusters == std::vector<ClusterId>{{2, 3}, {2, 3}});
}

TEST_CASE("sample_context filters by window and quality") {
  const auto tree = explore::testing::numbered_tree(4);
  using explore::testing::item_name;
  std::mt19937_64 rng(3);
  const auto zero = history_of("u", {{item_name(0, 0), 1, 0.0}, {item_name(1, 0), 2, 0.0}});
  CHECK_THROWS_AS(sample_context(zero, tree, 2, 2, 30 * kDay, 10, 0.0, 5, rng), ColdStartError);
  const auto old = history_of("u", {{item_name(0, 0), 0, 0.9}, {item_name(1, 0), 40 * kDay, 0.9}});
  const auto s = sample_context(old, tree, 2, 2, 30 * kDay, 40 * kDay, 0.5, 5, rng);
  CHECK(s.clusters == std::vector<ClusterId>{{2, 1}, {2, 1}});
  const auto low = history_of("u", {{item_name(0, 0), 1, 0.3}});
  CHECK_THROWS_AS(sample_context(low, tree, 2, 2, 30 * kDay, 10, 0.5, 5, rng), ColdStartError);
}

TEST_CASE("recommend returns novel, pure and reproducible slates") {
  Desk desk;
  int served = 0;
  for (const auto& [user, h] : desk.state->histories) {
    RecommendRequest req;
    req.user_id = user;
    const auto r = recommend(req, desk.config, *desk.state);
    if (r.fallback) continue;
    ++served;
    REQUIRE(r.novel_cluster);
    REQUIRE(r.context_pair);
    CHECK(*r.novel_cluster != r.context_pair->first);
    CHECK(*r.novel_cluster != r.context_pair->second);
    CHECK(r.items.size() == desk.config.k_default);
    for (const auto& s : r.items) {
      const auto idx = desk.state->corpus.index_of(s.item_id);
      CHECK(desk.state->tree.cluster_of(idx, 2) == *r.novel_cluster);
    }
    const auto again = recommend(req, desk.config, *desk.state);
    CHECK(again.items == r.items);
    CHECK(again.context_pair == r.context_pair);
  }
  CHECK(served > 30);
}

TEST_CASE("cold-start requests fall back to unrestricted retrieval") {
  Desk desk;
  RecommendRequest req;
  req.user_id = "stranger";
  req.k = 5;
  auto r = recommend(req, desk.config, *desk.state);
  CHECK(r.fallback);
  CHECK_FALSE(r.novel_cluster);
  CHECK(r.items.size() == 5);
  req.user_id.reset();
  req.history = history_of("", {{desk.state->corpus.item(0).item_id, 1, 0.1}});
  r = recommend(req, desk.config, *desk.state);
  CHECK(r.fallback);
  CHECK_THROWS_AS(recommend(RecommendRequest{}, desk.config, *desk.state), ArgumentError);
}

TEST_CASE("serving state loads a consistent artifact set and rejects mismatches") {
  Desk desk;
  TempDir tmp;
  const auto toml = write_artifacts(desk, tmp.path);
  const auto config = load_service_config(toml);
  CHECK(config.k_default == 7);
  CHECK(config.seed == 5);
  CHECK(config.listen_port == 0);
  const auto state = load_serving_state(config);
  CHECK(state.table.size() == 256);
  CHECK(state.histories.size() == 40);
  CHECK(state.artifact_hashes.count("table") == 1);

  // Table built from a different tree.
  const auto other_corpus = synth_corpus(400, 12, 8, 5);
  ClusterBuildOptions opts;
  opts.counts = {4, 16, 32, 64};
  const auto other_tree = build_cluster_tree(other_corpus, opts);
  const EmbeddingFallbackGenerator stub(other_tree, 2);
  save_table(bulk_infer(stub, other_tree, 2, stub), tmp.path / "table.tsv");
  CHECK_THROWS_AS(load_serving_state(config), ConsistencyError);

  // Corrupt one byte of line 3.
  save_table(desk.state->table, tmp.path / "table.tsv");
  std::string text;
  {
    std::ifstream in(tmp.path / "table.tsv");
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  std::size_t pos = 0;
  for (int i = 0; i < 2; ++i) pos = text.find('\n', pos) + 1;
  text[pos] = 'x';
  {
    std::ofstream out(tmp.path / "table.tsv");
    out << text;
  }
  try {
    load_serving_state(config);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("service config validation and listen override") {
  TempDir tmp;
  {
    std::ofstream out(tmp.path / "bad.toml");
    out << "[service]\ncontext_size = 3\n";
  }
  CHECK_THROWS_AS(load_service_config(tmp.path / "bad.toml"), ConfigError);
  {
    std::ofstream out(tmp.path / "ok.toml");
    out << "[listen]\nport = 9000\n";
  }
  setenv("EXPLORE_LISTEN", "0.0.0.0:9123", 1);
  const auto c = load_service_config(tmp.path / "ok.toml");
  unsetenv("EXPLORE_LISTEN");
  CHECK(c.listen_host == "0.0.0.0");
  CHECK(c.listen_port == 9123);
  CHECK_THROWS_AS(load_service_config(tmp.path / "missing.toml"), ConfigError);
}

TEST_CASE("HTTP endpoints answer recommend and healthz") {
  Desk desk;
  desk.config.listen_port = 0;
  std::ostringstream log;
  RecommendServer server(desk.config, desk.state, &log);
  const int port = server.start();
  httplib::Client client("127.0.0.1", port);

  auto health = client.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(nlohmann::json::parse(health->body)["status"] == "ok");

  auto res = client.Post("/recommend", R"({"user_id":"user3","k":4})", "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  const auto body = nlohmann::json::parse(res->body);
  CHECK(body["items"].size() == 4);
  CHECK(body.contains("fallback"));
  if (!body["fallback"].get<bool>()) {
    const int target = body["novel_cluster"]["id"];
    CHECK(body["context_pair"][0]["id"] != target);
    CHECK(body["context_pair"][1]["id"] != target);
  }

  res = client.Post("/recommend", "{oops", "application/json");
  REQUIRE(res);
  CHECK(res->status == 400);
  res = client.Post("/recommend", R"({"k":3})", "application/json");
  REQUIRE(res);
  CHECK(res->status == 400);
  server.stop();

  const auto lines = split(log.str(), '\n');
  CHECK(std::count_if(lines.begin(), lines.end(), [](const auto& l) { return !l.empty(); }) == 4);
  CHECK(lines[0].find("\"path\":\"/healthz\"") != std::string::npos);
}

TEST_CASE("concurrent requests match sequential results") {
  Desk desk;
  std::vector<std::string> users;
  for (const auto& [u, h] : desk.state->histories) users.push_back(u);
  std::sort(users.begin(), users.end());
  std::vector<RecommendResponse> sequential;
  for (const auto& u : users) {
    RecommendRequest r;
    r.user_id = u;
    sequential.push_back(recommend(r, desk.config, *desk.state));
  }
  std::vector<RecommendResponse> parallel(users.size());
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (std::size_t i = static_cast<std::size_t>(t); i < users.size(); i += 4) {
        RecommendRequest r;
        r.user_id = users[i];
        parallel[i] = recommend(r, desk.config, *desk.state);
      }
    });
  }
  for (auto& th : threads) th.join();
  for (std::size_t i = 0; i < users.size(); ++i) {
    CHECK(parallel[i].items == sequential[i].items);
    CHECK(parallel[i].novel_cluster == sequential[i].novel_cluster);
  }
}
