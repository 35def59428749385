#include <atomic>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "explore/errors.hpp"
#include "explore/genpolicy.hpp"
#include "explore/remote_generator.hpp"
#include "explore/util.hpp"
#include "httplib.h"
#include "json.hpp"
#include "test_support.hpp"

using namespace explore;
using explore::testing::flat_tree;
using explore::testing::numbered_tree;

namespace {

ClusterId L2(int i) { return {2, i}; }

class ConstantGenerator : public InterestGenerator {
 public:
  explicit ConstantGenerator(std::string text) : text_(std::move(text)) {}
  std::string id() const override { return "constant"; }
  std::string generate(std::span<const std::string>) const override { return text_; }

 private:
  std::string text_;
};

class ThrowingGenerator : public InterestGenerator {
 public:
  std::string id() const override { return "throwing"; }
  std::string generate(std::span<const std::string>) const override {
    throw TransportError("offline");
  }
};

// Fails the first call for every context, then defers to `inner`.
class FlakyGenerator : public InterestGenerator {
 public:
  explicit FlakyGenerator(const InterestGenerator& inner) : inner_(inner) {}
  std::string id() const override { return "flaky"; }
  std::string generate(std::span<const std::string> context) const override {
    std::lock_guard lock(mu_);
    const std::string key = context[0] + "|" + context[1];
    if (seen_.insert(key).second) return "???";
    return inner_.generate(context);
  }

 private:
  const InterestGenerator& inner_;
  mutable std::mutex mu_;
  mutable std::set<std::string> seen_;
};

struct MockServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;

  MockServer() = default;
  void start() {
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~MockServer() {
    server.stop();
    if (thread.joinable()) thread.join();
  }
  RemoteEndpoint endpoint() const {
    RemoteEndpoint e;
    e.url = "http://127.0.0.1:" + std::to_string(port) + "/generate";
    e.token = "secret";
    e.timeout = std::chrono::milliseconds(2000);
    e.initial_backoff = std::chrono::milliseconds(5);
    return e;
  }
};

}  // namespace

TEST_CASE("match_generation maps normalized text to exactly one cluster") {
  const auto tree = flat_tree({{"jazz", "piano"}, {"lo-fi", "beats"}, {"music", "production"}});
  auto out = match_generation("jazz piano", tree, 2);
  REQUIRE(out.matched);
  CHECK(*out.matched == L2(0));
  CHECK(out.novelty_ok);
  out = match_generation("  Jazz   Piano ", tree, 2);
  REQUIRE(out.matched);
  CHECK(*out.matched == L2(0));
  CHECK(match_generation("LO-FI beats!", tree, 2).matched == L2(1));
  CHECK_FALSE(match_generation("underwater basket weaving", tree, 2).matched);
  CHECK_FALSE(match_generation("jazz", tree, 2).matched);
  const ClusterId ctx[] = {L2(0), L2(1)};
  out = match_generation("jazz piano", tree, 2, ctx);
  CHECK(out.matched);
  CHECK_FALSE(out.novelty_ok);
  // Match soundness: the matched description normalizes to the normalized raw text.
  out = match_generation("Music, Production", tree, 2);
  REQUIRE(out.matched);
  CHECK(normalize_text(tree.description_text(*out.matched)) == normalize_text(out.raw));
}

TEST_CASE("enumerate_context_pairs lists all ordered pairs row-major") {
  const auto three = enumerate_context_pairs(numbered_tree(3), 2);
  std::vector<ContextPair> oracle;
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) oracle.push_back({L2(a), L2(b)});
  }
  CHECK(three == oracle);
  const auto one = enumerate_context_pairs(numbered_tree(1), 2);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == ContextPair{L2(0), L2(0)});
  CHECK(enumerate_context_pairs(2, 761).size() == 579121);
}

TEST_CASE("embedding fallback picks the nearest novel centroid") {
  const auto tree = numbered_tree(5);  // centroids at x = 0..4
  // Midpoint of 0 and 2 is cluster 1.
  CHECK(embedding_fallback_generate({L2(0), L2(2)}, tree, 2) == "topic1");
  // Midpoint of 1 and 2 lies 1.5 from both 0 and 3; the lower index wins.
  CHECK(embedding_fallback_generate({L2(1), L2(2)}, tree, 2) == "topic0");
  // Self-pair: nearest other cluster, lower index on ties.
  CHECK(embedding_fallback_generate({L2(2), L2(2)}, tree, 2) == "topic1");

  const auto small = numbered_tree(3);
  for (auto [a, b] : {std::pair{0, 1}, {1, 0}}) {
    CHECK(embedding_fallback_generate({L2(a), L2(b)}, small, 2) == "topic2");
  }
  CHECK_THROWS_AS(embedding_fallback_generate({L2(0), L2(1)}, numbered_tree(2), 2),
                  ArgumentError);
}

TEST_CASE("memorizing generator recalls seen pairs and generalizes by nearest pair") {
  const auto tree = numbered_tree(8);  // centroids at x = 0..7
  CuratedDataset ds;
  ds.examples = {{L2(0), L2(1), L2(5), 3}, {L2(0), L2(1), L2(6), 1}, {L2(0), L2(1), L2(6), 1},
                 {L2(6), L2(7), L2(2), 1}};
  // Two records for label 6 beat one record with higher support.
  CHECK(memorizing_generate(ds, tree, {L2(0), L2(1)}) == "topic6");
  CHECK(memorizing_generate(ds, tree, {L2(6), L2(7)}) == "topic2");

  // Oracle: nearest seen pair by |a - p1| + |b - p2|, skipping collisions.
  const MemorizingGenerator gen(ds, tree);
  const std::vector<std::pair<ContextPair, int>> seen = {{{L2(0), L2(1)}, 6},
                                                         {{L2(6), L2(7)}, 2}};
  for (int a = 0; a < 8; ++a) {
    for (int b = 0; b < 8; ++b) {
      int expected = -1;
      double best = 1e300;
      for (const auto& [p, label] : seen) {
        if (p == ContextPair{L2(a), L2(b)}) {
          expected = label;
          best = -1;
          break;
        }
        if (label == a || label == b) continue;
        const double d = std::abs(a - p.first.index) + std::abs(b - p.second.index);
        if (d < best) {
          best = d;
          expected = label;
        }
      }
      if (expected < 0) continue;
      CHECK(gen.predict({L2(a), L2(b)}) == L2(expected));
    }
  }
  CHECK(memorizing_generate(ds, tree, {L2(1), L2(1)}) == "topic6");
  CHECK(memorizing_generate(ds, tree, {L2(5), L2(6)}) == "topic2");
  CHECK_THROWS_AS(MemorizingGenerator(CuratedDataset{}, tree), ArgumentError);
}

TEST_CASE("bulk_infer with an exact generator matches every pair") {
  const auto tree = numbered_tree(16);
  const EmbeddingFallbackGenerator stub(tree, 2);
  BulkInferOptions opts;
  opts.built_at = "2024-01-01T00:00:00Z";
  const auto table = bulk_infer(stub, tree, 2, stub, opts);
  CHECK(table.size() == 256);
  CHECK(table.provenance().match_rate == 1.0);
  CHECK(table.provenance().fallback_count == 0);
  CHECK(table.provenance().tree_fingerprint == tree.fingerprint());
  for (int a = 0; a < 16; ++a) {
    for (int b = 0; b < 16; ++b) {
      CHECK(table.lookup(a, b) != a);
      CHECK(table.lookup(a, b) != b);
    }
  }
  opts.concurrency = 4;
  const auto parallel = bulk_infer(stub, tree, 2, stub, opts);
  std::ostringstream t1, s1, t2, s2;
  write_table(table, t1, s1);
  write_table(parallel, t2, s2);
  CHECK(t1.str() == t2.str());
  CHECK(s1.str() == s2.str());
}

TEST_CASE("bulk_infer falls back for unmatched, non-novel or failing generations") {
  const auto tree = numbered_tree(16);
  const EmbeddingFallbackGenerator stub(tree, 2);
  const ConstantGenerator gibberish("zxqv blorp");
  auto table = bulk_infer(gibberish, tree, 2, stub);
  CHECK(table.provenance().match_rate == 0.0);
  CHECK(table.provenance().fallback_count == 256);
  CHECK(table.entry(3, 4).source == EntrySource::kFallback);

  // "topic0" is valid except where cluster 0 is in the context.
  const ConstantGenerator fixed("topic0");
  table = bulk_infer(fixed, tree, 2, stub);
  CHECK(table.provenance().fallback_count == 31);
  CHECK(table.lookup(0, 5) != 0);
  CHECK(table.lookup(4, 5) == 0);

  const ThrowingGenerator throwing;
  CHECK(bulk_infer(throwing, tree, 2, stub).provenance().fallback_count == 256);

  const FlakyGenerator flaky(stub);
  CHECK(bulk_infer(flaky, tree, 2, stub).provenance().match_rate == 1.0);
  BulkInferOptions no_retry;
  no_retry.retries = 0;
  const FlakyGenerator flaky_again(stub);
  CHECK(bulk_infer(flaky_again, tree, 2, stub, no_retry).provenance().match_rate == 0.0);
}

TEST_CASE("bulk_infer reports pairs the fallback cannot fill") {
  const auto tree = numbered_tree(4);
  const ConstantGenerator fixed("topic0");
  try {
    bulk_infer(fixed, tree, 2, fixed);
    FAIL("expected a build error");
  } catch (const BuildError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("7 pair(s)") != std::string::npos);
    CHECK(msg.find("(0, 0)") != std::string::npos);
    CHECK(msg.find("(3, 0)") != std::string::npos);
  }
}

TEST_CASE("transition tables round-trip and reject corrupt files") {
  const auto tree = numbered_tree(5);
  const EmbeddingFallbackGenerator stub(tree, 2);
  const auto table = bulk_infer(stub, tree, 2, stub);
  std::ostringstream tsv, sidecar;
  write_table(table, tsv, sidecar);
  {
    std::istringstream t(tsv.str()), s(sidecar.str());
    const auto back = read_table(t, s);
    CHECK(back.label_frequencies() == table.label_frequencies());
    CHECK(back.provenance().tree_fingerprint == tree.fingerprint());
    CHECK(back.provenance().built_at == table.provenance().built_at);
  }
  auto lines = split(tsv.str(), '\n');
  {
    auto bad = lines;
    bad[6] = "1\t1\tx\tmodel";
    std::istringstream t(join(bad, "\n")), s(sidecar.str());
    try {
      read_table(t, s);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 7);
    }
  }
  {
    auto bad = lines;
    bad[2] = "0\t2\t2\tmodel";
    std::istringstream t(join(bad, "\n")), s(sidecar.str());
    CHECK_THROWS_AS(read_table(t, s), ValidationError);
  }
  {
    auto bad = lines;
    bad.erase(bad.begin() + 3);
    std::istringstream t(join(bad, "\n")), s(sidecar.str());
    CHECK_THROWS_WITH_AS(read_table(t, s), doctest::Contains("missing 1 pair"), ValidationError);
  }
  CHECK_THROWS_AS(table.lookup(ContextPair{{3, 0}, {3, 1}}), ArgumentError);
  CHECK_THROWS_AS(table.entry(5, 0), ArgumentError);
}

TEST_CASE("remote_generate returns the first candidate from a healthy server") {
  MockServer mock;
  std::string auth;
  std::string prompt;
  mock.server.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
    auth = req.get_header_value("Authorization");
    const auto body = nlohmann::json::parse(req.body);
    prompt = body.at("prompt").get<std::string>();
    CHECK(body.at("max_tokens").get<int>() == 32);
    res.set_content(R"({"candidates":[{"text":"Jazz Piano"},{"text":"other"}]})",
                    "application/json");
  });
  mock.start();
  CHECK(remote_generate(mock.endpoint(), "hello") == "Jazz Piano");
  CHECK(auth == "Bearer secret");
  CHECK(prompt == "hello");

  const auto tree = flat_tree({{"jazz", "piano"}, {"lo-fi", "beats"}, {"music", "production"}});
  const RemoteGenerator gen(mock.endpoint(), PromptTemplate());
  const std::vector<std::string> ctx = {"lo-fi beats", "music production"};
  CHECK(match_generation(gen.generate(ctx), tree, 2).matched == L2(0));
  CHECK(prompt.find("lo-fi beats") != std::string::npos);
}

TEST_CASE("remote_generate retries server errors then gives up") {
  MockServer mock;
  std::atomic<int> calls{0};
  mock.server.Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 500;
  });
  mock.start();
  CHECK_THROWS_AS(remote_generate(mock.endpoint(), "p"), TransportError);
  CHECK(calls == 3);
}

TEST_CASE("remote_generate does not retry client errors") {
  MockServer mock;
  std::atomic<int> calls{0};
  mock.server.Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 401;
  });
  mock.start();
  CHECK_THROWS_AS(remote_generate(mock.endpoint(), "p"), TransportError);
  CHECK(calls == 1);
}

TEST_CASE("remote_generate recovers after a transient failure") {
  MockServer mock;
  std::atomic<int> calls{0};
  mock.server.Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    if (++calls < 3) {
      res.status = 503;
      return;
    }
    res.set_content(R"({"candidates":[{"text":"ok"}]})", "application/json");
  });
  mock.start();
  CHECK(remote_generate(mock.endpoint(), "p") == "ok");
  CHECK(calls == 3);
}

TEST_CASE("remote_generate times out slow servers") {
  MockServer mock;
  mock.server.Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    res.set_content(R"({"candidates":[{"text":"late"}]})", "application/json");
  });
  mock.start();
  auto endpoint = mock.endpoint();
  endpoint.timeout = std::chrono::milliseconds(100);
  endpoint.max_attempts = 2;
  const auto start = std::chrono::steady_clock::now();
  CHECK_THROWS_AS(remote_generate(endpoint, "p"), TransportError);
  CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(2));
}

TEST_CASE("remote_generate rejects malformed responses and bad urls") {
  MockServer mock;
  mock.server.Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"choices":[]})", "application/json");
  });
  mock.start();
  CHECK_THROWS_AS(remote_generate(mock.endpoint(), "p"), ProtocolError);
  RemoteEndpoint bad;
  bad.url = "https://example.invalid/x";
  CHECK_THROWS_AS(remote_generate(bad, "p"), ConfigError);
}

TEST_CASE("remote endpoint settings come from config and environment") {
  ConfigMap config = {{"generator.url", "http://h:1/g"}, {"generator.timeout_ms", "250"},
                      {"generator.max_attempts", "5"}};
  auto e = RemoteEndpoint::from_config(config, {});
  CHECK(e.url == "http://h:1/g");
  CHECK(e.timeout == std::chrono::milliseconds(250));
  CHECK(e.max_attempts == 5);
  setenv("EXPLORE_GENERATOR_URL", "http://env:2/x", 1);
  setenv("EXPLORE_GENERATOR_TOKEN", "tok", 1);
  e = RemoteEndpoint::from_env(e);
  CHECK(e.url == "http://env:2/x");
  CHECK(e.token == "tok");
  CHECK(e.max_attempts == 5);
  unsetenv("EXPLORE_GENERATOR_URL");
  unsetenv("EXPLORE_GENERATOR_TOKEN");
  config["generator.max_attempts"] = "many";
  CHECK_THROWS_AS(RemoteEndpoint::from_config(config, {}), ConfigError);
}
