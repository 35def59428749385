#include <algorithm>
#include <set>
#include <sstream>

#include "doctest.h"
#include "explore/clustering.hpp"
#include "explore/errors.hpp"
#include "explore/util.hpp"

using namespace explore;

namespace {

// Independent check of partition, nesting and traffic bookkeeping computed
// from the member lists alone.
void check_structure(const ClusterTree& tree, const Corpus& corpus) {
  for (int l = 1; l <= kTreeLevels; ++l) {
    std::vector<int> owner(tree.num_items(), -1);
    for (const auto& cl : tree.level(l)) {
      double traffic = 0.0;
      for (std::size_t m : cl.members) {
        CHECK(owner[m] == -1);
        owner[m] = cl.id.index;
        traffic += corpus.item(m).traffic_weight;
      }
      CHECK(traffic == doctest::Approx(cl.traffic));
      if (l > 1) {
        const auto& parent = tree.cluster(tree.parent(cl.id));
        for (std::size_t m : cl.members) {
          CHECK(std::binary_search(parent.members.begin(), parent.members.end(), m));
        }
      }
    }
    CHECK(std::count(owner.begin(), owner.end(), -1) == 0);
    std::set<std::string> descriptions;
    for (const auto& cl : tree.level(l)) {
      CHECK(descriptions.insert(normalize_text(join(cl.description, " "))).second);
    }
  }
}

Item make_item(std::string id, std::vector<float> e, std::vector<std::string> kw, double w) {
  return Item{std::move(id), std::move(e), std::move(kw), w};
}

// Two items, two clusters per level with identical nesting.
ClusterTree two_cluster_tree(std::vector<float> left, std::vector<float> right) {
  ClusterTree::Parts parts;
  parts.dim = left.size();
  parts.item_ids = {"left", "right"};
  for (int l = 1; l <= kTreeLevels; ++l) {
    const auto li = static_cast<std::size_t>(l - 1);
    parts.levels[li].push_back({{l, 0}, {"west", std::to_string(l)}, {0}, 1.0, left});
    parts.levels[li].push_back({{l, 1}, {"east", std::to_string(l)}, {1}, 1.0, right});
    if (l > 1) parts.parents[li] = {0, 1};
  }
  return ClusterTree(std::move(parts));
}

}  // namespace

TEST_CASE("build_cluster_tree balances traffic at every level") {
  const Corpus corpus = synth_corpus(1000, 20, 16, 7);
  ClusterBuildOptions opts;
  opts.counts = {4, 16, 64, 256};
  opts.balance_tolerance = 0.2;
  opts.seed = 7;
  const ClusterTree tree = build_cluster_tree(corpus, opts);
  check_structure(tree, corpus);
  for (int l = 1; l <= kTreeLevels; ++l) {
    CHECK(tree.num_clusters(l) == opts.counts[static_cast<std::size_t>(l - 1)]);
  }
  const double mean2 = corpus.total_traffic() / 16.0;
  for (const auto& cl : tree.level(2)) {
    CHECK(cl.traffic >= 0.8 * mean2);
    CHECK(cl.traffic <= 1.2 * mean2);
  }
  for (const auto& b : tree.balance()) {
    if (b.infeasible) continue;
    CHECK(b.min_ratio >= 0.8);
    CHECK(b.max_ratio <= 1.2);
  }
}

TEST_CASE("build_cluster_tree is deterministic under its seed") {
  const Corpus corpus = synth_corpus(400, 10, 8, 3);
  ClusterBuildOptions opts;
  opts.counts = {2, 8, 16, 32};
  opts.seed = 5;
  const auto a = build_cluster_tree(corpus, opts);
  const auto b = build_cluster_tree(corpus, opts);
  CHECK(a.fingerprint() == b.fingerprint());
  std::ostringstream sa, sb;
  write_cluster_tree(a, sa);
  write_cluster_tree(b, sb);
  CHECK(sa.str() == sb.str());
}

TEST_CASE("single-item corpus gives a degenerate tree") {
  const Corpus corpus(2, {make_item("only", {0.5f, 0.5f}, {"solo"}, 1.0)});
  ClusterBuildOptions opts;
  opts.counts = {1, 1, 1, 1};
  const auto tree = build_cluster_tree(corpus, opts);
  for (int l = 1; l <= kTreeLevels; ++l) {
    REQUIRE(tree.num_clusters(l) == 1);
    CHECK(tree.level(l)[0].members == std::vector<std::size_t>{0});
  }
}

TEST_CASE("build_cluster_tree rejects invalid counts") {
  const Corpus corpus = synth_corpus(100, 5, 4, 1);
  ClusterBuildOptions opts;
  opts.counts = {4, 3, 2, 1};
  CHECK_THROWS_AS(build_cluster_tree(corpus, opts), ArgumentError);
  opts.counts = {1, 2, 3, 101};
  CHECK_THROWS_AS(build_cluster_tree(corpus, opts), ArgumentError);
  opts.counts = {1, 2, 3, 4};
  opts.balance_tolerance = 0.0;
  CHECK_THROWS_AS(build_cluster_tree(corpus, opts), ArgumentError);
}

TEST_CASE("infeasible nesting ratios are reported with the violating level") {
  const Corpus corpus = synth_corpus(1000, 20, 8, 2);
  ClusterBuildOptions opts;
  opts.counts = {4, 6, 12, 24};
  try {
    build_cluster_tree(corpus, opts);
    FAIL("expected a build error");
  } catch (const BuildError& e) {
    CHECK(std::string(e.what()).find("level(s) 2") != std::string::npos);
  }
}

TEST_CASE("a single oversized item flags the level instead of failing") {
  auto s = synth_corpus(200, 4, 4, 9);
  std::vector<Item> items = s.items();
  items[0].traffic_weight = 1000.0;
  const Corpus corpus(4, std::move(items));
  ClusterBuildOptions opts;
  opts.counts = {2, 4, 8, 16};
  const auto tree = build_cluster_tree(corpus, opts);
  CHECK(tree.balance()[0].infeasible);
  check_structure(tree, corpus);
}

TEST_CASE("describe_cluster ranks keywords by traffic-weighted frequency") {
  const Corpus corpus(2, {make_item("a", {0, 0}, {"jazz", "piano"}, 1.0),
                          make_item("b", {0, 0}, {"jazz", "sax"}, 1.0),
                          make_item("c", {0, 0}, {"jazz", "drums", "piano"}, 1.0)});
  const std::vector<std::size_t> all = {0, 1, 2};
  const auto d = describe_cluster(corpus, all, 2);
  // Oracle: jazz=3, piano=2, drums=1, sax=1.
  CHECK(d == std::vector<std::string>{"jazz", "piano"});
  CHECK(describe_cluster(corpus, all, 4) ==
        std::vector<std::string>{"jazz", "piano", "drums", "sax"});
  const std::vector<std::size_t> one = {2};
  CHECK(describe_cluster(corpus, one, 2) == std::vector<std::string>{"drums", "jazz"});
  const Corpus tie(2, {make_item("a", {0, 0}, {"zeta", "alpha"}, 1.0)});
  CHECK(describe_cluster(tie, std::vector<std::size_t>{0}, 1) ==
        std::vector<std::string>{"alpha"});
}

TEST_CASE("describe_cluster weighs keywords by traffic") {
  const Corpus corpus(1, {make_item("a", {0}, {"rare"}, 5.0), make_item("b", {0}, {"common"}, 1.0),
                          make_item("c", {0}, {"common"}, 1.0)});
  CHECK(describe_cluster(corpus, std::vector<std::size_t>{0, 1, 2}, 1) ==
        std::vector<std::string>{"rare"});
}

TEST_CASE("assign_item returns stored assignments for known items") {
  const Corpus corpus = synth_corpus(300, 6, 8, 4);
  ClusterBuildOptions opts;
  opts.counts = {2, 6, 12, 24};
  const auto tree = build_cluster_tree(corpus, opts);
  for (std::size_t i = 0; i < corpus.size(); i += 37) {
    const auto ids = assign_item(tree, corpus.item(i));
    for (int l = 1; l <= kTreeLevels; ++l) {
      CHECK(ids[static_cast<std::size_t>(l - 1)] == tree.cluster_of(i, l));
    }
  }
}

TEST_CASE("assign_item descends by nearest centroid for new items") {
  const auto tree = two_cluster_tree({0.0f, 0.0f}, {2.0f, 0.0f});
  const auto at_right = assign_item(tree, make_item("new", {2.0f, 0.0f}, {"x"}, 1.0));
  for (const auto& id : at_right) CHECK(id.index == 1);
  // Equidistant from both centroids: the lower index wins.
  const auto midpoint = assign_item(tree, make_item("mid", {1.0f, 0.0f}, {"x"}, 1.0));
  for (const auto& id : midpoint) CHECK(id.index == 0);
  CHECK_THROWS(assign_item(ClusterTree(), make_item("x", {0.0f}, {"x"}, 1.0)));
}

TEST_CASE("cluster tree construction rejects broken invariants") {
  ClusterTree::Parts parts;
  parts.dim = 1;
  parts.item_ids = {"a", "b"};
  for (int l = 1; l <= kTreeLevels; ++l) {
    const auto li = static_cast<std::size_t>(l - 1);
    parts.levels[li].push_back({{l, 0}, {"same"}, {0}, 1.0, {0.0f}});
    parts.levels[li].push_back({{l, 1}, {"Same "}, {1}, 1.0, {1.0f}});
    if (l > 1) parts.parents[li] = {0, 1};
  }
  CHECK_THROWS_AS(ClusterTree{parts}, ValidationError);  // normalized duplicate

  parts.levels[0][1].description = {"other"};
  parts.levels[1][1].description = {"other"};
  parts.levels[2][1].description = {"other"};
  parts.levels[3][1].description = {"other"};
  CHECK_NOTHROW(ClusterTree{parts});

  auto unnested = parts;
  unnested.parents[1] = {1, 0};
  CHECK_THROWS_AS(ClusterTree{unnested}, ValidationError);

  auto overlapping = parts;
  overlapping.levels[0][1].members = {0, 1};
  CHECK_THROWS_AS(ClusterTree{overlapping}, ValidationError);
}

TEST_CASE("clusters.json round-trips") {
  const Corpus corpus = synth_corpus(300, 6, 8, 4);
  ClusterBuildOptions opts;
  opts.counts = {2, 6, 12, 24};
  const auto tree = build_cluster_tree(corpus, opts);
  std::ostringstream out;
  write_cluster_tree(tree, out);
  std::istringstream in(out.str());
  const auto loaded = read_cluster_tree(in);
  CHECK(loaded.fingerprint() == tree.fingerprint());
  std::ostringstream again;
  write_cluster_tree(loaded, again);
  CHECK(again.str() == out.str());
}

TEST_CASE("balanced_partition meets a tight tolerance on a heavy-tailed corpus") {
  const Corpus corpus = synth_corpus(2000, 8, 8, 12);
  std::vector<std::size_t> members(corpus.size());
  for (std::size_t i = 0; i < members.size(); ++i) members[i] = i;
  const auto groups = balanced_partition(corpus, members, 7, 0.02, 1, 50);
  std::vector<double> load(7, 0.0);
  for (std::size_t i = 0; i < members.size(); ++i) {
    load[static_cast<std::size_t>(groups[i])] += corpus.item(i).traffic_weight;
  }
  const double target = corpus.total_traffic() / 7.0;
  for (double x : load) CHECK(std::abs(x / target - 1.0) <= 0.02 + 1e-9);
}
