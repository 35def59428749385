#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "explore/curation.hpp"
#include "explore/errors.hpp"
#include "explore/util.hpp"
#include "test_support.hpp"

using namespace explore;
using explore::testing::item_name;
using explore::testing::numbered_tree;

namespace {

// One user consuming the given clusters in order, one event per day.
UserHistory walk(const std::string& user, const std::vector<int>& clusters,
                 double quality = 1.0) {
  UserHistory h{user, {}};
  std::int64_t t = 0;
  for (int c : clusters) h.events.push_back({user, item_name(c, 0), t += 86400, quality});
  return h;
}

ClusterId L2(int i) { return {2, i}; }

std::vector<TransitionExample> pairs_for_label(int label, int count, int m) {
  std::vector<TransitionExample> out;
  for (int a = 0; a < m && static_cast<int>(out.size()) < count; ++a) {
    for (int b = 0; b < m && static_cast<int>(out.size()) < count; ++b) {
      if (a == b || a == label || b == label) continue;
      out.push_back({L2(a), L2(b), L2(label), 1 + (a + b) % 3});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("mine_transitions emits a triple for a novel third cluster") {
  const auto tree = numbered_tree(6);
  const std::vector<UserHistory> users = {walk("u", {0, 1, 2})};
  const auto out = mine_transitions(users, tree, 2, 0.5);
  REQUIRE(out.size() == 1);
  CHECK(out[0] == TransitionExample{L2(0), L2(1), L2(2), 1});
}

TEST_CASE("mine_transitions skips returns to a context cluster") {
  const auto tree = numbered_tree(6);
  const std::vector<UserHistory> aba = {walk("u", {0, 1, 0})};
  CHECK(mine_transitions(aba, tree, 2, 0.5).empty());
  const std::vector<UserHistory> single = {walk("u", {3})};
  CHECK(mine_transitions(single, tree, 2, 0.5).empty());
  CHECK(mine_transitions({}, tree, 2, 0.5).empty());
}

TEST_CASE("mine_transitions tracks the two most recent distinct clusters") {
  const auto tree = numbered_tree(6);
  // 0 1 1 0 2: the repeat of 0 makes the context (1, 0).
  const std::vector<UserHistory> users = {walk("u", {0, 1, 1, 0, 2, 3})};
  const auto out = mine_transitions(users, tree, 2, 0.5);
  REQUIRE(out.size() == 2);
  // Sorted by label.
  CHECK(out[0] == TransitionExample{L2(1), L2(0), L2(2), 1});
  CHECK(out[1] == TransitionExample{L2(0), L2(2), L2(3), 1});
}

TEST_CASE("mine_transitions ignores low-quality events for context and label") {
  const auto tree = numbered_tree(6);
  UserHistory h = walk("u", {0, 1, 4, 2});
  h.events[2].quality = 0.1;
  const std::vector<UserHistory> users = {h};
  const auto out = mine_transitions(users, tree, 2, 0.5);
  REQUIRE(out.size() == 1);
  CHECK(out[0] == TransitionExample{L2(0), L2(1), L2(2), 1});
}

TEST_CASE("mine_transitions aggregates identical triples into support") {
  const auto tree = numbered_tree(6);
  const std::vector<UserHistory> users = {walk("a", {0, 1, 2}), walk("b", {0, 1, 2}),
                                          walk("c", {0, 1, 3})};
  const auto out = mine_transitions(users, tree, 2, 0.5);
  REQUIRE(out.size() == 2);
  CHECK(out[0].support == 2);
  CHECK(out[1].support == 1);
}

TEST_CASE("mined transitions are always novel and concatenate across users") {
  const auto tree = numbered_tree(8);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> cluster(0, 7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> a, b;
    for (int i = 0; i < 20; ++i) a.push_back(cluster(rng));
    for (int i = 0; i < 20; ++i) b.push_back(cluster(rng));
    const std::vector<UserHistory> ua = {walk("a", a)};
    const std::vector<UserHistory> ub = {walk("b", b)};
    const std::vector<UserHistory> both = {walk("a", a), walk("b", b)};
    const auto ra = mine_transitions(ua, tree, 2, 0.5);
    const auto rb = mine_transitions(ub, tree, 2, 0.5);
    const auto rab = mine_transitions(both, tree, 2, 0.5);
    std::map<std::tuple<int, int, int>, std::int64_t> expected;
    for (const auto* r : {&ra, &rb}) {
      for (const auto& e : *r) expected[{e.c1.index, e.c2.index, e.label.index}] += e.support;
    }
    std::map<std::tuple<int, int, int>, std::int64_t> got;
    for (const auto& e : rab) {
      CHECK(e.label != e.c1);
      CHECK(e.label != e.c2);
      got[{e.c1.index, e.c2.index, e.label.index}] += e.support;
    }
    CHECK(got == expected);
  }
}

TEST_CASE("curate_balanced caps each label at the requested count") {
  std::vector<TransitionExample> raw;
  for (auto [label, count] : {std::pair{0, 15}, {1, 12}, {2, 2}}) {
    const auto p = pairs_for_label(label, count, 10);
    raw.insert(raw.end(), p.begin(), p.end());
  }
  const auto ds = curate_balanced(raw, 10);
  CHECK(ds.examples.size() == 22);
  CHECK(ds.per_label_cap == 10);
  CHECK(ds.planning_level == 2);
  std::map<int, int> per_label;
  std::map<int, std::set<std::pair<int, int>>> pairs;
  for (const auto& e : ds.examples) {
    ++per_label[e.label.index];
    CHECK(pairs[e.label.index].insert({e.c1.index, e.c2.index}).second);
  }
  CHECK(per_label == std::map<int, int>{{0, 10}, {1, 10}, {2, 2}});
  CHECK(curate_balanced({}, 10).examples.empty());
  CHECK_THROWS_AS(curate_balanced(raw, 0), ArgumentError);
}

TEST_CASE("curate_balanced keeps the most frequent pairs and breaks ties by pair index") {
  const std::vector<TransitionExample> raw = {
      {L2(3), L2(4), L2(0), 5}, {L2(1), L2(2), L2(0), 2}, {L2(2), L2(1), L2(0), 2},
      {L2(1), L2(3), L2(0), 2}, {L2(4), L2(1), L2(0), 9}};
  const auto ds = curate_balanced(raw, 3);
  REQUIRE(ds.examples.size() == 3);
  CHECK(ds.examples[0] == raw[4]);
  CHECK(ds.examples[1] == raw[0]);
  CHECK(ds.examples[2] == raw[1]);  // (1,2) precedes (1,3) and (2,1)
}

TEST_CASE("curate_balanced covers every label present in the input") {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> c(0, 29);
  std::uniform_int_distribution<int> s(1, 20);
  std::vector<TransitionExample> raw;
  while (raw.size() < 2000) {
    TransitionExample e{L2(c(rng)), L2(c(rng)), L2(c(rng)), s(rng)};
    if (e.label != e.c1 && e.label != e.c2 && e.c1 != e.c2) raw.push_back(e);
  }
  const auto ds = curate_balanced(raw, 10);
  std::set<int> in, out;
  for (const auto& e : raw) in.insert(e.label.index);
  std::map<int, int> count;
  for (const auto& e : ds.examples) {
    out.insert(e.label.index);
    CHECK(++count[e.label.index] <= 10);
  }
  CHECK(in == out);
}

TEST_CASE("curate_random samples occurrences without replacement") {
  // 50 labels x 100 pairs x support 50 = 250,000 logged transitions.
  std::vector<TransitionExample> raw;
  for (int label = 0; label < 50; ++label) {
    const auto p = pairs_for_label(label, 100, 60);
    for (auto e : p) {
      e.support = 50;
      raw.push_back(e);
    }
  }
  std::int64_t total = 0;
  for (const auto& e : raw) total += e.support;
  REQUIRE(total == 250000);

  const auto a = curate_random(raw, 7610, 42);
  const auto b = curate_random(raw, 7610, 42);
  CHECK(a.examples.size() == 7610);
  CHECK(a.examples == b.examples);
  CHECK(curate_random(raw, 7610, 43).examples != a.examples);
  // No triple can be drawn more often than it was logged.
  std::map<std::tuple<int, int, int>, int> drawn;
  for (const auto& e : a.examples) {
    CHECK(e.support == 1);
    CHECK(e.label != e.c1);
    CHECK(e.label != e.c2);
    CHECK(++drawn[{e.c1.index, e.c2.index, e.label.index}] <= 50);
  }
  CHECK(curate_random(raw, 0, 1).examples.empty());
  CHECK_THROWS_AS(curate_random(raw, 250001, 1), ArgumentError);
  CHECK(curate_random(raw, 250000, 1).examples.size() == 250000);
}

TEST_CASE("export_sft renders both contexts and the exact label description") {
  const auto tree = explore::testing::flat_tree(
      {{"jazz", "piano"}, {"lo-fi", "beats"}, {"music", "production"}});
  CuratedDataset ds;
  ds.examples = {{L2(0), L2(1), L2(2), 1}};
  const PromptTemplate tmpl;
  const auto records = export_sft(ds, tree, tmpl);
  REQUIRE(records.size() == 1);
  CHECK(records[0].prompt.find("jazz piano") != std::string::npos);
  CHECK(records[0].prompt.find("lo-fi beats") != std::string::npos);
  CHECK(records[0].completion == "music production");
  CHECK(export_sft(CuratedDataset{}, tree, tmpl).empty());

  ds.examples = {{L2(0), L2(1), L2(7), 1}};
  try {
    export_sft(ds, tree, tmpl);
    FAIL("expected an export error");
  } catch (const ExportError& e) {
    CHECK(std::string(e.what()).find("L2:7") != std::string::npos);
  }
}

TEST_CASE("SFT completions are injective into the description set and parse back") {
  const auto tree = numbered_tree(12);
  std::vector<TransitionExample> raw;
  for (int label = 0; label < 12; ++label) {
    const auto p = pairs_for_label(label, 4, 12);
    raw.insert(raw.end(), p.begin(), p.end());
  }
  const auto ds = curate_balanced(raw, 10);
  const PromptTemplate tmpl;
  const auto records = export_sft(ds, tree, tmpl);
  std::set<std::string> descriptions;
  for (const auto& cl : tree.level(2)) descriptions.insert(normalize_text(join(cl.description, " ")));
  for (const auto& r : records) CHECK(descriptions.count(r.completion) == 1);

  std::ostringstream out;
  write_sft(records, out);
  std::istringstream in(out.str());
  const auto back = dataset_from_sft(read_sft(in), tree, 2, tmpl);
  REQUIRE(back.examples.size() == ds.examples.size());
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    CHECK(back.examples[i].c1 == ds.examples[i].c1);
    CHECK(back.examples[i].c2 == ds.examples[i].c2);
    CHECK(back.examples[i].label == ds.examples[i].label);
  }
  const std::vector<SftRecord> bad = {records[0], {records[1].prompt, "no such topic"}};
  try {
    dataset_from_sft(bad, tree, 2, tmpl);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("prompt templates validate placeholders and parse ambiguous splits") {
  CHECK_THROWS_AS(PromptTemplate("only {context1}"), ArgumentError);
  CHECK_THROWS_AS(PromptTemplate("{context2} then {context1}"), ArgumentError);
  CHECK_THROWS_AS(PromptTemplate("{context1} {context1} {context2}"), ArgumentError);
  const PromptTemplate t("[{context1} and {context2}]");
  CHECK(t.render("a", "b") == "[a and b]");
  const auto splits = t.parse("[x and y and z]");
  REQUIRE(splits.size() == 2);
  CHECK(splits[0] == std::pair<std::string, std::string>{"x", "y and z"});
  CHECK(splits[1] == std::pair<std::string, std::string>{"x and y", "z"});
  CHECK(t.parse("nothing").empty());
}

TEST_CASE("transitions.jsonl round-trips and rejects non-novel rows") {
  const std::vector<TransitionExample> ex = {{L2(0), L2(1), L2(2), 3}, {L2(4), L2(0), L2(1), 1}};
  std::ostringstream out;
  write_transitions(ex, out);
  std::istringstream in(out.str());
  CHECK(read_transitions(in, 2) == ex);
  std::istringstream bad(R"({"c1":0,"c2":1,"label":2,"support":1})" "\n"
                         R"({"c1":0,"c2":1,"label":1,"support":1})" "\n");
  try {
    read_transitions(bad, 2);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.line() == 2);
  }
}
