#include "explore/curation.hpp"

#include <algorithm>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <tuple>
#include <unordered_set>

#include "explore/errors.hpp"
#include "explore/util.hpp"
#include "json.hpp"
#include "jsonl.hpp"

namespace explore {

using nlohmann::json;

namespace {

constexpr std::string_view kContext1 = "{context1}";
constexpr std::string_view kContext2 = "{context2}";

using Triple = std::tuple<int, int, int>;  // (label, c1, c2) indices

Triple key(const TransitionExample& e) { return {e.label.index, e.c1.index, e.c2.index}; }

bool novel(const TransitionExample& e) { return e.label != e.c1 && e.label != e.c2; }

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + 1)) {
    ++n;
  }
  return n;
}

// Merges identical triples; result sorted by (label, c1, c2).
std::vector<TransitionExample> merge(std::span<const TransitionExample> raw) {
  std::map<Triple, TransitionExample> merged;
  for (const auto& e : raw) {
    auto [it, inserted] = merged.emplace(key(e), e);
    if (!inserted) it->second.support += e.support;
  }
  std::vector<TransitionExample> out;
  out.reserve(merged.size());
  for (auto& [k, e] : merged) out.push_back(e);
  return out;
}

int level_of(std::span<const TransitionExample> examples) {
  return examples.empty() ? kDefaultPlanningLevel : examples.front().label.level;
}

}  // namespace

// ---------------------------------------------------------------------------
// PromptTemplate

PromptTemplate::PromptTemplate(std::string text) : text_(std::move(text)) {
  if (count_occurrences(text_, kContext1) != 1 || count_occurrences(text_, kContext2) != 1) {
    throw ArgumentError("prompt template must contain {context1} and {context2} exactly once");
  }
  const auto p1 = text_.find(kContext1);
  const auto p2 = text_.find(kContext2);
  if (p2 < p1) throw ArgumentError("prompt template must place {context1} before {context2}");
  prefix_ = text_.substr(0, p1);
  middle_ = text_.substr(p1 + kContext1.size(), p2 - p1 - kContext1.size());
  suffix_ = text_.substr(p2 + kContext2.size());
}

std::string PromptTemplate::render(std::string_view context1, std::string_view context2) const {
  std::string out;
  out.reserve(prefix_.size() + context1.size() + middle_.size() + context2.size() +
              suffix_.size());
  out += prefix_;
  out += context1;
  out += middle_;
  out += context2;
  out += suffix_;
  return out;
}

std::vector<std::pair<std::string, std::string>> PromptTemplate::parse(
    std::string_view prompt) const {
  std::vector<std::pair<std::string, std::string>> out;
  if (prompt.size() < prefix_.size() + middle_.size() + suffix_.size()) return out;
  if (!prompt.starts_with(prefix_) || !prompt.ends_with(suffix_)) return out;
  const std::string_view inner =
      prompt.substr(prefix_.size(), prompt.size() - prefix_.size() - suffix_.size());
  for (auto pos = inner.find(middle_); pos != std::string_view::npos;
       pos = inner.find(middle_, pos + 1)) {
    out.emplace_back(std::string(inner.substr(0, pos)),
                     std::string(inner.substr(pos + middle_.size())));
    if (middle_.empty()) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mining and curation

std::vector<TransitionExample> mine_transitions(std::span<const UserHistory> histories,
                                                const ClusterTree& tree, int level,
                                                double quality_threshold) {
  if (level < 1 || level > kTreeLevels) {
    throw ArgumentError("planning level must lie in 1..4, got " + std::to_string(level));
  }
  std::vector<TransitionExample> raw;
  for (const UserHistory& history : histories) {
    std::vector<const InteractionEvent*> events;
    for (const auto& e : history.events) {
      if (e.quality >= quality_threshold) events.push_back(&e);
    }
    std::stable_sort(events.begin(), events.end(),
                     [](const auto* a, const auto* b) { return a->timestamp < b->timestamp; });

    // recent[0] is the older of the two most recent distinct clusters.
    std::vector<ClusterId> recent;
    for (const InteractionEvent* e : events) {
      const auto index = tree.item_index(e->item_id);
      if (!index) continue;
      const ClusterId c = tree.cluster_of(*index, level);
      if (recent.size() < 2) {
        if (recent.empty() || recent.back() != c) recent.push_back(c);
        continue;
      }
      if (c == recent[1]) continue;
      if (c == recent[0]) {
        std::swap(recent[0], recent[1]);
        continue;
      }
      raw.push_back({recent[0], recent[1], c, 1});
      recent[0] = recent[1];
      recent[1] = c;
    }
  }
  return merge(raw);
}

std::pair<std::vector<UserHistory>, std::vector<UserHistory>> split_histories(
    std::span<const UserHistory> histories, double holdout_fraction, std::uint64_t seed) {
  if (!(holdout_fraction >= 0.0 && holdout_fraction <= 1.0)) {
    throw ArgumentError("holdout fraction must lie in [0, 1]");
  }
  std::pair<std::vector<UserHistory>, std::vector<UserHistory>> out;
  for (const auto& h : histories) {
    const std::uint64_t x = derive_seed(seed, {fnv1a(h.user_id)});
    const double u = static_cast<double>(x >> 11) * 0x1.0p-53;
    (u < holdout_fraction ? out.second : out.first).push_back(h);
  }
  return out;
}

CuratedDataset curate_balanced(std::span<const TransitionExample> raw, int per_label_cap) {
  if (per_label_cap < 1) {
    throw ArgumentError("per-label cap must be at least 1, got " + std::to_string(per_label_cap));
  }
  CuratedDataset out;
  out.per_label_cap = per_label_cap;
  out.planning_level = level_of(raw);

  // Non-novel input cannot come from mining; it is dropped rather than kept.
  std::vector<TransitionExample> merged;
  for (auto& e : merge(raw)) {
    if (novel(e)) merged.push_back(e);
  }
  for (std::size_t begin = 0; begin < merged.size();) {
    std::size_t end = begin;
    while (end < merged.size() && merged[end].label == merged[begin].label) ++end;
    std::vector<TransitionExample> group(merged.begin() + static_cast<std::ptrdiff_t>(begin),
                                         merged.begin() + static_cast<std::ptrdiff_t>(end));
    std::stable_sort(group.begin(), group.end(), [](const auto& a, const auto& b) {
      if (a.support != b.support) return a.support > b.support;
      return std::pair(a.c1.index, a.c2.index) < std::pair(b.c1.index, b.c2.index);
    });
    const auto keep = std::min(group.size(), static_cast<std::size_t>(per_label_cap));
    out.examples.insert(out.examples.end(), group.begin(),
                        group.begin() + static_cast<std::ptrdiff_t>(keep));
    begin = end;
  }
  return out;
}

CuratedDataset curate_random(std::span<const TransitionExample> raw, std::size_t n,
                             std::uint64_t seed) {
  std::vector<std::uint64_t> prefix;  // prefix[i] = occurrences before example i+1
  prefix.reserve(raw.size());
  std::uint64_t total = 0;
  for (const auto& e : raw) {
    if (e.support < 1) throw ArgumentError("transition support must be positive");
    total += static_cast<std::uint64_t>(e.support);
    prefix.push_back(total);
  }
  if (n > total) {
    throw ArgumentError("cannot sample " + std::to_string(n) + " transitions from " +
                        std::to_string(total));
  }
  CuratedDataset out;
  out.planning_level = level_of(raw);

  // Floyd's algorithm: n distinct draws from [0, total).
  std::mt19937_64 rng(seed);
  std::unordered_set<std::uint64_t> chosen;
  chosen.reserve(n * 2);
  for (std::uint64_t j = total - n; j < total; ++j) {
    std::uniform_int_distribution<std::uint64_t> pick(0, j);
    const std::uint64_t t = pick(rng);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  std::vector<std::uint64_t> occurrences(chosen.begin(), chosen.end());
  std::sort(occurrences.begin(), occurrences.end());

  out.examples.reserve(n);
  std::size_t i = 0;
  for (std::uint64_t occ : occurrences) {
    while (prefix[i] <= occ) ++i;
    TransitionExample e = raw[i];
    e.support = 1;
    out.examples.push_back(e);
  }
  int cap = 0;
  std::map<int, int> per_label;
  for (const auto& e : out.examples) cap = std::max(cap, ++per_label[e.label.index]);
  out.per_label_cap = std::max(cap, 1);
  return out;
}

// ---------------------------------------------------------------------------
// SFT export

std::vector<SftRecord> export_sft(const CuratedDataset& dataset, const ClusterTree& tree,
                                  const PromptTemplate& prompt_template) {
  std::vector<SftRecord> out;
  out.reserve(dataset.examples.size());
  for (const auto& e : dataset.examples) {
    for (ClusterId id : {e.c1, e.c2, e.label}) {
      if (!tree.contains(id)) {
        throw ExportError("cluster " + to_string(id) + " does not exist in the cluster tree");
      }
    }
    out.push_back({prompt_template.render(tree.description_text(e.c1),
                                          tree.description_text(e.c2)),
                   normalize_text(tree.description_text(e.label))});
  }
  return out;
}

CuratedDataset dataset_from_sft(std::span<const SftRecord> records, const ClusterTree& tree,
                                int level, const PromptTemplate& prompt_template) {
  const DescriptionIndex index(tree, level);
  CuratedDataset out;
  out.planning_level = level;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto label = index.find(records[r].completion);
    if (!label) {
      throw ParseError(r + 1, "completion '" + records[r].completion +
                                  "' matches no cluster description");
    }
    std::optional<TransitionExample> found;
    for (const auto& [a, b] : prompt_template.parse(records[r].prompt)) {
      const auto c1 = index.find(a);
      const auto c2 = index.find(b);
      if (c1 && c2) {
        found = TransitionExample{*c1, *c2, *label, 1};
        break;
      }
    }
    if (!found) throw ParseError(r + 1, "prompt does not render two cluster descriptions");
    out.examples.push_back(*found);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

void write_transitions(std::span<const TransitionExample> examples, std::ostream& out) {
  for (const auto& e : examples) {
    json j;
    j["c1"] = e.c1.index;
    j["c2"] = e.c2.index;
    j["label"] = e.label.index;
    j["support"] = e.support;
    out << j.dump() << '\n';
  }
}

std::vector<TransitionExample> read_transitions(std::istream& in, int level) {
  std::vector<TransitionExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (jsonl::blank(line)) continue;
    const json j = jsonl::parse_line(line, line_no);
    TransitionExample e{{level, jsonl::field<int>(j, "c1", line_no)},
                        {level, jsonl::field<int>(j, "c2", line_no)},
                        {level, jsonl::field<int>(j, "label", line_no)},
                        jsonl::field<std::int64_t>(j, "support", line_no)};
    if (e.c1.index < 0 || e.c2.index < 0 || e.label.index < 0) {
      throw ValidationError(line_no, "cluster indices must be non-negative");
    }
    if (e.support < 1) throw ValidationError(line_no, "support must be positive");
    if (!novel(e)) throw ValidationError(line_no, "label repeats a context cluster");
    out.push_back(e);
  }
  return out;
}

void save_transitions(std::span<const TransitionExample> examples,
                      const std::filesystem::path& path) {
  auto out = jsonl::open_output(path);
  write_transitions(examples, out);
}

std::vector<TransitionExample> load_transitions(const std::filesystem::path& path, int level) {
  auto in = jsonl::open_input(path);
  return read_transitions(in, level);
}

void write_sft(std::span<const SftRecord> records, std::ostream& out) {
  for (const auto& r : records) {
    json j;
    j["prompt"] = r.prompt;
    j["completion"] = r.completion;
    out << j.dump() << '\n';
  }
}

std::vector<SftRecord> read_sft(std::istream& in) {
  std::vector<SftRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (jsonl::blank(line)) continue;
    const json j = jsonl::parse_line(line, line_no);
    out.push_back({jsonl::field<std::string>(j, "prompt", line_no),
                   jsonl::field<std::string>(j, "completion", line_no)});
  }
  return out;
}

void save_sft(std::span<const SftRecord> records, const std::filesystem::path& path) {
  auto out = jsonl::open_output(path);
  write_sft(records, out);
}

std::vector<SftRecord> load_sft(const std::filesystem::path& path) {
  auto in = jsonl::open_input(path);
  return read_sft(in);
}

}  // namespace explore
