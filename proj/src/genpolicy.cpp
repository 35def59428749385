#include "explore/genpolicy.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <istream>
#include <limits>
#include <mutex>
#include <ostream>
#include <thread>

#include "explore/errors.hpp"
#include "explore/util.hpp"
#include "json.hpp"
#include "jsonl.hpp"

namespace explore {

using nlohmann::json;

namespace {

void check_level(const ClusterTree& tree, int level) {
  if (level < 1 || level > kTreeLevels || tree.num_clusters(level) == 0) {
    throw ArgumentError("level " + std::to_string(level) + " is not a built tree level");
  }
}

std::vector<ClusterId> resolve(const DescriptionIndex& index,
                               std::span<const std::string> context) {
  std::vector<ClusterId> out;
  out.reserve(context.size());
  for (const auto& d : context) {
    auto id = index.find(d);
    if (!id) throw ArgumentError("context '" + d + "' is not a cluster description");
    out.push_back(*id);
  }
  return out;
}

bool in_context(ClusterId c, std::span<const ClusterId> context) {
  return std::find(context.begin(), context.end(), c) != context.end();
}

}  // namespace

GenerationOutcome match_generation(std::string_view raw, const DescriptionIndex& index,
                                   std::span<const ClusterId> context) {
  GenerationOutcome out;
  out.raw = std::string(raw);
  out.matched = index.find(raw);
  out.novelty_ok = out.matched && !in_context(*out.matched, context);
  return out;
}

GenerationOutcome match_generation(std::string_view raw, const ClusterTree& tree, int level,
                                   std::span<const ClusterId> context) {
  check_level(tree, level);
  return match_generation(raw, DescriptionIndex(tree, level), context);
}

std::vector<ContextPair> enumerate_context_pairs(const ClusterTree& tree, int level) {
  check_level(tree, level);
  return enumerate_context_pairs(level, tree.num_clusters(level));
}

std::vector<ContextPair> enumerate_context_pairs(int level, int num_clusters) {
  if (num_clusters < 0) throw ArgumentError("cluster count must be non-negative");
  std::vector<ContextPair> out;
  out.reserve(static_cast<std::size_t>(num_clusters) * static_cast<std::size_t>(num_clusters));
  for (int a = 0; a < num_clusters; ++a) {
    for (int b = 0; b < num_clusters; ++b) out.push_back({{level, a}, {level, b}});
  }
  return out;
}

std::vector<std::pair<ContextPair, ClusterId>> dominant_labels(
    std::span<const TransitionExample> examples) {
  struct Tally {
    std::int64_t records = 0;
    std::int64_t support = 0;
  };
  std::map<ContextPair, std::map<ClusterId, Tally>> tallies;
  for (const auto& e : examples) {
    auto& t = tallies[{e.c1, e.c2}][e.label];
    ++t.records;
    t.support += e.support;
  }
  std::vector<std::pair<ContextPair, ClusterId>> out;
  out.reserve(tallies.size());
  for (const auto& [pair, labels] : tallies) {
    const std::pair<const ClusterId, Tally>* best = nullptr;
    for (const auto& entry : labels) {  // ascending label, so ties keep the lower one
      if (!best || entry.second.records > best->second.records ||
          (entry.second.records == best->second.records &&
           entry.second.support > best->second.support)) {
        best = &entry;
      }
    }
    out.emplace_back(pair, best->first);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Deterministic generators

EmbeddingFallbackGenerator::EmbeddingFallbackGenerator(const ClusterTree& tree, int level)
    : tree_(&tree), level_(level), index_((check_level(tree, level), tree), level) {
  if (tree.num_clusters(level) < 3) {
    throw ArgumentError("embedding fallback needs at least 3 clusters at level " +
                        std::to_string(level));
  }
}

ClusterId EmbeddingFallbackGenerator::nearest_novel(std::span<const ClusterId> context) const {
  std::vector<double> mean(tree_->dim(), 0.0);
  for (ClusterId c : context) {
    const auto& centroid = tree_->cluster(c).centroid;
    for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += centroid[d];
  }
  for (double& x : mean) x /= static_cast<double>(std::max<std::size_t>(context.size(), 1));

  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& cl : tree_->level(level_)) {
    if (in_context(cl.id, context)) continue;
    double d = 0.0;
    for (std::size_t k = 0; k < mean.size(); ++k) {
      const double diff = static_cast<double>(cl.centroid[k]) - mean[k];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = cl.id.index;
    }
  }
  return {level_, best};
}

std::string EmbeddingFallbackGenerator::generate(std::span<const std::string> context) const {
  const auto ids = resolve(index_, context);
  return tree_->description_text(nearest_novel(ids));
}

std::string embedding_fallback_generate(const ContextPair& pair, const ClusterTree& tree,
                                        int level) {
  const EmbeddingFallbackGenerator gen(tree, level);
  const ClusterId ctx[] = {pair.first, pair.second};
  return tree.description_text(gen.nearest_novel(ctx));
}

MemorizingGenerator::MemorizingGenerator(const CuratedDataset& dataset, const ClusterTree& tree)
    : tree_(&tree),
      level_(dataset.planning_level),
      index_((check_level(tree, dataset.planning_level), tree), dataset.planning_level) {
  if (dataset.examples.empty()) throw ArgumentError("memorizing generator needs a non-empty dataset");

  for (const auto& e : dataset.examples) {
    for (ClusterId id : {e.c1, e.c2, e.label}) {
      if (id.level != level_ || !tree.contains(id)) {
        throw ArgumentError("dataset references unknown cluster " + to_string(id));
      }
    }
  }
  best_ = dominant_labels(dataset.examples);

  const auto m = static_cast<std::size_t>(tree.num_clusters(level_));
  distance_.assign(m * m, 0.0);
  const auto& clusters = tree.level(level_);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      const double d = std::sqrt(squared_distance(clusters[a].centroid, clusters[b].centroid));
      distance_[a * m + b] = d;
      distance_[b * m + a] = d;
    }
  }
}

ClusterId MemorizingGenerator::predict(const ContextPair& pair) const {
  auto it = std::lower_bound(best_.begin(), best_.end(), pair,
                             [](const auto& entry, const ContextPair& p) { return entry.first < p; });
  if (it != best_.end() && it->first == pair) return it->second;

  const auto m = static_cast<std::size_t>(tree_->num_clusters(level_));
  const auto dist = [&](ClusterId a, ClusterId b) {
    return distance_[static_cast<std::size_t>(a.index) * m + static_cast<std::size_t>(b.index)];
  };
  const ClusterId ctx[] = {pair.first, pair.second};
  const std::pair<ContextPair, ClusterId>* best = nullptr;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& entry : best_) {  // sorted, so strict < keeps the lexicographically first
    if (in_context(entry.second, ctx)) continue;
    const double d = dist(pair.first, entry.first.first) + dist(pair.second, entry.first.second);
    if (d < best_d) {
      best_d = d;
      best = &entry;
    }
  }
  // Every seen label collides with the query; the caller's novelty check rejects this.
  if (!best) return best_.front().second;
  return best->second;
}

std::string MemorizingGenerator::generate(std::span<const std::string> context) const {
  const auto ids = resolve(index_, context);
  if (ids.size() != 2) throw ArgumentError("memorizing generator expects a context pair");
  return tree_->description_text(predict({ids[0], ids[1]}));
}

std::string memorizing_generate(const CuratedDataset& dataset, const ClusterTree& tree,
                                const ContextPair& pair) {
  return tree.description_text(MemorizingGenerator(dataset, tree).predict(pair));
}

// ---------------------------------------------------------------------------
// TransitionTable

TransitionTable::TransitionTable(int level, int num_clusters, std::vector<TableEntry> entries,
                                 TableProvenance provenance)
    : level_(level), m_(num_clusters), entries_(std::move(entries)),
      provenance_(std::move(provenance)) {
  const auto m = static_cast<std::size_t>(m_);
  if (m_ < 1 || entries_.size() != m * m) {
    throw ValidationError("transition table has " + std::to_string(entries_.size()) +
                          " entries for " + std::to_string(m_) + " clusters");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const int t = entries_[i].target;
    const auto c1 = static_cast<int>(i / m);
    const auto c2 = static_cast<int>(i % m);
    if (t < 0 || t >= m_) {
      throw ValidationError("target " + std::to_string(t) + " out of range for pair (" +
                            std::to_string(c1) + ", " + std::to_string(c2) + ")");
    }
    if (t == c1 || t == c2) {
      throw ValidationError("target repeats the context for pair (" + std::to_string(c1) + ", " +
                            std::to_string(c2) + ")");
    }
  }
}

ClusterId TransitionTable::lookup(const ContextPair& pair) const {
  if (pair.first.level != level_ || pair.second.level != level_) {
    throw ArgumentError("table at level " + std::to_string(level_) + " cannot answer " +
                        to_string(pair.first) + ", " + to_string(pair.second));
  }
  return {level_, entry(pair.first.index, pair.second.index).target};
}

const TableEntry& TransitionTable::entry(int c1, int c2) const {
  if (c1 < 0 || c2 < 0 || c1 >= m_ || c2 >= m_) {
    throw ArgumentError("pair (" + std::to_string(c1) + ", " + std::to_string(c2) +
                        ") is outside the table at level " + std::to_string(level_));
  }
  return entries_[static_cast<std::size_t>(c1) * static_cast<std::size_t>(m_) +
                  static_cast<std::size_t>(c2)];
}

std::vector<std::int64_t> TransitionTable::label_frequencies() const {
  std::vector<std::int64_t> out(static_cast<std::size_t>(m_), 0);
  for (const auto& e : entries_) ++out[static_cast<std::size_t>(e.target)];
  return out;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

TransitionTable bulk_infer(const InterestGenerator& generator, const ClusterTree& tree,
                           int level, const InterestGenerator& fallback,
                           const BulkInferOptions& options) {
  check_level(tree, level);
  const DescriptionIndex index(tree, level);
  const int m = tree.num_clusters(level);
  const auto pairs = enumerate_context_pairs(level, m);
  std::vector<TableEntry> entries(pairs.size());
  std::vector<char> failed(pairs.size(), 0);

  const auto attempt = [&](const InterestGenerator& gen, const ContextPair& p,
                           const std::vector<std::string>& context) -> std::optional<int> {
    try {
      const ClusterId ctx[] = {p.first, p.second};
      const auto outcome = match_generation(gen.generate(context), index, ctx);
      if (outcome.novelty_ok) return outcome.matched->index;
    } catch (const std::exception&) {
    }
    return std::nullopt;
  };

  const auto fill = [&](std::size_t i) {
    const ContextPair& p = pairs[i];
    const std::vector<std::string> context = {tree.description_text(p.first),
                                              tree.description_text(p.second)};
    for (int t = 0; t <= options.retries; ++t) {
      if (auto target = attempt(generator, p, context)) {
        entries[i] = {*target, EntrySource::kModel};
        return;
      }
    }
    if (auto target = attempt(fallback, p, context)) {
      entries[i] = {*target, EntrySource::kFallback};
    } else {
      failed[i] = 1;
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.concurrency, pairs.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < pairs.size(); ++i) fill(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < pairs.size(); i = next++) fill(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  std::vector<std::string> bad;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (failed[i]) {
      bad.push_back("(" + std::to_string(pairs[i].first.index) + ", " +
                    std::to_string(pairs[i].second.index) + ")");
    }
  }
  if (!bad.empty()) {
    const std::size_t shown = std::min<std::size_t>(bad.size(), 20);
    std::string msg = "fallback failed for " + std::to_string(bad.size()) + " pair(s): " +
                      join(std::span(bad).first(shown), ", ");
    if (shown < bad.size()) msg += ", ...";
    throw BuildError(msg);
  }

  TableProvenance prov;
  prov.generator_id = generator.id();
  prov.fallback_id = fallback.id();
  prov.built_at = options.built_at.value_or(utc_timestamp());
  prov.fallback_count = std::count_if(entries.begin(), entries.end(), [](const TableEntry& e) {
    return e.source == EntrySource::kFallback;
  });
  prov.match_rate = static_cast<double>(static_cast<std::int64_t>(entries.size()) -
                                        prov.fallback_count) /
                    static_cast<double>(entries.size());
  prov.tree_fingerprint = tree.fingerprint();
  return TransitionTable(level, m, std::move(entries), std::move(prov));
}

// ---------------------------------------------------------------------------
// Files

void write_table(const TransitionTable& table, std::ostream& tsv, std::ostream& sidecar) {
  const int m = table.num_clusters();
  for (int a = 0; a < m; ++a) {
    for (int b = 0; b < m; ++b) {
      const auto& e = table.entry(a, b);
      tsv << a << '\t' << b << '\t' << e.target << '\t'
          << (e.source == EntrySource::kModel ? "model" : "fallback") << '\n';
    }
  }
  const auto& p = table.provenance();
  json j;
  j["level"] = table.level();
  j["num_clusters"] = m;
  j["generator_id"] = p.generator_id;
  j["fallback_id"] = p.fallback_id;
  j["built_at"] = p.built_at;
  j["match_rate"] = p.match_rate;
  j["fallback_count"] = p.fallback_count;
  j["tree_fingerprint"] = to_hex(p.tree_fingerprint);
  sidecar << j.dump(2) << '\n';
}

TransitionTable read_table(std::istream& tsv, std::istream& sidecar) {
  json meta;
  try {
    meta = json::parse(sidecar);
  } catch (const json::exception& e) {
    throw ParseError(0, std::string("malformed table sidecar: ") + e.what());
  }
  TableProvenance prov;
  int level = 0;
  int m = 0;
  try {
    level = meta.at("level").get<int>();
    m = meta.at("num_clusters").get<int>();
    prov.generator_id = meta.at("generator_id").get<std::string>();
    prov.fallback_id = meta.value("fallback_id", std::string());
    prov.built_at = meta.at("built_at").get<std::string>();
    prov.match_rate = meta.at("match_rate").get<double>();
    prov.fallback_count = meta.at("fallback_count").get<std::int64_t>();
    prov.tree_fingerprint = from_hex(meta.at("tree_fingerprint").get<std::string>());
  } catch (const json::exception& e) {
    throw ParseError(0, std::string("table sidecar: ") + e.what());
  }
  if (m < 1) throw ValidationError("table sidecar declares no clusters");

  const auto mm = static_cast<std::size_t>(m);
  std::vector<TableEntry> entries(mm * mm);
  std::vector<char> seen(mm * mm, 0);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(tsv, line)) {
    ++line_no;
    if (jsonl::blank(line)) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 4) throw ParseError(line_no, "expected 4 tab-separated fields");
    int v[3];
    for (int k = 0; k < 3; ++k) {
      try {
        std::size_t used = 0;
        v[k] = std::stoi(fields[static_cast<std::size_t>(k)], &used);
        if (used != fields[static_cast<std::size_t>(k)].size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw ParseError(line_no, "field " + std::to_string(k + 1) + " is not an integer");
      }
    }
    EntrySource source;
    if (fields[3] == "model") {
      source = EntrySource::kModel;
    } else if (fields[3] == "fallback") {
      source = EntrySource::kFallback;
    } else {
      throw ParseError(line_no, "source must be 'model' or 'fallback'");
    }
    if (v[0] < 0 || v[1] < 0 || v[0] >= m || v[1] >= m) {
      throw ValidationError(line_no, "pair outside the declared cluster count");
    }
    const std::size_t i = static_cast<std::size_t>(v[0]) * mm + static_cast<std::size_t>(v[1]);
    if (seen[i]) throw ValidationError(line_no, "pair listed twice");
    if (v[2] == v[0] || v[2] == v[1]) throw ValidationError(line_no, "target repeats the context");
    seen[i] = 1;
    entries[i] = {v[2], source};
  }
  const auto missing = std::count(seen.begin(), seen.end(), 0);
  if (missing > 0) {
    throw ValidationError("transition table is missing " + std::to_string(missing) + " pair(s)");
  }
  return TransitionTable(level, m, std::move(entries), std::move(prov));
}

std::filesystem::path sidecar_path(const std::filesystem::path& table_path) {
  return std::filesystem::path(table_path.string() + ".json");
}

void save_table(const TransitionTable& table, const std::filesystem::path& path) {
  auto tsv = jsonl::open_output(path);
  auto sidecar = jsonl::open_output(sidecar_path(path));
  write_table(table, tsv, sidecar);
}

TransitionTable load_table(const std::filesystem::path& path) {
  auto tsv = jsonl::open_input(path);
  auto sidecar = jsonl::open_input(sidecar_path(path));
  return read_table(tsv, sidecar);
}

}  // namespace explore
