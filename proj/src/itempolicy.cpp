#include "explore/itempolicy.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>

#include "explore/errors.hpp"
#include "json.hpp"
#include "jsonl.hpp"

namespace explore {

using nlohmann::json;

namespace {

constexpr int kScorerVersion = 1;

std::uint32_t successor_count(const ReferenceScorer::Successors& s, std::size_t c) {
  auto it = std::lower_bound(s.item.begin(), s.item.end(), static_cast<std::uint32_t>(c));
  if (it == s.item.end() || *it != c) return 0;
  return s.count[static_cast<std::size_t>(it - s.item.begin())];
}

ReferenceScorer::Successors to_successors(const std::map<std::uint32_t, std::uint32_t>& counts) {
  ReferenceScorer::Successors s;
  for (const auto& [item, n] : counts) {
    s.item.push_back(item);
    s.count.push_back(n);
    s.total += n;
  }
  return s;
}

// `ids(i)` returns the item id at index i.
template <typename IdFn>
RetrievalResult rank(const SequenceScorer& scorer, IdFn ids, std::size_t num_items,
                     std::span<const std::size_t> history, std::vector<std::size_t> candidates,
                     std::size_t k, std::span<const std::uint8_t> exclude) {
  if (k < 1) throw ArgumentError("k must be at least 1");
  if (!exclude.empty()) {
    if (exclude.size() != num_items) throw ArgumentError("exclusion mask has the wrong size");
    std::erase_if(candidates, [&](std::size_t c) { return exclude[c] != 0; });
  }
  std::vector<double> scores(candidates.size());
  scorer.score(history, candidates, scores);

  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t keep = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return ids(candidates[a]) < ids(candidates[b]);
                    });
  RetrievalResult out;
  out.truncated = candidates.size() < k;
  out.ranked.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    out.ranked.push_back({ids(candidates[order[i]]), scores[order[i]]});
  }
  return out;
}

json successors_json(const std::vector<ReferenceScorer::Successors>& lag) {
  json out = json::array();
  for (std::size_t x = 0; x < lag.size(); ++x) {
    if (lag[x].item.empty()) continue;
    out.push_back({x, lag[x].item, lag[x].count});
  }
  return out;
}

std::vector<ReferenceScorer::Successors> successors_from_json(const json& j, std::size_t n) {
  std::vector<ReferenceScorer::Successors> lag(n);
  for (const auto& row : j) {
    const auto x = row.at(0).get<std::size_t>();
    if (x >= n) throw ValidationError("scorer successor row names item " + std::to_string(x));
    auto& s = lag[x];
    s.item = row.at(1).get<std::vector<std::uint32_t>>();
    s.count = row.at(2).get<std::vector<std::uint32_t>>();
    if (s.item.size() != s.count.size() || !std::is_sorted(s.item.begin(), s.item.end())) {
      throw ValidationError("scorer successor row " + std::to_string(x) + " is malformed");
    }
    for (std::size_t i = 0; i < s.item.size(); ++i) {
      if (s.item[i] >= n) throw ValidationError("scorer successor names an unknown item");
      s.total += s.count[i];
    }
  }
  return lag;
}

}  // namespace

std::vector<double> SequenceScorer::score(const Corpus& corpus,
                                          std::span<const std::string> history,
                                          std::span<const std::string> candidates) const {
  const auto h = to_indices(corpus, history);
  std::vector<std::size_t> c;
  c.reserve(candidates.size());
  for (const auto& id : candidates) c.push_back(corpus.index_of(id));
  std::vector<double> out(c.size());
  score(h, c, out);
  return out;
}

ReferenceScorer::ReferenceScorer(std::vector<std::string> item_ids, std::vector<double> popularity,
                                 std::vector<Successors> lag1, std::vector<Successors> lag2,
                                 double smoothing)
    : item_ids_(std::move(item_ids)),
      popularity_(std::move(popularity)),
      lag1_(std::move(lag1)),
      lag2_(std::move(lag2)),
      smoothing_(smoothing),
      beta_(smoothing * static_cast<double>(item_ids_.size())) {
  const std::size_t n = item_ids_.size();
  if (n == 0) throw ValidationError("scorer has no items");
  if (!(smoothing > 0.0) || !std::isfinite(smoothing)) {
    throw ArgumentError("smoothing must be positive");
  }
  if (popularity_.size() != n || lag1_.size() != n || lag2_.size() != n) {
    throw ValidationError("scorer tables disagree on the item count");
  }
  for (double p : popularity_) {
    if (!(p > 0.0) || !std::isfinite(p)) throw ValidationError("popularity must be positive");
  }
}

void ReferenceScorer::score(std::span<const std::size_t> history,
                            std::span<const std::size_t> candidates, std::span<double> out) const {
  if (out.size() != candidates.size()) throw ArgumentError("score output has the wrong size");
  const std::size_t n = item_ids_.size();
  const auto term = [&](const Successors& s, std::size_t c) {
    return (static_cast<double>(successor_count(s, c)) + beta_ * popularity_[c]) /
           (static_cast<double>(s.total) + beta_);
  };
  for (std::size_t h : history) {
    if (h >= n) throw ArgumentError("history names an unknown item index");
  }
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::size_t c = candidates[i];
    if (c >= n) throw ArgumentError("candidate names an unknown item index");
    if (history.empty()) {
      out[i] = popularity_[c];
    } else if (history.size() == 1) {
      out[i] = term(lag1_[history.back()], c);
    } else {
      out[i] = kLag1Weight * term(lag1_[history[history.size() - 1]], c) +
               (1.0 - kLag1Weight) * term(lag2_[history[history.size() - 2]], c);
    }
  }
}

ReferenceScorer train_reference_scorer(std::span<const InteractionEvent> events,
                                       const Corpus& corpus, double smoothing,
                                       double quality_threshold) {
  if (events.empty()) throw TrainingError("cannot train a scorer on an empty event log");
  if (corpus.empty()) throw TrainingError("cannot train a scorer on an empty corpus");
  if (!(smoothing > 0.0)) throw ArgumentError("smoothing must be positive");
  const std::size_t n = corpus.size();

  const auto users = group_by_user({events.begin(), events.end()});
  std::vector<std::map<std::uint32_t, std::uint32_t>> c1(n), c2(n);
  for (const auto& user : users) {
    std::vector<std::uint32_t> seq;
    for (const auto& e : user.events) {
      if (e.quality < quality_threshold) continue;
      const auto idx = corpus.find(e.item_id);
      if (!idx) throw TrainingError("event names unknown item '" + e.item_id + "'");
      seq.push_back(static_cast<std::uint32_t>(*idx));
    }
    for (std::size_t t = 1; t < seq.size(); ++t) {
      ++c1[seq[t - 1]][seq[t]];
      if (t >= 2) ++c2[seq[t - 2]][seq[t]];
    }
  }

  // Popularity prior: traffic plus a 1% uniform share so every item is positive.
  const double total = corpus.total_traffic();
  const double floor = total > 0.0 ? 0.01 * total / static_cast<double>(n) : 1.0;
  std::vector<double> popularity(n);
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    popularity[i] = (corpus.item(i).traffic_weight + floor) /
                    (total + floor * static_cast<double>(n));
    ids[i] = corpus.item(i).item_id;
  }
  std::vector<ReferenceScorer::Successors> lag1(n), lag2(n);
  for (std::size_t i = 0; i < n; ++i) {
    lag1[i] = to_successors(c1[i]);
    lag2[i] = to_successors(c2[i]);
  }
  return ReferenceScorer(std::move(ids), std::move(popularity), std::move(lag1), std::move(lag2),
                         smoothing);
}

void write_scorer(const ReferenceScorer& scorer, std::ostream& out) {
  json j;
  j["version"] = kScorerVersion;
  j["kind"] = scorer.id();
  j["smoothing"] = scorer.smoothing();
  j["item_ids"] = scorer.item_ids();
  j["popularity"] = scorer.popularity();
  j["lag1"] = successors_json(scorer.lag1());
  j["lag2"] = successors_json(scorer.lag2());
  out << j.dump() << '\n';
}

ReferenceScorer read_scorer(std::istream& in) {
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(0, std::string("malformed scorer model: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != kScorerVersion) {
      throw ValidationError("unsupported scorer model version");
    }
    if (j.at("kind").get<std::string>() != "reference-order2") {
      throw ValidationError("unsupported scorer kind '" + j.at("kind").get<std::string>() + "'");
    }
    auto ids = j.at("item_ids").get<std::vector<std::string>>();
    const std::size_t n = ids.size();
    return ReferenceScorer(std::move(ids), j.at("popularity").get<std::vector<double>>(),
                           successors_from_json(j.at("lag1"), n),
                           successors_from_json(j.at("lag2"), n),
                           j.at("smoothing").get<double>());
  } catch (const json::exception& e) {
    throw ParseError(0, std::string("scorer model: ") + e.what());
  }
}

void save_scorer(const ReferenceScorer& scorer, const std::filesystem::path& path) {
  auto out = jsonl::open_output(path);
  write_scorer(scorer, out);
}

ReferenceScorer load_scorer(const std::filesystem::path& path) {
  auto in = jsonl::open_input(path);
  return read_scorer(in);
}

std::vector<std::size_t> to_indices(const Corpus& corpus, std::span<const std::string> item_ids) {
  std::vector<std::size_t> out;
  out.reserve(item_ids.size());
  for (const auto& id : item_ids) {
    if (auto idx = corpus.find(id)) out.push_back(*idx);
  }
  return out;
}

RetrievalResult restricted_retrieval(const SequenceScorer& scorer, const ClusterTree& tree,
                                     std::span<const std::size_t> history, ClusterId target,
                                     std::size_t k, std::span<const std::uint8_t> exclude) {
  if (!tree.contains(target)) throw ArgumentError("unknown cluster " + to_string(target));
  const auto& members = tree.cluster(target).members;
  const auto& ids = tree.item_ids();
  auto out = rank(
      scorer, [&](std::size_t i) -> const std::string& { return ids[i]; }, ids.size(), history,
      {members.begin(), members.end()}, k, exclude);
  out.target_cluster = target;
  return out;
}

RetrievalResult unrestricted_retrieval(const SequenceScorer& scorer, const Corpus& corpus,
                                       std::span<const std::size_t> history, std::size_t k,
                                       std::span<const std::uint8_t> exclude) {
  std::vector<std::size_t> all(corpus.size());
  std::iota(all.begin(), all.end(), 0);
  return rank(
      scorer, [&](std::size_t i) -> const std::string& { return corpus.item(i).item_id; },
      corpus.size(), history, std::move(all), k, exclude);
}

}  // namespace explore
