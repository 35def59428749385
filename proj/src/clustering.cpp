#include "explore/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "explore/errors.hpp"
#include "explore/util.hpp"
#include "json.hpp"

namespace explore {

using nlohmann::json;

std::string to_string(ClusterId id) {
  return "L" + std::to_string(id.level) + ":" + std::to_string(id.index);
}

// ---------------------------------------------------------------------------
// ClusterTree

ClusterTree::ClusterTree(Parts parts) : parts_(std::move(parts)) {
  const std::size_t n = parts_.item_ids.size();
  item_index_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!item_index_.emplace(parts_.item_ids[i], i).second) {
      throw ValidationError("cluster tree lists item '" + parts_.item_ids[i] + "' twice");
    }
  }
  assignment_.assign(n, {-1, -1, -1, -1});

  for (int l = 1; l <= kTreeLevels; ++l) {
    const auto li = static_cast<std::size_t>(l - 1);
    const auto& clusters = parts_.levels[li];
    if (clusters.empty()) throw ValidationError("level " + std::to_string(l) + " has no clusters");
    std::set<std::string> seen_descriptions;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
      const Cluster& cl = clusters[c];
      if (cl.id.level != l || cl.id.index != static_cast<int>(c)) {
        throw ValidationError("cluster " + to_string(cl.id) + " stored at level " +
                              std::to_string(l) + " position " + std::to_string(c));
      }
      if (cl.members.empty()) throw ValidationError("cluster " + to_string(cl.id) + " is empty");
      if (cl.description.empty()) {
        throw ValidationError("cluster " + to_string(cl.id) + " has no description");
      }
      if (!seen_descriptions.insert(normalize_text(join(cl.description, " "))).second) {
        throw ValidationError("duplicate description at level " + std::to_string(l) + ": '" +
                              join(cl.description, " ") + "'");
      }
      for (std::size_t m : cl.members) {
        if (m >= n) throw ValidationError("cluster " + to_string(cl.id) + " has unknown member");
        int& slot = assignment_[m][li];
        if (slot != -1) {
          throw ValidationError("item '" + parts_.item_ids[m] + "' is in two clusters at level " +
                                std::to_string(l));
        }
        slot = static_cast<int>(c);
      }
    }
    for (std::size_t m = 0; m < n; ++m) {
      if (assignment_[m][li] == -1) {
        throw ValidationError("item '" + parts_.item_ids[m] + "' is unassigned at level " +
                              std::to_string(l));
      }
    }
    children_[li].assign(clusters.size(), {});
  }

  for (int l = 2; l <= kTreeLevels; ++l) {
    const auto li = static_cast<std::size_t>(l - 1);
    const auto& parents = parts_.parents[li];
    if (parents.size() != parts_.levels[li].size()) {
      throw ValidationError("parent map incomplete at level " + std::to_string(l));
    }
    for (std::size_t c = 0; c < parents.size(); ++c) {
      const int p = parents[c];
      if (p < 0 || p >= num_clusters(l - 1)) {
        throw ValidationError("cluster " + to_string({l, static_cast<int>(c)}) +
                              " has an invalid parent");
      }
      for (std::size_t m : parts_.levels[li][c].members) {
        if (assignment_[m][li - 1] != p) {
          throw ValidationError("cluster " + to_string({l, static_cast<int>(c)}) +
                                " is not nested in its parent");
        }
      }
      children_[li - 1][static_cast<std::size_t>(p)].push_back(static_cast<int>(c));
    }
  }

  Fnv1a h;
  h.update(static_cast<std::uint64_t>(n));
  for (std::size_t m = 0; m < n; ++m) {
    h.update(parts_.item_ids[m]);
    for (int a : assignment_[m]) h.update(static_cast<std::uint64_t>(a));
  }
  for (const auto& level : parts_.levels) {
    h.update(static_cast<std::uint64_t>(level.size()));
    for (const auto& cl : level) h.update(normalize_text(join(cl.description, " ")));
  }
  fingerprint_ = h.digest();
}

std::optional<std::size_t> ClusterTree::item_index(std::string_view item_id) const {
  auto it = item_index_.find(std::string(item_id));
  if (it == item_index_.end()) return std::nullopt;
  return it->second;
}

int ClusterTree::num_clusters(int level) const {
  if (level < 1 || level > kTreeLevels) return 0;
  return static_cast<int>(parts_.levels[static_cast<std::size_t>(level - 1)].size());
}

const std::vector<Cluster>& ClusterTree::level(int level) const {
  if (level < 1 || level > kTreeLevels) {
    throw ArgumentError("tree level must lie in 1..4, got " + std::to_string(level));
  }
  return parts_.levels[static_cast<std::size_t>(level - 1)];
}

bool ClusterTree::contains(ClusterId id) const {
  return id.index >= 0 && id.index < num_clusters(id.level);
}

const Cluster& ClusterTree::cluster(ClusterId id) const {
  if (!contains(id)) throw ArgumentError("unknown cluster " + to_string(id));
  return parts_.levels[static_cast<std::size_t>(id.level - 1)][static_cast<std::size_t>(id.index)];
}

ClusterId ClusterTree::parent(ClusterId child) const {
  if (!contains(child) || child.level < 2) {
    throw ArgumentError("cluster " + to_string(child) + " has no parent");
  }
  const auto li = static_cast<std::size_t>(child.level - 1);
  return {child.level - 1, parts_.parents[li][static_cast<std::size_t>(child.index)]};
}

const std::vector<int>& ClusterTree::children(ClusterId id) const {
  if (!contains(id)) throw ArgumentError("unknown cluster " + to_string(id));
  return children_[static_cast<std::size_t>(id.level - 1)][static_cast<std::size_t>(id.index)];
}

std::string ClusterTree::description_text(ClusterId id) const {
  return join(cluster(id).description, " ");
}

DescriptionIndex::DescriptionIndex(const ClusterTree& tree, int level) : level_(level) {
  for (const auto& cl : tree.level(level)) {
    index_.emplace(normalize_text(join(cl.description, " ")), cl.id.index);
  }
}

std::optional<ClusterId> DescriptionIndex::find(std::string_view raw) const {
  auto it = index_.find(normalize_text(raw));
  if (it == index_.end()) return std::nullopt;
  return ClusterId{level_, it->second};
}

// ---------------------------------------------------------------------------
// Balanced partition

namespace {

struct PartitionState {
  std::vector<int> group;
  std::vector<double> load;
};

std::vector<std::vector<double>> initial_centroids(const Corpus& corpus,
                                                   std::span<const std::size_t> members,
                                                   std::span<const double> weight, int groups,
                                                   std::mt19937_64& rng) {
  const std::size_t n = members.size();
  const std::size_t dim = corpus.dim();
  std::vector<std::vector<double>> centroids;
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  auto pick = [&](const std::vector<double>& score) -> std::size_t {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : score[i];
    if (total <= 0.0) {
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) return i;
      }
      return 0;
    }
    double r = unif(rng) * total;
    std::size_t last = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (chosen[i] || score[i] <= 0.0) continue;
      last = i;
      r -= score[i];
      if (r <= 0.0) return i;
    }
    return last;
  };

  std::vector<double> score(weight.begin(), weight.end());
  for (int g = 0; g < groups; ++g) {
    const std::size_t c = pick(score);
    chosen[c] = 1;
    const auto& e = corpus.item(members[c]).embedding;
    centroids.emplace_back(e.begin(), e.end());
    for (std::size_t i = 0; i < n; ++i) {
      const auto& x = corpus.item(members[i]).embedding;
      double d = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double diff = x[k] - centroids.back()[k];
        d += diff * diff;
      }
      nearest[i] = std::min(nearest[i], d);
      score[i] = weight[i] * nearest[i];
    }
  }
  return centroids;
}

void capacity_assign(const std::vector<std::vector<double>>& dist, std::span<const double> weight,
                     double target, double tolerance, PartitionState& st) {
  const std::size_t n = dist.size();
  const std::size_t groups = st.load.size();
  const double cap = (1.0 + tolerance) * target;
  std::vector<std::pair<double, std::size_t>> pairs;
  pairs.reserve(n * groups);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < groups; ++g) pairs.emplace_back(dist[i][g], i * groups + g);
  }
  std::sort(pairs.begin(), pairs.end());
  std::fill(st.group.begin(), st.group.end(), -1);
  std::fill(st.load.begin(), st.load.end(), 0.0);
  for (const auto& [d, key] : pairs) {
    const std::size_t i = key / groups;
    const std::size_t g = key % groups;
    if (st.group[i] != -1) continue;
    if (st.load[g] + weight[i] <= cap) {
      st.group[i] = static_cast<int>(g);
      st.load[g] += weight[i];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (st.group[i] != -1) continue;
    const auto g = static_cast<std::size_t>(
        std::min_element(st.load.begin(), st.load.end()) - st.load.begin());
    st.group[i] = static_cast<int>(g);
    st.load[g] += weight[i];
  }
}

// Greedy single-item moves that shrink the larger deviation of the two
// clusters involved, preferring the cheapest move in squared distance.
void repair_balance(const std::vector<std::vector<double>>& dist, std::span<const double> weight,
                    double target, double tolerance, PartitionState& st) {
  const std::size_t n = dist.size();
  const std::size_t groups = st.load.size();
  const double allowed = tolerance * target;
  const double eps = 1e-12 * std::max(target, 1.0);
  auto dev = [target](double load) { return std::abs(load - target); };

  std::vector<std::vector<std::size_t>> members(groups);
  for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(st.group[i])].push_back(i);

  std::vector<char> stuck(groups, 0);
  const std::size_t max_moves = 20 * n + 100;
  for (std::size_t move = 0; move < max_moves; ++move) {
    std::size_t j = groups;
    double worst = allowed;
    for (std::size_t g = 0; g < groups; ++g) {
      if (!stuck[g] && dev(st.load[g]) > worst) {
        worst = dev(st.load[g]);
        j = g;
      }
    }
    if (j == groups) break;

    std::size_t best_item = n;
    std::size_t best_other = groups;
    double best_cost = std::numeric_limits<double>::infinity();
    auto consider = [&](std::size_t i, std::size_t from, std::size_t to) {
      const double before = std::max(dev(st.load[from]), dev(st.load[to]));
      const double after =
          std::max(dev(st.load[from] - weight[i]), dev(st.load[to] + weight[i]));
      if (after >= before - eps) return;
      const double cost = dist[i][to] - dist[i][from];
      if (cost < best_cost) {
        best_cost = cost;
        best_item = i;
        best_other = (from == j) ? to : from;
      }
    };
    if (st.load[j] < target) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto from = static_cast<std::size_t>(st.group[i]);
        if (from != j) consider(i, from, j);
      }
    } else {
      for (std::size_t i : members[j]) {
        for (std::size_t to = 0; to < groups; ++to) {
          if (to != j) consider(i, j, to);
        }
      }
    }
    if (best_item == n) {
      stuck[j] = 1;
      continue;
    }
    const auto from = static_cast<std::size_t>(st.group[best_item]);
    const std::size_t to = (from == j) ? best_other : j;
    st.load[from] -= weight[best_item];
    st.load[to] += weight[best_item];
    st.group[best_item] = static_cast<int>(to);
    auto& fm = members[from];
    fm.erase(std::find(fm.begin(), fm.end(), best_item));
    members[to].push_back(best_item);
    std::fill(stuck.begin(), stuck.end(), 0);
  }
}

}  // namespace

std::vector<int> balanced_partition(const Corpus& corpus, std::span<const std::size_t> members,
                                    int groups, double tolerance, std::uint64_t seed,
                                    int max_rounds) {
  const std::size_t n = members.size();
  if (groups < 1 || static_cast<std::size_t>(groups) > n) {
    throw ArgumentError("cannot split " + std::to_string(n) + " items into " +
                        std::to_string(groups) + " groups");
  }
  if (groups == 1) return std::vector<int>(n, 0);

  std::vector<double> weight(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    weight[i] = corpus.item(members[i]).traffic_weight;
    total += weight[i];
  }
  if (total <= 0.0) {
    std::fill(weight.begin(), weight.end(), 1.0);
    total = static_cast<double>(n);
  }
  const double target = total / groups;
  const auto g_count = static_cast<std::size_t>(groups);
  const std::size_t dim = corpus.dim();

  std::mt19937_64 rng(seed);
  auto centroids = initial_centroids(corpus, members, weight, groups, rng);
  std::vector<std::vector<double>> dist(n, std::vector<double>(g_count));
  PartitionState st{std::vector<int>(n, -1), std::vector<double>(g_count, 0.0)};
  std::vector<int> previous;

  for (int round = 0; round < std::max(1, max_rounds); ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& x = corpus.item(members[i]).embedding;
      for (std::size_t g = 0; g < g_count; ++g) {
        double d = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          const double diff = x[k] - centroids[g][k];
          d += diff * diff;
        }
        dist[i][g] = d;
      }
    }
    capacity_assign(dist, weight, target, tolerance, st);
    repair_balance(dist, weight, target, tolerance, st);
    if (st.group == previous) break;
    previous = st.group;

    std::vector<std::vector<double>> sum(g_count, std::vector<double>(dim, 0.0));
    std::vector<double> mass(g_count, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto g = static_cast<std::size_t>(st.group[i]);
      const auto& x = corpus.item(members[i]).embedding;
      const double w = weight[i] > 0.0 ? weight[i] : 1e-9;
      for (std::size_t k = 0; k < dim; ++k) sum[g][k] += w * x[k];
      mass[g] += w;
    }
    for (std::size_t g = 0; g < g_count; ++g) {
      if (mass[g] <= 0.0) continue;
      for (std::size_t k = 0; k < dim; ++k) centroids[g][k] = sum[g][k] / mass[g];
    }
  }
  return st.group;
}

// ---------------------------------------------------------------------------
// Descriptions

namespace {

std::vector<std::pair<std::string, double>> ranked_keywords(const Corpus& corpus,
                                                            std::span<const std::size_t> members) {
  std::map<std::string, double> weight;
  for (std::size_t m : members) {
    const Item& item = corpus.item(m);
    std::set<std::string> unique(item.keywords.begin(), item.keywords.end());
    for (const auto& kw : unique) weight[kw] += item.traffic_weight;
  }
  std::vector<std::pair<std::string, double>> ranked(weight.begin(), weight.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return ranked;
}

void assign_descriptions(const Corpus& corpus, std::vector<Cluster>& clusters, int max_keywords) {
  const std::size_t m = clusters.size();
  std::vector<std::vector<std::string>> ranking(m);
  std::vector<std::size_t> next(m);
  for (std::size_t c = 0; c < m; ++c) {
    for (auto& [kw, w] : ranked_keywords(corpus, clusters[c].members)) {
      ranking[c].push_back(kw);
    }
    const std::size_t take =
        std::min(ranking[c].size(), static_cast<std::size_t>(std::max(1, max_keywords)));
    clusters[c].description.assign(ranking[c].begin(),
                                   ranking[c].begin() + static_cast<std::ptrdiff_t>(take));
    next[c] = take;
  }
  // Later clusters sharing a normalized description get their next-ranked
  // keyword appended, then an index token once their keywords run out.
  while (true) {
    std::map<std::string, std::vector<std::size_t>> by_text;
    for (std::size_t c = 0; c < m; ++c) {
      by_text[normalize_text(join(clusters[c].description, " "))].push_back(c);
    }
    bool changed = false;
    for (auto& [text, group] : by_text) {
      for (std::size_t k = 1; k < group.size(); ++k) {
        const std::size_t c = group[k];
        if (next[c] < ranking[c].size()) {
          clusters[c].description.push_back(ranking[c][next[c]++]);
        } else {
          clusters[c].description.push_back("c" + std::to_string(c));
          next[c] = ranking[c].size() + 1;
        }
        changed = true;
      }
    }
    if (!changed) break;
  }
}

}  // namespace

std::vector<std::string> describe_cluster(const Corpus& corpus,
                                          std::span<const std::size_t> members,
                                          int max_keywords) {
  std::vector<std::string> out;
  for (auto& [kw, w] : ranked_keywords(corpus, members)) {
    if (static_cast<int>(out.size()) >= max_keywords) break;
    out.push_back(kw);
  }
  return out;
}

std::vector<std::string> describe_cluster(const Corpus& corpus, const Cluster& cluster,
                                          int max_keywords) {
  return describe_cluster(corpus, cluster.members, max_keywords);
}

// ---------------------------------------------------------------------------
// Tree construction

namespace {

// Splits `total_children` across parents proportionally to their traffic, at
// least one child per parent and at most one child per member item.
std::vector<int> allocate_children(const std::vector<Cluster>& parents, int total_children,
                                   int level) {
  const std::size_t np = parents.size();
  std::vector<int> alloc(np, 1);
  int remaining = total_children - static_cast<int>(np);
  if (remaining < 0) {
    throw BuildError("level " + std::to_string(level) + " has fewer clusters than its parent level");
  }
  double total = 0.0;
  for (const auto& p : parents) total += p.traffic;
  std::vector<double> extra(np);
  double extra_sum = 0.0;
  for (std::size_t p = 0; p < np; ++p) {
    const double share = total > 0.0 ? parents[p].traffic / total
                                     : static_cast<double>(parents[p].members.size());
    extra[p] = std::max(0.0, share * total_children - 1.0);
    extra_sum += extra[p];
  }
  if (extra_sum <= 0.0) {
    for (std::size_t p = 0; p < np; ++p) extra[p] = static_cast<double>(parents[p].members.size());
    extra_sum = std::accumulate(extra.begin(), extra.end(), 0.0);
  }
  std::vector<std::pair<double, std::size_t>> frac;
  int assigned = 0;
  for (std::size_t p = 0; p < np; ++p) {
    const double q = extra[p] * remaining / extra_sum;
    const int whole = static_cast<int>(std::floor(q));
    alloc[p] += whole;
    assigned += whole;
    frac.emplace_back(q - whole, p);
  }
  std::stable_sort(frac.begin(), frac.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int k = 0; k < remaining - assigned; ++k) {
    alloc[frac[static_cast<std::size_t>(k) % np].second] += 1;
  }
  // Respect member counts; push overflow to parents with spare items.
  int overflow = 0;
  for (std::size_t p = 0; p < np; ++p) {
    const int cap = static_cast<int>(parents[p].members.size());
    if (alloc[p] > cap) {
      overflow += alloc[p] - cap;
      alloc[p] = cap;
    }
  }
  while (overflow > 0) {
    std::size_t best = np;
    double best_load = -1.0;
    for (std::size_t p = 0; p < np; ++p) {
      if (alloc[p] >= static_cast<int>(parents[p].members.size())) continue;
      const double load = parents[p].traffic / alloc[p];
      if (load > best_load) {
        best_load = load;
        best = p;
      }
    }
    if (best == np) {
      throw BuildError("level " + std::to_string(level) + " needs more clusters than items");
    }
    ++alloc[best];
    --overflow;
  }
  return alloc;
}

Cluster make_cluster(const Corpus& corpus, ClusterId id, std::vector<std::size_t> members) {
  Cluster cl;
  cl.id = id;
  std::sort(members.begin(), members.end());
  cl.members = std::move(members);
  const std::size_t dim = corpus.dim();
  std::vector<double> sum(dim, 0.0);
  double mass = 0.0;
  for (std::size_t m : cl.members) {
    const Item& item = corpus.item(m);
    cl.traffic += item.traffic_weight;
    const double w = item.traffic_weight;
    for (std::size_t k = 0; k < dim; ++k) sum[k] += w * item.embedding[k];
    mass += w;
  }
  if (mass <= 0.0) {
    std::fill(sum.begin(), sum.end(), 0.0);
    for (std::size_t m : cl.members) {
      for (std::size_t k = 0; k < dim; ++k) sum[k] += corpus.item(m).embedding[k];
    }
    mass = static_cast<double>(cl.members.size());
  }
  cl.centroid.resize(dim);
  for (std::size_t k = 0; k < dim; ++k) cl.centroid[k] = static_cast<float>(sum[k] / mass);
  return cl;
}

}  // namespace

ClusterTree build_cluster_tree(const Corpus& corpus, const ClusterBuildOptions& options) {
  const auto& counts = options.counts;
  for (int l = 0; l < kTreeLevels; ++l) {
    if (counts[static_cast<std::size_t>(l)] < 1) {
      throw ArgumentError("cluster count at level " + std::to_string(l + 1) + " must be >= 1");
    }
    if (l > 0 && counts[static_cast<std::size_t>(l)] < counts[static_cast<std::size_t>(l - 1)]) {
      throw ArgumentError("cluster counts must increase with level; level " +
                          std::to_string(l + 1) + " has " +
                          std::to_string(counts[static_cast<std::size_t>(l)]) + " < " +
                          std::to_string(counts[static_cast<std::size_t>(l - 1)]));
    }
  }
  if (static_cast<std::size_t>(counts[kTreeLevels - 1]) > corpus.size()) {
    throw ArgumentError("level 4 count exceeds the number of items");
  }
  if (!(options.balance_tolerance > 0.0)) throw ArgumentError("balance_tolerance must be > 0");

  // Each split aims well inside the tolerance; deviations compound down the
  // nesting because children inherit their parent's surplus.
  const double split_tolerance = options.balance_tolerance / 8.0;

  ClusterTree::Parts parts;
  parts.dim = corpus.dim();
  for (const auto& item : corpus.items()) parts.item_ids.push_back(item.item_id);

  std::vector<std::size_t> all(corpus.size());
  std::iota(all.begin(), all.end(), std::size_t{0});

  for (int l = 1; l <= kTreeLevels; ++l) {
    const auto li = static_cast<std::size_t>(l - 1);
    std::vector<std::vector<std::size_t>> parent_members;
    std::vector<int> alloc;
    if (l == 1) {
      parent_members.push_back(all);
      alloc.push_back(counts[0]);
    } else {
      for (const auto& p : parts.levels[li - 1]) parent_members.push_back(p.members);
      alloc = allocate_children(parts.levels[li - 1], counts[li], l);
    }
    auto& level = parts.levels[li];
    for (std::size_t p = 0; p < parent_members.size(); ++p) {
      const auto& pm = parent_members[p];
      const auto groups = balanced_partition(
          corpus, pm, alloc[p], split_tolerance,
          derive_seed(options.seed, {static_cast<std::uint64_t>(l), p}), options.max_rounds);
      std::vector<std::vector<std::size_t>> buckets(static_cast<std::size_t>(alloc[p]));
      for (std::size_t i = 0; i < pm.size(); ++i) {
        buckets[static_cast<std::size_t>(groups[i])].push_back(pm[i]);
      }
      for (auto& bucket : buckets) {
        if (bucket.empty()) {
          throw BuildError("level " + std::to_string(l) + " produced an empty cluster");
        }
        const int index = static_cast<int>(level.size());
        level.push_back(make_cluster(corpus, {l, index}, std::move(bucket)));
        if (l > 1) parts.parents[li].push_back(static_cast<int>(p));
      }
    }
    assign_descriptions(corpus, level, options.max_keywords);
  }

  // Balance report and feasibility check.
  double heaviest = 0.0;
  double total = 0.0;
  for (const auto& item : corpus.items()) {
    heaviest = std::max(heaviest, item.traffic_weight);
    total += item.traffic_weight;
  }
  std::vector<int> violating;
  for (int l = 1; l <= kTreeLevels; ++l) {
    const auto& level = parts.levels[static_cast<std::size_t>(l - 1)];
    LevelBalance b;
    b.level = l;
    const double mean = total / static_cast<double>(level.size());
    b.min_ratio = std::numeric_limits<double>::infinity();
    b.max_ratio = 0.0;
    for (const auto& cl : level) {
      const double r = mean > 0.0 ? cl.traffic / mean : 1.0;
      b.min_ratio = std::min(b.min_ratio, r);
      b.max_ratio = std::max(b.max_ratio, r);
    }
    b.infeasible = mean > 0.0 && heaviest > (1.0 + options.balance_tolerance) * mean;
    const bool balanced = b.min_ratio >= 1.0 - options.balance_tolerance - 1e-9 &&
                          b.max_ratio <= 1.0 + options.balance_tolerance + 1e-9;
    if (!balanced && !b.infeasible) violating.push_back(l);
    parts.balance.push_back(b);
  }
  if (!violating.empty()) {
    std::string msg = "traffic balance violated at level(s)";
    for (int l : violating) {
      const auto& b = parts.balance[static_cast<std::size_t>(l - 1)];
      msg += " " + std::to_string(l) + " [" + std::to_string(b.min_ratio) + ", " +
             std::to_string(b.max_ratio) + "]";
    }
    throw BuildError(msg);
  }
  return ClusterTree(std::move(parts));
}

std::array<ClusterId, kTreeLevels> assign_item(const ClusterTree& tree, const Item& item) {
  std::array<ClusterId, kTreeLevels> out;
  if (tree.num_items() == 0 || tree.num_clusters(1) == 0) {
    throw Error("cannot assign into an empty cluster tree");
  }
  if (auto idx = tree.item_index(item.item_id)) {
    for (int l = 1; l <= kTreeLevels; ++l) out[static_cast<std::size_t>(l - 1)] = tree.cluster_of(*idx, l);
    return out;
  }
  if (item.embedding.size() != tree.dim()) {
    throw ValidationError("item embedding dimension does not match the tree");
  }
  auto nearest = [&](int level, std::span<const int> candidates) {
    int best = candidates.front();
    double best_d = std::numeric_limits<double>::infinity();
    for (int c : candidates) {
      const double d = squared_distance(item.embedding, tree.cluster({level, c}).centroid);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    return best;
  };
  std::vector<int> top(static_cast<std::size_t>(tree.num_clusters(1)));
  std::iota(top.begin(), top.end(), 0);
  ClusterId current{1, nearest(1, top)};
  out[0] = current;
  for (int l = 2; l <= kTreeLevels; ++l) {
    current = {l, nearest(l, tree.children(current))};
    out[static_cast<std::size_t>(l - 1)] = current;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

void write_cluster_tree(const ClusterTree& tree, std::ostream& out) {
  const auto& parts = tree.parts();
  json j;
  j["version"] = 1;
  j["dim"] = parts.dim;
  j["fingerprint"] = to_hex(tree.fingerprint());
  json levels = json::array();
  for (int l = 1; l <= kTreeLevels; ++l) {
    json clusters = json::array();
    for (const auto& cl : tree.level(l)) {
      json c;
      c["index"] = cl.id.index;
      c["description"] = cl.description;
      c["traffic"] = cl.traffic;
      c["size"] = cl.members.size();
      c["centroid"] = cl.centroid;
      if (l > 1) c["parent"] = tree.parent(cl.id).index;
      clusters.push_back(std::move(c));
    }
    levels.push_back({{"level", l}, {"clusters", std::move(clusters)}});
  }
  j["levels"] = std::move(levels);
  json balance = json::array();
  for (const auto& b : parts.balance) {
    balance.push_back({{"level", b.level},
                       {"min_ratio", b.min_ratio},
                       {"max_ratio", b.max_ratio},
                       {"infeasible", b.infeasible}});
  }
  j["balance"] = std::move(balance);
  json assignments = json::object();
  for (std::size_t m = 0; m < tree.num_items(); ++m) {
    assignments[parts.item_ids[m]] = tree.assignment(m);
  }
  j["item_order"] = parts.item_ids;
  j["assignments"] = std::move(assignments);
  out << j.dump() << '\n';
}

ClusterTree read_cluster_tree(std::istream& in) {
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(0, std::string("malformed clusters file: ") + e.what());
  }
  try {
    ClusterTree::Parts parts;
    parts.dim = j.at("dim").get<std::size_t>();
    parts.item_ids = j.at("item_order").get<std::vector<std::string>>();
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t m = 0; m < parts.item_ids.size(); ++m) index[parts.item_ids[m]] = m;

    const auto& levels = j.at("levels");
    if (levels.size() != kTreeLevels) throw ParseError(0, "clusters file must have 4 levels");
    for (int l = 1; l <= kTreeLevels; ++l) {
      const auto li = static_cast<std::size_t>(l - 1);
      for (const auto& c : levels.at(li).at("clusters")) {
        Cluster cl;
        cl.id = {l, c.at("index").get<int>()};
        cl.description = c.at("description").get<std::vector<std::string>>();
        cl.traffic = c.at("traffic").get<double>();
        cl.centroid = c.at("centroid").get<std::vector<float>>();
        if (l > 1) parts.parents[li].push_back(c.at("parent").get<int>());
        parts.levels[li].push_back(std::move(cl));
      }
    }
    for (const auto& [id, levels_of] : j.at("assignments").items()) {
      auto it = index.find(id);
      if (it == index.end()) throw ParseError(0, "assignment for unlisted item '" + id + "'");
      const auto a = levels_of.get<std::array<int, kTreeLevels>>();
      for (int l = 0; l < kTreeLevels; ++l) {
        const int c = a[static_cast<std::size_t>(l)];
        auto& level = parts.levels[static_cast<std::size_t>(l)];
        if (c < 0 || static_cast<std::size_t>(c) >= level.size()) {
          throw ParseError(0, "item '" + id + "' assigned to a missing cluster");
        }
        level[static_cast<std::size_t>(c)].members.push_back(it->second);
      }
    }
    for (auto& level : parts.levels) {
      for (auto& cl : level) std::sort(cl.members.begin(), cl.members.end());
    }
    if (auto b = j.find("balance"); b != j.end()) {
      for (const auto& e : *b) {
        parts.balance.push_back({e.at("level").get<int>(), e.at("min_ratio").get<double>(),
                                 e.at("max_ratio").get<double>(), e.at("infeasible").get<bool>()});
      }
    }
    ClusterTree tree(std::move(parts));
    if (auto fp = j.find("fingerprint"); fp != j.end()) {
      if (from_hex(fp->get<std::string>()) != tree.fingerprint()) {
        throw ConsistencyError("clusters file fingerprint does not match its content");
      }
    }
    return tree;
  } catch (const json::exception& e) {
    throw ParseError(0, std::string("invalid clusters file: ") + e.what());
  }
}

void save_cluster_tree(const ClusterTree& tree, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_cluster_tree(tree, out);
}

ClusterTree load_cluster_tree(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return read_cluster_tree(in);
}

}  // namespace explore
