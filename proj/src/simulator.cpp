#include "explore/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "explore/config.hpp"
#include "explore/errors.hpp"
#include "explore/itempolicy.hpp"
#include "explore/serving.hpp"
#include "explore/util.hpp"

namespace explore {

using nlohmann::json;

namespace {

constexpr double kBaseConsumption = 0.5;
constexpr double kMaxConsumption = 0.95;
constexpr double kKnownAffinityFloor = 0.5;
constexpr double kWarmupEventsPerDay = 3.0;
constexpr std::int64_t kSimStart = 1'700'000'000;
constexpr std::int64_t kContextWindow = 30 * kSecondsPerDay;
constexpr int kResampleBudget = 5;

// Stream tags for derive_seed.
enum : std::uint64_t { kTagCorpus, kTagTree, kTagItems, kTagUser, kTagWarmup, kTagDay };

struct UserState {
  std::string id;
  std::vector<double> latent;
  std::vector<std::uint8_t> active;    // affinity at full strength
  std::vector<std::uint8_t> consumed;  // cluster ever consumed
  std::vector<std::uint8_t> seen_item;
  UserHistory history;
  std::vector<std::size_t> recent;  // last two consumed items, oldest first
  std::vector<double> pulls;
  std::vector<double> rewards;
  std::vector<double> cluster_count;  // logged consumption per cluster
  double total_count = 0.0;
};

// The trained scorer reweighted by one user's logged cluster propensity.
class PersonalizedScorer : public SequenceScorer {
 public:
  PersonalizedScorer(const SequenceScorer& base, const std::vector<int>& cluster_of,
                     std::vector<double> propensity)
      : base_(base), cluster_of_(cluster_of), propensity_(std::move(propensity)) {}
  std::string id() const override { return base_.id() + "+propensity"; }
  std::size_t num_items() const override { return base_.num_items(); }
  using SequenceScorer::score;
  void score(std::span<const std::size_t> history, std::span<const std::size_t> candidates,
             std::span<double> out) const override {
    base_.score(history, candidates, out);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      out[i] *= propensity_[static_cast<std::size_t>(cluster_of_[candidates[i]])];
    }
  }

 private:
  const SequenceScorer& base_;
  const std::vector<int>& cluster_of_;
  std::vector<double> propensity_;
};

std::size_t draw_weighted(std::span<const double> weights, std::mt19937_64& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (total <= 0.0) return std::uniform_int_distribution<std::size_t>(0, weights.size() - 1)(rng);
  double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  std::size_t last = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    last = i;
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return last;
}

class Simulation {
 public:
  Simulation(const SimConfig& config, const SimWorld& world)
      : config_(config),
        world_(world),
        m_(static_cast<std::size_t>(world.tree.num_clusters(config.planning_level))) {
    const std::size_t n = world_.corpus.size();
    appeal_.resize(n);
    std::mt19937_64 rng(derive_seed(config_.seed, {kTagItems}));
    std::uniform_real_distribution<double> appeal(0.6, 1.4);
    for (auto& a : appeal_) a = appeal(rng);
    cluster_of_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      cluster_of_[i] = world_.tree.cluster_of(i, config_.planning_level).index;
    }
    member_weight_.resize(m_);
    for (std::size_t c = 0; c < m_; ++c) {
      for (std::size_t item : world_.tree.level(config_.planning_level)[c].members) {
        member_weight_[c].push_back(std::max(world_.corpus.item(item).traffic_weight, 1e-12));
      }
    }
  }

  SimReport run() {
    SimReport report;
    report.policy = config_.policy;
    report.seed = config_.seed;
    report.num_users = config_.num_users;
    global_count_.assign(m_, 0.0);
    init_users();
    warm_up();
    for (int d = 0; d < config_.days; ++d) report.days.push_back(step(d));
    summarize(report);
    return report;
  }

 private:
  std::int64_t day_start(int absolute_day) const {
    return kSimStart + static_cast<std::int64_t>(absolute_day) * kSecondsPerDay;
  }

  double effective(const UserState& u, std::size_t c) const {
    return u.active[c] ? u.latent[c] : u.latent[c] * config_.dormant_discount;
  }

  void init_users() {
    users_.resize(config_.num_users);
    for (std::size_t k = 0; k < users_.size(); ++k) {
      UserState& u = users_[k];
      std::mt19937_64 rng(derive_seed(config_.seed, {kTagUser, k}));
      char id[32];
      std::snprintf(id, sizeof id, "s%05zu", k);
      u.id = id;
      u.history.user_id = id;
      u.latent.assign(m_, 0.0);
      u.active.assign(m_, 0);
      u.consumed.assign(m_, 0);
      u.seen_item.assign(world_.corpus.size(), 0);
      u.pulls.assign(m_, 0.0);
      u.rewards.assign(m_, 0.0);
      u.cluster_count.assign(m_, 0.0);

      const auto home = std::uniform_int_distribution<std::size_t>(0, m_ - 1)(rng);
      std::vector<double> w(m_);
      for (std::size_t c = 0; c < m_; ++c) w[c] = c == home ? 0.0 : world_.similarity[home * m_ + c];
      const std::size_t similar = draw_weighted(w, rng);
      std::gamma_distribution<double> noise(config_.affinity_concentration,
                                            1.0 / config_.affinity_concentration);
      for (std::size_t c = 0; c < m_; ++c) {
        u.latent[c] = std::clamp(world_.similarity[home * m_ + c] * noise(rng), 0.0, 1.0);
      }
      for (std::size_t c : {home, similar}) {
        u.active[c] = 1;
        u.latent[c] = std::max(u.latent[c], kKnownAffinityFloor);
      }
    }
  }

  double draw_quality(const UserState& u, std::size_t c, std::mt19937_64& rng) const {
    const double q = effective(u, c) * std::uniform_real_distribution<double>(0.4, 1.4)(rng);
    return std::clamp(q, 0.05, 1.0);
  }

  void consume(UserState& u, std::size_t item, std::int64_t ts, double quality) {
    const auto c = static_cast<std::size_t>(cluster_of_[item]);
    InteractionEvent e{u.id, world_.corpus.item(item).item_id, ts, quality};
    log_.push_back(e);
    u.history.events.push_back(std::move(e));
    u.seen_item[item] = 1;
    u.consumed[c] = 1;
    u.cluster_count[c] += 1.0;
    u.total_count += 1.0;
    ++global_count_[c];
    ++global_total_;
    if (!u.active[c]) {
      u.active[c] = 1;
      u.latent[c] = std::min(1.0, u.latent[c] * config_.discovery_gain);
    }
    u.recent.push_back(item);
    if (u.recent.size() > 2) u.recent.erase(u.recent.begin());
  }

  // Organic consumption within the active clusters seeds the logs.
  void warm_up() {
    std::vector<double> w(m_);
    for (std::size_t k = 0; k < users_.size(); ++k) {
      UserState& u = users_[k];
      for (int d = 0; d < config_.warmup_days; ++d) {
        std::mt19937_64 rng(derive_seed(config_.seed, {kTagWarmup, k, static_cast<std::uint64_t>(d)}));
        int n = std::poisson_distribution<int>(kWarmupEventsPerDay)(rng);
        if (d == 0) n = std::max(n, 1);
        for (int j = 0; j < n; ++j) {
          for (std::size_t c = 0; c < m_; ++c) w[c] = u.active[c] ? u.latent[c] : 0.0;
          const std::size_t c = draw_weighted(w, rng);
          const auto& members = world_.tree.level(config_.planning_level)[c].members;
          const std::size_t item = members[draw_weighted(member_weight_[c], rng)];
          const auto ts = day_start(d) + 3600 + 60 * static_cast<std::int64_t>(j);
          consume(u, item, ts, draw_quality(u, c, rng));
        }
        for (std::size_t c = 0; c < m_; ++c) {
          u.pulls[c] += u.consumed[c] ? 1.0 : 0.0;
          u.rewards[c] += u.consumed[c] ? 1.0 : 0.0;
        }
      }
    }
  }

  struct Slot {
    std::size_t item;
    bool explore;
  };

  void fill(std::vector<Slot>& slate, const RetrievalResult& r, bool explore,
            std::vector<std::uint8_t>& exclude) const {
    for (const auto& s : r.ranked) {
      const std::size_t item = world_.corpus.index_of(s.item_id);
      slate.push_back({item, explore});
      exclude[item] = 1;
    }
  }

  void explore_slots(UserState& u, const SequenceScorer& scorer, std::int64_t now,
                     std::mt19937_64& rng, std::vector<Slot>& slate,
                     std::vector<std::uint8_t>& exclude, DayMetrics& metrics) {
    const int level = config_.planning_level;
    if (config_.policy == SimPolicy::kExploration) {
      ContextSample sample;
      try {
        sample = sample_context(u.history, world_.tree, level, 2, kContextWindow, now,
                                config_.quality_threshold, kResampleBudget, rng);
      } catch (const ColdStartError&) {
        return;
      }
      const int target = world_.table.lookup(sample.clusters[0].index, sample.clusters[1].index);
      if (target == sample.clusters[0].index || target == sample.clusters[1].index) {
        ++metrics.novelty_violations;
      }
      fill(slate,
           restricted_retrieval(scorer, world_.tree, u.recent, {level, target},
                                config_.explore_slots, exclude),
           true, exclude);
      return;
    }
    // Flat per-user UCB over clusters; unpulled clusters first, lower index on ties.
    double t = 1.0;
    for (double p : u.pulls) t += p;
    std::vector<std::pair<double, std::size_t>> ucb(m_);
    for (std::size_t c = 0; c < m_; ++c) {
      const double v = u.pulls[c] == 0.0
                           ? std::numeric_limits<double>::infinity()
                           : u.rewards[c] / u.pulls[c] +
                                 config_.bandit_exploration * std::sqrt(2.0 * std::log(t) / u.pulls[c]);
      ucb[c] = {-v, c};
    }
    std::sort(ucb.begin(), ucb.end());
    for (std::size_t j = 0; j < std::min(config_.explore_slots, m_); ++j) {
      fill(slate,
           restricted_retrieval(scorer, world_.tree, u.recent,
                                {level, static_cast<int>(ucb[j].second)}, 1, exclude),
           true, exclude);
    }
  }

  DayMetrics step(int d) {
    DayMetrics metrics;
    metrics.day = d;
    const int absolute = config_.warmup_days + d;
    const std::int64_t now = day_start(absolute);
    const ReferenceScorer scorer = train_reference_scorer(
        log_, world_.corpus, config_.scorer_smoothing, config_.quality_threshold);

    std::vector<Slot> slate;
    for (std::size_t k = 0; k < users_.size(); ++k) {
      UserState& u = users_[k];
      std::mt19937_64 rng(derive_seed(config_.seed, {kTagDay, k, static_cast<std::uint64_t>(d)}));
      std::vector<std::uint8_t> exclude = u.seen_item;
      std::vector<double> propensity(m_);
      const double alpha = config_.propensity_prior;
      for (std::size_t c = 0; c < m_; ++c) {
        const double share = global_total_ > 0.0 ? global_count_[c] / global_total_
                                                 : 1.0 / static_cast<double>(m_);
        propensity[c] = (u.cluster_count[c] + alpha * share) / (u.total_count + alpha);
      }
      const PersonalizedScorer personalized(scorer, cluster_of_, std::move(propensity));
      slate.clear();
      if (config_.policy != SimPolicy::kExploitation && config_.explore_slots > 0) {
        explore_slots(u, personalized, now, rng, slate, exclude, metrics);
      }
      if (slate.size() < config_.slate_size) {
        fill(slate,
             unrestricted_retrieval(personalized, world_.corpus, u.recent,
                                    config_.slate_size - slate.size(), exclude),
             false, exclude);
      }

      // Novelty is judged against consumption before today's slate.
      const std::vector<std::uint8_t> before = u.consumed;
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      for (std::size_t s = 0; s < slate.size(); ++s) {
        const std::size_t item = slate[s].item;
        const auto c = static_cast<std::size_t>(cluster_of_[item]);
        ++metrics.impressions;
        if (slate[s].explore) ++metrics.explore_impressions;
        if (!before[c]) ++metrics.novel_impressions;
        const double p =
            std::clamp(kBaseConsumption * effective(u, c) * appeal_[item], 0.0, kMaxConsumption);
        const bool take = unit(rng) < p;
        u.pulls[c] += 1.0;
        if (!take) continue;
        u.rewards[c] += 1.0;
        const double quality = draw_quality(u, c, rng);
        ++metrics.consumed;
        if (quality >= config_.quality_threshold) ++metrics.positives;
        consume(u, item, now + 3600 + 60 * static_cast<std::int64_t>(s), quality);
      }
    }
    metrics.uci = compute_uci(log_, world_.tree, config_.planning_level, config_.uci_n,
                              now + kSecondsPerDay - 1);
    return metrics;
  }

  void summarize(SimReport& report) const {
    std::int64_t impressions = 0, novel = 0, positives = 0;
    for (const auto& d : report.days) {
      impressions += d.impressions;
      novel += d.novel_impressions;
      positives += d.positives;
      report.novelty_violations += d.novelty_violations;
      for (const auto& [n, count] : d.uci) report.mean_uci[n] += static_cast<double>(count);
    }
    if (report.days.empty()) return;
    for (auto& [n, v] : report.mean_uci) v /= static_cast<double>(report.days.size());
    report.summary.uci = report.days.back().uci;
    if (impressions > 0) {
      report.summary.novel_impression_ratio =
          static_cast<double>(novel) / static_cast<double>(impressions);
      report.summary.positive_feedback_rate =
          static_cast<double>(positives) / static_cast<double>(impressions);
    }
  }

  const SimConfig& config_;
  const SimWorld& world_;
  std::size_t m_;
  std::vector<double> appeal_;
  std::vector<int> cluster_of_;
  std::vector<std::vector<double>> member_weight_;
  std::vector<UserState> users_;
  std::vector<InteractionEvent> log_;
  std::vector<double> global_count_;
  double global_total_ = 0.0;
};

}  // namespace

SimPolicy parse_policy(std::string_view name) {
  if (name == "exploration") return SimPolicy::kExploration;
  if (name == "exploitation") return SimPolicy::kExploitation;
  if (name == "bandit") return SimPolicy::kBandit;
  throw ConfigError("unknown policy '" + std::string(name) +
                    "'; expected exploration, exploitation or bandit");
}

std::string to_string(SimPolicy policy) {
  switch (policy) {
    case SimPolicy::kExploration: return "exploration";
    case SimPolicy::kExploitation: return "exploitation";
    case SimPolicy::kBandit: return "bandit";
  }
  return "unknown";
}

void SimConfig::validate() const {
  if (num_items < 1 || num_clusters < 3 || dim < 1 || slate_size < 1) {
    throw ConfigError("simulation item, cluster, dimension and slate counts must be positive "
                      "(at least 3 clusters)");
  }
  if (days < 7) throw ConfigError("simulation needs at least 7 days, got " + std::to_string(days));
  if (warmup_days < 1) throw ConfigError("simulation needs at least one warm-up day");
  if (explore_slots > slate_size) throw ConfigError("explore_slots exceeds slate_size");
  if (planning_level < 1 || planning_level > kTreeLevels) {
    throw ConfigError("planning_level must lie in 1..4");
  }
  if (num_items < 4 * static_cast<std::size_t>(num_clusters)) {
    throw ConfigError("simulation needs at least 4 items per planning-level cluster");
  }
  if (!(affinity_concentration > 0.0) || !(discovery_gain > 0.0) ||
      !(dormant_discount >= 0.0 && dormant_discount <= 1.0) || !(scorer_smoothing > 0.0) ||
      !(bandit_exploration >= 0.0) || !(propensity_prior > 0.0)) {
    throw ConfigError("simulation rates out of range");
  }
  if (!(quality_threshold > 0.0 && quality_threshold <= 1.0)) {
    throw ConfigError("quality_threshold must lie in (0, 1]");
  }
  if (uci_n.empty()) throw ConfigError("uci_n must not be empty");
  for (int n : uci_n) {
    if (n < 1) throw ConfigError("uci_n values must be positive");
  }
}

SimConfig load_sim_config(const std::filesystem::path& path) {
  const ConfigMap c = read_config_file(path);
  SimConfig out;
  auto count = [&](const char* key, auto& field) {
    if (auto v = config_int(c, std::string("simulation.") + key)) {
      if (*v < 0) throw ConfigError(std::string("simulation.") + key + " must not be negative");
      field = static_cast<std::remove_reference_t<decltype(field)>>(*v);
    }
  };
  auto real = [&](const char* key, double& field) {
    if (auto v = config_double(c, std::string("simulation.") + key)) field = *v;
  };
  count("num_users", out.num_users);
  count("num_items", out.num_items);
  count("num_clusters", out.num_clusters);
  count("dim", out.dim);
  count("days", out.days);
  count("seed", out.seed);
  count("slate_size", out.slate_size);
  count("explore_slots", out.explore_slots);
  count("warmup_days", out.warmup_days);
  count("planning_level", out.planning_level);
  real("affinity_concentration", out.affinity_concentration);
  real("discovery_gain", out.discovery_gain);
  real("dormant_discount", out.dormant_discount);
  real("quality_threshold", out.quality_threshold);
  real("scorer_smoothing", out.scorer_smoothing);
  real("bandit_exploration", out.bandit_exploration);
  real("propensity_prior", out.propensity_prior);
  if (auto v = config_string(c, "simulation.policy")) out.policy = parse_policy(*v);
  if (auto v = config_string(c, "simulation.uci_n")) {
    out.uci_n.clear();
    for (const auto& part : split(*v, ',')) {
      try {
        out.uci_n.push_back(std::stoi(part));
      } catch (const std::exception&) {
        throw ConfigError("simulation.uci_n must list integers, got '" + *v + "'");
      }
    }
  }
  out.validate();
  return out;
}

SimWorld build_sim_world(const SimConfig& config) {
  config.validate();
  SimWorld world;
  const auto m = config.num_clusters;
  world.corpus = synth_corpus(config.num_items, static_cast<std::size_t>(m), config.dim,
                              derive_seed(config.seed, {kTagCorpus}));
  ClusterBuildOptions options;
  options.counts = {std::max(1, m / 4), m, 2 * m, 4 * m};
  options.seed = derive_seed(config.seed, {kTagTree});
  world.tree = build_cluster_tree(world.corpus, options);
  const EmbeddingFallbackGenerator embedding(world.tree, config.planning_level);
  BulkInferOptions infer;
  infer.built_at = "1970-01-01T00:00:00Z";
  world.table = bulk_infer(embedding, world.tree, config.planning_level, embedding, infer);
  world.similarity = centroid_similarity(world.tree, config.planning_level);
  return world;
}

double DayMetrics::novel_impression_ratio() const {
  return impressions > 0 ? static_cast<double>(novel_impressions) / static_cast<double>(impressions)
                         : 0.0;
}

double DayMetrics::positive_feedback_rate() const {
  return impressions > 0 ? static_cast<double>(positives) / static_cast<double>(impressions) : 0.0;
}

SimReport run_simulation(const SimConfig& config, const SimWorld& world) {
  config.validate();
  if (config.num_users == 0) {
    SimReport empty;
    empty.policy = config.policy;
    empty.seed = config.seed;
    return empty;
  }
  if (world.table.level() != config.planning_level ||
      world.tree.num_clusters(config.planning_level) != world.table.num_clusters() ||
      world.tree.num_items() != world.corpus.size()) {
    throw ConsistencyError("simulation world does not match the configured planning level");
  }
  return Simulation(config, world).run();
}

SimReport run_simulation(const SimConfig& config) {
  config.validate();
  if (config.num_users == 0) return run_simulation(config, SimWorld{});
  const SimWorld world = build_sim_world(config);
  return run_simulation(config, world);
}

json sim_report_to_json(const SimReport& report) {
  json j;
  j["policy"] = to_string(report.policy);
  j["seed"] = report.seed;
  j["num_users"] = report.num_users;
  j["novelty_violations"] = report.novelty_violations;
  json mean = json::object();
  for (const auto& [n, v] : report.mean_uci) mean[std::to_string(n)] = v;
  j["mean_uci"] = mean;
  j["summary"] = report_to_json(report.summary);
  json days = json::array();
  for (const auto& d : report.days) {
    json uci = json::object();
    for (const auto& [n, count] : d.uci) uci[std::to_string(n)] = count;
    days.push_back({{"day", d.day},
                    {"uci", uci},
                    {"impressions", d.impressions},
                    {"novel_impressions", d.novel_impressions},
                    {"consumed", d.consumed},
                    {"positives", d.positives},
                    {"explore_impressions", d.explore_impressions},
                    {"novelty_violations", d.novelty_violations},
                    {"novel_impression_ratio", d.novel_impression_ratio()},
                    {"positive_feedback_rate", d.positive_feedback_rate()}});
  }
  j["days"] = days;
  return j;
}

}  // namespace explore
