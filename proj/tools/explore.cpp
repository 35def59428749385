// Command-line front end for the offline pipeline, the service and the
// evaluation tools.
#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "explore/clustering.hpp"
#include "explore/config.hpp"
#include "explore/corpus.hpp"
#include "explore/curation.hpp"
#include "explore/errors.hpp"
#include "explore/evalsim.hpp"
#include "explore/genpolicy.hpp"
#include "explore/itempolicy.hpp"
#include "explore/remote_generator.hpp"
#include "explore/serving.hpp"
#include "explore/simulator.hpp"
#include "explore/util.hpp"
#include "json.hpp"
#include "svg_plot.hpp"

namespace fs = std::filesystem;
using namespace explore;
using nlohmann::json;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ExportError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<int> parse_counts(const std::string& text) {
  std::vector<int> out;
  for (const auto& part : split(text, ',')) {
    try {
      out.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw ArgumentError("expected comma-separated integers, got '" + text + "'");
    }
  }
  return out;
}

struct SynthCorpusArgs {
  std::size_t items = 10000;
  std::size_t topics = 64;
  std::size_t dim = kDefaultEmbeddingDim;
  std::uint64_t seed = 0;
  fs::path out = "items.jsonl";
};

struct ClusterArgs {
  fs::path corpus;
  std::string counts = "4,16,64,256";
  double tolerance = kDefaultBalanceTolerance;
  std::uint64_t seed = 0;
  fs::path out = "clusters.json";
};

struct SynthEventsArgs {
  fs::path corpus, clusters;
  int level = kDefaultPlanningLevel;
  LogSynthConfig log;
  fs::path out = "events.jsonl";
};

struct CurateArgs {
  fs::path events, clusters;
  std::string mode = "balanced";
  int cap = kDefaultPerLabelCap;
  std::optional<std::size_t> n;
  std::uint64_t seed = 0;
  int level = kDefaultPlanningLevel;
  double quality = kDefaultQualityThreshold;
  double holdout_fraction = 0.0;
  fs::path holdout_out = "transitions_test.jsonl";
  fs::path transitions_out;
  fs::path dataset_out;
  fs::path templ;
  fs::path out = "sft.jsonl";
};

struct BulkInferArgs {
  fs::path clusters;
  int level = kDefaultPlanningLevel;
  std::string generator = "stub";
  fs::path sft;
  fs::path config;
  fs::path templ;
  std::optional<std::size_t> concurrency;
  int retries = 1;
  fs::path out = "table.tsv";
};

struct TrainScorerArgs {
  fs::path corpus, events;
  double smoothing = kDefaultSmoothing;
  double quality = kDefaultQualityThreshold;
  fs::path out = "scorer.json";
};

struct EvalArgs {
  fs::path table, clusters, test, finetune, finetune_sft, events, templ;
  std::optional<std::int64_t> as_of;
  std::vector<int> uci_n = {2, 5, 10};
  fs::path out = "report.json";
};

struct SimulateArgs {
  fs::path config;
  std::string policies = "exploration,exploitation,bandit";
  int seeds = 10;
  fs::path out = "simdir";
};

PromptTemplate load_template(const fs::path& path) {
  if (path.empty()) return PromptTemplate();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open prompt template " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  return PromptTemplate(std::move(text));
}

int cmd_synth_corpus(const SynthCorpusArgs& a) {
  const Corpus corpus = synth_corpus(a.items, a.topics, a.dim, a.seed);
  save_corpus(corpus, a.out);
  std::cout << "wrote " << corpus.size() << " items to " << a.out.string() << "\n";
  return 0;
}

int cmd_cluster(const ClusterArgs& a) {
  const Corpus corpus = load_corpus(a.corpus);
  const auto counts = parse_counts(a.counts);
  if (counts.size() != kTreeLevels) throw ArgumentError("--counts needs exactly 4 values");
  ClusterBuildOptions options;
  std::copy(counts.begin(), counts.end(), options.counts.begin());
  options.balance_tolerance = a.tolerance;
  options.seed = a.seed;
  const ClusterTree tree = build_cluster_tree(corpus, options);
  save_cluster_tree(tree, a.out);
  for (const auto& b : tree.balance()) {
    std::cout << "level " << b.level << ": traffic ratio " << b.min_ratio << ".." << b.max_ratio
              << (b.infeasible ? " (infeasible: oversized item)" : "") << "\n";
  }
  std::cout << "wrote " << a.out.string() << " fingerprint " << to_hex(tree.fingerprint()) << "\n";
  return 0;
}

int cmd_synth_events(const SynthEventsArgs& a) {
  const Corpus corpus = load_corpus(a.corpus);
  const ClusterTree tree = load_cluster_tree(a.clusters);
  const auto events = synthesize_log(corpus, tree, a.level, a.log);
  save_events(events, a.out);
  std::cout << "wrote " << events.size() << " events to " << a.out.string() << "\n";
  return 0;
}

int cmd_curate(const CurateArgs& a) {
  const ClusterTree tree = load_cluster_tree(a.clusters);
  auto histories = group_by_user(load_events(a.events));
  std::vector<UserHistory> train = std::move(histories);
  if (a.holdout_fraction > 0.0) {
    auto [kept, held] = split_histories(train, a.holdout_fraction, a.seed);
    const auto test = mine_transitions(held, tree, a.level, a.quality);
    save_transitions(test, a.holdout_out);
    std::cout << "held out " << held.size() << " users, " << test.size() << " transitions -> "
              << a.holdout_out.string() << "\n";
    train = std::move(kept);
  }
  const auto raw = mine_transitions(train, tree, a.level, a.quality);
  if (!a.transitions_out.empty()) save_transitions(raw, a.transitions_out);

  CuratedDataset dataset;
  if (a.mode == "balanced") {
    dataset = curate_balanced(raw, a.cap);
  } else if (a.mode == "random") {
    std::size_t n = a.n.value_or(0);
    if (!a.n) {
      n = curate_balanced(raw, a.cap).examples.size();  // size-matched to balanced
    }
    dataset = curate_random(raw, n, a.seed);
  } else {
    throw ArgumentError("--mode must be balanced or random");
  }
  if (!a.dataset_out.empty()) save_transitions(dataset.examples, a.dataset_out);
  const auto records = export_sft(dataset, tree, load_template(a.templ));
  save_sft(records, a.out);
  std::cout << "mined " << raw.size() << " distinct transitions; wrote " << records.size()
            << " records to " << a.out.string() << "\n";
  return 0;
}

int cmd_bulk_infer(const BulkInferArgs& a) {
  const ClusterTree tree = load_cluster_tree(a.clusters);
  const EmbeddingFallbackGenerator fallback(tree, a.level);
  const PromptTemplate templ = load_template(a.templ);
  BulkInferOptions options;
  options.retries = a.retries;
  std::unique_ptr<InterestGenerator> owned;
  const InterestGenerator* generator = &fallback;
  std::optional<CuratedDataset> dataset;
  if (a.generator == "memorize") {
    if (a.sft.empty()) throw ArgumentError("--generator memorize needs --sft");
    dataset = dataset_from_sft(load_sft(a.sft), tree, a.level, templ);
    owned = std::make_unique<MemorizingGenerator>(*dataset, tree);
    generator = owned.get();
  } else if (a.generator == "remote") {
    RemoteEndpoint endpoint;
    if (!a.config.empty()) endpoint = RemoteEndpoint::from_config(read_config_file(a.config), endpoint);
    endpoint = RemoteEndpoint::from_env(endpoint);
    options.concurrency = static_cast<std::size_t>(std::max(1, endpoint.max_in_flight));
    owned = std::make_unique<RemoteGenerator>(endpoint, templ);
    generator = owned.get();
  } else if (a.generator != "stub") {
    throw ArgumentError("--generator must be stub, memorize or remote");
  }
  if (a.concurrency) options.concurrency = *a.concurrency;
  const TransitionTable table = bulk_infer(*generator, tree, a.level, fallback, options);
  save_table(table, a.out);
  std::cout << "wrote " << table.size() << " entries to " << a.out.string() << "; match rate "
            << table.provenance().match_rate << ", fallbacks " << table.provenance().fallback_count
            << "\n";
  return 0;
}

int cmd_train_scorer(const TrainScorerArgs& a) {
  const Corpus corpus = load_corpus(a.corpus);
  const auto events = load_events(a.events, &corpus);
  const ReferenceScorer scorer = train_reference_scorer(events, corpus, a.smoothing, a.quality);
  save_scorer(scorer, a.out);
  std::cout << "wrote " << a.out.string() << " (" << scorer.num_items() << " items)\n";
  return 0;
}

int cmd_serve(const fs::path& config_path) {
  const ServiceConfig config = load_service_config(config_path);
  auto state = std::make_shared<const ServingState>(load_serving_state(config));
  RecommendServer server(config, state, &std::cout);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const int port = server.start();
  std::cerr << "listening on " << config.listen_host << ":" << port << "\n";
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  const TransitionTable table = load_table(a.table);
  MetricsReport report;
  report.match_rate = table.provenance().match_rate;
  report.distribution = compute_distribution_stats(table.label_frequencies());
  if (!a.test.empty()) report.recall_test = compute_recall(table, load_transitions(a.test, table.level()));
  if (!a.finetune.empty()) {
    report.recall_finetune = compute_recall(table, load_transitions(a.finetune, table.level()));
  }
  if (!a.finetune_sft.empty()) {
    if (a.clusters.empty()) throw ArgumentError("--finetune-sft needs --clusters");
    const ClusterTree tree = load_cluster_tree(a.clusters);
    const CuratedDataset trained =
        dataset_from_sft(load_sft(a.finetune_sft), tree, table.level(), load_template(a.templ));
    report.recall_finetune = compute_recall(table, trained.examples);
  }
  if (!a.events.empty()) {
    if (a.clusters.empty()) throw ArgumentError("--events needs --clusters");
    const ClusterTree tree = load_cluster_tree(a.clusters);
    const auto events = load_events(a.events);
    std::int64_t as_of = 0;
    for (const auto& e : events) as_of = std::max(as_of, e.timestamp);
    report.uci = compute_uci(events, tree, table.level(), a.uci_n, a.as_of.value_or(as_of));
  }
  write_json(a.out, report_to_json(report));

  std::vector<std::string> names;
  std::vector<double> shares;
  for (const auto& b : report.distribution->histogram) {
    names.push_back(b.name());
    shares.push_back(b.label_share);
  }
  fs::path plot = a.out;
  plot.replace_extension(".label_histogram.svg");
  tools::write_bar_chart(plot, "Share of labels per output-frequency bucket", names, shares);
  std::cout << "wrote " << a.out.string() << " and " << plot.string() << "\n";
  return 0;
}

int cmd_simulate(const SimulateArgs& a) {
  const SimConfig base = a.config.empty() ? SimConfig{} : load_sim_config(a.config);
  std::vector<SimPolicy> policies;
  for (const auto& name : split(a.policies, ',')) policies.push_back(parse_policy(name));
  if (a.seeds < 1) throw ArgumentError("--seeds must be at least 1");
  fs::create_directories(a.out);

  // Per policy: day-wise means over seeds.
  std::map<std::string, std::vector<double>> uci5, novel, pfr;
  json summary = json::object();
  const int probe_n = base.uci_n.size() > 1 ? base.uci_n[1] : base.uci_n.front();
  for (int s = 0; s < a.seeds; ++s) {
    SimConfig config = base;
    config.seed = base.seed + static_cast<std::uint64_t>(s);
    const SimWorld world = config.num_users > 0 ? build_sim_world(config) : SimWorld{};
    for (SimPolicy p : policies) {
      config.policy = p;
      const SimReport r = run_simulation(config, world);
      const std::string name = to_string(p);
      write_json(a.out / (name + "_seed" + std::to_string(config.seed) + ".json"),
                 sim_report_to_json(r));
      auto& u = uci5[name];
      auto& n = novel[name];
      auto& f = pfr[name];
      u.resize(r.days.size(), 0.0);
      n.resize(r.days.size(), 0.0);
      f.resize(r.days.size(), 0.0);
      for (std::size_t d = 0; d < r.days.size(); ++d) {
        u[d] += static_cast<double>(r.days[d].uci.at(probe_n)) / a.seeds;
        n[d] += r.days[d].novel_impression_ratio() / a.seeds;
        f[d] += r.days[d].positive_feedback_rate() / a.seeds;
      }
      auto& entry = summary[name];
      if (entry.is_null()) entry = json::object();
      auto add = [&](const char* key, double v) {
        entry[key] = entry.value(key, 0.0) + v / a.seeds;
      };
      for (const auto& [k, v] : r.mean_uci) add(("mean_uci@" + std::to_string(k)).c_str(), v);
      add("novel_impression_ratio", r.summary.novel_impression_ratio.value_or(0.0));
      add("positive_feedback_rate", r.summary.positive_feedback_rate.value_or(0.0));
      entry["novelty_violations"] = entry.value("novelty_violations", std::int64_t{0}) +
                                    r.novelty_violations;
      std::cout << name << " seed " << config.seed << ": uci@" << probe_n << " "
                << (r.mean_uci.count(probe_n) ? r.mean_uci.at(probe_n) : 0.0) << ", novel "
                << r.summary.novel_impression_ratio.value_or(0.0) << ", pfr "
                << r.summary.positive_feedback_rate.value_or(0.0) << "\n";
    }
  }
  summary["seeds"] = a.seeds;
  write_json(a.out / "summary.json", summary);

  auto chart = [&](const char* file, const char* title, const char* y,
                   const std::map<std::string, std::vector<double>>& data) {
    std::vector<tools::Series> series;
    for (const auto& [name, values] : data) series.push_back({name, values});
    tools::write_line_chart(a.out / file, title, "day", y, series);
  };
  chart("uci.svg", ("UCI@" + std::to_string(probe_n) + " per day").c_str(), "users", uci5);
  chart("novel_impression_ratio.svg", "Novel impression ratio per day", "ratio", novel);
  chart("positive_feedback_rate.svg", "Positive feedback rate per day", "rate", pfr);
  std::cout << "wrote " << (a.out / "summary.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interest exploration pipeline: build artifacts, serve, evaluate, simulate"};
  app.require_subcommand(1);
  std::function<int()> action;

  SynthCorpusArgs sc;
  auto* c1 = app.add_subcommand("synth-corpus", "Write a seeded synthetic items.jsonl");
  c1->add_option("--items", sc.items, "Number of items");
  c1->add_option("--topics", sc.topics, "Number of latent topics");
  c1->add_option("--dim", sc.dim, "Embedding dimension");
  c1->add_option("--seed", sc.seed);
  c1->add_option("--out", sc.out);
  c1->callback([&] { action = [&] { return cmd_synth_corpus(sc); }; });

  ClusterArgs cl;
  auto* c2 = app.add_subcommand("cluster", "Build the 4-level cluster tree");
  c2->add_option("--corpus", cl.corpus)->required();
  c2->add_option("--counts", cl.counts, "Clusters per level, comma separated");
  c2->add_option("--tolerance", cl.tolerance, "Traffic balance tolerance");
  c2->add_option("--seed", cl.seed);
  c2->add_option("--out", cl.out);
  c2->callback([&] { action = [&] { return cmd_cluster(cl); }; });

  SynthEventsArgs se;
  auto* c3 = app.add_subcommand("synth-events", "Write a seeded synthetic events.jsonl");
  c3->add_option("--corpus", se.corpus)->required();
  c3->add_option("--clusters", se.clusters)->required();
  c3->add_option("--level", se.level);
  c3->add_option("--users", se.log.num_users);
  c3->add_option("--days", se.log.days);
  c3->add_option("--events-per-day", se.log.events_per_day);
  c3->add_option("--novel-probability", se.log.novel_probability);
  c3->add_option("--zipf", se.log.zipf_exponent);
  c3->add_option("--start", se.log.start, "First day, seconds since epoch");
  c3->add_option("--seed", se.log.seed);
  c3->add_option("--out", se.out);
  c3->callback([&] { action = [&] { return cmd_synth_events(se); }; });

  CurateArgs cu;
  auto* c4 = app.add_subcommand("curate", "Mine transitions and export SFT records");
  c4->add_option("--events", cu.events)->required();
  c4->add_option("--clusters", cu.clusters)->required();
  c4->add_option("--mode", cu.mode, "balanced or random")->check(CLI::IsMember({"balanced", "random"}));
  c4->add_option("--cap", cu.cap, "Per-label cap (balanced)");
  c4->add_option("--n", cu.n, "Sample size (random); defaults to the balanced size");
  c4->add_option("--seed", cu.seed);
  c4->add_option("--level", cu.level);
  c4->add_option("--quality", cu.quality, "Quality threshold");
  c4->add_option("--holdout-fraction", cu.holdout_fraction, "Users held out for testing");
  c4->add_option("--holdout-out", cu.holdout_out);
  c4->add_option("--transitions-out", cu.transitions_out, "All mined training transitions");
  c4->add_option("--dataset-out", cu.dataset_out, "Curated examples as transitions.jsonl");
  c4->add_option("--template", cu.templ, "Prompt template file");
  c4->add_option("--out", cu.out);
  c4->callback([&] { action = [&] { return cmd_curate(cu); }; });

  BulkInferArgs bi;
  auto* c5 = app.add_subcommand("bulk-infer", "Fill the transition table for every pair");
  c5->add_option("--clusters", bi.clusters)->required();
  c5->add_option("--level", bi.level);
  c5->add_option("--generator", bi.generator, "stub, memorize or remote")
      ->check(CLI::IsMember({"stub", "memorize", "remote"}));
  c5->add_option("--sft", bi.sft, "Training records for --generator memorize");
  c5->add_option("--config", bi.config, "TOML with a [generator] table");
  c5->add_option("--template", bi.templ, "Prompt template file");
  c5->add_option("--concurrency", bi.concurrency);
  c5->add_option("--retries", bi.retries);
  c5->add_option("--out", bi.out);
  c5->callback([&] { action = [&] { return cmd_bulk_infer(bi); }; });

  TrainScorerArgs ts;
  auto* c6 = app.add_subcommand("train-scorer", "Fit the reference next-item scorer");
  c6->add_option("--corpus", ts.corpus)->required();
  c6->add_option("--events", ts.events)->required();
  c6->add_option("--smoothing", ts.smoothing);
  c6->add_option("--quality", ts.quality);
  c6->add_option("--out", ts.out);
  c6->callback([&] { action = [&] { return cmd_train_scorer(ts); }; });

  fs::path serve_config;
  auto* c7 = app.add_subcommand("serve", "Run the recommendation service");
  c7->add_option("--config", serve_config)->required();
  c7->callback([&] { action = [&] { return cmd_serve(serve_config); }; });

  EvalArgs ev;
  auto* c8 = app.add_subcommand("eval", "Score a transition table");
  c8->add_option("--table", ev.table)->required();
  c8->add_option("--test", ev.test, "Held-out transitions.jsonl");
  c8->add_option("--finetune", ev.finetune, "Training transitions.jsonl");
  c8->add_option("--finetune-sft", ev.finetune_sft, "Training records (sft.jsonl)");
  c8->add_option("--template", ev.templ, "Prompt template file for --finetune-sft");
  c8->add_option("--clusters", ev.clusters);
  c8->add_option("--events", ev.events, "Events for UCI@N");
  c8->add_option("--as-of", ev.as_of);
  c8->add_option("--uci-n", ev.uci_n)->delimiter(',');
  c8->add_option("--out", ev.out);
  c8->callback([&] { action = [&] { return cmd_eval(ev); }; });

  SimulateArgs sm;
  auto* c9 = app.add_subcommand("simulate", "Closed-loop policy comparison");
  c9->add_option("--config", sm.config, "TOML with a [simulation] table");
  c9->add_option("--policies", sm.policies);
  c9->add_option("--seeds", sm.seeds);
  c9->add_option("--out", sm.out);
  c9->callback([&] { action = [&] { return cmd_simulate(sm); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return action();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
