#include "explore/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>

#include "explore/errors.hpp"
#include "json.hpp"
#include "jsonl.hpp"

namespace explore {

using nlohmann::json;
using jsonl::blank;
using jsonl::field;
using jsonl::open_input;
using jsonl::parse_line;

namespace {

constexpr std::array<const char*, 48> kTopicWords = {
    "jazz",     "cooking",   "football", "gardening", "chess",    "anime",     "hiking",
    "baking",   "astronomy", "fishing",  "guitar",    "yoga",     "pottery",   "skating",
    "surfing",  "comedy",    "magic",    "origami",   "robotics", "painting",  "poetry",
    "camping",  "cycling",   "dancing",  "knitting",  "tennis",   "birding",   "coffee",
    "wine",     "history",   "physics",  "makeup",    "fashion",  "parenting", "fitness",
    "drones",   "aquariums", "cars",     "boxing",    "climbing", "sailing",   "opera",
    "hiphop",   "cats",      "dogs",     "gaming",    "finance",  "travel"};

constexpr std::array<const char*, 32> kFacetWords = {
    "tutorial", "live",    "vintage",  "beginner", "advanced", "review",  "challenge", "asmr",
    "vlog",     "shorts",  "documentary",  "tips",     "fails",    "epic",    "cozy",      "budget",
    "luxury",   "retro",   "kids",     "outdoor",  "diy",      "science", "music",     "funny",
    "relaxing", "extreme", "classic",  "modern",   "speedrun", "behind",  "remix",     "pro"};

constexpr std::size_t kFacetsPerTopic = 4;

std::string topic_keyword(std::size_t topic) {
  std::string word = kTopicWords[topic % kTopicWords.size()];
  if (topic >= kTopicWords.size()) word += std::to_string(topic / kTopicWords.size() + 1);
  return word;
}

}  // namespace

Corpus::Corpus(std::size_t dim, std::vector<Item> items) : dim_(dim), items_(std::move(items)) {
  index_.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const Item& item = items_[i];
    if (item.embedding.size() != dim_) {
      throw ValidationError(i + 1, "item '" + item.item_id + "' has embedding dimension " +
                                       std::to_string(item.embedding.size()) + ", expected " +
                                       std::to_string(dim_));
    }
    if (item.keywords.empty()) {
      throw ValidationError(i + 1, "item '" + item.item_id + "' has no keywords");
    }
    if (!(item.traffic_weight >= 0.0) || !std::isfinite(item.traffic_weight)) {
      throw ValidationError(i + 1, "item '" + item.item_id + "' has invalid traffic_weight");
    }
    if (!index_.emplace(item.item_id, i).second) {
      throw ValidationError(i + 1, "duplicate item_id '" + item.item_id + "'");
    }
    total_traffic_ += item.traffic_weight;
  }
}

std::optional<std::size_t> Corpus::find(std::string_view item_id) const {
  auto it = index_.find(std::string(item_id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Corpus::index_of(std::string_view item_id) const {
  auto idx = find(item_id);
  if (!idx) throw ValidationError("unknown item_id '" + std::string(item_id) + "'");
  return *idx;
}

Corpus read_corpus(std::istream& in, std::optional<std::size_t> dim) {
  std::vector<Item> items;
  std::unordered_map<std::string, std::size_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    const json j = parse_line(line, line_no);
    Item item;
    item.item_id = field<std::string>(j, "item_id", line_no);
    item.embedding = field<std::vector<float>>(j, "embedding", line_no);
    item.keywords = field<std::vector<std::string>>(j, "keywords", line_no);
    item.traffic_weight = field<double>(j, "traffic_weight", line_no);
    if (!dim) dim = item.embedding.size();
    if (item.embedding.size() != *dim) {
      throw ValidationError(line_no, "embedding dimension " + std::to_string(item.embedding.size()) +
                                         " does not match declared dimension " +
                                         std::to_string(*dim));
    }
    if (item.keywords.empty()) throw ValidationError(line_no, "keywords must be non-empty");
    if (!(item.traffic_weight >= 0.0)) {
      throw ValidationError(line_no, "traffic_weight must be nonnegative");
    }
    if (!seen.emplace(item.item_id, line_no).second) {
      throw ValidationError(line_no, "duplicate item_id '" + item.item_id + "'");
    }
    items.push_back(std::move(item));
  }
  return Corpus(dim.value_or(0), std::move(items));
}

Corpus load_corpus(const std::filesystem::path& path, std::optional<std::size_t> dim) {
  auto in = open_input(path);
  return read_corpus(in, dim);
}

void write_corpus(const Corpus& corpus, std::ostream& out) {
  for (const Item& item : corpus.items()) {
    json j;
    j["item_id"] = item.item_id;
    j["embedding"] = item.embedding;
    j["keywords"] = item.keywords;
    j["traffic_weight"] = item.traffic_weight;
    out << j.dump() << '\n';
  }
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_corpus(corpus, out);
}

std::vector<InteractionEvent> read_events(std::istream& in, const Corpus* corpus) {
  std::vector<InteractionEvent> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    const json j = parse_line(line, line_no);
    InteractionEvent e;
    e.user_id = field<std::string>(j, "user_id", line_no);
    e.item_id = field<std::string>(j, "item_id", line_no);
    e.timestamp = field<std::int64_t>(j, "timestamp", line_no);
    e.quality = field<double>(j, "quality", line_no);
    if (!(e.quality >= 0.0 && e.quality <= 1.0)) {
      throw ValidationError(line_no, "quality must lie in [0,1]");
    }
    if (corpus != nullptr && !corpus->find(e.item_id)) {
      throw ValidationError(line_no, "unknown item_id '" + e.item_id + "'");
    }
    events.push_back(std::move(e));
  }
  return events;
}

std::vector<InteractionEvent> load_events(const std::filesystem::path& path, const Corpus* corpus) {
  auto in = open_input(path);
  return read_events(in, corpus);
}

void write_events(const std::vector<InteractionEvent>& events, std::ostream& out) {
  for (const auto& e : events) {
    json j;
    j["user_id"] = e.user_id;
    j["item_id"] = e.item_id;
    j["timestamp"] = e.timestamp;
    j["quality"] = e.quality;
    out << j.dump() << '\n';
  }
}

void save_events(const std::vector<InteractionEvent>& events, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_events(events, out);
}

std::vector<UserHistory> group_by_user(std::vector<InteractionEvent> events) {
  std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) {
    if (a.user_id != b.user_id) return a.user_id < b.user_id;
    return a.timestamp < b.timestamp;
  });
  std::vector<UserHistory> out;
  for (auto& e : events) {
    if (out.empty() || out.back().user_id != e.user_id) out.push_back({e.user_id, {}});
    out.back().events.push_back(std::move(e));
  }
  return out;
}

UserHistory filter_high_quality(const UserHistory& history, double threshold) {
  UserHistory out{history.user_id, {}};
  std::copy_if(history.events.begin(), history.events.end(), std::back_inserter(out.events),
               [threshold](const InteractionEvent& e) { return e.quality >= threshold; });
  return out;
}

SyntheticCorpus synthesize_corpus(std::size_t num_items, std::size_t num_topics, std::size_t dim,
                                  std::uint64_t seed) {
  if (num_topics < 1 || num_items < num_topics) {
    throw ArgumentError("synth_corpus requires num_items >= num_topics >= 1");
  }
  if (dim < 1) throw ArgumentError("synth_corpus requires dim >= 1");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::lognormal_distribution<double> traffic(0.0, 0.8);
  constexpr double kItemSpread = 0.25;

  SyntheticCorpus out;
  out.topic_centers.resize(num_topics, std::vector<float>(dim));
  std::vector<std::array<std::size_t, kFacetsPerTopic>> facets(num_topics);
  for (std::size_t t = 0; t < num_topics; ++t) {
    for (auto& x : out.topic_centers[t]) x = static_cast<float>(unit(rng));
    std::vector<std::size_t> pool(kFacetWords.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    std::shuffle(pool.begin(), pool.end(), rng);
    std::copy_n(pool.begin(), kFacetsPerTopic, facets[t].begin());
  }

  std::uniform_int_distribution<std::size_t> pick_topic(0, num_topics - 1);
  std::uniform_int_distribution<std::size_t> pick_facet(0, kFacetsPerTopic - 1);
  std::vector<Item> items;
  items.reserve(num_items);
  out.topic_of.reserve(num_items);
  for (std::size_t i = 0; i < num_items; ++i) {
    // The first num_topics items seed one topic each so every topic is used.
    const std::size_t topic = i < num_topics ? i : pick_topic(rng);
    Item item;
    char id[32];
    std::snprintf(id, sizeof(id), "item-%06zu", i);
    item.item_id = id;
    item.embedding.resize(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      item.embedding[d] =
          static_cast<float>(out.topic_centers[topic][d] + kItemSpread * unit(rng));
    }
    item.keywords = {topic_keyword(topic), kFacetWords[facets[topic][pick_facet(rng)]]};
    item.traffic_weight = traffic(rng);
    items.push_back(std::move(item));
    out.topic_of.push_back(static_cast<int>(topic));
  }
  out.corpus = Corpus(dim, std::move(items));
  return out;
}

Corpus synth_corpus(std::size_t num_items, std::size_t num_topics, std::size_t dim,
                    std::uint64_t seed) {
  return synthesize_corpus(num_items, num_topics, dim, seed).corpus;
}

}  // namespace explore
