#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace explore {

inline constexpr std::size_t kDefaultEmbeddingDim = 256;
inline constexpr double kDefaultQualityThreshold = 0.5;

struct Item {
  std::string item_id;
  std::vector<float> embedding;
  std::vector<std::string> keywords;  // lowercase, non-empty
  double traffic_weight = 0.0;
};

struct InteractionEvent {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;  // seconds since epoch
  double quality = 0.0;        // 0 = impression only
};

struct UserHistory {
  std::string user_id;
  std::vector<InteractionEvent> events;  // ascending timestamp
};

// Immutable item collection with a fixed embedding dimension. Items keep the
// order they were loaded in; that order defines the dense item index used by
// the clustering and scoring code.
class Corpus {
 public:
  Corpus() = default;
  // Throws ValidationError on duplicate ids, dimension mismatch, negative
  // traffic or empty keyword lists.
  Corpus(std::size_t dim, std::vector<Item> items);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const std::vector<Item>& items() const { return items_; }
  const Item& item(std::size_t index) const { return items_[index]; }

  std::optional<std::size_t> find(std::string_view item_id) const;
  // Throws ValidationError when the id is unknown.
  std::size_t index_of(std::string_view item_id) const;

  double total_traffic() const { return total_traffic_; }

 private:
  std::size_t dim_ = 0;
  std::vector<Item> items_;
  std::unordered_map<std::string, std::size_t> index_;
  double total_traffic_ = 0.0;
};

// Reads `items.jsonl`. The embedding dimension is `dim` when given, otherwise
// the dimension of the first record.
Corpus read_corpus(std::istream& in, std::optional<std::size_t> dim = std::nullopt);
Corpus load_corpus(const std::filesystem::path& path,
                   std::optional<std::size_t> dim = std::nullopt);
void write_corpus(const Corpus& corpus, std::ostream& out);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

// Reads `events.jsonl`. When `corpus` is non-null every item_id must resolve.
std::vector<InteractionEvent> read_events(std::istream& in, const Corpus* corpus = nullptr);
std::vector<InteractionEvent> load_events(const std::filesystem::path& path,
                                          const Corpus* corpus = nullptr);
void write_events(const std::vector<InteractionEvent>& events, std::ostream& out);
void save_events(const std::vector<InteractionEvent>& events,
                 const std::filesystem::path& path);

// Groups events per user (users sorted by id) with a stable timestamp sort.
std::vector<UserHistory> group_by_user(std::vector<InteractionEvent> events);

// Keeps events with quality >= threshold, preserving order.
UserHistory filter_high_quality(const UserHistory& history, double threshold);

struct SyntheticCorpus {
  Corpus corpus;
  std::vector<std::vector<float>> topic_centers;
  std::vector<int> topic_of;  // per item
};

// Items drawn around `num_topics` Gaussian centers. Topic keywords come from a
// fixed vocabulary; traffic weights are log-normal. Pure in its arguments.
SyntheticCorpus synthesize_corpus(std::size_t num_items, std::size_t num_topics,
                                  std::size_t dim, std::uint64_t seed);
Corpus synth_corpus(std::size_t num_items, std::size_t num_topics, std::size_t dim,
                    std::uint64_t seed);

}  // namespace explore
