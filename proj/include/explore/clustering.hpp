#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "explore/corpus.hpp"

namespace explore {

inline constexpr int kTreeLevels = 4;
inline constexpr int kDefaultPlanningLevel = 2;
inline constexpr double kDefaultBalanceTolerance = 0.2;
inline constexpr int kDefaultMaxKeywords = 3;

struct ClusterId {
  int level = 0;  // 1..4
  int index = 0;  // 0..M_level-1
  auto operator<=>(const ClusterId&) const = default;
};

std::string to_string(ClusterId id);

struct Cluster {
  ClusterId id;
  std::vector<std::string> description;
  std::vector<std::size_t> members;  // tree item indices, ascending
  double traffic = 0.0;
  std::vector<float> centroid;
};

struct LevelBalance {
  int level = 0;
  double min_ratio = 0.0;  // smallest cluster traffic / level mean
  double max_ratio = 0.0;
  // Set when some single item outweighs the per-cluster cap, which makes the
  // tolerance unattainable at this level.
  bool infeasible = false;
};

// Four nested levels of clusters over a fixed item list. Immutable once
// constructed; the constructor checks partition, nesting and description
// uniqueness.
class ClusterTree {
 public:
  struct Parts {
    std::size_t dim = 0;
    std::vector<std::string> item_ids;
    std::array<std::vector<Cluster>, kTreeLevels> levels;
    // parents[l] holds, for each cluster at level l+2, its parent's index at
    // level l+1. parents[0] is unused.
    std::array<std::vector<int>, kTreeLevels> parents;
    std::vector<LevelBalance> balance;
  };

  ClusterTree() = default;
  explicit ClusterTree(Parts parts);

  std::size_t dim() const { return parts_.dim; }
  std::size_t num_items() const { return parts_.item_ids.size(); }
  const std::vector<std::string>& item_ids() const { return parts_.item_ids; }
  std::optional<std::size_t> item_index(std::string_view item_id) const;

  int num_clusters(int level) const;
  const std::vector<Cluster>& level(int level) const;
  const Cluster& cluster(ClusterId id) const;
  bool contains(ClusterId id) const;
  ClusterId parent(ClusterId child) const;
  const std::vector<int>& children(ClusterId id) const;

  // Cluster index per level (levels 1..4 at positions 0..3).
  const std::array<int, kTreeLevels>& assignment(std::size_t item_index) const {
    return assignment_[item_index];
  }
  ClusterId cluster_of(std::size_t item_index, int level) const {
    return {level, assignment_[item_index][static_cast<std::size_t>(level - 1)]};
  }

  // Keywords joined by single spaces.
  std::string description_text(ClusterId id) const;
  const std::vector<LevelBalance>& balance() const { return parts_.balance; }

  // Fingerprint over item ids, assignments and descriptions.
  std::uint64_t fingerprint() const { return fingerprint_; }

  const Parts& parts() const { return parts_; }

 private:
  Parts parts_;
  std::vector<std::array<int, kTreeLevels>> assignment_;
  std::array<std::vector<std::vector<int>>, kTreeLevels> children_;
  std::unordered_map<std::string, std::size_t> item_index_;
  std::uint64_t fingerprint_ = 0;
};

// Exact map from normalized description text to cluster at one level.
class DescriptionIndex {
 public:
  DescriptionIndex(const ClusterTree& tree, int level);
  int level() const { return level_; }
  // Normalizes `raw` and looks it up; never approximate.
  std::optional<ClusterId> find(std::string_view raw) const;

 private:
  int level_;
  std::unordered_map<std::string, int> index_;
};

struct ClusterBuildOptions {
  std::array<int, kTreeLevels> counts = {4, 16, 64, 256};
  double balance_tolerance = kDefaultBalanceTolerance;
  std::uint64_t seed = 0;
  int max_rounds = 50;
  int max_keywords = kDefaultMaxKeywords;
};

// Recursive traffic-balanced k-means. Throws ArgumentError on invalid counts
// and BuildError when a level misses the tolerance for reasons other than a
// single oversized item.
ClusterTree build_cluster_tree(const Corpus& corpus, const ClusterBuildOptions& options);

// Top keywords by traffic-weighted frequency among the members, ties broken
// lexicographically.
std::vector<std::string> describe_cluster(const Corpus& corpus,
                                          std::span<const std::size_t> members,
                                          int max_keywords);
std::vector<std::string> describe_cluster(const Corpus& corpus, const Cluster& cluster,
                                          int max_keywords);

// Stored assignment for known items, nearest-centroid descent otherwise.
std::array<ClusterId, kTreeLevels> assign_item(const ClusterTree& tree, const Item& item);

// Balanced partition of `members` into `groups` clusters of equal traffic.
// Exposed for testing; returns the group of each member.
std::vector<int> balanced_partition(const Corpus& corpus, std::span<const std::size_t> members,
                                    int groups, double tolerance, std::uint64_t seed,
                                    int max_rounds);

void write_cluster_tree(const ClusterTree& tree, std::ostream& out);
ClusterTree read_cluster_tree(std::istream& in);
void save_cluster_tree(const ClusterTree& tree, const std::filesystem::path& path);
ClusterTree load_cluster_tree(const std::filesystem::path& path);

}  // namespace explore
