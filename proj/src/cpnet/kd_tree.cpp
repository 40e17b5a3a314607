// Exact k-d tree backend for knn_tree().
//
// Points with bitwise-identical features are collapsed into one tree entry
// that keeps its member rows in ascending order. Flat image regions produce
// thousands of such duplicates, and the collapsed tree answers each
// (feature, frame) query once for all of them.

#include <algorithm>
#include <cstring>
#include <numeric>
#include <unordered_map>

#include "cpnet/errors.hpp"
#include "cpnet/knn.hpp"
#include "cpnet/parallel.hpp"

namespace cpnet {

namespace {

constexpr std::size_t kLeafSize = 8;

struct Candidate {
  float dist;
  std::int32_t index;
  bool operator<(const Candidate& o) const { return dist < o.dist || (dist == o.dist && index < o.index); }
};

// Sorted bounded list, best first.
class KBest {
 public:
  explicit KBest(std::size_t k) : k_(k) { items_.reserve(k + 1); }

  bool full() const { return items_.size() == k_; }
  float worst_dist() const { return items_.back().dist; }

  // Returns false when c would not enter the list.
  bool offer(Candidate c) {
    if (full() && !(c < items_.back())) return false;
    items_.insert(std::upper_bound(items_.begin(), items_.end(), c), c);
    if (items_.size() > k_) items_.pop_back();
    return true;
  }

  const std::vector<Candidate>& items() const { return items_; }

 private:
  std::size_t k_;
  std::vector<Candidate> items_;
};

class CollapsedKdTree {
 public:
  explicit CollapsedKdTree(const FeaturePointCloud& cloud) : cloud_(cloud), channels_(cloud.channels()) {
    collapse();
    order_.resize(reps_.size());
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(2 * reps_.size() / kLeafSize + 2);
    build(0, order_.size());
  }

  std::size_t unique_count() const { return reps_.size(); }
  std::size_t unique_of(std::size_t row) const { return unique_of_row_[row]; }

  std::vector<Candidate> query(std::size_t unique, std::size_t frame, std::size_t k) const {
    KBest best(k);
    search(0, cloud_.row(reps_[unique]), frame, best);
    return best.items();
  }

 private:
  struct Node {
    std::size_t lo, hi;  // range in order_
    std::size_t left = 0, right = 0;
    std::size_t dim = 0;
    float split = 0.0f;
    std::size_t min_frame, max_frame;
    bool leaf() const { return left == 0; }
  };

  struct RowHash {
    const FeaturePointCloud* cloud;
    std::size_t operator()(std::size_t r) const {
      const auto* bytes = reinterpret_cast<const unsigned char*>(cloud->row(r));
      std::size_t h = 1469598103934665603ull;
      for (std::size_t i = 0; i < cloud->channels() * sizeof(float); ++i) h = (h ^ bytes[i]) * 1099511628211ull;
      return h;
    }
  };
  struct RowEq {
    const FeaturePointCloud* cloud;
    bool operator()(std::size_t a, std::size_t b) const {
      return std::memcmp(cloud->row(a), cloud->row(b), cloud->channels() * sizeof(float)) == 0;
    }
  };

  void collapse() {
    std::unordered_map<std::size_t, std::size_t, RowHash, RowEq> seen(cloud_.size(), RowHash{&cloud_}, RowEq{&cloud_});
    unique_of_row_.resize(cloud_.size());
    for (std::size_t r = 0; r < cloud_.size(); ++r) {
      auto [it, inserted] = seen.try_emplace(r, reps_.size());
      if (inserted) {
        reps_.push_back(r);
        members_.emplace_back();
        frame_lo_.push_back(cloud_.frame_of(r));
        frame_hi_.push_back(cloud_.frame_of(r));
      }
      const std::size_t u = it->second;
      unique_of_row_[r] = u;
      members_[u].push_back(static_cast<std::int32_t>(r));  // ascending by construction
      frame_hi_[u] = cloud_.frame_of(r);
    }
  }

  float coord(std::size_t unique, std::size_t dim) const { return cloud_.row(reps_[unique])[dim]; }

  std::size_t build(std::size_t lo, std::size_t hi) {
    const std::size_t id = nodes_.size();
    nodes_.push_back(Node{lo, hi, 0, 0, 0, 0.0f, frame_lo_[order_[lo]], frame_hi_[order_[lo]]});
    for (std::size_t i = lo; i < hi; ++i) {
      nodes_[id].min_frame = std::min(nodes_[id].min_frame, frame_lo_[order_[i]]);
      nodes_[id].max_frame = std::max(nodes_[id].max_frame, frame_hi_[order_[i]]);
    }
    if (hi - lo <= kLeafSize) return id;

    std::size_t dim = 0;
    float spread = -1.0f;
    for (std::size_t d = 0; d < channels_; ++d) {
      float mn = coord(order_[lo], d), mx = mn;
      for (std::size_t i = lo + 1; i < hi; ++i) {
        const float v = coord(order_[i], d);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
      if (mx - mn > spread) {
        spread = mx - mn;
        dim = d;
      }
    }
    if (spread <= 0.0f) return id;  // unreachable for distinct points, kept as a leaf guard

    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(hi), [&](std::size_t a, std::size_t b) {
                       const float va = coord(a, dim), vb = coord(b, dim);
                       return va < vb || (va == vb && a < b);
                     });
    const float split = coord(order_[mid], dim);
    const std::size_t left = build(lo, mid);
    const std::size_t right = build(mid, hi);
    nodes_[id].left = left;
    nodes_[id].right = right;
    nodes_[id].dim = dim;
    nodes_[id].split = split;
    return id;
  }

  void visit_entry(std::size_t unique, const float* q, std::size_t frame, KBest& best) const {
    if (frame_lo_[unique] == frame && frame_hi_[unique] == frame) return;
    const float d = squared_distance(q, cloud_.row(reps_[unique]), channels_);
    if (best.full() && d > best.worst_dist()) return;
    for (std::int32_t r : members_[unique]) {
      if (cloud_.frame_of(static_cast<std::size_t>(r)) == frame) continue;
      if (!best.offer({d, r})) break;  // later members only have larger indices
    }
  }

  void search(std::size_t id, const float* q, std::size_t frame, KBest& best) const {
    const Node& n = nodes_[id];
    if (n.min_frame == frame && n.max_frame == frame) return;
    if (n.leaf()) {
      for (std::size_t i = n.lo; i < n.hi; ++i) visit_entry(order_[i], q, frame, best);
      return;
    }
    // Left entries have coordinate <= split, right entries >= split.
    const float diff = q[n.dim] - n.split;
    const std::size_t near = diff < 0.0f ? n.left : n.right;
    const std::size_t far = diff < 0.0f ? n.right : n.left;
    search(near, q, frame, best);
    if (!best.full() || diff * diff <= best.worst_dist()) search(far, q, frame, best);
  }

  const FeaturePointCloud& cloud_;
  std::size_t channels_;
  std::vector<std::size_t> reps_;
  std::vector<std::vector<std::int32_t>> members_;
  std::vector<std::size_t> frame_lo_, frame_hi_;
  std::vector<std::size_t> unique_of_row_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace

TopKIndex knn_tree(const FeaturePointCloud& cloud, std::size_t k) {
  require(cloud.size() >= 2, "knn_tree: need at least 2 points");
  check_neighbor_count(cloud.dims(), k);
  const CollapsedKdTree tree(cloud);
  const std::size_t n = cloud.size(), frames = cloud.dims().t;

  // Results depend only on (feature, frame): answer each pair once.
  const std::size_t U = tree.unique_count();
  std::vector<std::int64_t> slot(U * frames, -1);
  std::vector<std::size_t> jobs;
  for (std::size_t r = 0; r < n; ++r) {
    auto& s = slot[tree.unique_of(r) * frames + cloud.frame_of(r)];
    if (s < 0) {
      s = static_cast<std::int64_t>(jobs.size());
      jobs.push_back(r);
    }
  }
  std::vector<std::vector<Candidate>> answers(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    const std::size_t r = jobs[j];
    answers[j] = tree.query(tree.unique_of(r), cloud.frame_of(r), k);
  });

  TopKIndex out{n, k, std::vector<std::int32_t>(n * k)};
  for (std::size_t r = 0; r < n; ++r) {
    const auto& a = answers[static_cast<std::size_t>(slot[tree.unique_of(r) * frames + cloud.frame_of(r)])];
    for (std::size_t j = 0; j < k; ++j) out.values[r * k + j] = a[j].index;
  }
  return out;
}

}  // namespace cpnet
