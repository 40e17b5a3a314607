#include "cpnet/knn.hpp"

#include <algorithm>
#include <numeric>

#include "cpnet/errors.hpp"
#include "cpnet/parallel.hpp"

namespace cpnet {

FeaturePointCloud::FeaturePointCloud(Tensor features, FrameDims dims)
    : features_(std::move(features)), dims_(dims) {
  require(dims_.t > 0 && dims_.h > 0 && dims_.w > 0, "point cloud: frame extents must be positive");
  require(features_.rank() == 2, "point cloud: features must be [THW, C], got " + shape_str(features_.shape()));
  require(features_.dim(0) == dims_.points(),
          "point cloud: " + std::to_string(features_.dim(0)) + " rows but T*H*W = " + std::to_string(dims_.points()));
}

std::array<std::size_t, 3> FeaturePointCloud::position(std::size_t i) const {
  const std::size_t hw = dims_.plane();
  return {i / hw, (i % hw) / dims_.w, i % dims_.w};
}

std::array<float, 3> FeaturePointCloud::coords(std::size_t i) const {
  const auto [t, h, w] = position(i);
  return {static_cast<float>(t) / static_cast<float>(dims_.t), static_cast<float>(h) / static_cast<float>(dims_.h),
          static_cast<float>(w) / static_cast<float>(dims_.w)};
}

KnnBackend parse_backend(const std::string& name) {
  if (name == "brute") return KnnBackend::Brute;
  if (name == "tree") return KnnBackend::Tree;
  fail_validation("unknown k-NN backend '" + name + "' (expected brute or tree)");
}

const char* backend_name(KnnBackend b) { return b == KnnBackend::Brute ? "brute" : "tree"; }

float squared_distance(const float* a, const float* b, std::size_t channels) {
  float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t c = 0;
  for (; c + 8 <= channels; c += 8)
    for (std::size_t l = 0; l < 8; ++l) {
      const float d = a[c + l] - b[c + l];
      lane[l] += d * d;
    }
  for (std::size_t l = 0; c < channels; ++c, ++l) {
    const float d = a[c] - b[c];
    lane[l] += d * d;
  }
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

void check_neighbor_count(const FrameDims& dims, std::size_t k) {
  const std::size_t available = (dims.t - 1) * dims.plane();
  if (k == 0) fail_validation("k must be at least 1");
  if (k > available)
    fail_validation("k = " + std::to_string(k) + " exceeds the " + std::to_string(available) +
                    " other-frame candidates available for T=" + std::to_string(dims.t) +
                    ", HW=" + std::to_string(dims.plane()) + " (need k <= (T-1)*HW)");
}

SimilarityMatrix pairwise_similarity(const FeaturePointCloud& cloud) {
  const std::size_t n = cloud.size(), c = cloud.channels();
  require(n >= 2, "pairwise_similarity: need at least 2 points");
  Tensor values({n, n});
  parallel_for(n, [&](std::size_t i) {
    float* row = values.ptr() + i * n;
    row[i] = 0.0f;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) row[j] = 0.0f - squared_distance(cloud.row(i), cloud.row(j), c);
  });
  return {std::move(values), cloud.dims(), false};
}

SimilarityMatrix mask_same_frame(SimilarityMatrix sim, const FrameDims& dims) {
  require(!sim.masked, "mask_same_frame: matrix is already masked");
  const std::size_t n = dims.points(), hw = dims.plane();
  require(sim.values.rank() == 2 && sim.values.dim(0) == n && sim.values.dim(1) == n,
          "mask_same_frame: matrix shape " + shape_str(sim.values.shape()) + " does not match T*H*W = " +
              std::to_string(n));
  for (std::size_t f = 0; f < dims.t; ++f)
    for (std::size_t i = f * hw; i < (f + 1) * hw; ++i)
      std::fill_n(sim.values.ptr() + i * n + f * hw, hw, kMaskedSimilarity);
  sim.dims = dims;
  sim.masked = true;
  return sim;
}

TopKIndex arg_top_k(const SimilarityMatrix& sim, std::size_t k) {
  require(sim.masked, "arg_top_k: similarity matrix must be masked first");
  const FrameDims& dims = sim.dims;
  check_neighbor_count(dims, k);
  const std::size_t n = dims.points(), hw = dims.plane();
  TopKIndex out{n, k, std::vector<std::int32_t>(n * k)};
  parallel_for(n, [&](std::size_t i) {
    const float* row = sim.values.ptr() + i * n;
    const std::size_t own = i / hw;
    std::vector<std::int32_t> cand;
    cand.reserve(n - hw);
    for (std::size_t j = 0; j < n; ++j)
      if (j / hw != own) cand.push_back(static_cast<std::int32_t>(j));
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                      [row](std::int32_t a, std::int32_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    std::copy_n(cand.begin(), k, out.values.begin() + static_cast<std::ptrdiff_t>(i * k));
  });
  return out;
}

TopKIndex knn_brute(const FeaturePointCloud& cloud, std::size_t k) {
  check_neighbor_count(cloud.dims(), k);
  return arg_top_k(mask_same_frame(pairwise_similarity(cloud), cloud.dims()), k);
}

TopKIndex knn(const FeaturePointCloud& cloud, std::size_t k, KnnBackend backend) {
  return backend == KnnBackend::Brute ? knn_brute(cloud, k) : knn_tree(cloud, k);
}

}  // namespace cpnet
