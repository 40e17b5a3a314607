#pragma once

#include <array>
#include <cstddef>
#include <limits>
#include <string>

#include "cpnet/ops.hpp"
#include "cpnet/tensor.hpp"

namespace cpnet {

/// Extents of a T x H x W feature volume.
struct FrameDims {
  std::size_t t = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t plane() const { return h * w; }
  std::size_t points() const { return t * h * w; }
  bool operator==(const FrameDims&) const = default;
};

/// A [THW, C] feature matrix viewed as points. Row i sits at
/// (t, h, w) = (i / HW, (i % HW) / W, i % W).
class FeaturePointCloud {
 public:
  FeaturePointCloud(Tensor features, FrameDims dims);

  const Tensor& features() const { return features_; }
  const FrameDims& dims() const { return dims_; }
  std::size_t size() const { return features_.dim(0); }
  std::size_t channels() const { return features_.dim(1); }
  const float* row(std::size_t i) const { return features_.ptr() + i * channels(); }

  std::size_t frame_of(std::size_t i) const { return i / dims_.plane(); }
  std::array<std::size_t, 3> position(std::size_t i) const;
  /// (t/T, h/H, w/W), each in [0, 1).
  std::array<float, 3> coords(std::size_t i) const;

 private:
  Tensor features_;
  FrameDims dims_;
};

/// Row i, column j holds -||f_i - f_j||^2.
struct SimilarityMatrix {
  Tensor values;
  FrameDims dims;
  bool masked = false;
};

/// Same-frame entries after masking. Finite so later arithmetic stays NaN-free.
inline constexpr float kMaskedSimilarity = std::numeric_limits<float>::lowest();

/// [THW, k] proposed-correspondence rows, best first.
using TopKIndex = IndexMatrix;

enum class KnnBackend { Brute, Tree };

KnnBackend parse_backend(const std::string& name);
const char* backend_name(KnnBackend b);

/// Squared L2 distance with a fixed summation order. Both backends call this
/// so that their distances, and therefore their tie-breaks, agree bitwise.
float squared_distance(const float* a, const float* b, std::size_t channels);

/// Rejects k that exceeds the other-frame candidate count (T-1)*HW.
void check_neighbor_count(const FrameDims& dims, std::size_t k);

SimilarityMatrix pairwise_similarity(const FeaturePointCloud& cloud);
SimilarityMatrix mask_same_frame(SimilarityMatrix sim, const FrameDims& dims);
/// Per row, the k most similar other-frame columns; ties go to the smaller index.
TopKIndex arg_top_k(const SimilarityMatrix& sim, std::size_t k);

/// pairwise_similarity -> mask_same_frame -> arg_top_k.
TopKIndex knn_brute(const FeaturePointCloud& cloud, std::size_t k);
/// Exact k-d tree search with the same result contract as knn_brute.
TopKIndex knn_tree(const FeaturePointCloud& cloud, std::size_t k);

TopKIndex knn(const FeaturePointCloud& cloud, std::size_t k, KnnBackend backend);

}  // namespace cpnet
