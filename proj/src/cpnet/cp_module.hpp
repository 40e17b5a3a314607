#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cpnet/knn.hpp"
#include "cpnet/ops.hpp"
#include "cpnet/tape.hpp"

namespace cpnet {

/// Shared pair MLP of one CP module: (2C+3) -> C/4 -> C/2 -> C. Each affine
/// layer is followed by batch normalization, the first two also by relu.
struct CPModuleParams {
  std::size_t channels = 0;
  std::array<Parameter, 3> weight;
  std::array<Parameter, 3> bias;
  std::array<BatchNorm, 3> norm;

  std::size_t input_width() const { return 2 * channels + 3; }
  std::array<std::size_t, 4> widths() const { return {input_width(), channels / 4, channels / 2, channels}; }
  Parameter& final_gamma() { return norm[2].gamma; }
  const Parameter& final_gamma() const { return norm[2].gamma; }
  std::vector<Parameter*> parameters();
};

/// MSRA-normal affine weights (variance 2 / fan_in), zero biases, unit
/// gammas and zero betas, except the final gamma which starts at zero so the
/// module initially outputs zeros. Requires C divisible by 4.
CPModuleParams init_params(std::size_t channels, std::uint64_t seed);

/// Which neighbor slot won each output channel of the max.
struct ActivationProvenance {
  ArgmaxRecord argmax;
  std::size_t k() const { return argmax.k; }
};

/// Neighbor-minus-anchor normalized displacements [rows, k, 3] for a batch of
/// clouds sharing `dims`; indices are global rows over the batch.
Tensor pair_displacements(const FrameDims& dims, const TopKIndex& topk);

struct CorrespondenceOutput {
  Var value;  // [M, C]
  Var zeta;   // [M, k, C], per-pair MLP outputs before the max
  ActivationProvenance provenance;
};

/// Correspondence Embedding layer over features [M, C] (M may span several
/// clouds stacked row-wise). topk rows index into the same M rows.
CorrespondenceOutput correspondence_embed(Var features, const TopKIndex& topk, const Tensor& displacements,
                                          CPModuleParams& params, Mode mode, bool update_running = true);

/// Single-cloud convenience form.
CorrespondenceOutput correspondence_embed(Tape& tape, const FeaturePointCloud& cloud, const TopKIndex& topk,
                                          CPModuleParams& params, Mode mode, bool update_running = true);

/// Element-wise block_output + cp_output; the caller applies relu afterwards.
Var residual_insert(Var block_output, Var cp_output);

/// Slots that win at least one channel for `point`, ascending.
std::vector<std::int32_t> activation_set(const ActivationProvenance& prov, std::size_t point);

/// Per-position sum over channels of |after - before|, as [T, H, W].
Tensor feature_change_heatmap(const Tensor& before, const Tensor& after, const FrameDims& dims);

}  // namespace cpnet
