#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cpnet/tape.hpp"
#include "cpnet/tensor.hpp"

namespace cpnet {

enum class Mode { Train, Eval };

inline constexpr float kBatchNormEpsilon = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.9f;

/// Per-channel normalization parameters and running statistics.
struct BatchNorm {
  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;

  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t channels);
  std::size_t channels() const { return gamma.value.numel(); }
};

/// 3x3 cross-correlation, stride 1, zero padding 1.
/// input [N,Cin,H,W], kernel [Cout,Cin,3,3], bias [Cout] -> [N,Cout,H,W].
Var conv2d(Var input, Var kernel, Var bias);

/// Normalizes axis 1 of input [N,C,...]. In train mode batch statistics are
/// used and, when update_running is set, the running statistics move with
/// momentum kBatchNormMomentum. Eval mode uses the running statistics.
Var batch_norm(Var input, BatchNorm& bn, Var gamma, Var beta, Mode mode, bool update_running = true);
/// Same normalization for channels on the last axis: input [..., C], with
/// statistics over every leading position.
Var batch_norm_channels_last(Var input, BatchNorm& bn, Var gamma, Var beta, Mode mode, bool update_running = true);
/// Channels-last normalization of set-structured input [M, k, C] over all
/// M*k rows. The train-mode statistics are independent of the order of the k
/// rows within each set, bit for bit.
Var batch_norm_over_sets(Var input, BatchNorm& bn, Var gamma, Var beta, Mode mode, bool update_running = true);

Var relu(Var x);

/// input [N*frames, C, ...] -> [N, C], averaging over frames and all
/// trailing axes.
Var global_avg_pool(Var input, std::size_t frames = 1);

/// x [..., in], weight [out, in], optional bias [out] -> [..., out].
Var linear(Var x, Var weight);
Var linear(Var x, Var weight, Var bias);

struct CrossEntropy {
  Var loss;             // scalar, mean over the batch
  Tensor probabilities; // [N, K]
};
CrossEntropy softmax_cross_entropy(Var logits, std::span<const int> labels);

/// Row-major [rows, k] matrix of row indices.
struct IndexMatrix {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::int32_t> values;

  std::int32_t at(std::size_t i, std::size_t j) const { return values[i * k + j]; }
  std::span<const std::int32_t> row(std::size_t i) const { return {values.data() + i * k, k}; }
  bool operator==(const IndexMatrix&) const = default;
};

/// source [M,C] gathered by indices [R,k] -> [R,k,C]. Backward scatter-adds.
Var gather_rows(Var source, const IndexMatrix& indices);

/// Winning set slot per (row, channel) of a max over the set axis.
struct ArgmaxRecord {
  std::size_t rows = 0;
  std::size_t channels = 0;
  std::size_t k = 0;
  std::vector<std::int32_t> winner;

  std::int32_t at(std::size_t i, std::size_t c) const { return winner[i * channels + c]; }
};

struct SetMax {
  Var value;  // [M,C]
  ArgmaxRecord argmax;
};

/// input [M,k,C] -> max over k. Ties go to the smallest slot.
SetMax max_over_set(Var input);

Var add(Var a, Var b);
/// x [M,k,C] + a [M,C] broadcast over the set axis.
Var add_over_set(Var x, Var a);
Var mul(Var a, Var b);
Var sum(Var x);
Var reshape(Var x, Shape shape);
/// Columns [offset, offset+count) of a rank-2 tensor.
Var slice_cols(Var x, std::size_t offset, std::size_t count);

/// [N*T, C, H, W] -> [N*T*H*W, C] with rows ordered (n, t, h, w).
Var frames_to_points(Var x);
/// Inverse of frames_to_points.
Var points_to_frames(Var points, std::size_t images, std::size_t height, std::size_t width);

}  // namespace cpnet
