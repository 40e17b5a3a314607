#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cpnet/ops.hpp"
#include "cpnet/tape.hpp"
#include "cpnet/tensor.hpp"

namespace support {

using Rng = std::mt19937_64;

inline cpnet::Tensor random_tensor(cpnet::Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  cpnet::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

/// sum(out * r) for a fixed random r of the same shape.
inline cpnet::Var project(cpnet::Var out, const cpnet::Tensor& r) {
  return cpnet::sum(cpnet::mul(out, out.tape->constant(r)));
}

struct GradientMatch {
  double max_rel = 0;  // over stable coordinates
  std::size_t stable = 0;
  std::size_t skipped = 0;
};

using LossFn = std::function<cpnet::Var(cpnet::Tape&)>;

/// Largest tape gradient of `loss` over several parameters.
inline double gradient_scale(const std::vector<cpnet::Parameter*>& params, const LossFn& loss) {
  for (auto* p : params) p->zero_grad();
  cpnet::Tape tape;
  tape.backward(loss(tape));
  double scale = 0;
  for (auto* p : params)
    for (float g : p->grad.data()) scale = std::max(scale, static_cast<double>(std::fabs(g)));
  return scale;
}

/// Central differences of `loss` with respect to every coordinate of `p`,
/// against the tape gradient. Coordinates whose perturbation changes a relu,
/// max or top-k choice are skipped. The relative error denominator is floored
/// at 1e-2 times the larger of `case_scale` and the largest tape gradient of
/// `p`; pass a case-wide scale for tensors whose true gradient is zero.
inline GradientMatch match_gradient(cpnet::Parameter& p, const LossFn& loss, float eps = 1e-2f,
                                    double case_scale = 0.0) {
  auto run = [&](bool backward, std::uint64_t* hash) {
    cpnet::Tape tape;
    tape.track_selections(true);
    const cpnet::Var l = loss(tape);
    if (hash) *hash = tape.selection_hash();
    const double v = l.value()[0];
    if (backward) tape.backward(l);
    return v;
  };
  p.zero_grad();
  std::uint64_t base = 0;
  run(true, &base);
  const cpnet::Tensor analytic = p.grad;
  double scale = case_scale;
  for (float g : analytic.data()) scale = std::max(scale, static_cast<double>(std::fabs(g)));

  GradientMatch out;
  for (std::size_t i = 0; i < p.value.numel(); ++i) {
    const float orig = p.value[i];
    std::uint64_t hp = 0, hm = 0;
    p.value[i] = orig + eps;
    const double lp = run(false, &hp);
    p.value[i] = orig - eps;
    const double lm = run(false, &hm);
    p.value[i] = orig;
    if (hp != base || hm != base) {
      ++out.skipped;
      continue;
    }
    const double step = static_cast<double>(orig + eps) - static_cast<double>(orig - eps);
    const double numeric = (lp - lm) / step;
    const double a = analytic[i];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-2 * scale, 1e-12});
    out.max_rel = std::max(out.max_rel, std::fabs(a - numeric) / denom);
    ++out.stable;
  }
  return out;
}

}  // namespace support
