#include "cpnet/cp_module.hpp"

#include <cmath>
#include <random>

#include "cpnet/errors.hpp"

namespace cpnet {

std::vector<Parameter*> CPModuleParams::parameters() {
  std::vector<Parameter*> out;
  for (std::size_t l = 0; l < 3; ++l) {
    out.push_back(&weight[l]);
    out.push_back(&bias[l]);
    out.push_back(&norm[l].gamma);
    out.push_back(&norm[l].beta);
  }
  return out;
}

CPModuleParams init_params(std::size_t channels, std::uint64_t seed) {
  require(channels >= 4 && channels % 4 == 0,
          "CP module channels must be a positive multiple of 4, got " + std::to_string(channels));
  CPModuleParams p;
  p.channels = channels;
  std::mt19937_64 rng(seed);
  const auto w = p.widths();
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t fan_in = w[l], fan_out = w[l + 1];
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    Tensor wt({fan_out, fan_in});
    for (auto& v : wt.data()) v = dist(rng);
    const std::string name = "cp.mlp" + std::to_string(l);
    p.weight[l] = Parameter(name + ".weight", std::move(wt));
    p.bias[l] = Parameter(name + ".bias", Tensor({fan_out}, 0.0f));
    p.norm[l] = BatchNorm(name + ".bn", fan_out);
  }
  p.final_gamma().value.fill(0.0f);
  return p;
}

Tensor pair_displacements(const FrameDims& dims, const TopKIndex& topk) {
  const std::size_t n = dims.points(), hw = dims.plane();
  require(n > 0 && topk.rows % n == 0, "pair_displacements: row count is not a whole number of clouds");
  const float ft = static_cast<float>(dims.t), fh = static_cast<float>(dims.h), fw = static_cast<float>(dims.w);
  auto coords = [&](std::size_t local) {
    return std::array<float, 3>{static_cast<float>(local / hw) / ft, static_cast<float>((local % hw) / dims.w) / fh,
                                static_cast<float>(local % dims.w) / fw};
  };
  Tensor out({topk.rows, topk.k, 3});
  for (std::size_t i = 0; i < topk.rows; ++i) {
    const std::size_t base = (i / n) * n;
    const auto anchor = coords(i - base);
    for (std::size_t j = 0; j < topk.k; ++j) {
      const auto idx = static_cast<std::size_t>(topk.at(i, j));
      if (idx < base || idx >= base + n) fail_validation("pair_displacements: neighbor index leaves its cloud");
      const auto nb = coords(idx - base);
      for (std::size_t a = 0; a < 3; ++a) out[(i * topk.k + j) * 3 + a] = nb[a] - anchor[a];
    }
  }
  return out;
}

CorrespondenceOutput correspondence_embed(Var features, const TopKIndex& topk, const Tensor& displacements,
                                          CPModuleParams& params, Mode mode, bool update_running) {
  Tape& tape = *features.tape;
  const Tensor& f = features.value();
  const std::size_t C = params.channels;
  require(f.rank() == 2 && f.dim(1) == C,
          "correspondence_embed: features " + shape_str(f.shape()) + " do not match module width C=" + std::to_string(C));
  require(params.weight[0].value.dim(1) == params.input_width(),
          "correspondence_embed: first layer fan-in must be 2C+3 = " + std::to_string(params.input_width()));
  require(topk.rows == f.dim(0), "correspondence_embed: top-k rows do not match feature rows");
  require(displacements.shape() == Shape{topk.rows, topk.k, 3}, "correspondence_embed: displacement shape mismatch");

  // The first affine layer acts on [f_anchor; f_neighbor; displacement]. It is
  // split by column block so the anchor and neighbor projections are computed
  // once per point and then gathered, rather than once per pair.
  Var w0 = tape.parameter(params.weight[0]);
  Var anchor_w = slice_cols(w0, 0, C);
  Var neighbor_w = slice_cols(w0, C, C);
  Var disp_w = slice_cols(w0, 2 * C, 3);
  Var anchor = linear(features, anchor_w, tape.parameter(params.bias[0]));  // [M, H1]
  Var neighbor = gather_rows(linear(features, neighbor_w), topk);           // [M, K, H1]
  Var disp = linear(tape.constant(displacements), disp_w);                  // [M, K, H1]
  Var h = add_over_set(add(neighbor, disp), anchor);

  for (std::size_t l = 0; l < 3; ++l) {
    if (l > 0) h = linear(h, tape.parameter(params.weight[l]), tape.parameter(params.bias[l]));
    h = batch_norm_over_sets(h, params.norm[l], tape.parameter(params.norm[l].gamma),
                             tape.parameter(params.norm[l].beta), mode, update_running);
    if (l < 2) h = relu(h);
  }
  SetMax mx = max_over_set(h);
  return {mx.value, h, ActivationProvenance{std::move(mx.argmax)}};
}

CorrespondenceOutput correspondence_embed(Tape& tape, const FeaturePointCloud& cloud, const TopKIndex& topk,
                                          CPModuleParams& params, Mode mode, bool update_running) {
  require(topk.rows == cloud.size(), "correspondence_embed: top-k does not match cloud size");
  return correspondence_embed(tape.constant(cloud.features()), topk, pair_displacements(cloud.dims(), topk), params,
                              mode, update_running);
}

Var residual_insert(Var block_output, Var cp_output) {
  require(block_output.shape() == cp_output.shape(), "residual_insert: shape mismatch " +
                                                         shape_str(block_output.shape()) + " vs " +
                                                         shape_str(cp_output.shape()));
  return add(block_output, cp_output);
}

std::vector<std::int32_t> activation_set(const ActivationProvenance& prov, std::size_t point) {
  const auto& a = prov.argmax;
  require(point < a.rows, "activation_set: point " + std::to_string(point) + " out of range");
  std::vector<bool> hit(a.k, false);
  for (std::size_t c = 0; c < a.channels; ++c) hit[static_cast<std::size_t>(a.at(point, c))] = true;
  std::vector<std::int32_t> out;
  for (std::size_t j = 0; j < a.k; ++j)
    if (hit[j]) out.push_back(static_cast<std::int32_t>(j));
  return out;
}

Tensor feature_change_heatmap(const Tensor& before, const Tensor& after, const FrameDims& dims) {
  require(before.shape() == after.shape(), "feature_change_heatmap: shape mismatch");
  require(before.rank() == 2 && before.dim(0) == dims.points(), "feature_change_heatmap: expected [THW, C]");
  const std::size_t C = before.dim(1);
  Tensor out({dims.t, dims.h, dims.w});
  for (std::size_t i = 0; i < dims.points(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::fabs(after[i * C + c] - before[i * C + c]);
    out[i] = static_cast<float>(s);
  }
  return out;
}

}  // namespace cpnet
