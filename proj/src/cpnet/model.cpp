#include "cpnet/model.hpp"

#include <cmath>
#include <map>
#include <random>

#include "cpnet/errors.hpp"
#include "cpnet/toy_data.hpp"

namespace cpnet {

ModelKind parse_model_kind(const std::string& name) {
  if (name == "cpnet") return ModelKind::CPNet;
  if (name == "c2d") return ModelKind::C2D;
  fail_validation("unknown model '" + name + "' (expected cpnet or c2d)");
}

const char* model_kind_name(ModelKind k) { return k == ModelKind::CPNet ? "cpnet" : "c2d"; }

namespace {

Tensor msra(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

ConvBlock make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::mt19937_64& rng) {
  return ConvBlock{Parameter(name + ".weight", msra({cout, cin, 3, 3}, cin * 9, rng)),
                   Parameter(name + ".bias", Tensor({cout}, 0.0f)), BatchNorm(name + ".bn", cout)};
}

Var conv_bn_relu(Tape& tape, Var x, ConvBlock& b, Mode mode, bool update) {
  Var h = conv2d(x, tape.parameter(b.weight), tape.parameter(b.bias));
  h = batch_norm(h, b.norm, tape.parameter(b.norm.gamma), tape.parameter(b.norm.beta), mode, update);
  return relu(h);
}

constexpr std::uint64_t kCpSeedSalt = 0x9e3779b97f4a7c15ull;

}  // namespace

ToyModel ToyModel::backbone(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ToyModel m;
  m.conv1_ = make_conv("conv1", 1, kToyWidth, rng);
  m.conv2_ = make_conv("conv2", kToyWidth, kToyWidth, rng);
  m.fc_weight_ = Parameter("fc.weight", msra({kToyClasses, kToyWidth}, kToyWidth, rng));
  m.fc_bias_ = Parameter("fc.bias", Tensor({kToyClasses}, 0.0f));
  return m;
}

ToyModel ToyModel::c2d(std::uint64_t seed) { return backbone(seed); }

ToyModel ToyModel::cpnet(std::size_t k, std::uint64_t seed) {
  check_neighbor_count(FrameDims{kToyFrames, kToyCanvas, kToyCanvas}, k);
  ToyModel m = backbone(seed);
  m.cp_ = init_params(kToyWidth, seed ^ kCpSeedSalt);
  m.k_ = k;
  return m;
}

Var ToyModel::forward(Tape& tape, const Tensor& videos, Mode mode, bool update_running, CpTrace* trace) {
  require(videos.rank() == 4, "model input must be [N,T,H,W], got " + shape_str(videos.shape()));
  const std::size_t N = videos.dim(0), T = videos.dim(1), H = videos.dim(2), W = videos.dim(3);
  Var x = tape.constant(videos.reshaped({N * T, 1, H, W}));
  Var h = conv_bn_relu(tape, x, conv1_, mode, update_running);

  if (cp_) {
    const FrameDims dims{T, H, W};
    check_neighbor_count(dims, k_);
    const std::size_t P = dims.points();
    Var points = frames_to_points(h);
    const Tensor& pv = points.value();

    TopKIndex topk{N * P, k_, std::vector<std::int32_t>(N * P * k_)};
    for (std::size_t n = 0; n < N; ++n) {
      std::vector<float> rows(pv.ptr() + n * P * kToyWidth, pv.ptr() + (n + 1) * P * kToyWidth);
      const FeaturePointCloud cloud(Tensor({P, kToyWidth}, std::move(rows)), dims);
      const TopKIndex local = knn(cloud, k_, backend_);
      for (std::size_t e = 0; e < P * k_; ++e)
        topk.values[n * P * k_ + e] = local.values[e] + static_cast<std::int32_t>(n * P);
    }
    tape.note_selection({reinterpret_cast<const std::uint8_t*>(topk.values.data()),
                         topk.values.size() * sizeof(std::int32_t)});

    auto ce = correspondence_embed(points, topk, pair_displacements(dims, topk), *cp_, mode, update_running);
    Var g = points_to_frames(ce.value, N * T, H, W);
    h = relu(residual_insert(h, g));
    if (trace) {
      trace->dims = dims;
      trace->before = pv;
      trace->output = ce.value.value();
      trace->zeta = ce.zeta.value();
      trace->topk = std::move(topk);
      trace->provenance = std::move(ce.provenance);
      trace->after = frames_to_points(h).value();
    }
  } else {
    h = relu(h);
  }

  h = conv_bn_relu(tape, h, conv2_, mode, update_running);
  Var pooled = global_avg_pool(h, T);
  return linear(pooled, tape.parameter(fc_weight_), tape.parameter(fc_bias_));
}

Tensor ToyModel::logits(const Tensor& videos, Mode mode) {
  Tape tape;
  return forward(tape, videos, mode, false).value();
}

std::vector<Parameter*> ToyModel::parameters() {
  std::vector<Parameter*> out{&conv1_.weight, &conv1_.bias, &conv1_.norm.gamma, &conv1_.norm.beta};
  if (cp_)
    for (auto* p : cp_->parameters()) out.push_back(p);
  for (auto* p : {&conv2_.weight, &conv2_.bias, &conv2_.norm.gamma, &conv2_.norm.beta, &fc_weight_, &fc_bias_})
    out.push_back(p);
  return out;
}

std::vector<BatchNorm*> ToyModel::norms() {
  std::vector<BatchNorm*> out{&conv1_.norm};
  if (cp_)
    for (auto& n : cp_->norm) out.push_back(&n);
  out.push_back(&conv2_.norm);
  return out;
}

std::size_t ToyModel::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.numel();
  return n;
}

std::vector<NamedTensor> ToyModel::state() {
  std::vector<NamedTensor> out;
  out.emplace_back("model.config",
                   Tensor({2}, std::vector<float>{kind() == ModelKind::CPNet ? 1.0f : 0.0f, static_cast<float>(k_)}));
  for (auto* p : parameters()) out.emplace_back(p->name, p->value);
  for (auto* bn : norms()) {
    const std::string base = bn->gamma.name.substr(0, bn->gamma.name.size() - std::string(".gamma").size());
    out.emplace_back(base + ".running_mean", bn->running_mean);
    out.emplace_back(base + ".running_var", bn->running_var);
  }
  return out;
}

void ToyModel::load_state(const std::vector<NamedTensor>& entries) {
  std::map<std::string, const Tensor*> byname;
  for (const auto& [name, t] : entries) byname[name] = &t;
  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = byname.find(name);
    if (it == byname.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape() != dst.shape())
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                    shape_str(dst.shape()));
    dst = *it->second;
  };
  for (auto* p : parameters()) {
    take(p->name, p->value);
    p->grad = Tensor(p->value.shape());
  }
  for (auto* bn : norms()) {
    const std::string base = bn->gamma.name.substr(0, bn->gamma.name.size() - std::string(".gamma").size());
    take(base + ".running_mean", bn->running_mean);
    take(base + ".running_var", bn->running_var);
  }
}

void ToyModel::save(const std::string& path) { save_named_tensors(path, state()); }

ToyModel ToyModel::load(const std::string& path) {
  const auto entries = load_named_tensors(path);
  const Tensor* config = nullptr;
  for (const auto& [name, t] : entries)
    if (name == "model.config") config = &t;
  if (config == nullptr || config->numel() != 2) throw IoError(path + ": not a toy model checkpoint");
  const bool is_cp = (*config)[0] == 1.0f;
  ToyModel m = is_cp ? cpnet(static_cast<std::size_t>((*config)[1]), 0) : c2d(0);
  m.load_state(entries);
  return m;
}

}  // namespace cpnet
