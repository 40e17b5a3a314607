#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpnet/cp_module.hpp"
#include "cpnet/knn.hpp"
#include "cpnet/ops.hpp"
#include "cpnet/tape.hpp"

namespace cpnet {

enum class ModelKind { C2D, CPNet };

ModelKind parse_model_kind(const std::string& name);
const char* model_kind_name(ModelKind k);

inline constexpr std::size_t kToyWidth = 16;
inline constexpr std::size_t kDefaultNeighbors = 8;

struct ConvBlock {
  Parameter weight;
  Parameter bias;
  BatchNorm norm;
};

/// Internals of the CP stage for one forward pass, in point layout.
struct CpTrace {
  FrameDims dims;
  Tensor before;  // [N*THW, C] features entering the module
  Tensor after;   // [N*THW, C] relu(before + g)
  Tensor output;  // [N*THW, C] g
  Tensor zeta;    // [N*THW, k, C]
  TopKIndex topk; // global rows
  ActivationProvenance provenance;
};

/// The toy video classifier: per-frame 3x3 convs with an optional CP module
/// between them.
///
///   conv1(1->16) -> BN -> relu -> [CP, residual] -> relu
///   -> conv2(16->16) -> BN -> relu -> global average pool -> fc(16->4)
///
/// Input batches are [N, T, H, W] single-channel videos of any geometry.
class ToyModel {
 public:
  /// Both factories draw conv and fc weights identically for a given seed,
  /// so a fresh CPNet and a fresh C2D share their backbone.
  static ToyModel cpnet(std::size_t k, std::uint64_t seed);
  static ToyModel c2d(std::uint64_t seed);

  ModelKind kind() const { return cp_ ? ModelKind::CPNet : ModelKind::C2D; }
  std::size_t neighbors() const { return k_; }
  KnnBackend backend() const { return backend_; }
  void set_backend(KnnBackend b) { backend_ = b; }

  Var forward(Tape& tape, const Tensor& videos, Mode mode, bool update_running = true, CpTrace* trace = nullptr);
  /// Forward without gradients or running-stat updates.
  Tensor logits(const Tensor& videos, Mode mode = Mode::Eval);

  std::vector<Parameter*> parameters();
  std::vector<BatchNorm*> norms();
  std::size_t parameter_count();
  CPModuleParams* cp() { return cp_ ? &*cp_ : nullptr; }

  /// Receptive field of the conv stack in pixels (square).
  static constexpr std::size_t receptive_field() { return 5; }

  std::vector<NamedTensor> state();
  void load_state(const std::vector<NamedTensor>& entries);
  void save(const std::string& path);
  static ToyModel load(const std::string& path);

 private:
  ToyModel() = default;
  static ToyModel backbone(std::uint64_t seed);

  ConvBlock conv1_;
  ConvBlock conv2_;
  std::optional<CPModuleParams> cp_;
  Parameter fc_weight_;
  Parameter fc_bias_;
  std::size_t k_ = 0;
  KnnBackend backend_ = KnnBackend::Tree;
};

}  // namespace cpnet
