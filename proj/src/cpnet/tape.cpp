#include "cpnet/tape.hpp"

#include "cpnet/errors.hpp"

#ifdef CPNET_TAPE_PROFILE
#include <chrono>
#include <cstdio>
#endif

namespace cpnet {

void Tape::check_open() const {
  if (consumed_) fail_validation("tape already consumed by backward(); call reset() first");
}

Var Tape::constant(Tensor value) {
  check_open();
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& p) {
  check_open();
  nodes_.push_back(Node{p.value, {}, true, {}, &p});
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
  check_open();
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.tape != this) fail_validation("op inputs recorded on a different tape");
    needs = needs || nodes_.at(in.id).requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : Backward{}, nullptr});
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad(std::size_t id) {
  auto& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::accumulate(std::size_t id, Tensor&& g) {
  auto& n = nodes_.at(id);
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape())
    fail_validation("gradient shape " + shape_str(g.shape()) + " does not match value " + shape_str(n.value.shape()));
  if (n.grad.empty()) {
    n.grad = std::move(g);
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  auto& n = nodes_.at(id);
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    accumulate(id, Tensor(g));
    return;
  }
  if (g.shape() != n.value.shape())
    fail_validation("gradient shape " + shape_str(g.shape()) + " does not match value " + shape_str(n.value.shape()));
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
  check_open();
  if (loss.tape != this) fail_validation("backward: loss belongs to another tape");
  if (nodes_.empty()) fail_validation("backward: empty tape");
  if (value(loss.id).numel() != 1)
    fail_validation("backward: loss must be a scalar, got shape " + shape_str(value(loss.id).shape()));
  consumed_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id)[0] = 1.0f;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (n.grad.empty()) continue;
    if (n.backward) {
#ifdef CPNET_TAPE_PROFILE
      auto t0 = std::chrono::steady_clock::now();
      n.backward(*this, id);
      std::fprintf(stderr, "node %zu %.1f ms\n", id,
                   std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
#else
      n.backward(*this, id);
#endif
      n.grad = Tensor();
      continue;
    }
    if (n.param != nullptr) {
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
  selection_hash_ = 1469598103934665603ull;
}

void Tape::note_selection(std::span<const std::uint8_t> bytes) {
  if (!track_selections_) return;
  for (auto b : bytes) {
    selection_hash_ ^= b;
    selection_hash_ *= 1099511628211ull;
  }
}

}  // namespace cpnet
