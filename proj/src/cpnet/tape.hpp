#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>

#include "cpnet/tensor.hpp"

namespace cpnet {

/// A trainable tensor owned outside the tape. Gradients from every backward
/// pass accumulate into `grad` until zero_grad().
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0f); }
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// Append-only record of one forward pass. Nodes are stored in creation
/// order, which is a topological order, so backward is a single reverse sweep.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Parameter& p);

  /// Records an op output. The node requires a gradient when any input does;
  /// `fn` runs during backward only in that case.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of a node, allocated as zeros on first touch.
  Tensor& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Adds g into the gradient of node `id` (no-op when it needs none). The
  /// first contribution is moved in rather than added to a zero buffer.
  void accumulate(std::size_t id, Tensor&& g);
  void accumulate(std::size_t id, const Tensor& g);

  /// Seeds d(loss)/d(loss) = 1 and sweeps every recorded node once in reverse
  /// order, then adds leaf gradients into their Parameters. Gradients of
  /// interior nodes are released once propagated; leaf gradients stay
  /// readable. The tape is consumed afterwards; call reset() before
  /// recording again.
  void backward(Var loss);

  void reset();
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Discrete choices taken during the forward pass (relu masks, max winners,
  /// neighbor sets) are folded into this hash so callers can tell whether two
  /// forward passes made the same selections.
  /// Tracking is off by default because hashing every mask is not free.
  void track_selections(bool on) { track_selections_ = on; }
  bool tracking_selections() const { return track_selections_; }
  void note_selection(std::span<const std::uint8_t> bytes);
  std::uint64_t selection_hash() const { return selection_hash_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };

  void check_open() const;

  std::deque<Node> nodes_;
  bool consumed_ = false;
  bool track_selections_ = false;
  std::uint64_t selection_hash_ = 1469598103934665603ull;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

}  // namespace cpnet
