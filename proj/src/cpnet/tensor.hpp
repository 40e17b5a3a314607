#pragma once

#include <cstddef>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cpnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Allocator whose value-less construct() leaves floats uninitialized, so
/// buffers that are about to be overwritten skip the zero fill.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;
  template <typename U>
  void construct(U* p) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

/// Dense row-major float32 array. Every extent is positive and
/// numel() == data().size() always holds.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, const std::vector<float>& data);

  /// Contents unspecified; for outputs that are fully written next.
  static Tensor uninitialized(Shape shape);

  static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* ptr() { return data_.data(); }
  const float* ptr() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// Same data, new shape; element count must match.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(float v);

  bool operator==(const Tensor& other) const = default;

 private:
  using Buffer = std::vector<float, DefaultInitAllocator<float>>;
  Tensor(Shape shape, Buffer data);

  Shape shape_;
  Buffer data_;
};

/// True when both tensors have the same shape and bitwise-identical payloads.
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// Largest absolute element-wise difference; shapes must match.
float max_abs_diff(const Tensor& a, const Tensor& b);

// CPT1 container: "CPT1", u32 rank, rank x u32 extents, f32 payload, all
// little-endian.
void write_cpt1(std::ostream& out, const Tensor& t);
Tensor read_cpt1(std::istream& in);

using NamedTensor = std::pair<std::string, Tensor>;

/// Checkpoint file: a sequence of entries, each a u32 name length, the UTF-8
/// name bytes and one CPT1 record. Read until end of file.
void save_named_tensors(const std::string& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_named_tensors(const std::string& path);

}  // namespace cpnet
