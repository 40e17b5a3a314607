#include "cpnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cpnet/binary_io.hpp"
#include "cpnet/errors.hpp"

namespace cpnet {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
void check_extents(const Shape& shape) {
  require(!shape.empty(), "tensor rank must be at least 1");
  for (auto e : shape) require(e > 0, "tensor extents must be positive, got " + shape_str(shape));
}
}  // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, const std::vector<float>& data)
    : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, Buffer data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  require(shape_numel(shape_) == data_.size(),
          "tensor payload of " + std::to_string(data_.size()) + " values does not fit shape " + shape_str(shape_));
}

Tensor Tensor::uninitialized(Shape shape) {
  check_extents(shape);
  Buffer data(shape_numel(shape));
  return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
Tensor Tensor::reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(float)) == 0;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

void write_cpt1(std::ostream& out, const Tensor& t) {
  io::put_magic(out, "CPT1");
  io::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) io::put_u32(out, static_cast<std::uint32_t>(e));
  for (float v : t.data()) io::put_f32(out, v);
}

Tensor read_cpt1(std::istream& in) {
  io::expect_magic(in, "CPT1", "tensor record");
  const auto rank = io::get_u32(in);
  if (rank == 0 || rank > 16) throw IoError("CPT1 rank out of range: " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = io::get_u32(in);
    if (e == 0) throw IoError("CPT1 extent of zero");
  }
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = io::get_f32(in);
  return Tensor(std::move(shape), std::move(data));
}

void save_named_tensors(const std::string& path, const std::vector<NamedTensor>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  for (const auto& [name, t] : entries) {
    io::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_cpt1(out, t);
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<NamedTensor> load_named_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::vector<NamedTensor> entries;
  try {
    while (in.peek() != std::char_traits<char>::eof()) {
      const auto len = io::get_u32(in);
      if (len > 4096) throw IoError("tensor name too long");
      std::string name(len, '\0');
      if (!in.read(name.data(), len)) throw IoError("truncated tensor name");
      entries.emplace_back(std::move(name), read_cpt1(in));
    }
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
  return entries;
}

}  // namespace cpnet
