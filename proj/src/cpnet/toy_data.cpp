#include "cpnet/toy_data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "cpnet/binary_io.hpp"
#include "cpnet/errors.hpp"

namespace cpnet {

const char* direction_name(Direction d) {
  switch (d) {
    case Direction::Left: return "left";
    case Direction::Right: return "right";
    case Direction::Up: return "up";
    case Direction::Down: return "down";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  fail_validation("unknown split '" + name + "' (expected train or val)");
}

namespace {

ToySample draw_sample(Direction label, std::mt19937_64& rng) {
  constexpr int last = static_cast<int>(kToyCanvas - kToySquare);  // largest top-left coordinate
  std::uniform_int_distribution<int> step(kToyMinStep, kToyMaxStep);
  std::array<int, kToyFrames - 1> steps{};
  for (auto& s : steps) s = step(rng);
  const int total = std::accumulate(steps.begin(), steps.end(), 0);

  // Start along the motion axis so that the whole path stays on the canvas;
  // the cross axis is free.
  const bool forward = label == Direction::Right || label == Direction::Down;
  const int start_lo = forward ? 0 : total;
  const int start_hi = forward ? last - total : last;
  const int along0 = std::uniform_int_distribution<int>(start_lo, start_hi)(rng);
  const int across = std::uniform_int_distribution<int>(0, last)(rng);

  ToySample s;
  s.label = label;
  int along = along0;
  for (std::size_t t = 0; t < kToyFrames; ++t) {
    if (t > 0) along += forward ? steps[t - 1] : -steps[t - 1];
    const bool horizontal = label == Direction::Left || label == Direction::Right;
    const int x0 = horizontal ? along : across;
    const int y0 = horizontal ? across : along;
    for (std::size_t dy = 0; dy < kToySquare; ++dy)
      for (std::size_t dx = 0; dx < kToySquare; ++dx)
        s.frames[(t * kToyCanvas + static_cast<std::size_t>(y0) + dy) * kToyCanvas + static_cast<std::size_t>(x0) + dx] = 1;
  }
  return s;
}

std::vector<ToySample> draw_split(std::size_t count, std::mt19937_64& rng) {
  require(count % kToyClasses == 0, "split size " + std::to_string(count) + " is not a multiple of " +
                                        std::to_string(kToyClasses) + " classes");
  std::vector<Direction> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<Direction>(i % kToyClasses);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<ToySample> out;
  out.reserve(count);
  for (auto l : labels) out.push_back(draw_sample(l, rng));
  return out;
}

}  // namespace

ToyDataset generate_toy_dataset(std::uint64_t seed, std::size_t train_count, std::size_t val_count) {
  std::mt19937_64 rng(seed);
  ToyDataset ds;
  ds.seed = seed;
  ds.train = draw_split(train_count, rng);
  ds.val = draw_split(val_count, rng);
  return ds;
}

void save_cpds(const std::string& path, const ToyDataset& ds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open dataset for writing: " + path);
  io::put_magic(out, "CPDS");
  io::put_u32(out, static_cast<std::uint32_t>(ds.train.size()));
  io::put_u32(out, static_cast<std::uint32_t>(ds.val.size()));
  for (const auto* split : {&ds.train, &ds.val})
    for (const auto& s : *split) {
      out.put(static_cast<char>(s.label));
      out.write(reinterpret_cast<const char*>(s.frames.data()), static_cast<std::streamsize>(s.frames.size()));
    }
  if (!out) throw IoError("write failed: " + path);
}

ToyDataset load_cpds(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path);
  ToyDataset ds;
  try {
    io::expect_magic(in, "CPDS", "dataset");
    const auto n_train = io::get_u32(in), n_val = io::get_u32(in);
    auto read_split = [&](std::uint32_t count, std::vector<ToySample>& dst) {
      dst.resize(count);
      for (auto& s : dst) {
        char label = 0;
        if (!in.get(label)) throw IoError("truncated sample");
        if (static_cast<unsigned char>(label) >= kToyClasses)
          throw IoError("label byte out of range: " + std::to_string(static_cast<unsigned char>(label)));
        s.label = static_cast<Direction>(label);
        if (!in.read(reinterpret_cast<char*>(s.frames.data()), static_cast<std::streamsize>(s.frames.size())))
          throw IoError("truncated sample");
        for (auto px : s.frames)
          if (px > 1) throw IoError("pixel byte is not 0 or 1");
      }
    };
    read_split(n_train, ds.train);
    read_split(n_val, ds.val);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
  return ds;
}

Tensor make_batch(std::span<const ToySample> samples, std::span<const std::size_t> order) {
  require(!order.empty(), "make_batch: empty batch");
  Tensor out({order.size(), kToyFrames, kToyCanvas, kToyCanvas});
  for (std::size_t n = 0; n < order.size(); ++n) {
    const auto& s = samples[order[n]];
    std::transform(s.frames.begin(), s.frames.end(), out.ptr() + n * ToySample::kPixels,
                   [](std::uint8_t px) { return static_cast<float>(px); });
  }
  return out;
}

Tensor make_batch(std::span<const ToySample> samples) {
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  return make_batch(samples, order);
}

}  // namespace cpnet
