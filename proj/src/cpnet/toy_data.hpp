#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpnet/tensor.hpp"

namespace cpnet {

inline constexpr std::size_t kToyFrames = 4;
inline constexpr std::size_t kToyCanvas = 32;
inline constexpr std::size_t kToySquare = 2;
inline constexpr std::size_t kToyClasses = 4;
inline constexpr std::size_t kToyTrainCount = 1000;
inline constexpr std::size_t kToyValCount = 200;
inline constexpr int kToyMinStep = 7;
inline constexpr int kToyMaxStep = 9;

/// Wire values of the CPDS label byte.
enum class Direction : std::uint8_t { Left = 0, Right = 1, Up = 2, Down = 3 };

const char* direction_name(Direction d);

struct ToySample {
  static constexpr std::size_t kPixels = kToyFrames * kToyCanvas * kToyCanvas;

  std::array<std::uint8_t, kPixels> frames{};  // [t][y][x], 0 or 1
  Direction label = Direction::Left;

  std::uint8_t at(std::size_t t, std::size_t y, std::size_t x) const {
    return frames[(t * kToyCanvas + y) * kToyCanvas + x];
  }
  bool operator==(const ToySample&) const = default;
};

struct ToyDataset {
  std::vector<ToySample> train;
  std::vector<ToySample> val;
  std::uint64_t seed = 0;
};

enum class Split { Train, Val };

Split parse_split(const std::string& name);

/// Moving-square videos with exact label balance per split. Counts must be
/// multiples of the class count.
ToyDataset generate_toy_dataset(std::uint64_t seed, std::size_t train_count = kToyTrainCount,
                                 std::size_t val_count = kToyValCount);

// CPDS: "CPDS", u32 train count, u32 val count, then per sample one label
// byte followed by 4*32*32 pixel bytes.
void save_cpds(const std::string& path, const ToyDataset& ds);
ToyDataset load_cpds(const std::string& path);

/// [N, T, H, W] float batch, white = 1, black = 0.
Tensor make_batch(std::span<const ToySample> samples, std::span<const std::size_t> order);
Tensor make_batch(std::span<const ToySample> samples);

}  // namespace cpnet
