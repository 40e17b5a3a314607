#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cpnet/knn.hpp"

namespace cpnet {

struct BenchOptions {
  std::vector<std::size_t> sizes{512, 1024, 2048};  // THW per cloud, ascending
  std::vector<KnnBackend> backends{KnnBackend::Brute, KnnBackend::Tree};
  std::size_t channels = 64;
  std::size_t k = 8;
  std::size_t frames = 4;  // T; each size must be a multiple of it
  std::size_t repetitions = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct BenchRow {
  KnnBackend backend = KnnBackend::Brute;
  std::size_t thw = 0;
  std::size_t channels = 0;
  std::size_t k = 0;
  double millis = 0;  // fastest of the repetitions
};

struct BenchResult {
  std::vector<BenchRow> rows;
  /// Per size, whether every backend returned the same TopKIndex as the first.
  std::vector<bool> agree;
  bool all_agree() const;
  /// millis(size i+1) / millis(size i) for one backend, in size order.
  std::vector<double> growth(KnnBackend backend) const;
};

/// Times each backend on one random cloud per size (uniform features plus a
/// small jitter, frames laid out as T x 1 x THW/T) and cross-checks outputs.
BenchResult run_knn_bench(const BenchOptions& options);

/// CSV with header backend,thw,c,k,millis.
void write_bench_csv(std::ostream& out, const BenchResult& result);

}  // namespace cpnet
