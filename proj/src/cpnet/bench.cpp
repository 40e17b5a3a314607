#include "cpnet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <ostream>
#include <random>

#include "cpnet/errors.hpp"

namespace cpnet {

void BenchOptions::validate() const {
  require(!sizes.empty(), "bench: size list is empty");
  require(!backends.empty(), "bench: backend list is empty");
  require(channels > 0, "bench: channels must be positive");
  require(frames >= 2, "bench: at least two frames are needed");
  require(repetitions > 0, "bench: repetitions must be positive");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    require(sizes[i] % frames == 0, "bench: size " + std::to_string(sizes[i]) + " is not a multiple of the frame count");
    require(i == 0 || sizes[i] > sizes[i - 1], "bench: sizes must be strictly ascending");
    check_neighbor_count(FrameDims{frames, 1, sizes[i] / frames}, k);
  }
}

bool BenchResult::all_agree() const {
  return !agree.empty() && std::all_of(agree.begin(), agree.end(), [](bool b) { return b; });
}

std::vector<double> BenchResult::growth(KnnBackend backend) const {
  std::vector<double> ms;
  for (const auto& r : rows)
    if (r.backend == backend) ms.push_back(r.millis);
  std::vector<double> out;
  for (std::size_t i = 1; i < ms.size(); ++i) out.push_back(ms[i] / ms[i - 1]);
  return out;
}

BenchResult run_knn_bench(const BenchOptions& options) {
  options.validate();
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::normal_distribution<float> jitter(0.0f, 1e-3f);
  BenchResult result;
  for (std::size_t thw : options.sizes) {
    std::vector<float> f(thw * options.channels);
    for (auto& v : f) v = unit(rng) + jitter(rng);
    const FeaturePointCloud cloud(Tensor({thw, options.channels}, std::move(f)),
                                  FrameDims{options.frames, 1, thw / options.frames});
    std::vector<TopKIndex> outputs;
    for (KnnBackend b : options.backends) {
      double best = std::numeric_limits<double>::infinity();
      TopKIndex topk;
      for (std::size_t r = 0; r < options.repetitions; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        topk = knn(cloud, options.k, b);
        best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
      }
      result.rows.push_back({b, thw, options.channels, options.k, best});
      outputs.push_back(std::move(topk));
    }
    result.agree.push_back(std::all_of(outputs.begin(), outputs.end(),
                                       [&](const TopKIndex& t) { return t.values == outputs.front().values; }));
  }
  return result;
}

void write_bench_csv(std::ostream& out, const BenchResult& result) {
  out << "backend,thw,c,k,millis\n";
  for (const auto& r : result.rows)
    out << backend_name(r.backend) << ',' << r.thw << ',' << r.channels << ',' << r.k << ',' << r.millis << '\n';
}

}  // namespace cpnet
