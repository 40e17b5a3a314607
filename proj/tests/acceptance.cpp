// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only when
// every criterion passes. Training progress goes to stderr.

#include <malloc.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cpnet/bench.hpp"
#include "cpnet/cp_module.hpp"
#include "cpnet/gradcheck.hpp"
#include "cpnet/knn.hpp"
#include "cpnet/model.hpp"
#include "cpnet/toy_data.hpp"
#include "cpnet/train.hpp"
#include "cpnet/visualize.hpp"
#include "oracles.hpp"
#include "viz_check.hpp"

using namespace cpnet;
using support::Rng;

namespace {

// Pinned thresholds.
constexpr double kCpTrainAccuracy = 0.95;
constexpr double kCpValAccuracy = 0.90;
constexpr double kC2dValLow = 0.20;
constexpr double kC2dValHigh = 0.35;
constexpr double kMinGap = 0.50;
constexpr std::size_t kIdentityInputs = 100;
constexpr std::size_t kGradcheckSeeds = 20;
constexpr double kGradcheckTolerance = 1e-2;
constexpr std::size_t kBackendClouds = 100;
constexpr std::size_t kInvariantClouds = 1000;
constexpr std::size_t kCeInstances = 50;
constexpr double kCeTolerance = 1e-4;
constexpr std::size_t kDatasetSeeds = 5;
constexpr double kMinBruteGrowth = 3.0;

// Lines are echoed to stderr as criteria finish and printed in order at the end.
std::array<std::string, 11> lines;
int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s  %2d %-26s ", pass ? "PASS" : "FAIL", id, name);
  lines[id] = buf + detail;
  std::fprintf(stderr, "%s\n", lines[id].c_str());
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

TrainResult train_logged(ToyModel& model, const ToyDataset& ds, const char* tag) {
  return train(model, ds, TrainConfig{}, [tag](const EpochMetrics& m) {
    std::fprintf(stderr, "[%s] epoch %2zu  train %.3f  val %.3f\n", tag, m.epoch, m.train_accuracy, m.val_accuracy);
  });
}

struct Trained {
  ToyModel cpnet = ToyModel::cpnet(kDefaultNeighbors, 0);
  TrainResult cp_result;
  double cp_seconds = 0;
};

void criteria_training(Trained& t, const ToyDataset& ds) {
  const auto start = std::chrono::steady_clock::now();
  t.cp_result = train_logged(t.cpnet, ds, "cpnet");
  t.cp_seconds = seconds_since(start);
  const EpochMetrics* reached = nullptr;
  for (const auto& m : t.cp_result.history)
    if (m.train_accuracy >= kCpTrainAccuracy && m.val_accuracy >= kCpValAccuracy) {
      reached = &m;
      break;
    }
  const EpochMetrics& best = t.cp_result.best();
  report(1, "cpnet toy accuracy", reached != nullptr,
         fmt("first epoch with train>=%.2f and val>=%.2f: %s; best val epoch %zu train %.3f val %.3f; "
             "%zu epochs in %.1f min",
             kCpTrainAccuracy, kCpValAccuracy, reached ? std::to_string(reached->epoch).c_str() : "none", best.epoch,
             best.train_accuracy, best.val_accuracy, t.cp_result.history.size(), t.cp_seconds / 60));

  ToyModel c2d = ToyModel::c2d(0);
  const TrainResult r = train_logged(c2d, ds, "c2d");
  const double val = r.best().val_accuracy;
  double lo = 1, hi = 0;
  for (const auto& m : r.history) lo = std::min(lo, m.val_accuracy), hi = std::max(hi, m.val_accuracy);
  const double gap = best.val_accuracy - val;
  report(2, "c2d failure contrast", val >= kC2dValLow && val <= kC2dValHigh && gap > kMinGap,
         fmt("c2d val %.3f (per-epoch range %.3f..%.3f, want [%.2f, %.2f]); gap %.3f (want > %.2f)", val, lo, hi,
             kC2dValLow, kC2dValHigh, gap, kMinGap));
}

void criterion_identity() {
  Rng rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::size_t equal = 0;
  for (std::size_t n = 0; n < kIdentityInputs; ++n) {
    ToyModel cp = ToyModel::cpnet(kDefaultNeighbors, n), c2 = ToyModel::c2d(n);
    Tensor x({1, kToyFrames, kToyCanvas, kToyCanvas});
    for (auto& v : x.data()) v = u(rng);
    equal += bitwise_equal(cp.logits(x, Mode::Eval), c2.logits(x, Mode::Eval)) &&
             bitwise_equal(cp.logits(x, Mode::Train), c2.logits(x, Mode::Train));
  }
  report(3, "identity at init", equal == kIdentityInputs,
         fmt("%zu/%zu random 4x32x32 inputs bitwise equal in eval and train mode", equal, kIdentityInputs));
}

void criterion_gradcheck() {
  std::size_t passed = 0, groups = 0;
  double worst = 0;
  std::string first_failure;
  for (std::uint64_t seed = 0; seed < kGradcheckSeeds; ++seed) {
    GradcheckOptions o;
    o.seed = seed;
    o.tolerance = kGradcheckTolerance;
    const GradcheckReport r = run_gradcheck(o);
    passed += r.passed();
    groups += r.groups.size();
    for (const auto& g : r.groups) {
      worst = std::max(worst, g.max_rel_error);
      if (!r.group_passed(g) && first_failure.empty()) first_failure = "seed " + std::to_string(seed) + " " + g.name;
    }
  }
  report(4, "gradient suite", passed == kGradcheckSeeds,
         fmt("%zu/%zu seeds passed, %zu groups, worst rel error %.2e (want < %.0e)%s%s", passed, kGradcheckSeeds,
             groups, worst, kGradcheckTolerance, first_failure.empty() ? "" : "; first failure ",
             first_failure.c_str()));
}

void criterion_backends() {
  Rng rng(5);
  std::size_t same = 0;
  for (std::size_t n = 0; n < kBackendClouds; ++n) {
    const auto s = oracle::random_spec(rng);
    const auto c = oracle::random_cloud(rng, s.dims, s.channels);
    same += oracle::same_row_sets(knn_brute(c, s.k), knn_tree(c, s.k));
  }
  report(5, "knn backend equivalence", same == kBackendClouds,
         fmt("%zu/%zu clouds (THW <= 64, C <= 16) with identical row sets", same, kBackendClouds));
}

void criterion_invariants() {
  Rng rng(6);
  std::uniform_real_distribution<double> log_scale(-3, 3);
  std::size_t frame_ok = 0, scale_ok = 0, norm_ok = 0;
  for (std::size_t n = 0; n < kInvariantClouds; ++n) {
    const auto s = oracle::random_spec(rng);
    const auto c = oracle::random_cloud(rng, s.dims, s.channels);
    const auto base = knn_brute(c, s.k);
    frame_ok += oracle::all_other_frame(base, s.dims);

    Tensor scaled = c.features();
    const float factor = static_cast<float>(std::pow(10.0, log_scale(rng)));
    for (auto& v : scaled.data()) v *= factor;
    const FeaturePointCloud sc(std::move(scaled), s.dims);
    scale_ok += knn_brute(sc, s.k) == base && knn_tree(sc, s.k) == base;

    const auto l2 = oracle::transformed_scores(pairwise_similarity(c), [](double v) { return -std::sqrt(-v); });
    norm_ok += oracle::sort_top_k(l2, s.dims, s.k) == base;
  }
  const std::size_t N = kInvariantClouds;
  report(6, "grouping invariants", frame_ok == N && scale_ok == N && norm_ok == N,
         fmt("other-frame %zu/%zu, positive rescale %zu/%zu, -|.| vs -|.|^2 %zu/%zu", frame_ok, N, scale_ok, N,
             norm_ok, N));
}

CPModuleParams random_params(std::size_t channels, Rng& rng) {
  CPModuleParams p = init_params(channels, rng());
  for (std::size_t l = 0; l < 3; ++l) {
    p.bias[l].value = support::random_tensor(p.bias[l].value.shape(), rng, -0.2f, 0.2f);
    p.norm[l].gamma.value = support::random_tensor(p.norm[l].gamma.value.shape(), rng, 0.5f, 1.5f);
    p.norm[l].beta.value = support::random_tensor(p.norm[l].beta.value.shape(), rng, -0.5f, 0.5f);
    p.norm[l].running_mean = support::random_tensor(p.norm[l].running_mean.shape(), rng, -0.5f, 0.5f);
    p.norm[l].running_var = support::random_tensor(p.norm[l].running_var.shape(), rng, 0.5f, 2.0f);
  }
  return p;
}

double max_diff(const Tensor& got, const std::vector<double>& want) {
  double m = 0;
  for (std::size_t i = 0; i < want.size(); ++i) m = std::max(m, std::fabs(got[i] - want[i]));
  return m;
}

void criterion_ce() {
  Rng rng(7);
  double worst = 0;
  std::size_t invariant = 0, compared = 0;
  for (std::size_t n = 0; n < kCeInstances; ++n) {
    auto s = oracle::random_spec(rng);
    s.channels = 4 * (1 + n % 4);
    const auto c = oracle::random_cloud(rng, s.dims, s.channels);
    const auto topk = knn_brute(c, s.k);
    CPModuleParams p = random_params(s.channels, rng);

    std::vector<std::size_t> perm(s.k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    TopKIndex shuffled = topk;
    for (std::size_t i = 0; i < topk.rows; ++i)
      for (std::size_t j = 0; j < s.k; ++j) shuffled.values[i * s.k + j] = topk.at(i, perm[j]);

    for (Mode mode : {Mode::Eval, Mode::Train}) {
      Tape t0, t1;
      const auto out = correspondence_embed(t0, c, topk, p, mode, false);
      const auto moved = correspondence_embed(t1, c, shuffled, p, mode, false);
      const auto want = oracle::correspondence_oracle(c, topk, p, mode);
      worst = std::max({worst, max_diff(out.value.value(), want.g), max_diff(out.zeta.value(), want.zeta)});
      invariant += bitwise_equal(out.value.value(), moved.value.value());
      ++compared;
    }
  }
  report(7, "ce oracle equivalence", worst <= kCeTolerance && invariant == compared,
         fmt("%zu instances x {eval, train}: max |batched - loop| %.2e (want <= %.0e); permuted columns bitwise "
             "equal %zu/%zu",
             kCeInstances, worst, kCeTolerance, invariant, compared));
}

void criterion_dataset() {
  std::size_t ok = 0;
  std::string problem;
  for (std::uint64_t seed = 0; seed < kDatasetSeeds; ++seed) {
    const ToyDataset ds = generate_toy_dataset(seed);
    bool good = ds.train.size() == kToyTrainCount && ds.val.size() == kToyValCount;
    for (const auto* split : {&ds.train, &ds.val}) {
      std::array<std::size_t, kToyClasses> counts{};
      for (const auto& s : *split) {
        ++counts[static_cast<std::size_t>(s.label)];
        const std::string bad = oracle::sample_violation(s);
        if (!bad.empty()) {
          good = false;
          if (problem.empty()) problem = "seed " + std::to_string(seed) + ": " + bad;
        }
      }
      for (auto n : counts) good &= n == split->size() / kToyClasses;
    }
    ok += good;
  }
  report(8, "dataset properties", ok == kDatasetSeeds,
         fmt("%zu/%zu seeds: 1000/200 split, exact balance, 2x2 square in canvas, steps in {7,8,9}%s%s", ok,
             kDatasetSeeds, problem.empty() ? "" : "; ", problem.c_str()));
}

void criterion_visualization(ToyModel& trained, const ToyDataset& ds) {
  std::stringstream dump;
  const VisualizeSummary s = write_visualization(dump, trained, ds.val.front());
  const FrameDims dims{kToyFrames, kToyCanvas, kToyCanvas};
  const auto audit = oracle::audit_visualization(dump, trained.neighbors(), dims);
  report(9, "visualization integrity", audit.ok(dims.points(), kToyFrames),
         fmt("trained cpnet, val sample 0: %zu anchors, %zu heatmaps written; %zu anchors audited, "
             "%zu active-set mismatches%s%s",
             s.anchors, s.heatmaps, audit.anchors, audit.set_mismatches, audit.problems.empty() ? "" : "; ",
             audit.problems.empty() ? "" : audit.problems.front().c_str()));
}

void criterion_bench() {
  const BenchOptions o;  // THW 512, 1024, 2048 at C=64, k=8
  const BenchResult r = run_knn_bench(o);
  const auto growth = r.growth(KnnBackend::Brute);
  bool fast_enough = !growth.empty();
  std::string g;
  for (std::size_t i = 0; i < growth.size(); ++i) {
    fast_enough &= growth[i] >= kMinBruteGrowth;
    g += fmt("%s%zu->%zu %.2fx", i ? ", " : "", o.sizes[i], o.sizes[i + 1], growth[i]);
  }
  report(10, "complexity trend", fast_enough && r.all_agree(),
         fmt("brute growth %s (want >= %.1fx); backends agree: %s", g.c_str(), kMinBruteGrowth,
             r.all_agree() ? "yes" : "no"));
}

}  // namespace

int main() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);

  criterion_identity();
  criterion_gradcheck();
  criterion_backends();
  criterion_invariants();
  criterion_ce();
  criterion_dataset();
  criterion_bench();

  const ToyDataset ds = generate_toy_dataset(0);
  Trained t;
  criteria_training(t, ds);
  criterion_visualization(t.cpnet, ds);

  for (std::size_t i = 1; i < lines.size(); ++i) std::printf("%s\n", lines[i].c_str());
  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
