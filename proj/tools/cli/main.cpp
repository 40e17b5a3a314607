#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "cpnet/cpnet.h"
#include "experiment_config.hpp"

namespace fs = std::filesystem;
using namespace cpnet_cli;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct Failure {
  int code;
  std::string message;
};

void check(cpnet_status s, const std::string& context) {
  if (s == CPNET_OK) return;
  throw Failure{s == CPNET_ERR_INVALID ? kExitValidation : kExitRuntime, context + ": " + cpnet_last_error()};
}

void need_readable(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in || fs::is_directory(path)) throw Failure{kExitValidation, std::string(what) + " is not readable: " + path};
}

void need_writable(const std::string& path, const char* what) {
  const fs::path p(path);
  const fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
  if (!fs::is_directory(dir))
    throw Failure{kExitValidation, std::string(what) + " directory does not exist: " + dir.string()};
  if (fs::is_directory(p)) throw Failure{kExitValidation, std::string(what) + " is a directory: " + path};
}

// Owning wrappers for the C handles.
struct Dataset {
  cpnet_dataset* h = nullptr;
  ~Dataset() { cpnet_dataset_free(h); }
};

struct Model {
  cpnet_model* h = nullptr;
  ~Model() { cpnet_model_free(h); }
};

void open_dataset(Dataset& ds, const std::optional<std::string>& path, std::uint64_t seed) {
  if (path)
    check(cpnet_dataset_load(path->c_str(), &ds.h), "loading dataset");
  else
    check(cpnet_dataset_generate(seed, &ds.h), "generating dataset");
}

cpnet_split parse_split(const std::string& s) {
  if (s == "train") return CPNET_SPLIT_TRAIN;
  if (s == "val") return CPNET_SPLIT_VAL;
  throw Failure{kExitValidation, "unknown split '" + s + "' (expected train or val)"};
}

// ------------------------------------------------------------------ verbs

struct GenerateArgs {
  std::uint64_t seed = 0;
  std::string out = "toy.cpds";
  bool dry_run = false;
};

int run_generate(const GenerateArgs& a) {
  need_writable(a.out, "output");
  if (a.dry_run) {
    std::printf("generate seed=%llu out=%s\n", static_cast<unsigned long long>(a.seed), a.out.c_str());
    return 0;
  }
  Dataset ds;
  check(cpnet_dataset_generate(a.seed, &ds.h), "generating dataset");
  check(cpnet_dataset_save(ds.h, a.out.c_str()), "saving dataset");
  std::size_t ntrain = 0, nval = 0;
  check(cpnet_dataset_size(ds.h, CPNET_SPLIT_TRAIN, &ntrain), "dataset size");
  check(cpnet_dataset_size(ds.h, CPNET_SPLIT_VAL, &nval), "dataset size");
  std::printf("wrote %s: %zu train, %zu val\n", a.out.c_str(), ntrain, nval);
  return 0;
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k;
  std::optional<std::string> backend;
  std::optional<std::string> out;
  bool dry_run = false;
};

int run_train(const TrainArgs& a) {
  ExperimentConfig c;
  try {
    if (!a.config.empty()) c = load_experiment_config(a.config);
    if (a.seed) c.train.seed = *a.seed;
    if (a.k) c.k = *a.k;
    if (a.backend) c.backend = parse_backend(*a.backend);
  } catch (const ConfigError& e) {
    throw Failure{kExitValidation, e.what()};
  }
  if (a.out) c.checkpoint = *a.out;
  if (c.dataset) need_readable(*c.dataset, "dataset");
  need_writable(c.checkpoint, "checkpoint");
  need_writable(c.metrics, "metrics");
  if (a.dry_run) {
    std::printf("%s\n", to_json(c).c_str());
    return 0;
  }

  Dataset ds;
  open_dataset(ds, c.dataset, c.dataset_seed);
  Model m;
  check(cpnet_model_create(c.model, c.k, c.train.seed, &m.h), "creating model");
  check(cpnet_model_set_backend(m.h, c.backend), "selecting backend");
  cpnet_epoch_metrics best{};
  auto on_epoch = [](const cpnet_epoch_metrics* e, void*) {
    std::printf("epoch %3zu  train loss %.4f acc %.3f  val loss %.4f acc %.3f\n", e->epoch, e->train_loss,
                e->train_accuracy, e->val_loss, e->val_accuracy);
    std::fflush(stdout);
  };
  check(cpnet_train(m.h, ds.h, &c.train, c.metrics.c_str(), on_epoch, nullptr, &best), "training");
  check(cpnet_model_save(m.h, c.checkpoint.c_str()), "saving checkpoint");
  std::printf("best epoch %zu: train accuracy %.4f, val accuracy %.4f\n", best.epoch, best.train_accuracy,
              best.val_accuracy);
  std::printf("final val accuracy %.4f\n", best.val_accuracy);
  std::printf("checkpoint %s, metrics %s\n", c.checkpoint.c_str(), c.metrics.c_str());
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::optional<std::string> dataset;
  std::uint64_t seed = 0;
  std::string split = "val";
  std::optional<std::string> backend;
  bool dry_run = false;
};

int run_eval(const EvalArgs& a) {
  const cpnet_split split = parse_split(a.split);
  std::optional<cpnet_backend> backend;
  try {
    if (a.backend) backend = parse_backend(*a.backend);
  } catch (const ConfigError& e) {
    throw Failure{kExitValidation, e.what()};
  }
  need_readable(a.checkpoint, "checkpoint");
  if (a.dataset) need_readable(*a.dataset, "dataset");
  if (a.dry_run) {
    std::printf("eval checkpoint=%s split=%s\n", a.checkpoint.c_str(), a.split.c_str());
    return 0;
  }
  Dataset ds;
  open_dataset(ds, a.dataset, a.seed);
  Model m;
  check(cpnet_model_load(a.checkpoint.c_str(), &m.h), "loading checkpoint");
  if (backend) check(cpnet_model_set_backend(m.h, *backend), "selecting backend");
  double acc = 0, loss = 0;
  check(cpnet_evaluate(m.h, ds.h, split, &acc, &loss), "evaluating");
  std::printf("%s accuracy %.4f loss %.4f\n", a.split.c_str(), acc, loss);
  return 0;
}

struct GradcheckArgs {
  std::uint64_t seed = 0;
  float epsilon = 1e-2f;
  std::string out = "gradcheck.csv";
  bool dry_run = false;
};

int run_gradcheck(const GradcheckArgs& a) {
  need_writable(a.out, "report");
  if (a.dry_run) {
    std::printf("gradcheck seed=%llu epsilon=%g out=%s\n", static_cast<unsigned long long>(a.seed), a.epsilon,
                a.out.c_str());
    return 0;
  }
  int passed = 0;
  check(cpnet_gradcheck(a.seed, a.epsilon, a.out.c_str(), &passed), "checking gradients");
  std::ifstream in(a.out);
  std::cout << in.rdbuf();
  std::printf("%s\n", passed ? "gradcheck passed" : "gradcheck FAILED");
  return passed ? 0 : kExitRuntime;
}

struct VisualizeArgs {
  std::string checkpoint;
  std::optional<std::string> dataset;
  std::uint64_t seed = 0;
  std::string split = "val";
  std::size_t sample = 0;
  std::string out = "visualize.jsonl";
  std::optional<std::string> backend;
  bool dry_run = false;
};

int run_visualize(const VisualizeArgs& a) {
  const cpnet_split split = parse_split(a.split);
  std::optional<cpnet_backend> backend;
  try {
    if (a.backend) backend = parse_backend(*a.backend);
  } catch (const ConfigError& e) {
    throw Failure{kExitValidation, e.what()};
  }
  need_readable(a.checkpoint, "checkpoint");
  if (a.dataset) need_readable(*a.dataset, "dataset");
  need_writable(a.out, "output");
  if (a.dry_run) {
    std::printf("visualize checkpoint=%s split=%s sample=%zu out=%s\n", a.checkpoint.c_str(), a.split.c_str(),
                a.sample, a.out.c_str());
    return 0;
  }
  Dataset ds;
  open_dataset(ds, a.dataset, a.seed);
  Model m;
  check(cpnet_model_load(a.checkpoint.c_str(), &m.h), "loading checkpoint");
  if (backend) check(cpnet_model_set_backend(m.h, *backend), "selecting backend");
  check(cpnet_visualize(m.h, ds.h, split, a.sample, a.out.c_str()), "visualizing");
  std::printf("wrote %s\n", a.out.c_str());
  return 0;
}

struct BenchArgs {
  std::vector<std::size_t> sizes{512, 1024, 2048};
  std::optional<std::string> backend;
  std::size_t k = 8;
  std::size_t channels = 64;
  std::size_t reps = 5;
  std::uint64_t seed = 0;
  std::string out = "bench.csv";
  bool dry_run = false;
};

int run_bench(const BenchArgs& a) {
  std::vector<cpnet_backend> backends{CPNET_BACKEND_BRUTE, CPNET_BACKEND_TREE};
  try {
    if (a.backend) backends = {parse_backend(*a.backend)};
  } catch (const ConfigError& e) {
    throw Failure{kExitValidation, e.what()};
  }
  need_writable(a.out, "output");
  if (a.dry_run) {
    std::printf("bench-knn sizes=%zu k=%zu c=%zu reps=%zu out=%s\n", a.sizes.size(), a.k, a.channels, a.reps,
                a.out.c_str());
    return 0;
  }
  std::vector<cpnet_bench_row> rows(a.sizes.size() * backends.size());
  int agree = 0;
  check(cpnet_bench_knn(a.sizes.data(), a.sizes.size(), backends.data(), backends.size(), a.channels, a.k, a.reps,
                        a.seed, a.out.c_str(), rows.data(), &agree),
        "benchmarking");
  std::ifstream in(a.out);
  std::cout << in.rdbuf();
  for (cpnet_backend b : backends) {
    const cpnet_bench_row* prev = nullptr;
    for (const auto& r : rows) {
      if (r.backend != b) continue;
      if (prev != nullptr)
        std::printf("growth %s thw %zu -> %zu: %.2fx\n", backend_name(b), prev->thw, r.thw, r.millis / prev->millis);
      prev = &r;
    }
  }
  if (backends.size() > 1) std::printf("cross-check: %s\n", agree ? "all backends agree" : "MISMATCH");
  return agree || backends.size() == 1 ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Keep large per-step buffers on the heap instead of mapping them afresh.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
  CLI::App app{"Toy video classification with correspondence-proposal modules"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write the moving-square dataset (CPDS)");
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--out", gen.out, "Output path");
  g->add_flag("--dry-run", gen.dry_run, "Validate arguments only");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a toy model and write checkpoint + metrics CSV");
  t->add_option("--config", tr.config, "Experiment JSON");
  t->add_option("--seed", tr.seed, "Training seed (overrides config)");
  t->add_option("--k", tr.k, "CP neighbor count (overrides config)");
  t->add_option("--backend", tr.backend, "k-NN backend: brute or tree");
  t->add_option("--out", tr.out, "Checkpoint path (overrides config)");
  t->add_flag("--dry-run", tr.dry_run, "Print the resolved config and exit");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Accuracy of a checkpoint on one split");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint path")->required();
  e->add_option("--dataset", ev.dataset, "CPDS file (generated from --seed when absent)");
  e->add_option("--seed", ev.seed, "Dataset seed when generating");
  e->add_option("--split", ev.split, "train or val");
  e->add_option("--backend", ev.backend, "k-NN backend: brute or tree");
  e->add_flag("--dry-run", ev.dry_run, "Validate arguments only");

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Compare tape gradients with central differences");
  c->add_option("--seed", gc.seed, "Seed for the random cases");
  c->add_option("--epsilon", gc.epsilon, "Central-difference step");
  c->add_option("--out", gc.out, "Report CSV path");
  c->add_flag("--dry-run", gc.dry_run, "Validate arguments only");

  VisualizeArgs vz;
  auto* v = app.add_subcommand("visualize", "Dump CP correspondences of one sample as JSONL");
  v->add_option("--checkpoint", vz.checkpoint, "CPNet checkpoint path")->required();
  v->add_option("--dataset", vz.dataset, "CPDS file (generated from --seed when absent)");
  v->add_option("--seed", vz.seed, "Dataset seed when generating");
  v->add_option("--split", vz.split, "train or val");
  v->add_option("--sample", vz.sample, "Sample index within the split");
  v->add_option("--backend", vz.backend, "k-NN backend: brute or tree");
  v->add_option("--out", vz.out, "Output JSONL path");
  v->add_flag("--dry-run", vz.dry_run, "Validate arguments only");

  BenchArgs bn;
  auto* b = app.add_subcommand("bench-knn", "Time the k-NN backends on random clouds");
  b->add_option("--sizes", bn.sizes, "Ascending THW sizes")->delimiter(',');
  b->add_option("--backend", bn.backend, "Only this backend: brute or tree");
  b->add_option("--k", bn.k, "Neighbor count");
  b->add_option("--channels", bn.channels, "Feature channels");
  b->add_option("--reps", bn.reps, "Repetitions per timing (fastest is kept)");
  b->add_option("--seed", bn.seed, "Cloud seed");
  b->add_option("--out", bn.out, "Output CSV path");
  b->add_flag("--dry-run", bn.dry_run, "Validate arguments only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*g) return run_generate(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*c) return run_gradcheck(gc);
    if (*v) return run_visualize(vz);
    if (*b) return run_bench(bn);
  } catch (const Failure& f) {
    std::fprintf(stderr, "error: %s\n", f.message.c_str());
    return f.code;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kExitRuntime;
  }
  return kExitValidation;
}
