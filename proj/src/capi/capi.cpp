#include "cpnet/cpnet.h"

#include <exception>
#include <fstream>
#include <new>
#include <string>

#include "cpnet/bench.hpp"
#include "cpnet/errors.hpp"
#include "cpnet/gradcheck.hpp"
#include "cpnet/model.hpp"
#include "cpnet/parallel.hpp"
#include "cpnet/toy_data.hpp"
#include "cpnet/train.hpp"
#include "cpnet/visualize.hpp"

struct cpnet_dataset {
  cpnet::ToyDataset data;
};

struct cpnet_model {
  cpnet::ToyModel model;
};

namespace {

thread_local std::string g_last_error;

cpnet_status fail(cpnet_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

// Runs body and converts exceptions into status codes.
template <class F>
cpnet_status guarded(F&& body) {
  try {
    body();
    return CPNET_OK;
  } catch (const cpnet::ValidationError& e) {
    return fail(CPNET_ERR_INVALID, e.what());
  } catch (const cpnet::NumericError& e) {
    return fail(CPNET_ERR_RUNTIME, e.what());
  } catch (const cpnet::IoError& e) {
    return fail(CPNET_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(CPNET_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(CPNET_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(CPNET_ERR_INTERNAL, "unknown error");
  }
}

void need(const void* p, const char* what) {
  if (p == nullptr) cpnet::fail_validation(std::string(what) + " must not be null");
}

const std::vector<cpnet::ToySample>& split_of(const cpnet_dataset* ds, cpnet_split split) {
  need(ds, "dataset");
  switch (split) {
    case CPNET_SPLIT_TRAIN: return ds->data.train;
    case CPNET_SPLIT_VAL: return ds->data.val;
  }
  cpnet::fail_validation("unknown split " + std::to_string(static_cast<int>(split)));
}

const cpnet::ToySample& sample_of(const cpnet_dataset* ds, cpnet_split split, size_t index) {
  const auto& s = split_of(ds, split);
  cpnet::require(index < s.size(), "sample index " + std::to_string(index) + " out of range (split has " +
                                       std::to_string(s.size()) + ")");
  return s[index];
}

cpnet::KnnBackend to_backend(cpnet_backend b) {
  switch (b) {
    case CPNET_BACKEND_BRUTE: return cpnet::KnnBackend::Brute;
    case CPNET_BACKEND_TREE: return cpnet::KnnBackend::Tree;
  }
  cpnet::fail_validation("unknown backend " + std::to_string(static_cast<int>(b)));
}

cpnet_epoch_metrics to_c(const cpnet::EpochMetrics& m) {
  return {m.epoch, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy};
}

}  // namespace

extern "C" {

const char* cpnet_last_error(void) { return g_last_error.c_str(); }

const char* cpnet_version(void) { return "1.0.0"; }

cpnet_status cpnet_set_threads(size_t threads) {
  return guarded([&] {
    cpnet::require(threads >= 1, "thread count must be at least 1");
    cpnet::set_worker_count(threads);
  });
}

cpnet_status cpnet_dataset_generate(uint64_t seed, cpnet_dataset** out) {
  return guarded([&] {
    need(out, "out");
    *out = new cpnet_dataset{cpnet::generate_toy_dataset(seed)};
  });
}

cpnet_status cpnet_dataset_load(const char* path, cpnet_dataset** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new cpnet_dataset{cpnet::load_cpds(path)};
  });
}

cpnet_status cpnet_dataset_save(const cpnet_dataset* ds, const char* path) {
  return guarded([&] {
    need(ds, "dataset");
    need(path, "path");
    cpnet::save_cpds(path, ds->data);
  });
}

cpnet_status cpnet_dataset_size(const cpnet_dataset* ds, cpnet_split split, size_t* out) {
  return guarded([&] {
    need(out, "out");
    *out = split_of(ds, split).size();
  });
}

cpnet_status cpnet_dataset_label(const cpnet_dataset* ds, cpnet_split split, size_t index, int* out) {
  return guarded([&] {
    need(out, "out");
    *out = static_cast<int>(sample_of(ds, split, index).label);
  });
}

cpnet_status cpnet_dataset_frames(const cpnet_dataset* ds, cpnet_split split, size_t index, uint8_t* pixels,
                                  size_t capacity) {
  return guarded([&] {
    need(pixels, "pixels");
    const auto& s = sample_of(ds, split, index);
    cpnet::require(capacity >= s.frames.size(),
                   "pixel buffer holds " + std::to_string(capacity) + ", need " + std::to_string(s.frames.size()));
    std::copy(s.frames.begin(), s.frames.end(), pixels);
  });
}

void cpnet_dataset_free(cpnet_dataset* ds) { delete ds; }

cpnet_status cpnet_model_create(cpnet_model_kind kind, size_t k, uint64_t seed, cpnet_model** out) {
  return guarded([&] {
    need(out, "out");
    switch (kind) {
      case CPNET_MODEL_C2D: *out = new cpnet_model{cpnet::ToyModel::c2d(seed)}; return;
      case CPNET_MODEL_CPNET: *out = new cpnet_model{cpnet::ToyModel::cpnet(k, seed)}; return;
    }
    cpnet::fail_validation("unknown model kind " + std::to_string(static_cast<int>(kind)));
  });
}

cpnet_status cpnet_model_load(const char* path, cpnet_model** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new cpnet_model{cpnet::ToyModel::load(path)};
  });
}

cpnet_status cpnet_model_save(cpnet_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    model->model.save(path);
  });
}

cpnet_status cpnet_model_kind_of(const cpnet_model* model, cpnet_model_kind* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = model->model.kind() == cpnet::ModelKind::CPNet ? CPNET_MODEL_CPNET : CPNET_MODEL_C2D;
  });
}

cpnet_status cpnet_model_neighbors(const cpnet_model* model, size_t* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = model->model.neighbors();
  });
}

cpnet_status cpnet_model_parameter_count(cpnet_model* model, size_t* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = model->model.parameter_count();
  });
}

cpnet_status cpnet_model_set_backend(cpnet_model* model, cpnet_backend backend) {
  return guarded([&] {
    need(model, "model");
    model->model.set_backend(to_backend(backend));
  });
}

void cpnet_model_free(cpnet_model* model) { delete model; }

void cpnet_train_config_default(cpnet_train_config* config) {
  if (config == nullptr) return;
  const cpnet::TrainConfig d;
  *config = {d.epochs, d.batch_size, d.learning_rate, d.beta1, d.beta2, d.adam_epsilon, d.seed,
             d.early_stop_train_accuracy};
}

cpnet_status cpnet_train(cpnet_model* model, const cpnet_dataset* ds, const cpnet_train_config* config,
                         const char* metrics_csv, cpnet_epoch_callback on_epoch, void* user,
                         cpnet_epoch_metrics* best) {
  return guarded([&] {
    need(model, "model");
    need(ds, "dataset");
    need(config, "config");
    cpnet::TrainConfig cfg;
    cfg.epochs = config->epochs;
    cfg.batch_size = config->batch_size;
    cfg.learning_rate = config->learning_rate;
    cfg.beta1 = config->beta1;
    cfg.beta2 = config->beta2;
    cfg.adam_epsilon = config->adam_epsilon;
    cfg.seed = config->seed;
    cfg.early_stop_train_accuracy = config->early_stop_train_accuracy;
    const auto result = cpnet::train(model->model, ds->data, cfg, [&](const cpnet::EpochMetrics& m) {
      if (on_epoch != nullptr) {
        const cpnet_epoch_metrics c = to_c(m);
        on_epoch(&c, user);
      }
    });
    if (metrics_csv != nullptr) cpnet::write_metrics_csv(metrics_csv, result.history);
    if (best != nullptr) *best = to_c(result.best());
  });
}

cpnet_status cpnet_evaluate(cpnet_model* model, const cpnet_dataset* ds, cpnet_split split, double* accuracy,
                            double* loss) {
  return guarded([&] {
    need(model, "model");
    const auto e = cpnet::evaluate(model->model, split_of(ds, split));
    if (accuracy != nullptr) *accuracy = e.accuracy;
    if (loss != nullptr) *loss = e.loss;
  });
}

cpnet_status cpnet_gradcheck(uint64_t seed, float epsilon, const char* report_csv, int* passed) {
  return guarded([&] {
    need(passed, "passed");
    cpnet::GradcheckOptions opt;
    opt.seed = seed;
    opt.epsilon = epsilon;
    const auto report = cpnet::run_gradcheck(opt);
    if (report_csv != nullptr) {
      std::ofstream out(report_csv, std::ios::trunc);
      if (!out) throw cpnet::IoError(std::string("cannot open report for writing: ") + report_csv);
      cpnet::write_gradcheck_report(out, report);
      if (!out.flush()) throw cpnet::IoError(std::string("write failed: ") + report_csv);
    }
    *passed = report.passed() ? 1 : 0;
  });
}

cpnet_status cpnet_visualize(cpnet_model* model, const cpnet_dataset* ds, cpnet_split split, size_t sample_index,
                             const char* out_path) {
  return guarded([&] {
    need(model, "model");
    need(out_path, "out_path");
    cpnet::write_visualization(out_path, model->model, sample_of(ds, split, sample_index));
  });
}

cpnet_status cpnet_bench_knn(const size_t* sizes, size_t n_sizes, const cpnet_backend* backends, size_t n_backends,
                             size_t channels, size_t k, size_t repetitions, uint64_t seed, const char* csv_path,
                             cpnet_bench_row* rows, int* agree) {
  return guarded([&] {
    cpnet::require(n_sizes == 0 || sizes != nullptr, "sizes must not be null");
    cpnet::require(n_backends == 0 || backends != nullptr, "backends must not be null");
    need(rows, "rows");
    cpnet::BenchOptions opt;
    opt.sizes.assign(sizes, sizes + n_sizes);
    opt.backends.clear();
    for (size_t i = 0; i < n_backends; ++i) opt.backends.push_back(to_backend(backends[i]));
    opt.channels = channels;
    opt.k = k;
    opt.repetitions = repetitions;
    opt.seed = seed;
    const auto result = cpnet::run_knn_bench(opt);
    if (csv_path != nullptr) {
      std::ofstream out(csv_path, std::ios::trunc);
      if (!out) throw cpnet::IoError(std::string("cannot open bench output for writing: ") + csv_path);
      cpnet::write_bench_csv(out, result);
      if (!out.flush()) throw cpnet::IoError(std::string("write failed: ") + csv_path);
    }
    for (size_t i = 0; i < result.rows.size(); ++i) {
      const auto& r = result.rows[i];
      rows[i] = {r.backend == cpnet::KnnBackend::Brute ? CPNET_BACKEND_BRUTE : CPNET_BACKEND_TREE, r.thw, r.channels,
                 r.k, r.millis};
    }
    if (agree != nullptr) *agree = result.all_agree() ? 1 : 0;
  });
}

}  // extern "C"
