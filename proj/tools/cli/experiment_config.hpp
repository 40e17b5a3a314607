#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "cpnet/cpnet.h"

namespace cpnet_cli {

/// Raised for malformed configs and flags; the CLI exits with code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// JSON experiment description. Every key is optional; unknown keys are
/// rejected. Paths are relative to the working directory.
///
///   model                      "cpnet" | "c2d"            (cpnet)
///   k                          CP neighbor count          (8)
///   backend                    "tree" | "brute"           (tree)
///   dataset                    CPDS file; generated in memory when absent
///   dataset_seed               seed for the generated dataset (0)
///   epochs, batch_size, learning_rate, beta1, beta2, adam_epsilon,
///   seed, early_stop_train_accuracy                       (library defaults)
///   checkpoint                 output checkpoint path     (model.cpt)
///   metrics                    output CSV path            (metrics.csv)
struct ExperimentConfig {
  cpnet_model_kind model = CPNET_MODEL_CPNET;
  std::size_t k = 8;
  cpnet_backend backend = CPNET_BACKEND_TREE;
  std::optional<std::string> dataset;
  std::uint64_t dataset_seed = 0;
  cpnet_train_config train{};
  std::string checkpoint = "model.cpt";
  std::string metrics = "metrics.csv";

  ExperimentConfig();
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string to_json(const ExperimentConfig& config);

cpnet_model_kind parse_model(const std::string& name);
cpnet_backend parse_backend(const std::string& name);
const char* model_name(cpnet_model_kind kind);
const char* backend_name(cpnet_backend backend);

}  // namespace cpnet_cli
