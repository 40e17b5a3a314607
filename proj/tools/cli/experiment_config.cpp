#include "experiment_config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace cpnet_cli {

using nlohmann::json;

ExperimentConfig::ExperimentConfig() { cpnet_train_config_default(&train); }

cpnet_model_kind parse_model(const std::string& name) {
  if (name == "cpnet") return CPNET_MODEL_CPNET;
  if (name == "c2d") return CPNET_MODEL_C2D;
  throw ConfigError("unknown model '" + name + "' (expected cpnet or c2d)");
}

cpnet_backend parse_backend(const std::string& name) {
  if (name == "tree") return CPNET_BACKEND_TREE;
  if (name == "brute") return CPNET_BACKEND_BRUTE;
  throw ConfigError("unknown backend '" + name + "' (expected brute or tree)");
}

const char* model_name(cpnet_model_kind kind) { return kind == CPNET_MODEL_CPNET ? "cpnet" : "c2d"; }

const char* backend_name(cpnet_backend backend) { return backend == CPNET_BACKEND_TREE ? "tree" : "brute"; }

namespace {

// Shortest decimal that reads back as the same float, so 1e-2f prints as 0.01.
double shortest(float v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::strtod(std::string(buf, r.ptr).c_str(), nullptr);
}

template <class T>
T get(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

std::size_t get_count(const json& j, const char* key) {
  if (!j.at(key).is_number_integer() || j.at(key).get<long long>() < 0)
    throw ConfigError(std::string("config key '") + key + "' must be a non-negative integer");
  return j.at(key).get<std::size_t>();
}

double get_number(const json& j, const char* key) {
  if (!j.at(key).is_number()) throw ConfigError(std::string("config key '") + key + "' must be a number");
  return j.at(key).get<double>();
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");

  static const std::set<std::string> known{"model",        "k",          "backend",   "dataset",
                                           "dataset_seed", "epochs",     "batch_size", "learning_rate",
                                           "beta1",        "beta2",      "adam_epsilon", "seed",
                                           "early_stop_train_accuracy", "checkpoint", "metrics"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");

  ExperimentConfig c;
  if (j.contains("model")) c.model = parse_model(get<std::string>(j, "model"));
  if (j.contains("k")) c.k = get_count(j, "k");
  if (j.contains("backend")) c.backend = parse_backend(get<std::string>(j, "backend"));
  if (j.contains("dataset")) c.dataset = get<std::string>(j, "dataset");
  if (j.contains("dataset_seed")) c.dataset_seed = get_count(j, "dataset_seed");
  if (j.contains("epochs")) c.train.epochs = get_count(j, "epochs");
  if (j.contains("batch_size")) c.train.batch_size = get_count(j, "batch_size");
  if (j.contains("learning_rate")) c.train.learning_rate = static_cast<float>(get_number(j, "learning_rate"));
  if (j.contains("beta1")) c.train.beta1 = static_cast<float>(get_number(j, "beta1"));
  if (j.contains("beta2")) c.train.beta2 = static_cast<float>(get_number(j, "beta2"));
  if (j.contains("adam_epsilon")) c.train.adam_epsilon = static_cast<float>(get_number(j, "adam_epsilon"));
  if (j.contains("seed")) c.train.seed = get_count(j, "seed");
  if (j.contains("early_stop_train_accuracy"))
    c.train.early_stop_train_accuracy = get_number(j, "early_stop_train_accuracy");
  if (j.contains("checkpoint")) c.checkpoint = get<std::string>(j, "checkpoint");
  if (j.contains("metrics")) c.metrics = get<std::string>(j, "metrics");
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_experiment_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string to_json(const ExperimentConfig& c) {
  json j{{"model", model_name(c.model)},
         {"k", c.k},
         {"backend", backend_name(c.backend)},
         {"dataset_seed", c.dataset_seed},
         {"epochs", c.train.epochs},
         {"batch_size", c.train.batch_size},
         {"learning_rate", shortest(c.train.learning_rate)},
         {"beta1", shortest(c.train.beta1)},
         {"beta2", shortest(c.train.beta2)},
         {"adam_epsilon", shortest(c.train.adam_epsilon)},
         {"seed", c.train.seed},
         {"early_stop_train_accuracy", c.train.early_stop_train_accuracy},
         {"checkpoint", c.checkpoint},
         {"metrics", c.metrics}};
  if (c.dataset) j["dataset"] = *c.dataset;
  return j.dump(2);
}

}  // namespace cpnet_cli
