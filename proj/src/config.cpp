#include "qcaps/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "qcaps/error.hpp"

namespace qcaps {

namespace {

/// Calls f(key, field) for every configurable field, in echo order.
template <typename C, typename F>
void visit_fields(C& c, F&& f) {
  f("dataset", c.dataset);
  f("data_dir", c.data_dir);
  f("split", c.split);
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("eval_batch_size", c.eval_batch_size);
  f("learning_rate", c.learning_rate);
  f("optimizer", c.optimizer);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("adam_eps", c.adam_eps);
  f("sgd_momentum", c.sgd_momentum);
  f("lr_decay_epochs", c.lr_decay_epochs);
  f("lr_decay_factor", c.lr_decay_factor);
  f("seed", c.seed);
  f("dtype", c.dtype);
  f("margin_clamp", c.margin_clamp);
  f("augment_fashion", c.augment_fashion);
  f("branched", c.branched);
  f("routing_iterations", c.routing_iterations);
  f("per_kernel_offset_rotors", c.per_kernel_offset_rotors);
  f("coordinate_addition", c.coordinate_addition);
  f("primary_types", c.primary_types);
  f("caps_types", c.caps_types);
  f("caps_layers", c.caps_layers);
  f("caps_kernel", c.caps_kernel);
  f("train_limit", c.train_limit);
  f("test_limit", c.test_limit);
  f("synthetic_train", c.synthetic_train);
  f("synthetic_test", c.synthetic_test);
  f("out_dir", c.out_dir);
  f("checkpoint_path", c.checkpoint_path);
  f("metrics_path", c.metrics_path);
  f("eval_every_epochs", c.eval_every_epochs);
  f("checkpoint_every_steps", c.checkpoint_every_steps);
  f("log_every_steps", c.log_every_steps);
  f("max_steps", c.max_steps);
  f("resume", c.resume);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

void parse_into(const std::string&, const std::string& value, std::string& out) { out = value; }

void parse_into(const std::string& key, const std::string& value, bool& out) {
  if (value == "true" || value == "1" || value == "on") {
    out = true;
  } else if (value == "false" || value == "0" || value == "off") {
    out = false;
  } else {
    bad_value(key, value, "a boolean");
  }
}

template <typename T>
void parse_into(const std::string& key, const std::string& value, T& out) {
  T parsed{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, parsed);
  if (ec != std::errc() || ptr != end) bad_value(key, value, std::is_floating_point_v<T> ? "a number" : "an integer");
  out = parsed;
}

std::string format_value(const std::string& v) { return v; }
std::string format_value(bool v) { return v ? "true" : "false"; }

template <typename T>
std::string format_value(T v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  bool found = false;
  visit_fields(*this, [&](const char* name, auto& field) {
    if (key != name) return;
    parse_into(key, value, field);
    found = true;
  });
  if (!found) throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> TrainConfig::items() const {
  std::vector<std::pair<std::string, std::string>> out;
  visit_fields(*this, [&](const char* name, const auto& field) { out.emplace_back(name, format_value(field)); });
  return out;
}

std::string TrainConfig::echo() const {
  std::string out;
  for (const auto& [k, v] : items()) out += k + " = " + v + "\n";
  return out;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid config: " + msg); };
  dataset_kind();
  split_mode();
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1 || eval_batch_size < 1) fail("batch sizes must be >= 1");
  if (!(learning_rate > 0)) fail("learning_rate must be > 0");
  if (optimizer != "adam" && optimizer != "sgd") fail("optimizer must be adam or sgd");
  if (dtype != "float32" && dtype != "float64") fail("dtype must be float32 or float64");
  if (lr_decay_epochs < 0 || !(lr_decay_factor > 0)) fail("learning-rate decay");
  if (eval_every_epochs < 1) fail("eval_every_epochs must be >= 1");
  if (log_every_steps < 1) fail("log_every_steps must be >= 1");
  if (checkpoint_every_steps < 0 || max_steps < 0) fail("step counts must be >= 0");
  if (synthetic_train < 1 || synthetic_test < 1) fail("synthetic sizes must be >= 1");
  model_config().validate();
}

std::filesystem::path TrainConfig::resolved_checkpoint() const {
  return checkpoint_path.empty() ? std::filesystem::path(out_dir) / "checkpoint.qcn" : std::filesystem::path(checkpoint_path);
}

std::filesystem::path TrainConfig::resolved_metrics() const {
  return metrics_path.empty() ? std::filesystem::path(out_dir) / "metrics.csv" : std::filesystem::path(metrics_path);
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  switch (dataset_kind()) {
    case DatasetKind::SmallNorb: m.in_channels = 2; m.classes = 5; break;
    case DatasetKind::Mnist:
    case DatasetKind::FashionMnist: m.in_channels = 1; m.classes = 10; break;
    case DatasetKind::Svhn:
    case DatasetKind::Cifar10: m.in_channels = 3; m.classes = 10; break;
    case DatasetKind::Synthetic: m.in_channels = 1; m.classes = 3; break;
  }
  m.branched = branched;
  m.routing.iterations = routing_iterations;
  m.per_kernel_offset_rotors = per_kernel_offset_rotors;
  m.coordinate_addition = coordinate_addition;
  m.primary_types = primary_types;
  m.caps_types = caps_types;
  m.caps_layers = caps_layers;
  m.caps_kernel = caps_kernel;
  return m;
}

TrainConfig parse_config_text(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace qcaps
