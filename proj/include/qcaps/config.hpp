#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qcaps/data.hpp"
#include "qcaps/model.hpp"

namespace qcaps {

/// Training configuration. Every field has a default; the file format is flat
/// UTF-8 `key = value` lines with `#` comments, and unknown keys are rejected.
/// Precedence: defaults < config file < command-line flags.
struct TrainConfig {
  std::string dataset = "synthetic";
  std::string data_dir = "data";
  std::string split = "standard";
  int epochs = 10;
  int batch_size = 64;
  int eval_batch_size = 64;
  double learning_rate = 1e-3;
  std::string optimizer = "adam";  // adam | sgd
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double sgd_momentum = 0.9;
  /// Multiply the learning rate by lr_decay_factor every lr_decay_epochs (0: constant).
  int lr_decay_epochs = 0;
  double lr_decay_factor = 0.1;
  std::uint64_t seed = 0;
  std::string dtype = "float32";  // float32 | float64
  bool margin_clamp = true;
  bool augment_fashion = false;

  // Model.
  bool branched = true;
  int routing_iterations = 2;
  bool per_kernel_offset_rotors = false;
  bool coordinate_addition = false;
  std::int64_t primary_types = 96;
  std::int64_t caps_types = 16;
  int caps_layers = 3;
  std::int64_t caps_kernel = 5;

  // Data volume.
  std::int64_t train_limit = 0;  // 0: whole split
  std::int64_t test_limit = 0;
  std::int64_t synthetic_train = 600;
  std::int64_t synthetic_test = 300;

  // Output and cadence.
  std::string out_dir = "runs/default";
  std::string checkpoint_path;  // empty: <out_dir>/checkpoint.qcn
  std::string metrics_path;     // empty: <out_dir>/metrics.csv
  int eval_every_epochs = 1;
  std::int64_t checkpoint_every_steps = 0;  // 0: end of each epoch only
  std::int64_t log_every_steps = 1;
  /// Stop after this many optimizer steps in total (0: run every epoch).
  std::int64_t max_steps = 0;
  bool resume = false;

  /// Sets one key from its textual value. Throws ConfigError for unknown keys
  /// or unparsable values.
  void set(const std::string& key, const std::string& value);
  /// Every key with its current value, in a fixed order.
  std::vector<std::pair<std::string, std::string>> items() const;
  /// `key = value` lines.
  std::string echo() const;
  void validate() const;

  std::filesystem::path resolved_checkpoint() const;
  std::filesystem::path resolved_metrics() const;
  DatasetKind dataset_kind() const { return parse_dataset_kind(dataset); }
  SplitMode split_mode() const { return parse_split_mode(split); }
  /// Architecture for the configured dataset (input channels, class count).
  ModelConfig model_config() const;
};

/// Applies `key = value` lines on top of `base`.
TrainConfig parse_config_text(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path);

}  // namespace qcaps
