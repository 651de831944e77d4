#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qcaps/checkpoint.hpp"
#include "qcaps/config.hpp"
#include "qcaps/model.hpp"

namespace qcaps {

inline constexpr const char* kVersion = "0.1.0";

/// Adam (bias-corrected) or SGD with momentum over the trainable parameters.
template <typename Scalar>
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config);

  /// Applies one update from the gradients held by the parameters; `step` is 0-based.
  void step(ParameterStore<Scalar>& params, std::uint64_t step, double learning_rate);

  /// Moment arrays named "<kind>.m/<param>" and, for Adam, "adam.v/<param>".
  std::vector<ArrayRecord> state() const;
  void load_state(const Checkpoint& checkpoint, const ParameterStore<Scalar>& params);

 private:
  std::string kind_;
  double beta1_, beta2_, eps_, momentum_;
  std::map<std::string, Tensor<Scalar>> m_, v_;
};

/// Learning rate for a 0-based epoch under the configured step decay.
double learning_rate_at(const TrainConfig& config, std::int64_t epoch);

struct MetricsRow {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::string kind;  // train | eval | eval_familiar | eval_novel
  double margin = 0;
  double loss = 0;
  double accuracy = 0;
  double wall_time = 0;
};

/// CSV columns after the `#` header block.
inline constexpr const char* kMetricsColumns = "step,epoch,kind,margin,loss,accuracy,wall_time";

std::string format_metrics_row(const MetricsRow& row);
/// Rows of a metrics file (header lines skipped).
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

struct TrainResult {
  std::uint64_t steps = 0;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::vector<MetricsRow> rows;  // rows written by this invocation
};

/// Runs the mini-batch loop; resumes from the configured checkpoint when
/// config.resume is set and the file exists. Throws DataError{DatasetMissing},
/// ConfigError, or NonFiniteLoss (after writing nonfinite_batch.txt to out_dir).
TrainResult train(const TrainConfig& config);

struct EvalReport {
  std::string kind;  // eval | eval_familiar | eval_novel
  Index samples = 0;
  double loss = 0;
  double accuracy = 0;
  double error_rate = 0;
  std::vector<double> per_class_accuracy;  // NaN for classes absent from the split
};

/// Deterministic inference-mode evaluation of `net` on preprocessed test samples.
template <typename Scalar>
EvalReport evaluate_samples(const CapsNet<Scalar>& net, const std::vector<Sample>& samples, DatasetKind kind,
                            const NormStats& norm, int batch_size, double margin);

struct EvalRequest {
  std::filesystem::path checkpoint;
  std::string dataset;
  std::string split = "standard";
  std::string data_dir;  // empty: the directory recorded in the checkpoint
};

/// Rebuilds the model from the checkpoint's config echo and evaluates the
/// requested split: one "eval" row in standard mode, "eval_familiar" and
/// "eval_novel" rows in novel modes. Throws CheckpointMismatch when the
/// stored parameters do not fit the model for `dataset`.
std::vector<EvalReport> evaluate(const EvalRequest& request);

/// Preprocessed batch [B, C, 32, 32]; training-phase augmentation draws from a
/// stream seeded by (seed, step, position in batch).
template <typename Scalar>
Tensor<Scalar> make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices, DatasetKind kind,
                          Phase phase, const NormStats& norm, std::uint64_t seed, std::uint64_t step,
                          const PreprocessOptions& options = {});

/// Sample order of a 0-based epoch.
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::int64_t epoch);

}  // namespace qcaps
