// qcaps command-line interface. Exit codes: 0 success, 2 config error,
// 3 data error, 4 numerical failure.

#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>

#include "CLI11.hpp"
#include "qcaps/config.hpp"
#include "qcaps/data.hpp"
#include "qcaps/error.hpp"
#include "qcaps/gradcheck_suite.hpp"
#include "qcaps/model.hpp"
#include "qcaps/trainer.hpp"

namespace {

using namespace qcaps;

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<std::string> dataset, data_dir, out;
  bool resume = false;
  std::vector<std::string> overrides;
};

TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  TrainConfig config = path.empty() ? TrainConfig{} : load_config(path);
  for (const auto& kv : overrides) config = parse_config_text(kv, config);
  return config;
}

int run_train(const TrainArgs& a) {
  TrainConfig config = resolve_config(a.config, a.overrides);
  if (a.seed) config.seed = *a.seed;
  if (a.epochs) config.epochs = *a.epochs;
  if (a.dataset) config.dataset = *a.dataset;
  if (a.data_dir) config.data_dir = *a.data_dir;
  if (a.out) config.out_dir = *a.out;
  if (a.resume) config.resume = true;
  const TrainResult r = train(config);
  for (const MetricsRow& row : r.rows) {
    if (row.kind != "train") std::cout << format_metrics_row(row) << "\n";
  }
  std::cout << "steps " << r.steps << "\ncheckpoint " << r.checkpoint.string() << "\nmetrics " << r.metrics.string()
            << "\n";
  return 0;
}

int run_eval(const EvalRequest& request) {
  for (const EvalReport& r : evaluate(request)) {
    std::printf("%s samples=%lld accuracy=%.6f error_rate=%.6f loss=%.6f\n", r.kind.c_str(),
                static_cast<long long>(r.samples), r.accuracy, r.error_rate, r.loss);
    for (std::size_t c = 0; c < r.per_class_accuracy.size(); ++c) {
      const double v = r.per_class_accuracy[c];
      if (std::isnan(v)) {
        std::printf("  class %zu accuracy=n/a\n", c);
      } else {
        std::printf("  class %zu accuracy=%.6f\n", c, v);
      }
    }
  }
  return 0;
}

int run_gradcheck(double tolerance) {
  GradcheckSuiteOptions options;
  options.tolerance = tolerance;
  bool ok = true;
  for (const GradcheckRow& row : run_gradcheck_suite(options)) {
    std::printf("%-28s max_rel_err=%.3e tol=%.1e coords=%lld %s%s\n", row.component.c_str(),
                row.result.max_relative_error, row.tolerance, static_cast<long long>(row.result.coordinates_checked),
                row.passed() ? "PASS" : "FAIL", row.expect_failure ? " (failure expected)" : "");
    ok = ok && row.passed();
  }
  return ok ? 0 : 4;
}

int run_params(const std::string& path, const std::vector<std::string>& overrides) {
  const TrainConfig config = resolve_config(path, overrides);
  config.validate();
  const ModelConfig model = config.model_config();
  const ParamCensus census = param_count(model);
  std::printf("dataset %s, classes %lld, branched %s\n", config.dataset.c_str(), static_cast<long long>(model.classes),
              model.branched ? "true" : "false");
  std::printf("grid chain");
  for (Index g : grid_chain(model)) std::printf(" %lldx%lld", static_cast<long long>(g), static_cast<long long>(g));
  std::printf(" -> %lld classes\n", static_cast<long long>(model.classes));
  for (const ModuleCount& m : census.modules) std::printf("%-8s %lld\n", m.module.c_str(), static_cast<long long>(m.params));
  std::printf("total %lld\n", static_cast<long long>(census.total));
  std::printf("transform params quaternion %lld matrix %lld ratio %.6f\n",
              static_cast<long long>(census.transform_params), static_cast<long long>(census.matrix_transform_params),
              census.transform_ratio());
  return 0;
}

int run_data_verify(const std::string& dataset, const std::string& data_dir) {
  const DatasetKind kind = parse_dataset_kind(dataset);
  const Dataset ds = load_dataset(kind, data_dir);
  for (const auto& [name, split] : {std::pair{"train", &ds.train}, std::pair{"test", &ds.test}}) {
    std::map<std::int64_t, Index> labels;
    std::set<int> azimuths, elevations;
    Index with_meta = 0;
    for (const Sample& s : *split) {
      ++labels[s.label];
      if (!s.meta) continue;
      ++with_meta;
      if (s.meta->azimuth % 2 != 0 || s.meta->azimuth < 0 || s.meta->azimuth > 34 || s.meta->elevation < 0 ||
          s.meta->elevation > 8) {
        throw DataError(DataError::Kind::DimensionMismatch, "DimensionMismatch: viewpoint record out of range");
      }
      azimuths.insert(s.meta->azimuth);
      elevations.insert(s.meta->elevation);
    }
    const Sample& first = split->front();
    std::printf("%s: %zu samples, image %lldx%lldx%lld, classes", name, split->size(),
                static_cast<long long>(first.channels), static_cast<long long>(first.height),
                static_cast<long long>(first.width));
    for (const auto& [label, count] : labels) std::printf(" %lld:%lld", static_cast<long long>(label), static_cast<long long>(count));
    std::printf("\n");
    if (with_meta > 0) {
      std::printf("  viewpoints: %zu azimuth codes, %zu elevations\n", azimuths.size(), elevations.size());
    }
  }
  std::printf("ok\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quaternion capsule networks: training, evaluation and verification"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", train_args.config, "Config file (key = value lines)");
  train_cmd->add_option("--seed", train_args.seed, "Random seed");
  train_cmd->add_option("--epochs", train_args.epochs, "Epoch count");
  train_cmd->add_option("--dataset", train_args.dataset, "smallnorb, mnist, fashion-mnist, svhn, cifar10, synthetic");
  train_cmd->add_option("--data-dir", train_args.data_dir, "Dataset root directory");
  train_cmd->add_option("--out", train_args.out, "Output directory for checkpoint and metrics");
  train_cmd->add_flag("--resume", train_args.resume, "Continue from the checkpoint in the output directory");
  train_cmd->add_option("--set", train_args.overrides, "Extra key=value overrides");

  EvalRequest eval_req;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_req.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--dataset", eval_req.dataset, "Dataset name")->required();
  eval_cmd->add_option("--split", eval_req.split, "standard, novel-azimuth or novel-elevation")
      ->check(CLI::IsMember({"standard", "novel-azimuth", "novel-elevation"}));
  eval_cmd->add_option("--data-dir", eval_req.data_dir, "Dataset root directory");

  double tolerance = 0;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks in float64");
  grad_cmd->add_option("--tolerance", tolerance, "Override every per-component tolerance");

  std::string params_config;
  std::vector<std::string> params_overrides;
  auto* params_cmd = app.add_subcommand("params", "Trainable-parameter census");
  params_cmd->add_option("--config", params_config, "Config file");
  params_cmd->add_option("--set", params_overrides, "Extra key=value overrides");

  std::string verify_dataset, verify_dir = "data";
  auto* data_cmd = app.add_subcommand("data", "Dataset utilities");
  data_cmd->require_subcommand(1);
  auto* verify_cmd = data_cmd->add_subcommand("verify", "Parse a dataset and summarize it");
  verify_cmd->add_option("--dataset", verify_dataset, "Dataset name")->required();
  verify_cmd->add_option("--data-dir", verify_dir, "Dataset root directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return run_train(train_args);
    if (*eval_cmd) return run_eval(eval_req);
    if (*grad_cmd) return run_gradcheck(tolerance);
    if (*params_cmd) return run_params(params_config, params_overrides);
    if (*verify_cmd) return run_data_verify(verify_dataset, verify_dir);
  } catch (const qcaps::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
