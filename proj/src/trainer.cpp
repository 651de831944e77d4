#include "qcaps/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "qcaps/error.hpp"
#include "qcaps/objective.hpp"

namespace qcaps {

namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(splitmix64(a) ^ (b + 0x632BE59BD9B4E019ull)); }

std::string shortest(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename Scalar>
Optimizer<Scalar>::Optimizer(const TrainConfig& config)
    : kind_(config.optimizer),
      beta1_(config.adam_beta1),
      beta2_(config.adam_beta2),
      eps_(config.adam_eps),
      momentum_(config.sgd_momentum) {}

template <typename Scalar>
void Optimizer<Scalar>::step(ParameterStore<Scalar>& params, std::uint64_t step, double learning_rate) {
  const double t = static_cast<double>(step + 1);
  const double correct1 = 1.0 - std::pow(beta1_, t);
  const double correct2 = 1.0 - std::pow(beta2_, t);
  for (auto& p : params.all()) {
    if (!p.trainable || p.var.grad().empty()) continue;
    Tensor<Scalar>& w = p.var.mutable_value();
    const Tensor<Scalar>& g = p.var.grad();
    auto [mit, fresh] = m_.try_emplace(p.name, w.shape());
    Tensor<Scalar>& m = mit->second;
    if (kind_ == "sgd") {
      for (Index i = 0; i < w.size(); ++i) {
        m[i] = static_cast<Scalar>(momentum_ * m[i] + g[i]);
        w[i] -= static_cast<Scalar>(learning_rate * m[i]);
      }
      continue;
    }
    Tensor<Scalar>& v = v_.try_emplace(p.name, w.shape()).first->second;
    for (Index i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
      const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      m[i] = static_cast<Scalar>(mi);
      v[i] = static_cast<Scalar>(vi);
      w[i] -= static_cast<Scalar>(learning_rate * (mi / correct1) / (std::sqrt(vi / correct2) + eps_));
    }
  }
}

template <typename Scalar>
std::vector<ArrayRecord> Optimizer<Scalar>::state() const {
  std::vector<ArrayRecord> out;
  for (const auto& [name, t] : m_) out.push_back(ArrayRecord::from_tensor(kind_ + ".m/" + name, t));
  for (const auto& [name, t] : v_) out.push_back(ArrayRecord::from_tensor(kind_ + ".v/" + name, t));
  return out;
}

template <typename Scalar>
void Optimizer<Scalar>::load_state(const Checkpoint& checkpoint, const ParameterStore<Scalar>& params) {
  m_.clear();
  v_.clear();
  for (const auto& r : checkpoint.optimizer) {
    const bool is_m = r.name.rfind(kind_ + ".m/", 0) == 0;
    const bool is_v = r.name.rfind(kind_ + ".v/", 0) == 0;
    if (!is_m && !is_v) continue;
    const std::string name = r.name.substr(kind_.size() + 3);
    if (!params.contains(name) || params.get(name).var.shape() != r.shape) {
      throw CheckpointMismatch("CheckpointMismatch: optimizer state for unknown parameter " + name);
    }
    (is_m ? m_ : v_).insert_or_assign(name, r.to_tensor<Scalar>());
  }
}

double learning_rate_at(const TrainConfig& config, std::int64_t epoch) {
  if (config.lr_decay_epochs <= 0) return config.learning_rate;
  return config.learning_rate * std::pow(config.lr_decay_factor, static_cast<double>(epoch / config.lr_decay_epochs));
}

// ---------------------------------------------------------------------------

std::string format_metrics_row(const MetricsRow& r) {
  char wall[32];
  std::snprintf(wall, sizeof wall, "%.3f", r.wall_time);
  return std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + r.kind + "," + shortest(r.margin) + "," +
         shortest(r.loss) + "," + shortest(r.accuracy) + "," + wall;
}

std::vector<MetricsRow> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read metrics file " + path.string());
  std::vector<MetricsRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line == kMetricsColumns) continue;
    std::istringstream fields(line);
    std::string f[7];
    for (auto& s : f) std::getline(fields, s, ',');
    MetricsRow r;
    r.step = std::stoll(f[0]);
    r.epoch = std::stoll(f[1]);
    r.kind = f[2];
    r.margin = std::stod(f[3]);
    r.loss = std::stod(f[4]);
    r.accuracy = std::stod(f[5]);
    r.wall_time = std::stod(f[6]);
    rows.push_back(r);
  }
  return rows;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix(seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

template <typename Scalar>
Tensor<Scalar> make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices, DatasetKind kind,
                          Phase phase, const NormStats& norm, std::uint64_t seed, std::uint64_t step,
                          const PreprocessOptions& options) {
  Tensor<Scalar> batch;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::mt19937_64 rng(mix(mix(seed, step), k));
    const Tensor<float> img = preprocess(samples[indices[k]], kind, phase, norm, rng, options);
    if (k == 0) {
      batch = Tensor<Scalar>(Shape{static_cast<Index>(indices.size()), img.dim(0), img.dim(1), img.dim(2)});
    }
    Scalar* dst = batch.data() + static_cast<Index>(k) * img.size();
    for (Index i = 0; i < img.size(); ++i) dst[i] = static_cast<Scalar>(img[i]);
  }
  return batch;
}

template <typename Scalar>
EvalReport evaluate_samples(const CapsNet<Scalar>& net, const std::vector<Sample>& samples, DatasetKind kind,
                            const NormStats& norm, int batch_size, double margin) {
  NoGradGuard no_grad;
  const Index classes = net.config().classes;
  EvalReport report;
  report.samples = static_cast<Index>(samples.size());
  std::vector<Index> seen(static_cast<std::size_t>(classes), 0), hit(static_cast<std::size_t>(classes), 0);
  double loss_sum = 0;
  Index correct = 0;
  BatchNormOptions bn;
  bn.training = false;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<Scalar> batch = make_batch<Scalar>(samples, idx, kind, Phase::Test, norm, 0, 0);
    const ForwardOutput<Scalar> out = net.forward(constant(batch), bn);
    std::vector<std::int64_t> labels;
    for (std::size_t i : idx) labels.push_back(samples[i].label);
    const Tensor<Scalar>& acts = out.classes.acts.value();
    const std::vector<std::int64_t> pred = predict_batch(acts);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::vector<double> row(acts.data() + static_cast<Index>(k) * classes,
                                    acts.data() + static_cast<Index>(k + 1) * classes);
      loss_sum += spread_loss(std::span<const double>(row), labels[k], margin);
      const auto c = static_cast<std::size_t>(labels[k]);
      ++seen[c];
      if (pred[k] == labels[k]) {
        ++hit[c];
        ++correct;
      }
    }
  }
  const double n = static_cast<double>(std::max<Index>(report.samples, 1));
  report.loss = loss_sum / n;
  report.accuracy = static_cast<double>(correct) / n;
  report.error_rate = 1.0 - report.accuracy;
  for (Index c = 0; c < classes; ++c) {
    const auto i = static_cast<std::size_t>(c);
    report.per_class_accuracy.push_back(seen[i] ? static_cast<double>(hit[i]) / static_cast<double>(seen[i])
                                                : std::numeric_limits<double>::quiet_NaN());
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

struct PreparedData {
  DatasetKind kind;
  SplitResult split;
  NormStats norm;
};

PreparedData prepare_data(const TrainConfig& config, const std::string& data_dir) {
  PreparedData out;
  out.kind = config.dataset_kind();
  DatasetOptions options;
  options.synthetic_train = config.synthetic_train;
  options.synthetic_test = config.synthetic_test;
  options.seed = config.seed;
  Dataset ds = load_dataset(out.kind, data_dir, options);
  const std::vector<Sample> train = subset(ds.train, config.train_limit, mix(config.seed, 101));
  const std::vector<Sample> test = subset(ds.test, config.test_limit, mix(config.seed, 202));
  out.split = viewpoint_split(train, test, config.split_mode());
  if (out.split.train.empty()) throw DataError(DataError::Kind::DatasetMissing, "DatasetMissing: empty training split");
  out.norm = compute_norm_stats(out.kind, out.split.train);
  return out;
}

class MetricsWriter {
 public:
  /// Starts a fresh file, or keeps the rows of an existing one with step < keep_below.
  MetricsWriter(const fs::path& path, const TrainConfig& config, bool resume, std::int64_t keep_below) : path_(path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::vector<std::string> kept;
    if (resume && fs::exists(path)) {
      for (const MetricsRow& r : read_metrics(path)) {
        if (r.step < keep_below) {
          kept.push_back(format_metrics_row(r));
          kept_wall = std::max(kept_wall, r.wall_time);
        }
      }
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("cannot write metrics file " + path.string());
    out << "# qcaps metrics\n# version: " << kVersion << "\n";
    for (const auto& [k, v] : config.items()) out << "# config: " << k << " = " << v << "\n";
    out << kMetricsColumns << "\n";
    for (const auto& line : kept) out << line << "\n";
  }

  void write(const MetricsRow& row) {
    std::ofstream out(path_, std::ios::app);
    out << format_metrics_row(row) << "\n";
    rows.push_back(row);
  }

  std::vector<MetricsRow> rows;
  /// Latest wall_time among the kept rows; resumed runs continue from it.
  double kept_wall = 0;

 private:
  fs::path path_;
};

void dump_nonfinite(const TrainConfig& config, std::uint64_t step, std::int64_t epoch,
                    const std::vector<std::size_t>& indices, const std::vector<Sample>& samples) {
  const fs::path path = fs::path(config.out_dir) / "nonfinite_batch.txt";
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << "step " << step << "\nepoch " << epoch << "\nsample label\n";
  for (std::size_t i : indices) out << i << " " << samples[i].label << "\n";
}

template <typename Scalar>
TrainResult train_typed(const TrainConfig& config) {
  const PreparedData data = prepare_data(config, config.data_dir);
  const std::vector<Sample>& train_set = data.split.train;
  CapsNet<Scalar> net(config.model_config(), config.seed);
  Optimizer<Scalar> optimizer(config);
  NormStats norm = data.norm;

  TrainResult result;
  result.checkpoint = config.resolved_checkpoint();
  result.metrics = config.resolved_metrics();

  std::uint64_t step = 0;
  // Running window of train rows: loss sum, correct count, sample count.
  double window[3] = {0, 0, 0};
  const bool resuming = config.resume && fs::exists(result.checkpoint);
  if (resuming) {
    const Checkpoint ck = load_checkpoint(result.checkpoint);
    restore_parameters(net.params(), ck.params);
    optimizer.load_state(ck, net.params());
    norm = ck.norm;
    step = ck.step;
    if (const ArrayRecord* r = ck.find_optimizer("trainer.state")) {
      const Tensor<double> s = r->to_tensor<double>();
      for (int i = 0; i < 3; ++i) window[i] = s[i];
    }
  }
  MetricsWriter metrics(result.metrics, config, resuming, static_cast<std::int64_t>(step));
  const double wall_offset = metrics.kept_wall;

  const auto start_time = std::chrono::steady_clock::now();
  auto wall = [&] {
    return wall_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  };
  auto save = [&](std::uint64_t at_step) {
    Checkpoint ck;
    ck.step = at_step;
    ck.params = capture_parameters(net.params());
    ck.optimizer = optimizer.state();
    // Wall time stays out of the checkpoint so same-seed runs produce identical files.
    Tensor<double> s(Shape{3});
    for (int i = 0; i < 3; ++i) s[i] = window[i];
    ck.optimizer.push_back(ArrayRecord::from_tensor("trainer.state", s));
    ck.norm = norm;
    ck.config_echo = config.echo();
    save_checkpoint(result.checkpoint, ck);
  };

  const std::uint64_t n = train_set.size();
  const std::uint64_t bs = static_cast<std::uint64_t>(config.batch_size);
  const std::uint64_t per_epoch = (n + bs - 1) / bs;
  std::uint64_t stop = per_epoch * static_cast<std::uint64_t>(config.epochs);
  if (config.max_steps > 0) stop = std::min(stop, static_cast<std::uint64_t>(config.max_steps));
  PreprocessOptions pre;
  pre.augment_fashion = config.augment_fashion;
  std::int64_t order_epoch = -1;
  std::vector<std::size_t> order;
  bool saved_at_stop = false;

  while (step < stop) {
    const auto epoch = static_cast<std::int64_t>(step / per_epoch);
    const std::uint64_t b = step % per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(n, config.seed, epoch);
      order_epoch = epoch;
    }
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b * bs),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(n, (b + 1) * bs)));
    const Tensor<Scalar> images = make_batch<Scalar>(train_set, idx, data.kind, Phase::Train, norm, config.seed, step, pre);
    std::vector<std::int64_t> labels;
    for (std::size_t i : idx) labels.push_back(train_set[i].label);

    const double margin = margin_schedule(static_cast<std::int64_t>(step), config.margin_clamp);
    const ForwardOutput<Scalar> out = net.forward(constant(images), BatchNormOptions{});
    const Var<Scalar> loss = spread_loss(out.classes.acts, labels, static_cast<Scalar>(margin));
    const double loss_value = loss.value().item();
    if (!std::isfinite(loss_value)) {
      dump_nonfinite(config, step, epoch, idx, train_set);
      throw NonFiniteLoss("NonFiniteLoss: loss " + shortest(loss_value) + " at step " + std::to_string(step),
                          static_cast<std::int64_t>(step));
    }
    const std::vector<std::int64_t> pred = predict_batch(out.classes.acts.value());
    net.params().zero_grad();
    backward(loss);
    optimizer.step(net.params(), step, learning_rate_at(config, epoch));

    window[0] += loss_value * static_cast<double>(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) window[1] += pred[k] == labels[k] ? 1 : 0;
    window[2] += static_cast<double>(idx.size());
    const bool epoch_end = b + 1 == per_epoch;
    if ((step + 1) % static_cast<std::uint64_t>(config.log_every_steps) == 0 || epoch_end) {
      metrics.write({static_cast<std::int64_t>(step), epoch, "train", margin, window[0] / window[2],
                     window[1] / window[2], wall()});
      window[0] = window[1] = window[2] = 0;
    }
    ++step;

    const bool last_epoch = epoch + 1 == config.epochs;
    if (epoch_end && ((epoch + 1) % config.eval_every_epochs == 0 || last_epoch)) {
      auto eval_row = [&](const std::vector<Sample>& samples, const char* kind) {
        if (samples.empty()) return;
        const EvalReport r = evaluate_samples(net, samples, data.kind, norm, config.eval_batch_size, margin);
        metrics.write({static_cast<std::int64_t>(step - 1), epoch, kind, margin, r.loss, r.accuracy, wall()});
      };
      if (config.split_mode() == SplitMode::Standard) {
        eval_row(data.split.test_novel, "eval");
      } else {
        eval_row(data.split.test_familiar, "eval_familiar");
        eval_row(data.split.test_novel, "eval_novel");
      }
    }
    const bool periodic = config.checkpoint_every_steps > 0 && step % static_cast<std::uint64_t>(config.checkpoint_every_steps) == 0;
    if (epoch_end || periodic || step == stop) {
      save(step);
      saved_at_stop = step == stop;
    }
  }
  if (!saved_at_stop && !fs::exists(result.checkpoint)) save(step);
  result.steps = step;
  result.rows = metrics.rows;
  return result;
}

template <typename Scalar>
std::vector<EvalReport> evaluate_typed(const TrainConfig& config, const Checkpoint& ck, const std::string& data_dir) {
  CapsNet<Scalar> net(config.model_config(), config.seed);
  restore_parameters(net.params(), ck.params);
  const PreparedData data = prepare_data(config, data_dir);
  if (ck.norm.mean.size() != data.norm.mean.size()) {
    throw CheckpointMismatch("CheckpointMismatch: checkpoint normalizes " + std::to_string(ck.norm.mean.size()) +
                             " channels, dataset has " + std::to_string(data.norm.mean.size()));
  }
  const double margin = margin_schedule(static_cast<std::int64_t>(ck.step), config.margin_clamp);
  std::vector<EvalReport> out;
  auto run = [&](const std::vector<Sample>& samples, const char* kind) {
    if (samples.empty()) return;
    EvalReport r = evaluate_samples(net, samples, data.kind, ck.norm, config.eval_batch_size, margin);
    r.kind = kind;
    out.push_back(std::move(r));
  };
  if (config.split_mode() == SplitMode::Standard) {
    run(data.split.test_novel, "eval");
  } else {
    run(data.split.test_familiar, "eval_familiar");
    run(data.split.test_novel, "eval_novel");
  }
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& config) {
  config.validate();
  return config.dtype == "float64" ? train_typed<double>(config) : train_typed<float>(config);
}

std::vector<EvalReport> evaluate(const EvalRequest& request) {
  const Checkpoint ck = load_checkpoint(request.checkpoint);
  TrainConfig config = parse_config_text(ck.config_echo);
  config.dataset = request.dataset;
  config.split = request.split;
  config.validate();
  const std::string data_dir = request.data_dir.empty() ? config.data_dir : request.data_dir;
  return config.dtype == "float64" ? evaluate_typed<double>(config, ck, data_dir)
                                   : evaluate_typed<float>(config, ck, data_dir);
}

template class Optimizer<float>;
template class Optimizer<double>;
template Tensor<float> make_batch(const std::vector<Sample>&, const std::vector<std::size_t>&, DatasetKind, Phase,
                                  const NormStats&, std::uint64_t, std::uint64_t, const PreprocessOptions&);
template Tensor<double> make_batch(const std::vector<Sample>&, const std::vector<std::size_t>&, DatasetKind, Phase,
                                   const NormStats&, std::uint64_t, std::uint64_t, const PreprocessOptions&);
template EvalReport evaluate_samples(const CapsNet<float>&, const std::vector<Sample>&, DatasetKind, const NormStats&,
                                     int, double);
template EvalReport evaluate_samples(const CapsNet<double>&, const std::vector<Sample>&, DatasetKind, const NormStats&,
                                     int, double);

}  // namespace qcaps
