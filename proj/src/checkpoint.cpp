#include "qcaps/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "qcaps/error.hpp"

namespace qcaps {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are copied as little-endian memory");

template <typename Scalar>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<Scalar, float> ? 0 : 1;
}

std::size_t dtype_width(std::uint8_t code) { return code == 0 ? 4 : 8; }

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  void string(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void record(const ArrayRecord& r) {
    string(r.name);
    pod(r.dtype);
    pod(static_cast<std::uint32_t>(r.shape.size()));
    for (Index e : r.shape) pod(static_cast<std::uint64_t>(e));
    raw(r.payload.data(), r.payload.size());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const fs::path& path, std::vector<std::uint8_t> data) : path_(path), bytes_(std::move(data)) {}

  void need(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw DataError(DataError::Kind::TruncatedFile, "TruncatedFile: " + path_.string() + ": " + what + " at offset " +
                                                          std::to_string(pos_) + " needs " + std::to_string(n) +
                                                          " bytes, file has " + std::to_string(bytes_.size()));
    }
  }
  template <typename T>
  T pod(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::vector<std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> out(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  std::string string(const char* what) {
    const auto n = pod<std::uint32_t>(what);
    const auto b = raw(n, what);
    return std::string(b.begin(), b.end());
  }
  ArrayRecord record() {
    ArrayRecord r;
    r.name = string("array name");
    r.dtype = pod<std::uint8_t>("dtype");
    if (r.dtype > 1) {
      throw DataError(DataError::Kind::BadMagic, "BadMagic: " + path_.string() + ": unknown dtype code " +
                                                     std::to_string(r.dtype) + " for " + r.name);
    }
    const auto ndim = pod<std::uint32_t>("ndim");
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      const auto e = pod<std::uint64_t>("extent");
      r.shape.push_back(static_cast<Index>(e));
      count *= e;
    }
    r.payload = raw(count * dtype_width(r.dtype), "payload");
    return r;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  fs::path path_;
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename Scalar>
ArrayRecord ArrayRecord::from_tensor(const std::string& name, const Tensor<Scalar>& t) {
  ArrayRecord r;
  r.name = name;
  r.dtype = dtype_code<Scalar>();
  r.shape = t.shape();
  r.payload.resize(static_cast<std::size_t>(t.size()) * sizeof(Scalar));
  std::memcpy(r.payload.data(), t.data(), r.payload.size());
  return r;
}

template <typename Scalar>
Tensor<Scalar> ArrayRecord::to_tensor() const {
  if (dtype != dtype_code<Scalar>()) {
    throw CheckpointMismatch("CheckpointMismatch: " + name + " stored as " + (dtype == 0 ? "float32" : "float64"));
  }
  Tensor<Scalar> t(shape);
  std::memcpy(t.data(), payload.data(), payload.size());
  return t;
}

const ArrayRecord* Checkpoint::find_optimizer(const std::string& name) const {
  for (const auto& r : optimizer) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  Writer w;
  w.raw("QCN1", 4);
  w.pod(c.version);
  w.pod(c.step);
  w.pod(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& r : c.params) w.record(r);
  w.pod(static_cast<std::uint32_t>(c.optimizer.size()));
  for (const auto& r : c.optimizer) w.record(r);
  w.pod(static_cast<std::uint32_t>(c.norm.mean.size()));
  for (double v : c.norm.mean) w.pod(v);
  for (double v : c.norm.stddev) w.pod(v);
  w.string(c.config_echo);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw ConfigError("short write to checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::DatasetMissing, "cannot open checkpoint " + path.string());
  Reader r(path, std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()));
  const auto magic = r.raw(4, "magic");
  if (std::memcmp(magic.data(), "QCN1", 4) != 0) {
    throw DataError(DataError::Kind::BadMagic, "BadMagic: " + path.string() + " is not a QCN1 checkpoint");
  }
  Checkpoint c;
  c.version = r.pod<std::uint32_t>("version");
  if (c.version != kCheckpointVersion) {
    throw DataError(DataError::Kind::BadMagic,
                    "BadMagic: " + path.string() + ": unsupported version " + std::to_string(c.version));
  }
  c.step = r.pod<std::uint64_t>("step");
  const auto n_params = r.pod<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < n_params; ++i) c.params.push_back(r.record());
  const auto n_opt = r.pod<std::uint32_t>("optimizer count");
  for (std::uint32_t i = 0; i < n_opt; ++i) c.optimizer.push_back(r.record());
  const auto channels = r.pod<std::uint32_t>("channel count");
  for (std::uint32_t i = 0; i < channels; ++i) c.norm.mean.push_back(r.pod<double>("mean"));
  for (std::uint32_t i = 0; i < channels; ++i) c.norm.stddev.push_back(r.pod<double>("stddev"));
  c.config_echo = r.string("config echo");
  if (!r.at_end()) throw DataError(DataError::Kind::BadMagic, "BadMagic: " + path.string() + ": trailing bytes");
  return c;
}

template <typename Scalar>
std::vector<ArrayRecord> capture_parameters(const ParameterStore<Scalar>& store) {
  std::vector<ArrayRecord> out;
  for (const auto& p : store.all()) out.push_back(ArrayRecord::from_tensor(p.name, p.var.value()));
  return out;
}

template <typename Scalar>
void restore_parameters(ParameterStore<Scalar>& store, const std::vector<ArrayRecord>& records) {
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!store.contains(r.name)) throw CheckpointMismatch("CheckpointMismatch: unexpected parameter " + r.name);
    Parameter<Scalar>& p = store.get(r.name);
    if (p.var.shape() != r.shape) {
      throw CheckpointMismatch("CheckpointMismatch: " + r.name + " has shape " + shape_string(r.shape) +
                               ", model expects " + shape_string(p.var.shape()));
    }
    p.var.mutable_value() = r.to_tensor<Scalar>();
    seen.insert(r.name);
  }
  for (const auto& p : store.all()) {
    if (!seen.count(p.name)) throw CheckpointMismatch("CheckpointMismatch: missing parameter " + p.name);
  }
}

template ArrayRecord ArrayRecord::from_tensor(const std::string&, const Tensor<float>&);
template ArrayRecord ArrayRecord::from_tensor(const std::string&, const Tensor<double>&);
template Tensor<float> ArrayRecord::to_tensor() const;
template Tensor<double> ArrayRecord::to_tensor() const;
template std::vector<ArrayRecord> capture_parameters(const ParameterStore<float>&);
template std::vector<ArrayRecord> capture_parameters(const ParameterStore<double>&);
template void restore_parameters(ParameterStore<float>&, const std::vector<ArrayRecord>&);
template void restore_parameters(ParameterStore<double>&, const std::vector<ArrayRecord>&);

}  // namespace qcaps
