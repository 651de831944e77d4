#include "qcaps/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "qcaps/error.hpp"

namespace qcaps {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path, DataError::Kind missing_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(missing_kind, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataError::Kind::DatasetMissing, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

[[noreturn]] void truncated(const fs::path& path, std::size_t expected, std::size_t actual, const char* what) {
  std::ostringstream msg;
  msg << "TruncatedFile: " << path.string() << ": " << what << " needs " << expected << " bytes, file has " << actual;
  throw DataError(DataError::Kind::TruncatedFile, msg.str());
}

std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

std::uint32_t read_le32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

void push_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void push_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

Sample make_sample(Index c, Index h, Index w, const std::uint8_t* pixels, std::int64_t label) {
  Sample s;
  s.channels = c;
  s.height = h;
  s.width = w;
  s.pixels.assign(pixels, pixels + c * h * w);
  s.label = label;
  return s;
}

}  // namespace

Tensor<float> Sample::image() const {
  Tensor<float> out(Shape{channels, height, width});
  for (std::size_t i = 0; i < pixels.size(); ++i) out[static_cast<Index>(i)] = static_cast<float>(pixels[i]) / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------

IdxFile read_idx(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path, DataError::Kind::DatasetMissing);
  if (bytes.size() < 4) truncated(path, 4, bytes.size(), "magic");
  IdxFile f;
  f.magic = read_be32(bytes.data());
  const unsigned ndim = f.magic & 0xFF;
  if ((f.magic & 0xFFFFFF00u) != 0x00000800u || ndim < 1 || ndim > 4) {
    std::ostringstream msg;
    msg << "BadMagic: " << path.string() << ": 0x" << std::hex << f.magic << " is not an unsigned-byte IDX magic";
    throw DataError(DataError::Kind::BadMagic, msg.str());
  }
  const std::size_t header = 4 + 4 * std::size_t(ndim);
  if (bytes.size() < header) truncated(path, header, bytes.size(), "header");
  std::size_t count = 1;
  for (unsigned i = 0; i < ndim; ++i) {
    f.dims.push_back(read_be32(bytes.data() + 4 + 4 * i));
    count *= f.dims.back();
  }
  if (bytes.size() < header + count) truncated(path, header + count, bytes.size(), "payload");
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                   bytes.begin() + static_cast<std::ptrdiff_t>(header + count));
  return f;
}

void write_idx(const fs::path& path, const IdxFile& file) {
  std::vector<std::uint8_t> out;
  push_be32(out, file.magic);
  for (std::uint32_t d : file.dims) push_be32(out, d);
  out.insert(out.end(), file.payload.begin(), file.payload.end());
  write_file(path, out);
}

Tensor<float> load_idx(const fs::path& path) {
  const IdxFile f = read_idx(path);
  Shape shape;
  for (std::uint32_t d : f.dims) {
    if (d == 0) throw DataError(DataError::Kind::DimensionMismatch, "DimensionMismatch: zero extent in " + path.string());
    shape.push_back(d);
  }
  Tensor<float> out(shape);
  const float scale = (f.magic & 0xFF) >= 3 ? 1.0f / 255.0f : 1.0f;
  for (std::size_t i = 0; i < f.payload.size(); ++i) out[static_cast<Index>(i)] = f.payload[i] * scale;
  return out;
}

// ---------------------------------------------------------------------------

NorbMatrix read_norb_matrix(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path, DataError::Kind::MissingCompanion);
  if (bytes.size() < 8) truncated(path, 8, bytes.size(), "header");
  NorbMatrix m;
  m.magic = read_le32(bytes.data());
  if (m.magic != kNorbByteMagic && m.magic != kNorbIntMagic) {
    std::ostringstream msg;
    msg << "BadMagic: " << path.string() << ": 0x" << std::hex << m.magic << " is not a smallNORB matrix magic";
    throw DataError(DataError::Kind::BadMagic, msg.str());
  }
  const std::int32_t ndim = static_cast<std::int32_t>(read_le32(bytes.data() + 4));
  if (ndim < 1 || ndim > 8) {
    throw DataError(DataError::Kind::DimensionMismatch,
                    "DimensionMismatch: " + path.string() + ": ndim " + std::to_string(ndim));
  }
  const std::size_t stored = static_cast<std::size_t>(std::max(ndim, 3));
  const std::size_t header = 8 + 4 * stored;
  if (bytes.size() < header) truncated(path, header, bytes.size(), "header");
  std::size_t count = 1;
  for (std::int32_t i = 0; i < ndim; ++i) {
    const std::int32_t d = static_cast<std::int32_t>(read_le32(bytes.data() + 8 + 4 * i));
    if (d < 1) {
      throw DataError(DataError::Kind::DimensionMismatch,
                      "DimensionMismatch: " + path.string() + ": extent " + std::to_string(d));
    }
    m.dims.push_back(d);
    count *= static_cast<std::size_t>(d);
  }
  const std::size_t width = m.magic == kNorbByteMagic ? 1 : 4;
  if (bytes.size() < header + count * width) truncated(path, header + count * width, bytes.size(), "payload");
  const std::uint8_t* payload = bytes.data() + header;
  if (width == 1) {
    m.bytes.assign(payload, payload + count);
  } else {
    m.ints.resize(count);
    for (std::size_t i = 0; i < count; ++i) m.ints[i] = static_cast<std::int32_t>(read_le32(payload + 4 * i));
  }
  return m;
}

void write_norb_matrix(const fs::path& path, const NorbMatrix& m) {
  std::vector<std::uint8_t> out;
  push_le32(out, m.magic);
  push_le32(out, static_cast<std::uint32_t>(m.dims.size()));
  for (std::int64_t d : m.dims) push_le32(out, static_cast<std::uint32_t>(d));
  for (std::size_t i = m.dims.size(); i < 3; ++i) push_le32(out, 1);
  if (m.magic == kNorbByteMagic) {
    out.insert(out.end(), m.bytes.begin(), m.bytes.end());
  } else {
    for (std::int32_t v : m.ints) push_le32(out, static_cast<std::uint32_t>(v));
  }
  write_file(path, out);
}

std::vector<Sample> load_smallnorb(const fs::path& dat, const fs::path& cat, const fs::path& info) {
  for (const fs::path& p : {dat, cat, info}) {
    if (!fs::exists(p)) throw DataError(DataError::Kind::MissingCompanion, "MissingCompanion: " + p.string());
  }
  const NorbMatrix images = read_norb_matrix(dat);
  const NorbMatrix labels = read_norb_matrix(cat);
  const NorbMatrix meta = read_norb_matrix(info);
  auto mismatch = [](const std::string& what) {
    throw DataError(DataError::Kind::DimensionMismatch, "DimensionMismatch: " + what);
  };
  if (images.magic != kNorbByteMagic || images.dims.size() != 4 || images.dims[1] != 2) {
    mismatch(dat.string() + " must be a [N, 2, H, W] byte matrix");
  }
  if (labels.magic != kNorbIntMagic || labels.dims.size() != 1) mismatch(cat.string() + " must be an [N] int matrix");
  if (meta.magic != kNorbIntMagic || meta.dims.size() != 2 || meta.dims[1] != 4) {
    mismatch(info.string() + " must be an [N, 4] int matrix");
  }
  const std::int64_t n = images.dims[0];
  if (labels.dims[0] != n || meta.dims[0] != n) {
    mismatch("sample counts differ: " + std::to_string(n) + " images, " + std::to_string(labels.dims[0]) +
             " labels, " + std::to_string(meta.dims[0]) + " info rows");
  }
  const Index h = images.dims[2], w = images.dims[3];
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    Sample s = make_sample(2, h, w, images.bytes.data() + i * 2 * h * w, labels.ints[i]);
    const std::int32_t* row = meta.ints.data() + 4 * i;
    s.meta = ViewpointMeta{labels.ints[i], row[0], row[1], row[2], row[3]};
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "smallnorb") return DatasetKind::SmallNorb;
  if (name == "mnist") return DatasetKind::Mnist;
  if (name == "fashion-mnist") return DatasetKind::FashionMnist;
  if (name == "svhn") return DatasetKind::Svhn;
  if (name == "cifar10") return DatasetKind::Cifar10;
  if (name == "synthetic") return DatasetKind::Synthetic;
  throw ConfigError("unknown dataset '" + name + "' (smallnorb, mnist, fashion-mnist, svhn, cifar10, synthetic)");
}

std::string dataset_name(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::SmallNorb: return "smallnorb";
    case DatasetKind::Mnist: return "mnist";
    case DatasetKind::FashionMnist: return "fashion-mnist";
    case DatasetKind::Svhn: return "svhn";
    case DatasetKind::Cifar10: return "cifar10";
    case DatasetKind::Synthetic: return "synthetic";
  }
  return "unknown";
}

namespace {

std::vector<Sample> load_idx_pair(const fs::path& images, const fs::path& labels) {
  const IdxFile im = read_idx(images);
  const IdxFile lb = read_idx(labels);
  if (im.dims.size() != 3 || lb.dims.size() != 1 || im.dims[0] != lb.dims[0]) {
    throw DataError(DataError::Kind::DimensionMismatch,
                    "DimensionMismatch: " + images.string() + " and " + labels.string() + " disagree");
  }
  const Index n = im.dims[0], h = im.dims[1], w = im.dims[2];
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out.push_back(make_sample(1, h, w, im.payload.data() + i * h * w, lb.payload[i]));
  return out;
}

/// Records of one label byte followed by 3x32x32 channel-major pixels.
std::vector<Sample> load_record_file(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path, DataError::Kind::DatasetMissing);
  constexpr std::size_t record = 1 + 3 * 32 * 32;
  if (bytes.size() % record != 0) {
    truncated(path, (bytes.size() / record + 1) * record, bytes.size(), "record payload");
  }
  std::vector<Sample> out;
  for (std::size_t off = 0; off < bytes.size(); off += record) {
    out.push_back(make_sample(3, 32, 32, bytes.data() + off + 1, bytes[off]));
  }
  return out;
}

void require_files(const std::vector<fs::path>& paths) {
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw DataError(DataError::Kind::DatasetMissing, "DatasetMissing: " + p.string());
  }
}

}  // namespace

Dataset load_dataset(DatasetKind kind, const fs::path& data_dir, const DatasetOptions& options) {
  Dataset ds;
  ds.kind = kind;
  ds.classes = kind == DatasetKind::SmallNorb ? 5 : kind == DatasetKind::Synthetic ? 3 : 10;
  const fs::path root = data_dir / dataset_name(kind);
  switch (kind) {
    case DatasetKind::Synthetic:
      ds.train = synthetic_dataset(options.synthetic_train, options.seed);
      ds.test = synthetic_dataset(options.synthetic_test, options.seed + 1);
      break;
    case DatasetKind::SmallNorb: {
      const std::string tr = "smallnorb-5x46789x9x18x6x2x96x96-training-";
      const std::string te = "smallnorb-5x01235x9x18x6x2x96x96-testing-";
      require_files({root / (tr + "dat.mat"), root / (te + "dat.mat")});
      ds.train = load_smallnorb(root / (tr + "dat.mat"), root / (tr + "cat.mat"), root / (tr + "info.mat"));
      ds.test = load_smallnorb(root / (te + "dat.mat"), root / (te + "cat.mat"), root / (te + "info.mat"));
      break;
    }
    case DatasetKind::Mnist:
    case DatasetKind::FashionMnist: {
      const std::vector<fs::path> files{root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte",
                                        root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte"};
      require_files(files);
      ds.train = load_idx_pair(files[0], files[1]);
      ds.test = load_idx_pair(files[2], files[3]);
      break;
    }
    case DatasetKind::Cifar10: {
      std::vector<fs::path> files;
      for (int i = 1; i <= 5; ++i) files.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
      files.push_back(root / "test_batch.bin");
      require_files(files);
      for (int i = 0; i < 5; ++i) {
        std::vector<Sample> part = load_record_file(files[static_cast<std::size_t>(i)]);
        ds.train.insert(ds.train.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
      }
      ds.test = load_record_file(files.back());
      break;
    }
    case DatasetKind::Svhn:
      require_files({root / "train.bin", root / "test.bin"});
      ds.train = load_record_file(root / "train.bin");
      ds.test = load_record_file(root / "test.bin");
      break;
  }
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const Sample& s : *split) {
      if (s.label < 0 || s.label >= ds.classes) {
        throw DataError(DataError::Kind::DimensionMismatch,
                        "DimensionMismatch: label " + std::to_string(s.label) + " outside [0, " +
                            std::to_string(ds.classes) + ")");
      }
    }
  }
  return ds;
}

std::vector<Sample> subset(const std::vector<Sample>& samples, Index count, std::uint64_t seed) {
  if (count <= 0 || count >= static_cast<Index>(samples.size())) return samples;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(count));
  std::sort(order.begin(), order.end());
  std::vector<Sample> out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back(samples[i]);
  return out;
}

std::vector<Sample> synthetic_dataset(Index n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("synthetic dataset size must be >= 1");
  constexpr Index size = 32;
  constexpr int supersample = 4;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 3);
    ViewpointMeta meta;
    meta.category = label;
    meta.instance = static_cast<int>(i);
    meta.azimuth = static_cast<int>(2 * ((i / 3) % 18));
    meta.elevation = static_cast<int>((i / 54) % 9);
    meta.lighting = static_cast<int>((i / 486) % 6);

    const int sides = 3 + label;
    const double angle = meta.azimuth * 10.0 * std::numbers::pi / 180.0 + (unit(rng) - 0.5) * 0.2;
    const double radius = 9.0 + 4.0 * unit(rng);
    const double squash = 1.0 - 0.04 * meta.elevation;
    const double cx = 15.5 + (unit(rng) - 0.5) * 4.0;
    const double cy = 15.5 + (unit(rng) - 0.5) * 4.0;
    const double intensity = 0.6 + 0.4 * unit(rng);
    std::vector<std::array<double, 2>> poly(static_cast<std::size_t>(sides));
    for (int k = 0; k < sides; ++k) {
      const double a = angle + 2.0 * std::numbers::pi * k / sides;
      poly[static_cast<std::size_t>(k)] = {cx + radius * std::cos(a), cy + radius * squash * std::sin(a)};
    }
    auto inside = [&poly, sides](double x, double y) {
      for (int k = 0; k < sides; ++k) {
        const auto& p = poly[static_cast<std::size_t>(k)];
        const auto& q = poly[static_cast<std::size_t>((k + 1) % sides)];
        if ((q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]) < 0) return false;
      }
      return true;
    };
    Sample s;
    s.channels = 1;
    s.height = size;
    s.width = size;
    s.pixels.resize(size * size);
    s.label = label;
    s.meta = meta;
    for (Index y = 0; y < size; ++y) {
      for (Index x = 0; x < size; ++x) {
        int hits = 0;
        for (int sy = 0; sy < supersample; ++sy)
          for (int sx = 0; sx < supersample; ++sx)
            hits += inside(x + (sx + 0.5) / supersample, y + (sy + 0.5) / supersample) ? 1 : 0;
        const double v = intensity * hits / (supersample * supersample);
        s.pixels[static_cast<std::size_t>(y * size + x)] = static_cast<std::uint8_t>(std::lround(255.0 * v));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------

SplitMode parse_split_mode(const std::string& name) {
  if (name == "standard") return SplitMode::Standard;
  if (name == "novel-azimuth") return SplitMode::NovelAzimuth;
  if (name == "novel-elevation") return SplitMode::NovelElevation;
  throw ConfigError("unknown split '" + name + "' (standard, novel-azimuth, novel-elevation)");
}

std::string split_name(SplitMode mode) {
  switch (mode) {
    case SplitMode::Standard: return "standard";
    case SplitMode::NovelAzimuth: return "novel-azimuth";
    case SplitMode::NovelElevation: return "novel-elevation";
  }
  return "unknown";
}

bool is_training_viewpoint(SplitMode mode, const ViewpointMeta& meta) {
  switch (mode) {
    case SplitMode::Standard: return true;
    case SplitMode::NovelAzimuth: {
      const int a = meta.azimuth;
      return a == 30 || a == 32 || a == 34 || a == 0 || a == 2 || a == 4;
    }
    case SplitMode::NovelElevation: return meta.elevation >= 0 && meta.elevation <= 2;
  }
  return false;
}

SplitResult viewpoint_split(const std::vector<Sample>& train, const std::vector<Sample>& test, SplitMode mode) {
  SplitResult out;
  if (mode == SplitMode::Standard) {
    out.train = train;
    out.test_novel = test;
    return out;
  }
  auto require_meta = [](const Sample& s) {
    if (!s.meta) throw DataError(DataError::Kind::MissingMeta, "MissingMeta: sample has no viewpoint record");
    return *s.meta;
  };
  for (const Sample& s : train) {
    if (is_training_viewpoint(mode, require_meta(s))) out.train.push_back(s);
  }
  for (const Sample& s : test) {
    (is_training_viewpoint(mode, require_meta(s)) ? out.test_familiar : out.test_novel).push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------

NormStats compute_norm_stats(DatasetKind kind, const std::vector<Sample>& train) {
  if (train.empty()) throw DataError(DataError::Kind::DatasetMissing, "DatasetMissing: empty training split");
  const Index channels = train.front().channels;
  NormStats stats{std::vector<double>(static_cast<std::size_t>(channels), 0.0),
                  std::vector<double>(static_cast<std::size_t>(channels), 1.0)};
  if (kind == DatasetKind::Synthetic) return stats;
  for (Index c = 0; c < channels; ++c) {
    double sum = 0, sq = 0, count = 0;
    for (const Sample& s : train) {
      const Index plane = s.height * s.width;
      const std::uint8_t* p = s.pixels.data() + c * plane;
      for (Index k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        sum += v;
        sq += v * v;
      }
      count += static_cast<double>(plane);
    }
    const double mean = sum / count;
    stats.mean[static_cast<std::size_t>(c)] = mean;
    stats.stddev[static_cast<std::size_t>(c)] = std::max(std::sqrt(std::max(0.0, sq / count - mean * mean)), 1e-6);
  }
  return stats;
}

Tensor<float> resize_bilinear(const Tensor<float>& image, Index height, Index width) {
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == height && w == width) return image;
  Tensor<float> out(Shape{c, height, width});
  const double sy = static_cast<double>(h) / height, sx = static_cast<double>(w) / width;
  for (Index y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const Index y0 = static_cast<Index>(fy), y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (Index x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const Index x0 = static_cast<Index>(fx), x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (Index ch = 0; ch < c; ++ch) {
        const float* p = image.data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bottom = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        out[(ch * height + y) * width + x] = static_cast<float>(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

namespace {

/// Window [oy, oy + size) x [ox, ox + size) of an image zero-padded by `pad`.
Tensor<float> crop_padded(const Tensor<float>& image, Index pad, Index oy, Index ox, Index size, bool flip) {
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<float> out(Shape{c, size, size});
  for (Index ch = 0; ch < c; ++ch) {
    for (Index y = 0; y < size; ++y) {
      for (Index x = 0; x < size; ++x) {
        const Index sy = oy + y - pad;
        const Index sx = ox + (flip ? size - 1 - x : x) - pad;
        if (sy >= 0 && sy < h && sx >= 0 && sx < w) out[(ch * size + y) * size + x] = image[(ch * h + sy) * w + sx];
      }
    }
  }
  return out;
}

Index uniform_index(std::mt19937_64& rng, Index hi) {
  return std::uniform_int_distribution<Index>(0, hi)(rng);
}

}  // namespace

Tensor<float> preprocess(const Sample& sample, DatasetKind kind, Phase phase, const NormStats& stats,
                         std::mt19937_64& rng, const PreprocessOptions& options) {
  constexpr Index out_size = 32;
  const bool train = phase == Phase::Train;
  Tensor<float> img = sample.image();
  switch (kind) {
    case DatasetKind::SmallNorb: {
      img = resize_bilinear(img, 48, 48);
      const Index oy = train ? uniform_index(rng, 16) : 8;
      const Index ox = train ? uniform_index(rng, 16) : 8;
      img = crop_padded(img, 0, oy, ox, out_size, false);
      break;
    }
    case DatasetKind::Mnist:
    case DatasetKind::FashionMnist: {
      const Index pad = (out_size - sample.height) / 2;
      if (train && kind == DatasetKind::FashionMnist && options.augment_fashion) {
        img = crop_padded(img, pad + 4, uniform_index(rng, 8), uniform_index(rng, 8), out_size, false);
      } else {
        img = crop_padded(img, pad, 0, 0, out_size, false);
      }
      break;
    }
    case DatasetKind::Svhn:
      img = resize_bilinear(img, out_size, out_size);
      break;
    case DatasetKind::Cifar10:
      if (train) {
        const Index oy = uniform_index(rng, 8), ox = uniform_index(rng, 8);
        const bool flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
        img = crop_padded(img, 4, oy, ox, out_size, flip);
      }
      break;
    case DatasetKind::Synthetic:
      return img;
  }
  const Index c = img.dim(0), plane = img.dim(1) * img.dim(2);
  if (static_cast<Index>(stats.mean.size()) != c || static_cast<Index>(stats.stddev.size()) != c) {
    throw DataError(DataError::Kind::DimensionMismatch, "DimensionMismatch: normalization stats for " +
                                                            std::to_string(stats.mean.size()) + " channels, image has " +
                                                            std::to_string(c));
  }
  for (Index ch = 0; ch < c; ++ch) {
    const float m = static_cast<float>(stats.mean[static_cast<std::size_t>(ch)]);
    const float inv = static_cast<float>(1.0 / stats.stddev[static_cast<std::size_t>(ch)]);
    float* p = img.data() + ch * plane;
    for (Index k = 0; k < plane; ++k) p[k] = (p[k] - m) * inv;
  }
  return img;
}

}  // namespace qcaps
