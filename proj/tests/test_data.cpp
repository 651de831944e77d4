#include <fstream>
#include <functional>
#include <map>
#include <set>

#include "doctest.h"
#include "qcaps/data.hpp"
#include "qcaps/error.hpp"
#include "scratch_dir.hpp"

using namespace qcaps;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

IdxFile image_idx(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  IdxFile f{0x00000803, {n, rows, cols}, {}};
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) f.payload.push_back(static_cast<std::uint8_t>(i * 7));
  return f;
}

IdxFile label_idx(std::uint32_t n, std::uint32_t classes) {
  IdxFile f{0x00000801, {n}, {}};
  for (std::uint32_t i = 0; i < n; ++i) f.payload.push_back(static_cast<std::uint8_t>(i % classes));
  return f;
}

/// Writes a smallNORB triple of `n` samples with h x w stereo images.
void write_norb(const fs::path& dir, const std::string& prefix, std::int64_t n, std::int64_t h, std::int64_t w) {
  NorbMatrix dat{kNorbByteMagic, {n, 2, h, w}, {}, {}};
  for (std::int64_t i = 0; i < n * 2 * h * w; ++i) dat.bytes.push_back(static_cast<std::uint8_t>(i % 251));
  NorbMatrix cat{kNorbIntMagic, {n}, {}, {}};
  NorbMatrix info{kNorbIntMagic, {n, 4}, {}, {}};
  for (std::int64_t i = 0; i < n; ++i) {
    cat.ints.push_back(static_cast<std::int32_t>(i % 5));
    info.ints.insert(info.ints.end(), {static_cast<std::int32_t>(i % 10), static_cast<std::int32_t>(i % 9),
                                       static_cast<std::int32_t>(2 * (i % 18)), static_cast<std::int32_t>(i % 6)});
  }
  write_norb_matrix(dir / (prefix + "dat.mat"), dat);
  write_norb_matrix(dir / (prefix + "cat.mat"), cat);
  write_norb_matrix(dir / (prefix + "info.mat"), info);
}

DataError::Kind error_kind(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.kind();
  }
  FAIL("no DataError thrown");
  return DataError::Kind::DatasetMissing;
}

}  // namespace

TEST_CASE("IDX round trip and scaling") {
  const ScratchDir dir("idx");
  const IdxFile images = image_idx(10, 28, 28);
  write_idx(dir / "images", images);
  const std::vector<std::uint8_t> bytes = file_bytes(dir / "images");
  CHECK(bytes.size() == 16 + 7840);
  CHECK(bytes[2] == 0x08);
  CHECK(bytes[3] == 0x03);

  const IdxFile back = read_idx(dir / "images");
  CHECK(back.magic == images.magic);
  CHECK(back.dims == images.dims);
  CHECK(back.payload == images.payload);
  write_idx(dir / "again", back);
  CHECK(file_bytes(dir / "again") == bytes);

  const Tensor<float> t = load_idx(dir / "images");
  CHECK(t.shape() == Shape{10, 28, 28});
  CHECK(t[1] == doctest::Approx(7.0f / 255.0f));

  write_idx(dir / "labels", label_idx(10, 10));
  const Tensor<float> l = load_idx(dir / "labels");
  CHECK(l.shape() == Shape{10});
  CHECK(l[9] == 9.0f);
}

TEST_CASE("corrupted IDX headers") {
  const ScratchDir dir("idx_bad");
  std::vector<std::uint8_t> bytes;
  write_idx(dir / "ok", image_idx(4, 5, 5));
  bytes = file_bytes(dir / "ok");

  std::vector<std::uint8_t> bad = bytes;
  bad[2] = 0x0D;  // float element type
  write_bytes(dir / "float", bad);
  CHECK(error_kind([&] { read_idx(dir / "float"); }) == DataError::Kind::BadMagic);

  bad = bytes;
  bad[0] = 0x1E;
  write_bytes(dir / "junk", bad);
  CHECK(error_kind([&] { read_idx(dir / "junk"); }) == DataError::Kind::BadMagic);

  write_bytes(dir / "short", std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 10));
  CHECK(error_kind([&] { read_idx(dir / "short"); }) == DataError::Kind::TruncatedFile);

  write_bytes(dir / "header", std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 9));
  CHECK(error_kind([&] { read_idx(dir / "header"); }) == DataError::Kind::TruncatedFile);

  CHECK(error_kind([&] { read_idx(dir / "absent"); }) == DataError::Kind::DatasetMissing);
}

TEST_CASE("smallNORB matrices and samples") {
  const ScratchDir dir("norb");
  write_norb(dir.path(), "a-", 6, 8, 8);
  const NorbMatrix cat = read_norb_matrix(dir / "a-cat.mat");
  CHECK(cat.dims == std::vector<std::int64_t>{6});
  // One-dimensional matrices still store three extents.
  CHECK(file_bytes(dir / "a-cat.mat").size() == 8 + 12 + 6 * 4);

  const std::vector<Sample> s = load_smallnorb(dir / "a-dat.mat", dir / "a-cat.mat", dir / "a-info.mat");
  REQUIRE(s.size() == 6);
  CHECK(s[3].channels == 2);
  CHECK(s[3].height == 8);
  CHECK(s[3].label == 3);
  REQUIRE(s[3].meta.has_value());
  CHECK(s[3].meta->elevation == 3);
  CHECK(s[3].meta->azimuth == 6);
  CHECK(s[3].meta->lighting == 3);
  CHECK(s[1].pixels[0] == static_cast<std::uint8_t>((2 * 64) % 251));

  NorbMatrix round = read_norb_matrix(dir / "a-dat.mat");
  write_norb_matrix(dir / "copy.mat", round);
  CHECK(file_bytes(dir / "copy.mat") == file_bytes(dir / "a-dat.mat"));
}

TEST_CASE("corrupted smallNORB files") {
  const ScratchDir dir("norb_bad");
  write_norb(dir.path(), "a-", 4, 6, 6);
  const std::vector<std::uint8_t> dat = file_bytes(dir / "a-dat.mat");

  std::vector<std::uint8_t> bad = dat;
  bad[0] ^= 0xFF;
  write_bytes(dir / "a-dat.mat", bad);
  CHECK(error_kind([&] { load_smallnorb(dir / "a-dat.mat", dir / "a-cat.mat", dir / "a-info.mat"); }) ==
        DataError::Kind::BadMagic);

  write_bytes(dir / "a-dat.mat", std::vector<std::uint8_t>(dat.begin(), dat.end() - 1));
  CHECK(error_kind([&] { load_smallnorb(dir / "a-dat.mat", dir / "a-cat.mat", dir / "a-info.mat"); }) ==
        DataError::Kind::TruncatedFile);

  write_bytes(dir / "a-dat.mat", std::vector<std::uint8_t>(dat.begin(), dat.begin() + 12));
  CHECK(error_kind([&] { read_norb_matrix(dir / "a-dat.mat"); }) == DataError::Kind::TruncatedFile);

  write_bytes(dir / "a-dat.mat", dat);
  write_norb(dir.path(), "b-", 3, 6, 6);
  CHECK(error_kind([&] { load_smallnorb(dir / "a-dat.mat", dir / "b-cat.mat", dir / "a-info.mat"); }) ==
        DataError::Kind::DimensionMismatch);

  fs::remove(dir / "a-info.mat");
  CHECK(error_kind([&] { load_smallnorb(dir / "a-dat.mat", dir / "a-cat.mat", dir / "a-info.mat"); }) ==
        DataError::Kind::MissingCompanion);
}

TEST_CASE("dataset directory layouts") {
  const ScratchDir dir("layout");
  CHECK(error_kind([&] { load_dataset(DatasetKind::Mnist, dir.path()); }) == DataError::Kind::DatasetMissing);

  fs::create_directories(dir / "mnist");
  write_idx(dir / "mnist/train-images-idx3-ubyte", image_idx(20, 28, 28));
  write_idx(dir / "mnist/train-labels-idx1-ubyte", label_idx(20, 10));
  write_idx(dir / "mnist/t10k-images-idx3-ubyte", image_idx(10, 28, 28));
  write_idx(dir / "mnist/t10k-labels-idx1-ubyte", label_idx(10, 10));
  const Dataset mnist = load_dataset(DatasetKind::Mnist, dir.path());
  CHECK(mnist.train.size() == 20);
  CHECK(mnist.test.size() == 10);
  CHECK(mnist.classes == 10);

  write_idx(dir / "mnist/t10k-labels-idx1-ubyte", label_idx(9, 10));
  CHECK(error_kind([&] { load_dataset(DatasetKind::Mnist, dir.path()); }) == DataError::Kind::DimensionMismatch);

  fs::create_directories(dir / "svhn");
  std::vector<std::uint8_t> records;
  for (int r = 0; r < 3; ++r) {
    records.push_back(static_cast<std::uint8_t>(r));
    records.insert(records.end(), 3 * 32 * 32, static_cast<std::uint8_t>(r * 40));
  }
  write_bytes(dir / "svhn/train.bin", records);
  write_bytes(dir / "svhn/test.bin", records);
  const Dataset svhn = load_dataset(DatasetKind::Svhn, dir.path());
  CHECK(svhn.train.size() == 3);
  CHECK(svhn.train[2].label == 2);
  CHECK(svhn.train[2].channels == 3);
  records.pop_back();
  write_bytes(dir / "svhn/test.bin", records);
  CHECK(error_kind([&] { load_dataset(DatasetKind::Svhn, dir.path()); }) == DataError::Kind::TruncatedFile);

  fs::create_directories(dir / "smallnorb");
  write_norb(dir / "smallnorb", "smallnorb-5x46789x9x18x6x2x96x96-training-", 5, 96, 96);
  write_norb(dir / "smallnorb", "smallnorb-5x01235x9x18x6x2x96x96-testing-", 5, 96, 96);
  const Dataset norb = load_dataset(DatasetKind::SmallNorb, dir.path());
  std::set<std::int64_t> labels;
  for (const Sample& s : norb.train) {
    CHECK(s.channels == 2);
    CHECK(s.height == 96);
    CHECK(s.meta->azimuth % 2 == 0);
    labels.insert(s.label);
  }
  CHECK(labels.size() == 5);
}

TEST_CASE("synthetic dataset") {
  const std::vector<Sample> a = synthetic_dataset(300, 7), b = synthetic_dataset(300, 7);
  std::map<std::int64_t, int> counts;
  std::set<int> azimuths, elevations;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].pixels == b[i].pixels);
    CHECK(a[i].label == b[i].label);
    ++counts[a[i].label];
    azimuths.insert(a[i].meta->azimuth);
    elevations.insert(a[i].meta->elevation);
    CHECK(a[i].channels == 1);
    CHECK(a[i].height == 32);
  }
  for (const auto& [label, count] : counts) CHECK(std::abs(count - 100) <= 1);
  CHECK(azimuths.size() == 18);
  CHECK(*azimuths.rbegin() == 34);
  CHECK(synthetic_dataset(10, 8)[0].pixels != a[0].pixels);
}

TEST_CASE("novel-viewpoint splits keep a third of the viewpoint grid") {
  // 486 samples cover every (azimuth, elevation) pair three times.
  const std::vector<Sample> pool = synthetic_dataset(486, 1);
  for (SplitMode mode : {SplitMode::NovelAzimuth, SplitMode::NovelElevation}) {
    const SplitResult s = viewpoint_split(pool, pool, mode);
    std::set<std::pair<int, int>> train_views, novel_views, familiar_views;
    for (const Sample& x : s.train) train_views.insert({x.meta->azimuth, x.meta->elevation});
    for (const Sample& x : s.test_novel) novel_views.insert({x.meta->azimuth, x.meta->elevation});
    for (const Sample& x : s.test_familiar) familiar_views.insert({x.meta->azimuth, x.meta->elevation});
    CHECK(train_views.size() * 3 == 18 * 9);
    CHECK(s.train.size() * 3 == pool.size());
    CHECK(familiar_views == train_views);
    for (const auto& v : novel_views) CHECK(train_views.count(v) == 0);
    CHECK(train_views.size() + novel_views.size() == 18 * 9);
  }
  const SplitResult standard = viewpoint_split(pool, pool, SplitMode::Standard);
  CHECK(standard.train.size() == pool.size());
  CHECK(standard.test_familiar.empty());

  std::vector<Sample> bare = pool;
  bare[5].meta.reset();
  CHECK(error_kind([&] { viewpoint_split(bare, pool, SplitMode::NovelAzimuth); }) == DataError::Kind::MissingMeta);
  CHECK_NOTHROW(viewpoint_split(bare, pool, SplitMode::Standard));
}

TEST_CASE("preprocessing geometry") {
  std::mt19937_64 rng(3);
  Sample norb;
  norb.channels = 2;
  norb.height = norb.width = 96;
  norb.pixels.assign(2 * 96 * 96, 0);
  // A bright pixel block at the centre survives the resize and centre crop.
  for (int c = 0; c < 2; ++c)
    for (int y = 44; y < 52; ++y)
      for (int x = 44; x < 52; ++x) norb.pixels[static_cast<std::size_t>((c * 96 + y) * 96 + x)] = 255;
  const NormStats id{{0.0, 0.0}, {1.0, 1.0}};
  const Tensor<float> t = preprocess(norb, DatasetKind::SmallNorb, Phase::Test, id, rng);
  CHECK(t.shape() == Shape{2, 32, 32});
  // Source rows 44..51 map to 48x48 rows 22..25, i.e. crop rows 14..17.
  CHECK(t[(0 * 32 + 15) * 32 + 15] == doctest::Approx(1.0f));
  CHECK(t[(1 * 32 + 0) * 32 + 0] == 0.0f);
  std::mt19937_64 rng2(99);
  CHECK(preprocess(norb, DatasetKind::SmallNorb, Phase::Test, id, rng2) == t);
  CHECK(preprocess(norb, DatasetKind::SmallNorb, Phase::Train, id, rng).shape() == Shape{2, 32, 32});

  Sample digit;
  digit.channels = 1;
  digit.height = digit.width = 28;
  digit.pixels.assign(28 * 28, 255);
  const NormStats stats{{0.25}, {0.5}};
  const Tensor<float> m = preprocess(digit, DatasetKind::Mnist, Phase::Train, stats, rng);
  CHECK(m.shape() == Shape{1, 32, 32});
  CHECK(m[0] == doctest::Approx(-0.5f));
  CHECK(m[1 * 32 + 1] == doctest::Approx(-0.5f));
  CHECK(m[2 * 32 + 2] == doctest::Approx(1.5f));
  CHECK(m[29 * 32 + 29] == doctest::Approx(1.5f));
  CHECK(m[30 * 32 + 30] == doctest::Approx(-0.5f));

  Sample rgb;
  rgb.channels = 3;
  rgb.height = rgb.width = 32;
  rgb.pixels.assign(3 * 32 * 32, 128);
  const NormStats three{{0, 0, 0}, {1, 1, 1}};
  CHECK(preprocess(rgb, DatasetKind::Cifar10, Phase::Train, three, rng).shape() == Shape{3, 32, 32});
  CHECK(preprocess(rgb, DatasetKind::Cifar10, Phase::Test, three, rng) == rgb.image());
  CHECK_THROWS_AS(preprocess(rgb, DatasetKind::Cifar10, Phase::Test, id, rng), DataError);
}

TEST_CASE("bilinear resize keeps constants and averages pairs") {
  Tensor<float> flat(Shape{1, 6, 6}, 0.4f);
  const Tensor<float> r = resize_bilinear(flat, 3, 3);
  for (float v : r.storage()) CHECK(v == doctest::Approx(0.4f));
  Tensor<float> ramp(Shape{1, 1, 4}, std::vector<float>{0, 1, 2, 3});
  const Tensor<float> half = resize_bilinear(ramp, 1, 2);
  CHECK(half[0] == doctest::Approx(0.5f));
  CHECK(half[1] == doctest::Approx(2.5f));
}

TEST_CASE("normalization statistics and subsets") {
  std::vector<Sample> s(2);
  for (int i = 0; i < 2; ++i) {
    s[static_cast<std::size_t>(i)].channels = 1;
    s[static_cast<std::size_t>(i)].height = s[static_cast<std::size_t>(i)].width = 2;
    s[static_cast<std::size_t>(i)].pixels.assign(4, static_cast<std::uint8_t>(i * 255));
  }
  const NormStats st = compute_norm_stats(DatasetKind::Mnist, s);
  CHECK(st.mean[0] == doctest::Approx(0.5));
  CHECK(st.stddev[0] == doctest::Approx(0.5));
  const NormStats syn = compute_norm_stats(DatasetKind::Synthetic, s);
  CHECK(syn.mean[0] == 0.0);
  CHECK(syn.stddev[0] == 1.0);

  const std::vector<Sample> pool = synthetic_dataset(50, 2);
  const std::vector<Sample> a = subset(pool, 20, 5), b = subset(pool, 20, 5);
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) CHECK(a[i].meta->instance == b[i].meta->instance);
  CHECK(subset(pool, 0, 5).size() == 50);
}
