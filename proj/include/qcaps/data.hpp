#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qcaps/tensor.hpp"

namespace qcaps {

/// smallNORB-style viewpoint record. Azimuth codes are even in [0, 34]
/// (code * 10 degrees); elevation index e in [0, 8] is 30 + 5e degrees.
struct ViewpointMeta {
  int category = -1;
  int instance = -1;
  int elevation = 0;
  int azimuth = 0;
  int lighting = 0;
};

/// Image bytes [channels, height, width]; pixel value = byte / 255.
struct Sample {
  Index channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
  std::int64_t label = 0;
  std::optional<ViewpointMeta> meta;

  Tensor<float> image() const;
};

// ---------------------------------------------------------------------------
// IDX (big-endian): 0x00000803 images [n, rows, cols], 0x00000801 labels [n].

struct IdxFile {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

/// Throws DataError{BadMagic} for anything but unsigned-byte IDX and
/// DataError{TruncatedFile} when the payload is short.
IdxFile read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxFile& file);

/// Images scaled to [0, 1]; label files keep their integer values.
Tensor<float> load_idx(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// smallNORB binary matrices (little-endian): magic, ndim, max(ndim, 3) extents.

inline constexpr std::uint32_t kNorbByteMagic = 0x1E3D4C55;
inline constexpr std::uint32_t kNorbIntMagic = 0x1E3D4C54;

struct NorbMatrix {
  std::uint32_t magic = 0;
  std::vector<std::int64_t> dims;
  std::vector<std::uint8_t> bytes;   // byte matrices
  std::vector<std::int32_t> ints;    // integer matrices
};

NorbMatrix read_norb_matrix(const std::filesystem::path& path);
void write_norb_matrix(const std::filesystem::path& path, const NorbMatrix& matrix);

/// Pairs the stereo images into 2-channel samples and attaches the
/// (instance, elevation, azimuth, lighting) rows. Throws MissingCompanion,
/// BadMagic, TruncatedFile or DimensionMismatch.
std::vector<Sample> load_smallnorb(const std::filesystem::path& dat, const std::filesystem::path& cat,
                                   const std::filesystem::path& info);

// ---------------------------------------------------------------------------

enum class DatasetKind { SmallNorb, Mnist, FashionMnist, Svhn, Cifar10, Synthetic };

DatasetKind parse_dataset_kind(const std::string& name);
std::string dataset_name(DatasetKind kind);

struct Dataset {
  DatasetKind kind = DatasetKind::Synthetic;
  Index classes = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct DatasetOptions {
  /// Sample counts for the synthetic generator.
  Index synthetic_train = 600;
  Index synthetic_test = 300;
  std::uint64_t seed = 0;
};

/// Reads <data_dir>/<dataset>/... as documented in the README; synthetic data
/// is generated. Throws DataError{DatasetMissing} when files are absent.
Dataset load_dataset(DatasetKind kind, const std::filesystem::path& data_dir, const DatasetOptions& options = {});

/// Deterministic subset of `count` samples (all when count <= 0 or >= size).
std::vector<Sample> subset(const std::vector<Sample>& samples, Index count, std::uint64_t seed);

/// Rotated filled polygons (triangle, square, pentagon), 1x32x32, label i % 3,
/// viewpoint grid over 18 azimuth codes and 9 elevations.
std::vector<Sample> synthetic_dataset(Index n, std::uint64_t seed);

// ---------------------------------------------------------------------------

enum class SplitMode { Standard, NovelAzimuth, NovelElevation };

SplitMode parse_split_mode(const std::string& name);
std::string split_name(SplitMode mode);

/// Azimuth codes 30, 32, 34, 0, 2, 4 (300..40 degrees); elevation indices 0..2.
bool is_training_viewpoint(SplitMode mode, const ViewpointMeta& meta);

struct SplitResult {
  std::vector<Sample> train;
  /// Test samples at held-out viewpoints (all test samples in standard mode).
  std::vector<Sample> test_novel;
  /// Test samples at training viewpoints (empty in standard mode).
  std::vector<Sample> test_familiar;
};

/// Throws DataError{MissingMeta} when a novel mode meets a sample without meta.
SplitResult viewpoint_split(const std::vector<Sample>& train, const std::vector<Sample>& test, SplitMode mode);

// ---------------------------------------------------------------------------

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Per-channel statistics of the raw [0, 1] training pixels; identity for synthetic data.
NormStats compute_norm_stats(DatasetKind kind, const std::vector<Sample>& train);

enum class Phase { Train, Test };

struct PreprocessOptions {
  bool augment_fashion = false;
};

/// Geometry in raw pixel space, then per-channel standardization; output [C, 32, 32].
Tensor<float> preprocess(const Sample& sample, DatasetKind kind, Phase phase, const NormStats& stats,
                         std::mt19937_64& rng, const PreprocessOptions& options = {});

/// Bilinear resize with half-pixel centres; image [C, H, W].
Tensor<float> resize_bilinear(const Tensor<float>& image, Index height, Index width);

}  // namespace qcaps
