#pragma once

// Checkpoint container, little-endian throughout:
//   "QCN1" | u32 version | u64 step
//   u32 n_params    then n_params array records
//   u32 n_optimizer then n_optimizer array records
//   u32 channels | f64 mean[channels] | f64 stddev[channels]
//   u32 echo_len | echo bytes (the effective config as key = value lines)
// Array record: u32 name_len | name | u8 dtype (0 float32, 1 float64) |
//   u32 ndim | u64 extents[ndim] | payload.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qcaps/autodiff.hpp"
#include "qcaps/data.hpp"

namespace qcaps {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ArrayRecord {
  std::string name;
  std::uint8_t dtype = 0;
  Shape shape;
  std::vector<std::uint8_t> payload;  // little-endian element bytes

  template <typename Scalar>
  static ArrayRecord from_tensor(const std::string& name, const Tensor<Scalar>& t);
  /// Throws CheckpointMismatch when the stored dtype is not Scalar's.
  template <typename Scalar>
  Tensor<Scalar> to_tensor() const;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t step = 0;
  std::vector<ArrayRecord> params;
  std::vector<ArrayRecord> optimizer;
  NormStats norm;
  std::string config_echo;

  const ArrayRecord* find_optimizer(const std::string& name) const;
};

/// Writes to a sibling temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws DataError{BadMagic / TruncatedFile} for malformed files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Every parameter and buffer of `store`, in store order.
template <typename Scalar>
std::vector<ArrayRecord> capture_parameters(const ParameterStore<Scalar>& store);

/// Copies records into `store`. Throws CheckpointMismatch unless the name set,
/// shapes and dtypes match exactly.
template <typename Scalar>
void restore_parameters(ParameterStore<Scalar>& store, const std::vector<ArrayRecord>& records);

}  // namespace qcaps
