#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dq {

enum class ErrorCode {
  io,
  malformed_header,
  length_mismatch,
  non_finite,
  shape_mismatch,
  invalid_config,
  partition_mismatch,
};

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string &what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

/// Dense row-major float tensor. A rank-0 shape denotes a scalar (one
/// element). Immutable by convention once constructed; nothing in the
/// library mutates a tensor it did not create.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape_);
  Tensor(std::vector<std::size_t> shape_, std::vector<float> data_);

  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t numel() const noexcept {
    std::size_t n = 1;
    for (auto d : shape)
      n *= d;
    return n;
  }

  // 2-d convenience accessors
  float &at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  float at(std::size_t r, std::size_t c) const {
    return data[r * shape[1] + c];
  }
};

struct Span {
  std::size_t start = 0;
  std::size_t len = 0;
  bool operator==(const Span &) const = default;
};

/// Contiguous cover of [0, axis_len) by blocks of size `block_size`,
/// with a possibly ragged tail. No padding: a padded tail would distort
/// per-block statistics.
struct BlockPartition {
  std::size_t axis_len = 0;
  std::size_t block_size = 0;
  std::vector<Span> blocks;
};

BlockPartition partition(std::size_t axis_len, std::size_t block_size);

/// Tensor container I/O. Format: magic "DQT1", u32 rank, rank x u64 dims,
/// then raw IEEE-754 binary32 payload, everything little-endian.
/// load_tensor rejects non-finite elements; every downstream formula
/// divides by data-dependent quantities, so garbage is stopped at the
/// boundary.
Tensor load_tensor(const std::string &path);
void save_tensor(const Tensor &t, const std::string &path);

} // namespace dq
