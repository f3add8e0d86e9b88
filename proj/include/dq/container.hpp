#pragma once

#include "dq/quantizer.hpp"
#include "dq/sparsifier.hpp"

#include <optional>
#include <string>

namespace dq {

/// Quantized-tensor container, magic "DQZ1", little-endian throughout:
///   u32 rank, u64 dims[rank], u32 axis,
///   u32 bits, u64 block_size, f64 lambda, f64 epsilon,
///   u8 rounding, u8 coeff_precision, u8 sparsity_mode (0 = none),
///   sparsity params (f64 fraction | u32 m, u32 n),
///   u64 num_vectors, u64 blocks_per_vector,
///   block table (u64 start, u64 len per partition span),
///   packed codes per block (LSB-first at code_width(bits), byte-aligned
///   per block), per-block coefficients (f32 a, f32 b, or one e5m2 byte
///   each), then per-block sparsity patterns when present: a kept bitmask
///   for unstructured modes, packed kept indices per group for M:N.
///
/// Per-block stats are not stored; a container read back carries codes,
/// coefficients and patterns (kept masks only), which is everything
/// dequantize_tensor needs.
struct QuantContainer {
  QuantizedTensor qt;
  std::optional<SparsityConfig> sparsity;
  std::vector<SparsityPattern> patterns;
};

void write_container(const QuantizedTensor &qt, const std::string &path);
void write_container(const SparseQuantizedTensor &sq, const std::string &path);
QuantContainer read_container(const std::string &path);

} // namespace dq
