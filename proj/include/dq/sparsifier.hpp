#pragma once

#include "dq/quantizer.hpp"
#include "dq/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dq {

enum class SparsityMode : std::uint8_t {
  toward_mean = 1,       // replace elements nearest the mean with the mean
  zero_mask_baseline = 2, // multiplicative mask: zero the smallest |x|
  structured_mn = 3,     // keep m largest |x| per group of n
};

struct SparsityConfig {
  SparsityMode mode = SparsityMode::toward_mean;
  double fraction = 0.0; // unstructured modes, in [0, 1]
  int m = 0;
  int n = 0; // structured mode, 1 <= m <= n
  void validate() const;
};

/// Which elements survived, what the rest became, and the perturbation
/// delta = H(x) - x. y = x + delta holds bit-exactly in every mode.
struct SparsityPattern {
  std::vector<std::uint8_t> kept; // 1 = untouched
  double replaced_value = 0;      // block mean for toward_mean, else 0
  std::vector<double> delta;
};

struct SparsifyResult {
  std::vector<float> y;
  SparsityPattern pattern;
};

/// Replace the floor(fraction*N) elements with smallest |x_i - mean|
/// by the mean. Significance is deviation from the mean, not magnitude,
/// so extreme sparsity degrades to the mean vector instead of zero.
/// Ties broken by lower index.
SparsifyResult sparsify_toward_mean(std::span<const float> x, double fraction);

/// Baseline multiplicative mask: zero the floor(fraction*N) elements of
/// smallest magnitude. Ties broken by lower index.
SparsifyResult sparsify_zero_baseline(std::span<const float> x,
                                      double fraction);

/// M:N structured sparsity: in each consecutive group of n, zero the
/// n - m elements of smallest magnitude (weights are near zero-mean, so
/// significance is |x|). A ragged tail group of g < n elements keeps
/// ceil(m*g/n). Ties broken by lower index.
SparsifyResult sparsify_structured(std::span<const float> x, int m, int n);

/// Dispatch on cfg.mode.
SparsifyResult sparsify(std::span<const float> x, const SparsityConfig &cfg);

struct TernaryResult {
  std::vector<std::int8_t> q; // codes in {-1, 0, 1}
  double a = 0;
  bool degenerate = false; // all-zero q with lambda = 0
};

/// Sign-quantize a sparsified block and solve the bias-free ridge
///   a = mean(q.y) / (mean(q^2) + lambda),
/// reconstruction r = a*q.
TernaryResult ternarize(std::span<const float> y, double lambda);

/// Storage accounting per weight element, excluding reconstruction
/// coefficients. For ternary codes (bits = 1 plus the zero bin) on n = 4
/// groups this follows the per-kept-index convention: 2 index bits per
/// kept element, i.e. 0.5 / 1.0 / 1.5 for 1:4 / 2:4 / 3:4. Other shapes
/// use combinatorial position coding plus one code bit per kept element:
/// log2(C(n, m))/n + m*bits/n.
double bits_per_element(const SparsityConfig &cfg, int bits);

struct SparseBlockResult {
  QuantizedBlock block;
  ReconstructionStats stats;
  SparsityPattern pattern;
};

/// Sparsify, then quantize the sparsified block (the quantization grid is
/// computed from the sparsified signal).
SparseBlockResult sparsify_then_quantize_block(std::span<const float> x,
                                               const SparsityConfig &scfg,
                                               const QuantConfig &qcfg);

/// Tensor pipeline: per block of the partition, sparsify then quantize.
/// summary.mse / max_abs_err measure end-to-end error against the
/// original tensor.
struct SparseQuantizedTensor {
  QuantizedTensor qt;
  SparsityConfig scfg;
  std::vector<SparsityPattern> patterns; // same layout as qt.blocks
};

SparseQuantizedTensor sparsify_quantize_tensor(const Tensor &t,
                                               std::size_t axis,
                                               const SparsityConfig &scfg,
                                               const QuantConfig &qcfg);

} // namespace dq
