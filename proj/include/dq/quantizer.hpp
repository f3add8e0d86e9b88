#pragma once

#include "dq/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace dq {

enum class Rounding : std::uint8_t {
  half_to_even = 0,
  half_away_from_zero = 1,
};

enum class CoeffPrecision : std::uint8_t {
  full = 0,           // a, b kept at working precision, stored as binary32
  e5m2_simulated = 1, // a, b rounded to the nearest e5m2 value
};

struct QuantConfig {
  int bits = 8;                  // code width, 1..8
  std::size_t block_size = 128;  // sub-channel block length B
  double lambda = 0.01;          // ridge regularizer
  double epsilon = 1e-6;         // range guard in the forward scale
  Rounding rounding = Rounding::half_to_even;
  CoeffPrecision coeff_precision = CoeffPrecision::full;

  /// Largest code value, 2^bits - 1.
  int max_code() const noexcept { return (1 << bits) - 1; }
  /// Bits spent on (a, b) per block under this coefficient precision.
  int coeff_bits() const noexcept {
    return coeff_precision == CoeffPrecision::full ? 64 : 16;
  }
  void validate() const;
};

/// Per-block moments and derived quantities of one reconstruction.
/// kappa = 1/(Var_q + lambda) bounds how strongly a perturbation of the
/// moments can move the scale a. In the degenerate 0/0 case (lambda = 0
/// and Var_q = 0) the solve falls back to a = 0, b = x_mean and kappa is
/// reported as 0 so no consumer ever sees a division by zero.
struct ReconstructionStats {
  double x_mean = 0;
  double q_mean = 0;
  double var_q = 0;
  double cov_xq = 0;
  double kappa = 0;
  double mse = 0;
  double max_abs_delta = 0;
  bool degenerate = false;
};

/// Integer codes plus the reconstruction coefficients of one block.
struct QuantizedBlock {
  std::vector<std::uint8_t> q; // codes in [0, 2^bits - 1]
  double a = 0;
  double b = 0;
  std::size_t n = 0; // block length, == q.size()
};

/// Mean of the stored codes; the exact value of q_mean used by the
/// solve, so the centered-form coefficients can be reconstructed
/// bit-identically (e5m2 storage keeps a and the block mean, with
/// b = mean - a * q_mean derived at working precision).
inline double codes_mean(const QuantizedBlock &blk) {
  double s = 0;
  for (auto c : blk.q)
    s += c;
  return s * (1.0 / static_cast<double>(blk.q.size()));
}

struct AffineImage {
  std::vector<double> scaled;
  double x_min = 0;
  double x_max = 0;
};

/// Min-max scale to [0, 2^bits - 1):
///   f(x) = (x - x_min) / (x_max - x_min + eps) * (2^bits - 1)
/// No clipping is involved; eps keeps the division finite on constant
/// blocks.
AffineImage affine_forward(std::span<const float> x, int bits, double epsilon);

struct PerturbResult {
  std::vector<int> q;
  std::vector<double> delta; // q - scaled, each in [-0.5, 0.5]
};

/// Round to the nearest integer and report the rounding residual delta.
/// delta is the injected perturbation; it is never clipped.
PerturbResult inject_perturbation(std::span<const double> scaled,
                                  Rounding rounding);

/// a = cov_xq / (var_q + lambda); the one-line core of the ridge solve,
/// exposed separately so sensitivity in cov can be probed directly.
double ridge_scale(double cov_xq, double var_q, double lambda);

struct RidgeResult {
  double a = 0;
  double b = 0;
  ReconstructionStats stats;
};

/// Closed-form solution of
///   min_{a,b} 1/(2N) ||a q + b - x||^2 + lambda/2 a^2
/// via a = Cov_xq/(Var_q + lambda), b = x_mean - a q_mean.
/// Degenerate inputs (lambda = 0, Var_q = 0) return a = 0, b = x_mean
/// with stats.degenerate set; q constant implies Cov_xq = 0, so this is
/// the continuous extension of the lambda -> inf backbone.
RidgeResult ridge_solve(std::span<const double> x, std::span<const double> q,
                        double lambda);

/// r = a q + b.
std::vector<double> reconstruct(std::span<const double> q, double a, double b);
std::vector<double> reconstruct(const QuantizedBlock &blk);

struct BlockResult {
  QuantizedBlock block;
  ReconstructionStats stats;
};

/// Full pipeline on one block: affine forward, perturbation injection,
/// ridge solve, reconstruction stats. Under e5m2_simulated the stored
/// coefficients are the centered-form pair (scale a, block mean), each
/// rounded to the e5m2 grid; b is derived from them at working
/// precision.
BlockResult quantize_block(std::span<const float> x, const QuantConfig &cfg);

/// Step size of the plain inverse-scaling dequantizer,
/// (x_max - x_min) / 2^bits: the image of the worst-case rounding
/// perturbation of 0.5 back in signal units. Doubles per bit removed.
double inverse_scale_step(double x_min, double x_max, int bits);

// e5m2 simulated storage: 1 sign, 5 exponent, 2 mantissa bits.
// round_to_e5m2 rounds half-to-even on the e5m2 grid and clamps overflow
// to +/-57344 (the largest finite value).
double round_to_e5m2(double v);
std::uint8_t e5m2_encode(double v);
double e5m2_decode(std::uint8_t bits);

struct QuantSummary {
  double mse = 0;          // mean squared reconstruction error
  double max_abs_err = 0;  // max |r - x|
  double mean_kappa = 0;
  double max_kappa = 0;
  double effective_bits = 0; // code bits + amortized coefficient bits
};

/// All blocks of a tensor quantized independently along one axis.
/// Blocks are stored vector-major: block (v, j) of vector v at index
/// v * part.blocks.size() + j.
struct QuantizedTensor {
  std::vector<std::size_t> shape;
  std::size_t axis = 0;
  QuantConfig cfg;
  BlockPartition part;
  std::size_t num_vectors = 0;
  std::vector<QuantizedBlock> blocks;
  std::vector<ReconstructionStats> stats;
  QuantSummary summary;

  const QuantizedBlock &block(std::size_t vec, std::size_t blk) const {
    return blocks[vec * part.blocks.size() + blk];
  }
};

/// Quantize every vector along `axis`, each split per BlockPartition.
QuantizedTensor quantize_tensor(const Tensor &t, std::size_t axis,
                                const QuantConfig &cfg);

/// Reassemble the reconstructed tensor from its quantized blocks.
Tensor dequantize_tensor(const QuantizedTensor &qt);

/// Strided view of a tensor as a family of vectors along one axis,
/// shared by the tensor-level pipelines. Vector v, position j lives at
/// flat index view.index(v, j).
struct AxisView {
  std::size_t axis_len = 0;
  std::size_t inner = 0;
  std::size_t outer = 0;

  static AxisView of(const std::vector<std::size_t> &shape, std::size_t axis);
  std::size_t num_vectors() const noexcept { return outer * inner; }
  std::size_t index(std::size_t vec, std::size_t j) const noexcept {
    std::size_t o = vec / inner, i = vec % inner;
    return (o * axis_len + j) * inner + i;
  }
};

} // namespace dq
