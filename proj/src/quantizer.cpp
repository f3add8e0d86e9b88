#include "dq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dq {

void QuantConfig::validate() const {
  if (bits < 1 || bits > 8)
    throw Error(ErrorCode::invalid_config, "bits must be in [1, 8]");
  if (block_size < 1)
    throw Error(ErrorCode::invalid_config, "block_size must be positive");
  if (lambda < 0)
    throw Error(ErrorCode::invalid_config, "lambda must be non-negative");
  if (!(epsilon > 0))
    throw Error(ErrorCode::invalid_config, "epsilon must be positive");
}

AffineImage affine_forward(std::span<const float> x, int bits,
                           double epsilon) {
  if (x.empty())
    throw Error(ErrorCode::invalid_config, "affine_forward: empty block");
  AffineImage out;
  double lo = x[0], hi = x[0];
  for (float v : x) {
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  out.x_min = lo;
  out.x_max = hi;
  const double gain = ((1 << bits) - 1) / (hi - lo + epsilon);
  out.scaled.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.scaled[i] = (x[i] - lo) * gain;
  return out;
}

namespace {

inline double round_half_even(double v) {
  // remainder(v, 1) is v minus the nearest integer, ties to even
  return v - std::remainder(v, 1.0);
}

inline double apply_rounding(double v, Rounding r) {
  return r == Rounding::half_to_even ? round_half_even(v) : std::round(v);
}

} // namespace

PerturbResult inject_perturbation(std::span<const double> scaled,
                                  Rounding rounding) {
  PerturbResult out;
  out.q.resize(scaled.size());
  out.delta.resize(scaled.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    double r = apply_rounding(scaled[i], rounding);
    out.q[i] = static_cast<int>(r);
    out.delta[i] = r - scaled[i];
  }
  return out;
}

double ridge_scale(double cov_xq, double var_q, double lambda) {
  return cov_xq / (var_q + lambda);
}

RidgeResult ridge_solve(std::span<const double> x, std::span<const double> q,
                        double lambda) {
  if (x.size() != q.size() || x.empty())
    throw Error(ErrorCode::shape_mismatch,
                "ridge_solve: x and q must be non-empty and equally sized");
  const std::size_t n = x.size();
  const double inv_n = 1.0 / static_cast<double>(n);

  double sx = 0, sq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += x[i];
    sq += q[i];
  }
  const double x_mean = sx * inv_n;
  const double q_mean = sq * inv_n;

  // centered second pass: exact zeros for constant blocks
  double var_q = 0, cov_xq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dq_ = q[i] - q_mean;
    var_q += dq_ * dq_;
    cov_xq += (x[i] - x_mean) * dq_;
  }
  var_q *= inv_n;
  cov_xq *= inv_n;

  RidgeResult out;
  out.stats.x_mean = x_mean;
  out.stats.q_mean = q_mean;
  out.stats.var_q = var_q;
  out.stats.cov_xq = cov_xq;

  if (var_q + lambda == 0.0) {
    // 0/0: q is constant, fall back to the backbone
    out.a = 0.0;
    out.b = x_mean;
    out.stats.degenerate = true;
    out.stats.kappa = 0.0;
  } else {
    out.a = ridge_scale(cov_xq, var_q, lambda);
    out.b = x_mean - out.a * q_mean;
    out.stats.kappa = 1.0 / (var_q + lambda);
  }

  double se = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = out.a * q[i] + out.b - x[i];
    se += e * e;
  }
  out.stats.mse = se * inv_n;
  return out;
}

std::vector<double> reconstruct(std::span<const double> q, double a,
                                double b) {
  std::vector<double> r(q.size());
  for (std::size_t i = 0; i < q.size(); ++i)
    r[i] = a * q[i] + b;
  return r;
}

std::vector<double> reconstruct(const QuantizedBlock &blk) {
  std::vector<double> r(blk.q.size());
  for (std::size_t i = 0; i < blk.q.size(); ++i)
    r[i] = blk.a * blk.q[i] + blk.b;
  return r;
}

BlockResult quantize_block(std::span<const float> x, const QuantConfig &cfg) {
  cfg.validate();
  AffineImage img = affine_forward(x, cfg.bits, cfg.epsilon);
  PerturbResult pert = inject_perturbation(img.scaled, cfg.rounding);

  std::vector<double> xd(x.begin(), x.end());
  std::vector<double> qd(pert.q.begin(), pert.q.end());
  RidgeResult ridge = ridge_solve(xd, qd, cfg.lambda);

  BlockResult out;
  out.stats = ridge.stats;
  out.block.n = x.size();
  out.block.q.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.block.q[i] = static_cast<std::uint8_t>(pert.q[i]);

  out.block.a = ridge.a;
  out.block.b = ridge.b;
  if (cfg.coeff_precision == CoeffPrecision::e5m2_simulated) {
    // round the centered-form coefficients (scale and block mean); the
    // uncentered bias b is roughly -a*q_mean, far larger than the
    // reconstruction itself, and rounding it directly would drown the
    // signal in coefficient noise
    out.block.a = round_to_e5m2(ridge.a);
    const double mean = round_to_e5m2(ridge.stats.x_mean);
    out.block.b = mean - out.block.a * ridge.stats.q_mean;
  }

  double se = 0;
  double max_delta = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = out.block.a * qd[i] + out.block.b - xd[i];
    se += e * e;
    max_delta = std::max(max_delta, std::abs(pert.delta[i]));
  }
  out.stats.mse = se / static_cast<double>(x.size());
  out.stats.max_abs_delta = max_delta;
  return out;
}

double inverse_scale_step(double x_min, double x_max, int bits) {
  return (x_max - x_min) / static_cast<double>(1 << bits);
}

namespace {

constexpr double kE5M2Max = 57344.0; // 1.75 * 2^15
constexpr double kE5M2MinSubnormal = 0x1p-16;

} // namespace

double round_to_e5m2(double v) {
  if (std::isnan(v))
    return v;
  if (v == 0.0)
    return v;
  const double av = std::abs(v);
  if (av >= kE5M2Max)
    return std::copysign(kE5M2Max, v);

  int bin = 0;
  std::frexp(av, &bin); // av = f * 2^bin, f in [0.5, 1)
  const int exp = bin - 1;
  // normals carry 2 mantissa bits; below 2^-14 the grid is the fixed
  // subnormal spacing 2^-16
  const double quantum =
      exp < -14 ? kE5M2MinSubnormal : std::ldexp(1.0, exp - 2);
  const double rounded =
      (av / quantum - std::remainder(av / quantum, 1.0)) * quantum;
  return std::copysign(rounded, v);
}

std::uint8_t e5m2_encode(double v) {
  const double r = round_to_e5m2(v);
  const std::uint8_t sign = std::signbit(r) ? 0x80 : 0x00;
  const double av = std::abs(r);
  if (av == 0.0)
    return sign;
  if (av < 0x1p-14) { // subnormal: value = mant * 2^-16
    const auto mant = static_cast<std::uint8_t>(av / kE5M2MinSubnormal);
    return sign | mant;
  }
  int bin = 0;
  std::frexp(av, &bin);
  const int exp = bin - 1;
  const auto mant = static_cast<std::uint8_t>(av / std::ldexp(1.0, exp) * 4.0 - 4.0);
  const auto expf = static_cast<std::uint8_t>(exp + 15);
  return sign | static_cast<std::uint8_t>(expf << 2) | mant;
}

double e5m2_decode(std::uint8_t bits) {
  const double sign = (bits & 0x80) ? -1.0 : 1.0;
  const int expf = (bits >> 2) & 0x1f;
  const int mant = bits & 0x3;
  if (expf == 0)
    return sign * mant * kE5M2MinSubnormal;
  if (expf == 31)
    return sign * std::numeric_limits<double>::infinity(); // never produced here
  return sign * std::ldexp(1.0 + mant / 4.0, expf - 15);
}

AxisView AxisView::of(const std::vector<std::size_t> &shape,
                      std::size_t axis) {
  if (axis >= shape.size())
    throw Error(ErrorCode::invalid_config, "axis out of range");
  AxisView v;
  v.axis_len = shape[axis];
  v.inner = 1;
  for (std::size_t k = axis + 1; k < shape.size(); ++k)
    v.inner *= shape[k];
  v.outer = 1;
  for (std::size_t k = 0; k < axis; ++k)
    v.outer *= shape[k];
  return v;
}

QuantizedTensor quantize_tensor(const Tensor &t, std::size_t axis,
                                const QuantConfig &cfg) {
  cfg.validate();
  const AxisView view = AxisView::of(t.shape, axis);

  QuantizedTensor qt;
  qt.shape = t.shape;
  qt.axis = axis;
  qt.cfg = cfg;
  qt.part = partition(view.axis_len, cfg.block_size);
  qt.num_vectors = view.num_vectors();
  qt.blocks.reserve(qt.num_vectors * qt.part.blocks.size());
  qt.stats.reserve(qt.blocks.capacity());

  std::vector<float> scratch;
  double se = 0, max_err = 0, kappa_sum = 0, kappa_max = 0;
  for (std::size_t v = 0; v < qt.num_vectors; ++v) {
    for (const Span &s : qt.part.blocks) {
      scratch.resize(s.len);
      for (std::size_t j = 0; j < s.len; ++j)
        scratch[j] = t.data[view.index(v, s.start + j)];
      BlockResult br = quantize_block(scratch, cfg);
      for (std::size_t j = 0; j < s.len; ++j) {
        const double r = br.block.a * br.block.q[j] + br.block.b;
        const double e = r - scratch[j];
        se += e * e;
        max_err = std::max(max_err, std::abs(e));
      }
      kappa_sum += br.stats.kappa;
      kappa_max = std::max(kappa_max, br.stats.kappa);
      qt.blocks.push_back(std::move(br.block));
      qt.stats.push_back(br.stats);
    }
  }

  const double numel = static_cast<double>(t.numel());
  const double nblocks = static_cast<double>(qt.blocks.size());
  qt.summary.mse = se / numel;
  qt.summary.max_abs_err = max_err;
  qt.summary.mean_kappa = kappa_sum / nblocks;
  qt.summary.max_kappa = kappa_max;
  qt.summary.effective_bits =
      cfg.bits + nblocks * cfg.coeff_bits() / numel;
  return qt;
}

Tensor dequantize_tensor(const QuantizedTensor &qt) {
  const AxisView view = AxisView::of(qt.shape, qt.axis);
  Tensor out(qt.shape);
  for (std::size_t v = 0; v < qt.num_vectors; ++v) {
    for (std::size_t j = 0; j < qt.part.blocks.size(); ++j) {
      const Span &s = qt.part.blocks[j];
      const QuantizedBlock &blk = qt.block(v, j);
      for (std::size_t k = 0; k < s.len; ++k)
        out.data[view.index(v, s.start + k)] =
            static_cast<float>(blk.a * blk.q[k] + blk.b);
    }
  }
  return out;
}

} // namespace dq
