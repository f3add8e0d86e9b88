#include "dq/sparsifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dq {

void SparsityConfig::validate() const {
  switch (mode) {
  case SparsityMode::toward_mean:
  case SparsityMode::zero_mask_baseline:
    if (fraction < 0.0 || fraction > 1.0)
      throw Error(ErrorCode::invalid_config, "fraction must be in [0, 1]");
    return;
  case SparsityMode::structured_mn:
    if (m < 1 || n < 1 || m > n)
      throw Error(ErrorCode::invalid_config, "structured mode needs 1 <= m <= n");
    return;
  }
  throw Error(ErrorCode::invalid_config, "unknown sparsity mode");
}

namespace {

double block_mean(std::span<const float> x) {
  double s = 0;
  for (float v : x)
    s += v;
  return s / static_cast<double>(x.size());
}

// indices of the k smallest keys, ties by lower index
std::vector<std::size_t> smallest_k(const std::vector<double> &key,
                                    std::size_t k) {
  std::vector<std::size_t> idx(key.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
  idx.resize(k);
  return idx;
}

SparsifyResult replace_selected(std::span<const float> x,
                                const std::vector<std::size_t> &selected,
                                double replacement) {
  SparsifyResult out;
  out.y.assign(x.begin(), x.end());
  out.pattern.kept.assign(x.size(), 1);
  out.pattern.replaced_value = replacement;
  const auto rep = static_cast<float>(replacement);
  for (std::size_t i : selected) {
    out.y[i] = rep;
    out.pattern.kept[i] = 0;
  }
  out.pattern.delta.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.pattern.delta[i] =
        static_cast<double>(out.y[i]) - static_cast<double>(x[i]);
  return out;
}

} // namespace

SparsifyResult sparsify_toward_mean(std::span<const float> x,
                                    double fraction) {
  const double mean = block_mean(x);
  std::vector<double> dev(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    dev[i] = std::abs(x[i] - mean);
  const auto k = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(x.size())));
  return replace_selected(x, smallest_k(dev, std::min(k, x.size())), mean);
}

SparsifyResult sparsify_zero_baseline(std::span<const float> x,
                                      double fraction) {
  std::vector<double> mag(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    mag[i] = std::abs(x[i]);
  const auto k = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(x.size())));
  return replace_selected(x, smallest_k(mag, std::min(k, x.size())), 0.0);
}

SparsifyResult sparsify_structured(std::span<const float> x, int m, int n) {
  std::vector<std::size_t> zeroed;
  const auto un = static_cast<std::size_t>(n);
  for (std::size_t g = 0; g < x.size(); g += un) {
    const std::size_t glen = std::min(un, x.size() - g);
    // ragged tail keeps ceil(m*g/n)
    const std::size_t keep =
        glen == un ? static_cast<std::size_t>(m)
                   : (static_cast<std::size_t>(m) * glen + un - 1) / un;
    std::vector<double> mag(glen);
    for (std::size_t j = 0; j < glen; ++j)
      mag[j] = std::abs(x[g + j]);
    for (std::size_t j : smallest_k(mag, glen - keep))
      zeroed.push_back(g + j);
  }
  return replace_selected(x, zeroed, 0.0);
}

SparsifyResult sparsify(std::span<const float> x, const SparsityConfig &cfg) {
  cfg.validate();
  switch (cfg.mode) {
  case SparsityMode::toward_mean:
    return sparsify_toward_mean(x, cfg.fraction);
  case SparsityMode::zero_mask_baseline:
    return sparsify_zero_baseline(x, cfg.fraction);
  case SparsityMode::structured_mn:
    return sparsify_structured(x, cfg.m, cfg.n);
  }
  throw Error(ErrorCode::invalid_config, "unknown sparsity mode");
}

TernaryResult ternarize(std::span<const float> y, double lambda) {
  if (y.empty())
    throw Error(ErrorCode::invalid_config, "ternarize: empty block");
  TernaryResult out;
  out.q.resize(y.size());
  double sum_qy = 0, sum_qq = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const int s = y[i] > 0.0f ? 1 : (y[i] < 0.0f ? -1 : 0);
    out.q[i] = static_cast<std::int8_t>(s);
    sum_qy += s * static_cast<double>(y[i]);
    sum_qq += s * s;
  }
  const double n = static_cast<double>(y.size());
  const double denom = sum_qq / n + lambda;
  if (denom == 0.0) {
    out.a = 0.0;
    out.degenerate = true;
  } else {
    out.a = (sum_qy / n) / denom;
  }
  return out;
}

double bits_per_element(const SparsityConfig &cfg, int bits) {
  cfg.validate();
  if (cfg.mode != SparsityMode::structured_mn)
    throw Error(ErrorCode::invalid_config,
                "bits_per_element requires structured mode");
  const double m = cfg.m, n = cfg.n;
  if (cfg.n == 4 && bits == 1 && cfg.m >= 1 && cfg.m <= 3)
    return m * 2.0 / n; // per-kept-index convention: 2 bits per kept value
  // positions as a combinatorial index plus bits per kept code
  double log2_binom = 0;
  for (int i = 0; i < cfg.m; ++i)
    log2_binom += std::log2(static_cast<double>(cfg.n - i)) -
                  std::log2(static_cast<double>(i + 1));
  return log2_binom / n + m * bits / n;
}

SparseBlockResult sparsify_then_quantize_block(std::span<const float> x,
                                               const SparsityConfig &scfg,
                                               const QuantConfig &qcfg) {
  SparsifyResult sp = sparsify(x, scfg);
  BlockResult qr = quantize_block(sp.y, qcfg);
  return {std::move(qr.block), qr.stats, std::move(sp.pattern)};
}

SparseQuantizedTensor sparsify_quantize_tensor(const Tensor &t,
                                               std::size_t axis,
                                               const SparsityConfig &scfg,
                                               const QuantConfig &qcfg) {
  scfg.validate();
  qcfg.validate();
  const AxisView view = AxisView::of(t.shape, axis);

  SparseQuantizedTensor out;
  out.scfg = scfg;
  QuantizedTensor &qt = out.qt;
  qt.shape = t.shape;
  qt.axis = axis;
  qt.cfg = qcfg;
  qt.part = partition(view.axis_len, qcfg.block_size);
  qt.num_vectors = view.num_vectors();

  std::vector<float> scratch;
  double se = 0, max_err = 0, kappa_sum = 0, kappa_max = 0;
  for (std::size_t v = 0; v < qt.num_vectors; ++v) {
    for (const Span &s : qt.part.blocks) {
      scratch.resize(s.len);
      for (std::size_t j = 0; j < s.len; ++j)
        scratch[j] = t.data[view.index(v, s.start + j)];
      SparseBlockResult br = sparsify_then_quantize_block(scratch, scfg, qcfg);
      for (std::size_t j = 0; j < s.len; ++j) {
        const double r = br.block.a * br.block.q[j] + br.block.b;
        const double e = r - scratch[j]; // against the original signal
        se += e * e;
        max_err = std::max(max_err, std::abs(e));
      }
      kappa_sum += br.stats.kappa;
      kappa_max = std::max(kappa_max, br.stats.kappa);
      qt.blocks.push_back(std::move(br.block));
      qt.stats.push_back(br.stats);
      out.patterns.push_back(std::move(br.pattern));
    }
  }

  const double numel = static_cast<double>(t.numel());
  const double nblocks = static_cast<double>(qt.blocks.size());
  qt.summary.mse = se / numel;
  qt.summary.max_abs_err = max_err;
  qt.summary.mean_kappa = kappa_sum / nblocks;
  qt.summary.max_kappa = kappa_max;
  qt.summary.effective_bits = qcfg.bits + nblocks * qcfg.coeff_bits() / numel;
  return out;
}

} // namespace dq
