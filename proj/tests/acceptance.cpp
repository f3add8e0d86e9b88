// Acceptance suite: one numbered criterion per test case, one printed
// pass/fail line each. Run via ctest or directly.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dq/qlinalg.hpp"
#include "dq/quantizer.hpp"
#include "dq/rng.hpp"
#include "dq/sparsifier.hpp"
#include "dq/tensor.hpp"
#include "dq/train.hpp"

#include "helpers.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

using namespace dq;

namespace {

struct Criterion {
  int id;
  const char *name;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  bool ok = true;

  void expect(bool cond) { ok = ok && cond; }
  ~Criterion() {
    const double ms =
        std::chrono::duration<double, std::milli>(
            std::chrono::steady_clock::now() - t0)
            .count();
    std::printf("[%s] criterion %2d: %s (%.0f ms)\n", ok ? "PASS" : "FAIL", id,
                name, ms);
    std::fflush(stdout);
  }
};

Tensor gaussian_tensor(Rng &rng, std::vector<std::size_t> shape,
                       double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto &v : t.data)
    v = static_cast<float>(rng.gaussian() * scale);
  return t;
}

double rel_frobenius(const Tensor &a, const Tensor &b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    num += d * d;
    den += static_cast<double>(b.data[i]) * b.data[i];
  }
  return std::sqrt(num) / std::sqrt(den);
}

} // namespace

TEST_CASE("criterion 1: bounded perturbation") {
  Criterion c{1, "bounded perturbation: max|delta| <= 0.5 + 1e-7"};
  Rng rng(1001);
  for (int it = 0; it < 10000; ++it) {
    QuantConfig cfg;
    cfg.bits = 1 + static_cast<int>(rng.below(8));
    const std::size_t n = 1 + rng.below(512);
    auto x = gen::block(rng, n, gen::dist_cycle(it), rng.uniform(0.1, 10.0));
    BlockResult res = quantize_block(x, cfg);
    c.expect(res.stats.max_abs_delta <= 0.5 + 1e-7);
  }
  CHECK(c.ok);
}

TEST_CASE("criterion 2: identity property at lambda 0") {
  Criterion c{2, "grid-aligned inputs reconstruct exactly at lambda 0"};
  Rng rng(1002);
  for (int it = 0; it < 1000; ++it) {
    const int bits = 1 + static_cast<int>(rng.below(8));
    const int levels = (1 << bits) - 1;
    const double lo = rng.uniform(-5.0, 5.0);
    const double h = rng.uniform(0.05, 2.0);
    const std::size_t n = 2 + rng.below(128);
    std::vector<float> x(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int k = i == 0 ? 0
                           : (i == 1 ? levels
                                     : static_cast<int>(rng.below(levels + 1)));
      x[i] = static_cast<float>(lo + k * h);
    }
    QuantConfig cfg;
    cfg.bits = bits;
    cfg.lambda = 0.0;
    BlockResult res = quantize_block(x, cfg);
    auto r = reconstruct(res.block);
    const double tol =
        1e-5 * (std::abs(lo + levels * h) + std::abs(lo) + 1.0);
    for (std::size_t i = 0; i < n; ++i)
      c.expect(std::abs(r[i] - x[i]) <= tol);
  }
  CHECK(c.ok);
}

TEST_CASE("criterion 3: backbone limit at lambda = 1e12") {
  Criterion c{3, "lambda 1e12: |a| <= 1e-9 and b -> x_mean"};
  Rng rng(1003);
  for (int it = 0; it < 1000; ++it) {
    QuantConfig cfg;
    cfg.bits = 1 + static_cast<int>(rng.below(8));
    cfg.lambda = 1e12;
    const std::size_t n = 1 + rng.below(256);
    auto x = gen::block(rng, n, gen::dist_cycle(it), rng.uniform(0.1, 5.0));
    BlockResult res = quantize_block(x, cfg);
    double mean = 0;
    for (float v : x)
      mean += v;
    mean /= static_cast<double>(n);
    c.expect(std::abs(res.block.a) <= 1e-9);
    c.expect(std::abs(res.block.b - mean) <= 1e-6 * (1.0 + std::abs(mean)));
  }
  CHECK(c.ok);
}

TEST_CASE("criterion 4: ridge oracle equivalence") {
  Criterion c{4, "ridge_solve matches the 2x2 normal-equations oracle"};
  Rng rng(1004);
  for (int it = 0; it < 1000; ++it) {
    const std::size_t n = 2 + rng.below(128);
    std::vector<double> x(n), q(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.gaussian() * rng.uniform(0.5, 4.0);
      q[i] = rng.uniform(0.0, 255.0);
    }
    const double lambda = (it % 4 == 0) ? 0.0 : rng.uniform(1e-4, 100.0);
    RidgeResult got = ridge_solve(x, q, lambda);
    oracle::Ridge want = oracle::ridge_normal_equations(x, q, lambda);
    c.expect(std::abs(got.a - want.a) <=
             1e-6 * std::max(1e-12, std::abs(want.a)));
    c.expect(std::abs(got.b - want.b) <=
             1e-6 * std::max(1e-12, std::abs(want.b)));
  }
  CHECK(c.ok);
}

TEST_CASE("criterion 5: worked example") {
  Criterion c{5, "x=[1,2,3,4], bits=2, lambda=0.01: a, b, r as derived"};
  std::vector<float> x = {1, 2, 3, 4};
  QuantConfig cfg;
  cfg.bits = 2;
  cfg.lambda = 0.01;
  cfg.epsilon = 1e-6;
  BlockResult res = quantize_block(x, cfg);
  c.expect(res.block.q == std::vector<std::uint8_t>{0, 1, 2, 3});
  c.expect(std::abs(res.block.a - 0.992063) <= 1e-5);
  c.expect(std::abs(res.block.b - 1.011905) <= 1e-5);
  auto r = reconstruct(res.block);
  const double want[] = {1.011905, 2.003968, 2.996032, 3.988095};
  for (int i = 0; i < 4; ++i)
    c.expect(std::abs(r[i] - want[i]) <= 1e-5);
  CHECK(c.ok);
}

TEST_CASE("criterion 6: monotone shrinkage") {
  Criterion c{6, "data-fit error non-decreasing across the lambda ladder"};
  Rng rng(1006);
  const double ladder[] = {0.0, 1e-4, 1e-2, 1.0, 100.0};
  for (int it = 0; it < 1000; ++it) {
    const std::size_t n = 2 + rng.below(128);
    auto xf = gen::block(rng, n, gen::dist_cycle(it), rng.uniform(0.2, 4.0));
    std::vector<double> x(xf.begin(), xf.end());
    std::vector<double> q(n);
    for (auto &v : q)
      v = rng.uniform(0.0, 15.0);
    double prev = -1.0;
    for (double l : ladder) {
      RidgeResult r = ridge_solve(x, q, l);
      double fit = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = r.a * q[i] + r.b - x[i];
        fit += e * e;
      }
      c.expect(fit >= prev - 1e-9 * (1.0 + fit));
      prev = fit;
    }
  }
  CHECK(c.ok);
}

TEST_CASE("criterion 7: kappa linearity") {
  Criterion c{7, "a moves by eta/(Var_q + lambda) exactly"};
  Rng rng(1007);
  for (int it = 0; it < 100; ++it) {
    const double var_q = rng.uniform(0.0, 50.0);
    const double lambda = rng.uniform(1e-4, 10.0);
    const double cov = rng.gaussian() * 20.0;
    const double eta = rng.uniform(0.05, 1.0) * (1.0 + std::abs(cov));
    const double kappa = 1.0 / (var_q + lambda);
    const double delta = std::abs(ridge_scale(cov + eta, var_q, lambda) -
                                  ridge_scale(cov, var_q, lambda));
    c.expect(std::abs(delta - eta * kappa) <= 1e-12 * eta * kappa);
  }
  CHECK(c.ok);
}

TEST_CASE("criterion 8: integer-expansion equivalence") {
  Criterion c{8, "integer_expand_matmul == fake_quant_matmul, 64x64x64"};
  Rng rng(1008);
  for (std::size_t bs : {16u, 32u}) {
    for (int bits : {1, 4, 8}) {
      QuantConfig cfg;
      cfg.bits = bits;
      cfg.block_size = bs;
      Tensor X = gaussian_tensor(rng, {64, 64});
      Tensor W = gaussian_tensor(rng, {64, 64});
      Tensor fake = fake_quant_matmul(X, W, cfg, cfg);
      Tensor expanded = integer_expand_matmul(quantize_matrix(X, 1, cfg),
                                              quantize_matrix(W, 0, cfg));
      c.expect(rel_frobenius(expanded, fake) <= 1e-5);
    }
  }
  CHECK(c.ok);
}

TEST_CASE("criterion 9: sparsifier counts and perturbation identity") {
  Criterion c{9, "exact counts; y = x + delta bit-exactly"};
  Rng rng(1009);
  const double fractions[] = {0.0, 0.25, 0.5, 0.75, 0.9, 1.0};
  for (int it = 0; it < 200; ++it) {
    const std::size_t n = 1 + rng.below(256);
    auto x = gen::block(rng, n, gen::dist_cycle(it), 2.0);
    for (double f : fractions) {
      const auto want =
          static_cast<std::size_t>(std::floor(f * static_cast<double>(n)));
      const SparsifyResult results[2] = {sparsify_toward_mean(x, f),
                                         sparsify_zero_baseline(x, f)};
      for (const SparsifyResult &r : results) {
        std::size_t replaced = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (!r.pattern.kept[i])
            ++replaced;
          c.expect(static_cast<double>(x[i]) + r.pattern.delta[i] ==
                   static_cast<double>(r.y[i]));
        }
        c.expect(replaced == want);
      }
    }
  }
  for (int it = 0; it < 100; ++it) {
    const std::size_t groups = 1 + rng.below(16);
    auto x = gen::block(rng, 4 * groups, gen::dist_cycle(it), 2.0);
    for (int m : {1, 2, 3}) {
      SparsifyResult r = sparsify_structured(x, m, 4);
      for (std::size_t g = 0; g < x.size(); g += 4) {
        int kept = 0;
        for (int j = 0; j < 4; ++j)
          kept += r.pattern.kept[g + j];
        c.expect(kept == m);
      }
      for (std::size_t i = 0; i < x.size(); ++i)
        c.expect(static_cast<double>(x[i]) + r.pattern.delta[i] ==
                 static_cast<double>(r.y[i]));
    }
  }
  CHECK(c.ok);
}

TEST_CASE("criterion 10: ternary storage accounting") {
  Criterion c{10, "bits_per_element: 0.5 / 1.0 / 1.5 for 1:4 / 2:4 / 3:4"};
  SparsityConfig cfg;
  cfg.mode = SparsityMode::structured_mn;
  cfg.n = 4;
  cfg.m = 1;
  c.expect(bits_per_element(cfg, 1) == 0.5);
  cfg.m = 2;
  c.expect(bits_per_element(cfg, 1) == 1.0);
  cfg.m = 3;
  c.expect(bits_per_element(cfg, 1) == 1.5);
  CHECK(c.ok);
}

TEST_CASE("criterion 11: gradient check on a 4x4 quantized layer") {
  Criterion c{11, "analytic backward vs central differences, h = 1e-3"};
  Rng rng(1011);
  const std::size_t in = 4, out = 4, batch = 2;
  int points = 0, coords = 0;
  for (int it = 0; it < 600 && points < 100; ++it) {
    QuantLinearLayer layer;
    layer.weight = gaussian_tensor(rng, {in, out});
    layer.bias = gaussian_tensor(rng, {out}, 0.1);
    layer.weight_cfg.bits = 3;
    layer.weight_cfg.lambda = 0.01;
    QuantConfig act;
    act.bits = 4;
    act.lambda = 0.01;
    layer.act_cfg = act;

    Tensor x = gaussian_tensor(rng, {batch, in});
    LayerCache cache;
    layer_forward(layer, x, Mode::train, &cache);
    Tensor T = gaussian_tensor(rng, {batch, out});
    LayerGrads grads = layer_backward(layer, cache, T);

    // frozen-delta surrogate replay: the smooth function whose exact
    // gradient the backward pass computes
    auto replay = [&](const std::vector<double> &v, const QuantConfig &cfg,
                      const std::vector<double> &frozen) {
      double lo = v[0], hi = v[0];
      for (double u : v) {
        lo = std::min(lo, u);
        hi = std::max(hi, u);
      }
      const double scale = ((1 << cfg.bits) - 1) / (hi - lo + cfg.epsilon);
      std::vector<double> q(v.size());
      double qs = 0, xs = 0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        q[i] = (v[i] - lo) * scale + frozen[i];
        qs += q[i];
        xs += v[i];
      }
      const double qm = qs / static_cast<double>(v.size());
      const double xm = xs / static_cast<double>(v.size());
      double var = 0, cov = 0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        var += (q[i] - qm) * (q[i] - qm);
        cov += (v[i] - xm) * (q[i] - qm);
      }
      var /= static_cast<double>(v.size());
      cov /= static_cast<double>(v.size());
      const double a = cov / (var + cfg.lambda);
      std::vector<double> r(v.size());
      for (std::size_t i = 0; i < v.size(); ++i)
        r[i] = a * (q[i] - qm) + xm;
      return r;
    };
    auto layer_loss = [&](const Tensor &w, const Tensor &xin) {
      std::vector<double> wr(in * out), xr(batch * in);
      for (std::size_t o = 0; o < out; ++o) {
        std::vector<double> col(in);
        for (std::size_t k = 0; k < in; ++k)
          col[k] = w.at(k, o);
        auto rv = replay(col, layer.weight_cfg, cache.w_blocks[o].delta);
        for (std::size_t k = 0; k < in; ++k)
          wr[k * out + o] = rv[k];
      }
      for (std::size_t r = 0; r < batch; ++r) {
        std::vector<double> row(in);
        for (std::size_t k = 0; k < in; ++k)
          row[k] = xin.at(r, k);
        auto rv = replay(row, *layer.act_cfg, cache.act_blocks[r].delta);
        for (std::size_t k = 0; k < in; ++k)
          xr[r * in + k] = rv[k];
      }
      double loss = 0;
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t o = 0; o < out; ++o) {
          double acc = layer.bias.data[o];
          for (std::size_t k = 0; k < in; ++k)
            acc += xr[r * in + k] * wr[k * out + o];
          loss += static_cast<double>(T.at(r, o)) * acc;
        }
      return loss;
    };
    auto stable = [&](const std::vector<double> &v, const QuantConfig &cfg,
                      const SurrogateBlock &center) {
      SurrogateBlock probe = quant_forward_block(v, cfg);
      return probe.codes == center.codes && probe.jmin == center.jmin &&
             probe.jmax == center.jmax;
    };

    const double h = 1e-3;
    bool used = false;
    for (int probe = 0; probe < 4; ++probe) {
      const std::size_t k = rng.below(in), o = rng.below(out);
      Tensor wp = layer.weight, wm = layer.weight;
      wp.at(k, o) = static_cast<float>(wp.at(k, o) + h);
      wm.at(k, o) = static_cast<float>(wm.at(k, o) - h);
      std::vector<double> cp(in), cm(in);
      for (std::size_t kk = 0; kk < in; ++kk) {
        cp[kk] = wp.at(kk, o);
        cm[kk] = wm.at(kk, o);
      }
      if (!stable(cp, layer.weight_cfg, cache.w_blocks[o]) ||
          !stable(cm, layer.weight_cfg, cache.w_blocks[o]))
        continue; // code change under +/-h: excluded by construction
      const double denom =
          static_cast<double>(wp.at(k, o)) - static_cast<double>(wm.at(k, o));
      const double fd = (layer_loss(wp, x) - layer_loss(wm, x)) / denom;
      const double an = grads.grad_w.at(k, o);
      if (!(std::abs(fd) < 1e-6 && std::abs(an) < 1e-6))
        c.expect(std::abs(an - fd) <=
                 1e-2 * std::max(std::abs(an), std::abs(fd)));
      ++coords;
      used = true;
    }
    if (used)
      ++points;
  }
  c.expect(points >= 100);
  c.expect(coords >= 200);
  CHECK(c.ok);
}

TEST_CASE("criterion 12: stability experiment") {
  Criterion c{12, "a1w1 mlp: lambda=0.01 halves the loss; 1.0 over-suppresses"};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ExperimentConfig cfg;
    cfg.task = Task::synthetic_regression;
    cfg.act_bits = 1;
    cfg.weight_bits = 1;
    cfg.lambda_values = {0.01, 1.0, 0.0};
    cfg.steps = 2000;
    cfg.seed = seed;
    cfg.include_baseline = true;
    auto reports = run_experiment(cfg);
    REQUIRE(reports.size() == 4);
    const TrainRunReport &r001 = reports[0];
    const TrainRunReport &r1 = reports[1];
    const TrainRunReport &r0 = reports[2];
    c.expect(r001.finite);
    c.expect(r001.final_loss < 0.5 * r001.initial_loss);
    c.expect(r1.finite);
    c.expect(r1.final_loss >= r001.final_loss);
    // lambda = 0 is recorded without a finiteness assertion
    c.expect(r0.steps == 2000);
    // float baseline sanity: converges far below its starting loss
    c.expect(reports[3].finite);
    c.expect(reports[3].final_loss < 0.1 * reports[3].initial_loss);
  }
  CHECK(c.ok);
}

TEST_CASE("criterion 13: sweep sanity") {
  Criterion c{13, "mse non-increasing in bits and as blocks shrink (20 seeds)"};
  const int bits_grid[] = {1, 2, 4, 8};
  const std::size_t block_grid[] = {32, 128, 512};
  double by_bits[4] = {0, 0, 0, 0};
  double by_block[3] = {0, 0, 0};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(9000 + seed);
    Tensor t = gaussian_tensor(rng, {4, 512});
    for (int i = 0; i < 4; ++i) {
      QuantConfig cfg;
      cfg.bits = bits_grid[i];
      cfg.block_size = 128;
      by_bits[i] += quantize_tensor(t, 1, cfg).summary.mse;
    }
    for (int i = 0; i < 3; ++i) {
      QuantConfig cfg;
      cfg.bits = 2;
      cfg.block_size = block_grid[i];
      by_block[i] += quantize_tensor(t, 1, cfg).summary.mse;
    }
  }
  c.expect(by_bits[1] <= by_bits[0]);
  c.expect(by_bits[2] <= by_bits[1]);
  c.expect(by_bits[3] <= by_bits[2]);
  c.expect(by_block[0] <= by_block[1]);
  c.expect(by_block[1] <= by_block[2]);
  CHECK(c.ok);
}

TEST_CASE("criterion 14: e5m2 coefficient mode") {
  Criterion c{14, "e5m2 coefficients: mse within 2x of full precision"};
  Rng rng(1014);
  for (int it = 0; it < 5; ++it) {
    Tensor t = gaussian_tensor(rng, {64, 256});
    QuantConfig full;
    full.bits = 4;
    full.block_size = 32;
    QuantConfig e5 = full;
    e5.coeff_precision = CoeffPrecision::e5m2_simulated;
    const double m_full = quantize_tensor(t, 1, full).summary.mse;
    const double m_e5 = quantize_tensor(t, 1, e5).summary.mse;
    c.expect(m_e5 <= 2.0 * m_full);
  }
  CHECK(c.ok);
}
