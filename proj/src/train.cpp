#include "dq/train.hpp"

#include "dq/rng.hpp"

#include <algorithm>
#include <cmath>

namespace dq {

SurrogateBlock quant_forward_block(std::span<const double> x,
                                   const QuantConfig &cfg) {
  cfg.validate();
  if (x.empty())
    throw Error(ErrorCode::invalid_config, "quant_forward_block: empty block");
  const std::size_t n = x.size();
  const double inv_n = 1.0 / static_cast<double>(n);

  SurrogateBlock sb;
  sb.jmin = 0;
  sb.jmax = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (x[i] < x[sb.jmin])
      sb.jmin = i;
    if (x[i] > x[sb.jmax])
      sb.jmax = i;
  }
  const double lo = x[sb.jmin], hi = x[sb.jmax];
  sb.range = hi - lo + cfg.epsilon;
  sb.scale = ((1 << cfg.bits) - 1) / sb.range;

  sb.f.resize(n);
  sb.codes.resize(n);
  sb.delta.resize(n);
  double q_sum = 0, x_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sb.f[i] = (x[i] - lo) * sb.scale;
    const double rounded =
        cfg.rounding == Rounding::half_to_even
            ? sb.f[i] - std::remainder(sb.f[i], 1.0)
            : std::round(sb.f[i]);
    sb.codes[i] = static_cast<int>(rounded);
    sb.delta[i] = rounded - sb.f[i];
    q_sum += rounded;
    x_sum += x[i];
  }
  const double q_mean = q_sum * inv_n;
  const double x_mean = x_sum * inv_n;

  sb.c.resize(n);
  sb.d.resize(n);
  double var_q = 0, cov = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sb.c[i] = sb.codes[i] - q_mean;
    sb.d[i] = x[i] - x_mean;
    var_q += sb.c[i] * sb.c[i];
    cov += sb.d[i] * sb.c[i];
  }
  var_q *= inv_n;
  cov *= inv_n;
  sb.cov = cov;

  if (var_q + cfg.lambda == 0.0) {
    sb.degenerate = true;
    sb.a = 0.0;
    sb.kappa = 0.0;
  } else {
    sb.kappa = 1.0 / (var_q + cfg.lambda);
    sb.a = cov * sb.kappa;
  }

  double a_eff = sb.a;
  double b_eff = x_mean - sb.a * q_mean;
  if (cfg.coeff_precision == CoeffPrecision::e5m2_simulated) {
    a_eff = round_to_e5m2(sb.a);
    b_eff = round_to_e5m2(x_mean) - a_eff * q_mean;
  }
  sb.r.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    sb.r[i] = a_eff * sb.codes[i] + b_eff;
  return sb;
}

std::vector<double> quant_backward_block(const SurrogateBlock &cache,
                                         std::span<const double> grad_r) {
  const std::size_t n = grad_r.size();
  if (n != cache.r.size())
    throw Error(ErrorCode::shape_mismatch,
                "quant_backward_block: gradient length mismatch");
  const double inv_n = 1.0 / static_cast<double>(n);

  double g_sum = 0;
  for (double g : grad_r)
    g_sum += g;

  std::vector<double> grad(n, g_sum * inv_n);
  if (cache.degenerate)
    return grad; // a is pinned at 0, only the mean path remains

  double gc = 0;
  for (std::size_t i = 0; i < n; ++i)
    gc += grad_r[i] * cache.c[i];

  const double k = cache.kappa;
  const double w_d = gc * k * inv_n;                       // d-path into Cov
  const double w_c = 2.0 * gc * cache.cov * k * k * inv_n; // c-path into Var

  // adjoint entering the affine forward f
  std::vector<double> h(n);
  double h_sum = 0, hf = 0;
  for (std::size_t i = 0; i < n; ++i) {
    h[i] = cache.a * (grad_r[i] - g_sum * inv_n) + w_d * cache.d[i] -
           w_c * cache.c[i];
    h_sum += h[i];
    hf += h[i] * cache.f[i];
  }

  for (std::size_t i = 0; i < n; ++i)
    grad[i] += w_d * cache.c[i] + cache.scale * h[i];
  // subgradients of x_min / x_max through f
  const double p = hf / cache.range;
  grad[cache.jmin] += -cache.scale * h_sum + p;
  grad[cache.jmax] -= p;
  return grad;
}

namespace {

void check_2d_input(const Tensor &x, std::size_t in) {
  if (x.rank() != 2 || x.shape[1] != in)
    throw Error(ErrorCode::shape_mismatch,
                "layer input must be [batch, in] with in = weight rows");
}

struct LayerDims {
  std::size_t in, out;
};

LayerDims layer_dims(const QuantLinearLayer &layer) {
  if (layer.weight.rank() != 2)
    throw Error(ErrorCode::shape_mismatch, "weight must be [in, out]");
  LayerDims d{layer.weight.shape[0], layer.weight.shape[1]};
  if (layer.bias.numel() != d.out)
    throw Error(ErrorCode::shape_mismatch, "bias length must equal out");
  return d;
}

} // namespace

Tensor layer_forward(const QuantLinearLayer &layer, const Tensor &x, Mode mode,
                     LayerCache *cache) {
  const LayerDims dims = layer_dims(layer);
  check_2d_input(x, dims.in);
  if (mode == Mode::train) {
    if (cache == nullptr)
      throw Error(ErrorCode::invalid_config, "train mode requires a cache");
    const bool e5m2 =
        layer.weight_cfg.coeff_precision != CoeffPrecision::full ||
        (layer.act_cfg &&
         layer.act_cfg->coeff_precision != CoeffPrecision::full);
    if (e5m2)
      throw Error(ErrorCode::invalid_config,
                  "training requires full-precision coefficients");
  }
  LayerCache local;
  LayerCache &cc = cache ? *cache : local;
  cc.batch = x.shape[0];
  cc.in = dims.in;
  cc.out = dims.out;
  cc.x.assign(x.data.begin(), x.data.end());
  cc.act_blocks.clear();
  cc.w_blocks.clear();

  // weights: sparsify (optional) then quantize, per column block
  const BlockPartition wpart = partition(dims.in, layer.weight_cfg.block_size);
  cc.wr.resize(dims.in * dims.out);
  std::vector<float> wslice;
  std::vector<double> wd;
  for (std::size_t o = 0; o < dims.out; ++o) {
    for (const Span &s : wpart.blocks) {
      wslice.resize(s.len);
      for (std::size_t j = 0; j < s.len; ++j)
        wslice[j] = layer.weight.at(s.start + j, o);
      if (layer.sparsity) {
        SparsifyResult sp = sparsify(wslice, *layer.sparsity);
        wd.assign(sp.y.begin(), sp.y.end());
      } else {
        wd.assign(wslice.begin(), wslice.end());
      }
      SurrogateBlock sb = quant_forward_block(wd, layer.weight_cfg);
      for (std::size_t j = 0; j < s.len; ++j)
        cc.wr[(s.start + j) * dims.out + o] = sb.r[j];
      cc.w_blocks.push_back(std::move(sb));
    }
  }

  // activations
  if (layer.act_cfg) {
    const BlockPartition apart = partition(dims.in, layer.act_cfg->block_size);
    cc.xr.resize(cc.batch * dims.in);
    std::vector<double> xa;
    for (std::size_t r = 0; r < cc.batch; ++r) {
      for (const Span &s : apart.blocks) {
        xa.assign(cc.x.begin() + r * dims.in + s.start,
                  cc.x.begin() + r * dims.in + s.start + s.len);
        SurrogateBlock sb = quant_forward_block(xa, *layer.act_cfg);
        for (std::size_t j = 0; j < s.len; ++j)
          cc.xr[r * dims.in + s.start + j] = sb.r[j];
        cc.act_blocks.push_back(std::move(sb));
      }
    }
  } else {
    cc.xr = cc.x;
  }

  Tensor y({cc.batch, dims.out});
  for (std::size_t r = 0; r < cc.batch; ++r)
    for (std::size_t o = 0; o < dims.out; ++o) {
      double acc = layer.bias.data[o];
      for (std::size_t k = 0; k < dims.in; ++k)
        acc += cc.xr[r * dims.in + k] * cc.wr[k * dims.out + o];
      y.at(r, o) = static_cast<float>(acc);
    }
  return y;
}

LayerGrads layer_backward(const QuantLinearLayer &layer,
                          const LayerCache &cache, const Tensor &upstream) {
  const LayerDims dims = layer_dims(layer);
  if (upstream.rank() != 2 || upstream.shape[0] != cache.batch ||
      upstream.shape[1] != dims.out)
    throw Error(ErrorCode::shape_mismatch, "upstream gradient shape mismatch");
  if (cache.wr.size() != dims.in * dims.out)
    throw Error(ErrorCode::invalid_config, "backward requires a forward cache");

  LayerGrads grads;
  grads.grad_w = Tensor({dims.in, dims.out});
  grads.grad_b = Tensor({dims.out});
  grads.grad_x = Tensor({cache.batch, dims.in});

  for (std::size_t o = 0; o < dims.out; ++o) {
    double s = 0;
    for (std::size_t r = 0; r < cache.batch; ++r)
      s += upstream.at(r, o);
    grads.grad_b.data[o] = static_cast<float>(s);
  }

  // gradients w.r.t. the reconstructed operands
  std::vector<double> g_wr(dims.in * dims.out, 0.0);
  std::vector<double> g_xr(cache.batch * dims.in, 0.0);
  for (std::size_t r = 0; r < cache.batch; ++r)
    for (std::size_t o = 0; o < dims.out; ++o) {
      const double g = upstream.at(r, o);
      for (std::size_t k = 0; k < dims.in; ++k) {
        g_wr[k * dims.out + o] += cache.xr[r * dims.in + k] * g;
        g_xr[r * dims.in + k] += cache.wr[k * dims.out + o] * g;
      }
    }

  // through the weight quantizer (sparsification passes gradients through:
  // its perturbation is frozen)
  const BlockPartition wpart = partition(dims.in, layer.weight_cfg.block_size);
  const std::size_t wnblk = wpart.blocks.size();
  std::vector<double> gslice;
  for (std::size_t o = 0; o < dims.out; ++o) {
    for (std::size_t t = 0; t < wnblk; ++t) {
      const Span &s = wpart.blocks[t];
      gslice.resize(s.len);
      for (std::size_t j = 0; j < s.len; ++j)
        gslice[j] = g_wr[(s.start + j) * dims.out + o];
      std::vector<double> gw =
          quant_backward_block(cache.w_blocks[o * wnblk + t], gslice);
      for (std::size_t j = 0; j < s.len; ++j)
        grads.grad_w.at(s.start + j, o) = static_cast<float>(gw[j]);
    }
  }

  if (layer.act_cfg) {
    const BlockPartition apart = partition(dims.in, layer.act_cfg->block_size);
    const std::size_t anblk = apart.blocks.size();
    for (std::size_t r = 0; r < cache.batch; ++r) {
      for (std::size_t t = 0; t < anblk; ++t) {
        const Span &s = apart.blocks[t];
        gslice.assign(g_xr.begin() + r * dims.in + s.start,
                      g_xr.begin() + r * dims.in + s.start + s.len);
        std::vector<double> gx =
            quant_backward_block(cache.act_blocks[r * anblk + t], gslice);
        for (std::size_t j = 0; j < s.len; ++j)
          grads.grad_x.at(r, s.start + j) = static_cast<float>(gx[j]);
      }
    }
  } else {
    for (std::size_t i = 0; i < g_xr.size(); ++i)
      grads.grad_x.data[i] = static_cast<float>(g_xr[i]);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// desk-scale experiment harness

void OptimizerState::step(Tensor &param, const Tensor &grad) {
  if (grad.data.size() != param.data.size())
    throw Error(ErrorCode::shape_mismatch,
                "optimizer gradient shape mismatch");
  if (velocity.size() != param.data.size())
    velocity.assign(param.data.size(), 0.0);
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    velocity[i] =
        momentum * velocity[i] + grad.data[i] + weight_decay * param.data[i];
    param.data[i] = static_cast<float>(param.data[i] - learning_rate * velocity[i]);
  }
}

namespace {

struct Dataset {
  std::size_t in = 0;
  std::vector<float> x;  // samples x in
  std::vector<float> y;  // samples (regression target or {0,1} label)
  std::size_t size() const { return y.size(); }
};

Dataset make_regression(std::uint64_t seed, std::size_t samples,
                        std::size_t in) {
  Rng rng(seed);
  Dataset ds;
  ds.in = in;
  std::vector<double> u(in);
  const double norm = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto &v : u)
    v = rng.gaussian() * norm;
  ds.x.resize(samples * in);
  ds.y.resize(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    double z = 0;
    for (std::size_t j = 0; j < in; ++j) {
      const double v = rng.gaussian();
      ds.x[s * in + j] = static_cast<float>(v);
      z += v * u[j];
    }
    ds.y[s] = static_cast<float>(std::tanh(1.5 * z));
  }
  return ds;
}

Dataset make_two_moons(std::uint64_t seed, std::size_t samples) {
  Rng rng(seed);
  Dataset ds;
  ds.in = 2;
  ds.x.resize(samples * 2);
  ds.y.resize(samples);
  constexpr double pi = 3.14159265358979323846;
  for (std::size_t s = 0; s < samples; ++s) {
    const double t = rng.uniform() * pi;
    const bool upper = (s % 2) == 0;
    double px, py;
    if (upper) {
      px = std::cos(t);
      py = std::sin(t);
    } else {
      px = 1.0 - std::cos(t);
      py = 0.5 - std::sin(t);
    }
    px += rng.gaussian() * 0.1;
    py += rng.gaussian() * 0.1;
    ds.x[s * 2 + 0] = static_cast<float>(px);
    ds.x[s * 2 + 1] = static_cast<float>(py);
    ds.y[s] = upper ? 1.0f : 0.0f;
  }
  return ds;
}

struct Mlp {
  QuantLinearLayer l1, l2;
  bool quantized = false;
};

Mlp make_mlp(std::uint64_t seed, std::size_t in, std::size_t hidden,
             std::size_t out) {
  Rng rng(seed ^ 0x5eedf00dull);
  Mlp mlp;
  auto init = [&](std::size_t rows, std::size_t cols) {
    Tensor t({rows, cols});
    const double s = 1.0 / std::sqrt(static_cast<double>(rows));
    for (auto &v : t.data)
      v = static_cast<float>(rng.uniform(-s, s));
    return t;
  };
  mlp.l1.weight = init(in, hidden);
  mlp.l1.bias = Tensor({hidden});
  mlp.l2.weight = init(hidden, out);
  mlp.l2.bias = Tensor({out});
  return mlp;
}

void configure_quant(Mlp &mlp, int act_bits, int weight_bits, double lambda) {
  mlp.quantized = true;
  QuantConfig w;
  w.bits = weight_bits;
  w.lambda = lambda;
  QuantConfig a;
  a.bits = act_bits;
  a.lambda = lambda;
  mlp.l1.weight_cfg = w;
  mlp.l2.weight_cfg = w;
  mlp.l1.act_cfg = a;
  mlp.l2.act_cfg = a;
}

// plain float linear pass for the unquantized baseline
Tensor plain_forward(const QuantLinearLayer &layer, const Tensor &x,
                     LayerCache &cc) {
  const std::size_t in = layer.weight.shape[0], out = layer.weight.shape[1];
  check_2d_input(x, in);
  cc.batch = x.shape[0];
  cc.in = in;
  cc.out = out;
  cc.x.assign(x.data.begin(), x.data.end());
  cc.xr = cc.x;
  cc.wr.resize(in * out);
  for (std::size_t i = 0; i < in * out; ++i)
    cc.wr[i] = layer.weight.data[i];
  Tensor y({cc.batch, out});
  for (std::size_t r = 0; r < cc.batch; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = layer.bias.data[o];
      for (std::size_t k = 0; k < in; ++k)
        acc += cc.xr[r * in + k] * cc.wr[k * out + o];
      y.at(r, o) = static_cast<float>(acc);
    }
  return y;
}

LayerGrads plain_backward(const QuantLinearLayer &layer,
                          const LayerCache &cc, const Tensor &upstream) {
  const std::size_t in = layer.weight.shape[0], out = layer.weight.shape[1];
  LayerGrads g;
  g.grad_w = Tensor({in, out});
  g.grad_b = Tensor({out});
  g.grad_x = Tensor({cc.batch, in});
  for (std::size_t o = 0; o < out; ++o) {
    double s = 0;
    for (std::size_t r = 0; r < cc.batch; ++r)
      s += upstream.at(r, o);
    g.grad_b.data[o] = static_cast<float>(s);
  }
  for (std::size_t r = 0; r < cc.batch; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      const double gv = upstream.at(r, o);
      for (std::size_t k = 0; k < in; ++k) {
        g.grad_w.at(k, o) += static_cast<float>(cc.xr[r * in + k] * gv);
        g.grad_x.at(r, k) += static_cast<float>(cc.wr[k * out + o] * gv);
      }
    }
  return g;
}

TrainRunReport run_single(const ExperimentConfig &cfg,
                          std::optional<double> lambda, const Dataset &ds,
                          std::size_t hidden) {
  TrainRunReport rep;
  rep.task = cfg.task == Task::synthetic_regression
                 ? "synthetic-regression"
                 : "two-moons-classification";
  rep.act_bits = lambda ? cfg.act_bits : 0;
  rep.weight_bits = lambda ? cfg.weight_bits : 0;
  rep.lambda = lambda;
  rep.seed = cfg.seed;
  rep.steps = cfg.steps;

  Mlp mlp = make_mlp(cfg.seed, ds.in, hidden, 1);
  if (lambda)
    configure_quant(mlp, cfg.act_bits, cfg.weight_bits, *lambda);

  OptimizerState vw1, vb1, vw2, vb2;
  for (OptimizerState *opt : {&vw1, &vb1, &vw2, &vb2}) {
    opt->learning_rate = cfg.learning_rate;
    opt->momentum = cfg.momentum;
  }
  vw1.weight_decay = cfg.weight_decay;
  vw2.weight_decay = cfg.weight_decay;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  rep.losses.reserve(static_cast<std::size_t>(cfg.steps));

  for (int step = 0; step < cfg.steps; ++step) {
    const std::size_t start =
        (static_cast<std::size_t>(step) * batch) % ds.size();
    Tensor xb({batch, ds.in});
    std::vector<float> yb(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      const std::size_t s = (start + i) % ds.size();
      for (std::size_t j = 0; j < ds.in; ++j)
        xb.at(i, j) = ds.x[s * ds.in + j];
      yb[i] = ds.y[s];
    }

    LayerCache c1, c2;
    Tensor z1 = mlp.quantized ? layer_forward(mlp.l1, xb, Mode::train, &c1)
                              : plain_forward(mlp.l1, xb, c1);
    Tensor h({batch, z1.shape[1]});
    for (std::size_t i = 0; i < h.data.size(); ++i)
      h.data[i] = std::tanh(z1.data[i]);
    Tensor z2 = mlp.quantized ? layer_forward(mlp.l2, h, Mode::train, &c2)
                              : plain_forward(mlp.l2, h, c2);

    double loss = 0;
    Tensor gz2({batch, 1});
    if (cfg.task == Task::synthetic_regression) {
      for (std::size_t i = 0; i < batch; ++i) {
        const double e = static_cast<double>(z2.data[i]) - yb[i];
        loss += e * e;
        gz2.data[i] =
            static_cast<float>(2.0 * e / static_cast<double>(batch));
      }
      loss /= static_cast<double>(batch);
    } else {
      for (std::size_t i = 0; i < batch; ++i) {
        const double z = z2.data[i];
        const double t = yb[i];
        // log(1 + e^z) - t z, evaluated stably
        loss += (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z))) -
                t * z;
        const double sig = 1.0 / (1.0 + std::exp(-z));
        gz2.data[i] = static_cast<float>((sig - t) / static_cast<double>(batch));
      }
      loss /= static_cast<double>(batch);
    }
    rep.losses.push_back(loss);

    LayerGrads g2 = mlp.quantized ? layer_backward(mlp.l2, c2, gz2)
                                  : plain_backward(mlp.l2, c2, gz2);
    Tensor gh = std::move(g2.grad_x);
    for (std::size_t i = 0; i < gh.data.size(); ++i) {
      const double th = h.data[i];
      gh.data[i] = static_cast<float>(gh.data[i] * (1.0 - th * th));
    }
    LayerGrads g1 = mlp.quantized ? layer_backward(mlp.l1, c1, gh)
                                  : plain_backward(mlp.l1, c1, gh);

    vw1.step(mlp.l1.weight, g1.grad_w);
    vb1.step(mlp.l1.bias, g1.grad_b);
    vw2.step(mlp.l2.weight, g2.grad_w);
    vb2.step(mlp.l2.bias, g2.grad_b);
  }

  rep.initial_loss = rep.losses.front();
  rep.final_loss = rep.losses.back();
  rep.finite = true;
  for (double l : rep.losses)
    if (!std::isfinite(l))
      rep.finite = false;
  return rep;
}

} // namespace

std::vector<TrainRunReport> run_experiment(const ExperimentConfig &cfg) {
  if (cfg.steps < 1)
    throw Error(ErrorCode::invalid_config, "steps must be >= 1");
  if (cfg.batch_size < 1)
    throw Error(ErrorCode::invalid_config, "batch_size must be >= 1");
  QuantConfig probe;
  probe.bits = cfg.act_bits;
  probe.validate();
  probe.bits = cfg.weight_bits;
  probe.validate();
  for (double l : cfg.lambda_values)
    if (l < 0)
      throw Error(ErrorCode::invalid_config, "lambda must be non-negative");

  const std::size_t in = cfg.task == Task::synthetic_regression ? 16 : 2;
  const std::size_t hidden = 32;
  const Dataset ds = cfg.task == Task::synthetic_regression
                         ? make_regression(cfg.seed, 256, in)
                         : make_two_moons(cfg.seed, 256);

  std::vector<TrainRunReport> reports;
  for (double l : cfg.lambda_values)
    reports.push_back(run_single(cfg, l, ds, hidden));
  if (cfg.include_baseline)
    reports.push_back(run_single(cfg, std::nullopt, ds, hidden));
  return reports;
}

} // namespace dq
