#pragma once

#include "dq/quantizer.hpp"
#include "dq/sparsifier.hpp"
#include "dq/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dq {

/// Differentiable view of one quantized block. The forward value matches
/// quantize_block exactly; the cache additionally holds everything the
/// backward pass needs. The rounding residual delta is frozen
/// (stop-gradient), while the block statistics — min, max, means,
/// Cov_xq, Var_q, and through them a and b — are treated as functions of
/// the input and differentiated, including subgradients at the argmin /
/// argmax (first occurrence on ties).
struct SurrogateBlock {
  std::vector<double> r;     // reconstruction a*(q - q_mean) + x_mean
  std::vector<double> f;     // affine forward image
  std::vector<double> c;     // q - q_mean
  std::vector<double> d;     // x - x_mean
  std::vector<double> delta; // frozen rounding residual
  std::vector<int> codes;
  double scale = 0;      // (2^bits - 1) / range
  double range = 0;      // x_max - x_min + eps
  std::size_t jmin = 0;  // argmin / argmax used for the subgradient
  std::size_t jmax = 0;
  double kappa = 0;
  double cov = 0;
  double a = 0;
  bool degenerate = false;
};

SurrogateBlock quant_forward_block(std::span<const double> x,
                                   const QuantConfig &cfg);

/// Vector-Jacobian product of the surrogate: given dL/dr, returns dL/dx.
std::vector<double> quant_backward_block(const SurrogateBlock &cache,
                                         std::span<const double> grad_r);

/// Linear layer with quantized weights (optionally sparsified first,
/// per block) and optionally quantized input activations. Quantization
/// is recomputed from the fresh float parameters on every forward pass
/// and applied identically in train and eval.
struct QuantLinearLayer {
  Tensor weight; // in x out
  Tensor bias;   // out
  QuantConfig weight_cfg;
  std::optional<QuantConfig> act_cfg;
  std::optional<SparsityConfig> sparsity;
};

enum class Mode { train, eval };

struct LayerCache {
  std::vector<double> x;  // input, batch x in
  std::vector<double> xr; // activations entering the product
  std::vector<double> wr; // reconstructed weight
  std::size_t batch = 0, in = 0, out = 0;
  std::vector<SurrogateBlock> act_blocks; // per (row, block)
  std::vector<SurrogateBlock> w_blocks;   // per (col, block)
};

/// y = q(x) . q(sparsify(W)) + bias. In train mode the cache is filled
/// for backward. Training requires full-precision coefficients; the
/// e5m2 rounding of (a, b) has no gradient path.
Tensor layer_forward(const QuantLinearLayer &layer, const Tensor &x, Mode mode,
                     LayerCache *cache);

struct LayerGrads {
  Tensor grad_w;
  Tensor grad_b;
  Tensor grad_x;
};

LayerGrads layer_backward(const QuantLinearLayer &layer,
                          const LayerCache &cache, const Tensor &upstream);

/// SGD with momentum and L2 weight decay; one state per parameter tensor.
struct OptimizerState {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::vector<double> velocity; // sized to the parameter on first step

  void step(Tensor &param, const Tensor &grad);
};

enum class Task { synthetic_regression, two_moons_classification };

struct TrainRunReport {
  std::string task;
  int act_bits = 0;    // 0 = unquantized
  int weight_bits = 0; // 0 = unquantized
  std::optional<double> lambda; // nullopt = float baseline
  std::uint64_t seed = 0;
  int steps = 0;
  std::vector<double> losses;
  bool finite = true;
  double initial_loss = 0;
  double final_loss = 0;
};

struct ExperimentConfig {
  Task task = Task::synthetic_regression;
  int act_bits = 1;
  int weight_bits = 1;
  std::vector<double> lambda_values = {0.01};
  int steps = 2000;
  std::uint64_t seed = 0;
  bool include_baseline = true;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.01;
  int batch_size = 32;
};

/// One report per lambda plus a float baseline. Deterministic given the
/// seed; divergence is recorded in `finite`, never thrown.
std::vector<TrainRunReport> run_experiment(const ExperimentConfig &cfg);

} // namespace dq
