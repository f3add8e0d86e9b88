// dq: quantize / sparsify tensor files, run matmul and training sweeps,
// emit metrics as JSON / CSV.
//
// exit codes: 0 success, 2 validation failure, 3 i/o failure,
//             4 acceptance assertion failed

#include "dq/container.hpp"
#include "dq/qlinalg.hpp"
#include "dq/quantizer.hpp"
#include "dq/rng.hpp"
#include "dq/sparsifier.hpp"
#include "dq/tensor.hpp"
#include "dq/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

using json = nlohmann::json;

namespace {

int exit_code_for(const dq::Error &e) {
  return e.code() == dq::ErrorCode::io ? 3 : 2;
}

std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::thread::hardware_concurrency();
  if (const char *env = std::getenv("DQ_NUM_THREADS")) {
    char *end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0)
      n = static_cast<std::size_t>(v);
  }
  if (n == 0)
    n = 1;
  return std::min(n, std::max<std::size_t>(jobs, 1));
}

// run fn(i) for i in [0, jobs) on a capped pool; results land indexed, so
// output order never depends on scheduling
template <typename Fn> void parallel_for(std::size_t jobs, Fn &&fn) {
  const std::size_t workers = worker_count(jobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i)
      fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < jobs; i = next.fetch_add(1))
        fn(i);
    });
  for (auto &t : pool)
    t.join();
}

struct SparsitySpec {
  std::string mode = "none"; // none | toward-mean | zero | structured
  double fraction = 0.5;
  int m = 2, n = 4;

  std::optional<dq::SparsityConfig> to_config() const {
    if (mode == "none")
      return std::nullopt;
    dq::SparsityConfig cfg;
    if (mode == "toward-mean") {
      cfg.mode = dq::SparsityMode::toward_mean;
      cfg.fraction = fraction;
    } else if (mode == "zero") {
      cfg.mode = dq::SparsityMode::zero_mask_baseline;
      cfg.fraction = fraction;
    } else if (mode == "structured") {
      cfg.mode = dq::SparsityMode::structured_mn;
      cfg.m = m;
      cfg.n = n;
    } else {
      throw dq::Error(dq::ErrorCode::invalid_config,
                      "unknown sparsity mode: " + mode);
    }
    cfg.validate();
    return cfg;
  }
};

bool parse_mn(const std::string &text, int &m, int &n) {
  const auto colon = text.find(':');
  if (colon == std::string::npos)
    return false;
  try {
    m = std::stoi(text.substr(0, colon));
    n = std::stoi(text.substr(colon + 1));
  } catch (...) {
    return false;
  }
  return true;
}

void write_text(const std::string &path, const std::string &content) {
  std::ofstream out(path);
  if (!out)
    throw dq::Error(dq::ErrorCode::io, "cannot open " + path + " for writing");
  out << content;
  if (!out)
    throw dq::Error(dq::ErrorCode::io, "short write to " + path);
}

void emit_report(const json &j, const std::string &report_path) {
  const std::string text = j.dump(2) + "\n";
  if (!report_path.empty())
    write_text(report_path, text);
  else
    std::cout << text;
}

dq::QuantSummary quantize_to_file(const dq::Tensor &t, std::size_t axis,
                                  const dq::QuantConfig &qcfg,
                                  const std::optional<dq::SparsityConfig> &scfg,
                                  const std::string &out_path) {
  if (scfg) {
    dq::SparseQuantizedTensor sq =
        dq::sparsify_quantize_tensor(t, axis, *scfg, qcfg);
    if (!out_path.empty())
      dq::write_container(sq, out_path);
    return sq.qt.summary;
  }
  dq::QuantizedTensor qt = dq::quantize_tensor(t, axis, qcfg);
  if (!out_path.empty())
    dq::write_container(qt, out_path);
  return qt.summary;
}

json summary_json(const dq::QuantSummary &s) {
  return json{{"mse", s.mse},
              {"max_abs_err", s.max_abs_err},
              {"effective_bits", s.effective_bits},
              {"mean_kappa", s.mean_kappa},
              {"max_kappa", s.max_kappa}};
}

json report_json(const dq::TrainRunReport &rep, bool with_losses) {
  json j{{"task", rep.task},
         {"act_bits", rep.act_bits},
         {"weight_bits", rep.weight_bits},
         {"seed", rep.seed},
         {"steps", rep.steps},
         {"finite", rep.finite},
         {"initial_loss", rep.initial_loss},
         {"final_loss", rep.final_loss}};
  if (rep.lambda)
    j["lambda"] = *rep.lambda;
  else
    j["lambda"] = nullptr; // float baseline
  if (with_losses)
    j["losses"] = rep.losses;
  return j;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"denoising affine quantization toolkit"};
  app.require_subcommand(1);

  // --- gen -----------------------------------------------------------
  auto *gen = app.add_subcommand("gen", "write a random tensor file");
  std::string gen_out;
  std::vector<std::size_t> gen_shape{64, 64};
  std::uint64_t gen_seed = 0;
  std::string gen_dist = "gaussian";
  double gen_scale = 1.0;
  gen->add_option("--out", gen_out, "output .dqt path")->required();
  gen->add_option("--shape", gen_shape, "dimensions")->delimiter(',');
  gen->add_option("--seed", gen_seed, "rng seed");
  gen->add_option("--dist", gen_dist, "gaussian | uniform")
      ->check(CLI::IsMember({"gaussian", "uniform"}));
  gen->add_option("--scale", gen_scale, "scale factor");

  // --- quantize / dequantize -----------------------------------------
  auto *quant = app.add_subcommand("quantize", "quantize a tensor file");
  std::string q_in, q_out, q_report;
  dq::QuantConfig q_cfg;
  int q_axis = -1;
  std::string q_round = "even", q_coeff = "full", q_mn;
  SparsitySpec q_sp;
  quant->add_option("--in", q_in, "input .dqt")->required();
  quant->add_option("--out", q_out, "output .dqz container");
  quant->add_option("--bits", q_cfg.bits, "code bits, 1..8");
  quant->add_option("--block-size", q_cfg.block_size, "block length B");
  quant->add_option("--lambda", q_cfg.lambda, "ridge regularizer");
  quant->add_option("--epsilon", q_cfg.epsilon, "range guard");
  quant->add_option("--axis", q_axis, "blocked axis (default: last)");
  quant->add_option("--round", q_round, "even | away")
      ->check(CLI::IsMember({"even", "away"}));
  quant->add_option("--coeff", q_coeff, "full | e5m2")
      ->check(CLI::IsMember({"full", "e5m2"}));
  quant->add_option("--mode", q_sp.mode,
                    "sparsity: none | toward-mean | zero | structured")
      ->check(CLI::IsMember({"none", "toward-mean", "zero", "structured"}));
  quant->add_option("--sparsity", q_sp.fraction, "fraction for unstructured modes");
  quant->add_option("--mn", q_mn, "M:N for structured mode, e.g. 2:4");
  quant->add_option("--report", q_report, "metrics JSON path (default: stdout)");

  auto *dequant = app.add_subcommand("dequantize", "reconstruct a .dqz to .dqt");
  std::string dq_in, dq_out;
  dequant->add_option("--in", dq_in, "input .dqz")->required();
  dequant->add_option("--out", dq_out, "output .dqt")->required();

  // --- sweep ----------------------------------------------------------
  auto *sweep = app.add_subcommand("sweep", "quantization grid sweep to CSV");
  std::string s_in, s_out, s_mn;
  std::vector<int> s_bits{1, 2, 4, 8};
  std::vector<std::size_t> s_blocks{32, 128, 512};
  std::vector<double> s_lambdas{0.01};
  std::vector<double> s_fractions;
  std::string s_mode = "none";
  int s_axis = -1;
  sweep->add_option("--in", s_in, "input .dqt")->required();
  sweep->add_option("--out", s_out, "output CSV path (default: stdout)");
  sweep->add_option("--bits", s_bits, "bits grid")->delimiter(',');
  sweep->add_option("--block-sizes", s_blocks, "block size grid")->delimiter(',');
  sweep->add_option("--lambdas", s_lambdas, "lambda grid")->delimiter(',');
  sweep->add_option("--mode", s_mode,
                    "sparsity mode applied across --fractions / --mn")
      ->check(CLI::IsMember({"none", "toward-mean", "zero", "structured"}));
  sweep->add_option("--fractions", s_fractions, "sparsity fraction grid")
      ->delimiter(',');
  sweep->add_option("--mn", s_mn, "M:N for structured mode");
  sweep->add_option("--axis", s_axis, "blocked axis (default: last)");

  // --- matmul ----------------------------------------------------------
  auto *mm = app.add_subcommand("matmul", "blockwise quantized matmul sweep");
  std::string m_x, m_w, m_report;
  std::vector<int> m_bits{1, 4, 8};
  std::vector<std::size_t> m_blocks{32, 128};
  std::vector<double> m_lambdas{0.01};
  mm->add_option("--x", m_x, "activations .dqt")->required();
  mm->add_option("--w", m_w, "weights .dqt")->required();
  mm->add_option("--bits", m_bits, "bits grid")->delimiter(',');
  mm->add_option("--block-sizes", m_blocks, "block size grid")->delimiter(',');
  mm->add_option("--lambdas", m_lambdas, "lambda grid")->delimiter(',');
  mm->add_option("--report", m_report, "reports JSON path (default: stdout)");

  // --- train ------------------------------------------------------------
  auto *train = app.add_subcommand("train", "desk-scale stability experiment");
  std::string t_task = "regression", t_report, t_loss_csv;
  std::vector<int> t_bits{1, 1};
  std::vector<double> t_lambdas{0.01};
  int t_steps = 2000;
  std::uint64_t t_seed = 0;
  double t_lr = 0.05;
  int t_batch = 32;
  bool t_no_baseline = false;
  train->add_option("--task", t_task, "regression | two-moons")
      ->check(CLI::IsMember({"regression", "two-moons"}));
  train->add_option("--bits", t_bits, "activation and weight bits, e.g. 1 1")
      ->expected(2);
  train->add_option("--lambdas", t_lambdas, "lambda values")->delimiter(',');
  train->add_option("--steps", t_steps, "training steps");
  train->add_option("--seed", t_seed, "rng seed");
  train->add_option("--lr", t_lr, "learning rate");
  train->add_option("--batch", t_batch, "minibatch size");
  train->add_flag("--no-baseline", t_no_baseline, "skip the float baseline run");
  train->add_option("--report", t_report, "reports JSON path (default: stdout)");
  train->add_option("--loss-csv", t_loss_csv, "per-step losses CSV path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      dq::Rng rng(gen_seed);
      dq::Tensor t(gen_shape);
      for (auto &v : t.data)
        v = static_cast<float>(
            (gen_dist == "gaussian" ? rng.gaussian() : rng.uniform(-1.0, 1.0)) *
            gen_scale);
      dq::save_tensor(t, gen_out);
      return 0;
    }

    if (*quant) {
      q_cfg.rounding = q_round == "even" ? dq::Rounding::half_to_even
                                         : dq::Rounding::half_away_from_zero;
      q_cfg.coeff_precision = q_coeff == "full"
                                  ? dq::CoeffPrecision::full
                                  : dq::CoeffPrecision::e5m2_simulated;
      q_cfg.validate();
      if (!q_mn.empty()) {
        if (!parse_mn(q_mn, q_sp.m, q_sp.n))
          throw dq::Error(dq::ErrorCode::invalid_config,
                          "--mn expects M:N, e.g. 2:4");
        if (q_sp.mode == "none")
          q_sp.mode = "structured";
      }
      dq::Tensor t = dq::load_tensor(q_in);
      if (t.rank() == 0)
        throw dq::Error(dq::ErrorCode::invalid_config,
                        "cannot block a scalar tensor");
      const std::size_t axis =
          q_axis < 0 ? t.rank() - 1 : static_cast<std::size_t>(q_axis);
      dq::QuantSummary s =
          quantize_to_file(t, axis, q_cfg, q_sp.to_config(), q_out);
      emit_report(summary_json(s), q_report);
      return 0;
    }

    if (*dequant) {
      dq::QuantContainer c = dq::read_container(dq_in);
      dq::save_tensor(dq::dequantize_tensor(c.qt), dq_out);
      return 0;
    }

    if (*sweep) {
      dq::Tensor t = dq::load_tensor(s_in);
      if (t.rank() == 0)
        throw dq::Error(dq::ErrorCode::invalid_config,
                        "cannot block a scalar tensor");
      const std::size_t axis =
          s_axis < 0 ? t.rank() - 1 : static_cast<std::size_t>(s_axis);

      struct GridPoint {
        int bits;
        std::size_t block;
        double lambda;
        std::optional<dq::SparsityConfig> scfg;
        std::string sparsity_label;
      };
      std::vector<GridPoint> grid;
      std::vector<std::pair<std::optional<dq::SparsityConfig>, std::string>>
          sparsities;
      if (s_mode == "none") {
        sparsities.push_back({std::nullopt, "none"});
      } else if (s_mode == "structured") {
        SparsitySpec sp;
        sp.mode = s_mode;
        if (!s_mn.empty() && !parse_mn(s_mn, sp.m, sp.n))
          throw dq::Error(dq::ErrorCode::invalid_config,
                          "--mn expects M:N, e.g. 2:4");
        sparsities.push_back(
            {sp.to_config(), std::to_string(sp.m) + ":" + std::to_string(sp.n)});
      } else {
        if (s_fractions.empty())
          s_fractions = {0.5};
        for (double f : s_fractions) {
          SparsitySpec sp;
          sp.mode = s_mode;
          sp.fraction = f;
          sparsities.push_back({sp.to_config(), std::to_string(f)});
        }
      }
      for (int bits : s_bits)
        for (std::size_t bs : s_blocks)
          for (double l : s_lambdas)
            for (auto &[scfg, label] : sparsities)
              grid.push_back({bits, bs, l, scfg, label});

      std::vector<dq::QuantSummary> results(grid.size());
      std::atomic<bool> failed{false};
      std::string error_text;
      std::mutex error_mutex;
      parallel_for(grid.size(), [&](std::size_t i) {
        try {
          dq::QuantConfig cfg;
          cfg.bits = grid[i].bits;
          cfg.block_size = grid[i].block;
          cfg.lambda = grid[i].lambda;
          results[i] = quantize_to_file(t, axis, cfg, grid[i].scfg, "");
        } catch (const std::exception &e) {
          std::lock_guard<std::mutex> lock(error_mutex);
          failed = true;
          error_text = e.what();
        }
      });
      if (failed)
        throw dq::Error(dq::ErrorCode::invalid_config, error_text);

      std::string csv = "bits,block_size,lambda,sparsity_mode,sparsity,"
                        "mse,max_abs_err,effective_bits,mean_kappa,max_kappa\n";
      for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto &g = grid[i];
        const auto &r = results[i];
        csv += std::to_string(g.bits) + "," + std::to_string(g.block) + "," +
               std::to_string(g.lambda) + "," + s_mode + "," +
               g.sparsity_label + "," + std::to_string(r.mse) + "," +
               std::to_string(r.max_abs_err) + "," +
               std::to_string(r.effective_bits) + "," +
               std::to_string(r.mean_kappa) + "," +
               std::to_string(r.max_kappa) + "\n";
      }
      if (!s_out.empty())
        write_text(s_out, csv);
      else
        std::cout << csv;
      return 0;
    }

    if (*mm) {
      dq::Tensor X = dq::load_tensor(m_x);
      dq::Tensor W = dq::load_tensor(m_w);
      auto reports = dq::matmul_sweep(X, W, m_bits, m_blocks, m_lambdas);
      json j = json::array();
      for (const auto &r : reports)
        j.push_back({{"bits", r.bits},
                     {"block_size", r.block_size},
                     {"lambda", r.lambda},
                     {"max_abs_err", r.max_abs_err},
                     {"rel_frobenius_err", r.rel_frobenius_err},
                     {"effective_bits_x", r.effective_bits_x},
                     {"effective_bits_w", r.effective_bits_w}});
      emit_report(j, m_report);
      return 0;
    }

    if (*train) {
      dq::ExperimentConfig cfg;
      cfg.task = t_task == "regression" ? dq::Task::synthetic_regression
                                        : dq::Task::two_moons_classification;
      cfg.act_bits = t_bits[0];
      cfg.weight_bits = t_bits[1];
      cfg.lambda_values = t_lambdas;
      cfg.steps = t_steps;
      cfg.seed = t_seed;
      cfg.learning_rate = t_lr;
      cfg.batch_size = t_batch;
      cfg.include_baseline = !t_no_baseline;
      auto reports = dq::run_experiment(cfg);

      json j = json::array();
      for (const auto &rep : reports)
        j.push_back(report_json(rep, false));
      emit_report(j, t_report);

      if (!t_loss_csv.empty()) {
        std::string csv = "step";
        for (const auto &rep : reports)
          csv += rep.lambda ? (",lambda_" + std::to_string(*rep.lambda))
                            : ",baseline";
        csv += "\n";
        for (int s = 0; s < t_steps; ++s) {
          csv += std::to_string(s);
          for (const auto &rep : reports)
            csv += "," + std::to_string(rep.losses[s]);
          csv += "\n";
        }
        write_text(t_loss_csv, csv);
      }

      // quantized runs with lambda > 0 must stay finite
      for (const auto &rep : reports)
        if (rep.lambda && *rep.lambda > 0 && !rep.finite) {
          std::cerr << "dq train: lambda " << *rep.lambda
                    << " run diverged\n";
          return 4;
        }
      return 0;
    }
  } catch (const dq::Error &e) {
    std::cerr << "dq: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception &e) {
    std::cerr << "dq: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
