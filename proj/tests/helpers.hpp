#pragma once

#include "dq/rng.hpp"

#include <cmath>
#include <cstddef>
#include <vector>

// Test-side oracles, independent of the library's solve path.

namespace oracle {

struct Ridge {
  double a = 0;
  double b = 0;
};

// Explicit 2x2 normal-equations solve of the ridge stationarity system
//   [ mean(q^2) + lambda   mean(q) ] [a]   [ mean(xq) ]
//   [ mean(q)              1       ] [b] = [ mean(x)  ]
inline Ridge ridge_normal_equations(const std::vector<double> &x,
                                    const std::vector<double> &q,
                                    double lambda) {
  const double n = static_cast<double>(x.size());
  double sq = 0, sqq = 0, sx = 0, sxq = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sq += q[i];
    sqq += q[i] * q[i];
    sx += x[i];
    sxq += x[i] * q[i];
  }
  const double a11 = sqq / n + lambda, a12 = sq / n;
  const double a21 = sq / n, a22 = 1.0;
  const double r1 = sxq / n, r2 = sx / n;
  const double det = a11 * a22 - a12 * a21;
  Ridge out;
  out.a = (r1 * a22 - a12 * r2) / det;
  out.b = (a11 * r2 - r1 * a21) / det;
  return out;
}

// ridge objective (1/2N)||a q + b - x||^2 + (lambda/2) a^2
inline double ridge_objective(const std::vector<double> &x,
                              const std::vector<double> &q, double a, double b,
                              double lambda) {
  double se = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = a * q[i] + b - x[i];
    se += e * e;
  }
  return se / (2.0 * static_cast<double>(x.size())) + 0.5 * lambda * a * a;
}

} // namespace oracle

namespace gen {

enum class Dist { gaussian, uniform, heavy_tailed };

inline std::vector<float> block(dq::Rng &rng, std::size_t n, Dist dist,
                                double scale = 1.0) {
  std::vector<float> x(n);
  for (auto &v : x) {
    double s = 0;
    switch (dist) {
    case Dist::gaussian:
      s = rng.gaussian();
      break;
    case Dist::uniform:
      s = rng.uniform(-1.0, 1.0);
      break;
    case Dist::heavy_tailed: {
      const double g = rng.gaussian();
      s = g * g * g; // cubed gaussian: heavy tails
      break;
    }
    }
    v = static_cast<float>(s * scale);
  }
  return x;
}

inline Dist dist_cycle(std::size_t i) {
  switch (i % 3) {
  case 0:
    return Dist::gaussian;
  case 1:
    return Dist::uniform;
  default:
    return Dist::heavy_tailed;
  }
}

} // namespace gen
