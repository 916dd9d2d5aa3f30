#pragma once

// Reference computations written independently of the library code paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

// Depot + central compartment, RK4 with a fixed number of steps.
//   dA/dt = -ka A,  dC/dt = ka A / V - ke C,  A(0) = F dose, C(0) = 0
inline double rk4_one_compartment(double ka, double ke, double v, double f, double dose, double t,
                                  int steps = 20000) {
  double a = f * dose, c = 0.0;
  const double h = t / steps;
  auto da = [&](double a_) { return -ka * a_; };
  auto dc = [&](double a_, double c_) { return ka * a_ / v - ke * c_; };
  for (int i = 0; i < steps; ++i) {
    const double k1a = da(a), k1c = dc(a, c);
    const double k2a = da(a + 0.5 * h * k1a), k2c = dc(a + 0.5 * h * k1a, c + 0.5 * h * k1c);
    const double k3a = da(a + 0.5 * h * k2a), k3c = dc(a + 0.5 * h * k2a, c + 0.5 * h * k2c);
    const double k4a = da(a + h * k3a), k4c = dc(a + h * k3a, c + h * k3c);
    a += h / 6.0 * (k1a + 2 * k2a + 2 * k3a + k4a);
    c += h / 6.0 * (k1c + 2 * k2c + 2 * k3c + k4c);
  }
  return c;
}

inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol,
                               int depth = 50) {
  auto simpson = [&](double fa, double fm, double fb, double lo, double hi) {
    return (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
  };
  std::function<double(double, double, double, double, double, double, double, int)> rec =
      [&](double lo, double hi, double fa, double fm, double fb, double whole, double eps, int d) {
        const double m = 0.5 * (lo + hi);
        const double lm = 0.5 * (lo + m), rm = 0.5 * (m + hi);
        const double flm = f(lm), frm = f(rm);
        const double left = simpson(fa, flm, fm, lo, m), right = simpson(fm, frm, fb, m, hi);
        if (d <= 0 || std::abs(left + right - whole) <= 15.0 * eps) {
          return left + right + (left + right - whole) / 15.0;
        }
        return rec(lo, m, fa, flm, fm, left, 0.5 * eps, d - 1) + rec(m, hi, fm, frm, fb, right, 0.5 * eps, d - 1);
      };
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, depth);
}

// Gauss-Hermite nodes for weight exp(-x^2) from the eigenvalues of the
// Jacobi matrix (Golub-Welsch). Returned weights are scaled, w_i exp(x_i^2),
// computed from the Christoffel function with normalized Hermite functions
// so that the outermost nodes keep full relative precision.
inline std::pair<std::vector<double>, std::vector<double>> gauss_hermite_scaled(int n) {
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    j(i, i - 1) = j(i - 1, i) = std::sqrt(i / 2.0);
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j, Eigen::EigenvaluesOnly);
  std::vector<double> x(n), w(n);
  for (int i = 0; i < n; ++i) {
    x[i] = es.eigenvalues()[i];
    double prev = 0.0, cur = std::pow(M_PI, -0.25) * std::exp(-0.5 * x[i] * x[i]);
    double sum = cur * cur;
    for (int k = 0; k + 1 < n; ++k) {
      const double next = std::sqrt(2.0 / (k + 1)) * x[i] * cur - std::sqrt(static_cast<double>(k) / (k + 1)) * prev;
      prev = cur;
      cur = next;
      sum += cur * cur;
    }
    w[i] = 1.0 / sum;
  }
  return {x, w};
}

// -2 log of the integral of exp(-h(eta)/2) over eta, adaptive Gauss-Hermite
// centred at the minimum of h with the Laplace curvature as scale.
inline double adaptive_gh_neg2log(const std::function<double(double)>& h, int nodes = 64) {
  // Golden-section search for the mode on a wide bracket.
  double lo = -10.0, hi = 10.0;
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = hi - gr * (hi - lo), d = lo + gr * (hi - lo);
  for (int i = 0; i < 200; ++i) {
    if (h(c) < h(d)) hi = d;
    else lo = c;
    c = hi - gr * (hi - lo);
    d = lo + gr * (hi - lo);
  }
  const double mode = 0.5 * (lo + hi);
  const double step = 1e-4;
  const double curv = (h(mode + step) - 2.0 * h(mode) + h(mode - step)) / (step * step);
  const double s = std::sqrt(2.0 / curv);  // posterior sd of exp(-h/2)
  const auto [x, w] = gauss_hermite_scaled(nodes);
  const double hmin = h(mode);
  double sum = 0.0;
  for (int i = 0; i < nodes; ++i) {
    const double eta = mode + std::sqrt(2.0) * s * x[i];
    sum += w[i] * std::exp(-0.5 * (h(eta) - hmin));
  }
  const double integral_log = std::log(std::sqrt(2.0) * s * sum) - 0.5 * hmin;
  return -2.0 * integral_log;
}

// Exact binomial coefficient in long double by the multiplicative formula.
inline long double choose(long n, long k) {
  if (k < 0 || k > n) return 0.0L;
  k = std::min(k, n - k);
  long double r = 1.0L;
  for (long i = 1; i <= k; ++i) r = r * static_cast<long double>(n - k + i) / static_cast<long double>(i);
  return r;
}

// Fisher exact test by listing every table with the observed margins.
// side: 0 two-sided (point probability), 1 greater, -1 less.
inline double fisher_enumerate(long a, long b, long c, long d, int side) {
  const long r1 = a + b, r2 = c + d, c1 = a + c, n = r1 + r2;
  const long double total = choose(n, c1);
  const long double p_obs = choose(r1, a) * choose(r2, c1 - a) / total;
  long double p = 0.0L;
  for (long x = std::max(0L, c1 - r2); x <= std::min(r1, c1); ++x) {
    const long double px = choose(r1, x) * choose(r2, c1 - x) / total;
    if (side == 1 && x >= a) p += px;
    if (side == -1 && x <= a) p += px;
    if (side == 0 && px <= p_obs * (1.0L + 1e-7L)) p += px;
  }
  return static_cast<double>(p);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// One-sample Kolmogorov-Smirnov test against N(0, 1); returns the p-value
// from the asymptotic Kolmogorov distribution with Stephens' correction.
inline double ks_normal_pvalue(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double dmax = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = normal_cdf(v[i]);
    dmax = std::max({dmax, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * dmax;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  }
  return std::clamp(p, 0.0, 1.0);
}

inline double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double sd(const std::vector<double>& v) {
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace oracle
