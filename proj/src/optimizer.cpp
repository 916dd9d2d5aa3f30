#include "popk/optimizer.hpp"

#include <cmath>

namespace popk::detail {

namespace {

double inf_norm(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

BfgsResult minimize_bfgs(const ObjectiveFn& objective, const GradientFn& grad, Eigen::VectorXd x0,
                         const BfgsOptions& opts, const Eigen::MatrixXd& hessian0) {
  BfgsResult res;
  const auto n = x0.size();
  int evaluations = 0;
  const ObjectiveFn f = [&](const Eigen::VectorXd& x) {
    ++evaluations;
    return objective(x);
  };

  res.x = std::move(x0);
  res.f = f(res.x);
  if (!std::isfinite(res.f)) {
    res.message = "objective is not finite at the starting point";
    res.evaluations = evaluations;
    return res;
  }
  if (n == 0) {
    res.converged = true;
    res.gradient = Eigen::VectorXd();
    res.evaluations = evaluations;
    res.message = "no free parameters";
    return res;
  }

  Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd hinv = identity;
  bool seeded = false;
  if (hessian0.rows() == n && hessian0.cols() == n) {
    Eigen::LLT<Eigen::MatrixXd> llt(hessian0);
    if (llt.info() == Eigen::Success) {
      hinv = llt.solve(identity);
      seeded = true;
    }
  }
  bool scaled = seeded;

  res.gradient = grad(res.x, res.f, f);
  double last_step = std::numeric_limits<double>::infinity();
  double last_change = std::numeric_limits<double>::infinity();

  for (int iter = 0;; ++iter) {
    const double gnorm = inf_norm(res.gradient);
    const bool grad_ok = gnorm <= opts.gradient_tol;
    const bool done = iter == 0 ? grad_ok
                                : grad_ok && last_step <= opts.step_tol && last_change <= opts.f_rel_tol;
    if (done) {
      res.converged = true;
      res.message = "converged";
      break;
    }
    if (gnorm == 0.0 || !std::isfinite(gnorm)) {
      res.converged = std::isfinite(gnorm);
      res.message = res.converged ? "zero gradient" : "gradient is not finite";
      break;
    }
    if (iter >= opts.max_iterations) {
      res.message = "maximum iterations reached";
      break;
    }
    if (evaluations >= opts.max_evaluations) {
      res.message = "maximum evaluations reached";
      break;
    }

    bool accepted = false;
    const bool curvature_known = scaled;
    const double predicted = 0.5 * res.gradient.dot(hinv * res.gradient);
    Eigen::VectorXd x_new;
    double f_new = 0.0;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      Eigen::VectorXd d = -hinv * res.gradient;
      double slope = res.gradient.dot(d);
      if (!(slope < 0.0)) {
        hinv = identity;
        d = -res.gradient;
        slope = res.gradient.dot(d);
      }
      const double dmax = inf_norm(d);
      if (dmax > opts.max_step) {
        d *= opts.max_step / dmax;
        slope *= opts.max_step / dmax;
      }
      double alpha = 1.0;
      for (int bt = 0; bt < 50; ++bt) {
        x_new = res.x + alpha * d;
        f_new = f(x_new);
        if (std::isfinite(f_new) && f_new <= res.f + 1e-4 * alpha * slope) {
          accepted = true;
          break;
        }
        alpha *= 0.5;
        if (alpha * dmax < 1e-16 * (1.0 + inf_norm(res.x))) break;
      }
      if (!accepted) {
        // retry once along steepest descent
        if (hinv.isApprox(identity)) break;
        hinv = identity;
      }
    }
    res.iterations = iter + 1;
    if (!accepted) {
      const bool flat = curvature_known && predicted >= 0.0 &&
                        predicted <= opts.stall_f_rel_tol * std::max(1.0, std::abs(res.f));
      res.converged = gnorm <= opts.stall_gradient_tol || flat;
      res.message = res.converged ? "converged (line search at noise floor)" : "line search failed";
      break;
    }

    const Eigen::VectorXd s = x_new - res.x;
    Eigen::VectorXd g_new = grad(x_new, f_new, f);
    const Eigen::VectorXd y = g_new - res.gradient;
    last_step = inf_norm(s);
    last_change = std::abs(res.f - f_new) / std::max(1.0, std::abs(f_new));
    res.x = x_new;
    res.f = f_new;
    res.gradient = std::move(g_new);

    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        hinv = identity * (sy / y.dot(y));
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd a = identity - rho * s * y.transpose();
      hinv = a * hinv * a.transpose() + rho * s * s.transpose();
    }
  }
  res.evaluations = evaluations;
  return res;
}

Eigen::VectorXd central_gradient(const ObjectiveFn& f, const Eigen::VectorXd& x, double h) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double step = h * std::max(1.0, std::abs(x[i]));
    xp[i] = x[i] + step;
    const double fp = f(xp);
    xp[i] = x[i] - step;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

Eigen::MatrixXd central_hessian(const ObjectiveFn& f, const Eigen::VectorXd& x, double h) {
  const auto n = x.size();
  Eigen::MatrixXd hess(n, n);
  Eigen::VectorXd step(n);
  for (Eigen::Index i = 0; i < n; ++i) step[i] = h * std::max(1.0, std::abs(x[i]));
  const double f0 = f(x);
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < n; ++i) {
    xp[i] = x[i] + step[i];
    const double fp = f(xp);
    xp[i] = x[i] - step[i];
    const double fm = f(xp);
    xp[i] = x[i];
    hess(i, i) = (fp - 2.0 * f0 + fm) / (step[i] * step[i]);
    for (Eigen::Index j = 0; j < i; ++j) {
      auto eval = [&](double si, double sj) {
        xp[i] = x[i] + si * step[i];
        xp[j] = x[j] + sj * step[j];
        const double v = f(xp);
        xp[i] = x[i];
        xp[j] = x[j];
        return v;
      };
      const double v = (eval(1, 1) - eval(1, -1) - eval(-1, 1) + eval(-1, -1)) / (4.0 * step[i] * step[j]);
      hess(i, j) = v;
      hess(j, i) = v;
    }
  }
  return hess;
}

}  // namespace popk::detail
