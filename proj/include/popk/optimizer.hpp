#pragma once

#include <functional>
#include <limits>
#include <string>

#include <Eigen/Dense>

namespace popk::detail {

struct BfgsOptions {
  int max_iterations = 500;
  int max_evaluations = 100000;
  double gradient_tol = 1e-8;   // infinity norm
  double step_tol = 1e-8;       // infinity norm of the accepted step
  // Relative objective change required in addition to the gradient test;
  // infinity disables it.
  double f_rel_tol = std::numeric_limits<double>::infinity();
  double max_step = 2.0;        // cap on the infinity norm of a trial step
  // When the line search stalls, the run still counts as converged if the
  // gradient is below this (numerical noise floor).
  double stall_gradient_tol = 1e-6;
  // When the line search stalls, the run also counts as converged if the
  // quasi-Newton predicted decrease is below this relative to |f|; 0 disables.
  double stall_f_rel_tol = 0.0;
};

struct BfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd gradient;
  bool converged = false;
  int iterations = 0;
  int evaluations = 0;
  std::string message;
};

using ObjectiveFn = std::function<double(const Eigen::VectorXd&)>;
// Gradient at x given f(x). The third argument is the objective wrapped with
// the evaluation counter; finite-difference gradients should call it.
using GradientFn =
    std::function<Eigen::VectorXd(const Eigen::VectorXd&, double, const ObjectiveFn&)>;

// Quasi-Newton minimization with Armijo backtracking. Non-finite objective
// values are treated as rejected trial points. hessian0 seeds the BFGS
// approximation (identity when empty).
BfgsResult minimize_bfgs(const ObjectiveFn& f, const GradientFn& grad, Eigen::VectorXd x0,
                         const BfgsOptions& opts, const Eigen::MatrixXd& hessian0 = {});

// Central differences with step h * max(1, |x_i|). Costs 2n evaluations.
Eigen::VectorXd central_gradient(const ObjectiveFn& f, const Eigen::VectorXd& x, double h);

// Central-difference Hessian with step h. Costs 2n^2 + 1 evaluations at most.
Eigen::MatrixXd central_hessian(const ObjectiveFn& f, const Eigen::VectorXd& x, double h);

}  // namespace popk::detail
