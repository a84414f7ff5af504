#ifndef SSANOVA_MSVM_HPP
#define SSANOVA_MSVM_HPP

#include <ssanova/qp.hpp>

// Multicategory support vector machine: labels coded as k-vectors with 1 at
// the true category and -1/(k-1) elsewhere, a symmetric misclassification
// cost, a weighted hinge objective, and training via a slack-QP with the
// pointwise sum-to-zero constraint eliminated through coefficient sums.
namespace ssanova {

inline VectorXd coded_label(int category, int k) {
  if (k < 2 || category < 1 || category > k) throw config_error("coded_label: bad category");
  VectorXd v = VectorXd::Constant(k, -1.0 / (k - 1));
  v(category - 1) = 1.0;
  return v;
}

// (1/n) sum_i sum_{r != cat(i)} (f_ir + 1/(k-1))_+  +  lambda * sum_j h_sq_norms_j
inline double msvm_objective(const MatrixXd& f, const std::vector<int>& labels, double lambda,
                             const VectorXd& h_sq_norms) {
  const int n = static_cast<int>(f.rows()), k = static_cast<int>(f.cols());
  if (static_cast<int>(labels.size()) != n) throw data_error("msvm_objective: label count");
  if (h_sq_norms.size() != k) throw config_error("msvm_objective: need k squared norms");
  if (lambda < 0.0) throw config_error("msvm_objective: lambda >= 0 required");
  double hinge = 0.0;
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 1 || labels[i] > k) throw data_error("msvm_objective: bad label");
    for (int r = 0; r < k; ++r)
      if (r != labels[i] - 1) hinge += std::max(f(i, r) + 1.0 / (k - 1), 0.0);
  }
  return hinge / n + lambda * h_sq_norms.sum();
}

struct MsvmModel {
  MatrixXd c;       // n x k, rows sum to zero
  VectorXd d;       // k intercepts, summing to zero
  double lambda = 0.0;
  double kkt_residual = 0.0;
  double gap = 0.0;
  bool converged = false;
};

// decision values at points given their cross-kernel block K(points, train)
inline MatrixXd decision_values(const MatrixXd& cross_gram, const MsvmModel& model) {
  return (cross_gram * model.c).rowwise() + model.d.transpose();
}

inline std::vector<int> classify(const MatrixXd& f) {
  std::vector<int> out(f.rows());
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    int best = 0;
    for (int j = 1; j < f.cols(); ++j)
      if (f(i, j) > f(i, best)) best = j;  // strict: ties keep the lowest index
    out[i] = best + 1;
  }
  return out;
}

inline std::vector<int> classify(const MatrixXd& cross_gram, const MsvmModel& model) {
  return classify(decision_values(cross_gram, model));
}

inline VectorXd bayes_target(const VectorXd& p) {
  const int k = static_cast<int>(p.size());
  if (k < 2) throw config_error("bayes_target: needs k >= 2");
  double total = 0.0;
  for (int j = 0; j < k; ++j) {
    if (p(j) < 0.0) throw data_error("bayes_target: negative probability");
    total += p(j);
  }
  if (std::abs(total - 1.0) > 1e-9) throw data_error("bayes_target: probabilities must sum to 1");
  int best = 0;
  for (int j = 1; j < k; ++j)
    if (p(j) > p(best)) best = j;
  return coded_label(best + 1, k);
}

// Training QP after eliminating the sum-to-zero constraint (column k of c and
// d_k are the negated sums of the others):
//   variables  x = [vec(C) (n(k-1)), d (k-1), xi (n(k-1))]
//   penalty    lambda vec(C)' [(I + 11') kron K] vec(C)
//   hinges     xi_ir >= f^r(t_i) + 1/(k-1) for r != cat(i), xi >= 0
inline MsvmModel fit_msvm(const MatrixXd& gram, const std::vector<int>& labels, double lambda,
                          int k, const QpOptions& qp_opts = {}) {
  const int n = static_cast<int>(gram.rows());
  if (gram.cols() != n) throw data_error("fit_msvm: gram must be square");
  if (static_cast<int>(labels.size()) != n) throw data_error("fit_msvm: label count mismatch");
  if (k < 2) throw config_error("fit_msvm: k >= 2 required");
  if (!(lambda > 0.0)) throw config_error("fit_msvm: lambda > 0 required");
  for (int lab : labels)
    if (lab < 1 || lab > k) throw data_error("fit_msvm: labels must lie in 1..k");

  const int km1 = k - 1;
  const int nc = n * km1;           // coefficient block
  const int nxi = n * (k - 1);     // one slack per (i, r != cat(i))
  const int dim = nc + km1 + nxi;

  MatrixXd p = MatrixXd::Zero(dim, dim);
  for (int a = 0; a < km1; ++a)
    for (int b = 0; b < km1; ++b)
      p.block(a * n, b * n, n, n) = (2.0 * lambda) * ((a == b ? 2.0 : 1.0) * gram);
  VectorXd q = VectorXd::Zero(dim);
  q.tail(nxi).setConstant(1.0 / n);

  // decision value f^r(t_i) as a linear form in x
  const auto add_f_row = [&](MatrixXd& gmat, int row, int i, int r, double sign) {
    if (r < km1) {
      gmat.block(row, r * n, 1, n) += sign * gram.row(i);
      gmat(row, nc + r) += sign;
    } else {  // category k: negated sum of the others
      for (int j = 0; j < km1; ++j) {
        gmat.block(row, j * n, 1, n) -= sign * gram.row(i);
        gmat(row, nc + j) -= sign;
      }
    }
  };

  const int mrows = 2 * nxi;
  MatrixXd gmat = MatrixXd::Zero(mrows, dim);
  VectorXd h = VectorXd::Zero(mrows);
  int row = 0, slack = 0;
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < k; ++r) {
      if (r == labels[i] - 1) continue;
      // f^r(t_i) + 1/(k-1) - xi <= 0
      add_f_row(gmat, row, i, r, 1.0);
      gmat(row, nc + km1 + slack) = -1.0;
      h(row) = -1.0 / (k - 1);
      ++row;
      // -xi <= 0
      gmat(row, nc + km1 + slack) = -1.0;
      h(row) = 0.0;
      ++row;
      ++slack;
    }

  const QpResult sol = solve_qp(p, q, gmat, h, qp_opts);

  MsvmModel model;
  model.lambda = lambda;
  model.kkt_residual = sol.kkt_residual;
  model.gap = sol.gap;
  model.converged = sol.converged;
  model.c.resize(n, k);
  model.d.resize(k);
  for (int j = 0; j < km1; ++j) {
    model.c.col(j) = sol.x.segment(j * n, n);
    model.d(j) = sol.x(nc + j);
  }
  model.c.col(k - 1) = -model.c.leftCols(km1).rowwise().sum();
  model.d(k - 1) = -model.d.head(km1).sum();
  return model;
}

}  // namespace ssanova

#endif  // SSANOVA_MSVM_HPP
