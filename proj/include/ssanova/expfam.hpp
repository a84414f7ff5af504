#ifndef SSANOVA_EXPFAM_HPP
#define SSANOVA_EXPFAM_HPP

#include <ssanova/gaussian.hpp>

#include <algorithm>
#include <functional>
#include <map>
#include <random>

// Penalized likelihood fitting for Bernoulli and polychotomous responses.
// Each Newton step solves a weighted penalized least-squares problem with
// working response z = f + W^{-1}(y - p), reusing the Gaussian solver via
// the W^{1/2} transform.
namespace ssanova {

struct convergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline double softplus(double f) { return f > 0.0 ? f + std::log1p(std::exp(-f)) : std::log1p(std::exp(f)); }

inline double logistic(double f) {
  if (f >= 0.0) return 1.0 / (1.0 + std::exp(-f));
  const double e = std::exp(f);
  return e / (1.0 + e);
}

// negative Bernoulli log likelihood: sum_i [log(1+e^{f_i}) - y_i f_i]
inline double bernoulli_nll(const VectorXd& f, const VectorXd& y) {
  if (f.size() != y.size()) throw data_error("bernoulli_nll: size mismatch");
  double s = 0.0;
  for (Eigen::Index i = 0; i < f.size(); ++i) s += softplus(f(i)) - y(i) * f(i);
  return s;
}

// negative polychotomous log likelihood over k non-reference categories:
// sum_i [ -sum_j y_ij f_ij + log(1 + sum_j e^{f_ij}) ]
inline double poly_nll(const MatrixXd& f, const MatrixXd& y) {
  if (f.rows() != y.rows() || f.cols() != y.cols()) throw data_error("poly_nll: shape mismatch");
  double s = 0.0;
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const double m = std::max(0.0, f.row(i).maxCoeff());
    double acc = std::exp(-m);
    for (Eigen::Index j = 0; j < f.cols(); ++j) acc += std::exp(f(i, j) - m);
    s += m + std::log(acc) - y.row(i).dot(f.row(i));
  }
  return s;
}

// probabilities (p_0 .. p_k) from the k logit surfaces; rows sum to 1
inline MatrixXd poly_probs(const MatrixXd& f) {
  MatrixXd p(f.rows(), f.cols() + 1);
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const double m = std::max(0.0, f.row(i).maxCoeff());
    double acc = std::exp(-m);
    for (Eigen::Index j = 0; j < f.cols(); ++j) acc += std::exp(f(i, j) - m);
    const double lse = m + std::log(acc);
    p(i, 0) = std::exp(-lse);
    for (Eigen::Index j = 0; j < f.cols(); ++j) p(i, j + 1) = std::exp(f(i, j) - lse);
  }
  return p;
}

struct NewtonOptions {
  int max_newton = 50;
  double obj_tol = 1e-9;    // relative penalized-objective change
  double grad_tol = 1e-8;   // gradient norm w.r.t. (c, d)
  int max_halvings = 30;
  double weight_floor = 1e-10;
};

namespace detail {

// one weighted penalized LS solve; returns (c, d) in the original coordinates
inline FitResult weighted_solve(const GramSet& g, const VectorXd& z, const VectorXd& w,
                                double lambda, const VectorXd& theta) {
  const VectorXd u = w.cwiseSqrt();
  GramSet wg;
  wg.T = u.asDiagonal() * g.T;
  wg.sigma.reserve(g.sigma.size());
  for (const auto& s : g.sigma) wg.sigma.push_back(u.asDiagonal() * s * u.asDiagonal());
  wg.labels = g.labels;
  wg.t_labels = g.t_labels;
  FitResult r = solve_penalized_ls(wg, u.cwiseProduct(z), lambda, theta);
  r.c = u.cwiseProduct(r.c);
  return r;
}

// Offset-Bernoulli Newton with step-halving: per-observation negative log
// likelihood softplus(f_i - s_i) - y_i (f_i - s_i), where s is held fixed.
// (s = 0 is the plain Bernoulli case; a polychotomous block uses
// s_i = log(1 + sum_{l != j} e^{f_il}).)
struct NewtonState {
  VectorXd c, d;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  double last_trace_a = 0.0;
};

inline double offset_objective(const GramSet& g, const MatrixXd& st, const VectorXd& y,
                               const VectorXd& s, double lambda, const VectorXd& c,
                               const VectorXd& d) {
  const VectorXd f = st * c + g.T * d;
  double nll = 0.0;
  for (Eigen::Index i = 0; i < f.size(); ++i)
    nll += softplus(f(i) - s(i)) - y(i) * (f(i) - s(i));
  return nll / g.n() + lambda * c.dot(st * c);
}

inline NewtonState newton_offset_bernoulli(const GramSet& g, const VectorXd& y,
                                           const VectorXd& s, double lambda,
                                           const VectorXd& theta, VectorXd c, VectorXd d,
                                           const NewtonOptions& opts) {
  if (!(lambda > 0.0)) throw config_error("newton fit needs lambda > 0");
  const int n = g.n();
  MatrixXd st = MatrixXd::Zero(n, n);
  for (int b = 0; b < g.p(); ++b) st += theta(b) * g.sigma[b];

  NewtonState state;
  state.c = std::move(c);
  state.d = std::move(d);
  state.objective = offset_objective(g, st, y, s, lambda, state.c, state.d);

  for (int it = 0; it < opts.max_newton; ++it) {
    const VectorXd f = st * state.c + g.T * state.d;
    VectorXd p(n), w(n);
    for (int i = 0; i < n; ++i) {
      p(i) = logistic(f(i) - s(i));
      w(i) = std::max(p(i) * (1.0 - p(i)), opts.weight_floor);
    }
    // gradient of the penalized objective w.r.t. (c, d)
    const VectorXd res = (p - y) / n;
    const double gnorm = std::hypot((st * (res + 2.0 * lambda * state.c)).norm(),
                                    (g.T.transpose() * res).norm());
    if (gnorm < opts.grad_tol) {
      state.converged = true;
      break;
    }

    const VectorXd z = f + (y - p).cwiseQuotient(w);
    // the second-order model of nll/n is (1/2n) sum w (z-f)^2, so the
    // Gaussian solver's (1/n)||.||^2 form needs lambda doubled
    const FitResult step = weighted_solve(g, z, w, 2.0 * lambda, theta);
    state.last_trace_a = step.trace_A;

    // step-halving toward the Newton target
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= opts.max_halvings; ++h, t *= 0.5) {
      const VectorXd cc = state.c + t * (step.c - state.c);
      const VectorXd dc = state.d + t * (step.d - state.d);
      const double obj = offset_objective(g, st, y, s, lambda, cc, dc);
      if (obj <= state.objective + 1e-14 * std::abs(state.objective)) {
        const double rel = std::abs(state.objective - obj) /
                           std::max(std::abs(state.objective), 1e-300);
        state.c = cc;
        state.d = dc;
        state.objective = obj;
        accepted = true;
        if (rel < opts.obj_tol) {
          state.converged = true;
          ++state.iterations;
          return state;
        }
        break;
      }
    }
    ++state.iterations;
    if (!accepted) {
      state.converged = true;  // no descent direction improves: at a minimum
      break;
    }
  }
  return state;
}

}  // namespace detail

struct IrlsResult {
  FitResult fit;
  double nll = 0.0;        // unpenalized negative log likelihood at the fit
  double objective = 0.0;  // nll/n + lambda c' Sigma_theta c
  int iterations = 0;
  bool separation_warning = false;
  VectorXd probabilities;
};

inline IrlsResult irls_fit(const GramSet& grams, const VectorXd& y, double lambda,
                           const VectorXd& theta, const NewtonOptions& opts = {}) {
  const int n = grams.n();
  if (y.size() != n) throw data_error("irls_fit: response size mismatch");
  for (int i = 0; i < n; ++i)
    if (y(i) != 0.0 && y(i) != 1.0) throw data_error("irls_fit: response must be 0/1");
  if (y.minCoeff() == y.maxCoeff())
    throw data_error("irls_fit: response needs at least one 0 and one 1");

  const VectorXd s = VectorXd::Zero(n);
  auto state = detail::newton_offset_bernoulli(grams, y, s, lambda, theta,
                                               VectorXd::Zero(n),
                                               VectorXd::Zero(grams.m0()), opts);
  if (!state.converged)
    throw convergence_error("irls_fit: no convergence after " +
                            std::to_string(state.iterations) +
                            " Newton steps, objective " + std::to_string(state.objective));
  IrlsResult out;
  out.fit.c = state.c;
  out.fit.d = state.d;
  out.fit.lambda = lambda;
  out.fit.theta = theta;
  out.fit.trace_A = state.last_trace_a;
  out.fit.sigma2_hat = std::numeric_limits<double>::quiet_NaN();
  out.fit.gcv = std::numeric_limits<double>::quiet_NaN();
  MatrixXd st = MatrixXd::Zero(n, n);
  for (int b = 0; b < grams.p(); ++b) st += theta(b) * grams.sigma[b];
  out.fit.fitted = st * state.c + grams.T * state.d;
  out.nll = bernoulli_nll(out.fit.fitted, y);
  out.objective = state.objective;
  out.iterations = state.iterations;
  out.separation_warning = out.fit.fitted.cwiseAbs().maxCoeff() > 30.0;
  out.probabilities = out.fit.fitted.unaryExpr([](double f) { return logistic(f); });
  return out;
}

struct PolyFitResult {
  std::vector<FitResult> fits;  // one per non-reference category
  MatrixXd f;                   // n x k fitted logit surfaces
  MatrixXd probabilities;       // n x (k+1), rows sum to 1
  double nll = 0.0;
  double objective = 0.0;
  std::vector<double> objective_trace;  // one entry per block cycle
  int cycles = 0;
  bool separation_warning = false;
};

// Blockwise Newton on the k logit surfaces: full Newton in block j with the
// other blocks fixed, cycling until the joint penalized objective settles.
inline PolyFitResult poly_fit(const std::vector<GramSet>& grams, const MatrixXd& y,
                              const std::vector<double>& lambdas,
                              const std::vector<VectorXd>& thetas,
                              const NewtonOptions& opts = {}, int max_cycles = 50) {
  const int k = static_cast<int>(grams.size());
  if (k < 1) throw config_error("poly_fit: needs at least one category block");
  if (y.cols() != k) throw data_error("poly_fit: indicator column count mismatch");
  if (static_cast<int>(lambdas.size()) != k || static_cast<int>(thetas.size()) != k)
    throw config_error("poly_fit: per-block lambda/theta lists must have k entries");
  const int n = grams[0].n();
  for (const auto& g : grams)
    if (g.n() != n) throw data_error("poly_fit: blocks disagree on n");
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    double rs = 0.0;
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      if (y(i, j) != 0.0 && y(i, j) != 1.0) throw data_error("poly_fit: indicators must be 0/1");
      rs += y(i, j);
    }
    if (rs != 0.0 && rs != 1.0) throw data_error("poly_fit: indicator row sums must be 0 or 1");
  }

  std::vector<MatrixXd> st(k);
  std::vector<VectorXd> c(k), d(k);
  for (int j = 0; j < k; ++j) {
    st[j] = MatrixXd::Zero(n, n);
    for (int b = 0; b < grams[j].p(); ++b) st[j] += thetas[j](b) * grams[j].sigma[b];
    c[j] = VectorXd::Zero(n);
    d[j] = VectorXd::Zero(grams[j].m0());
  }

  PolyFitResult out;
  out.f = MatrixXd::Zero(n, k);

  const auto joint_objective = [&]() {
    double obj = poly_nll(out.f, y) / n;
    for (int j = 0; j < k; ++j) obj += lambdas[j] * c[j].dot(st[j] * c[j]);
    return obj;
  };

  double obj = joint_objective();
  out.objective_trace.push_back(obj);
  for (int cycle = 0; cycle < max_cycles; ++cycle) {
    for (int j = 0; j < k; ++j) {
      // offset against the other blocks: s_i = log(1 + sum_{l != j} e^{f_il})
      VectorXd s(n);
      for (int i = 0; i < n; ++i) {
        double m = 0.0;
        for (int l = 0; l < k; ++l)
          if (l != j) m = std::max(m, out.f(i, l));
        double acc = std::exp(-m);
        for (int l = 0; l < k; ++l)
          if (l != j) acc += std::exp(out.f(i, l) - m);
        s(i) = m + std::log(acc);
      }
      auto state = detail::newton_offset_bernoulli(grams[j], y.col(j), s, lambdas[j],
                                                   thetas[j], c[j], d[j], opts);
      if (!state.converged)
        throw convergence_error("poly_fit: block " + std::to_string(j) +
                                " failed to converge, objective " +
                                std::to_string(state.objective));
      c[j] = state.c;
      d[j] = state.d;
      out.f.col(j) = st[j] * c[j] + grams[j].T * d[j];
    }
    const double next = joint_objective();
    out.objective_trace.push_back(next);
    ++out.cycles;
    if (next > obj + 1e-12 * std::max(std::abs(obj), 1.0))
      throw convergence_error("poly_fit: joint objective increased across a cycle");
    const bool done = std::abs(obj - next) <= opts.obj_tol * std::max(std::abs(obj), 1e-300);
    obj = next;
    if (done) break;
    if (cycle + 1 == max_cycles)
      throw convergence_error("poly_fit: no convergence after " +
                              std::to_string(max_cycles) + " block cycles");
  }

  out.fits.resize(k);
  for (int j = 0; j < k; ++j) {
    out.fits[j].c = c[j];
    out.fits[j].d = d[j];
    out.fits[j].lambda = lambdas[j];
    out.fits[j].theta = thetas[j];
    out.fits[j].fitted = out.f.col(j);
    out.fits[j].sigma2_hat = std::numeric_limits<double>::quiet_NaN();
    out.fits[j].gcv = std::numeric_limits<double>::quiet_NaN();
  }
  out.nll = poly_nll(out.f, y);
  out.objective = obj;
  out.probabilities = poly_probs(out.f);
  out.separation_warning = out.f.cwiseAbs().maxCoeff() > 30.0;
  return out;
}

// ---- cross-validated smoothing-parameter selection -------------------------

struct CvTuneResult {
  double lambda = 0.0;      // strict deviance argmin
  double lambda_1se = 0.0;  // largest lambda within one SE of the minimum
  // (lambda, summed held-out deviance) per grid point, in grid order
  std::vector<std::pair<double, double>> deviance_by_lambda;
};

// stratified fold assignment: fold index per observation
inline std::vector<int> stratified_folds(const std::vector<int>& strata, int folds,
                                         unsigned seed) {
  if (folds < 2) throw config_error("cv: folds >= 2 required");
  const int n = static_cast<int>(strata.size());
  std::map<int, std::vector<int>> by_cat;
  for (int i = 0; i < n; ++i) by_cat[strata[i]].push_back(i);
  std::mt19937 rng(seed);
  std::vector<int> fold(n, -1);
  int offset = 0;
  for (auto& [cat, idx] : by_cat) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (size_t r = 0; r < idx.size(); ++r) fold[idx[r]] = static_cast<int>((r + offset) % folds);
    offset += static_cast<int>(idx.size());  // stagger small categories across folds
  }
  // every training set must retain every category
  for (int f = 0; f < folds; ++f)
    for (const auto& [cat, idx] : by_cat) {
      bool has = false;
      for (int i : idx)
        if (fold[i] != f) {
          has = true;
          break;
        }
      if (!has)
        throw data_error("cv: training split for fold " + std::to_string(f) +
                         " lost category " + std::to_string(cat));
    }
  return fold;
}

// heldout_deviance(train_idx, test_idx, lambda) fits on the training rows and
// returns the held-out deviance; cv_tune sums it over folds per grid point.
inline CvTuneResult cv_tune(
    const std::function<double(const std::vector<int>&, const std::vector<int>&, double)>&
        heldout_deviance,
    const std::vector<int>& strata, int folds, const std::vector<double>& lambda_grid,
    unsigned seed) {
  if (lambda_grid.empty()) throw config_error("cv: empty lambda grid");
  const std::vector<int> fold = stratified_folds(strata, folds, seed);
  const int n = static_cast<int>(strata.size());

  CvTuneResult out;
  double best = std::numeric_limits<double>::infinity();
  double best_se = 0.0;
  for (double lambda : lambda_grid) {
    double dev = 0.0;
    std::vector<double> per_fold;
    for (int f = 0; f < folds; ++f) {
      std::vector<int> train, test;
      for (int i = 0; i < n; ++i) (fold[i] == f ? test : train).push_back(i);
      if (test.empty()) continue;
      per_fold.push_back(heldout_deviance(train, test, lambda));
      dev += per_fold.back();
    }
    out.deviance_by_lambda.emplace_back(lambda, dev);
    if (dev < best) {
      best = dev;
      out.lambda = lambda;
      // SE of the summed deviance from the fold-to-fold spread
      const double mean = dev / per_fold.size();
      double var = 0.0;
      for (double v : per_fold) var += (v - mean) * (v - mean);
      best_se = per_fold.size() > 1
                    ? std::sqrt(var / (per_fold.size() - 1)) * std::sqrt(double(per_fold.size()))
                    : 0.0;
    }
  }
  if (!std::isfinite(best)) throw convergence_error("cv: no usable grid point");
  // parsimony rule: largest lambda whose deviance is within one SE of the min
  out.lambda_1se = out.lambda;
  for (const auto& [lambda, dev] : out.deviance_by_lambda)
    if (dev <= best + best_se && lambda > out.lambda_1se) out.lambda_1se = lambda;
  return out;
}

inline std::vector<double> default_lambda_grid(const GramSet& grams, int size = 15,
                                               double log10_min = -6.0, double log10_max = 1.0) {
  VectorXd ones = VectorXd::Ones(grams.p());
  double tr = 0.0;
  for (const auto& s : grams.sigma) tr += s.trace();
  const double scale = grams.p() > 0 ? tr / grams.n() : 1.0;
  std::vector<double> grid(size);
  for (int i = 0; i < size; ++i) {
    const double g = size == 1 ? log10_min
                               : log10_min + (log10_max - log10_min) * i / (size - 1);
    grid[i] = std::pow(10.0, g) * scale;
  }
  return grid;
}

}  // namespace ssanova

#endif  // SSANOVA_EXPFAM_HPP
