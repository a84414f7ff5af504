#ifndef SSANOVA_GAUSSIAN_HPP
#define SSANOVA_GAUSSIAN_HPP

#include <ssanova/anova.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <vector>

// Penalized least squares for Gaussian responses: the representer system
// (Sigma_theta + n lambda I) c + T d = y, T'c = 0, GCV tuning of
// (lambda, theta), and Bayesian confidence intervals.
namespace ssanova {

struct solver_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct degenerate_model_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FitConfig {
  int lambda_grid_size = 40;
  double log10_lambda_min = -8.0;
  double log10_lambda_max = 2.0;
  bool tune_theta = true;
  int theta_sweeps = 3;       // golden-section sweeps per alternation
  int max_iters = 10;         // lambda/theta alternations
  double tol = 1e-6;          // relative GCV change

  void validate() const {
    if (lambda_grid_size < 1 || !(tol > 0.0)) throw config_error("invalid FitConfig");
  }
};

struct FitResult {
  VectorXd c;         // n, representer coefficients, T'c = 0
  VectorXd d;         // M0, null-space coefficients
  double lambda = 0.0;
  VectorXd theta;     // p, positive
  double trace_A = 0.0;
  double sigma2_hat = 0.0;
  double gcv = 0.0;
  VectorXd fitted;
};

// Factorizes the null-space geometry of T once; each (lambda, theta) solve
// reduces to an SPD system on the orthocomplement of range(T).
class PenalizedSolver {
 public:
  explicit PenalizedSolver(const GramSet& grams) : grams_(grams) {
    const int n = grams.n(), m0 = grams.m0();
    if (m0 > n) throw solver_error("more unpenalized basis columns than observations");
    Eigen::HouseholderQR<MatrixXd> qr(grams.T);
    const MatrixXd q = qr.householderQ() * MatrixXd::Identity(n, n);
    q1_ = q.leftCols(m0);
    q2_ = q.rightCols(n - m0);
    r_ = qr.matrixQR().topRows(m0).triangularView<Eigen::Upper>();
  }

  const GramSet& grams() const { return grams_; }

  MatrixXd sigma_theta(const VectorXd& theta) const {
    const int n = grams_.n();
    MatrixXd s = MatrixXd::Zero(n, n);
    for (int b = 0; b < grams_.p(); ++b) s += theta(b) * grams_.sigma[b];
    return s;
  }

  FitResult solve(const VectorXd& y, double lambda, const VectorXd& theta) const {
    if (theta.size() != grams_.p()) throw config_error("theta size mismatch");
    if (grams_.p() > 0 && theta.minCoeff() <= 0.0) throw config_error("theta must be positive");
    if (lambda < 0.0) throw config_error("lambda must be nonnegative");
    const int n = grams_.n(), m0 = grams_.m0();

    FitResult fit;
    fit.lambda = lambda;
    fit.theta = theta;

    if (grams_.p() == 0) {  // pure least squares in H0
      fit.c = VectorXd::Zero(n);
      fit.d = r_.triangularView<Eigen::Upper>().solve(q1_.transpose() * y);
      fit.fitted = grams_.T * fit.d;
      fit.trace_A = m0;
      finish(fit, y);
      return fit;
    }

    const MatrixXd st = sigma_theta(theta);
    const int k = n - m0;
    MatrixXd m = q2_.transpose() * st * q2_;
    m.diagonal().array() += n * lambda;
    Eigen::LLT<MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) {
      if (lambda <= 0.0)
        throw solver_error("singular system at lambda=0 (duplicated points?); use lambda > 0");
      // ridge jitter fallback
      m.diagonal().array() += 1e-10 * m.trace();
      llt.compute(m);
      if (llt.info() != Eigen::Success) throw solver_error("reduced system factorization failed");
    }
    const VectorXd z = llt.solve(q2_.transpose() * y);
    fit.c = q2_ * z;
    fit.fitted = y - n * lambda * fit.c;
    fit.d = r_.triangularView<Eigen::Upper>().solve(q1_.transpose() * (y - st * fit.c -
                                                                       n * lambda * fit.c));
    // tr A = n - n lambda tr(M^{-1})
    const MatrixXd minv = llt.solve(MatrixXd::Identity(k, k));
    fit.trace_A = n - n * lambda * minv.trace();
    finish(fit, y);
    return fit;
  }

  double gcv_score(const VectorXd& y, double lambda, const VectorXd& theta) const {
    const double v = solve(y, lambda, theta).gcv;
    if (!std::isfinite(v))
      throw degenerate_model_error("tr(I-A) ~ 0: GCV undefined at this (lambda, theta)");
    return v;
  }

  // influence matrix A mapping y to fitted values (column-by-column route)
  MatrixXd influence_matrix(double lambda, const VectorXd& theta) const {
    const int n = grams_.n();
    MatrixXd a(n, n);
    for (int j = 0; j < n; ++j) a.col(j) = solve(VectorXd::Unit(n, j), lambda, theta).fitted;
    return a;
  }

 private:
  void finish(FitResult& fit, const VectorXd& y) const {
    const int n = grams_.n();
    const double tr_res = n - fit.trace_A;
    const double rss = (y - fit.fitted).squaredNorm();
    if (tr_res <= 1e-8 * n) {
      // interpolating regime: the fit itself is fine, but GCV and the
      // variance estimate are undefined
      fit.gcv = std::numeric_limits<double>::infinity();
      fit.sigma2_hat = std::numeric_limits<double>::quiet_NaN();
      return;
    }
    fit.gcv = n * rss / (tr_res * tr_res);
    fit.sigma2_hat = rss / tr_res;
  }

  const GramSet& grams_;
  MatrixXd q1_, q2_, r_;
};

inline FitResult solve_penalized_ls(const GramSet& grams, const VectorXd& y, double lambda,
                                    const VectorXd& theta) {
  return PenalizedSolver(grams).solve(y, lambda, theta);
}

inline double gcv_score(const GramSet& grams, const VectorXd& y, double lambda,
                        const VectorXd& theta) {
  return PenalizedSolver(grams).gcv_score(y, lambda, theta);
}

struct TuneResult {
  FitResult fit;
  // (lambda, gcv) pairs from the final lambda grid pass, for diagnostics
  std::vector<std::pair<double, double>> lambda_trace;
};

// Grid search on lambda, then cyclic golden-section descent on log theta,
// alternated until the relative GCV change drops below config.tol. The
// lambda grid is placed relative to tr(Sigma_theta)/n so that rescaling the
// Gram matrices does not move the selected fit.
inline TuneResult tune(const GramSet& grams, const VectorXd& y, const FitConfig& config = {}) {
  config.validate();
  PenalizedSolver solver(grams);
  const int p = grams.p();
  VectorXd theta = VectorXd::Ones(p);
  TuneResult out;

  if (p == 0) {
    out.fit = solver.solve(y, 0.0, theta);
    return out;
  }

  const auto grid_scan = [&](const VectorXd& th) {
    const double scale = solver.sigma_theta(th).trace() / grams.n();
    double best_l = 0.0, best_v = std::numeric_limits<double>::infinity();
    out.lambda_trace.clear();
    for (int i = 0; i < config.lambda_grid_size; ++i) {
      const double g = config.lambda_grid_size == 1
                           ? config.log10_lambda_min
                           : config.log10_lambda_min +
                                 (config.log10_lambda_max - config.log10_lambda_min) * i /
                                     (config.lambda_grid_size - 1);
      const double lambda = std::pow(10.0, g) * scale;
      double v;
      try {
        v = solver.gcv_score(y, lambda, th);
      } catch (const degenerate_model_error&) {
        continue;
      }
      out.lambda_trace.emplace_back(lambda, v);
      if (v < best_v) {
        best_v = v;
        best_l = lambda;
      }
    }
    if (!std::isfinite(best_v)) throw degenerate_model_error("no usable point on lambda grid");
    return std::make_pair(best_l, best_v);
  };

  auto [lambda, best] = grid_scan(theta);

  if (config.tune_theta && p > 1) {
    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    for (int iter = 0; iter < config.max_iters; ++iter) {
      const double prev = best;
      for (int sweep = 0; sweep < config.theta_sweeps; ++sweep) {
        for (int b = 0; b < p; ++b) {
          // golden-section on log10 theta_b in a +-2 decade bracket
          double lo = std::log10(theta(b)) - 2.0, hi = std::log10(theta(b)) + 2.0;
          const auto eval = [&](double lt) {
            VectorXd th = theta;
            th(b) = std::pow(10.0, lt);
            try {
              return solver.gcv_score(y, lambda, th);
            } catch (const degenerate_model_error&) {
              return std::numeric_limits<double>::infinity();
            }
          };
          double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
          double f1 = eval(x1), f2 = eval(x2);
          for (int it = 0; it < 30; ++it) {
            if (f1 < f2) {
              hi = x2;
              x2 = x1;
              f2 = f1;
              x1 = hi - gr * (hi - lo);
              f1 = eval(x1);
            } else {
              lo = x1;
              x1 = x2;
              f1 = f2;
              x2 = lo + gr * (hi - lo);
              f2 = eval(x2);
            }
          }
          const double cand = f1 < f2 ? x1 : x2;
          if (std::min(f1, f2) < best) {
            theta(b) = std::pow(10.0, cand);
            best = std::min(f1, f2);
          }
        }
      }
      std::tie(lambda, best) = grid_scan(theta);
      if (std::abs(prev - best) <= config.tol * std::max(1e-300, prev)) break;
    }
  }

  out.fit = solver.solve(y, lambda, theta);
  return out;
}

// prediction from representer coefficients
inline VectorXd predict(const ModelBasis& basis, const FitResult& fit, const DataSet& pts) {
  VectorXd f = basis.t_at(pts) * fit.d;
  for (int b = 0; b < basis.grams().p(); ++b)
    f += basis.component_value(b, fit.c, fit.theta(b), pts);
  return f;
}

// inverse standard normal CDF (Acklam's rational approximation, |err| < 1.2e-9)
inline double normal_quantile(double prob) {
  if (!(prob > 0.0 && prob < 1.0)) {
    if (prob == 0.0) return -std::numeric_limits<double>::infinity();
    if (prob == 1.0) return std::numeric_limits<double>::infinity();
    throw config_error("normal_quantile: p in [0,1] required");
  }
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double dd[] = {7.784695709041462e-03, 3.224671290700398e-01,
                              2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425, phigh = 1 - plow;
  double q, r;
  if (prob < plow) {
    q = std::sqrt(-2 * std::log(prob));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1);
  }
  if (prob > phigh) {
    q = std::sqrt(-2 * std::log(1 - prob));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((dd[0] * q + dd[1]) * q + dd[2]) * q + dd[3]) * q + 1);
  }
  q = prob - 0.5;
  r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
}

struct IntervalBand {
  VectorXd estimate;
  VectorXd lower;
  VectorXd upper;
};

// Posterior variance of f at arbitrary points under the Gaussian-process
// dual of the penalized fit: diffuse prior on d, h ~ GP(0, b K_theta) with
// b = sigma^2/(n lambda). At the design points this reduces to
// sigma^2 diag(A).
inline VectorXd posterior_variance(const ModelBasis& basis, const FitResult& fit,
                                   const DataSet& pts) {
  const GramSet& g = basis.grams();
  if (g.p() == 0 || fit.lambda <= 0.0)
    throw config_error("posterior_variance: needs a penalized fit with lambda > 0");
  const int n = g.n();
  MatrixXd wn = MatrixXd::Zero(n, n);
  for (int b = 0; b < g.p(); ++b) wn += fit.theta(b) * g.sigma[b];
  wn.diagonal().array() += n * fit.lambda;
  Eigen::LLT<MatrixXd> llt(wn);
  if (llt.info() != Eigen::Success) throw solver_error("posterior_variance: factorization failed");
  const MatrixXd wt = llt.solve(g.T);                      // Wn^{-1} T
  const MatrixXd tgt = g.T.transpose() * wt;               // T' Wn^{-1} T
  Eigen::LLT<MatrixXd> tllt(tgt);

  const auto m = pts.at(0).rows();
  MatrixXd kx = MatrixXd::Zero(n, m);
  VectorXd kxx = VectorXd::Zero(m);
  for (int b = 0; b < g.p(); ++b) {
    kx += fit.theta(b) * basis.sigma_cross(b, pts);
    kxx += fit.theta(b) * basis.sigma_point(b, pts);
  }
  const MatrixXd phix = basis.t_at(pts);                   // m x M0
  const MatrixXd wkx = llt.solve(kx);                      // Wn^{-1} k_x
  const MatrixXd r = phix.transpose() - g.T.transpose() * wkx;  // M0 x m

  const double bscale = fit.sigma2_hat / (n * fit.lambda);
  VectorXd var(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const VectorXd ri = r.col(i);
    double v = kxx(i) - kx.col(i).dot(wkx.col(i)) + ri.dot(tllt.solve(ri));
    var(i) = bscale * std::max(v, 0.0);
  }
  return var;
}

inline IntervalBand bayesian_intervals(const ModelBasis& basis, const FitResult& fit,
                                       const DataSet& pts, double level) {
  if (level < 0.0 || level > 1.0) throw config_error("level in [0,1] required");
  IntervalBand band;
  band.estimate = predict(basis, fit, pts);
  const double z = level == 0.0 ? 0.0 : normal_quantile(0.5 + level / 2.0);
  const VectorXd sd = posterior_variance(basis, fit, pts).cwiseSqrt();
  band.lower = band.estimate - z * sd;
  band.upper = band.estimate + z * sd;
  return band;
}

// Per-term bands: posterior variance of the component g_beta alone.
inline IntervalBand component_intervals(const ModelBasis& basis, const FitResult& fit, int beta,
                                        const DataSet& pts, double level) {
  const GramSet& g = basis.grams();
  const int n = g.n();
  MatrixXd wn = MatrixXd::Zero(n, n);
  for (int b = 0; b < g.p(); ++b) wn += fit.theta(b) * g.sigma[b];
  wn.diagonal().array() += n * fit.lambda;
  Eigen::LLT<MatrixXd> llt(wn);
  const MatrixXd kx = fit.theta(beta) * basis.sigma_cross(beta, pts);
  const VectorXd kxx = fit.theta(beta) * basis.sigma_point(beta, pts);
  const MatrixXd wkx = llt.solve(kx);
  const double bscale = fit.sigma2_hat / (n * fit.lambda);

  IntervalBand band;
  band.estimate = basis.component_value(beta, fit.c, fit.theta(beta), pts);
  const double z = level == 0.0 ? 0.0 : normal_quantile(0.5 + level / 2.0);
  VectorXd sd(kxx.size());
  for (Eigen::Index i = 0; i < kxx.size(); ++i)
    sd(i) = std::sqrt(bscale * std::max(kxx(i) - kx.col(i).dot(wkx.col(i)), 0.0));
  band.lower = band.estimate - z * sd;
  band.upper = band.estimate + z * sd;
  return band;
}

}  // namespace ssanova

#endif  // SSANOVA_GAUSSIAN_HPP
