#ifndef SSANOVA_MVBERNOULLI_HPP
#define SSANOVA_MVBERNOULLI_HPP

#include <ssanova/expfam.hpp>

#include <numeric>
#include <random>

// Log-linear joint model for a vector of M binary outcomes: one parameter per
// nonempty subset of positions (logits for singletons, interaction terms for
// larger subsets), normalized by enumeration over the 2^M outcome vectors.
namespace ssanova {

struct capacity_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct OutcomeIndex {
  std::vector<int> repeats;  // K_j per endpoint

  int total() const {
    int m = 0;
    for (int k : repeats) m += k;
    return m;
  }
  void validate() const {
    if (repeats.empty()) throw config_error("OutcomeIndex: at least one endpoint");
    for (int k : repeats)
      if (k < 1) throw config_error("OutcomeIndex: repeat counts must be >= 1");
    const int m = total();
    if (m < 1 || m > 20)
      throw capacity_error("OutcomeIndex: total outcome length must be in [1, 20]");
  }
};

// Parameters indexed by nonempty subset bitmask: values(mask - 1) holds the
// parameter for subset `mask`, mask in 1 .. 2^M - 1.
struct MvbParams {
  int m = 0;
  VectorXd values;

  MvbParams() = default;
  explicit MvbParams(int m_) : m(m_) {
    if (m < 1 || m > 20) throw capacity_error("MvbParams: M must be in [1, 20]");
    values = VectorXd::Zero((1 << m) - 1);
  }
  double& at(unsigned mask) {
    check(mask);
    return values(mask - 1);
  }
  double at(unsigned mask) const {
    check(mask);
    return values(mask - 1);
  }

 private:
  void check(unsigned mask) const {
    if (mask == 0 || mask >= (1u << m)) throw config_error("MvbParams: bad subset mask");
  }
};

namespace detail {

// g[y] = sum of parameters over nonempty subsets of y (zeta transform)
inline VectorXd subset_sums(const MvbParams& params) {
  const int size = 1 << params.m;
  VectorXd g(size);
  g(0) = 0.0;
  for (int mask = 1; mask < size; ++mask) g(mask) = params.values(mask - 1);
  for (int bit = 0; bit < params.m; ++bit)
    for (int mask = 0; mask < size; ++mask)
      if (mask & (1 << bit)) g(mask) += g(mask ^ (1 << bit));
  return g;
}

inline double logsumexp(const VectorXd& v) {
  const double m = v.maxCoeff();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) acc += std::exp(v(i) - m);
  return m + std::log(acc);
}

}  // namespace detail

inline double log_normalizer(const MvbParams& params) {
  return detail::logsumexp(detail::subset_sums(params));
}

// log probabilities for every outcome mask, in mask order (size 2^M)
inline VectorXd joint_log_table(const MvbParams& params) {
  VectorXd g = detail::subset_sums(params);
  g.array() -= detail::logsumexp(g);
  return g;
}

inline double joint_logprob(const std::vector<int>& y, const MvbParams& params) {
  if (static_cast<int>(y.size()) != params.m) throw data_error("joint_logprob: length mismatch");
  unsigned mask = 0;
  for (int i = 0; i < params.m; ++i) {
    if (y[i] != 0 && y[i] != 1) throw data_error("joint_logprob: outcomes must be 0/1");
    if (y[i]) mask |= 1u << i;
  }
  const VectorXd table = joint_log_table(params);
  return table(mask);
}

struct ConditionalQuantities {
  VectorXd logits;      // M: logit P(Y_i = 1 | all others 0)
  MatrixXd log_odds;    // M x M symmetric, 0 diagonal: pairwise conditional log OR
};

// computed from the joint table via the defining conditional formulas, so a
// params -> table -> params round trip is a genuine identity check
inline ConditionalQuantities conditional_quantities(const MvbParams& params) {
  const VectorXd t = joint_log_table(params);
  ConditionalQuantities q;
  q.logits.resize(params.m);
  q.log_odds = MatrixXd::Zero(params.m, params.m);
  for (int i = 0; i < params.m; ++i) q.logits(i) = t(1u << i) - t(0);
  for (int i = 0; i < params.m; ++i)
    for (int j = i + 1; j < params.m; ++j) {
      const double lor = t((1u << i) | (1u << j)) + t(0) - t(1u << i) - t(1u << j);
      q.log_odds(i, j) = q.log_odds(j, i) = lor;
    }
  return q;
}

// full parameter recovery from a joint log table (inverse zeta / Moebius
// transform of g[y] = log p(y) - log p(0))
inline MvbParams params_from_joint(const VectorXd& log_table) {
  const int size = static_cast<int>(log_table.size());
  int m = 0;
  while ((1 << m) < size) ++m;
  if ((1 << m) != size) throw data_error("params_from_joint: table size must be 2^M");
  MvbParams params(m);
  VectorXd g = log_table.array() - log_table(0);
  for (int bit = 0; bit < m; ++bit)
    for (int mask = 0; mask < size; ++mask)
      if (mask & (1 << bit)) g(mask) -= g(mask ^ (1 << bit));
  for (int mask = 1; mask < size; ++mask) params.values(mask - 1) = g(mask);
  return params;
}

// exact inverse-CDF sampler over the enumerated outcome table
inline std::vector<unsigned> sample_mvb(const MvbParams& params, int n, std::mt19937& rng) {
  const VectorXd t = joint_log_table(params);
  VectorXd cdf(t.size());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    acc += std::exp(t(i));
    cdf(i) = acc;
  }
  std::uniform_real_distribution<double> unif(0, 1);
  std::vector<unsigned> out(n);
  for (int i = 0; i < n; ++i) {
    const double u = unif(rng) * acc;
    unsigned mask = 0;
    while (mask + 1 < static_cast<unsigned>(t.size()) && cdf(mask) < u) ++mask;
    out[i] = mask;
  }
  return out;
}

// ---- two-eye penalized fitting ----------------------------------------------
//
// J=1, K=2: per subject i the outcome pair (y_i1, y_i2) with
//   log p = y1 f_i1 + y2 f_i2 + y1 y2 a_i - log(1 + e^{f1} + e^{f2} + e^{f1+f2+a}).
// The two eyes share one function: f_ik = f(x_ik). f and the association a are
// each either a constant or a penalized spline expansion supplied as a GramSet
// (f over the 2n pooled eye rows, a over the n subject rows).

struct TwoEyeFit {
  FitResult f;       // coefficients over the pooled 2n eye rows (or constant d)
  FitResult alpha;   // coefficients over the n subject rows (or constant d)
  MatrixXd f_pair;   // n x 2 fitted eye values
  VectorXd alpha_at; // n fitted association values
  double nll = 0.0;
  double objective = 0.0;
  int iterations = 0;
};

namespace detail {

// per-subject sufficient statistics t = (y1, y2, y1 y2): mean and covariance
inline void two_eye_moments(double f1, double f2, double a, Eigen::Vector3d& mean,
                            Eigen::Matrix3d& cov, double& logz) {
  Eigen::Vector4d g;  // outcomes 00, 10, 01, 11
  g << 0.0, f1, f2, f1 + f2 + a;
  const double m = g.maxCoeff();
  Eigen::Vector4d w = (g.array() - m).exp();
  const double z = w.sum();
  logz = m + std::log(z);
  w /= z;
  Eigen::Matrix<double, 3, 4> t;
  t << 0, 1, 0, 1,   // y1
       0, 0, 1, 1,   // y2
       0, 0, 0, 1;   // y1 y2
  mean = t * w;
  cov = t * w.asDiagonal() * t.transpose() - mean * mean.transpose();
}

}  // namespace detail

// pass nullptr for a constant f (intercept only) or constant alpha
inline TwoEyeFit fit_two_eye(const MatrixXd& y, const GramSet* f_grams,
                             const GramSet* alpha_grams, double lambda_f,
                             double lambda_alpha, const NewtonOptions& opts = {}) {
  const int n = static_cast<int>(y.rows());
  if (y.cols() != 2) throw data_error("fit_two_eye: y must be n x 2");
  if (n < 10) throw data_error("fit_two_eye: needs n >= 10 subjects");
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 2; ++k)
      if (y(i, k) != 0.0 && y(i, k) != 1.0) throw data_error("fit_two_eye: outcomes must be 0/1");
  if (f_grams && f_grams->n() != 2 * n)
    throw data_error("fit_two_eye: f gram set must cover the 2n pooled eye rows");
  if (alpha_grams && alpha_grams->n() != n)
    throw data_error("fit_two_eye: alpha gram set must cover the n subject rows");
  if ((f_grams && !(lambda_f > 0.0)) || (alpha_grams && !(lambda_alpha > 0.0)))
    throw config_error("fit_two_eye: penalized parts need lambda > 0");

  // design maps: f_pool = Df uf, alpha = Da ua
  const MatrixXd df = f_grams
                          ? (MatrixXd(2 * n, 2 * n + f_grams->m0())
                                 << f_grams->sigma_sum(), f_grams->T)
                                .finished()
                          : MatrixXd::Ones(2 * n, 1);
  const MatrixXd da = alpha_grams
                          ? (MatrixXd(n, n + alpha_grams->m0())
                                 << alpha_grams->sigma_sum(), alpha_grams->T)
                                .finished()
                          : MatrixXd::Ones(n, 1);
  const int pf = static_cast<int>(df.cols()), pa = static_cast<int>(da.cols());
  const int dim = pf + pa;

  // penalty matrix in the stacked coefficient space
  MatrixXd pen = MatrixXd::Zero(dim, dim);
  if (f_grams) pen.topLeftCorner(2 * n, 2 * n) = lambda_f * f_grams->sigma_sum();
  if (alpha_grams) pen.block(pf, pf, n, n) = lambda_alpha * alpha_grams->sigma_sum();

  VectorXd u = VectorXd::Zero(dim);
  const auto objective = [&](const VectorXd& uu, double* nll_out = nullptr) {
    const VectorXd fp = df * uu.head(pf);
    const VectorXd av = da * uu.tail(pa);
    double nll = 0.0;
    Eigen::Vector3d mean;
    Eigen::Matrix3d cov;
    double logz;
    for (int i = 0; i < n; ++i) {
      detail::two_eye_moments(fp(2 * i), fp(2 * i + 1), av(i), mean, cov, logz);
      nll += logz - y(i, 0) * fp(2 * i) - y(i, 1) * fp(2 * i + 1) -
             y(i, 0) * y(i, 1) * av(i);
    }
    if (nll_out) *nll_out = nll;
    return nll / n + uu.dot(pen * uu);
  };

  double obj = objective(u);
  int iterations = 0;
  bool converged = false;
  for (int it = 0; it < opts.max_newton; ++it) {
    const VectorXd fp = df * u.head(pf);
    const VectorXd av = da * u.tail(pa);
    // gradient and Hessian of nll/n in (f_pool, alpha) coordinates
    VectorXd gf = VectorXd::Zero(2 * n), ga = VectorXd::Zero(n);
    std::vector<Eigen::Matrix3d> covs(n);
    for (int i = 0; i < n; ++i) {
      Eigen::Vector3d mean;
      double logz;
      detail::two_eye_moments(fp(2 * i), fp(2 * i + 1), av(i), mean, covs[i], logz);
      gf(2 * i) = (mean(0) - y(i, 0)) / n;
      gf(2 * i + 1) = (mean(1) - y(i, 1)) / n;
      ga(i) = (mean(2) - y(i, 0) * y(i, 1)) / n;
    }
    VectorXd grad(dim);
    grad.head(pf) = df.transpose() * gf;
    grad.tail(pa) = da.transpose() * ga;
    grad += 2.0 * pen * u;
    if (grad.norm() < opts.grad_tol) {
      converged = true;
      break;
    }

    // H = J' Lambda J / n + 2 pen, with Lambda block-sparse per subject
    MatrixXd hf = MatrixXd::Zero(dim, dim);
    {
      MatrixXd lam_ff = MatrixXd::Zero(2 * n, 2 * n);
      MatrixXd lam_fa = MatrixXd::Zero(2 * n, n);
      VectorXd lam_aa = VectorXd::Zero(n);
      for (int i = 0; i < n; ++i) {
        lam_ff(2 * i, 2 * i) = covs[i](0, 0);
        lam_ff(2 * i, 2 * i + 1) = covs[i](0, 1);
        lam_ff(2 * i + 1, 2 * i) = covs[i](1, 0);
        lam_ff(2 * i + 1, 2 * i + 1) = covs[i](1, 1);
        lam_fa(2 * i, i) = covs[i](0, 2);
        lam_fa(2 * i + 1, i) = covs[i](1, 2);
        lam_aa(i) = covs[i](2, 2);
      }
      hf.topLeftCorner(pf, pf) = df.transpose() * lam_ff * df / n;
      const MatrixXd cross = df.transpose() * lam_fa * da / n;
      hf.block(0, pf, pf, pa) = cross;
      hf.block(pf, 0, pa, pf) = cross.transpose();
      hf.block(pf, pf, pa, pa) =
          da.transpose() * lam_aa.asDiagonal() * da / n;
    }
    hf += 2.0 * pen;
    // ridge floor: the representer parametrization leaves null(Sigma)
    // directions free, so the Newton system can be singular
    hf.diagonal().array() += 1e-10 * (hf.trace() / dim + 1.0);
    const VectorXd step = hf.ldlt().solve(-grad);

    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h <= opts.max_halvings; ++h, t *= 0.5) {
      const VectorXd cand = u + t * step;
      const double next = objective(cand);
      if (next <= obj + 1e-14 * std::abs(obj)) {
        const double rel = std::abs(obj - next) / std::max(std::abs(obj), 1e-300);
        u = cand;
        obj = next;
        accepted = true;
        if (rel < opts.obj_tol) converged = true;
        break;
      }
    }
    ++iterations;
    if (converged) break;
    if (!accepted) {
      converged = true;  // no improving step: stationary up to line-search noise
      break;
    }
  }
  if (!converged)
    throw convergence_error("fit_two_eye: no convergence after " +
                            std::to_string(iterations) + " Newton steps, objective " +
                            std::to_string(obj));

  TwoEyeFit out;
  out.iterations = iterations;
  out.objective = objective(u, &out.nll);
  const VectorXd fp = df * u.head(pf);
  out.alpha_at = da * u.tail(pa);
  out.f_pair.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    out.f_pair(i, 0) = fp(2 * i);
    out.f_pair(i, 1) = fp(2 * i + 1);
  }
  if (f_grams) {
    out.f.c = u.head(2 * n);
    out.f.d = u.segment(2 * n, f_grams->m0());
    out.f.lambda = lambda_f;
    out.f.theta = VectorXd::Ones(f_grams->p());
  } else {
    out.f.c = VectorXd();
    out.f.d = u.head(1);
  }
  if (alpha_grams) {
    out.alpha.c = u.segment(pf, n);
    out.alpha.d = u.segment(pf + n, alpha_grams->m0());
    out.alpha.lambda = lambda_alpha;
    out.alpha.theta = VectorXd::Ones(alpha_grams->p());
  } else {
    out.alpha.c = VectorXd();
    out.alpha.d = u.tail(1);
  }
  out.f.fitted = fp;
  out.alpha.fitted = out.alpha_at;
  return out;
}

// grouped fold assignment: subjects are the sampling units, so both eyes of a
// subject always land in the same fold
inline std::vector<int> grouped_folds(int n_subjects, int folds, unsigned seed) {
  if (folds < 2) throw config_error("cv: folds >= 2 required");
  if (n_subjects < folds) throw data_error("cv: fewer subjects than folds");
  std::vector<int> idx(n_subjects);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<int> fold(n_subjects);
  for (int r = 0; r < n_subjects; ++r) fold[idx[r]] = r % folds;
  return fold;
}

}  // namespace ssanova

#endif  // SSANOVA_MVBERNOULLI_HPP
