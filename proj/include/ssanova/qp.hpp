#ifndef SSANOVA_QP_HPP
#define SSANOVA_QP_HPP

#include <ssanova/gaussian.hpp>

#include <Eigen/Dense>

// Dense convex quadratic programming:
//   minimize    (1/2) x' P x + q' x
//   subject to  G x <= h
// by a Mehrotra predictor-corrector primal-dual interior-point method.
// Sized for desk-scale problems (a few hundred variables/constraints).
namespace ssanova {

struct QpOptions {
  int max_iters = 200;
  double tol = 1e-8;          // residual and duality-gap target
  double step_fraction = 0.99;
};

struct QpResult {
  VectorXd x;
  VectorXd z;  // inequality multipliers
  VectorXd s;  // slacks, G x + s = h
  double gap = 0.0;
  double kkt_residual = 0.0;  // max of stationarity/primal residual norms and gap
  int iterations = 0;
  bool converged = false;
};

inline QpResult solve_qp(const MatrixXd& p, const VectorXd& q, const MatrixXd& g,
                         const VectorXd& h, const QpOptions& opts = {}) {
  const int nx = static_cast<int>(p.rows());
  const int m = static_cast<int>(g.rows());
  if (p.cols() != nx || q.size() != nx || g.cols() != nx || h.size() != m)
    throw config_error("solve_qp: dimension mismatch");
  if (m == 0) throw config_error("solve_qp: needs at least one inequality");

  QpResult r;
  r.x = VectorXd::Zero(nx);
  r.s = (h - g * r.x).cwiseMax(1.0);
  r.z = VectorXd::Ones(m);

  const double scale = std::max({1.0, q.lpNorm<Eigen::Infinity>(), h.lpNorm<Eigen::Infinity>()});

  // once complementarity bottoms out, floating-point noise can make the
  // stationarity residual oscillate; keep the best iterate seen and stop
  // when it has not improved for a while
  QpResult best;
  best.kkt_residual = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int it = 0; it < opts.max_iters; ++it) {
    const VectorXd rd = p * r.x + q + g.transpose() * r.z;  // stationarity
    const VectorXd rp = g * r.x + r.s - h;                  // primal feasibility
    const double mu = r.s.dot(r.z) / m;
    r.gap = r.s.dot(r.z);
    r.kkt_residual = std::max({rd.lpNorm<Eigen::Infinity>(), rp.lpNorm<Eigen::Infinity>(), r.gap / m});
    r.iterations = it;
#ifdef SSANOVA_QP_TRACE
    std::printf("it=%3d rd=%.3e rp=%.3e mu=%.3e\n", it, rd.lpNorm<Eigen::Infinity>(),
                rp.lpNorm<Eigen::Infinity>(), mu);
#endif
    if (r.kkt_residual <= opts.tol * scale) {
      r.converged = true;
      return r;
    }
    if (r.kkt_residual < best.kkt_residual) {
      best = r;
      since_best = 0;
    } else if (++since_best >= 15) {
      break;
    }

    MatrixXd kkt = p + g.transpose() * (r.z.cwiseQuotient(r.s)).asDiagonal() * g;
    kkt.diagonal().array() += 1e-13 * (kkt.trace() / nx + 1.0);
    Eigen::LDLT<MatrixXd> ldlt(kkt);
    if (ldlt.info() != Eigen::Success) throw solver_error("solve_qp: KKT factorization failed");

    const auto direction = [&](const VectorXd& rc) {
      // z*ds + s*dz = rc;  ds = -rp - G dx
      const VectorXd rhs =
          -rd - g.transpose() * ((rc + r.z.cwiseProduct(rp)).cwiseQuotient(r.s));
      VectorXd dx = ldlt.solve(rhs);
      for (int ref = 0; ref < 2; ++ref)  // iterative refinement for ill-conditioned barriers
        dx += ldlt.solve(rhs - kkt * dx);
      VectorXd ds = -rp - g * dx;
      VectorXd dz = (rc - r.z.cwiseProduct(ds)).cwiseQuotient(r.s);
      return std::make_tuple(std::move(dx), std::move(ds), std::move(dz));
    };
    const auto max_step = [&](const VectorXd& v, const VectorXd& dv) {
      double a = 1.0;
      for (int i = 0; i < m; ++i)
        if (dv(i) < 0.0) a = std::min(a, -v(i) / dv(i));
      return a;
    };

    // affine (predictor) direction
    auto [dxa, dsa, dza] = direction(-r.s.cwiseProduct(r.z));
    const double ap = max_step(r.s, dsa), ad = max_step(r.z, dza);
    const double mu_aff =
        (r.s + ap * dsa).dot(r.z + ad * dza) / m;
    const double sigma = std::pow(mu_aff / std::max(mu, 1e-300), 3.0);

    // corrector
    VectorXd rc = -r.s.cwiseProduct(r.z) - dsa.cwiseProduct(dza);
    rc.array() += sigma * mu;
    auto [dx, ds, dz] = direction(rc);
    const double step_p = opts.step_fraction * max_step(r.s, ds);
    const double step_d = opts.step_fraction * max_step(r.z, dz);
    r.x += step_p * dx;
    r.s += step_p * ds;
    r.z += step_d * dz;
  }
  // budget exhausted or stalled: report the best iterate seen
  best.converged = best.kkt_residual <= opts.tol * scale;
  return best;
}

}  // namespace ssanova

#endif  // SSANOVA_QP_HPP
