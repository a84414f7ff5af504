#ifndef SSANOVA_KERNELS_HPP
#define SSANOVA_KERNELS_HPP

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

// Closed-form reproducing kernels for the marginal domains, each split into
// a parametric part and a smooth part, plus the empirical centering that
// realizes the averaging operators.
namespace ssanova {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct domain_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DomainKind { UnitInterval, Plane2D, Sphere, FiniteGrid };
enum class MeasureKind { LebesgueUniform, EmpiricalOnData, UniformSphere, UniformGrid };

struct Domain {
  DomainKind kind = DomainKind::UnitInterval;
  MeasureKind measure = MeasureKind::LebesgueUniform;
  int grid_size = 0;  // FiniteGrid only, N >= 3
  int sphere_order = 2;      // smoothness order m of the sphere penalty
  int sphere_truncation = 50;  // Legendre series cutoff L

  // number of coordinates an observation of this variable carries
  int arity() const { return (kind == DomainKind::Plane2D || kind == DomainKind::Sphere) ? 2 : 1; }

  void validate() const {
    if (kind == DomainKind::FiniteGrid && grid_size < 3)
      throw config_error("FiniteGrid needs N >= 3 (second differences require 3 points)");
  }

  static Domain unit_interval(MeasureKind m = MeasureKind::LebesgueUniform) {
    return {DomainKind::UnitInterval, m, 0};
  }
  static Domain plane2d() { return {DomainKind::Plane2D, MeasureKind::EmpiricalOnData, 0}; }
  static Domain sphere(MeasureKind m = MeasureKind::EmpiricalOnData) {
    return {DomainKind::Sphere, m, 0};
  }
  static Domain finite_grid(int n) { return {DomainKind::FiniteGrid, MeasureKind::UniformGrid, n}; }
};

// ---- Bernoulli polynomials for the cubic spline kernel on [0,1] ----
// k1(u) = u - 1/2, k2 = (k1^2 - 1/12)/2, k4 = (k1^4 - k1^2/2 + 7/240)/24.

inline double bern_k1(double u) { return u - 0.5; }

inline double bern_k2(double u) {
  const double k1 = bern_k1(u);
  return (k1 * k1 - 1.0 / 12.0) / 2.0;
}

inline double bern_k4(double u) {
  const double k1 = bern_k1(u);
  const double k1sq = k1 * k1;
  return (k1sq * k1sq - k1sq / 2.0 + 7.0 / 240.0) / 24.0;
}

enum class KernelPart { Parametric, Smooth };

// Cubic spline kernel on [0,1]: parametric part k1(s)k1(t),
// smooth part k2(s)k2(t) - k4(|s-t|). Both integrate to 0 in each argument.
inline double cubic_spline_kernel(double s, double t, KernelPart part) {
  if (!(s >= 0.0 && s <= 1.0 && t >= 0.0 && t <= 1.0))
    throw domain_error("cubic_spline_kernel: inputs must lie in [0,1]; rescale at ingestion");
  if (s > t) std::swap(s, t);  // exact symmetry
  if (part == KernelPart::Parametric) return bern_k1(s) * bern_k1(t);
  return bern_k2(s) * bern_k2(t) - bern_k4(t - s);
}

// Thin plate semikernel E(r) = r^2 log(r) / (8 pi), conditionally positive
// definite relative to span{1, x, y}.
inline double thin_plate_semikernel(double px, double py, double qx, double qy) {
  if (!std::isfinite(px) || !std::isfinite(py) || !std::isfinite(qx) || !std::isfinite(qy))
    throw domain_error("thin_plate_semikernel: non-finite input");
  const double dx = px - qx, dy = py - qy;
  const double r2 = dx * dx + dy * dy;
  if (r2 == 0.0) return 0.0;  // r^2 log r -> 0
  return r2 * 0.5 * std::log(r2) / (8.0 * std::numbers::pi);
}

// Great-circle angle cosine between two (lat, lon) points in degrees.
inline double sphere_cos_angle(double lat1, double lon1, double lat2, double lon2) {
  const double d2r = std::numbers::pi / 180.0;
  const double s1 = std::sin(lat1 * d2r), c1 = std::cos(lat1 * d2r);
  const double s2 = std::sin(lat2 * d2r), c2 = std::cos(lat2 * d2r);
  double c = s1 * s2 + c1 * c2 * std::cos((lon1 - lon2) * d2r);
  return std::clamp(c, -1.0, 1.0);
}

// Spline-on-the-sphere kernel, truncated Legendre series
//   K(P,Q) = sum_{l=1..L} (2l+1)/(4 pi) [l(l+1)]^{-m} P_l(cos gamma).
// The l = 0 term is omitted, so the kernel has zero mean over the sphere.
inline double sphere_kernel(double lat1, double lon1, double lat2, double lon2, int m = 2,
                            int L = 50) {
  if (!(lat1 >= -90 && lat1 <= 90 && lat2 >= -90 && lat2 <= 90 && lon1 >= -180 && lon1 <= 180 &&
        lon2 >= -180 && lon2 <= 180))
    throw domain_error("sphere_kernel: lat in [-90,90], lon in [-180,180] required");
  if (m < 2 || L < 1) throw config_error("sphere_kernel: need m >= 2, L >= 1");
  const double x = sphere_cos_angle(lat1, lon1, lat2, lon2);
  double pm1 = 1.0, p = x;  // P_0, P_1
  double sum = 0.0;
  for (int l = 1; l <= L; ++l) {
    const double ll1 = static_cast<double>(l) * (l + 1);
    sum += (2.0 * l + 1.0) / (4.0 * std::numbers::pi) * std::pow(ll1, -m) * p;
    // Legendre recurrence (l+1) P_{l+1} = (2l+1) x P_l - l P_{l-1}
    const double pnext = ((2.0 * l + 1.0) * x * p - l * pm1) / (l + 1.0);
    pm1 = p;
    p = pnext;
  }
  return sum;
}

// Centering against an empirical measure with weights w:
//   Kc = (I - 1 w') K (I - w 1') = K - 1 w'K - K w 1' + (w'Kw) 1 1'.
// Output annihilates the measure (Kc w = 0) and centering is idempotent.
inline MatrixXd center_kernel(const MatrixXd& gram, const VectorXd& weights) {
  const auto n = gram.rows();
  if (gram.cols() != n || weights.size() != n)
    throw config_error("center_kernel: dimension mismatch");
  if (weights.minCoeff() < 0.0 || std::abs(weights.sum() - 1.0) > 1e-12)
    throw config_error("center_kernel: weights must be nonnegative and sum to 1");
  const VectorXd kw = gram * weights;
  const double wkw = weights.dot(kw);
  MatrixXd out = gram;
  out.rowwise() -= kw.transpose();
  out.colwise() -= kw;
  out.array() += wkw;
  return out;
}

// Marginal structure for a FiniteGrid domain: the unpenalized linear basis
// phi and the smooth N x N Gram, the centered pseudo-inverse of D2'D2 with
// D2 the (N-2) x N second-difference operator. Grid points are 1..N.
struct GridMarginal {
  VectorXd phi;    // x - (N+1)/2, unit empirical norm under the uniform grid
  MatrixXd gram;   // rows/cols sum to 0 and are orthogonal to phi
};

inline MatrixXd second_difference_matrix(int n) {
  MatrixXd d2 = MatrixXd::Zero(n - 2, n);
  for (int i = 0; i < n - 2; ++i) {
    d2(i, i) = 1.0;
    d2(i, i + 1) = -2.0;
    d2(i, i + 2) = 1.0;
  }
  return d2;
}

inline GridMarginal discrete_diff_kernel(int n) {
  if (n < 3) throw config_error("discrete_diff_kernel: N >= 3 required");
  const MatrixXd d2 = second_difference_matrix(n);
  const MatrixXd penalty = d2.transpose() * d2;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(penalty);
  const VectorXd& ev = eig.eigenvalues();
  const double tol = 1e-12 * ev.cwiseAbs().maxCoeff() * n;
  VectorXd inv = VectorXd::Zero(n);
  for (int i = 0; i < n; ++i)
    if (ev(i) > tol) inv(i) = 1.0 / ev(i);
  MatrixXd gram = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
  gram = center_kernel(gram, VectorXd::Constant(n, 1.0 / n));

  GridMarginal out;
  out.phi = VectorXd::LinSpaced(n, 1.0, static_cast<double>(n)).array() - (n + 1) / 2.0;
  out.phi /= std::sqrt(out.phi.squaredNorm() / n);
  out.gram = std::move(gram);
  return out;
}

}  // namespace ssanova

#endif  // SSANOVA_KERNELS_HPP
