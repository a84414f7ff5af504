#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <ssanova/kernels.hpp>

#include "testutil.hpp"

#include <random>

using namespace ssanova;

TEST_CASE("cubic spline kernel values") {
  CHECK(cubic_spline_kernel(0, 0, KernelPart::Parametric) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(cubic_spline_kernel(0, 0, KernelPart::Smooth) ==
        doctest::Approx(1.0 / 120.0).epsilon(1e-13));
  CHECK_THROWS_AS(cubic_spline_kernel(-0.1, 0.5, KernelPart::Smooth), domain_error);
  CHECK_THROWS_AS(cubic_spline_kernel(0.1, 1.5, KernelPart::Smooth), domain_error);
}

TEST_CASE("cubic spline kernel matches truncated Fourier series") {
  // interior grid: the truncated series converges too slowly at u = 0, 1
  for (int i = 0; i <= 100; ++i) {
    const double u = (i + 1) / 103.0;
    CHECK(std::abs(bern_k2(u) - testutil::fourier_k2(u)) < 1e-7);
    CHECK(std::abs(bern_k4(u) - testutil::fourier_k4(u)) < 1e-7);
  }
}

TEST_CASE("cubic spline kernel integrates to zero in each argument") {
  // 64 nodes total, split at s = t where k4(|s-t|) has a derivative kink
  auto [x, w] = testutil::gauss_legendre01(32);
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int rep = 0; rep < 10; ++rep) {
    const double t = unif(rng);
    double ip = 0.0, is = 0.0;
    for (int q = 0; q < 32; ++q) {
      const double sl = t * x[q], sr = t + (1.0 - t) * x[q];
      ip += t * w[q] * cubic_spline_kernel(sl, t, KernelPart::Parametric) +
            (1.0 - t) * w[q] * cubic_spline_kernel(sr, t, KernelPart::Parametric);
      is += t * w[q] * cubic_spline_kernel(sl, t, KernelPart::Smooth) +
            (1.0 - t) * w[q] * cubic_spline_kernel(sr, t, KernelPart::Smooth);
    }
    CHECK(std::abs(ip) < 1e-10);
    CHECK(std::abs(is) < 1e-10);
  }
}

TEST_CASE("thin plate semikernel") {
  CHECK(thin_plate_semikernel(0.3, 0.7, 0.3, 0.7) == 0.0);
  CHECK(thin_plate_semikernel(0, 0, 1, 0) == doctest::Approx(0.0).epsilon(1e-15));
  const double e2 = 4.0 * std::log(2.0) / (8.0 * std::numbers::pi);
  CHECK(thin_plate_semikernel(0, 0, 2, 0) == doctest::Approx(e2).epsilon(1e-12));
  CHECK(thin_plate_semikernel(0, 0, 2, 0) == doctest::Approx(0.110318).epsilon(1e-5));
  CHECK_THROWS_AS(thin_plate_semikernel(0, 0, std::nan(""), 0), domain_error);
}

TEST_CASE("thin plate quadratic form nonnegative orthogonal to {1,x,y}") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 12;
    Eigen::MatrixXd pts(n, 2);
    for (int i = 0; i < n; ++i) {
      pts(i, 0) = unif(rng);
      pts(i, 1) = unif(rng);
    }
    Eigen::MatrixXd basis(n, 3);
    basis.col(0).setOnes();
    basis.col(1) = pts.col(0);
    basis.col(2) = pts.col(1);
    Eigen::VectorXd c = testutil::random_unit(n, rng);
    // project out span{1,x,y}
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, 3);
    c -= q * (q.transpose() * c);
    double form = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        form += c(i) * c(j) * thin_plate_semikernel(pts(i, 0), pts(i, 1), pts(j, 0), pts(j, 1));
    CHECK(form >= -1e-10);
  }
}

TEST_CASE("sphere kernel single-term values") {
  const double v = 3.0 / (4.0 * std::numbers::pi * 4.0);
  CHECK(sphere_kernel(10, 20, 10, 20, 2, 1) == doctest::Approx(v).epsilon(1e-12));
  CHECK(sphere_kernel(10, 20, -10, -160, 2, 1) == doctest::Approx(-v).epsilon(1e-12));
  CHECK(sphere_kernel(10, 20, 10, 20, 2, 1) == doctest::Approx(0.059683).epsilon(1e-4));
  CHECK_THROWS_AS(sphere_kernel(95, 0, 0, 0), domain_error);
  CHECK_THROWS_AS(sphere_kernel(0, 200, 0, 0), domain_error);
}

TEST_CASE("sphere kernel truncation error") {
  // m=2 at coincident points: the L=50 -> L=100 increment equals the exact
  // tail sum (P_l(1) = 1), about 2.3e-5
  double tail = 0.0;
  for (int l = 51; l <= 100; ++l) {
    const double ll1 = static_cast<double>(l) * (l + 1);
    tail += (2.0 * l + 1.0) / (4.0 * std::numbers::pi) / (ll1 * ll1);
  }
  CHECK(std::abs(sphere_kernel(45, 45, 45, 45, 2, 100) - sphere_kernel(45, 45, 45, 45, 2, 50) -
                 tail) < 1e-15);

  // m=4 converges fast enough for L=50 to be stable to 1e-9
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> lat(-90, 90), lon(-180, 180);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const double a = lat(rng), b = lon(rng), c = lat(rng), d = lon(rng);
    worst = std::max(worst,
                     std::abs(sphere_kernel(a, b, c, d, 4, 50) - sphere_kernel(a, b, c, d, 4, 100)));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("sphere kernel symmetry") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> lat(-90, 90), lon(-180, 180);
  for (int rep = 0; rep < 20; ++rep) {
    const double a = lat(rng), b = lon(rng), c = lat(rng), d = lon(rng);
    CHECK(sphere_kernel(a, b, c, d) == sphere_kernel(c, d, a, b));
  }
}

TEST_CASE("discrete second-difference marginal") {
  CHECK_THROWS_AS(discrete_diff_kernel(2), config_error);

  SUBCASE("quadratic form of the penalty on a single bump") {
    Eigen::MatrixXd d2 = second_difference_matrix(3);
    Eigen::Vector3d c(1, -2, 1);
    CHECK((d2 * c).squaredNorm() == doctest::Approx(36.0));
  }
  SUBCASE("lines are unpenalized") {
    Eigen::MatrixXd d2 = second_difference_matrix(8);
    Eigen::VectorXd f = Eigen::VectorXd::LinSpaced(8, -3.0, 11.0);
    CHECK((d2 * f).squaredNorm() == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("smooth gram centered and orthogonal to phi") {
    const auto gm = discrete_diff_kernel(5);
    CHECK(gm.gram.colwise().sum().cwiseAbs().maxCoeff() < 1e-10);
    CHECK((gm.gram * gm.phi).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((gm.gram - gm.gram.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    // phi has unit empirical norm and zero mean
    CHECK(gm.phi.squaredNorm() / 5.0 == doctest::Approx(1.0));
    CHECK(std::abs(gm.phi.sum()) < 1e-12);
  }
  SUBCASE("pseudo-inverse inverts the penalty on its range") {
    const auto gm = discrete_diff_kernel(6);
    Eigen::MatrixXd d2 = second_difference_matrix(6);
    Eigen::MatrixXd pen = d2.transpose() * d2;
    // pen * gram * pen == pen
    CHECK((pen * gm.gram * pen - pen).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("center_kernel") {
  const int n = 4;
  Eigen::VectorXd w = Eigen::VectorXd::Constant(n, 1.0 / n);

  SUBCASE("constant kernel maps to zero") {
    Eigen::MatrixXd g = Eigen::MatrixXd::Ones(n, n);
    CHECK(center_kernel(g, w).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("identity with uniform weights, n=2") {
    Eigen::VectorXd w2 = Eigen::VectorXd::Constant(2, 0.5);
    Eigen::MatrixXd g = Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd c = center_kernel(g, w2);
    CHECK(c(0, 0) == doctest::Approx(0.5));
    CHECK(c(0, 1) == doctest::Approx(-0.5));
    CHECK(c(1, 0) == doctest::Approx(-0.5));
    CHECK(c(1, 1) == doctest::Approx(0.5));
  }
  SUBCASE("annihilates the measure and is idempotent") {
    std::mt19937 rng(13);
    std::normal_distribution<double> g;
    Eigen::MatrixXd a(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) a(i, j) = g(rng);
    Eigen::MatrixXd sym = a + a.transpose();
    Eigen::VectorXd wr(n);
    wr << 0.1, 0.2, 0.3, 0.4;
    Eigen::MatrixXd c1 = center_kernel(sym, wr);
    CHECK((c1 * wr).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((c1 - c1.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::MatrixXd c2 = center_kernel(c1, wr);
    CHECK((c2 - c1).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("bad weights rejected") {
    Eigen::VectorXd bad = Eigen::VectorXd::Constant(n, 0.3);
    CHECK_THROWS_AS(center_kernel(Eigen::MatrixXd::Identity(n, n), bad), config_error);
  }
}

TEST_CASE("gram PSD after centering, random point sets") {
  std::mt19937 rng(23);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> size(5, 30);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = size(rng);
    Eigen::VectorXd w = Eigen::VectorXd::Constant(n, 1.0 / n);

    // cubic spline smooth gram (already zero-mean; center anyway)
    Eigen::VectorXd t(n);
    for (int i = 0; i < n; ++i) t(i) = unif(rng);
    Eigen::MatrixXd g(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) g(i, j) = cubic_spline_kernel(t(i), t(j), KernelPart::Smooth);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-8 * eig.eigenvalues().maxCoeff());

    // sphere gram
    Eigen::MatrixXd sg(n, n);
    Eigen::MatrixXd pq(n, 2);
    for (int i = 0; i < n; ++i) {
      pq(i, 0) = unif(rng) * 180.0 - 90.0;
      pq(i, 1) = unif(rng) * 360.0 - 180.0;
    }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) sg(i, j) = sphere_kernel(pq(i, 0), pq(i, 1), pq(j, 0), pq(j, 1));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> seig(center_kernel(sg, w));
    CHECK(seig.eigenvalues().minCoeff() >= -1e-8 * std::max(seig.eigenvalues().maxCoeff(), 1e-30));
  }
}
