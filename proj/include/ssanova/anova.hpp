#ifndef SSANOVA_ANOVA_HPP
#define SSANOVA_ANOVA_HPP

#include <ssanova/kernels.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

// Assembly of the model space H0 (+) sum_beta H^beta from a declarative term
// list: unpenalized design matrix T, penalized Gram matrices Sigma_beta, and
// evaluation of individual fitted components.
namespace ssanova {

struct spec_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Flavor { Parametric, Smooth };

enum class Family { Gaussian, Bernoulli, Polychotomous, MvBernoulli, Msvm };

struct TermSpec {
  std::vector<int> variables;   // strictly increasing; empty = constant
  std::vector<Flavor> flavor;   // parallel to variables
  bool penalized = false;

  bool has_smooth() const {
    return std::any_of(flavor.begin(), flavor.end(), [](Flavor f) { return f == Flavor::Smooth; });
  }
  bool operator==(const TermSpec& o) const {
    return variables == o.variables && flavor == o.flavor;
  }
};

struct ModelSpec {
  std::vector<Domain> domains;
  std::vector<TermSpec> terms;
  Family family = Family::Gaussian;
  std::vector<std::string> var_names;  // optional, for labels
};

// All 2^|vars| flavor combinations of an interaction: the all-parametric
// piece lands in H0 unpenalized, every piece with a smooth factor is
// penalized.
inline std::vector<TermSpec> expand_interaction(const std::vector<int>& vars) {
  std::vector<TermSpec> out;
  const int d = static_cast<int>(vars.size());
  for (int mask = 0; mask < (1 << d); ++mask) {
    TermSpec t;
    t.variables = vars;
    for (int i = 0; i < d; ++i)
      t.flavor.push_back((mask >> i) & 1 ? Flavor::Smooth : Flavor::Parametric);
    t.penalized = t.has_smooth();
    out.push_back(std::move(t));
  }
  return out;
}

namespace detail {

inline int par_dim(const Domain& d) {
  switch (d.kind) {
    case DomainKind::UnitInterval: return 1;
    case DomainKind::Plane2D: return 2;
    case DomainKind::Sphere: return 0;
    case DomainKind::FiniteGrid: return 1;
  }
  return 0;
}

inline std::string flavor_tag(Flavor f) { return f == Flavor::Parametric ? "pi" : "s"; }

}  // namespace detail

// Validated model: the declared terms split into the H0 list and the
// penalized list, with deterministic, order-stable labeling.
class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {
    for (const auto& d : spec_.domains) d.validate();
    if (spec_.var_names.empty())
      for (size_t i = 0; i < spec_.domains.size(); ++i)
        spec_.var_names.push_back("t" + std::to_string(i + 1));
    if (spec_.var_names.size() != spec_.domains.size())
      throw spec_error("var_names/domains length mismatch");

    bool has_constant = false;
    std::vector<TermSpec> seen;
    for (const auto& t : spec_.terms) {
      if (t.variables.size() != t.flavor.size())
        throw spec_error("term " + label(t) + ": variables/flavor length mismatch");
      for (size_t i = 0; i < t.variables.size(); ++i) {
        const int v = t.variables[i];
        if (v < 0 || v >= static_cast<int>(spec_.domains.size()))
          throw spec_error("term references unknown variable index " + std::to_string(v));
        if (i > 0 && t.variables[i] <= t.variables[i - 1])
          throw spec_error("term " + label(t) + ": variables must be strictly increasing");
        if (t.flavor[i] == Flavor::Parametric && detail::par_dim(spec_.domains[v]) == 0)
          throw spec_error("term " + label(t) + ": variable " + spec_.var_names[v] +
                           " has no parametric part");
      }
      if (std::find(seen.begin(), seen.end(), t) != seen.end())
        throw spec_error("duplicate term " + label(t));
      seen.push_back(t);
      if (t.has_smooth() && !t.penalized)
        throw spec_error("term " + label(t) + ": smooth terms must be penalized");
      if (!t.has_smooth() && t.penalized)
        throw spec_error("term " + label(t) + ": all-parametric terms belong to H0, unpenalized");
      if (t.variables.empty()) has_constant = true;
      (t.penalized ? penalized_ : h0_).push_back(t);
    }
    if (!has_constant) h0_.insert(h0_.begin(), TermSpec{});  // constant always present
  }

  const ModelSpec& spec() const { return spec_; }
  const std::vector<TermSpec>& h0_terms() const { return h0_; }
  const std::vector<TermSpec>& penalized_terms() const { return penalized_; }
  int num_penalized() const { return static_cast<int>(penalized_.size()); }

  // dimension of H0 after basis expansion
  int m0_dim() const {
    int m = 0;
    for (const auto& t : h0_) m += h0_term_dim(t);
    return m;
  }

  int h0_term_dim(const TermSpec& t) const {
    int d = 1;
    for (int v : t.variables) d *= detail::par_dim(spec_.domains[v]);
    return d;
  }

  std::string label(const TermSpec& t) const {
    if (t.variables.empty()) return "const";
    std::ostringstream os;
    for (size_t i = 0; i < t.variables.size(); ++i) {
      if (i) os << "*";
      os << spec_.var_names[t.variables[i]] << ":" << detail::flavor_tag(t.flavor[i]);
    }
    return os.str();
  }

 private:
  ModelSpec spec_;
  std::vector<TermSpec> h0_;
  std::vector<TermSpec> penalized_;
};

struct GramSet {
  MatrixXd T;                        // n x M0
  std::vector<MatrixXd> sigma;       // p symmetric PSD matrices
  std::vector<std::string> labels;   // aligned with sigma
  std::vector<std::string> t_labels; // aligned with T columns
  int n() const { return static_cast<int>(T.rows()); }
  int m0() const { return static_cast<int>(T.cols()); }
  int p() const { return static_cast<int>(sigma.size()); }
  MatrixXd sigma_sum() const {
    MatrixXd s = MatrixXd::Zero(n(), n());
    for (const auto& m : sigma) s += m;
    return s;
  }
};

// One matrix per variable, n rows, arity() columns.
using DataSet = std::vector<MatrixXd>;

// A marginal domain bound to its training points: parametric basis values
// and the (empirically centered where the measure demands it) smooth Gram,
// with cross/pointwise evaluation for new points.
class Marginal {
 public:
  Marginal() = default;
  Marginal(Domain dom, MatrixXd pts, std::string name) : dom_(dom), pts_(std::move(pts)),
                                                         name_(std::move(name)) {
    const auto n = pts_.rows();
    if (n == 0) throw data_error(name_ + ": empirical measure needs at least one observation");
    validate_points(pts_);
    if (dom_.kind == DomainKind::FiniteGrid) grid_ = discrete_diff_kernel(dom_.grid_size);

    w_ = VectorXd::Constant(n, 1.0 / static_cast<double>(n));
    if (centering_basis_dim() > 0) {
      const int q = centering_basis_dim();
      MatrixXd b(n, q);
      b.col(0).setOnes();
      if (dom_.kind == DomainKind::Plane2D) b.rightCols(2) = pts_;
      const MatrixXd g = b.transpose() * w_.asDiagonal() * b;
      proj_ = g.ldlt().solve(b.transpose() * w_.asDiagonal());  // q x n
      basis_ = std::move(b);
    }

    // weighted means of the raw parametric basis, for empirical side conditions
    const int np = detail::par_dim(dom_);
    par_shift_ = Eigen::RowVectorXd::Zero(np);
    if (np > 0 && dom_.measure == MeasureKind::EmpiricalOnData)
      par_shift_ = w_.transpose() * par_raw(pts_);

    k_ = raw_gram(pts_);
    kc_ = k_;
    if (centering_basis_dim() > 0) {
      const MatrixXd pk = basis_ * (proj_ * k_);  // projection applied on the left
      kc_ = k_ - pk - pk.transpose() + basis_ * (proj_ * pk.transpose());
      kc_ = 0.5 * (kc_ + kc_.transpose());
      proj_k_ = proj_ * k_;                       // q x n
      proj_k_proj_ = proj_ * proj_k_.transpose(); // q x q
    }
  }

  const Domain& domain() const { return dom_; }
  const MatrixXd& points() const { return pts_; }
  const VectorXd& weights() const { return w_; }
  bool empirically_centered() const { return centering_basis_dim() > 0; }
  int par_dim() const { return detail::par_dim(dom_); }

  // parametric basis at arbitrary points, m x par_dim
  MatrixXd par_at(const MatrixXd& pts) const {
    validate_points(pts);
    MatrixXd b = par_raw(pts);
    b.rowwise() -= par_shift_;
    return b;
  }

  const MatrixXd& smooth_gram() const { return kc_; }

  // n x m cross Gram of the centered smooth kernel against new points
  MatrixXd smooth_cross(const MatrixXd& pts) const {
    validate_points(pts);
    MatrixXd kx = raw_cross(pts);
    if (centering_basis_dim() == 0) return kx;
    MatrixXd bnew = centering_basis_at(pts);  // m x q
    MatrixXd adj = kx - proj_k_.transpose() * bnew.transpose();
    return adj - basis_ * (proj_ * kx) + basis_ * (proj_k_proj_ * bnew.transpose());
  }

  // centered K(x, x) at new points
  VectorXd smooth_point(const MatrixXd& pts) const {
    validate_points(pts);
    const auto m = pts.rows();
    VectorXd out(m);
    for (Eigen::Index i = 0; i < m; ++i) out(i) = raw_k(pts.row(i), pts.row(i));
    if (centering_basis_dim() == 0) return out;
    const MatrixXd kx = raw_cross(pts);       // n x m
    const MatrixXd bnew = centering_basis_at(pts);
    const MatrixXd skx = proj_ * kx;          // q x m
    for (Eigen::Index i = 0; i < m; ++i) {
      const VectorXd b = bnew.row(i).transpose();
      out(i) += -2.0 * b.dot(skx.col(i)) + b.dot(proj_k_proj_ * b);
    }
    return out;
  }

 private:
  int centering_basis_dim() const {
    if (dom_.kind == DomainKind::Plane2D) return 3;  // {1, x, y}: makes E(r) PSD on the range
    if (dom_.measure == MeasureKind::EmpiricalOnData) return 1;
    return 0;  // analytic measures: kernels are zero-mean by construction
  }

  MatrixXd centering_basis_at(const MatrixXd& pts) const {
    MatrixXd b(pts.rows(), centering_basis_dim());
    b.col(0).setOnes();
    if (dom_.kind == DomainKind::Plane2D) b.rightCols(2) = pts;
    return b;
  }

  MatrixXd par_raw(const MatrixXd& pts) const {
    const auto m = pts.rows();
    switch (dom_.kind) {
      case DomainKind::UnitInterval: {
        MatrixXd b(m, 1);
        for (Eigen::Index i = 0; i < m; ++i) b(i, 0) = bern_k1(pts(i, 0));
        return b;
      }
      case DomainKind::Plane2D: return pts;
      case DomainKind::Sphere: return MatrixXd(m, 0);
      case DomainKind::FiniteGrid: {
        MatrixXd b(m, 1);
        for (Eigen::Index i = 0; i < m; ++i) b(i, 0) = grid_.phi(grid_index(pts(i, 0)));
        return b;
      }
    }
    return MatrixXd(m, 0);
  }

  double raw_k(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) const {
    switch (dom_.kind) {
      case DomainKind::UnitInterval: return cubic_spline_kernel(a(0), b(0), KernelPart::Smooth);
      case DomainKind::Plane2D: return thin_plate_semikernel(a(0), a(1), b(0), b(1));
      case DomainKind::Sphere:
        return sphere_kernel(a(0), a(1), b(0), b(1), dom_.sphere_order, dom_.sphere_truncation);
      case DomainKind::FiniteGrid: return grid_.gram(grid_index(a(0)), grid_index(b(0)));
    }
    return 0.0;
  }

  MatrixXd raw_gram(const MatrixXd& pts) const {
    const auto n = pts.rows();
    MatrixXd k(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i; j < n; ++j) k(i, j) = k(j, i) = raw_k(pts.row(i), pts.row(j));
    return k;
  }

  MatrixXd raw_cross(const MatrixXd& pts) const {
    MatrixXd k(pts_.rows(), pts.rows());
    for (Eigen::Index i = 0; i < pts_.rows(); ++i)
      for (Eigen::Index j = 0; j < pts.rows(); ++j) k(i, j) = raw_k(pts_.row(i), pts.row(j));
    return k;
  }

  int grid_index(double x) const {
    const double r = std::round(x);
    if (std::abs(x - r) > 1e-9 || r < 1 || r > dom_.grid_size)
      throw data_error(name_ + ": grid values must be integers in 1.." +
                       std::to_string(dom_.grid_size));
    return static_cast<int>(r) - 1;
  }

  void validate_points(const MatrixXd& pts) const {
    if (pts.cols() != dom_.arity()) throw data_error(name_ + ": wrong coordinate count");
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      if (!pts.row(i).allFinite()) throw data_error(name_ + ": non-finite value");
      if (dom_.kind == DomainKind::UnitInterval && (pts(i, 0) < 0.0 || pts(i, 0) > 1.0))
        throw data_error(name_ + ": value outside [0,1]; rescale at ingestion");
      if (dom_.kind == DomainKind::Sphere &&
          (std::abs(pts(i, 0)) > 90.0 || std::abs(pts(i, 1)) > 180.0))
        throw data_error(name_ + ": invalid (lat, lon)");
    }
  }

  Domain dom_;
  MatrixXd pts_;
  std::string name_;
  VectorXd w_;
  GridMarginal grid_;
  MatrixXd basis_;        // n x q centering basis (empty when analytic)
  MatrixXd proj_;         // q x n, (B'WB)^{-1} B'W
  MatrixXd proj_k_;       // q x n
  MatrixXd proj_k_proj_;  // q x q
  Eigen::RowVectorXd par_shift_;
  MatrixXd k_, kc_;
};

// The model bound to training data: marginals, T, Sigma_beta, and component
// evaluation at arbitrary points.
class ModelBasis {
 public:
  ModelBasis(const Model& model, const DataSet& data) : model_(model) {
    const auto& spec = model.spec();
    if (data.size() != spec.domains.size()) throw data_error("data/domain count mismatch");
    const auto n = data.empty() ? 0 : data[0].rows();
    for (size_t v = 0; v < data.size(); ++v) {
      if (data[v].rows() != n) throw data_error("ragged data columns");
      marginals_.emplace_back(spec.domains[v], data[v], spec.var_names[v]);
    }

    grams_.T.resize(n, model.m0_dim());
    int col = 0;
    for (const auto& t : model.h0_terms()) {
      const MatrixXd cols = h0_columns(t, data);
      grams_.T.middleCols(col, cols.cols()) = cols;
      for (int j = 0; j < cols.cols(); ++j)
        grams_.t_labels.push_back(h0_col_label(t, j));
      col += static_cast<int>(cols.cols());
    }
    check_rank();

    for (const auto& t : model.penalized_terms()) {
      grams_.sigma.push_back(term_gram(t));
      grams_.labels.push_back(model.label(t));
    }
  }

  const Model& model() const { return model_; }
  const GramSet& grams() const { return grams_; }
  const Marginal& marginal(int v) const { return marginals_.at(v); }

  // unpenalized design at new points, m x M0
  MatrixXd t_at(const DataSet& pts) const {
    const auto m = pts.at(0).rows();
    MatrixXd t(m, model_.m0_dim());
    int col = 0;
    for (const auto& term : model_.h0_terms()) {
      const MatrixXd cols = h0_columns(term, pts);
      t.middleCols(col, cols.cols()) = cols;
      col += static_cast<int>(cols.cols());
    }
    return t;
  }

  // n x m cross Gram of penalized term beta against new points
  MatrixXd sigma_cross(int beta, const DataSet& pts) const {
    const auto& t = model_.penalized_terms().at(beta);
    const auto m = pts.at(t.variables.at(0)).rows();
    MatrixXd out = MatrixXd::Ones(grams_.n(), m);
    for (size_t i = 0; i < t.variables.size(); ++i) {
      const int v = t.variables[i];
      const auto& mar = marginals_[v];
      if (t.flavor[i] == Flavor::Smooth)
        out = out.cwiseProduct(mar.smooth_cross(pts.at(v)));
      else
        out = out.cwiseProduct(mar.par_at(mar.points()) * mar.par_at(pts.at(v)).transpose());
    }
    return out;
  }

  // K_beta(x, x) at new points
  VectorXd sigma_point(int beta, const DataSet& pts) const {
    const auto& t = model_.penalized_terms().at(beta);
    const auto m = pts.at(t.variables.at(0)).rows();
    VectorXd out = VectorXd::Ones(m);
    for (size_t i = 0; i < t.variables.size(); ++i) {
      const int v = t.variables[i];
      const auto& mar = marginals_[v];
      if (t.flavor[i] == Flavor::Smooth)
        out = out.cwiseProduct(mar.smooth_point(pts.at(v)));
      else
        out = out.cwiseProduct(mar.par_at(pts.at(v)).rowwise().squaredNorm());
    }
    return out;
  }

  // fitted penalized component beta at new points: theta_beta * K_beta' c
  VectorXd component_value(int beta, const VectorXd& c, double theta_beta,
                           const DataSet& pts) const {
    return theta_beta * (sigma_cross(beta, pts).transpose() * c);
  }

  // fitted H0 component of one unpenalized term at new points
  VectorXd h0_term_value(int h0_index, const VectorXd& d, const DataSet& pts) const {
    const auto& terms = model_.h0_terms();
    int col = 0;
    for (int i = 0; i < h0_index; ++i) col += model_.h0_term_dim(terms[i]);
    const int dim = model_.h0_term_dim(terms.at(h0_index));
    return h0_columns(terms[h0_index], pts) * d.segment(col, dim);
  }

 private:
  MatrixXd h0_columns(const TermSpec& t, const DataSet& pts) const {
    Eigen::Index m = 0;
    for (const auto& p : pts)
      if (p.rows() > 0) { m = p.rows(); break; }
    MatrixXd cols = MatrixXd::Ones(m, 1);
    for (int v : t.variables) {
      const MatrixXd b = marginals_[v].par_at(pts.at(v));  // m x np
      MatrixXd next(m, cols.cols() * b.cols());
      for (int i = 0; i < cols.cols(); ++i)
        for (int j = 0; j < b.cols(); ++j)
          next.col(i * b.cols() + j) = cols.col(i).cwiseProduct(b.col(j));
      cols = std::move(next);
    }
    return cols;
  }

  std::string h0_col_label(const TermSpec& t, int j) const {
    if (t.variables.empty()) return "const";
    std::string s = model_.label(t);
    if (model_.h0_term_dim(t) > 1) s += "[" + std::to_string(j) + "]";
    return s;
  }

  MatrixXd term_gram(const TermSpec& t) const {
    MatrixXd out = MatrixXd::Ones(grams_.n(), grams_.n());
    for (size_t i = 0; i < t.variables.size(); ++i) {
      const int v = t.variables[i];
      const auto& mar = marginals_[v];
      if (t.flavor[i] == Flavor::Smooth) {
        out = out.cwiseProduct(mar.smooth_gram());
      } else {
        const MatrixXd b = mar.par_at(mar.points());
        out = out.cwiseProduct(MatrixXd(b * b.transpose()));
      }
    }
    return out;
  }

  void check_rank() const {
    if (grams_.T.cols() == 0) return;
    Eigen::ColPivHouseholderQR<MatrixXd> qr(grams_.T);
    qr.setThreshold(1e-10);
    if (qr.rank() < grams_.T.cols()) {
      std::string bad;
      const auto& perm = qr.colsPermutation().indices();
      for (Eigen::Index i = qr.rank(); i < grams_.T.cols(); ++i)
        bad += (bad.empty() ? "" : ", ") + grams_.t_labels[perm(i)];
      throw data_error("rank-deficient unpenalized design; collinear columns: " + bad);
    }
  }

  const Model& model_;
  std::vector<Marginal> marginals_;
  GramSet grams_;
};

// ---- grid-based averaging-operator oracle ----

// Function values on a full tensor grid, row-major with the last axis fastest.
struct GridFn {
  std::vector<int> dims;
  std::vector<double> v;

  int size() const {
    int s = 1;
    for (int d : dims) s *= d;
    return s;
  }
};

namespace detail {

// averaging operator E_alpha: replace axis `axis` by its weighted average
inline GridFn average_axis(const GridFn& f, int axis, const VectorXd& w) {
  GridFn out = f;
  int stride = 1;
  for (size_t a = axis + 1; a < f.dims.size(); ++a) stride *= f.dims[a];
  const int na = f.dims[axis];
  const int block = stride * na;
  for (int base = 0; base < f.size(); base += block) {
    for (int s = 0; s < stride; ++s) {
      double avg = 0.0;
      for (int i = 0; i < na; ++i) avg += w(i) * f.v[base + i * stride + s];
      for (int i = 0; i < na; ++i) out.v[base + i * stride + s] = avg;
    }
  }
  return out;
}

}  // namespace detail

// Direct implementation of the identity expansion over averaging operators:
// component for subset S is prod_{a in S}(I-E_a) prod_{a not in S} E_a f.
// Returned map is keyed by the subset bitmask (bit a = axis a present).
inline std::map<int, GridFn> empirical_anova(const GridFn& f, const std::vector<VectorXd>& weights) {
  const int d = static_cast<int>(f.dims.size());
  if (static_cast<int>(weights.size()) != d)
    throw config_error("empirical_anova: one weight vector per axis required");
  for (int a = 0; a < d; ++a) {
    if (weights[a].size() != f.dims[a])
      throw config_error("empirical_anova: weight length mismatch on axis " + std::to_string(a));
    if (std::abs(weights[a].sum() - 1.0) > 1e-12)
      throw config_error("empirical_anova: weights on axis " + std::to_string(a) +
                         " must sum to 1");
  }
  std::map<int, GridFn> out;
  for (int mask = 0; mask < (1 << d); ++mask) {
    GridFn comp = f;
    for (int a = 0; a < d; ++a) {
      const GridFn avg = detail::average_axis(comp, a, weights[a]);
      if (mask >> a & 1) {
        for (int i = 0; i < comp.size(); ++i) comp.v[i] -= avg.v[i];  // (I - E_a)
      } else {
        comp = avg;  // E_a
      }
    }
    out.emplace(mask, std::move(comp));
  }
  return out;
}

}  // namespace ssanova

#endif  // SSANOVA_ANOVA_HPP
