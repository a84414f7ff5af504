// ssanova: batch front door for the smoothing-spline ANOVA library.
//
//   ssanova <fit|tune|predict|components|simulate> [options]
//
// Exit codes: 0 ok, 2 usage/schema error, 3 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <ssanova/expfam.hpp>
#include <ssanova/gaussian.hpp>
#include <ssanova/mvbernoulli.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ssanova;

namespace {

constexpr int kSchemaVersion = 1;

struct cli_usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- formatting and atomic file output --------------------------------------

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void write_atomic(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw cli_usage_error("cannot write " + tmp.string());
    out << content;
  }
  fs::rename(tmp, path);
}

void write_json_atomic(const fs::path& path, const json& j) {
  write_atomic(path, j.dump(2) + "\n");
}

// ---- CSV ---------------------------------------------------------------------

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;  // NaN marks a missing cell
  int dropped = 0;                        // incomplete rows removed at ingestion

  int col(const std::string& name) const {
    for (size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return static_cast<int>(j);
    throw cli_usage_error("data is missing required column '" + name + "'");
  }
};

bool missing_token(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s.empty() || s == "na" || s == "nan" || s == "null";
}

Csv read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw cli_usage_error("cannot open data file " + path.string());
  Csv csv;
  std::string line;
  if (!std::getline(in, line)) throw cli_usage_error("empty data file " + path.string());
  std::stringstream hs(line);
  for (std::string cell; std::getline(hs, cell, ',');) csv.header.push_back(cell);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream rs(line);
    std::string cell;
    bool incomplete = false;
    for (size_t j = 0; j < csv.header.size(); ++j) {
      if (!std::getline(rs, cell, ',')) cell.clear();
      if (missing_token(cell)) {
        incomplete = true;
        break;
      }
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw cli_usage_error("non-numeric cell '" + cell + "' in column '" + csv.header[j] + "'");
      }
    }
    if (incomplete) {
      ++csv.dropped;
      continue;
    }
    csv.rows.push_back(std::move(row));
  }
  if (csv.dropped > 0)
    std::cerr << "warning: dropped " << csv.dropped << " rows with missing values\n";
  return csv;
}

std::string render_csv(const std::vector<std::string>& header,
                       const std::vector<std::vector<double>>& rows) {
  std::ostringstream os;
  for (size_t j = 0; j < header.size(); ++j) os << (j ? "," : "") << header[j];
  os << "\n";
  for (const auto& row : rows) {
    for (size_t j = 0; j < row.size(); ++j) os << (j ? "," : "") << fmt(row[j]);
    os << "\n";
  }
  return os.str();
}

// ---- model-spec JSON ----------------------------------------------------------

DomainKind parse_kind(const std::string& s) {
  if (s == "unit_interval") return DomainKind::UnitInterval;
  if (s == "plane2d") return DomainKind::Plane2D;
  if (s == "sphere") return DomainKind::Sphere;
  if (s == "finite_grid") return DomainKind::FiniteGrid;
  throw cli_usage_error("unknown variable kind '" + s + "'");
}

MeasureKind default_measure(DomainKind k) {
  switch (k) {
    case DomainKind::UnitInterval: return MeasureKind::LebesgueUniform;
    case DomainKind::Plane2D: return MeasureKind::EmpiricalOnData;
    case DomainKind::Sphere: return MeasureKind::EmpiricalOnData;
    case DomainKind::FiniteGrid: return MeasureKind::UniformGrid;
  }
  return MeasureKind::LebesgueUniform;
}

MeasureKind parse_measure(const std::string& s) {
  if (s == "lebesgue") return MeasureKind::LebesgueUniform;
  if (s == "empirical") return MeasureKind::EmpiricalOnData;
  if (s == "uniform_sphere") return MeasureKind::UniformSphere;
  if (s == "uniform_grid") return MeasureKind::UniformGrid;
  throw cli_usage_error("unknown measure '" + s + "'");
}

Family parse_family(const std::string& s) {
  if (s == "gaussian") return Family::Gaussian;
  if (s == "bernoulli") return Family::Bernoulli;
  if (s == "polychotomous") return Family::Polychotomous;
  if (s == "mvbernoulli") return Family::MvBernoulli;
  if (s == "msvm") return Family::Msvm;
  throw cli_usage_error("unknown family '" + s + "'");
}

struct Tuning {
  int lambda_grid = 40;
  double log10_lambda_min = -8.0;
  double log10_lambda_max = 2.0;
  int folds = 5;
  std::optional<double> fixed_log10_lambda;  // skip the search entirely
};

struct SpecBundle {
  json raw;             // verbatim spec document, echoed into fit.json
  ModelSpec model_spec;
  Tuning tuning;
};

SpecBundle parse_spec(const json& doc) {
  SpecBundle out;
  out.raw = doc;
  if (!doc.is_object()) throw cli_usage_error("spec: top level must be an object");
  if (doc.value("schema_version", kSchemaVersion) != kSchemaVersion)
    throw cli_usage_error("spec: unsupported schema_version");
  if (!doc.contains("variables") || !doc["variables"].is_array() || doc["variables"].empty())
    throw cli_usage_error("spec: 'variables' must be a non-empty array");
  if (!doc.contains("terms") || !doc["terms"].is_array() || doc["terms"].empty())
    throw cli_usage_error("spec: 'terms' must be a non-empty array");

  ModelSpec& ms = out.model_spec;
  ms.family = parse_family(doc.value("family", std::string("gaussian")));
  for (const auto& v : doc["variables"]) {
    if (!v.contains("name")) throw cli_usage_error("spec: variable missing 'name'");
    Domain d;
    d.kind = parse_kind(v.value("kind", std::string("unit_interval")));
    d.measure = v.contains("measure") ? parse_measure(v["measure"].get<std::string>())
                                      : default_measure(d.kind);
    if (d.kind == DomainKind::FiniteGrid) {
      d.grid_size = v.value("grid_size", 0);
      if (d.grid_size < 3) throw cli_usage_error("spec: finite_grid needs 'grid_size' >= 3");
    }
    ms.domains.push_back(d);
    ms.var_names.push_back(v["name"].get<std::string>());
  }

  const auto var_index = [&](const std::string& name) {
    for (size_t i = 0; i < ms.var_names.size(); ++i)
      if (ms.var_names[i] == name) return static_cast<int>(i);
    throw cli_usage_error("spec: term references unknown variable '" + name + "'");
  };
  for (const auto& t : doc["terms"]) {
    if (!t.contains("variables") || !t["variables"].is_array())
      throw cli_usage_error("spec: term missing 'variables'");
    std::vector<int> vars;
    for (const auto& nm : t["variables"]) vars.push_back(var_index(nm.get<std::string>()));
    if (vars.empty()) {
      ms.terms.push_back(TermSpec{});  // the constant term
      continue;
    }
    if (t.contains("flavor")) {
      TermSpec ts;
      ts.variables = vars;
      for (const auto& f : t["flavor"]) {
        const std::string s = f.get<std::string>();
        if (s == "parametric")
          ts.flavor.push_back(Flavor::Parametric);
        else if (s == "smooth")
          ts.flavor.push_back(Flavor::Smooth);
        else
          throw cli_usage_error("spec: unknown flavor '" + s + "'");
      }
      if (ts.flavor.size() != ts.variables.size())
        throw cli_usage_error("spec: 'flavor' must parallel 'variables'");
      ts.penalized = t.value("penalized", ts.has_smooth());
      ms.terms.push_back(ts);
    } else {
      // no flavor given: expand every parametric/smooth combination
      for (auto& ts : expand_interaction(vars)) ms.terms.push_back(ts);
    }
  }

  if (doc.contains("tuning")) {
    const auto& tu = doc["tuning"];
    out.tuning.lambda_grid = tu.value("lambda_grid", out.tuning.lambda_grid);
    out.tuning.log10_lambda_min = tu.value("log10_lambda_min", out.tuning.log10_lambda_min);
    out.tuning.log10_lambda_max = tu.value("log10_lambda_max", out.tuning.log10_lambda_max);
    out.tuning.folds = tu.value("folds", out.tuning.folds);
    if (tu.contains("log10_lambda")) out.tuning.fixed_log10_lambda = tu["log10_lambda"].get<double>();
    if (out.tuning.lambda_grid < 1 || out.tuning.folds < 2 ||
        !(out.tuning.log10_lambda_min < out.tuning.log10_lambda_max))
      throw cli_usage_error("spec: invalid 'tuning' block");
  }
  return out;
}

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw cli_usage_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw cli_usage_error(path.string() + ": " + e.what());
  }
}

// ---- data binding --------------------------------------------------------------

struct Rescale {
  std::string name;
  double min = 0.0, max = 1.0;
};

struct BoundData {
  DataSet data;                  // one matrix per model variable, library units
  std::vector<Rescale> rescale;  // affine records for unit-interval variables
};

// Columns per variable: unit_interval/finite_grid use '<name>'; plane2d uses
// '<name>_1'/'<name>_2'; sphere uses '<name>_lat'/'<name>_lon' (degrees).
BoundData bind_data(const Csv& csv, const ModelSpec& ms,
                    const std::vector<Rescale>* fixed_rescale) {
  BoundData out;
  const int n = static_cast<int>(csv.rows.size());
  if (n == 0) throw cli_usage_error("no usable data rows");
  for (size_t v = 0; v < ms.domains.size(); ++v) {
    const Domain& d = ms.domains[v];
    const std::string& name = ms.var_names[v];
    MatrixXd m(n, d.arity());
    if (d.arity() == 2) {
      const bool sphere = d.kind == DomainKind::Sphere;
      const int c1 = csv.col(name + (sphere ? "_lat" : "_1"));
      const int c2 = csv.col(name + (sphere ? "_lon" : "_2"));
      for (int i = 0; i < n; ++i) {
        m(i, 0) = csv.rows[i][c1];
        m(i, 1) = csv.rows[i][c2];
      }
    } else {
      const int c = csv.col(name);
      for (int i = 0; i < n; ++i) m(i, 0) = csv.rows[i][c];
      if (d.kind == DomainKind::UnitInterval) {
        Rescale r{name, m.minCoeff(), m.maxCoeff()};
        if (fixed_rescale) {
          bool found = false;
          for (const auto& fr : *fixed_rescale)
            if (fr.name == name) {
              r = fr;
              found = true;
            }
          if (!found) throw cli_usage_error("fit is missing a rescale record for '" + name + "'");
        } else if (!(r.min < r.max)) {
          throw cli_usage_error("variable '" + name + "' is constant; cannot rescale to [0,1]");
        }
        m.col(0) = (m.col(0).array() - r.min) / (r.max - r.min);
        out.rescale.push_back(r);
      }
      if (d.kind == DomainKind::FiniteGrid)
        for (int i = 0; i < n; ++i) {
          const double x = m(i, 0);
          if (x != std::floor(x) || x < 0 || x >= d.grid_size)
            throw cli_usage_error("variable '" + name + "' must be an integer in [0, " +
                                  std::to_string(d.grid_size - 1) + "]");
        }
    }
    out.data.push_back(std::move(m));
  }
  return out;
}

json vec_json(const VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

VectorXd vec_from(const json& a) {
  VectorXd v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<double>();
  return v;
}

// ---- component grids ------------------------------------------------------------

std::string file_label(const std::string& label) {
  std::string out = label;
  for (char& c : out) {
    if (c == ':') c = '-';
    if (c == '*') c = '_';
  }
  return out;
}

// tensor grid over the term's variables; all other variables held at a
// neutral point (they do not enter the component's value)
struct ComponentGrid {
  DataSet pts;
  std::vector<std::string> header;                 // input columns
  std::vector<std::vector<double>> input_columns;  // original units
};

ComponentGrid component_grid(const ModelSpec& ms, const std::vector<Rescale>& rescale,
                             const TermSpec& t) {
  // axis values per term variable (library units + original units per column)
  struct Axis {
    int var;
    std::vector<std::vector<double>> lib;   // rows of the variable's matrix
    std::vector<std::vector<double>> orig;  // same, in data units
    std::vector<std::string> cols;
  };
  std::vector<Axis> axes;
  for (int v : t.variables) {
    Axis ax;
    ax.var = v;
    const Domain& d = ms.domains[static_cast<size_t>(v)];
    const std::string& name = ms.var_names[static_cast<size_t>(v)];
    if (d.kind == DomainKind::UnitInterval) {
      double lo = 0.0, hi = 1.0;
      for (const auto& r : rescale)
        if (r.name == name) {
          lo = r.min;
          hi = r.max;
        }
      for (int i = 0; i <= 100; ++i) {
        const double x = i / 100.0;
        ax.lib.push_back({x});
        ax.orig.push_back({lo + x * (hi - lo)});
      }
      ax.cols = {name};
    } else if (d.kind == DomainKind::FiniteGrid) {
      for (int i = 0; i < d.grid_size; ++i) {
        ax.lib.push_back({double(i)});
        ax.orig.push_back({double(i)});
      }
      ax.cols = {name};
    } else if (d.kind == DomainKind::Sphere) {
      for (int la = 0; la < 73; ++la)
        for (int lo = 0; lo < 144; ++lo) {
          const double lat = -90.0 + 180.0 * la / 72.0;
          const double lon = -180.0 + 360.0 * lo / 144.0;
          ax.lib.push_back({lat, lon});
          ax.orig.push_back({lat, lon});
        }
      ax.cols = {name + "_lat", name + "_lon"};
    } else {  // Plane2D: 101x101 over the unit square in each coordinate
      for (int i = 0; i <= 100; ++i)
        for (int j = 0; j <= 100; ++j) {
          ax.lib.push_back({i / 100.0, j / 100.0});
          ax.orig.push_back({i / 100.0, j / 100.0});
        }
      ax.cols = {name + "_1", name + "_2"};
    }
    axes.push_back(std::move(ax));
  }

  // cartesian product of the axes
  size_t total = 1;
  for (const auto& ax : axes) total *= ax.lib.size();

  ComponentGrid grid;
  for (const auto& ax : axes)
    for (const auto& c : ax.cols) grid.header.push_back(c);
  grid.input_columns.resize(total);

  // neutral fill values per variable
  std::vector<std::vector<double>> fill(ms.domains.size());
  for (size_t v = 0; v < ms.domains.size(); ++v) {
    switch (ms.domains[v].kind) {
      case DomainKind::UnitInterval: fill[v] = {0.5}; break;
      case DomainKind::FiniteGrid: fill[v] = {0.0}; break;
      case DomainKind::Sphere: fill[v] = {0.0, 0.0}; break;
      case DomainKind::Plane2D: fill[v] = {0.5, 0.5}; break;
    }
  }
  for (size_t v = 0; v < ms.domains.size(); ++v) {
    MatrixXd m(total, ms.domains[v].arity());
    for (size_t i = 0; i < total; ++i)
      for (int j = 0; j < m.cols(); ++j) m(static_cast<Eigen::Index>(i), j) = fill[v][j];
    grid.pts.push_back(std::move(m));
  }
  for (size_t i = 0; i < total; ++i) {
    size_t rem = i;
    for (size_t a = axes.size(); a-- > 0;) {
      const Axis& ax = axes[a];
      const size_t k = rem % ax.lib.size();
      rem /= ax.lib.size();
      MatrixXd& m = grid.pts[static_cast<size_t>(ax.var)];
      for (size_t j = 0; j < ax.lib[k].size(); ++j)
        m(static_cast<Eigen::Index>(i), static_cast<int>(j)) = ax.lib[k][j];
    }
    // input columns in axis order
    for (const Axis& ax : axes) {
      size_t r = i;
      size_t stride = 1;
      // recompute this axis's index
      for (size_t b = axes.size(); b-- > 0;) {
        if (&axes[b] == &ax) break;
        stride *= axes[b].lib.size();
      }
      const size_t k = (r / stride) % ax.lib.size();
      for (double v : ax.orig[k]) grid.input_columns[i].push_back(v);
    }
  }
  return grid;
}

void write_components(const fs::path& dir, const Model& model, const ModelBasis& basis,
                      const FitResult& fit, const std::vector<Rescale>& rescale) {
  const ModelSpec& ms = model.spec();
  // constant term
  {
    std::vector<std::vector<double>> row{{fit.d(0)}};
    write_atomic(dir / "const.csv", render_csv({"value"}, row));
  }
  // unpenalized (parametric) terms beyond the constant
  const auto& h0 = model.h0_terms();
  int dcol = 1;
  for (size_t i = 1; i < h0.size(); ++i) {
    const int dim = model.h0_term_dim(h0[i]);
    ComponentGrid g = component_grid(ms, rescale, h0[i]);
    const VectorXd val =
        basis.h0_term_value(static_cast<int>(i), fit.d.segment(dcol, dim), g.pts);
    dcol += dim;
    auto rows = g.input_columns;
    for (size_t r = 0; r < rows.size(); ++r) rows[r].push_back(val(static_cast<Eigen::Index>(r)));
    auto header = g.header;
    header.push_back("value");
    write_atomic(dir / (file_label(model.label(h0[i])) + ".csv"), render_csv(header, rows));
  }
  // penalized terms
  const auto& pen = model.penalized_terms();
  for (size_t b = 0; b < pen.size(); ++b) {
    ComponentGrid g = component_grid(ms, rescale, pen[b]);
    const VectorXd val =
        basis.component_value(static_cast<int>(b), fit.c, fit.theta(static_cast<int>(b)), g.pts);
    auto rows = g.input_columns;
    for (size_t r = 0; r < rows.size(); ++r) rows[r].push_back(val(static_cast<Eigen::Index>(r)));
    auto header = g.header;
    header.push_back("value");
    write_atomic(dir / (file_label(model.label(pen[b])) + ".csv"), render_csv(header, rows));
  }
}

// ---- fit / tune -------------------------------------------------------------------

struct CommonArgs {
  std::string data_path, spec_path, fit_path, out_dir;
  std::string family_override;
  unsigned seed = 42;
};

json fit_document(const SpecBundle& spec, const BoundData& bound, const Csv& csv,
                  const FitResult& fit, const std::string& family,
                  const std::optional<double>& nll) {
  json doc;
  doc["schema_version"] = kSchemaVersion;
  doc["family"] = family;
  doc["spec"] = spec.raw;
  doc["dropped_rows"] = csv.dropped;
  json rs = json::array();
  for (const auto& r : bound.rescale) rs.push_back({{"name", r.name}, {"min", r.min}, {"max", r.max}});
  doc["rescale"] = rs;
  doc["lambda"] = fit.lambda;
  doc["theta"] = vec_json(fit.theta);
  doc["c"] = vec_json(fit.c);
  doc["d"] = vec_json(fit.d);
  doc["trace_A"] = fit.trace_A;
  doc["sigma2_hat"] = fit.sigma2_hat;
  doc["gcv"] = fit.gcv;
  doc["fitted"] = vec_json(fit.fitted);
  if (nll) doc["nll"] = *nll;
  // training inputs in library units, so predict can rebuild the basis
  json training = json::array();
  for (const auto& m : bound.data) {
    json cols = json::array();
    for (int j = 0; j < m.cols(); ++j) cols.push_back(vec_json(m.col(j)));
    training.push_back(cols);
  }
  doc["training"] = training;
  return doc;
}

// fits the spec'd model; returns the fit document plus diagnostics rows
struct FitOutcome {
  json doc;
  std::vector<std::vector<double>> diagnostics;  // (lambda, score)
  std::string diag_score_name;
  Model model;
  BoundData bound;
  FitResult fit;
};

FitOutcome run_model_fit(const CommonArgs& args) {
  const Csv csv = read_csv(args.data_path);
  SpecBundle spec = parse_spec(load_json(args.spec_path));
  if (!args.family_override.empty()) spec.model_spec.family = parse_family(args.family_override);
  const std::string family_name =
      args.family_override.empty() ? spec.raw.value("family", std::string("gaussian"))
                                   : args.family_override;
  const Family family = spec.model_spec.family;
  if (family != Family::Gaussian && family != Family::Bernoulli)
    throw cli_usage_error(
        "fit/tune support the gaussian and bernoulli families; use the library API for "
        "polychotomous, mvbernoulli, and msvm models");

  FitOutcome out{json{}, {}, "", Model(spec.model_spec), bind_data(csv, spec.model_spec, nullptr),
                 FitResult{}};
  const int yc = csv.col("y");
  VectorXd y(csv.rows.size());
  for (size_t i = 0; i < csv.rows.size(); ++i) y(static_cast<Eigen::Index>(i)) = csv.rows[i][yc];

  ModelBasis basis(out.model, out.bound.data);
  const GramSet& grams = basis.grams();

  if (family == Family::Gaussian && spec.tuning.fixed_log10_lambda) {
    double scale = 0.0;
    for (const auto& s : grams.sigma) scale += s.trace();
    scale = grams.p() > 0 ? scale / grams.n() : 1.0;
    const double lambda = std::pow(10.0, *spec.tuning.fixed_log10_lambda) * scale;
    out.fit = solve_penalized_ls(grams, y, lambda, VectorXd::Ones(grams.p()));
    out.diag_score_name = "gcv";
    out.diagnostics.push_back({lambda, out.fit.gcv});
    out.doc = fit_document(spec, out.bound, csv, out.fit, family_name, std::nullopt);
  } else if (family == Family::Gaussian) {
    FitConfig cfg;
    cfg.lambda_grid_size = spec.tuning.lambda_grid;
    cfg.log10_lambda_min = spec.tuning.log10_lambda_min;
    cfg.log10_lambda_max = spec.tuning.log10_lambda_max;
    const TuneResult tuned = tune(grams, y, cfg);
    out.fit = tuned.fit;
    out.diag_score_name = "gcv";
    for (const auto& [l, v] : tuned.lambda_trace) out.diagnostics.push_back({l, v});
    out.doc = fit_document(spec, out.bound, csv, out.fit, family_name, std::nullopt);
  } else {
    for (Eigen::Index i = 0; i < y.size(); ++i)
      if (y(i) != 0.0 && y(i) != 1.0)
        throw cli_usage_error("bernoulli family requires a 0/1 response column 'y'");
    const VectorXd theta = VectorXd::Ones(grams.p());
    const auto grid = default_lambda_grid(grams, spec.tuning.lambda_grid,
                                          spec.tuning.log10_lambda_min,
                                          spec.tuning.log10_lambda_max);
    std::vector<int> strata(static_cast<size_t>(y.size()));
    for (Eigen::Index i = 0; i < y.size(); ++i) strata[static_cast<size_t>(i)] = int(y(i));
    const auto heldout = [&](const std::vector<int>& train, const std::vector<int>& test,
                             double lambda) {
      DataSet tr, te;
      for (size_t v = 0; v < out.bound.data.size(); ++v) {
        tr.push_back(out.bound.data[v](train, Eigen::all));
        te.push_back(out.bound.data[v](test, Eigen::all));
      }
      VectorXd ytr = y(train);
      try {
        ModelBasis tb(out.model, tr);
        const IrlsResult r = irls_fit(tb.grams(), ytr, lambda, theta);
        const VectorXd f = predict(tb, r.fit, te);
        return 2.0 * bernoulli_nll(f, y(test));
      } catch (const convergence_error&) {
        return std::numeric_limits<double>::infinity();
      }
    };
    const CvTuneResult cv = cv_tune(heldout, strata, spec.tuning.folds, grid, args.seed);
    const IrlsResult final = irls_fit(grams, y, cv.lambda, theta);
    out.fit = final.fit;
    out.diag_score_name = "cv_deviance";
    for (const auto& [l, v] : cv.deviance_by_lambda) out.diagnostics.push_back({l, v});
    out.doc = fit_document(spec, out.bound, csv, out.fit, family_name, final.nll);
    out.doc["lambda_1se"] = cv.lambda_1se;
  }
  return out;
}

int cmd_fit(const CommonArgs& args, bool tune_only) {
  FitOutcome r = run_model_fit(args);
  const fs::path out(args.out_dir);
  write_atomic(out / "diagnostics.csv",
               render_csv({"lambda", r.diag_score_name}, r.diagnostics));
  if (tune_only) {
    json doc;
    doc["schema_version"] = kSchemaVersion;
    doc["lambda"] = r.fit.lambda;
    doc["theta"] = vec_json(r.fit.theta);
    doc["gcv"] = r.fit.gcv;
    write_json_atomic(out / "tune.json", doc);
    return 0;
  }
  write_json_atomic(out / "fit.json", r.doc);
  ModelBasis basis(r.model, r.bound.data);
  write_components(out / "components", r.model, basis, r.fit, r.bound.rescale);
  return 0;
}

// ---- predict / components from a saved fit -----------------------------------------

struct LoadedFit {
  SpecBundle spec;
  std::string family_name;
  std::vector<Rescale> rescale;
  DataSet training;
  FitResult fit;
};

LoadedFit load_fit(const fs::path& path) {
  const json doc = load_json(path);
  LoadedFit lf;
  if (doc.value("schema_version", -1) != kSchemaVersion)
    throw cli_usage_error("fit.json: unsupported schema_version");
  lf.spec = parse_spec(doc.at("spec"));
  lf.family_name = doc.value("family", std::string("gaussian"));
  lf.spec.model_spec.family = parse_family(lf.family_name);
  for (const auto& r : doc.at("rescale"))
    lf.rescale.push_back({r.at("name").get<std::string>(), r.at("min").get<double>(),
                          r.at("max").get<double>()});
  for (const auto& cols : doc.at("training")) {
    MatrixXd m(vec_from(cols.at(0)).size(), cols.size());
    for (size_t j = 0; j < cols.size(); ++j) m.col(static_cast<int>(j)) = vec_from(cols[j]);
    lf.training.push_back(std::move(m));
  }
  lf.fit.c = vec_from(doc.at("c"));
  lf.fit.d = vec_from(doc.at("d"));
  // non-finite scores (e.g. gcv for non-gaussian fits) serialize as null
  const auto num = [&](const char* key) {
    const json& v = doc.at(key);
    return v.is_number() ? v.get<double>() : std::numeric_limits<double>::quiet_NaN();
  };
  lf.fit.lambda = num("lambda");
  lf.fit.theta = vec_from(doc.at("theta"));
  lf.fit.trace_A = num("trace_A");
  lf.fit.sigma2_hat = num("sigma2_hat");
  lf.fit.gcv = num("gcv");
  lf.fit.fitted = vec_from(doc.at("fitted"));
  return lf;
}

int cmd_predict(const CommonArgs& args, std::optional<double> level) {
  LoadedFit lf = load_fit(args.fit_path);
  const bool gaussian = lf.spec.model_spec.family == Family::Gaussian;
  if (level && !gaussian)
    throw cli_usage_error("confidence bands are available for the gaussian family only");
  if (level && (*level < 0.0 || *level >= 1.0))
    throw cli_usage_error("--level must lie in [0, 1)");

  const Csv csv = read_csv(args.data_path);
  const BoundData bound = bind_data(csv, lf.spec.model_spec, &lf.rescale);
  // recorded rescale can push new inputs outside [0,1]; the basis rejects them
  Model model(lf.spec.model_spec);
  ModelBasis basis(model, lf.training);

  std::vector<std::string> header;
  for (const auto& h : csv.header) header.push_back(h);
  header.push_back("prediction");
  const VectorXd pred = predict(basis, lf.fit, bound.data);

  std::vector<std::vector<double>> rows(csv.rows.size());
  for (size_t i = 0; i < csv.rows.size(); ++i) rows[i] = csv.rows[i];

  if (gaussian) {
    const double lv = level.value_or(0.95);
    const IntervalBand band = bayesian_intervals(basis, lf.fit, bound.data, lv);
    header.push_back("lower");
    header.push_back("upper");
    for (size_t i = 0; i < rows.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      rows[i].push_back(pred(k));
      rows[i].push_back(band.lower(k));
      rows[i].push_back(band.upper(k));
    }
  } else {
    header.push_back("probability");
    for (size_t i = 0; i < rows.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      rows[i].push_back(pred(k));
      rows[i].push_back(logistic(pred(k)));
    }
  }
  write_atomic(fs::path(args.out_dir) / "predictions.csv", render_csv(header, rows));
  return 0;
}

int cmd_components(const CommonArgs& args) {
  LoadedFit lf = load_fit(args.fit_path);
  Model model(lf.spec.model_spec);
  ModelBasis basis(model, lf.training);
  write_components(fs::path(args.out_dir) / "components", model, basis, lf.fit, lf.rescale);
  return 0;
}

// ---- simulate ------------------------------------------------------------------------

int cmd_simulate(const std::string& generator, int n, unsigned seed, double sigma,
                 double alpha, const std::string& out_dir) {
  if (n < 1) throw cli_usage_error("--n must be positive");
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const fs::path out(out_dir);
  json truth;
  truth["schema_version"] = kSchemaVersion;
  truth["generator"] = generator;
  truth["seed"] = seed;
  const auto grid101 = [](const std::function<double(double)>& f) {
    json a = json::array();
    for (int i = 0; i <= 100; ++i) a.push_back(f(i / 100.0));
    return a;
  };

  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  if (generator == "gaussian_additive") {
    const auto f1 = [](double x) { return std::sin(2.0 * M_PI * x); };
    const auto f2 = [](double x) { return 2.0 * (x - 0.5) * (x - 0.5) - 1.0 / 6.0; };
    header = {"x1", "x2", "y"};
    for (int i = 0; i < n; ++i) {
      const double x1 = unif(rng), x2 = unif(rng);
      rows.push_back({x1, x2, f1(x1) + f2(x2) + sigma * gauss(rng)});
    }
    truth["sigma"] = sigma;
    truth["f_x1"] = grid101(f1);
    truth["f_x2"] = grid101(f2);
  } else if (generator == "bernoulli_logit") {
    const auto f = [](double x) { return 3.0 * std::sin(2.0 * M_PI * x); };
    header = {"x", "y"};
    for (int i = 0; i < n; ++i) {
      const double x = unif(rng);
      rows.push_back({x, unif(rng) < logistic(f(x)) ? 1.0 : 0.0});
    }
    truth["logit"] = grid101(f);
  } else if (generator == "poly4") {
    // categories 1..3 against reference 0; logits vary smoothly in x
    const std::vector<std::function<double(double)>> fs = {
        [](double x) { return std::sin(2.0 * M_PI * x); },
        [](double x) { return 1.0 - 2.0 * x; },
        [](double x) { return std::cos(2.0 * M_PI * x) - 0.5; }};
    header = {"x", "y"};
    for (int i = 0; i < n; ++i) {
      const double x = unif(rng);
      VectorXd p(4);
      p(0) = 1.0;
      for (int j = 0; j < 3; ++j) p(j + 1) = std::exp(fs[static_cast<size_t>(j)](x));
      p /= p.sum();
      double u = unif(rng);
      int cat = 0;
      while (cat < 3 && u >= p(cat)) u -= p(cat), ++cat;
      rows.push_back({x, double(cat)});
    }
    for (int j = 0; j < 3; ++j)
      truth["logit_cat" + std::to_string(j + 1)] = grid101(fs[static_cast<size_t>(j)]);
  } else if (generator == "mvb_two_eye") {
    // per-subject paired binary outcomes with an eye-specific covariate, a
    // smooth marginal logit, and a constant within-pair association alpha;
    // at alpha = 0 the two outcomes are independent
    const auto f = [](double x) { return std::sin(2.0 * M_PI * x); };
    header = {"x_1", "x_2", "y_1", "y_2"};
    for (int i = 0; i < n; ++i) {
      const double x1 = unif(rng), x2 = unif(rng);
      MvbParams p;
      p.m = 2;
      p.values = (VectorXd(3) << f(x1), f(x2), alpha).finished();
      const unsigned s = sample_mvb(p, 1, rng)[0];
      rows.push_back({x1, x2, double(s & 1u), double((s >> 1) & 1u)});
    }
    truth["alpha"] = alpha;
    truth["logit"] = grid101(f);
  } else if (generator == "msvm_blobs") {
    const double cx[3] = {0.2, 0.8, 0.5}, cy[3] = {0.2, 0.2, 0.8};
    header = {"x_1", "x_2", "y"};
    for (int i = 0; i < n; ++i) {
      const int j = i % 3;
      rows.push_back({cx[j] + 0.08 * gauss(rng), cy[j] + 0.08 * gauss(rng), double(j + 1)});
    }
    truth["centers"] = {{cx[0], cy[0]}, {cx[1], cy[1]}, {cx[2], cy[2]}};
  } else {
    throw cli_usage_error("unknown generator '" + generator + "'");
  }

  write_atomic(out / "data.csv", render_csv(header, rows));
  write_json_atomic(out / "truth.json", truth);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"smoothing-spline ANOVA batch front door"};
  app.require_subcommand(1);

  CommonArgs args;
  std::optional<double> level;
  std::string generator = "gaussian_additive";
  int sim_n = 200;
  double sigma = 0.1, alpha = 0.0;

  auto* fit = app.add_subcommand("fit", "fit a model and emit artifacts");
  fit->add_option("--data", args.data_path)->required();
  fit->add_option("--spec", args.spec_path)->required();
  fit->add_option("--out", args.out_dir)->required();
  fit->add_option("--seed", args.seed);
  fit->add_option("--family", args.family_override);

  auto* tune = app.add_subcommand("tune", "smoothing-parameter search only");
  tune->add_option("--data", args.data_path)->required();
  tune->add_option("--spec", args.spec_path)->required();
  tune->add_option("--out", args.out_dir)->required();
  tune->add_option("--seed", args.seed);
  tune->add_option("--family", args.family_override);

  auto* predict = app.add_subcommand("predict", "evaluate a saved fit at new points");
  predict->add_option("--data", args.data_path)->required();
  predict->add_option("--fit", args.fit_path)->required();
  predict->add_option("--out", args.out_dir)->required();
  predict->add_option("--level", level, "confidence level for bands (gaussian only)");

  auto* components = app.add_subcommand("components", "re-emit per-term component grids");
  components->add_option("--fit", args.fit_path)->required();
  components->add_option("--out", args.out_dir)->required();

  auto* simulate = app.add_subcommand("simulate", "generate a synthetic dataset + truth.json");
  simulate->add_option("--generator", generator,
                       "gaussian_additive|bernoulli_logit|poly4|mvb_two_eye|msvm_blobs");
  simulate->add_option("--n", sim_n);
  simulate->add_option("--seed", args.seed);
  simulate->add_option("--sigma", sigma, "noise level (gaussian_additive)");
  simulate->add_option("--alpha", alpha, "association parameter (mvb_two_eye)");
  simulate->add_option("--out", args.out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (fit->parsed()) return cmd_fit(args, false);
    if (tune->parsed()) return cmd_fit(args, true);
    if (predict->parsed()) return cmd_predict(args, level);
    if (components->parsed()) return cmd_components(args);
    if (simulate->parsed()) return cmd_simulate(generator, sim_n, args.seed, sigma, alpha,
                                                args.out_dir);
  } catch (const cli_usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const spec_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const data_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
