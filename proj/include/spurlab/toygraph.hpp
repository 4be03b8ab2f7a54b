#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "spurlab/numkit/error.hpp"
#include "spurlab/numkit/matrix.hpp"
#include "spurlab/numkit/sym_eig.hpp"

// The four-group augmentation graph: adjacency, closed-form spectrum, spectral
// embedding, feature margins and the hard-margin probe on the embedding.
//
// Group ids are g = 2a + y (attribute-major). Row x of the 4n×4n adjacency
// belongs to group x / n.
namespace spurlab::toygraph {

struct ToyGraphSpec {
  double rho = 0.0;     // same attribute, same class
  double c_spur = 0.0;  // same attribute, different class
  double c_inv = 0.0;   // same class, different attribute
  double c_opp = 0.0;   // both differ
  std::size_t n = 1;    // samples per group

  void validate() const {
    if (!(rho >= 0 && c_spur >= 0 && c_inv >= 0 && c_opp >= 0)) {
      throw PreconditionError("ToyGraphSpec: edge weights must be non-negative");
    }
    if (n < 1) throw PreconditionError("ToyGraphSpec: n must be >= 1");
  }

  // c_spur > c_opp, c_inv > c_opp, rho > c_spur, rho > c_inv. Reported only.
  bool lemma_conditions_hold() const {
    return c_spur > c_opp && c_inv > c_opp && rho > c_spur && rho > c_inv;
  }
};

inline int group_id(int y, int a) { return 2 * a + y; }
inline int group_label(int g) { return g & 1; }
inline int group_attribute(int g) { return g >> 1; }

enum class Relation { kSame, kSpurious, kInvariant, kOpposite };

// Relation between two groups: kSpurious shares the attribute but not the
// class, kInvariant shares the class but not the attribute.
inline Relation relation(int g1, int g2) {
  const bool same_a = group_attribute(g1) == group_attribute(g2);
  const bool same_y = group_label(g1) == group_label(g2);
  if (same_a && same_y) return Relation::kSame;
  if (same_a) return Relation::kSpurious;
  if (same_y) return Relation::kInvariant;
  return Relation::kOpposite;
}

inline const char* to_string(Relation r) {
  switch (r) {
    case Relation::kSame: return "same";
    case Relation::kSpurious: return "spurious";
    case Relation::kInvariant: return "invariant";
    case Relation::kOpposite: return "opposite";
  }
  return "same";
}

inline double edge_weight(const ToyGraphSpec& s, int g1, int g2) {
  switch (relation(g1, g2)) {
    case Relation::kSame: return s.rho;
    case Relation::kSpurious: return s.c_spur;
    case Relation::kInvariant: return s.c_inv;
    case Relation::kOpposite: return s.c_opp;
  }
  return 0.0;
}

inline Matrix build_adjacency(const ToyGraphSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n;
  Matrix a(4 * n, 4 * n);
  for (std::size_t i = 0; i < 4 * n; ++i)
    for (std::size_t j = 0; j < 4 * n; ++j)
      a(i, j) = edge_weight(spec, static_cast<int>(i / n), static_cast<int>(j / n));
  return a;
}

inline std::vector<int> row_groups(const ToyGraphSpec& spec) {
  std::vector<int> g(4 * spec.n);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<int>(i / spec.n);
  return g;
}

inline std::vector<int> row_labels(const ToyGraphSpec& spec) {
  auto g = row_groups(spec);
  for (int& v : g) v = group_label(v);
  return g;
}

struct ToySpectrum {
  double lambda_sum = 0.0;
  double lambda_attr = 0.0;
  double lambda_class = 0.0;
  double lambda_residual = 0.0;
  std::size_t zero_multiplicity = 0;

  // Full multiset, descending.
  std::vector<double> all_values() const {
    std::vector<double> v{lambda_sum, lambda_attr, lambda_class, lambda_residual};
    v.insert(v.end(), zero_multiplicity, 0.0);
    std::sort(v.begin(), v.end(), std::greater<>());
    return v;
  }

  // lambda_sum > lambda_attr, lambda_class > lambda_residual >= 0.
  bool ordering_holds() const {
    return lambda_sum > lambda_attr && lambda_sum > lambda_class &&
           lambda_attr > lambda_residual && lambda_class > lambda_residual &&
           lambda_residual >= 0.0;
  }
};

inline ToySpectrum closed_form_spectrum(const ToyGraphSpec& spec) {
  spec.validate();
  const double n = static_cast<double>(spec.n);
  const double r = spec.rho, s = spec.c_spur, i = spec.c_inv, o = spec.c_opp;
  return ToySpectrum{n * (r + s + i + o), n * (r + s - i - o), n * (r + i - s - o),
                     n * (r - s - i + o), 4 * (spec.n - 1)};
}

struct FeatureMargins {
  double b_sp = 0.0;
  double b_inv = 0.0;
};

// Per-sample coordinate magnitudes along the attribute and class axes:
// sqrt(lambda_attr) and sqrt(lambda_class).
inline FeatureMargins feature_margins(const ToyGraphSpec& spec) {
  const ToySpectrum sp = closed_form_spectrum(spec);
  if (sp.lambda_attr < 0.0) {
    throw NumericError("feature_margins: negative eigenvalue lambda_attr = " +
                       std::to_string(sp.lambda_attr));
  }
  if (sp.lambda_class < 0.0) {
    throw NumericError("feature_margins: negative eigenvalue lambda_class = " +
                       std::to_string(sp.lambda_class));
  }
  return {std::sqrt(sp.lambda_attr), std::sqrt(sp.lambda_class)};
}

// The margin formulas as printed next to the lemma, with the main-text names
// (alpha = c_spur, beta = c_inv): B_sp = sqrt(beta - alpha - gamma + rho),
// B_inv = sqrt(alpha - beta - gamma + rho). NaN where the radicand is negative.
inline FeatureMargins printed_lemma_margins(const ToyGraphSpec& s) {
  auto root = [](double v) { return v >= 0.0 ? std::sqrt(v) : std::numeric_limits<double>::quiet_NaN(); };
  return {root(s.c_inv - s.c_spur - s.c_opp + s.rho), root(s.c_spur - s.c_inv - s.c_opp + s.rho)};
}

struct SpectralEmbedding {
  Matrix features;             // 4n × k, F = V_k sqrt(Λ_k)
  std::vector<double> values;  // top-k eigenvalues, descending
};

// Eigenvalues below this (relative to the largest magnitude) are clamped to 0
// before the square root; anything more negative is an error.
inline constexpr double kEigenClampTolerance = 1e-10;

// Rows of F use unit-norm eigenvectors, so a row's coordinate along an axis is
// ±sqrt(λ)/sqrt(4n) rather than the per-sample ±sqrt(λ).
inline SpectralEmbedding spectral_embedding(const ToyGraphSpec& spec, std::size_t k) {
  const std::size_t dim = 4 * spec.n;
  if (k < 1 || k > dim) {
    throw PreconditionError("spectral_embedding: k must lie in [1, " + std::to_string(dim) + "]");
  }
  const Matrix a = build_adjacency(spec);
  const SymEig eig = sym_eig(a);
  const double scale = std::max(1.0, std::abs(eig.values.front()));
  SpectralEmbedding out{Matrix(dim, k), std::vector<double>(k)};
  for (std::size_t c = 0; c < k; ++c) {
    double lam = eig.values[c];
    if (lam < 0.0) {
      if (lam < -kEigenClampTolerance * scale) {
        throw NumericError("spectral_embedding: top-" + std::to_string(k) + " eigenvalue #" +
                           std::to_string(c + 1) + " is negative (" + std::to_string(lam) + ")");
      }
      lam = 0.0;
    }
    out.values[c] = lam;
    const double root = std::sqrt(lam);
    for (std::size_t r = 0; r < dim; ++r) out.features(r, c) = eig.vectors(r, c) * root;
  }
  return out;
}

// Unit direction in embedding space along which the given ±1 row pattern
// varies: normalize(Fᵀ s). For a non-degenerate spectrum this is the
// eigen-axis carrying that pattern.
inline std::vector<double> pattern_axis(const Matrix& features, std::span<const int> plus_rows) {
  std::vector<double> axis(features.cols(), 0.0);
  for (std::size_t r = 0; r < features.rows(); ++r) {
    const double s = plus_rows[r] ? 1.0 : -1.0;
    for (std::size_t c = 0; c < features.cols(); ++c) axis[c] += s * features(r, c);
  }
  const double nrm = norm2(axis);
  if (nrm > 0.0)
    for (double& v : axis) v /= nrm;
  return axis;
}

// ---------------------------------------------------------------------------
// Hard-margin probe.

struct MaxMarginResult {
  std::vector<double> weight;
  double bias = 0.0;
  double margin = 0.0;                    // geometric margin of the training rows
  std::array<double, 4> group_accuracy{};  // NaN for groups without rows
  std::array<std::size_t, 4> group_count{};
  bool tie_warning = false;  // some evaluated row scored exactly on the boundary
  bool analytic = false;     // solved by the closest-pair route
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Euclidean projection onto the probability simplex (sort-based).
inline void project_simplex(std::vector<double>& v) {
  std::vector<double> u = v;
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0, theta = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    cumsum += u[i];
    const double t = (cumsum - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) theta = t;
  }
  for (double& x : v) x = std::max(0.0, x - theta);
}

inline std::vector<std::vector<double>> distinct_rows(const std::vector<std::vector<double>>& rows) {
  std::vector<std::vector<double>> out;
  for (const auto& r : rows) {
    const bool seen = std::any_of(out.begin(), out.end(), [&](const auto& o) { return sq_dist(o, r) < 1e-24; });
    if (!seen) out.push_back(r);
  }
  return out;
}

// Closest points of the two convex hulls by projected gradient on the pair of
// simplices (the hard-margin dual with bias). Returns (p*, n*).
inline std::pair<std::vector<double>, std::vector<double>> hull_closest_points(
    const std::vector<std::vector<double>>& pos, const std::vector<std::vector<double>>& neg,
    double tol) {
  const std::size_t d = pos.front().size();
  const std::size_t np = pos.size(), nn = neg.size();
  // Stacked Z = [P; -N]; objective ½|Zᵀγ|², γ = (α, β) with α, β on simplices.
  std::vector<std::vector<double>> z;
  for (const auto& p : pos) z.push_back(p);
  for (const auto& q : neg) {
    auto m = q;
    for (double& v : m) v = -v;
    z.push_back(m);
  }
  const std::size_t m = z.size();
  Matrix gram(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) gram(i, j) = dot(z[i], z[j]);
  // Lipschitz constant of the gradient: largest eigenvalue of the Gram matrix.
  double lip = std::max(sym_eig(gram).values.front(), 1e-300);

  std::vector<double> gam(m), prev(m), yk(m);
  for (std::size_t i = 0; i < np; ++i) gam[i] = 1.0 / static_cast<double>(np);
  for (std::size_t i = 0; i < nn; ++i) gam[np + i] = 1.0 / static_cast<double>(nn);
  yk = gam;
  double tk = 1.0;
  constexpr int kMaxIter = 200000;
  for (int it = 0; it < kMaxIter; ++it) {
    prev = gam;
    std::vector<double> g(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i] += gram(i, j) * yk[j];
    std::vector<double> a(yk.begin(), yk.begin() + static_cast<std::ptrdiff_t>(np));
    std::vector<double> b(yk.begin() + static_cast<std::ptrdiff_t>(np), yk.end());
    for (std::size_t i = 0; i < np; ++i) a[i] -= g[i] / lip;
    for (std::size_t i = 0; i < nn; ++i) b[i] -= g[np + i] / lip;
    project_simplex(a);
    project_simplex(b);
    std::copy(a.begin(), a.end(), gam.begin());
    std::copy(b.begin(), b.end(), gam.begin() + static_cast<std::ptrdiff_t>(np));
    const double tn = (1.0 + std::sqrt(1.0 + 4.0 * tk * tk)) / 2.0;
    double change = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      yk[i] = gam[i] + ((tk - 1.0) / tn) * (gam[i] - prev[i]);
      change = std::max(change, std::abs(gam[i] - prev[i]));
    }
    tk = tn;
    if (change < tol && it > 10) break;
  }
  std::vector<double> p(d, 0.0), q(d, 0.0);
  for (std::size_t i = 0; i < np; ++i)
    for (std::size_t c = 0; c < d; ++c) p[c] += gam[i] * pos[i][c];
  for (std::size_t i = 0; i < nn; ++i)
    for (std::size_t c = 0; c < d; ++c) q[c] += gam[np + i] * neg[i][c];
  return {p, q};
}

}  // namespace detail

struct SeparatorOptions {
  double dual_tolerance = 1e-8;
  bool allow_analytic = true;
};

// Hard-margin linear separator (weight, bias) of labelled points.
// Returns {weight, bias, used_analytic_route}.
inline std::tuple<std::vector<double>, double, bool> hard_margin_separator(
    const std::vector<std::vector<double>>& rows, std::span<const int> labels,
    SeparatorOptions opt = {}) {
  std::vector<std::vector<double>> pos, neg;
  for (std::size_t i = 0; i < rows.size(); ++i) (labels[i] ? pos : neg).push_back(rows[i]);
  if (pos.empty() || neg.empty()) {
    throw PreconditionError("max_margin_probe: training rows must contain both labels");
  }
  pos = detail::distinct_rows(pos);
  neg = detail::distinct_rows(neg);
  const double scale = [&] {
    double s = 0.0;
    for (const auto& r : rows) s = std::max(s, norm2(r));
    return std::max(s, 1e-300);
  }();

  auto make = [](const std::vector<double>& p, const std::vector<double>& q) {
    std::vector<double> w(p.size());
    double b = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c) {
      w[c] = p[c] - q[c];
      b -= w[c] * (p[c] + q[c]) / 2.0;
    }
    return std::pair{w, b};
  };
  auto separates = [&](const std::vector<double>& w, double b, double slack) {
    for (const auto& p : pos)
      if (dot(w, p) + b < -slack) return false;
    for (const auto& q : neg)
      if (dot(w, q) + b > slack) return false;
    return true;
  };

  if (opt.allow_analytic) {
    std::size_t bi = 0, bj = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pos.size(); ++i)
      for (std::size_t j = 0; j < neg.size(); ++j)
        if (const double d2 = detail::sq_dist(pos[i], neg[j]); d2 < best) {
          best = d2;
          bi = i;
          bj = j;
        }
    auto [w, b] = make(pos[bi], neg[bj]);
    // The bisector of the closest opposite pair has the largest possible
    // margin; it is the answer whenever it separates everything.
    const double hm = best / 2.0;  // = |w| * (|w|/2): scores of the pair are ±|w|²/2
    if (best > 1e-24 && separates(w, b, -hm * (1.0 - 1e-9))) return {w, b, true};
  }

  auto [p, q] = detail::hull_closest_points(pos, neg, opt.dual_tolerance);
  auto [w, b] = make(p, q);
  const double wn = norm2(w);
  if (wn < 1e-9 * scale || !separates(w, b, 1e-9 * scale * wn)) {
    throw NumericError("max_margin_probe: training rows are not linearly separable");
  }
  return {w, b, false};
}

// Hard-margin probe trained on the rows whose group is in `train_groups`,
// evaluated on every row. A row scoring within 1e-9·|w|·scale of the boundary
// counts as label 0 and sets tie_warning.
inline MaxMarginResult max_margin_probe(const Matrix& embedding, std::span<const int> labels,
                                        std::span<const int> groups,
                                        const std::set<int>& train_groups) {
  if (labels.size() != embedding.rows() || groups.size() != embedding.rows()) {
    throw PreconditionError("max_margin_probe: labels/groups not aligned with embedding rows");
  }
  std::vector<std::vector<double>> rows;
  std::vector<int> ys;
  double scale = 0.0;
  for (std::size_t r = 0; r < embedding.rows(); ++r) {
    scale = std::max(scale, norm2(embedding.row(r)));
    if (train_groups.count(groups[r])) {
      rows.emplace_back(embedding.row(r).begin(), embedding.row(r).end());
      ys.push_back(labels[r]);
    }
  }
  auto [w, b, analytic] = hard_margin_separator(rows, ys);

  MaxMarginResult out;
  out.weight = w;
  out.bias = b;
  out.analytic = analytic;
  const double wn = norm2(w);
  out.margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.margin = std::min(out.margin, (ys[i] ? 1.0 : -1.0) * (dot(w, rows[i]) + b) / wn);
  }
  std::array<std::size_t, 4> correct{};
  const double tie_band = 1e-9 * wn * std::max(scale, 1e-300);
  for (std::size_t r = 0; r < embedding.rows(); ++r) {
    const double s = dot(w, embedding.row(r)) + b;
    int pred = s > 0.0 ? 1 : 0;
    if (std::abs(s) <= tie_band) {
      pred = 0;
      out.tie_warning = true;
    }
    const int g = groups[r];
    out.group_count[static_cast<std::size_t>(g)]++;
    if (pred == labels[r]) correct[static_cast<std::size_t>(g)]++;
  }
  for (std::size_t g = 0; g < 4; ++g) {
    out.group_accuracy[g] = out.group_count[g]
                                ? static_cast<double>(correct[g]) / static_cast<double>(out.group_count[g])
                                : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

// Majority groups (a = y) in the g = 2a + y layout.
inline std::set<int> majority_groups() { return {group_id(0, 0), group_id(1, 1)}; }
inline std::set<int> minority_groups() { return {group_id(1, 0), group_id(0, 1)}; }

// ---------------------------------------------------------------------------
// Graph expansion and subgroup connectivity.

namespace detail {
inline void check_sets(const Matrix& adj, std::span<const std::size_t> s1,
                       std::span<const std::size_t> s2, const char* op) {
  if (adj.rows() != adj.cols()) throw PreconditionError(std::string(op) + ": adjacency not square");
  if (s1.empty() || s2.empty()) throw PreconditionError(std::string(op) + ": empty index set");
  std::set<std::size_t> a(s1.begin(), s1.end());
  for (std::size_t i : s1)
    if (i >= adj.rows()) throw PreconditionError(std::string(op) + ": index out of range");
  for (std::size_t j : s2) {
    if (j >= adj.rows()) throw PreconditionError(std::string(op) + ": index out of range");
    if (a.count(j)) throw PreconditionError(std::string(op) + ": index sets overlap at " + std::to_string(j));
  }
}
}  // namespace detail

// φ(S1, S2) = Σ_{x∈S1, x'∈S2} w_xx' / Σ_{x∈S1} w_x, w_x the row sum.
inline double compute_expansion(const Matrix& adjacency, std::span<const std::size_t> s1,
                                std::span<const std::size_t> s2) {
  detail::check_sets(adjacency, s1, s2, "compute_expansion");
  double cross = 0.0, vol = 0.0;
  for (std::size_t x : s1) {
    for (std::size_t xp : s2) cross += adjacency(x, xp);
    for (double v : adjacency.row(x)) vol += v;
  }
  if (vol <= 0.0) throw NumericError("compute_expansion: S1 has zero volume");
  return cross / vol;
}

// Average edge weight between two disjoint vertex sets.
inline double average_connectivity(const Matrix& adjacency, std::span<const std::size_t> s1,
                                   std::span<const std::size_t> s2) {
  detail::check_sets(adjacency, s1, s2, "average_connectivity");
  double s = 0.0;
  for (std::size_t x : s1)
    for (std::size_t xp : s2) s += adjacency(x, xp);
  return s / static_cast<double>(s1.size() * s2.size());
}

inline std::vector<std::size_t> group_rows(const ToyGraphSpec& spec, int g) {
  std::vector<std::size_t> r(spec.n);
  std::iota(r.begin(), r.end(), static_cast<std::size_t>(g) * spec.n);
  return r;
}

}  // namespace spurlab::toygraph
