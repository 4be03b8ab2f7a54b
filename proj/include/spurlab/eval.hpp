#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "spurlab/encoder.hpp"
#include "spurlab/latetvg.hpp"
#include "spurlab/numkit/error.hpp"
#include "spurlab/numkit/matrix.hpp"
#include "spurlab/numkit/rng.hpp"
#include "spurlab/synthgen.hpp"
#include "spurlab/toygraph.hpp"

// Downstream evaluation: frozen representations, logistic probes, group
// metrics, downstream set construction and the connectivity estimator.
namespace spurlab::eval {

inline Matrix extract_representations(const encoder::LayeredParams& enc, const Matrix& x) {
  if (enc.layers.empty()) return x;
  return encoder::forward(enc, x);
}

inline Matrix extract_representations(const encoder::LayeredParams& enc, const synthgen::GroupedDataset& ds) {
  return extract_representations(enc, ds.x);
}

// Per-column affine map to zero mean and unit variance, fitted on one matrix
// and applied to others. Constant columns are centred only.
struct Standardizer {
  std::vector<double> mean, scale;

  static Standardizer fit(const Matrix& x) {
    Standardizer s{std::vector<double>(x.cols(), 0.0), std::vector<double>(x.cols(), 1.0)};
    const double n = static_cast<double>(x.rows());
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double m = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) m += x(r, c);
      m /= n;
      double v = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) v += (x(r, c) - m) * (x(r, c) - m);
      const double sd = std::sqrt(v / n);
      s.mean[c] = m;
      s.scale[c] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
  }

  Matrix apply(const Matrix& x) const {
    if (x.cols() != mean.size()) throw PreconditionError("Standardizer: column count mismatch");
    Matrix out = x;
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = (out(r, c) - mean[c]) / scale[c];
    return out;
  }
};

// ---------------------------------------------------------------------------
// Logistic probe.

enum class Regularization { kNone, kL1, kL2 };

inline std::string_view to_string(Regularization r) {
  switch (r) {
    case Regularization::kNone: return "none";
    case Regularization::kL1: return "l1";
    case Regularization::kL2: return "l2";
  }
  return "?";
}

inline Regularization parse_regularization(std::string_view s) {
  if (s == "none") return Regularization::kNone;
  if (s == "l1") return Regularization::kL1;
  if (s == "l2") return Regularization::kL2;
  throw PreconditionError("unknown regularization '" + std::string(s) + "'");
}

struct ProbeOptions {
  double tolerance = 1e-7;
  std::size_t max_iterations = 200;
};

struct LinearProbe {
  std::vector<double> weight;
  double bias = 0.0;
  Regularization reg = Regularization::kNone;
  double strength = 0.0;
  double residual = 0.0;  // gradient norm, or max coordinate-wise L1 optimality violation
  std::size_t iterations = 0;
  bool converged = false;

  double score(std::span<const double> x) const {
    double s = bias;
    for (std::size_t k = 0; k < weight.size(); ++k) s += weight[k] * x[k];
    return s;
  }
  // p = σ(score) >= 0.5
  int predict(std::span<const double> x) const { return score(x) >= 0.0 ? 1 : 0; }
};

// log(1 + e^{-m}) without overflow.
inline double softplus_neg(double m) { return std::max(-m, 0.0) + std::log1p(std::exp(-std::abs(m))); }
inline double sigmoid(double s) {
  if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

// Mean logistic loss + strength · penalty; bias unpenalized.
inline double probe_objective(const Matrix& x, std::span<const int> y, std::span<const double> w, double b,
                              Regularization reg, double strength) {
  double loss = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = b;
    const auto row = x.row(i);
    for (std::size_t k = 0; k < w.size(); ++k) s += w[k] * row[k];
    loss += softplus_neg(y[i] ? s : -s);
  }
  loss /= static_cast<double>(x.rows());
  double pen = 0.0;
  if (reg == Regularization::kL1) {
    for (double v : w) pen += std::abs(v);
  } else if (reg == Regularization::kL2) {
    for (double v : w) pen += 0.5 * v * v;
  }
  return loss + strength * pen;
}

namespace detail {

struct LogisticModel {
  const Matrix& x;
  std::span<const int> y;
  std::size_t n, d;

  // Gradient and Hessian of the mean logistic loss over θ = (w, b).
  void derivatives(const Eigen::VectorXd& theta, Eigen::VectorXd& g, Eigen::MatrixXd& h) const {
    g.setZero(static_cast<Eigen::Index>(d + 1));
    h.setZero(static_cast<Eigen::Index>(d + 1), static_cast<Eigen::Index>(d + 1));
    Eigen::VectorXd xi(static_cast<Eigen::Index>(d + 1));
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = x.row(i);
      for (std::size_t k = 0; k < d; ++k) xi[static_cast<Eigen::Index>(k)] = row[k];
      xi[static_cast<Eigen::Index>(d)] = 1.0;
      const double p = sigmoid(theta.dot(xi));
      g.noalias() += (p - y[i]) * xi;
      h.selfadjointView<Eigen::Lower>().rankUpdate(xi, p * (1.0 - p));
    }
    g /= static_cast<double>(n);
    h = h.selfadjointView<Eigen::Lower>();
    h /= static_cast<double>(n);
  }

  double objective(const Eigen::VectorXd& theta, Regularization reg, double strength) const {
    const std::span<const double> w(theta.data(), d);
    return probe_objective(x, y, w, theta[static_cast<Eigen::Index>(d)], reg, strength);
  }
};

// Max over coordinates of the L1 subgradient optimality violation.
inline double l1_residual(const Eigen::VectorXd& theta, const Eigen::VectorXd& g, double lambda, std::size_t d) {
  double r = std::abs(g[static_cast<Eigen::Index>(d)]);
  for (std::size_t k = 0; k < d; ++k) {
    const auto j = static_cast<Eigen::Index>(k);
    const double v = theta[j] != 0.0 ? std::abs(g[j] + lambda * (theta[j] > 0.0 ? 1.0 : -1.0))
                                     : std::max(std::abs(g[j]) - lambda, 0.0);
    r = std::max(r, v);
  }
  return r;
}

inline double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

}  // namespace detail

// Full-batch deterministic solver. none/l2: damped Newton with Armijo
// backtracking until ‖∇‖₂ <= tolerance. l1: proximal Newton whose quadratic
// subproblems are solved by cyclic coordinate descent, until the coordinate-wise
// optimality violation <= tolerance. Starts at w = 0, b = logit(ȳ). On
// separable data with reg = none the iterate diverges and the result is
// returned unconverged after max_iterations.
inline LinearProbe fit_probe(const Matrix& x, std::span<const int> y, Regularization reg, double strength,
                             const ProbeOptions& opt = {}) {
  if (x.rows() != y.size()) throw PreconditionError("fit_probe: rows and labels differ in length");
  if (!(strength >= 0.0)) throw PreconditionError("fit_probe: strength must be >= 0");
  std::size_t positives = 0;
  for (int v : y) {
    if (v != 0 && v != 1) throw PreconditionError("fit_probe: labels must be 0 or 1");
    positives += static_cast<std::size_t>(v);
  }
  if (positives == 0 || positives == y.size()) throw PreconditionError("fit_probe: need two classes present");
  if (!all_finite(x)) throw NumericError("fit_probe: non-finite representation");

  const std::size_t n = x.rows(), d = x.cols();
  const auto D = static_cast<Eigen::Index>(d);
  const double lambda = reg == Regularization::kNone ? 0.0 : strength;
  const detail::LogisticModel model{x, y, n, d};
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(D + 1);
  const double ybar = static_cast<double>(positives) / static_cast<double>(n);
  theta[D] = std::log(ybar / (1.0 - ybar));

  LinearProbe out;
  out.reg = reg;
  out.strength = strength;
  Eigen::VectorXd g;
  Eigen::MatrixXd h;
  double f = model.objective(theta, reg, lambda);

  for (std::size_t it = 0;; ++it) {
    model.derivatives(theta, g, h);
    if (reg == Regularization::kL2) {
      g.head(D) += lambda * theta.head(D);
      h.topLeftCorner(D, D).diagonal().array() += lambda;
    }
    out.residual = reg == Regularization::kL1 ? detail::l1_residual(theta, g, lambda, d) : g.norm();
    out.iterations = it;
    if (out.residual <= opt.tolerance) {
      out.converged = true;
      break;
    }
    if (it == opt.max_iterations) break;

    // Regularize the curvature slightly so separable unregularized fits stay solvable.
    h.diagonal().array() += 1e-10;
    Eigen::VectorXd step;
    if (reg != Regularization::kL1) {
      step = -h.ldlt().solve(g);
    } else {
      // min_δ gᵀδ + ½ δᵀHδ + λ‖w + δ_w‖₁ by coordinate descent on z = θ + δ.
      Eigen::VectorXd z = theta;
      Eigen::VectorXd hd = Eigen::VectorXd::Zero(D + 1);  // H (z - θ)
      for (int sweep = 0; sweep < 200; ++sweep) {
        double change = 0.0;
        for (Eigen::Index j = 0; j <= D; ++j) {
          const double hjj = h(j, j);
          const double grad_j = g[j] + hd[j];
          const double old = z[j];
          const double raw = old - grad_j / hjj;
          const double upd = j == D ? raw : detail::soft_threshold(raw, lambda / hjj);
          if (upd != old) {
            hd += (upd - old) * h.col(j);
            z[j] = upd;
            change = std::max(change, std::abs(upd - old));
          }
        }
        if (change <= 1e-14 * (1.0 + z.cwiseAbs().maxCoeff())) break;
      }
      step = z - theta;
    }

    // Armijo backtracking on the composite objective.
    double decrease = g.dot(step);
    if (reg == Regularization::kL1) {
      decrease += lambda * ((theta.head(D) + step.head(D)).lpNorm<1>() - theta.head(D).lpNorm<1>());
    }
    double t = 1.0;
    Eigen::VectorXd trial;
    double ft = f;
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt, t *= 0.5) {
      trial = theta + t * step;
      ft = model.objective(trial, reg, lambda);
      if (ft <= f + 1e-4 * t * std::min(decrease, 0.0)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    if (ft == f && trial == theta) break;
    theta = std::move(trial);
    f = ft;
  }

  out.weight.assign(theta.data(), theta.data() + d);
  out.bias = theta[D];
  if (!std::isfinite(out.bias) || !std::all_of(out.weight.begin(), out.weight.end(),
                                               [](double v) { return std::isfinite(v); })) {
    throw NumericError("fit_probe: solver produced non-finite parameters");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Group metrics.

struct GroupReport {
  std::array<double, 4> per_group_accuracy{};  // NaN for empty groups
  std::array<std::size_t, 4> counts{};
  double worst_group = 0.0;
  double average = 0.0;
};

// Builds a report from per-group correct/total counts.
inline GroupReport make_report(const std::array<std::size_t, 4>& correct, const std::array<std::size_t, 4>& total) {
  GroupReport r;
  r.counts = total;
  std::size_t all_correct = 0, all = 0;
  r.worst_group = std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < 4; ++g) {
    if (total[g] == 0) {
      r.per_group_accuracy[g] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    r.per_group_accuracy[g] = static_cast<double>(correct[g]) / static_cast<double>(total[g]);
    r.worst_group = std::min(r.worst_group, r.per_group_accuracy[g]);
    all_correct += correct[g];
    all += total[g];
  }
  if (all == 0) throw PreconditionError("group_metrics: no samples");
  r.average = static_cast<double>(all_correct) / static_cast<double>(all);
  return r;
}

inline GroupReport group_metrics(const LinearProbe& model, const Matrix& reps, std::span<const int> labels,
                                 std::span<const int> groups) {
  if (reps.rows() != labels.size() || groups.size() != labels.size()) {
    throw PreconditionError("group_metrics: rows, labels and groups must align");
  }
  if (reps.cols() != model.weight.size()) throw PreconditionError("group_metrics: feature dim mismatch");
  std::array<std::size_t, 4> correct{}, total{};
  for (std::size_t i = 0; i < reps.rows(); ++i) {
    const int g = groups[i];
    if (g < 0 || g > 3) throw PreconditionError("group_metrics: group id out of range");
    ++total[g];
    correct[g] += model.predict(reps.row(i)) == labels[i];
  }
  return make_report(correct, total);
}

// ---------------------------------------------------------------------------
// Downstream sets.

inline constexpr std::uint64_t kDownstreamStream = 0x444f574e;

// Downsample to equal group counts, then draw `total` rows with replacement:
// a minority group (uniform over the two) with probability λ, otherwise a
// majority group (uniform over the two), then a uniform row of that group.
inline synthgen::GroupedDataset build_downstream_set(const synthgen::GroupedDataset& ds, double minority_weight,
                                                     std::size_t total, std::uint64_t seed) {
  if (!(minority_weight >= 0.0 && minority_weight <= 1.0)) {
    throw PreconditionError("build_downstream_set: minority_weight must lie in [0, 1]");
  }
  RngStream root(seed, kDownstreamStream);
  const synthgen::GroupedDataset base =
      latetvg::resample(ds, latetvg::Strategy::kDownsample, std::nullopt, root.fork(0).next_u64());
  std::array<std::vector<std::size_t>, 4> rows;
  for (int g = 0; g < 4; ++g) rows[g] = base.rows_in_group(g);
  RngStream rng = root.fork(1);
  constexpr std::array<int, 2> kMinority{1, 2};
  constexpr std::array<int, 2> kMajority{0, 3};
  std::vector<std::size_t> picked;
  picked.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    const bool minority = rng.bernoulli(minority_weight);
    const int g = (minority ? kMinority : kMajority)[rng.uniform_index(2)];
    picked.push_back(rows[g][rng.uniform_index(rows[g].size())]);
  }
  return base.subset(picked);
}

// ---------------------------------------------------------------------------
// Worst-group model selection over a probe grid.

struct ProbeGridPoint {
  Regularization reg = Regularization::kL2;
  double strength = 0.0;
};

struct ProbeEvaluation {
  ProbeGridPoint point;
  LinearProbe probe;
  GroupReport validation;
  GroupReport test;
};

struct ProbeSelection {
  std::vector<ProbeEvaluation> grid;
  std::size_t selected = 0;  // index into grid
};

inline constexpr std::uint64_t kSelectionStream = 0x53454c;
inline constexpr double kValidationFraction = 0.2;

// Stratified split: round(0.2 · count) rows of each group go to validation.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> validation_split(
    std::span<const int> groups, std::uint64_t seed) {
  RngStream root(seed, kSelectionStream);
  std::vector<std::size_t> train, val;
  for (int g = 0; g < 4; ++g) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < groups.size(); ++i)
      if (groups[i] == g) rows.push_back(i);
    RngStream rng = root.fork(static_cast<std::uint64_t>(g));
    rng.shuffle(std::span<std::size_t>(rows));
    const auto nv = static_cast<std::size_t>(std::llround(kValidationFraction * static_cast<double>(rows.size())));
    val.insert(val.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(nv));
    train.insert(train.end(), rows.begin() + static_cast<std::ptrdiff_t>(nv), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

inline Matrix take_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <typename T>
std::vector<T> take(std::span<const T> v, std::span<const std::size_t> rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(v[r]);
  return out;
}

// Fits every grid point on the 80% split, scores worst-group accuracy on the
// 20% split, and selects the maximum (first in grid order on ties). Features
// are standardized with statistics of the fitting split. Every grid model is
// also scored on the test set.
inline ProbeSelection select_probe(const Matrix& train_reps, std::span<const int> train_y,
                                   std::span<const int> train_g, const Matrix& test_reps,
                                   std::span<const int> test_y, std::span<const int> test_g,
                                   std::span<const ProbeGridPoint> grid, std::uint64_t seed) {
  if (grid.empty()) throw PreconditionError("select_probe: empty probe grid");
  const auto [fit_rows, val_rows] = validation_split(train_g, seed);
  if (val_rows.empty()) throw PreconditionError("select_probe: validation split is empty");
  const Matrix fit_raw = take_rows(train_reps, fit_rows);
  const Standardizer st = Standardizer::fit(fit_raw);
  const Matrix fit_x = st.apply(fit_raw);
  const Matrix val_x = st.apply(take_rows(train_reps, val_rows));
  const Matrix test_x = st.apply(test_reps);
  const auto fit_y = take(train_y, fit_rows);
  const auto val_y = take(train_y, val_rows);
  const auto val_g = take(train_g, val_rows);

  ProbeSelection sel;
  double best = -1.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    ProbeEvaluation ev;
    ev.point = grid[i];
    ev.probe = fit_probe(fit_x, fit_y, grid[i].reg, grid[i].strength);
    ev.validation = group_metrics(ev.probe, val_x, val_y, val_g);
    ev.test = group_metrics(ev.probe, test_x, test_y, test_g);
    if (ev.validation.worst_group > best) {
      best = ev.validation.worst_group;
      sel.selected = i;
    }
    sel.grid.push_back(std::move(ev));
  }
  return sel;
}

inline std::vector<ProbeGridPoint> default_probe_grid() {
  return {{Regularization::kNone, 0.0}, {Regularization::kL2, 1e-3}, {Regularization::kL2, 1e-2},
          {Regularization::kL2, 1e-1},  {Regularization::kL1, 1e-3}, {Regularization::kL1, 1e-2}};
}

// ---------------------------------------------------------------------------
// Connectivity.

inline constexpr std::array<std::pair<int, int>, 6> kGroupPairs{
    {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

struct ConnectivityReport {
  std::array<double, 6> pairwise{};  // indexed like kGroupPairs
  double c_spur_avg = 0.0;
  double c_inv_avg = 0.0;
  double c_opp_avg = 0.0;
  bool spur_ge_inv = false;
  bool inv_ge_opp = false;

  double pair(int g1, int g2) const {
    if (g1 > g2) std::swap(g1, g2);
    for (std::size_t k = 0; k < kGroupPairs.size(); ++k)
      if (kGroupPairs[k] == std::pair{g1, g2}) return pairwise[k];
    throw PreconditionError("ConnectivityReport: no pair (" + std::to_string(g1) + "," + std::to_string(g2) + ")");
  }
};

inline constexpr std::uint64_t kConnectivityStream = 0x434f4e4e;
inline constexpr double kConnectivityTrainFraction = 0.75;
inline constexpr double kConnectivityProbeStrength = 1e-4;
inline constexpr std::size_t kConnectivityMinSamples = 20;

inline std::string pair_name(std::size_t k) {
  return std::to_string(kGroupPairs[k].first) + "-" + std::to_string(kGroupPairs[k].second);
}

inline toygraph::Relation pair_relation(std::size_t k) {
  return toygraph::relation(kGroupPairs[k].first, kGroupPairs[k].second);
}

// For each unordered group pair, an L2 probe (strength 1e-4, standardized
// features) is fitted on the clean features of the 75% split of both groups
// and applied to the augmented features of the held-out 25% whose
// pre-augmentation group is in the pair. A held-out row counts as an error
// when the probe assigns it to the other group of the pair; rows that
// augmentation moved outside the pair add to the denominator only.
// Rows of `augmented` pair with rows of `clean`.
inline ConnectivityReport estimate_connectivity(const Matrix& clean, std::span<const int> y,
                                                std::span<const int> a, const Matrix& augmented,
                                                std::span<const int> y_aug, std::span<const int> a_aug,
                                                std::uint64_t seed) {
  const std::size_t n = clean.rows();
  if (augmented.rows() != n || augmented.cols() != clean.cols() || y.size() != n || a.size() != n ||
      y_aug.size() != n || a_aug.size() != n) {
    throw PreconditionError("estimate_connectivity: clean and augmented inputs must align");
  }
  RngStream root(seed, kConnectivityStream);
  std::array<std::vector<std::size_t>, 4> fit_rows, held_rows;
  for (int g = 0; g < 4; ++g) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i)
      if (synthgen::group_of(y[i], a[i]) == g) rows.push_back(i);
    RngStream rng = root.fork(static_cast<std::uint64_t>(g));
    rng.shuffle(std::span<std::size_t>(rows));
    const auto nf = static_cast<std::size_t>(
        std::llround(kConnectivityTrainFraction * static_cast<double>(rows.size())));
    fit_rows[g].assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(nf));
    held_rows[g].assign(rows.begin() + static_cast<std::ptrdiff_t>(nf), rows.end());
    std::sort(fit_rows[g].begin(), fit_rows[g].end());
    std::sort(held_rows[g].begin(), held_rows[g].end());
  }

  ConnectivityReport rep;
  for (std::size_t k = 0; k < kGroupPairs.size(); ++k) {
    const auto [g1, g2] = kGroupPairs[k];
    for (int g : {g1, g2}) {
      if (fit_rows[g].size() < kConnectivityMinSamples || held_rows[g].size() < kConnectivityMinSamples) {
        throw PreconditionError("estimate_connectivity: pair " + pair_name(k) + " needs >= 20 clean and >= 20 "
                                "augmented samples in group " + std::to_string(g));
      }
    }
    std::vector<std::size_t> rows = fit_rows[g1];
    rows.insert(rows.end(), fit_rows[g2].begin(), fit_rows[g2].end());
    std::vector<int> target;
    for (std::size_t r : rows) target.push_back(synthgen::group_of(y[r], a[r]) == g2 ? 1 : 0);
    const Matrix raw = take_rows(clean, rows);
    const Standardizer st = Standardizer::fit(raw);
    const LinearProbe probe = fit_probe(st.apply(raw), target, Regularization::kL2, kConnectivityProbeStrength);

    std::size_t misassigned = 0, held = 0;
    for (int g : {g1, g2}) {
      const int other = g == g1 ? g2 : g1;
      const Matrix hx = st.apply(take_rows(augmented, held_rows[g]));
      for (std::size_t i = 0; i < held_rows[g].size(); ++i) {
        const std::size_t r = held_rows[g][i];
        ++held;
        const int moved_to = synthgen::group_of(y_aug[r], a_aug[r]);
        if (moved_to != g && moved_to != other) continue;
        const int assigned = probe.predict(hx.row(i)) == 1 ? g2 : g1;
        misassigned += assigned == other;
      }
    }
    rep.pairwise[k] = static_cast<double>(misassigned) / static_cast<double>(held);
  }

  std::array<double, 3> sum{};
  std::array<int, 3> cnt{};
  for (std::size_t k = 0; k < kGroupPairs.size(); ++k) {
    const int slot = pair_relation(k) == toygraph::Relation::kSpurious    ? 0
                     : pair_relation(k) == toygraph::Relation::kInvariant ? 1
                                                                          : 2;
    sum[slot] += rep.pairwise[k];
    ++cnt[slot];
  }
  rep.c_spur_avg = sum[0] / cnt[0];
  rep.c_inv_avg = sum[1] / cnt[1];
  rep.c_opp_avg = sum[2] / cnt[2];
  rep.spur_ge_inv = rep.c_spur_avg >= rep.c_inv_avg;
  rep.inv_ge_opp = rep.c_inv_avg >= rep.c_opp_avg;
  return rep;
}

// Input-space estimate: augments every row once with a stream forked from `seed`.
inline ConnectivityReport input_connectivity(const synthgen::GroupedDataset& ds, const synthgen::LatentModel& latent,
                                             const synthgen::AugmentationSpec& aug, std::uint64_t seed) {
  RngStream rng = RngStream(seed, kConnectivityStream).fork(100);
  const synthgen::GroupedDataset augd = synthgen::augment_dataset(ds, latent, aug, rng);
  return estimate_connectivity(ds.x, ds.y, ds.a, augd.x, augd.y, augd.a, seed);
}

// Same protocol on frozen representations of the clean and augmented inputs.
inline ConnectivityReport representation_connectivity(const encoder::LayeredParams& enc,
                                                      const synthgen::GroupedDataset& ds,
                                                      const synthgen::LatentModel& latent,
                                                      const synthgen::AugmentationSpec& aug, std::uint64_t seed) {
  RngStream rng = RngStream(seed, kConnectivityStream).fork(100);
  const synthgen::GroupedDataset augd = synthgen::augment_dataset(ds, latent, aug, rng);
  return estimate_connectivity(extract_representations(enc, ds.x), ds.y, ds.a,
                               extract_representations(enc, augd.x), augd.y, augd.a, seed);
}

}  // namespace spurlab::eval
