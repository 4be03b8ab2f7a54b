#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "spurlab/encoder.hpp"
#include "spurlab/numkit/autodiff.hpp"
#include "spurlab/numkit/error.hpp"
#include "spurlab/numkit/matrix.hpp"
#include "spurlab/numkit/rng.hpp"
#include "spurlab/synthgen.hpp"

// Late-layer view generation: magnitude masks over deep encoder layers, the
// two-stage training loop, and group resampling strategies.
namespace spurlab::latetvg {

enum class PruneScope { kGlobal, kPerLayer };

// Which weights compete in the magnitude ranking. kAll ranks over every
// encoder weight but only zeroes coordinates in prunable layers.
enum class RankPool { kPrunable, kAll };

// kShared: the view branch is W ⊙ M over the live parameters.
// kDetach: the whole view encoder enters the graph as constants.
enum class ViewGradient { kShared, kDetach };

inline std::string_view to_string(PruneScope s) { return s == PruneScope::kGlobal ? "global" : "per-layer"; }
inline std::string_view to_string(RankPool p) { return p == RankPool::kPrunable ? "prunable" : "all"; }
inline std::string_view to_string(ViewGradient v) { return v == ViewGradient::kShared ? "shared" : "detach"; }

struct PruneSpec {
  std::size_t layer_threshold = 2;  // layers with index >= this are prunable
  double prune_rate = 0.0;          // fraction of prunable weights zeroed
  PruneScope scope = PruneScope::kGlobal;
  std::size_t refresh_period = 1;
  RankPool pool = RankPool::kPrunable;
  ViewGradient view_gradient = ViewGradient::kShared;

  double keep_fraction() const { return 1.0 - prune_rate; }

  void validate(std::size_t depth) const {
    if (layer_threshold >= depth) {
      throw PreconditionError("PruneSpec: layer_threshold " + std::to_string(layer_threshold) +
                              " must be below the encoder depth " + std::to_string(depth));
    }
    if (!(prune_rate >= 0.0 && prune_rate < 1.0)) {
      throw PreconditionError("PruneSpec: prune_rate must lie in [0, 1)");
    }
    if (refresh_period == 0) throw PreconditionError("PruneSpec: refresh_period must be >= 1");
  }
};

// floor(rate · count), robust to products like 0.7 · 10 = 6.999….
inline std::size_t prune_count(double rate, std::size_t count) {
  const double exact = rate * static_cast<double>(count);
  return static_cast<std::size_t>(std::floor(exact + 1e-9 * std::max(1.0, exact)));
}

struct PruneMask {
  std::vector<Matrix> layers;  // one 0/1 matrix per encoder weight
  std::size_t layer_threshold = 0;

  static PruneMask ones(const encoder::LayeredParams& p, std::size_t threshold) {
    PruneMask m;
    m.layer_threshold = threshold;
    for (const auto& l : p.layers) m.layers.emplace_back(l.weight.rows(), l.weight.cols(), 1.0);
    return m;
  }

  std::size_t prunable_count() const {
    std::size_t n = 0;
    for (std::size_t l = layer_threshold; l < layers.size(); ++l) n += layers[l].size();
    return n;
  }

  std::size_t zero_count() const {
    std::size_t n = 0;
    for (const auto& m : layers)
      for (double v : m.data()) n += v == 0.0;
    return n;
  }

  bool layer_is_identity(std::size_t l) const {
    const auto d = layers.at(l).data();
    return std::all_of(d.begin(), d.end(), [](double v) { return v == 1.0; });
  }

  friend bool operator==(const PruneMask&, const PruneMask&) = default;
};

// Fraction of prunable coordinates on which two masks agree.
inline double mask_overlap(const PruneMask& a, const PruneMask& b) {
  if (a.layers.size() != b.layers.size() || a.layer_threshold != b.layer_threshold) {
    throw PreconditionError("mask_overlap: masks cover different layer sets");
  }
  std::size_t same = 0, total = 0;
  for (std::size_t l = a.layer_threshold; l < a.layers.size(); ++l) {
    if (!a.layers[l].same_shape(b.layers[l])) throw PreconditionError("mask_overlap: shape mismatch");
    const auto da = a.layers[l].data();
    const auto db = b.layers[l].data();
    for (std::size_t k = 0; k < da.size(); ++k) same += da[k] == db[k];
    total += da.size();
  }
  return total == 0 ? 1.0 : static_cast<double>(same) / static_cast<double>(total);
}

namespace detail {

struct Coord {
  double magnitude;
  std::size_t layer, row, col;
};

// Zeroes the `k` smallest-magnitude entries among `coords`; among equal
// magnitudes the later (layer, row, col) goes first.
inline void prune_smallest(std::vector<Coord>& coords, std::size_t k, PruneMask& mask,
                           std::size_t threshold) {
  std::sort(coords.begin(), coords.end(), [](const Coord& x, const Coord& y) {
    if (x.magnitude != y.magnitude) return x.magnitude < y.magnitude;
    return std::tie(x.layer, x.row, x.col) > std::tie(y.layer, y.row, y.col);
  });
  for (std::size_t i = 0; i < k; ++i) {
    const Coord& c = coords[i];
    if (c.layer >= threshold) mask.layers[c.layer](c.row, c.col) = 0.0;
  }
}

inline void collect(const encoder::LayeredParams& p, std::size_t layer, std::vector<Coord>& out) {
  const Matrix& w = p.layers[layer].weight;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      const double v = w(r, c);
      if (!std::isfinite(v)) {
        throw NumericError("compute_mask: non-finite weight at layer " + std::to_string(layer));
      }
      out.push_back({std::abs(v), layer, r, c});
    }
  }
}

}  // namespace detail

inline PruneMask compute_mask(const encoder::LayeredParams& params, const PruneSpec& spec) {
  spec.validate(params.depth());
  const std::size_t threshold = spec.layer_threshold;
  PruneMask mask = PruneMask::ones(params, threshold);
  if (spec.prune_rate == 0.0) return mask;

  if (spec.scope == PruneScope::kPerLayer) {
    for (std::size_t l = threshold; l < params.depth(); ++l) {
      std::vector<detail::Coord> coords;
      detail::collect(params, l, coords);
      const std::size_t k = prune_count(spec.prune_rate, coords.size());
      detail::prune_smallest(coords, k, mask, threshold);
    }
    return mask;
  }
  std::vector<detail::Coord> coords;
  const std::size_t first = spec.pool == RankPool::kAll ? 0 : threshold;
  for (std::size_t l = first; l < params.depth(); ++l) detail::collect(params, l, coords);
  const std::size_t k = prune_count(spec.prune_rate, coords.size());
  detail::prune_smallest(coords, k, mask, threshold);
  return mask;
}

inline encoder::LayeredParams apply_transform(const encoder::LayeredParams& params, const PruneMask& mask) {
  if (mask.layers.size() != params.depth()) {
    throw PreconditionError("apply_transform: mask has " + std::to_string(mask.layers.size()) +
                            " layers, encoder has " + std::to_string(params.depth()));
  }
  encoder::LayeredParams out = params;
  for (std::size_t l = 0; l < params.depth(); ++l) {
    if (!mask.layers[l].same_shape(params.layers[l].weight)) {
      throw PreconditionError("apply_transform: layer " + std::to_string(l) + " mask " +
                              mask.layers[l].shape_string() + " vs weight " +
                              params.layers[l].weight.shape_string());
    }
    if (mask.layer_is_identity(l)) continue;
    out.layers[l].weight = hadamard(params.layers[l].weight, mask.layers[l]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainLogRow {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean batch loss over the epoch
  double mask_overlap = 1.0;
  std::optional<double> seconds;
};

struct TrainResult {
  encoder::Model model;  // unpruned encoder f and heads g
  PruneMask mask;        // mask in force after the final refresh
  std::vector<TrainLogRow> log;
};

inline constexpr std::uint64_t kTrainStream = 0x545241494e;

struct TrainOptions {
  encoder::Architecture architecture{};
  bool log_timing = false;
};

namespace detail {

struct BatchVars {
  std::vector<encoder::LayerVars> f, f_view, projector, predictor;
};

inline BatchVars bind_batch(Tape& tape, const encoder::Model& m, const PruneMask& mask,
                            const PruneSpec& spec) {
  BatchVars b;
  b.f = encoder::bind(tape, m.encoder, true);
  b.projector = encoder::bind(tape, m.heads.projector, true);
  b.predictor = encoder::bind(tape, m.heads.predictor, true);
  if (spec.view_gradient == ViewGradient::kDetach) {
    b.f_view = encoder::bind(tape, apply_transform(m.encoder, mask), false);
    return b;
  }
  b.f_view = b.f;
  for (std::size_t l = 0; l < b.f.size(); ++l) {
    if (mask.layer_is_identity(l)) continue;
    b.f_view[l].weight = mul(b.f[l].weight, tape.constant(mask.layers[l]));
  }
  return b;
}

}  // namespace detail

// Two-stage loop: each epoch runs SGD over shuffled batches with one view
// through f and one through f̃ = f ⊙ M, then refreshes M every
// refresh_period epochs. The initial mask is all ones. A trailing batch of a
// single row is skipped.
inline TrainResult train_latetvg(const synthgen::GroupedDataset& ds, const synthgen::LatentModel& latent,
                                 const synthgen::AugmentationSpec& aug, const PruneSpec& prune,
                                 const encoder::TrainConfig& config, const TrainOptions& options = {}) {
  ds.validate();
  config.validate();
  if (ds.size() < 2) throw PreconditionError("train: dataset needs at least 2 rows");

  RngStream root(config.seed, kTrainStream);
  RngStream init_rng = root.fork(0);
  TrainResult result;
  result.model = encoder::init_model(ds.dim(), options.architecture, init_rng);
  prune.validate(result.model.encoder.depth());
  result.mask = PruneMask::ones(result.model.encoder, prune.layer_threshold);

  encoder::Sgd sgd(config);
  const std::size_t n = ds.size(), d = ds.dim();
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    RngStream rng = root.fork(epoch + 1);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t bs = std::min(config.batch_size, n - start);
      if (bs < 2) break;
      Matrix x1(bs, d), x2(bs, d);
      for (std::size_t i = 0; i < bs; ++i) {
        const std::size_t row = order[start + i];
        const auto v1 = synthgen::augment(ds.x.row(row), ds.y[row], ds.a[row], latent, aug, rng);
        const auto v2 = synthgen::augment(ds.x.row(row), ds.y[row], ds.a[row], latent, aug, rng);
        std::copy(v1.x.begin(), v1.x.end(), x1.row(i).begin());
        std::copy(v2.x.begin(), v2.x.end(), x2.row(i).begin());
      }

      Tape tape;
      const detail::BatchVars vars = detail::bind_batch(tape, result.model, result.mask, prune);
      const Var in1 = tape.constant(std::move(x1));
      const Var in2 = tape.constant(std::move(x2));
      const Var loss = config.objective == encoder::Objective::kSimSiam
                           ? encoder::simsiam_loss(in1, in2, vars.f, vars.f_view, vars.projector,
                                                   vars.predictor)
                           : encoder::spectral_loss(in1, in2, vars.f, vars.f_view);
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1));
      }
      tape.backward(loss);

      std::vector<Matrix*> params;
      std::vector<Matrix> grads;
      auto take = [&](encoder::LayeredParams& p, const std::vector<encoder::LayerVars>& v) {
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
          params.push_back(&p.layers[l].weight);
          grads.push_back(v[l].weight.grad());
          params.push_back(&p.layers[l].bias);
          grads.push_back(v[l].bias.grad());
        }
      };
      take(result.model.encoder, vars.f);
      take(result.model.heads.projector, vars.projector);
      take(result.model.heads.predictor, vars.predictor);
      sgd.step(params, grads);

      loss_sum += value;
      ++batches;
    }

    TrainLogRow row;
    row.epoch = epoch + 1;
    row.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    if ((epoch + 1) % prune.refresh_period == 0) {
      PruneMask next = compute_mask(result.model.encoder, prune);
      row.mask_overlap = mask_overlap(result.mask, next);
      result.mask = std::move(next);
    }
    if (options.log_timing) {
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    result.log.push_back(row);
  }
  return result;
}

// The baseline: identical loop with the view transform fixed at identity.
inline TrainResult train_base(const synthgen::GroupedDataset& ds, const synthgen::LatentModel& latent,
                              const synthgen::AugmentationSpec& aug, const encoder::TrainConfig& config,
                              const TrainOptions& options = {}) {
  PruneSpec identity;
  identity.layer_threshold = 0;
  identity.prune_rate = 0.0;
  return train_latetvg(ds, latent, aug, identity, config, options);
}

// `epoch,loss,mask_overlap,seconds`; seconds is NA unless timing was logged.
inline void write_train_log(const std::vector<TrainLogRow>& log, std::ostream& out) {
  out << "epoch,loss,mask_overlap,seconds\n";
  for (const auto& r : log) {
    out << r.epoch << ',' << synthgen::format_double(r.loss) << ','
        << synthgen::format_double(r.mask_overlap) << ','
        << (r.seconds ? synthgen::format_double(*r.seconds) : std::string("NA")) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Resampling.

enum class Strategy { kOriginal, kBalanced, kDownsample, kUpsample };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kOriginal: return "original";
    case Strategy::kBalanced: return "balanced";
    case Strategy::kDownsample: return "downsample";
    case Strategy::kUpsample: return "upsample";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "original") return Strategy::kOriginal;
  if (s == "balanced") return Strategy::kBalanced;
  if (s == "downsample") return Strategy::kDownsample;
  if (s == "upsample") return Strategy::kUpsample;
  throw PreconditionError("unknown resampling strategy '" + std::string(s) + "'");
}

// Largest-remainder apportionment of `total` rows over weights summing to 1.
// Remainder ties go to the lower group id.
inline std::array<std::size_t, 4> largest_remainder(const std::array<double, 4>& weights, std::size_t total) {
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw PreconditionError("balanced: target weights must be >= 0");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw PreconditionError("balanced: target weights must sum to 1");
  std::array<std::size_t, 4> counts{};
  std::array<double, 4> remainder{};
  std::size_t assigned = 0;
  for (std::size_t g = 0; g < 4; ++g) {
    const double exact = weights[g] * static_cast<double>(total);
    counts[g] = static_cast<std::size_t>(std::floor(exact));
    remainder[g] = exact - static_cast<double>(counts[g]);
    assigned += counts[g];
  }
  std::array<std::size_t, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return remainder[i] > remainder[j]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % 4, ++assigned) ++counts[order[i]];
  return counts;
}

namespace detail {

// `target` rows of `pool`: without replacement when target <= |pool|, else
// every row once plus (target - |pool|) draws with replacement. Sorted.
inline std::vector<std::size_t> draw_rows(std::vector<std::size_t> pool, std::size_t target, RngStream& rng) {
  std::vector<std::size_t> out;
  if (target <= pool.size()) {
    rng.shuffle(std::span<std::size_t>(pool));
    out.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(target));
  } else {
    out = pool;
    for (std::size_t i = pool.size(); i < target; ++i) out.push_back(pool[rng.uniform_index(pool.size())]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

inline constexpr std::uint64_t kResampleStream = 0x5245534d;

// Output rows are grouped by group id, ascending; every row copies an input row.
inline synthgen::GroupedDataset resample(const synthgen::GroupedDataset& ds, Strategy strategy,
                                         std::optional<std::array<double, 4>> target, std::uint64_t seed) {
  ds.validate();
  if (strategy == Strategy::kOriginal) return ds;
  const auto counts = ds.group_counts();
  std::array<std::size_t, 4> want{};
  if (strategy == Strategy::kBalanced) {
    want = largest_remainder(target.value_or(std::array<double, 4>{0.25, 0.25, 0.25, 0.25}), ds.size());
  } else {
    for (int g = 0; g < 4; ++g) {
      if (counts[g] == 0) throw PreconditionError("resample: group " + std::to_string(g) + " is empty");
    }
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    want.fill(strategy == Strategy::kDownsample ? *lo : *hi);
  }
  RngStream root(seed, kResampleStream);
  std::vector<std::size_t> rows;
  for (int g = 0; g < 4; ++g) {
    if (want[g] == 0) continue;
    if (counts[g] == 0) {
      throw PreconditionError("resample: group " + std::to_string(g) + " is empty but has target " +
                              std::to_string(want[g]));
    }
    RngStream rng = root.fork(static_cast<std::uint64_t>(g));
    const auto picked = detail::draw_rows(ds.rows_in_group(g), want[g], rng);
    rows.insert(rows.end(), picked.begin(), picked.end());
  }
  return ds.subset(rows);
}

}  // namespace spurlab::latetvg
