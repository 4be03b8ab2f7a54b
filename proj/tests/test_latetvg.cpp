#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <tuple>

#include <gtest/gtest.h>

#include "spurlab/latetvg.hpp"
#include "support.hpp"

using namespace spurlab;
using namespace spurlab::latetvg;
using encoder::LayeredParams;

namespace {

LayeredParams random_params(RngStream& rng, std::size_t depth, bool with_ties) {
  std::vector<std::size_t> dims;
  for (std::size_t l = 0; l <= depth; ++l) dims.push_back(1 + rng.uniform_index(5));
  std::vector<Activation> acts(depth, Activation::kRelu);
  LayeredParams p = encoder::make_mlp(dims, acts, rng);
  if (with_ties) {
    // Quantize so that many magnitudes collide, with both signs.
    for (auto& l : p.layers)
      for (double& w : l.weight.data()) w = static_cast<double>(static_cast<int>(rng.uniform_index(4)) - 2) * 0.25;
  }
  return p;
}

// Brute-force oracle: enumerate coordinates, sort by (|w| asc, coord desc),
// zero the first k that lie in prunable layers.
std::set<std::tuple<std::size_t, std::size_t, std::size_t>> oracle_zeroes(const LayeredParams& p,
                                                                         const PruneSpec& s) {
  using C = std::tuple<double, std::size_t, std::size_t, std::size_t>;
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> out;
  auto run = [&](std::size_t first, std::size_t last) {
    std::vector<C> cs;
    for (std::size_t l = first; l < last; ++l)
      for (std::size_t r = 0; r < p.layers[l].weight.rows(); ++r)
        for (std::size_t c = 0; c < p.layers[l].weight.cols(); ++c)
          cs.emplace_back(std::abs(p.layers[l].weight(r, c)), l, r, c);
    std::sort(cs.begin(), cs.end(), [](const C& a, const C& b) {
      if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) < std::get<0>(b);
      return std::make_tuple(std::get<1>(a), std::get<2>(a), std::get<3>(a)) >
             std::make_tuple(std::get<1>(b), std::get<2>(b), std::get<3>(b));
    });
    const auto k = static_cast<std::size_t>(std::llround(std::floor(s.prune_rate * cs.size() + 1e-7)));
    for (std::size_t i = 0; i < k; ++i) {
      if (std::get<1>(cs[i]) >= s.layer_threshold) out.emplace(std::get<1>(cs[i]), std::get<2>(cs[i]), std::get<3>(cs[i]));
    }
  };
  if (s.scope == PruneScope::kPerLayer) {
    for (std::size_t l = s.layer_threshold; l < p.depth(); ++l) run(l, l + 1);
  } else {
    run(s.pool == RankPool::kAll ? 0 : s.layer_threshold, p.depth());
  }
  return out;
}

std::set<std::tuple<std::size_t, std::size_t, std::size_t>> zeroes_of(const PruneMask& m) {
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> out;
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    for (std::size_t r = 0; r < m.layers[l].rows(); ++r)
      for (std::size_t c = 0; c < m.layers[l].cols(); ++c)
        if (m.layers[l](r, c) == 0.0) out.emplace(l, r, c);
  return out;
}

PruneSpec random_spec(RngStream& rng, std::size_t depth) {
  PruneSpec s;
  s.layer_threshold = rng.uniform_index(depth);
  s.prune_rate = static_cast<double>(rng.uniform_index(10)) / 10.0;
  s.scope = rng.uniform() < 0.5 ? PruneScope::kGlobal : PruneScope::kPerLayer;
  s.pool = rng.uniform() < 0.5 ? RankPool::kPrunable : RankPool::kAll;
  return s;
}

struct Fixture {
  synthgen::LatentSpec spec;
  synthgen::GroupedDataset ds;
  synthgen::AugmentationSpec aug{0.25, 0.05, 0.1};
  encoder::TrainConfig config;
  TrainOptions options;

  Fixture() {
    spec.mu_core = 1.0;
    spec.mu_spur = 2.0;
    spec.sigma = 0.5;
    spec.d_noise = 2;
    spec.majority_fraction = 0.9;
    spec.n_samples = 70;
    spec.mix = true;
    ds = synthgen::generate(spec, 3);
    config.epochs = 3;
    config.batch_size = 16;
    config.seed = 17;
    options.architecture.encoder_hidden = {8, 8, 6};
    options.architecture.projector_dim = 4;
    options.architecture.predictor_hidden = 3;
  }
  TrainResult run(const PruneSpec& p) const {
    return train_latetvg(ds, synthgen::LatentModel(spec), aug, p, config, options);
  }
};

}  // namespace

TEST(LateTvg, PruneCountExamples) {
  EXPECT_EQ(prune_count(0.7, 10), 7u);
  EXPECT_EQ(prune_count(0.5, 3), 1u);
  EXPECT_EQ(prune_count(0.0, 100), 0u);
  EXPECT_EQ(prune_count(0.9, 2048), 1843u);
  EXPECT_EQ(prune_count(0.3, 10), 3u);
}

TEST(LateTvg, PruneSpecValidation) {
  PruneSpec s;
  EXPECT_NO_THROW(s.validate(3));
  EXPECT_THROW(s.validate(2), PreconditionError);
  s.prune_rate = 1.0;
  EXPECT_THROW(s.validate(3), PreconditionError);
  s.prune_rate = 0.5;
  s.refresh_period = 0;
  EXPECT_THROW(s.validate(3), PreconditionError);
}

TEST(LateTvg, TieRuleKeepsEarlierCoordinates) {
  LayeredParams p;
  p.layers.push_back({Matrix(1, 1, 1.0), Matrix(1, 1), Activation::kRelu});
  p.layers.push_back({Matrix(2, 1, std::vector<double>{0.5, -0.5}), Matrix(1, 2), Activation::kRelu});
  p.layers.push_back({Matrix(1, 2, std::vector<double>{-0.5, 0.5}), Matrix(1, 1), Activation::kIdentity});
  PruneSpec s;
  s.layer_threshold = 1;
  s.prune_rate = 0.5;
  const PruneMask m = compute_mask(p, s);
  // Four tied magnitudes, two pruned: the last two in (layer,row,col) order.
  EXPECT_EQ(m.layers[1](0, 0), 1.0);
  EXPECT_EQ(m.layers[1](1, 0), 1.0);
  EXPECT_EQ(m.layers[2](0, 0), 0.0);
  EXPECT_EQ(m.layers[2](0, 1), 0.0);
  EXPECT_TRUE(m.layer_is_identity(0));
}

TEST(LateTvg, MaskMatchesBruteForceOracle) {
  RngStream rng(1, 0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t depth = 1 + rng.uniform_index(4);
    const LayeredParams p = random_params(rng, depth, trial % 2 == 0);
    const PruneSpec s = random_spec(rng, depth);
    const PruneMask m = compute_mask(p, s);
    ASSERT_EQ(zeroes_of(m), oracle_zeroes(p, s)) << "trial " << trial;
  }
}

TEST(LateTvg, MaskProperties) {
  RngStream rng(2, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t depth = 1 + rng.uniform_index(4);
    const LayeredParams p = random_params(rng, depth, trial % 3 == 0);
    PruneSpec s = random_spec(rng, depth);
    s.pool = RankPool::kPrunable;
    const PruneMask m = compute_mask(p, s);
    for (std::size_t l = 0; l < s.layer_threshold; ++l) EXPECT_TRUE(m.layer_is_identity(l));
    if (s.scope == PruneScope::kGlobal) {
      EXPECT_EQ(m.zero_count(), prune_count(s.prune_rate, m.prunable_count()));
    }
    // Every kept magnitude in the ranking pool dominates every pruned one.
    double max_pruned = -1.0, min_kept = std::numeric_limits<double>::infinity();
    for (std::size_t l = s.layer_threshold; l < depth; ++l) {
      if (s.scope == PruneScope::kPerLayer) {
        max_pruned = -1.0;
        min_kept = std::numeric_limits<double>::infinity();
      }
      for (std::size_t k = 0; k < m.layers[l].size(); ++k) {
        const double mag = std::abs(p.layers[l].weight.data()[k]);
        if (m.layers[l].data()[k] == 0.0) max_pruned = std::max(max_pruned, mag);
        else min_kept = std::min(min_kept, mag);
      }
      if (s.scope == PruneScope::kPerLayer) EXPECT_LE(max_pruned, min_kept);
    }
    EXPECT_LE(max_pruned, min_kept);
    // Nested: a higher rate zeroes a superset.
    PruneSpec hi = s;
    hi.prune_rate = std::min(0.95, s.prune_rate + 0.3);
    const auto lo_set = zeroes_of(m), hi_set = zeroes_of(compute_mask(p, hi));
    EXPECT_TRUE(std::includes(hi_set.begin(), hi_set.end(), lo_set.begin(), lo_set.end()));
  }
}

TEST(LateTvg, ApplyTransformZeroesMaskedWeights) {
  RngStream rng(3, 0);
  const LayeredParams p = random_params(rng, 3, false);
  PruneSpec s;
  s.layer_threshold = 1;
  s.prune_rate = 0.5;
  const PruneMask m = compute_mask(p, s);
  const LayeredParams q = apply_transform(p, m);
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t k = 0; k < m.layers[l].size(); ++k) {
      EXPECT_EQ(q.layers[l].weight.data()[k], m.layers[l].data()[k] == 0.0 ? 0.0 : p.layers[l].weight.data()[k]);
    }
    EXPECT_EQ(q.layers[l].bias, p.layers[l].bias);
  }
  EXPECT_EQ(apply_transform(p, PruneMask::ones(p, 1)), p);
}

TEST(LateTvg, ApplyTransformShapeErrorNamesLayer) {
  RngStream rng(4, 0);
  const LayeredParams p = random_params(rng, 3, false);
  PruneMask m = PruneMask::ones(p, 1);
  m.layers[2] = Matrix(m.layers[2].rows() + 1, m.layers[2].cols(), 1.0);
  try {
    apply_transform(p, m);
    FAIL();
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos);
  }
  m.layers.pop_back();
  EXPECT_THROW(apply_transform(p, m), PreconditionError);
}

TEST(LateTvg, NonFiniteWeightRejected) {
  RngStream rng(5, 0);
  LayeredParams p = random_params(rng, 3, false);
  p.layers[2].weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
  PruneSpec s;
  s.layer_threshold = 1;
  s.prune_rate = 0.5;
  EXPECT_THROW(compute_mask(p, s), NumericError);
}

TEST(LateTvg, MaskOverlap) {
  RngStream rng(6, 0);
  const LayeredParams p = random_params(rng, 3, false);
  PruneMask a = PruneMask::ones(p, 1), b = a;
  EXPECT_EQ(mask_overlap(a, b), 1.0);
  b.layers[1](0, 0) = 0.0;
  b.layers[0](0, 0) = 0.0;  // outside the prunable region: ignored
  const double total = static_cast<double>(a.prunable_count());
  EXPECT_DOUBLE_EQ(mask_overlap(a, b), (total - 1.0) / total);
  b.layer_threshold = 2;
  EXPECT_THROW(mask_overlap(a, b), PreconditionError);
}

TEST(LateTvg, TrainingIsDeterministic) {
  Fixture fx;
  PruneSpec s;
  s.prune_rate = 0.5;
  const TrainResult a = fx.run(s), b = fx.run(s);
  EXPECT_EQ(a.model.encoder, b.model.encoder);
  EXPECT_EQ(a.model.heads, b.model.heads);
  EXPECT_EQ(a.mask, b.mask);
  ASSERT_EQ(a.log.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.log[e].epoch, e + 1);
    EXPECT_EQ(a.log[e].loss, b.log[e].loss);
    EXPECT_TRUE(std::isfinite(a.log[e].loss));
    EXPECT_FALSE(a.log[e].seconds.has_value());
  }
  EXPECT_EQ(a.mask.zero_count(), prune_count(0.5, a.mask.prunable_count()));
}

TEST(LateTvg, ZeroRateEqualsBaseBitwise) {
  Fixture fx;
  PruneSpec s;
  s.layer_threshold = 2;
  s.prune_rate = 0.0;
  const TrainResult late = fx.run(s);
  const TrainResult base = train_base(fx.ds, synthgen::LatentModel(fx.spec), fx.aug, fx.config, fx.options);
  EXPECT_EQ(late.model.encoder, base.model.encoder);
  EXPECT_EQ(late.model.heads, base.model.heads);
  for (const auto& row : late.log) EXPECT_EQ(row.mask_overlap, 1.0);
}

TEST(LateTvg, ViewGradientModesDiffer) {
  Fixture fx;
  PruneSpec s;
  s.prune_rate = 0.7;
  const TrainResult shared = fx.run(s);
  s.view_gradient = ViewGradient::kDetach;
  const TrainResult detach = fx.run(s);
  // Even under the all-ones initial mask the detached view contributes no
  // gradient, so trajectories split after the first step.
  EXPECT_NE(shared.model.encoder, detach.model.encoder);
  EXPECT_NE(shared.log[0].loss, detach.log[0].loss);
}

TEST(LateTvg, SharedViewGradientMatchesFiniteDifferences) {
  RngStream rng(7, 0);
  encoder::Architecture arch;
  arch.encoder_hidden = {5, 4, 3};
  arch.projector_dim = 3;
  arch.predictor_hidden = 2;
  encoder::Model model = encoder::init_model(3, arch, rng);
  for (auto& l : model.encoder.layers)
    for (double& b : l.bias.data()) b = 0.5 + 0.1 * rng.normal();  // stay off relu kinks
  PruneSpec s;
  s.layer_threshold = 1;
  s.prune_rate = 0.5;
  const PruneMask mask = compute_mask(model.encoder, s);
  const Matrix x = testkit::random_matrix(rng, 6, 3), xp = testkit::random_matrix(rng, 6, 3);

  Tape tape;
  const auto vars = detail::bind_batch(tape, model, mask, s);
  const Var loss = encoder::spectral_loss(tape.constant(x), tape.constant(xp), vars.f, vars.f_view);
  tape.backward(loss);

  std::vector<Matrix> params;
  for (const auto& l : model.encoder.layers) params.push_back(l.weight);
  const Computation oracle = [&](Tape& t, std::span<const Var> w) {
    std::vector<encoder::LayerVars> f, fv;
    for (std::size_t l = 0; l < w.size(); ++l) {
      const auto& layer = model.encoder.layers[l];
      const Var b = t.constant(layer.bias);
      f.push_back({w[l], b, layer.activation});
      fv.push_back({mul(w[l], t.constant(mask.layers[l])), b, layer.activation});
    }
    return encoder::spectral_loss(t.constant(x), t.constant(xp), f, fv);
  };
  const auto fd = finite_diff_grad(oracle, params, 1e-6);
  std::vector<Matrix> analytic;
  for (const auto& l : vars.f) analytic.push_back(l.weight.grad());
  EXPECT_LT(max_relative_error(analytic, fd), 1e-5);
}

TEST(LateTvg, TrainLogCsv) {
  std::vector<TrainLogRow> log{{1, 0.5, 1.0, std::nullopt}, {2, -0.25, 0.75, 1.5}};
  std::ostringstream out;
  write_train_log(log, out);
  EXPECT_EQ(out.str(), "epoch,loss,mask_overlap,seconds\n1,0.5,1,NA\n2,-0.25,0.75,1.5\n");
}

TEST(LateTvg, LargestRemainderExamples) {
  EXPECT_EQ(largest_remainder({0.25, 0.25, 0.25, 0.25}, 10), (std::array<std::size_t, 4>{3, 3, 2, 2}));
  EXPECT_EQ(largest_remainder({0.1, 0.2, 0.3, 0.4}, 7), (std::array<std::size_t, 4>{1, 1, 2, 3}));
  EXPECT_EQ(largest_remainder({1.0, 0.0, 0.0, 0.0}, 5), (std::array<std::size_t, 4>{5, 0, 0, 0}));
  EXPECT_THROW(largest_remainder({0.5, 0.5, 0.5, 0.0}, 5), PreconditionError);
}

TEST(LateTvg, ResamplingProperties) {
  RngStream rng(8, 0);
  for (int trial = 0; trial < 40; ++trial) {
    synthgen::LatentSpec spec;
    spec.majority_fraction = 0.6 + 0.35 * rng.uniform();
    spec.n_samples = 100 + rng.uniform_index(300);
    const synthgen::GroupedDataset ds = synthgen::generate(spec, trial);
    const auto counts = ds.group_counts();
    if (*std::min_element(counts.begin(), counts.end()) == 0) continue;

    const auto original = resample(ds, Strategy::kOriginal, std::nullopt, trial);
    EXPECT_EQ(original, ds);

    const auto bal = resample(ds, Strategy::kBalanced, std::nullopt, trial);
    EXPECT_EQ(bal.size(), ds.size());
    const auto bc = bal.group_counts();
    EXPECT_EQ(bc, largest_remainder({0.25, 0.25, 0.25, 0.25}, ds.size()));

    const auto down = resample(ds, Strategy::kDownsample, std::nullopt, trial);
    const auto lo = *std::min_element(counts.begin(), counts.end());
    for (auto c : down.group_counts()) EXPECT_EQ(c, lo);
    // Downsampling draws without replacement: no duplicate rows.
    std::set<std::vector<double>> seen;
    for (std::size_t i = 0; i < down.size(); ++i) {
      const auto r = down.x.row(i);
      EXPECT_TRUE(seen.emplace(r.begin(), r.end()).second);
    }

    const auto up = resample(ds, Strategy::kUpsample, std::nullopt, trial);
    const auto hi = *std::max_element(counts.begin(), counts.end());
    for (auto c : up.group_counts()) EXPECT_EQ(c, hi);
    // Upsampling keeps every original row.
    std::multiset<std::vector<double>> up_rows;
    for (std::size_t i = 0; i < up.size(); ++i) up_rows.emplace(up.x.row(i).begin(), up.x.row(i).end());
    for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_TRUE(up_rows.count({ds.x.row(i).begin(), ds.x.row(i).end()}));

    for (const auto* out : {&bal, &down, &up}) {
      EXPECT_TRUE(std::is_sorted(out->g.begin(), out->g.end()));
    }
    EXPECT_EQ(resample(ds, Strategy::kUpsample, std::nullopt, trial), up);
  }
}

TEST(LateTvg, ResampleErrors) {
  synthgen::LatentSpec spec;
  spec.majority_fraction = 1.0;
  spec.n_samples = 50;
  const synthgen::GroupedDataset ds = synthgen::generate(spec, 1);
  EXPECT_THROW(resample(ds, Strategy::kDownsample, std::nullopt, 0), PreconditionError);
  EXPECT_THROW(resample(ds, Strategy::kBalanced, std::nullopt, 0), PreconditionError);
  EXPECT_NO_THROW(resample(ds, Strategy::kBalanced, std::array<double, 4>{0.5, 0.0, 0.0, 0.5}, 0));
  EXPECT_THROW(parse_strategy("shuffle"), PreconditionError);
  for (Strategy s : {Strategy::kOriginal, Strategy::kBalanced, Strategy::kDownsample, Strategy::kUpsample}) {
    EXPECT_EQ(parse_strategy(to_string(s)), s);
  }
}
