#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "spurlab/encoder.hpp"
#include "support.hpp"

using namespace spurlab;
using namespace spurlab::encoder;
using spurlab::testkit::random_matrix;
using spurlab::testkit::to_eigen;

namespace {

LayeredParams tiny_mlp(RngStream& rng, std::vector<std::size_t> dims, Activation act) {
  std::vector<Activation> acts(dims.size() - 1, act);
  acts.back() = Activation::kIdentity;
  LayeredParams p = make_mlp(dims, acts, rng);
  for (auto& l : p.layers)
    for (double& b : l.bias.data()) b = 0.1 * rng.normal();
  return p;
}

Eigen::MatrixXd eigen_forward(const LayeredParams& p, Eigen::MatrixXd h) {
  for (const auto& l : p.layers) {
    Eigen::MatrixXd z = h * to_eigen(l.weight).transpose();
    z.rowwise() += to_eigen(l.bias).row(0);
    h = z.unaryExpr([&](double v) { return apply_activation(l.activation, v); });
  }
  return h;
}

double eigen_cos_mean(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    s += a.row(i).dot(b.row(i)) / (std::max(a.row(i).norm(), 1e-12) * std::max(b.row(i).norm(), 1e-12));
  }
  return s / static_cast<double>(a.rows());
}

// Flattens a list of layered parameter sets into the matrices of a Computation.
std::vector<Matrix> flatten(std::initializer_list<const LayeredParams*> sets) {
  std::vector<Matrix> out;
  for (const LayeredParams* p : sets) {
    for (const auto& l : p->layers) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
  }
  return out;
}

std::vector<LayerVars> slice(std::span<const Var> vars, std::size_t& cursor, const LayeredParams& shape) {
  std::vector<LayerVars> out;
  for (const auto& l : shape.layers) {
    out.push_back({vars[cursor], vars[cursor + 1], l.activation});
    cursor += 2;
  }
  return out;
}

}  // namespace

TEST(Encoder, ForwardMatchesEigenOracle) {
  RngStream rng(1, 0);
  const LayeredParams p = tiny_mlp(rng, {5, 7, 4, 3}, Activation::kRelu);
  const Matrix x = random_matrix(rng, 9, 5);
  const Matrix y = forward(p, x);
  const Eigen::MatrixXd ref = eigen_forward(p, to_eigen(x));
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y(r, c), ref(r, c), 1e-12);
  const auto single = forward(p, x.row(4));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(single[c], y(4, c));
}

TEST(Encoder, ForwardShapeErrorNamesLayer) {
  RngStream rng(2, 0);
  LayeredParams p = tiny_mlp(rng, {4, 3, 2}, Activation::kRelu);
  EXPECT_THROW(forward(p, Matrix(2, 5)), PreconditionError);
  p.layers[1].weight = Matrix(2, 6);
  p.layers[1].bias = Matrix(1, 2);
  try {
    p.validate();
    FAIL();
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
  }
}

TEST(Encoder, InitModelShapes) {
  RngStream rng(3, 0);
  const Model m = init_model(8, Architecture{}, rng);
  ASSERT_EQ(m.encoder.depth(), 3u);
  EXPECT_EQ(m.encoder.in_dim(), 8u);
  EXPECT_EQ(m.encoder.out_dim(), 32u);
  EXPECT_NO_THROW(m.heads.validate());
  EXPECT_EQ(m.heads.predictor.layers[0].weight.rows(), 16u);
  const double bound = std::sqrt(6.0 / (8.0 + 64.0));
  for (double w : m.encoder.layers[0].weight.data()) EXPECT_LE(std::abs(w), bound);
  for (double b : m.encoder.layers[0].bias.data()) EXPECT_EQ(b, 0.0);
}

TEST(Encoder, SpectralLossMatchesEigenOracle) {
  RngStream rng(4, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(10);
    const LayeredParams f = tiny_mlp(rng, {4, 6, 3}, Activation::kTanh);
    const LayeredParams g = tiny_mlp(rng, {4, 6, 3}, Activation::kTanh);
    const Matrix x = random_matrix(rng, n, 4), xp = random_matrix(rng, n, 4);
    const Eigen::MatrixXd u = eigen_forward(f, to_eigen(x)), v = eigen_forward(g, to_eigen(xp));
    double pos = 0.0, neg = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double s = u.row(i).dot(v.row(j));
        if (i == j) pos += s;
        else neg += s * s;
      }
    const double expected = -2.0 * pos / n + neg / static_cast<double>(n * (n - 1));
    EXPECT_NEAR(spectral_loss(x, xp, f, g), expected, 1e-11 * (1.0 + std::abs(expected)));
  }
}

TEST(Encoder, SpectralLossRejectsSingleRow) {
  RngStream rng(5, 0);
  const LayeredParams f = tiny_mlp(rng, {3, 2}, Activation::kIdentity);
  EXPECT_THROW(spectral_loss(Matrix(1, 3), Matrix(1, 3), f, f), PreconditionError);
  EXPECT_THROW(spectral_loss(Matrix(3, 3), Matrix(2, 3), f, f), PreconditionError);
}

TEST(Encoder, SimSiamLossMatchesOracleAndBounds) {
  RngStream rng(6, 0);
  const LayeredParams f = tiny_mlp(rng, {4, 5, 3}, Activation::kRelu);
  SimSiamHeads h{tiny_mlp(rng, {3, 3}, Activation::kIdentity), tiny_mlp(rng, {3, 2, 3}, Activation::kRelu)};
  const Matrix x1 = random_matrix(rng, 12, 4), x2 = random_matrix(rng, 12, 4);
  const Eigen::MatrixXd z1 = eigen_forward(h.projector, eigen_forward(f, to_eigen(x1)));
  const Eigen::MatrixXd z2 = eigen_forward(h.projector, eigen_forward(f, to_eigen(x2)));
  const Eigen::MatrixXd p1 = eigen_forward(h.predictor, z1), p2 = eigen_forward(h.predictor, z2);
  const double expected = -0.5 * (eigen_cos_mean(p1, z2) + eigen_cos_mean(p2, z1));
  const double got = simsiam_loss(x1, x2, f, f, h);
  EXPECT_NEAR(got, expected, 1e-12);
  EXPECT_GE(got, -1.0 - 1e-12);
  EXPECT_LE(got, 1.0 + 1e-12);
}

TEST(Encoder, SimSiamStopGradientBlocksTargetBranch) {
  // With the online predictor frozen, a parameter that only feeds the
  // target branch (the view encoder) must receive zero gradient.
  RngStream rng(7, 0);
  const LayeredParams f = tiny_mlp(rng, {3, 4, 3}, Activation::kTanh);
  const LayeredParams fv = tiny_mlp(rng, {3, 4, 3}, Activation::kTanh);
  SimSiamHeads h{tiny_mlp(rng, {3, 3}, Activation::kIdentity), tiny_mlp(rng, {3, 3, 3}, Activation::kTanh)};
  const Matrix x1 = random_matrix(rng, 6, 3), x2 = random_matrix(rng, 6, 3);
  Tape tape;
  const auto fvars = bind(tape, f, false);
  const auto gvars = bind(tape, fv, true);
  const auto pvars = bind(tape, h.projector, false);
  const auto qvars = bind(tape, h.predictor, false);
  // Only the first cosine term: z̃2 enters solely through stop_gradient.
  const Var z2 = forward(pvars, forward(gvars, tape.constant(x2)));
  const Var p1 = forward(qvars, forward(pvars, forward(fvars, tape.constant(x1))));
  const Var loss = scale(mean(row_cosine(p1, stop_gradient(z2))), -1.0);
  tape.backward(loss);
  for (const auto& l : gvars) {
    for (double g : l.weight.grad().data()) EXPECT_EQ(g, 0.0);
  }
}

TEST(Encoder, SimSiamGradientMatchesFiniteDifferences) {
  RngStream rng(8, 0);
  const LayeredParams f = tiny_mlp(rng, {3, 4, 3}, Activation::kTanh);
  SimSiamHeads h{tiny_mlp(rng, {3, 3}, Activation::kIdentity), tiny_mlp(rng, {3, 2, 3}, Activation::kTanh)};
  const Matrix x1 = random_matrix(rng, 5, 3), x2 = random_matrix(rng, 5, 3);
  const Computation comp = [&](Tape& t, std::span<const Var> vars) {
    std::size_t cur = 0;
    const auto fv = slice(vars, cur, f);
    const auto pv = slice(vars, cur, h.projector);
    const auto qv = slice(vars, cur, h.predictor);
    return simsiam_loss(t.constant(x1), t.constant(x2), fv, fv, pv, qv);
  };
  const auto params = flatten({&f, &h.projector, &h.predictor});
  // The stop-gradient makes the analytic gradient differ from the total
  // derivative, so compare against finite differences of the surrogate where
  // targets are frozen at the current parameters.
  const Matrix z1 = forward(h.projector, forward(f, x1));
  const Matrix z2 = forward(h.projector, forward(f, x2));
  const Computation surrogate = [&](Tape& t, std::span<const Var> vars) {
    std::size_t cur = 0;
    const auto fv = slice(vars, cur, f);
    const auto pv = slice(vars, cur, h.projector);
    const auto qv = slice(vars, cur, h.predictor);
    const Var p1 = forward(qv, forward(pv, forward(fv, t.constant(x1))));
    const Var p2 = forward(qv, forward(pv, forward(fv, t.constant(x2))));
    return scale(add(mean(row_cosine(p1, t.constant(z2))), mean(row_cosine(p2, t.constant(z1)))), -0.5);
  };
  const auto analytic = grad(comp, params);
  const auto fd = finite_diff_grad(surrogate, params, 1e-6);
  EXPECT_LT(max_relative_error(analytic, fd), 1e-5);
}

TEST(Encoder, SpectralGradientMatchesFiniteDifferences) {
  RngStream rng(9, 0);
  const LayeredParams f = tiny_mlp(rng, {3, 5, 2}, Activation::kTanh);
  const Matrix x = random_matrix(rng, 6, 3), xp = random_matrix(rng, 6, 3);
  const Computation comp = [&](Tape& t, std::span<const Var> vars) {
    std::size_t cur = 0;
    const auto fv = slice(vars, cur, f);
    return spectral_loss(t.constant(x), t.constant(xp), fv, fv);
  };
  const auto params = flatten({&f});
  EXPECT_LT(max_relative_error(grad(comp, params), finite_diff_grad(comp, params, 1e-6)), 1e-5);
}

TEST(Encoder, SgdMatchesHandRolledUpdate) {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.momentum = 0.5;
  cfg.weight_decay = 0.01;
  Sgd opt(cfg);
  Matrix p(1, 2, std::vector<double>{1.0, -2.0});
  Matrix* ptrs[] = {&p};
  double v0 = 0.0, v1 = 0.0, t0 = 1.0, t1 = -2.0;
  const double grads[3][2] = {{0.5, 0.25}, {-1.0, 2.0}, {0.0, 0.0}};
  for (const auto& gr : grads) {
    const Matrix g(1, 2, std::vector<double>{gr[0], gr[1]});
    opt.step(ptrs, std::span<const Matrix>(&g, 1));
    v0 = 0.5 * v0 + gr[0];
    v1 = 0.5 * v1 + gr[1];
    t0 -= 0.1 * (v0 + 0.01 * t0);
    t1 -= 0.1 * (v1 + 0.01 * t1);
    EXPECT_DOUBLE_EQ(p(0, 0), t0);
    EXPECT_DOUBLE_EQ(p(0, 1), t1);
  }
}

TEST(Encoder, TrainConfigValidation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), PreconditionError);
  c = TrainConfig{};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), PreconditionError);
  c = TrainConfig{};
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), PreconditionError);
}

TEST(Encoder, CheckpointRoundTripIsBitwise) {
  RngStream rng(10, 0);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t depth = 1 + rng.uniform_index(4);
    std::vector<std::size_t> dims{1 + rng.uniform_index(6)};
    for (std::size_t l = 0; l < depth; ++l) dims.push_back(1 + rng.uniform_index(6));
    LayeredParams p = tiny_mlp(rng, dims, Activation::kRelu);
    p.layers[0].weight(0, 0) = std::numeric_limits<double>::denorm_min();
    p.layers.back().bias(0, 0) = -1e300;
    std::stringstream ss;
    write_checkpoint(p, ss);
    EXPECT_EQ(read_checkpoint(ss), p);
  }
}

TEST(Encoder, CheckpointErrorsCarryLineNumbers) {
  auto expect_line = [](const std::string& text, std::size_t line) {
    std::istringstream in(text);
    try {
      read_checkpoint(in);
      FAIL() << "expected ParseError for:\n" << text;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.line(), line) << e.what();
    }
  };
  expect_line("", 1);
  expect_line("NOT-A-CHECKPOINT\n", 1);
  expect_line("SPURLAB-ENCODER\nformat 2\n", 2);
  expect_line("SPURLAB-ENCODER\nformat 1\nlayers 1\nlayer 0 1 2 relu\n1 2 3\n", 5);
  expect_line("SPURLAB-ENCODER\nformat 1\nlayers 1\nlayer 0 1 2 swish\n", 4);
  expect_line("SPURLAB-ENCODER\nformat 1\nlayers 1\nlayer 0 1 2 relu\n1 x\n", 5);
  expect_line("SPURLAB-ENCODER\nformat 1\nlayers 1\nlayer 0 1 2 relu\n1 2\n0\n", 7);
  EXPECT_THROW(read_checkpoint(std::string("/nonexistent/ckpt.txt")), IoError);
}
