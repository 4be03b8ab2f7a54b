#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "spurlab/numkit/autodiff.hpp"
#include "spurlab/numkit/error.hpp"
#include "spurlab/numkit/matrix.hpp"
#include "spurlab/numkit/rng.hpp"
#include "spurlab/synthgen.hpp"

// Dense encoders with SimSiam projector/predictor heads, the SimSiam and
// spectral contrastive objectives, momentum SGD, and the checkpoint format.
namespace spurlab::encoder {

struct DenseLayer {
  Matrix weight;  // out × in
  Matrix bias;    // 1 × out
  Activation activation = Activation::kIdentity;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// Ordered dense layers; layer index 0 is closest to the input.
struct LayeredParams {
  std::vector<DenseLayer> layers;

  std::size_t depth() const { return layers.size(); }
  std::size_t in_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  std::size_t out_dim() const { return layers.empty() ? 0 : layers.back().weight.rows(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  void validate() const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.bias.rows() != 1 || l.bias.cols() != l.weight.rows()) {
        throw PreconditionError("layer " + std::to_string(i) + ": bias shape " +
                                l.bias.shape_string() + " does not match weight " +
                                l.weight.shape_string());
      }
      if (i > 0 && layers[i - 1].weight.rows() != l.weight.cols()) {
        throw PreconditionError("layer " + std::to_string(i) + ": input dim " +
                                std::to_string(l.weight.cols()) + " != previous output dim " +
                                std::to_string(layers[i - 1].weight.rows()));
      }
    }
  }

  friend bool operator==(const LayeredParams&, const LayeredParams&) = default;
};

struct SimSiamHeads {
  LayeredParams projector;
  LayeredParams predictor;

  void validate() const {
    projector.validate();
    predictor.validate();
    if (projector.out_dim() != predictor.in_dim() || predictor.in_dim() != predictor.out_dim()) {
      throw PreconditionError("SimSiamHeads: projector output, predictor input and predictor "
                              "output dims must agree");
    }
  }

  friend bool operator==(const SimSiamHeads&, const SimSiamHeads&) = default;
};

enum class Objective { kSimSiam, kSpectral };

struct TrainConfig {
  double lr = 0.05;
  std::size_t batch_size = 128;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::size_t epochs = 30;
  Objective objective = Objective::kSimSiam;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw PreconditionError("TrainConfig: lr must be > 0");
    if (batch_size < 2) throw PreconditionError("TrainConfig: batch_size must be >= 2");
    if (!(weight_decay >= 0.0)) throw PreconditionError("TrainConfig: weight_decay must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw PreconditionError("TrainConfig: momentum must lie in [0, 1)");
    }
  }
};

// Uniform ±sqrt(6 / (fan_in + fan_out)) weights, zero biases.
inline LayeredParams make_mlp(std::span<const std::size_t> dims,
                              std::span<const Activation> activations, RngStream& rng) {
  if (dims.size() < 2 || activations.size() != dims.size() - 1) {
    throw PreconditionError("make_mlp: need k+1 dims and k activations");
  }
  LayeredParams p;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t in = dims[l], out = dims[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    DenseLayer layer{Matrix(out, in), Matrix(1, out), activations[l]};
    for (double& w : layer.weight.data()) w = bound * (2.0 * rng.uniform() - 1.0);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

// Default architecture: encoder in→64→64→32 (relu), projector 32→32
// (identity), predictor 32→16→32 (relu, identity).
struct Architecture {
  std::vector<std::size_t> encoder_hidden{64, 64, 32};
  std::size_t projector_dim = 32;
  std::size_t predictor_hidden = 16;
};

struct Model {
  LayeredParams encoder;
  SimSiamHeads heads;
};

inline Model init_model(std::size_t input_dim, const Architecture& arch, RngStream& rng) {
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), arch.encoder_hidden.begin(), arch.encoder_hidden.end());
  std::vector<Activation> acts(arch.encoder_hidden.size(), Activation::kRelu);
  Model m;
  m.encoder = make_mlp(dims, acts, rng);
  const std::size_t rep = dims.back();
  const std::size_t pd[] = {rep, arch.projector_dim};
  const Activation pa[] = {Activation::kIdentity};
  m.heads.projector = make_mlp(pd, pa, rng);
  const std::size_t qd[] = {arch.projector_dim, arch.predictor_hidden, arch.projector_dim};
  const Activation qa[] = {Activation::kRelu, Activation::kIdentity};
  m.heads.predictor = make_mlp(qd, qa, rng);
  return m;
}

// Batch forward pass: rows of `x` are inputs.
inline Matrix forward(const LayeredParams& params, const Matrix& x) {
  if (!params.layers.empty() && x.cols() != params.in_dim()) {
    throw PreconditionError("forward: input dim " + std::to_string(x.cols()) +
                            " does not match layer 0 input dim " + std::to_string(params.in_dim()));
  }
  Matrix h = x;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const DenseLayer& layer = params.layers[l];
    if (h.cols() != layer.weight.cols()) {
      throw PreconditionError("forward: layer " + std::to_string(l) + " expects input dim " +
                              std::to_string(layer.weight.cols()) + ", got " + std::to_string(h.cols()));
    }
    Matrix next = matmul_nt(h, layer.weight);
    for (std::size_t r = 0; r < next.rows(); ++r) {
      auto row = next.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) {
        row[c] = apply_activation(layer.activation, row[c] + layer.bias(0, c));
      }
    }
    h = std::move(next);
  }
  return h;
}

inline std::vector<double> forward(const LayeredParams& params, std::span<const double> x) {
  const Matrix out = forward(params, Matrix::row_vector(x));
  return {out.data().begin(), out.data().end()};
}

// ---------------------------------------------------------------------------
// Tape-side views of parameters.

struct LayerVars {
  Var weight;
  Var bias;
  Activation activation;
};

inline std::vector<LayerVars> bind(Tape& tape, const LayeredParams& p, bool trainable) {
  std::vector<LayerVars> out;
  out.reserve(p.layers.size());
  for (const auto& l : p.layers) {
    out.push_back({trainable ? tape.variable(l.weight) : tape.constant(l.weight),
                   trainable ? tape.variable(l.bias) : tape.constant(l.bias), l.activation});
  }
  return out;
}

inline Var forward(std::span<const LayerVars> layers, Var x) {
  Var h = x;
  for (const auto& l : layers) h = activate(affine(h, l.weight, l.bias), l.activation);
  return h;
}

// Negative symmetric cosine with stop-gradient:
//   L = -½ mean[cos(p1, sg(z̃2)) + cos(p̃2, sg(z1))]
// z = projector(f(x1)), z̃ = projector(f_view(x2)), p = predictor(z).
inline Var simsiam_loss(Var x1, Var x2, std::span<const LayerVars> f,
                        std::span<const LayerVars> f_view, std::span<const LayerVars> projector,
                        std::span<const LayerVars> predictor) {
  if (x1.value().rows() != x2.value().rows()) {
    throw PreconditionError("simsiam_loss: view batches are not aligned");
  }
  const Var z1 = forward(projector, forward(f, x1));
  const Var z2 = forward(projector, forward(f_view, x2));
  const Var p1 = forward(predictor, z1);
  const Var p2 = forward(predictor, z2);
  const Var c = add(mean(row_cosine(p1, stop_gradient(z2))), mean(row_cosine(p2, stop_gradient(z1))));
  return scale(c, -0.5);
}

inline double simsiam_loss(const Matrix& x1, const Matrix& x2, const LayeredParams& f,
                           const LayeredParams& f_view, const SimSiamHeads& heads) {
  Tape tape;
  const auto fv = bind(tape, f, false);
  const auto gv = bind(tape, f_view, false);
  const auto pv = bind(tape, heads.projector, false);
  const auto qv = bind(tape, heads.predictor, false);
  return simsiam_loss(tape.constant(x1), tape.constant(x2), fv, gv, pv, qv).value()(0, 0);
}

// Spectral contrastive loss on a batch of positive pairs (row i of `x` with
// row i of `x_pos`). Negatives are all non-matching pairs (i, j ≠ i):
//   L = -2 mean_i[u_iᵀ v_i] + mean_{i≠j}[(u_iᵀ v_j)²],  u = f(x), v = f_view(x_pos).
inline Var spectral_loss(Var x, Var x_pos, std::span<const LayerVars> f,
                         std::span<const LayerVars> f_view) {
  const std::size_t n = x.value().rows();
  if (n < 2 || x_pos.value().rows() != n) {
    throw PreconditionError("spectral_loss: need at least one positive and one negative pair "
                            "(batch of >= 2 aligned rows)");
  }
  const Var u = forward(f, x);
  const Var v = forward(f_view, x_pos);
  const Var s = matmul_nt(u, v);
  Tape& t = x.tape();
  const Var eye = t.constant(Matrix::identity(n));
  Matrix off(n, n, 1.0);
  for (std::size_t i = 0; i < n; ++i) off(i, i) = 0.0;
  const Var off_mask = t.constant(std::move(off));
  const Var pos = scale(sum(mul(s, eye)), -2.0 / static_cast<double>(n));
  const Var neg = scale(sum(mul(square(s), off_mask)), 1.0 / static_cast<double>(n * (n - 1)));
  return add(pos, neg);
}

inline double spectral_loss(const Matrix& x, const Matrix& x_pos, const LayeredParams& f,
                            const LayeredParams& f_view) {
  Tape tape;
  const auto fv = bind(tape, f, false);
  const auto gv = bind(tape, f_view, false);
  return spectral_loss(tape.constant(x), tape.constant(x_pos), fv, gv).value()(0, 0);
}

// ---------------------------------------------------------------------------
// Optimizer.

// Momentum SGD with decoupled weight decay:
//   v <- m v + g;  θ <- θ - lr (v + wd θ)
class Sgd {
 public:
  explicit Sgd(const TrainConfig& config) : lr_(config.lr), momentum_(config.momentum), wd_(config.weight_decay) {}

  void step(std::span<Matrix* const> params, std::span<const Matrix> grads) {
    if (params.size() != grads.size()) throw PreconditionError("sgd_step: parameter/gradient count mismatch");
    if (velocity_.empty()) {
      for (Matrix* p : params) velocity_.emplace_back(p->rows(), p->cols());
    }
    if (velocity_.size() != params.size()) throw PreconditionError("sgd_step: parameter list changed");
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& p = *params[i];
      const Matrix& g = grads[i];
      Matrix& v = velocity_[i];
      if (!p.same_shape(g) || !p.same_shape(v)) {
        throw PreconditionError("sgd_step: shape mismatch for parameter " + std::to_string(i));
      }
      auto pd = p.data();
      auto gd = g.data();
      auto vd = v.data();
      for (std::size_t k = 0; k < pd.size(); ++k) {
        vd[k] = momentum_ * vd[k] + gd[k];
        pd[k] -= lr_ * (vd[k] + wd_ * pd[k]);
      }
    }
  }

 private:
  double lr_, momentum_, wd_;
  std::vector<Matrix> velocity_;
};

// Pointers to every weight and bias, encoder layers first then heads.
inline std::vector<Matrix*> parameter_list(LayeredParams& p) {
  std::vector<Matrix*> out;
  for (auto& l : p.layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format (text, one token stream, '\n' line endings):
//
//   SPURLAB-ENCODER
//   format 1
//   layers <L>
//   then for each layer l = 0..L-1:
//     layer <l> <rows> <cols> <activation>
//     <rows> lines of <cols> space-separated weights (row-major)
//     one line of <rows> space-separated biases
//   end
//
// Doubles use the shortest representation that round-trips exactly.

inline constexpr const char* kCheckpointMagic = "SPURLAB-ENCODER";
inline constexpr int kCheckpointVersion = 1;

inline std::string shortest_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_checkpoint(const LayeredParams& p, std::ostream& out) {
  p.validate();
  out << kCheckpointMagic << '\n' << "format " << kCheckpointVersion << '\n' << "layers " << p.depth() << '\n';
  for (std::size_t l = 0; l < p.depth(); ++l) {
    const auto& layer = p.layers[l];
    out << "layer " << l << ' ' << layer.weight.rows() << ' ' << layer.weight.cols() << ' '
        << to_string(layer.activation) << '\n';
    for (std::size_t r = 0; r < layer.weight.rows(); ++r) {
      for (std::size_t c = 0; c < layer.weight.cols(); ++c) {
        if (c) out << ' ';
        out << shortest_double(layer.weight(r, c));
      }
      out << '\n';
    }
    for (std::size_t c = 0; c < layer.bias.cols(); ++c) {
      if (c) out << ' ';
      out << shortest_double(layer.bias(0, c));
    }
    out << '\n';
  }
  out << "end\n";
}

inline void write_checkpoint(const LayeredParams& p, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_checkpoint: cannot open " + path);
  write_checkpoint(p, f);
  if (!f) throw IoError("write_checkpoint: write failed for " + path);
}

inline LayeredParams read_checkpoint(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  auto next_line = [&]() -> std::string& {
    if (!std::getline(in, line)) throw ParseError("unexpected end of checkpoint", lineno + 1);
    ++lineno;
    return line;
  };
  auto doubles = [&](std::size_t count) {
    std::vector<double> v;
    v.reserve(count);
    const std::string& s = next_line();
    const char* p = s.data();
    const char* end = s.data() + s.size();
    while (p < end) {
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      double d = 0.0;
      const auto res = std::from_chars(p, end, d);
      if (res.ec != std::errc()) throw ParseError("malformed number", lineno);
      v.push_back(d);
      p = res.ptr;
    }
    if (v.size() != count) {
      throw ParseError("expected " + std::to_string(count) + " values, got " + std::to_string(v.size()), lineno);
    }
    return v;
  };

  if (next_line() != kCheckpointMagic) throw ParseError("missing SPURLAB-ENCODER magic", lineno);
  int version = 0;
  if (std::sscanf(next_line().c_str(), "format %d", &version) != 1) throw ParseError("missing format line", lineno);
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint format " + std::to_string(version), lineno);
  }
  std::size_t depth = 0;
  {
    std::istringstream ss(next_line());
    std::string kw;
    if (!(ss >> kw >> depth) || kw != "layers") throw ParseError("missing layers line", lineno);
  }
  LayeredParams p;
  for (std::size_t l = 0; l < depth; ++l) {
    std::istringstream ss(next_line());
    std::string kw, act;
    std::size_t idx = 0, rows = 0, cols = 0;
    if (!(ss >> kw >> idx >> rows >> cols >> act) || kw != "layer" || idx != l) {
      throw ParseError("malformed layer header", lineno);
    }
    Activation a{};
    try {
      a = parse_activation(act);
    } catch (const PreconditionError& e) {
      throw ParseError(e.what(), lineno);
    }
    std::vector<double> w;
    w.reserve(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      auto row = doubles(cols);
      w.insert(w.end(), row.begin(), row.end());
    }
    auto b = doubles(rows);
    p.layers.push_back({Matrix(rows, cols, std::move(w)), Matrix(1, rows, std::move(b)), a});
  }
  if (next_line() != "end") throw ParseError("missing end marker", lineno);
  try {
    p.validate();
  } catch (const PreconditionError& e) {
    throw ParseError(e.what(), lineno);
  }
  return p;
}

inline LayeredParams read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_checkpoint: cannot open " + path);
  return read_checkpoint(f);
}

}  // namespace spurlab::encoder
