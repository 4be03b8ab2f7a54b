#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "spurlab/numkit/error.hpp"
#include "spurlab/numkit/matrix.hpp"
#include "spurlab/numkit/rng.hpp"

// Synthetic spurious-correlation data from a two-feature latent model plus
// nuisance dimensions, and the attribute/class-flipping augmentation whose
// connectivity terms are known in closed form.
namespace spurlab::synthgen {

struct LatentSpec {
  double mu_core = 1.0;   // class coordinate is ±mu_core
  double mu_spur = 1.0;   // attribute coordinate is ±mu_spur
  double sigma = 0.1;
  std::size_t d_noise = 0;
  double majority_fraction = 0.5;  // P(a = y)
  std::size_t n_samples = 1000;
  bool mix = false;                 // rotate latents by a fixed orthogonal matrix
  std::uint64_t mix_seed = 0x5eed;  // seeds that matrix

  std::size_t dim() const { return 2 + d_noise; }

  void validate() const {
    if (!(mu_core > 0.0)) throw PreconditionError("LatentSpec: mu_core must be > 0");
    if (!(mu_spur > 0.0)) throw PreconditionError("LatentSpec: mu_spur must be > 0");
    if (!(sigma >= 0.0)) throw PreconditionError("LatentSpec: sigma must be >= 0");
    if (!(majority_fraction >= 0.5 && majority_fraction <= 1.0)) {
      throw PreconditionError("LatentSpec: majority_fraction must lie in [0.5, 1]");
    }
  }
};

struct AugmentationSpec {
  double p_flip_spur = 0.0;
  double p_flip_core = 0.0;
  double jitter_sigma = 0.0;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(p_flip_spur) || !prob(p_flip_core)) {
      throw PreconditionError("AugmentationSpec: flip probabilities must lie in [0, 1]");
    }
    if (!(jitter_sigma >= 0.0)) throw PreconditionError("AugmentationSpec: jitter_sigma must be >= 0");
  }
};

inline int group_of(int y, int a) { return 2 * a + y; }

struct GroupedDataset {
  Matrix x;  // n × d
  std::vector<int> y;
  std::vector<int> a;
  std::vector<int> g;  // 2a + y

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.cols(); }

  std::array<std::size_t, 4> group_counts() const {
    std::array<std::size_t, 4> c{};
    for (int v : g) c[static_cast<std::size_t>(v)]++;
    return c;
  }

  void validate() const {
    const std::size_t n = y.size();
    if (a.size() != n || g.size() != n || x.rows() != n) {
      throw PreconditionError("GroupedDataset: inconsistent lengths");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if ((y[i] != 0 && y[i] != 1) || (a[i] != 0 && a[i] != 1) || g[i] != group_of(y[i], a[i])) {
        throw PreconditionError("GroupedDataset: row " + std::to_string(i) + " has g != 2a + y");
      }
    }
  }

  GroupedDataset subset(std::span<const std::size_t> rows) const {
    GroupedDataset out{Matrix(rows.size(), dim()), {}, {}, {}};
    out.y.reserve(rows.size());
    out.a.reserve(rows.size());
    out.g.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t r = rows[i];
      std::copy(x.row(r).begin(), x.row(r).end(), out.x.row(i).begin());
      out.y.push_back(y[r]);
      out.a.push_back(a[r]);
      out.g.push_back(g[r]);
    }
    return out;
  }

  std::vector<std::size_t> rows_in_group(int group) const {
    std::vector<std::size_t> r;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (g[i] == group) r.push_back(i);
    return r;
  }

  friend bool operator==(const GroupedDataset&, const GroupedDataset&) = default;
};

// Orthogonal Q from modified Gram-Schmidt on a seeded Gaussian matrix.
inline Matrix mixing_matrix(std::size_t d, std::uint64_t seed) {
  RngStream rng(seed, 0x4d4958);
  Matrix q(d, d);
  for (double& v : q.data()) v = rng.normal();
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double proj = 0.0;
      for (std::size_t r = 0; r < d; ++r) proj += q(r, c) * q(r, p);
      for (std::size_t r = 0; r < d; ++r) q(r, c) -= proj * q(r, p);
    }
    double nrm = 0.0;
    for (std::size_t r = 0; r < d; ++r) nrm += q(r, c) * q(r, c);
    nrm = std::sqrt(nrm);
    for (std::size_t r = 0; r < d; ++r) q(r, c) /= nrm;
  }
  return q;
}

// The latent model: input x = Q z when mixing is on, x = z otherwise.
class LatentModel {
 public:
  explicit LatentModel(LatentSpec spec) : spec_(spec) {
    spec_.validate();
    if (spec_.mix) q_ = mixing_matrix(spec_.dim(), spec_.mix_seed);
  }

  const LatentSpec& spec() const { return spec_; }

  void to_input(std::span<const double> z, std::span<double> x) const {
    if (!spec_.mix) {
      std::copy(z.begin(), z.end(), x.begin());
      return;
    }
    for (std::size_t r = 0; r < z.size(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < z.size(); ++c) s += q_(r, c) * z[c];
      x[r] = s;
    }
  }

  void to_latent(std::span<const double> x, std::span<double> z) const {
    if (!spec_.mix) {
      std::copy(x.begin(), x.end(), z.begin());
      return;
    }
    for (std::size_t c = 0; c < x.size(); ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < x.size(); ++r) s += q_(r, c) * x[r];
      z[c] = s;
    }
  }

  double core_coordinate(int y, RngStream& rng) const {
    return spec_.mu_core * (2.0 * y - 1.0) + spec_.sigma * rng.normal();
  }
  double spur_coordinate(int a, RngStream& rng) const {
    return spec_.mu_spur * (2.0 * a - 1.0) + spec_.sigma * rng.normal();
  }

 private:
  LatentSpec spec_;
  Matrix q_;
};

inline constexpr std::uint64_t kGenerateStream = 0x47454e;

// y ~ Bernoulli(½); a = y w.p. majority_fraction; z0 = ±mu_core + noise,
// z1 = ±mu_spur + noise, the rest pure noise; x = Q z.
inline GroupedDataset generate(const LatentSpec& spec, std::uint64_t seed) {
  const LatentModel model(spec);
  RngStream rng(seed, kGenerateStream);
  const std::size_t n = spec.n_samples, d = spec.dim();
  GroupedDataset ds{Matrix(n, d), std::vector<int>(n), std::vector<int>(n), std::vector<int>(n)};
  std::vector<double> z(d);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = rng.bernoulli(0.5) ? 1 : 0;
    const int a = rng.bernoulli(spec.majority_fraction) ? y : 1 - y;
    z[0] = model.core_coordinate(y, rng);
    z[1] = model.spur_coordinate(a, rng);
    for (std::size_t k = 2; k < d; ++k) z[k] = spec.sigma * rng.normal();
    model.to_input(z, ds.x.row(i));
    ds.y[i] = y;
    ds.a[i] = a;
    ds.g[i] = group_of(y, a);
  }
  return ds;
}

struct AugmentedSample {
  std::vector<double> x;
  int y = 0;  // post-augmentation semantic labels
  int a = 0;
};

// One augmentation draw. With probability p_flip_spur the attribute coordinate
// is redrawn from the opposite attribute's marginal, independently with
// probability p_flip_core the class coordinate is redrawn from the opposite
// class's marginal; then isotropic jitter is added. Draw order per call:
// spur flip, core flip, redrawn coordinates, jitter.
inline AugmentedSample augment(std::span<const double> x, int y, int a, const LatentModel& model,
                               const AugmentationSpec& aug, RngStream& rng) {
  AugmentedSample out{std::vector<double>(x.begin(), x.end()), y, a};
  const bool flip_spur = rng.bernoulli(aug.p_flip_spur);
  const bool flip_core = rng.bernoulli(aug.p_flip_core);
  if (flip_spur || flip_core) {
    std::vector<double> z(x.size());
    model.to_latent(x, z);
    if (flip_spur) {
      out.a = 1 - a;
      z[1] = model.spur_coordinate(out.a, rng);
    }
    if (flip_core) {
      out.y = 1 - y;
      z[0] = model.core_coordinate(out.y, rng);
    }
    model.to_input(z, out.x);
  }
  if (aug.jitter_sigma > 0.0) {
    for (double& v : out.x) v += aug.jitter_sigma * rng.normal();
  }
  return out;
}

// Augments every row once; the returned dataset carries post-augmentation labels.
inline GroupedDataset augment_dataset(const GroupedDataset& ds, const LatentModel& model,
                                      const AugmentationSpec& aug, RngStream& rng) {
  GroupedDataset out{Matrix(ds.size(), ds.dim()), std::vector<int>(ds.size()),
                     std::vector<int>(ds.size()), std::vector<int>(ds.size())};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    AugmentedSample s = augment(ds.x.row(i), ds.y[i], ds.a[i], model, aug, rng);
    std::copy(s.x.begin(), s.x.end(), out.x.row(i).begin());
    out.y[i] = s.y;
    out.a[i] = s.a;
    out.g[i] = group_of(s.y, s.a);
  }
  return out;
}

struct OracleConnectivity {
  double c_spur = 0.0;  // same attribute, class changed: p_core (1 - p_spur)
  double c_inv = 0.0;   // same class, attribute changed: p_spur (1 - p_core)
  double c_opp = 0.0;   // both changed: p_spur p_core
  // Φ(-mu/σ) per axis: chance a clean sample already sits on the wrong side
  // of its own axis midpoint. Zero when σ = 0.
  double bayes_core = 0.0;
  double bayes_spur = 0.0;
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline OracleConnectivity oracle_connectivity(const LatentSpec& spec, const AugmentationSpec& aug) {
  spec.validate();
  aug.validate();
  const double ps = aug.p_flip_spur, pc = aug.p_flip_core;
  OracleConnectivity o{pc * (1.0 - ps), ps * (1.0 - pc), ps * pc, 0.0, 0.0};
  if (spec.sigma > 0.0) {
    o.bayes_core = normal_cdf(-spec.mu_core / spec.sigma);
    o.bayes_spur = normal_cdf(-spec.mu_spur / spec.sigma);
  }
  return o;
}

// ---------------------------------------------------------------------------
// CSV: header `y,a,g,x0,...,x{d-1}`, one row per sample, doubles written with
// 17 significant digits.

inline std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline void write_dataset(const GroupedDataset& ds, std::ostream& out) {
  ds.validate();
  out << "y,a,g";
  for (std::size_t c = 0; c < ds.dim(); ++c) out << ",x" << c;
  out << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.y[i] << ',' << ds.a[i] << ',' << ds.g[i];
    for (double v : ds.x.row(i)) out << ',' << format_double(v);
    out << '\n';
  }
}

inline void write_dataset(const GroupedDataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_dataset: cannot open " + path);
  write_dataset(ds, f);
  if (!f) throw IoError("write_dataset: write failed for " + path);
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename T>
T parse_field(std::string_view s, std::size_t line, const char* what) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError(std::string("malformed ") + what + " '" + std::string(s) + "'", line);
  }
  return v;
}

}  // namespace detail

inline GroupedDataset read_dataset(std::istream& in) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line.empty()) throw ParseError("empty file, expected header", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_commas(line);
  if (header.size() < 3 || header[0] != "y" || header[1] != "a" || header[2] != "g") {
    throw ParseError("header must start with y,a,g", lineno);
  }
  const std::size_t d = header.size() - 3;
  for (std::size_t c = 0; c < d; ++c) {
    if (header[3 + c] != "x" + std::to_string(c)) {
      throw ParseError("header column " + std::to_string(3 + c) + " must be x" + std::to_string(c),
                       lineno);
    }
  }
  std::vector<double> values;
  GroupedDataset ds;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_commas(line);
    if (fields.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields (from header), got " +
                           std::to_string(fields.size()),
                       lineno);
    }
    const int y = detail::parse_field<int>(fields[0], lineno, "y");
    const int a = detail::parse_field<int>(fields[1], lineno, "a");
    const int g = detail::parse_field<int>(fields[2], lineno, "g");
    if ((y != 0 && y != 1) || (a != 0 && a != 1)) throw ParseError("labels must be 0 or 1", lineno);
    if (g != group_of(y, a)) throw ParseError("g must equal 2a + y", lineno);
    ds.y.push_back(y);
    ds.a.push_back(a);
    ds.g.push_back(g);
    for (std::size_t c = 0; c < d; ++c) values.push_back(detail::parse_field<double>(fields[3 + c], lineno, "value"));
  }
  ds.x = Matrix(ds.y.size(), d, std::move(values));
  return ds;
}

inline GroupedDataset read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_dataset: cannot open " + path);
  return read_dataset(f);
}

}  // namespace spurlab::synthgen
