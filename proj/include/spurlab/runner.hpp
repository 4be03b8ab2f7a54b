#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "spurlab/encoder.hpp"
#include "spurlab/eval.hpp"
#include "spurlab/latetvg.hpp"
#include "spurlab/numkit/error.hpp"
#include "spurlab/numkit/sym_eig.hpp"
#include "spurlab/synthgen.hpp"
#include "spurlab/toygraph.hpp"

// Config-driven experiment runner behind the `spurlab` executable.
//
// A run config is one JSON object. Every section is optional; a command reads
// the sections it needs and every present section is validated strictly, so a
// misspelled key anywhere fails with its dotted path. See README for the
// grammar. Outputs are CSV files plus `config.json` (the resolved config) and
// `manifest.json` (hashes, checksums, wall-clock). CSV bytes depend only on
// the resolved config.
namespace spurlab::runner {

using Json = nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitNumeric = 3, kExitIo = 4 };

// ---------------------------------------------------------------------------
// Hashing.

// JSON integers written from C++ are signed; accept any integer >= 0.
inline bool is_count(const Json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256: digest failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return out.str();
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Strict section reader.

class Section {
 public:
  Section(const Json* node, std::string path) : node_(node), path_(std::move(path)) {
    if (node_ && !node_->is_object()) throw ConfigError(path_, "expected an object");
  }

  bool present() const { return node_ != nullptr; }
  const std::string& path() const { return path_; }

  double number(const std::string& key, double fallback) {
    const Json* v = take(key);
    if (!v) return fallback;
    if (!v->is_number()) throw ConfigError(at(key), "expected a number");
    return v->get<double>();
  }

  std::uint64_t u64(const std::string& key, std::uint64_t fallback) {
    const Json* v = take(key);
    if (!v) return fallback;
    if (!is_count(*v)) throw ConfigError(at(key), "expected a non-negative integer");
    return v->get<std::uint64_t>();
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    return static_cast<std::size_t>(u64(key, fallback));
  }

  bool flag(const std::string& key, bool fallback) {
    const Json* v = take(key);
    if (!v) return fallback;
    if (!v->is_boolean()) throw ConfigError(at(key), "expected true or false");
    return v->get<bool>();
  }

  std::string text(const std::string& key, const std::string& fallback) {
    const Json* v = take(key);
    if (!v) return fallback;
    if (!v->is_string()) throw ConfigError(at(key), "expected a string");
    return v->get<std::string>();
  }

  const Json* raw(const std::string& key) { return take(key); }

  Section child(const std::string& key) { return Section(take(key), at(key)); }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  // Rejects keys that no accessor asked for.
  void finish() const {
    if (!node_) return;
    for (const auto& [k, _] : node_->items()) {
      if (!seen_.count(k)) throw ConfigError(at(k), "unknown key");
    }
  }

 private:
  const Json* take(const std::string& key) {
    seen_.insert(key);
    if (!node_) return nullptr;
    const auto it = node_->find(key);
    return it == node_->end() ? nullptr : &*it;
  }

  const Json* node_;
  std::string path_;
  std::set<std::string> seen_;
};

// Runs `validate` and rethrows its message as a config error at `path`.
template <typename F>
void checked(const std::string& path, F&& validate) {
  try {
    validate();
  } catch (const PreconditionError& e) {
    throw ConfigError(path, e.what());
  }
}

// ---------------------------------------------------------------------------
// Typed sections.

struct ToyGraphSection {
  toygraph::ToyGraphSpec spec;
  double tolerance = 1e-9;
};

inline ToyGraphSection parse_toygraph(Section s) {
  ToyGraphSection t;
  t.spec.rho = s.number("rho", 0.0);
  t.spec.c_spur = s.number("c_spur", 0.0);
  t.spec.c_inv = s.number("c_inv", 0.0);
  t.spec.c_opp = s.number("c_opp", 0.0);
  t.spec.n = s.count("n", 1);
  t.tolerance = s.number("tolerance", 1e-9);
  s.finish();
  checked(s.path(), [&] { t.spec.validate(); });
  if (!(t.tolerance > 0.0)) throw ConfigError(s.at("tolerance"), "must be > 0");
  return t;
}

inline synthgen::LatentSpec parse_latent(Section s) {
  synthgen::LatentSpec l;
  l.mu_core = s.number("mu_core", l.mu_core);
  l.mu_spur = s.number("mu_spur", l.mu_spur);
  l.sigma = s.number("sigma", l.sigma);
  l.d_noise = s.count("d_noise", l.d_noise);
  l.majority_fraction = s.number("majority_fraction", l.majority_fraction);
  l.n_samples = s.count("n_samples", l.n_samples);
  l.mix = s.flag("mix", l.mix);
  l.mix_seed = s.u64("mix_seed", l.mix_seed);
  s.finish();
  checked(s.path(), [&] { l.validate(); });
  return l;
}

inline synthgen::AugmentationSpec parse_augmentation(Section s) {
  synthgen::AugmentationSpec a;
  a.p_flip_spur = s.number("p_flip_spur", 0.0);
  a.p_flip_core = s.number("p_flip_core", 0.0);
  a.jitter_sigma = s.number("jitter_sigma", 0.0);
  s.finish();
  checked(s.path(), [&] { a.validate(); });
  return a;
}

enum class Method { kBase, kLateTvg };

inline std::string_view to_string(Method m) { return m == Method::kBase ? "base" : "latetvg"; }

struct TrainSection {
  Method method = Method::kLateTvg;
  encoder::TrainConfig config;
  encoder::Architecture architecture;
  latetvg::Strategy resample = latetvg::Strategy::kOriginal;
  std::optional<std::array<double, 4>> resample_target;
  bool log_timing = false;
};

inline TrainSection parse_train(Section s) {
  TrainSection t;
  const std::string method = s.text("method", "latetvg");
  if (method == "base") t.method = Method::kBase;
  else if (method != "latetvg") throw ConfigError(s.at("method"), "expected \"base\" or \"latetvg\"");
  const std::string objective = s.text("objective", "simsiam");
  if (objective == "spectral") t.config.objective = encoder::Objective::kSpectral;
  else if (objective != "simsiam") throw ConfigError(s.at("objective"), "expected \"simsiam\" or \"spectral\"");
  t.config.lr = s.number("lr", t.config.lr);
  t.config.batch_size = s.count("batch_size", t.config.batch_size);
  t.config.weight_decay = s.number("weight_decay", t.config.weight_decay);
  t.config.momentum = s.number("momentum", t.config.momentum);
  t.config.epochs = s.count("epochs", t.config.epochs);
  if (const Json* h = s.raw("encoder_hidden")) {
    if (!h->is_array() || h->empty()) throw ConfigError(s.at("encoder_hidden"), "expected a non-empty array");
    t.architecture.encoder_hidden.clear();
    for (const auto& v : *h) {
      if (!is_count(v) || v.get<std::size_t>() == 0) {
        throw ConfigError(s.at("encoder_hidden"), "widths must be positive integers");
      }
      t.architecture.encoder_hidden.push_back(v.get<std::size_t>());
    }
  }
  t.architecture.projector_dim = s.count("projector_dim", t.architecture.projector_dim);
  t.architecture.predictor_hidden = s.count("predictor_hidden", t.architecture.predictor_hidden);
  checked(s.at("resample"), [&] { t.resample = latetvg::parse_strategy(s.text("resample", "original")); });
  if (const Json* w = s.raw("resample_target")) {
    if (!w->is_array() || w->size() != 4) throw ConfigError(s.at("resample_target"), "expected 4 weights");
    std::array<double, 4> target{};
    for (std::size_t g = 0; g < 4; ++g) {
      if (!(*w)[g].is_number()) throw ConfigError(s.at("resample_target"), "expected numbers");
      target[g] = (*w)[g].get<double>();
    }
    t.resample_target = target;
  }
  t.log_timing = s.flag("log_timing", false);
  s.finish();
  checked(s.path(), [&] { t.config.validate(); });
  if (t.architecture.projector_dim == 0 || t.architecture.predictor_hidden == 0) {
    throw ConfigError(s.path(), "head widths must be positive");
  }
  return t;
}

inline latetvg::PruneSpec parse_prune(Section s) {
  latetvg::PruneSpec p;
  p.layer_threshold = s.count("layer_threshold", p.layer_threshold);
  p.prune_rate = s.number("prune_rate", p.prune_rate);
  const std::string scope = s.text("scope", "global");
  if (scope == "per-layer") p.scope = latetvg::PruneScope::kPerLayer;
  else if (scope != "global") throw ConfigError(s.at("scope"), "expected \"global\" or \"per-layer\"");
  p.refresh_period = s.count("refresh_period", p.refresh_period);
  const std::string pool = s.text("pool", "prunable");
  if (pool == "all") p.pool = latetvg::RankPool::kAll;
  else if (pool != "prunable") throw ConfigError(s.at("pool"), "expected \"prunable\" or \"all\"");
  const std::string view = s.text("view_gradient", "shared");
  if (view == "detach") p.view_gradient = latetvg::ViewGradient::kDetach;
  else if (view != "shared") throw ConfigError(s.at("view_gradient"), "expected \"shared\" or \"detach\"");
  s.finish();
  if (!(p.prune_rate >= 0.0 && p.prune_rate < 1.0)) throw ConfigError(s.at("prune_rate"), "must lie in [0, 1)");
  if (p.refresh_period == 0) throw ConfigError(s.at("refresh_period"), "must be >= 1");
  return p;
}

struct ProbeSection {
  std::vector<eval::ProbeGridPoint> grid = eval::default_probe_grid();
  double minority_weight = 0.5;
  std::size_t pool_samples = 4000;
  std::size_t downstream_total = 1000;
  std::size_t test_samples = 2000;
  double test_majority_fraction = 0.5;
  std::optional<std::string> checkpoint;
};

inline ProbeSection parse_probe(Section s) {
  ProbeSection p;
  if (const Json* g = s.raw("grid")) {
    if (!g->is_array() || g->empty()) throw ConfigError(s.at("grid"), "expected a non-empty array");
    p.grid.clear();
    for (std::size_t i = 0; i < g->size(); ++i) {
      Section item(&(*g)[i], s.at("grid") + "[" + std::to_string(i) + "]");
      eval::ProbeGridPoint pt;
      checked(item.at("reg"), [&] { pt.reg = eval::parse_regularization(item.text("reg", "l2")); });
      pt.strength = item.number("strength", 0.0);
      item.finish();
      if (!(pt.strength >= 0.0)) throw ConfigError(item.at("strength"), "must be >= 0");
      p.grid.push_back(pt);
    }
  }
  p.minority_weight = s.number("minority_weight", p.minority_weight);
  p.pool_samples = s.count("pool_samples", p.pool_samples);
  p.downstream_total = s.count("downstream_total", p.downstream_total);
  p.test_samples = s.count("test_samples", p.test_samples);
  p.test_majority_fraction = s.number("test_majority_fraction", p.test_majority_fraction);
  const std::string ckpt = s.text("checkpoint", "");
  if (!ckpt.empty()) p.checkpoint = ckpt;
  s.finish();
  if (!(p.minority_weight >= 0.0 && p.minority_weight <= 1.0)) {
    throw ConfigError(s.at("minority_weight"), "must lie in [0, 1]");
  }
  if (!(p.test_majority_fraction >= 0.5 && p.test_majority_fraction <= 1.0)) {
    throw ConfigError(s.at("test_majority_fraction"), "must lie in [0.5, 1]");
  }
  if (p.downstream_total < 10) throw ConfigError(s.at("downstream_total"), "must be >= 10");
  return p;
}

struct ConnectivitySection {
  std::size_t n_samples = 2000;
  double majority_fraction = 0.5;
  bool input_space = true;
  std::map<std::string, std::string> checkpoints;  // run id → path
};

inline ConnectivitySection parse_connectivity(Section s) {
  ConnectivitySection c;
  c.n_samples = s.count("n_samples", c.n_samples);
  c.majority_fraction = s.number("majority_fraction", c.majority_fraction);
  bool representation = false;
  if (const Json* sp = s.raw("spaces")) {
    if (!sp->is_array() || sp->empty()) throw ConfigError(s.at("spaces"), "expected a non-empty array");
    c.input_space = false;
    for (const auto& v : *sp) {
      const std::string name = v.is_string() ? v.get<std::string>() : "";
      if (name == "input") c.input_space = true;
      else if (name == "representation") representation = true;
      else throw ConfigError(s.at("spaces"), "entries must be \"input\" or \"representation\"");
    }
  }
  if (const Json* ck = s.raw("checkpoints")) {
    if (!ck->is_object()) throw ConfigError(s.at("checkpoints"), "expected an object of run id to path");
    for (const auto& [k, v] : ck->items()) {
      if (!v.is_string()) throw ConfigError(s.at("checkpoints") + "." + k, "expected a path string");
      c.checkpoints[k] = v.get<std::string>();
    }
  }
  s.finish();
  if (representation && c.checkpoints.empty()) {
    throw ConfigError(s.at("checkpoints"), "required when the representation space is requested");
  }
  if (!representation) c.checkpoints.clear();
  if (!(c.majority_fraction >= 0.5 && c.majority_fraction <= 1.0)) {
    throw ConfigError(s.at("majority_fraction"), "must lie in [0.5, 1]");
  }
  return c;
}

enum class SweepAxis { kMinorityWeight, kPruneRate, kPruneLayer, kStrategy };

inline std::string_view to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::kMinorityWeight: return "minority_weight";
    case SweepAxis::kPruneRate: return "prune_rate";
    case SweepAxis::kPruneLayer: return "prune_layer";
    case SweepAxis::kStrategy: return "strategy";
  }
  return "?";
}

struct SweepSection {
  SweepAxis axis = SweepAxis::kMinorityWeight;
  std::vector<Json> values;
  std::vector<std::uint64_t> seeds;
};

inline SweepSection parse_sweep(Section s, std::uint64_t default_seed) {
  SweepSection w;
  const std::string axis = s.text("axis", "");
  if (axis == "minority_weight") w.axis = SweepAxis::kMinorityWeight;
  else if (axis == "prune_rate") w.axis = SweepAxis::kPruneRate;
  else if (axis == "prune_layer") w.axis = SweepAxis::kPruneLayer;
  else if (axis == "strategy") w.axis = SweepAxis::kStrategy;
  else throw ConfigError(s.at("axis"), "expected minority_weight, prune_rate, prune_layer or strategy");
  const Json* v = s.raw("values");
  if (!v || !v->is_array() || v->empty()) throw ConfigError(s.at("values"), "empty grid");
  for (const auto& item : *v) {
    const bool ok = w.axis == SweepAxis::kStrategy     ? item.is_string()
                    : w.axis == SweepAxis::kPruneLayer ? is_count(item)
                                                       : item.is_number();
    if (!ok) throw ConfigError(s.at("values"), "value " + item.dump() + " has the wrong type for this axis");
    if (w.axis == SweepAxis::kStrategy) {
      checked(s.at("values"), [&] { latetvg::parse_strategy(item.get<std::string>()); });
    }
    w.values.push_back(item);
  }
  if (const Json* sd = s.raw("seeds")) {
    if (!sd->is_array() || sd->empty()) throw ConfigError(s.at("seeds"), "expected a non-empty array");
    for (const auto& x : *sd) {
      if (!is_count(x)) throw ConfigError(s.at("seeds"), "seeds must be non-negative integers");
      w.seeds.push_back(x.get<std::uint64_t>());
    }
  } else {
    w.seeds.push_back(default_seed);
  }
  s.finish();
  return w;
}

// ---------------------------------------------------------------------------
// Run config.

struct RunConfig {
  Json raw = Json::object();
  std::string command;
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  // The config with command, seed and output_dir resolved; re-running it
  // reproduces the same CSV bytes.
  Json resolved() const {
    Json j = raw;
    j["command"] = command;
    j["seed"] = seed;
    j["output_dir"] = output_dir;
    return j;
  }

  Section section(const std::string& key) const {
    const auto it = raw.find(key);
    return Section(it == raw.end() ? nullptr : &*it, key);
  }
};

inline const std::set<std::string>& known_commands() {
  static const std::set<std::string> c{"spectrum", "gen", "connectivity", "train", "probe", "sweep"};
  return c;
}

// Validates every present section; unknown top-level keys are rejected.
inline RunConfig parse_config(const Json& j, const std::string& command) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  RunConfig c;
  c.raw = j;
  Section root(&c.raw, "");
  const std::string stored = root.text("command", command);
  if (!known_commands().count(command)) throw ConfigError("command", "unknown command '" + command + "'");
  if (stored != command) {
    throw ConfigError("command", "config was written for '" + stored + "', invoked as '" + command + "'");
  }
  c.command = command;
  c.seed = root.u64("seed", 0);
  c.output_dir = root.text("output_dir", "out");
  if (root.raw("toygraph")) parse_toygraph(c.section("toygraph"));
  if (root.raw("latent")) parse_latent(c.section("latent"));
  if (root.raw("augmentation")) parse_augmentation(c.section("augmentation"));
  if (root.raw("train")) parse_train(c.section("train"));
  if (root.raw("prune")) parse_prune(c.section("prune"));
  if (root.raw("probe")) parse_probe(c.section("probe"));
  if (root.raw("connectivity")) parse_connectivity(c.section("connectivity"));
  if (root.raw("sweep")) parse_sweep(c.section("sweep"), c.seed);
  root.finish();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path, const std::string& command) {
  const std::string text = read_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string(), std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j, command);
}

// ---------------------------------------------------------------------------
// Formatting.

// Shortest text that round-trips to the same double.
inline std::string num(double v) { return std::isnan(v) ? "NA" : encoder::shortest_double(v); }
inline std::string boolean(bool b) { return b ? "true" : "false"; }

// Commas and newlines would break a CSV cell.
inline std::string cell(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

inline constexpr const char* kGroupMetricsHeader =
    "run_id,seed,method,prune_layer,prune_rate,minority_weight,avg_acc,worst_group_acc,acc_g0,acc_g1,acc_g2,acc_g3";
inline constexpr const char* kConnectivityHeader = "run_id,space,pair,relation,estimate";

struct MetricsRow {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string method;
  std::optional<std::size_t> prune_layer;
  std::optional<double> prune_rate;
  double minority_weight = 0.0;
  std::optional<eval::GroupReport> report;

  std::string csv() const {
    std::ostringstream o;
    o << cell(run_id) << ',' << seed << ',' << method << ','
      << (prune_layer ? std::to_string(*prune_layer) : std::string("NA")) << ','
      << (prune_rate ? num(*prune_rate) : std::string("NA")) << ',' << num(minority_weight);
    if (report) {
      o << ',' << num(report->average) << ',' << num(report->worst_group);
      for (double a : report->per_group_accuracy) o << ',' << num(a);
    } else {
      o << ",NA,NA,NA,NA,NA,NA";
    }
    return o.str();
  }
};

inline void connectivity_rows(std::ostream& o, const std::string& run_id, const std::string& space,
                              const eval::ConnectivityReport& r) {
  for (std::size_t k = 0; k < eval::kGroupPairs.size(); ++k) {
    o << cell(run_id) << ',' << space << ',' << eval::pair_name(k) << ','
      << toygraph::to_string(eval::pair_relation(k)) << ',' << num(r.pairwise[k]) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Experiment pipeline shared by train, probe and sweep.

// Seed tags: every random quantity in a run comes from its own derived seed.
inline constexpr std::uint64_t kTagTrainData = 1, kTagResample = 2, kTagTrain = 3, kTagPool = 4,
                               kTagDownstream = 5, kTagTest = 6, kTagSelect = 7, kTagConnectivity = 8;

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return RngStream(seed, 0x52554e00 + tag).next_u64();
}

struct Experiment {
  synthgen::LatentSpec latent;
  synthgen::AugmentationSpec augmentation;
  TrainSection train;
  latetvg::PruneSpec prune;
  ProbeSection probe;
  ConnectivitySection connectivity;

  static Experiment from(const RunConfig& c) {
    Experiment e;
    e.latent = parse_latent(c.section("latent"));
    e.augmentation = parse_augmentation(c.section("augmentation"));
    e.train = parse_train(c.section("train"));
    e.prune = parse_prune(c.section("prune"));
    e.probe = parse_probe(c.section("probe"));
    e.connectivity = parse_connectivity(c.section("connectivity"));
    return e;
  }

  MetricsRow row_template(const std::string& run_id, std::uint64_t seed) const {
    MetricsRow r;
    r.run_id = run_id;
    r.seed = seed;
    r.method = std::string(to_string(train.method));
    if (train.method == Method::kLateTvg) {
      r.prune_layer = prune.layer_threshold;
      r.prune_rate = prune.prune_rate;
    }
    r.minority_weight = probe.minority_weight;
    return r;
  }
};

inline synthgen::GroupedDataset training_set(const Experiment& e, std::uint64_t seed) {
  const auto ds = synthgen::generate(e.latent, derive_seed(seed, kTagTrainData));
  return latetvg::resample(ds, e.train.resample, e.train.resample_target, derive_seed(seed, kTagResample));
}

inline latetvg::TrainResult run_training(const Experiment& e, std::uint64_t seed) {
  const auto ds = training_set(e, seed);
  encoder::TrainConfig cfg = e.train.config;
  cfg.seed = derive_seed(seed, kTagTrain);
  latetvg::TrainOptions opt{e.train.architecture, e.train.log_timing};
  const synthgen::LatentModel model(e.latent);
  if (e.train.method == Method::kBase) return latetvg::train_base(ds, model, e.augmentation, cfg, opt);
  return latetvg::train_latetvg(ds, model, e.augmentation, e.prune, cfg, opt);
}

struct DownstreamData {
  synthgen::GroupedDataset train, test;
};

inline DownstreamData downstream_data(const Experiment& e, std::uint64_t seed) {
  synthgen::LatentSpec pool = e.latent;
  pool.n_samples = e.probe.pool_samples;
  synthgen::LatentSpec test = e.latent;
  test.n_samples = e.probe.test_samples;
  test.majority_fraction = e.probe.test_majority_fraction;
  return {eval::build_downstream_set(synthgen::generate(pool, derive_seed(seed, kTagPool)), e.probe.minority_weight,
                                     e.probe.downstream_total, derive_seed(seed, kTagDownstream)),
          synthgen::generate(test, derive_seed(seed, kTagTest))};
}

// Probe-grid selection on frozen representations of `enc` (empty = identity).
inline eval::ProbeSelection run_probe(const Experiment& e, const encoder::LayeredParams& enc, std::uint64_t seed) {
  const DownstreamData d = downstream_data(e, seed);
  const Matrix tr = eval::extract_representations(enc, d.train);
  const Matrix te = eval::extract_representations(enc, d.test);
  return eval::select_probe(tr, d.train.y, d.train.g, te, d.test.y, d.test.g, e.probe.grid,
                            derive_seed(seed, kTagSelect));
}

inline synthgen::GroupedDataset connectivity_set(const Experiment& e, std::uint64_t seed) {
  synthgen::LatentSpec s = e.latent;
  s.n_samples = e.connectivity.n_samples;
  s.majority_fraction = e.connectivity.majority_fraction;
  return synthgen::generate(s, derive_seed(seed, kTagConnectivity));
}

// ---------------------------------------------------------------------------
// Commands.

struct Context {
  RunConfig config;
  std::filesystem::path out;
  std::size_t threads = 1;
  std::ostream* log = nullptr;
  std::vector<std::string> files;
  std::vector<std::uint64_t> seeds;

  std::ostream& out_stream() { return *log; }

  void emit(const std::string& name, const std::string& content) {
    write_file(out / name, content);
    if (std::find(files.begin(), files.end(), name) == files.end()) files.push_back(name);
  }
};

// Returns kExitOk or kExitNumeric; errors propagate as exceptions.
inline int cmd_spectrum(Context& ctx) {
  const ToyGraphSection t = parse_toygraph(ctx.config.section("toygraph"));
  const auto& spec = t.spec;
  std::ostream& log = ctx.out_stream();
  const toygraph::ToySpectrum closed = toygraph::closed_form_spectrum(spec);
  const SymEig eig = sym_eig(toygraph::build_adjacency(spec));
  const auto expected = closed.all_values();

  std::ostringstream csv;
  csv << "index,closed_form,numeric,abs_diff\n";
  double worst = 0.0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const double diff = std::abs(expected[i] - eig.values[i]);
    worst = std::max(worst, diff);
    csv << i << ',' << num(expected[i]) << ',' << num(eig.values[i]) << ',' << num(diff) << '\n';
  }
  ctx.emit("spectrum.csv", csv.str());
  log << "spectrum (n=" << spec.n << "): sum " << closed.lambda_sum << ", attr " << closed.lambda_attr
      << ", class " << closed.lambda_class << ", residual " << closed.lambda_residual << ", zero x"
      << closed.zero_multiplicity << "\n";
  log << "max |closed form - numeric| = " << worst << " (tolerance " << t.tolerance << ")\n";
  if (!spec.lemma_conditions_hold()) log << "note: lemma conditions do not hold for this spec\n";
  const double top = std::max(std::abs(closed.lambda_sum), 1e-300);
  const bool degenerate = std::abs(closed.lambda_attr - closed.lambda_class) <= 1e-12 * top ||
                          std::abs(closed.lambda_class - closed.lambda_residual) <= 1e-12 * top ||
                          std::abs(closed.lambda_attr - closed.lambda_residual) <= 1e-12 * top;
  if (degenerate) {
    log << "warning: degenerate spectrum, repeated eigenvalues below lambda_1 make the attribute/class axes "
           "non-unique\n";
  }

  const toygraph::FeatureMargins m = toygraph::feature_margins(spec);  // names a negative eigenvalue
  const toygraph::FeatureMargins printed = toygraph::printed_lemma_margins(spec);
  const auto emb = toygraph::spectral_embedding(spec, 3);
  const auto labels = toygraph::row_labels(spec);
  const auto groups = toygraph::row_groups(spec);
  const auto majority = toygraph::max_margin_probe(emb.features, labels, groups, toygraph::majority_groups());
  const double minority_acc = 0.5 * (majority.group_accuracy[1] + majority.group_accuracy[2]);
  std::vector<int> class_plus(labels.begin(), labels.end());
  const auto axis = toygraph::pattern_axis(emb.features, class_plus);
  const auto all = toygraph::max_margin_probe(emb.features, labels, groups, {0, 1, 2, 3});
  const double class_cos = std::abs(dot(all.weight, axis)) / std::max(norm2(all.weight), 1e-300);

  std::ostringstream sum;
  sum << "quantity,value\n"
      << "b_sp," << num(m.b_sp) << '\n'
      << "b_inv," << num(m.b_inv) << '\n'
      << "printed_b_sp," << num(printed.b_sp) << '\n'
      << "printed_b_inv," << num(printed.b_inv) << '\n'
      << "minority_acc_majority_trained," << num(minority_acc) << '\n'
      << "tie_warning," << boolean(majority.tie_warning) << '\n'
      << "class_axis_cosine_all_groups," << num(class_cos) << '\n'
      << "lemma_conditions_hold," << boolean(spec.lemma_conditions_hold()) << '\n'
      << "degenerate_spectrum," << boolean(degenerate) << '\n'
      << "max_abs_diff," << num(worst) << '\n';
  ctx.emit("spectrum_summary.csv", sum.str());
  log << "margins: B_sp = " << m.b_sp << ", B_inv = " << m.b_inv << " (printed variant: " << printed.b_sp << ", "
      << printed.b_inv << ")\n";
  log << "max-margin probe on majority groups: minority accuracy " << minority_acc
      << (majority.tie_warning ? " (boundary tie)" : "") << "\n";
  log << "all-groups probe |cos| with class axis: " << class_cos << "\n";
  if (worst > t.tolerance) {
    log << "FAIL: numeric spectrum disagrees with the closed form by " << worst << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

inline int cmd_gen(Context& ctx) {
  const auto latent = parse_latent(ctx.config.section("latent"));
  const auto ds = synthgen::generate(latent, ctx.config.seed);
  std::ostringstream csv;
  synthgen::write_dataset(ds, csv);
  ctx.emit("dataset.csv", csv.str());
  const auto c = ds.group_counts();
  ctx.out_stream() << "generated " << ds.size() << " rows, dim " << ds.dim() << ", group counts " << c[0] << '/'
                   << c[1] << '/' << c[2] << '/' << c[3] << "\n";
  return kExitOk;
}

inline int cmd_connectivity(Context& ctx) {
  const Experiment e = Experiment::from(ctx.config);
  std::ostream& log = ctx.out_stream();
  const auto ds = connectivity_set(e, ctx.config.seed);
  const synthgen::LatentModel model(e.latent);
  const std::uint64_t est_seed = derive_seed(ctx.config.seed, kTagConnectivity + 100);

  std::ostringstream pairs, summary;
  pairs << kConnectivityHeader << '\n';
  summary << "run_id,space,c_spur_avg,c_inv_avg,c_opp_avg,spur_ge_inv,inv_ge_opp\n";
  const auto oracle = synthgen::oracle_connectivity(e.latent, e.augmentation);
  summary << "oracle,latent," << num(oracle.c_spur) << ',' << num(oracle.c_inv) << ',' << num(oracle.c_opp) << ','
          << boolean(oracle.c_spur >= oracle.c_inv) << ',' << boolean(oracle.c_inv >= oracle.c_opp) << '\n';
  auto report = [&](const std::string& id, const std::string& space, const eval::ConnectivityReport& r) {
    connectivity_rows(pairs, id, space, r);
    summary << cell(id) << ',' << space << ',' << num(r.c_spur_avg) << ',' << num(r.c_inv_avg) << ','
            << num(r.c_opp_avg) << ',' << boolean(r.spur_ge_inv) << ',' << boolean(r.inv_ge_opp) << '\n';
    log << id << " [" << space << "]: spurious " << r.c_spur_avg << ", invariant " << r.c_inv_avg << ", opposite "
        << r.c_opp_avg << "; spur>=inv " << boolean(r.spur_ge_inv) << ", inv>=opp " << boolean(r.inv_ge_opp)
        << "\n";
  };
  if (e.connectivity.input_space) {
    report("input", "input", eval::input_connectivity(ds, model, e.augmentation, est_seed));
  }
  for (const auto& [id, path] : e.connectivity.checkpoints) {
    const auto enc = encoder::read_checkpoint(path);
    if (enc.in_dim() != ds.dim()) {
      throw ConfigError("connectivity.checkpoints." + id, "encoder input dim " + std::to_string(enc.in_dim()) +
                                                              " does not match data dim " + std::to_string(ds.dim()));
    }
    report(id, "representation", eval::representation_connectivity(enc, ds, model, e.augmentation, est_seed));
  }
  ctx.emit("connectivity.csv", pairs.str());
  ctx.emit("connectivity_summary.csv", summary.str());
  return kExitOk;
}

inline int cmd_train(Context& ctx) {
  const Experiment e = Experiment::from(ctx.config);
  const auto result = run_training(e, ctx.config.seed);
  std::ostringstream log_csv, enc, view;
  latetvg::write_train_log(result.log, log_csv);
  encoder::write_checkpoint(result.model.encoder, enc);
  encoder::write_checkpoint(latetvg::apply_transform(result.model.encoder, result.mask), view);
  ctx.emit("train_log.csv", log_csv.str());
  ctx.emit("encoder.ckpt", enc.str());
  ctx.emit("view_encoder.ckpt", view.str());
  std::ostream& log = ctx.out_stream();
  log << "trained " << to_string(e.train.method) << " for " << result.log.size() << " epochs";
  if (!result.log.empty()) log << ", final loss " << result.log.back().loss;
  log << "; mask zeroes " << result.mask.zero_count() << " of " << result.mask.prunable_count()
      << " prunable weights\n";
  return kExitOk;
}

inline std::string grid_label(const eval::ProbeGridPoint& p) {
  return std::string(eval::to_string(p.reg)) + "@" + num(p.strength);
}

inline void write_probe_outputs(Context& ctx, const Experiment& e, const eval::ProbeSelection& sel,
                                const std::string& method) {
  std::ostringstream metrics, selection;
  metrics << kGroupMetricsHeader << '\n';
  selection << "run_id,reg,strength,val_avg_acc,val_worst_group_acc,test_avg_acc,test_worst_group_acc,selected\n";
  MetricsRow base = e.row_template("", ctx.config.seed);
  base.method = method;
  if (method != "latetvg") base.prune_layer.reset(), base.prune_rate.reset();
  for (std::size_t i = 0; i < sel.grid.size(); ++i) {
    const auto& ev = sel.grid[i];
    MetricsRow r = base;
    r.run_id = "probe/" + grid_label(ev.point);
    r.report = ev.test;
    metrics << r.csv() << '\n';
    selection << cell(r.run_id) << ',' << eval::to_string(ev.point.reg) << ',' << num(ev.point.strength) << ','
              << num(ev.validation.average) << ',' << num(ev.validation.worst_group) << ',' << num(ev.test.average)
              << ',' << num(ev.test.worst_group) << ',' << boolean(i == sel.selected) << '\n';
  }
  MetricsRow chosen = base;
  chosen.run_id = "probe/selected";
  chosen.report = sel.grid[sel.selected].test;
  metrics << chosen.csv() << '\n';
  ctx.emit("group_metrics.csv", metrics.str());
  ctx.emit("probe_selection.csv", selection.str());
  const auto& t = sel.grid[sel.selected].test;
  ctx.out_stream() << "selected probe " << grid_label(sel.grid[sel.selected].point) << ": test average " << t.average
                   << ", worst-group " << t.worst_group << "\n";
}

inline int cmd_probe(Context& ctx) {
  const Experiment e = Experiment::from(ctx.config);
  encoder::LayeredParams enc;
  std::string method = "identity";
  if (e.probe.checkpoint) {
    enc = encoder::read_checkpoint(*e.probe.checkpoint);
    method = "checkpoint";
    if (enc.in_dim() != e.latent.dim()) {
      throw ConfigError("probe.checkpoint", "encoder input dim " + std::to_string(enc.in_dim()) +
                                                " does not match data dim " + std::to_string(e.latent.dim()));
    }
  }
  write_probe_outputs(ctx, e, run_probe(e, enc, ctx.config.seed), method);
  return kExitOk;
}

struct SweepTask {
  std::size_t value_index = 0;
  std::uint64_t seed = 0;
};

struct SweepOutcome {
  MetricsRow row;
  std::string status = "ok";
};

inline Experiment apply_axis(Experiment e, SweepAxis axis, const Json& value) {
  switch (axis) {
    case SweepAxis::kMinorityWeight:
      e.probe.minority_weight = value.get<double>();
      if (!(e.probe.minority_weight >= 0.0 && e.probe.minority_weight <= 1.0)) {
        throw ConfigError("sweep.values", "minority_weight must lie in [0, 1]");
      }
      break;
    case SweepAxis::kPruneRate: e.prune.prune_rate = value.get<double>(); break;
    case SweepAxis::kPruneLayer: e.prune.layer_threshold = value.get<std::size_t>(); break;
    case SweepAxis::kStrategy: e.train.resample = latetvg::parse_strategy(value.get<std::string>()); break;
  }
  return e;
}

inline std::string value_label(const Json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

// Runs one (grid point, seed) task: train, then probe. Failures become the
// row's status and never abort the sweep.
inline SweepOutcome run_sweep_task(const Experiment& base, const SweepSection& sw, const SweepTask& task) {
  const Json& value = sw.values[task.value_index];
  SweepOutcome out;
  const std::string run_id = std::string(to_string(sw.axis)) + "=" + value_label(value) + "/seed=" +
                             std::to_string(task.seed);
  try {
    const Experiment e = apply_axis(base, sw.axis, value);
    out.row = e.row_template(run_id, task.seed);
    const auto trained = run_training(e, task.seed);
    const auto sel = run_probe(e, trained.model.encoder, task.seed);
    out.row.report = sel.grid[sel.selected].test;
  } catch (const std::exception& ex) {
    out.row = base.row_template(run_id, task.seed);
    out.status = std::string("error: ") + ex.what();
  }
  return out;
}

// Runs tasks on `threads` workers; results are placed by task index, so the
// merged output does not depend on scheduling.
template <typename Task, typename Fn>
auto parallel_map(const std::vector<Task>& tasks, std::size_t threads, Fn fn) {
  using R = decltype(fn(tasks.front()));
  std::vector<std::optional<R>> slots(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) slots[i] = fn(tasks[i]);
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, tasks.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  std::vector<R> out;
  out.reserve(tasks.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

inline int cmd_sweep(Context& ctx) {
  const Experiment base = Experiment::from(ctx.config);
  const SweepSection sw = parse_sweep(ctx.config.section("sweep"), ctx.config.seed);
  if ((sw.axis == SweepAxis::kPruneRate || sw.axis == SweepAxis::kPruneLayer) && base.train.method != Method::kLateTvg) {
    throw ConfigError("sweep.axis", "prune axes require train.method = \"latetvg\"");
  }
  ctx.seeds = sw.seeds;
  std::vector<SweepTask> tasks;
  for (std::size_t v = 0; v < sw.values.size(); ++v)
    for (std::uint64_t s : sw.seeds) tasks.push_back({v, s});
  const auto outcomes = parallel_map(tasks, ctx.threads, [&](const SweepTask& t) { return run_sweep_task(base, sw, t); });

  std::ostringstream csv, summary;
  csv << kGroupMetricsHeader << ",axis,value,status\n";
  std::vector<double> wg_sum(sw.values.size(), 0.0), avg_sum(sw.values.size(), 0.0);
  std::vector<std::size_t> ok(sw.values.size(), 0);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& o = outcomes[i];
    csv << o.row.csv() << ',' << to_string(sw.axis) << ',' << cell(value_label(sw.values[tasks[i].value_index]))
        << ',' << cell(o.status) << '\n';
    if (o.status == "ok") {
      wg_sum[tasks[i].value_index] += o.row.report->worst_group;
      avg_sum[tasks[i].value_index] += o.row.report->average;
      ++ok[tasks[i].value_index];
    }
  }
  // Deltas are against "original" on the strategy axis, otherwise the first value.
  std::size_t ref = 0;
  for (std::size_t v = 0; v < sw.values.size(); ++v)
    if (sw.axis == SweepAxis::kStrategy && sw.values[v] == "original") ref = v;
  auto mean = [](double s, std::size_t n) { return n ? s / static_cast<double>(n) : std::nan(""); };
  const double ref_wg = mean(wg_sum[ref], ok[ref]);
  summary << "axis,value,n_ok,mean_avg_acc,mean_worst_group_acc,delta_worst_group_vs_reference\n";
  std::ostream& log = ctx.out_stream();
  log << "sweep over " << to_string(sw.axis) << " (" << sw.values.size() << " values x " << sw.seeds.size()
      << " seeds), reference " << value_label(sw.values[ref]) << "\n";
  for (std::size_t v = 0; v < sw.values.size(); ++v) {
    const double wg = mean(wg_sum[v], ok[v]);
    summary << to_string(sw.axis) << ',' << cell(value_label(sw.values[v])) << ',' << ok[v] << ','
            << num(mean(avg_sum[v], ok[v])) << ',' << num(wg) << ',' << num(wg - ref_wg) << '\n';
    log << "  " << std::setw(12) << value_label(sw.values[v]) << "  worst-group " << std::fixed << std::setprecision(4)
        << wg << "  delta " << std::showpos << (wg - ref_wg) << std::noshowpos << std::defaultfloat << "  (" << ok[v]
        << "/" << sw.seeds.size() << " ok)\n";
  }
  ctx.emit("sweep.csv", csv.str());
  ctx.emit("sweep_summary.csv", summary.str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Manifest and dispatch.

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Written to a temporary name and renamed, so readers never see a partial file.
inline void write_manifest(const Context& ctx, const std::string& started, double seconds, int exit_code) {
  Json m;
  m["tool"] = "spurlab";
  m["version"] = kVersion;
  m["command"] = ctx.config.command;
  m["config_sha256"] = sha256_hex(ctx.config.resolved().dump());
  m["artifact_versions"] = {{"checkpoint_format", encoder::kCheckpointVersion}, {"dataset_csv", 1}, {"manifest", 1}};
  m["seeds"] = ctx.seeds;
  m["threads"] = ctx.threads;
  m["started_utc"] = started;
  m["wall_clock_seconds"] = seconds;
  m["exit_code"] = exit_code;
  Json files = Json::array();
  for (const auto& name : ctx.files) {
    const std::string bytes = read_file(ctx.out / name);
    files.push_back({{"file", name}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
  }
  m["outputs"] = files;
  const auto tmp = ctx.out / "manifest.json.tmp";
  write_file(tmp, m.dump(2) + "\n");
  std::filesystem::rename(tmp, ctx.out / "manifest.json");
}

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const PreconditionError*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const std::filesystem::filesystem_error*>(&e)) {
    return kExitIo;
  }
  return kExitNumeric;
}

// Resolves the thread count: flag, then SPURLAB_THREADS, then 1.
inline std::size_t resolve_threads(std::optional<std::size_t> flag) {
  std::size_t n = 1;
  if (flag) {
    n = *flag;
  } else if (const char* env = std::getenv("SPURLAB_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0') throw ConfigError("SPURLAB_THREADS", "expected a non-negative integer");
    n = v;
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

// Runs a parsed config; writes config.json, the command outputs and
// manifest.json into `config.output_dir`. Errors print a diagnostic to `err`
// and map to the exit-code contract.
inline int run(const RunConfig& config, std::size_t threads, std::ostream& log, std::ostream& err) {
  Context ctx;
  ctx.config = config;
  ctx.out = config.output_dir;
  ctx.threads = threads;
  ctx.log = &log;
  ctx.seeds = {config.seed};
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  int code = kExitOk;
  try {
    std::filesystem::create_directories(ctx.out);
    ctx.emit("config.json", config.resolved().dump(2) + "\n");
    const std::string& c = config.command;
    if (c == "spectrum") code = cmd_spectrum(ctx);
    else if (c == "gen") code = cmd_gen(ctx);
    else if (c == "connectivity") code = cmd_connectivity(ctx);
    else if (c == "train") code = cmd_train(ctx);
    else if (c == "probe") code = cmd_probe(ctx);
    else if (c == "sweep") code = cmd_sweep(ctx);
    else throw ConfigError("command", "unknown command '" + c + "'");
  } catch (const std::exception& e) {
    code = exit_code_for(e);
    err << "error: " << e.what() << "\n";
  }
  try {
    if (std::filesystem::is_directory(ctx.out)) {
      write_manifest(ctx, started, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), code);
    }
  } catch (const std::exception& e) {
    err << "error: manifest: " << e.what() << "\n";
    if (code == kExitOk) code = kExitIo;
  }
  return code;
}

}  // namespace spurlab::runner
