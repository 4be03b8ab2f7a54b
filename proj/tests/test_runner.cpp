#include <filesystem>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "spurlab/runner.hpp"

using namespace spurlab;
using namespace spurlab::runner;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("spurlab_runner_" + name);
  fs::remove_all(p);
  return p;
}

// Small enough that a train + probe run takes well under a second.
Json small_experiment() {
  return Json::parse(R"({
    "seed": 7,
    "latent": {"mu_core": 1.0, "mu_spur": 2.0, "sigma": 0.5, "d_noise": 2,
               "majority_fraction": 0.9, "n_samples": 160, "mix": true},
    "augmentation": {"p_flip_spur": 0.05, "p_flip_core": 0.25, "jitter_sigma": 0.1},
    "train": {"epochs": 2, "batch_size": 32, "encoder_hidden": [8, 8, 6],
              "projector_dim": 6, "predictor_hidden": 4},
    "prune": {"layer_threshold": 1, "prune_rate": 0.5},
    "probe": {"pool_samples": 400, "downstream_total": 120, "test_samples": 200,
              "grid": [{"reg": "l2", "strength": 0.01}, {"reg": "l1", "strength": 0.01}]},
    "connectivity": {"n_samples": 600}
  })");
}

struct Outcome {
  int code;
  std::string log, err;
};

Outcome run_json(Json j, const std::string& command, const fs::path& out, std::size_t threads = 1) {
  j["output_dir"] = out.string();
  std::ostringstream log, err;
  int code;
  try {
    code = run(parse_config(j, command), threads, log, err);
  } catch (const std::exception& e) {
    err << e.what();
    code = exit_code_for(e);
  }
  return {code, log.str(), err.str()};
}

std::string config_error_path(const Json& j, const std::string& command) {
  try {
    parse_config(j, command);
  } catch (const ConfigError& e) {
    return e.path();
  }
  return "<no error>";
}

}  // namespace

TEST(Runner, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Runner, UnknownKeysNameTheirPath) {
  Json j = small_experiment();
  j["train"]["learning_rate"] = 0.1;
  EXPECT_EQ(config_error_path(j, "train"), "train.learning_rate");
  j = small_experiment();
  j["probe"]["grid"][1]["strenght"] = 1.0;
  EXPECT_EQ(config_error_path(j, "probe"), "probe.grid[1].strenght");
  j = small_experiment();
  j["extra"] = 1;
  EXPECT_EQ(config_error_path(j, "train"), "extra");
}

TEST(Runner, TypeAndRangeErrorsNameTheirPath) {
  Json j = small_experiment();
  j["train"]["epochs"] = -1;
  EXPECT_EQ(config_error_path(j, "train"), "train.epochs");
  j = small_experiment();
  j["latent"]["majority_fraction"] = 0.3;
  EXPECT_EQ(config_error_path(j, "gen"), "latent");
  j = small_experiment();
  j["prune"]["prune_rate"] = 1.0;
  EXPECT_EQ(config_error_path(j, "train"), "prune.prune_rate");
  j = small_experiment();
  j["train"]["resample"] = "sideways";
  EXPECT_EQ(config_error_path(j, "train"), "train.resample");
  j = small_experiment();
  j["command"] = "gen";
  EXPECT_EQ(config_error_path(j, "train"), "command");
}

TEST(Runner, SweepConfigErrors) {
  Json j = small_experiment();
  j["sweep"] = {{"axis", "prune_rate"}, {"values", Json::array()}};
  EXPECT_EQ(config_error_path(j, "sweep"), "sweep.values");
  j["sweep"] = {{"axis", "strategy"}, {"values", {"original", "shuffled"}}};
  EXPECT_EQ(config_error_path(j, "sweep"), "sweep.values");
  j["sweep"] = {{"axis", "width"}, {"values", {1}}};
  EXPECT_EQ(config_error_path(j, "sweep"), "sweep.axis");

  j = small_experiment();
  j["train"]["method"] = "base";
  j["sweep"] = {{"axis", "prune_rate"}, {"values", {0.5}}};
  const Outcome o = run_json(j, "sweep", scratch("sweep_base_prune"));
  EXPECT_EQ(o.code, kExitConfig);
  EXPECT_NE(o.err.find("sweep.axis"), std::string::npos);
}

TEST(Runner, ConnectivityNeedsCheckpointForRepresentationSpace) {
  Json j = small_experiment();
  j["connectivity"]["spaces"] = {"input", "representation"};
  EXPECT_EQ(config_error_path(j, "connectivity"), "connectivity.checkpoints");
}

TEST(Runner, ExitCodes) {
  Json bad = small_experiment();
  bad["train"]["lr"] = 0.0;
  EXPECT_EQ(run_json(bad, "train", scratch("exit_config")).code, kExitConfig);

  Json missing = small_experiment();
  missing["probe"]["checkpoint"] = "/nonexistent/encoder.ckpt";
  EXPECT_EQ(run_json(missing, "probe", scratch("exit_io")).code, kExitIo);

  // Disconnected groups give a negative lambda_class: a numeric failure.
  Json spectrum = {{"toygraph", {{"rho", 0.1}, {"c_spur", 0.5}, {"c_inv", 0.0}, {"c_opp", 0.0}, {"n", 2}}}};
  const Outcome o = run_json(spectrum, "spectrum", scratch("exit_numeric"));
  EXPECT_EQ(o.code, kExitNumeric);
  EXPECT_NE(o.err.find("lambda_class"), std::string::npos);

  EXPECT_THROW(load_config("/nonexistent/config.json", "gen"), IoError);
  const fs::path malformed = scratch("malformed.json");
  write_file(malformed, "{\"seed\": ");
  EXPECT_THROW(load_config(malformed, "gen"), ConfigError);
}

TEST(Runner, SpectrumExample) {
  const fs::path out = scratch("spectrum");
  Json j = {{"toygraph", {{"rho", 0.5}, {"c_spur", 0.3}, {"c_inv", 0.2}, {"c_opp", 0.05}, {"n", 4}}}};
  const Outcome o = run_json(j, "spectrum", out);
  ASSERT_EQ(o.code, kExitOk) << o.err;
  const std::string csv = read_file(out / "spectrum.csv");
  // 4 distinct values then 4(n-1) = 12 zeros.
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "index,closed_form,numeric,abs_diff");
  std::getline(lines, line);
  EXPECT_EQ(line.substr(0, 6), "0,4.2,");
  std::size_t rows = 1;
  while (std::getline(lines, line)) ++rows;
  EXPECT_EQ(rows, 16u);
  const std::string summary = read_file(out / "spectrum_summary.csv");
  EXPECT_NE(summary.find("minority_acc_majority_trained,0\n"), std::string::npos);
  EXPECT_NE(summary.find("lemma_conditions_hold,true\n"), std::string::npos);
}

TEST(Runner, SpectrumDegenerateWarning) {
  Json j = {{"toygraph", {{"rho", 0.5}, {"c_spur", 0.2}, {"c_inv", 0.2}, {"c_opp", 0.0}, {"n", 2}}}};
  const Outcome o = run_json(j, "spectrum", scratch("spectrum_degenerate"));
  EXPECT_EQ(o.code, kExitOk) << o.err;
  EXPECT_NE(o.log.find("degenerate spectrum"), std::string::npos);
}

TEST(Runner, GenIsDeterministicAndSeedSensitive) {
  Json j = small_experiment();
  const fs::path a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
  ASSERT_EQ(run_json(j, "gen", a).code, kExitOk);
  ASSERT_EQ(run_json(j, "gen", b).code, kExitOk);
  j["seed"] = 8;
  ASSERT_EQ(run_json(j, "gen", c).code, kExitOk);
  EXPECT_EQ(read_file(a / "dataset.csv"), read_file(b / "dataset.csv"));
  EXPECT_NE(read_file(a / "dataset.csv"), read_file(c / "dataset.csv"));
  const auto ds = synthgen::read_dataset((a / "dataset.csv").string());
  EXPECT_EQ(ds.size(), 160u);
}

TEST(Runner, ManifestChecksumsMatchFiles) {
  const fs::path out = scratch("manifest");
  ASSERT_EQ(run_json(small_experiment(), "train", out).code, kExitOk);
  const Json m = Json::parse(read_file(out / "manifest.json"));
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["exit_code"], 0);
  EXPECT_EQ(m["config_sha256"], sha256_hex(parse_config(Json::parse(read_file(out / "config.json")), "train")
                                               .resolved()
                                               .dump()));
  std::set<std::string> names;
  for (const auto& f : m["outputs"]) {
    const std::string bytes = read_file(out / f["file"].get<std::string>());
    EXPECT_EQ(f["bytes"].get<std::size_t>(), bytes.size());
    EXPECT_EQ(f["sha256"], sha256_hex(bytes));
    names.insert(f["file"].get<std::string>());
  }
  EXPECT_EQ(names, (std::set<std::string>{"config.json", "train_log.csv", "encoder.ckpt", "view_encoder.ckpt"}));
  EXPECT_FALSE(fs::exists(out / "manifest.json.tmp"));
}

TEST(Runner, StoredConfigRerunIsByteIdentical) {
  const fs::path first = scratch("rerun_a"), second = scratch("rerun_b");
  ASSERT_EQ(run_json(small_experiment(), "train", first).code, kExitOk);
  // The stored config carries its own output_dir; redirect it and rerun.
  Json stored = Json::parse(read_file(first / "config.json"));
  ASSERT_EQ(run_json(stored, "train", second).code, kExitOk);
  for (const char* f : {"train_log.csv", "encoder.ckpt", "view_encoder.ckpt"}) {
    EXPECT_EQ(read_file(first / f), read_file(second / f)) << f;
  }
}

TEST(Runner, EpochsZeroEmitsInitialization) {
  Json j = small_experiment();
  j["train"]["epochs"] = 0;
  const fs::path out = scratch("epochs0");
  ASSERT_EQ(run_json(j, "train", out).code, kExitOk);
  EXPECT_EQ(read_file(out / "train_log.csv"), "epoch,loss,mask_overlap,seconds\n");
  // Initial mask is all ones, so the view encoder equals the encoder.
  EXPECT_EQ(read_file(out / "encoder.ckpt"), read_file(out / "view_encoder.ckpt"));
  const auto enc = encoder::read_checkpoint((out / "encoder.ckpt").string());
  EXPECT_EQ(enc.depth(), 3u);
}

TEST(Runner, ZeroPruneRateEqualsBase) {
  Json j = small_experiment();
  j["prune"]["prune_rate"] = 0.0;
  const fs::path late = scratch("rate0"), base = scratch("base");
  ASSERT_EQ(run_json(j, "train", late).code, kExitOk);
  j["train"]["method"] = "base";
  ASSERT_EQ(run_json(j, "train", base).code, kExitOk);
  EXPECT_EQ(read_file(late / "encoder.ckpt"), read_file(base / "encoder.ckpt"));
  EXPECT_EQ(read_file(late / "train_log.csv"), read_file(base / "train_log.csv"));
}

TEST(Runner, ProbeWritesGridAndSelectedRows) {
  const fs::path out = scratch("probe");
  ASSERT_EQ(run_json(small_experiment(), "probe", out).code, kExitOk);
  std::istringstream csv(read_file(out / "group_metrics.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, kGroupMetricsHeader);
  std::vector<std::string> rows;
  while (std::getline(csv, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].rfind("probe/l2@0.01,7,identity,NA,NA,0.5,", 0), 0u);
  EXPECT_EQ(rows[1].rfind("probe/l1@0.01,", 0), 0u);
  EXPECT_EQ(rows[2].rfind("probe/selected,", 0), 0u);
  const std::string sel = read_file(out / "probe_selection.csv");
  EXPECT_EQ(std::count(sel.begin(), sel.end(), '\n'), 3);
}

TEST(Runner, TrainThenProbeAndConnectivityFromCheckpoint) {
  const fs::path trained = scratch("chain_train"), probed = scratch("chain_probe"), conn = scratch("chain_conn");
  ASSERT_EQ(run_json(small_experiment(), "train", trained).code, kExitOk);
  Json j = small_experiment();
  j["probe"]["checkpoint"] = (trained / "encoder.ckpt").string();
  ASSERT_EQ(run_json(j, "probe", probed).code, kExitOk);
  EXPECT_NE(read_file(probed / "group_metrics.csv").find(",checkpoint,"), std::string::npos);

  j = small_experiment();
  j["connectivity"]["spaces"] = {"input", "representation"};
  j["connectivity"]["checkpoints"] = {{"latetvg", (trained / "encoder.ckpt").string()}};
  const Outcome o = run_json(j, "connectivity", conn);
  ASSERT_EQ(o.code, kExitOk) << o.err;
  const std::string csv = read_file(conn / "connectivity.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 12);
  EXPECT_NE(csv.find("latetvg,representation,0-1,spurious,"), std::string::npos);
  EXPECT_NE(csv.find("input,input,0-2,invariant,"), std::string::npos);
  const std::string summary = read_file(conn / "connectivity_summary.csv");
  EXPECT_EQ(summary.rfind("run_id,space,c_spur_avg,c_inv_avg,c_opp_avg,spur_ge_inv,inv_ge_opp\noracle,latent,", 0), 0u);
}

TEST(Runner, SweepRowCountAndThreadIndependence) {
  Json j = small_experiment();
  j["sweep"] = {{"axis", "prune_rate"}, {"values", {0.0, 0.5, 0.9}}, {"seeds", {1, 2}}};
  const fs::path one = scratch("sweep_1"), three = scratch("sweep_3");
  ASSERT_EQ(run_json(j, "sweep", one, 1).code, kExitOk);
  ASSERT_EQ(run_json(j, "sweep", three, 3).code, kExitOk);
  const std::string csv = read_file(one / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 2);
  EXPECT_EQ(csv, read_file(three / "sweep.csv"));
  EXPECT_EQ(read_file(one / "sweep_summary.csv"), read_file(three / "sweep_summary.csv"));
  EXPECT_EQ(csv.find("error"), std::string::npos);
  const std::string summary = read_file(one / "sweep_summary.csv");
  EXPECT_NE(summary.find("\nprune_rate,0.0,2,"), std::string::npos);
}

TEST(Runner, SweepRecordsFailuresPerRow) {
  Json j = small_experiment();
  // Layer 3 does not exist in a 3-layer encoder; only that grid point fails.
  j["sweep"] = {{"axis", "prune_layer"}, {"values", {1, 3}}, {"seeds", {1}}};
  const fs::path out = scratch("sweep_fail");
  ASSERT_EQ(run_json(j, "sweep", out).code, kExitOk);
  std::istringstream csv(read_file(out / "sweep.csv"));
  std::string header, ok, failed;
  std::getline(csv, header);
  std::getline(csv, ok);
  std::getline(csv, failed);
  EXPECT_NE(ok.find(",prune_layer,1,ok"), std::string::npos);
  EXPECT_NE(failed.find(",NA,NA,NA,NA,NA,NA,prune_layer,3,error: "), std::string::npos);
}

TEST(Runner, StrategySweepReportsDeltasAgainstOriginal) {
  Json j = small_experiment();
  j["latent"]["n_samples"] = 300;
  j["train"]["encoder_hidden"] = {16, 16, 8};
  j["train"]["projector_dim"] = 8;
  j["sweep"] = {{"axis", "strategy"}, {"values", {"balanced", "original"}}, {"seeds", {3}}};
  const fs::path out = scratch("sweep_strategy");
  ASSERT_EQ(run_json(j, "sweep", out).code, kExitOk);
  std::istringstream summary(read_file(out / "sweep_summary.csv"));
  std::string line;
  std::getline(summary, line);
  std::getline(summary, line);
  std::getline(summary, line);
  EXPECT_EQ(line.rfind("strategy,original,1,", 0), 0u);
  EXPECT_EQ(line.substr(line.size() - 2), ",0");
}

TEST(Runner, ThreadResolution) {
  EXPECT_EQ(resolve_threads(3), 3u);
  EXPECT_GE(resolve_threads(0), 1u);
}
