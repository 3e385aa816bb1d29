#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dfm/experiment.hpp"

using namespace dfm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Three-class 8x8 glyph set written as IDX into a fresh directory.
fs::path glyph_dir() {
  const fs::path dir = fs::temp_directory_path() / "dfm_test_experiment_data";
  fs::create_directories(dir);
  const IdxLayout l = IdxLayout::in(dir);
  write_idx(make_synthetic_glyphs(4, 8, 3, 7, 1, Split::kTrain), l.train_images, l.train_labels);
  write_idx(make_synthetic_glyphs(2, 8, 3, 7, 2, Split::kTest), l.test_images, l.test_labels);
  return dir;
}

ExperimentConfig tiny_config(const std::string& out) {
  ExperimentConfig c;
  c.dataset = glyph_dir().string();
  c.output_dir = fs::temp_directory_path() / out;
  c.train.epochs = 1;
  c.train.batch_size = 4;
  c.train.steps = 2;
  c.train.lr_initial = 0.005;
  c.train.lr_max = 0.1;
  c.train.lr_final = 5e-6;
  c.backbone.stage_widths = {4};
  c.backbone.output_channels = 4;
  return c;
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys at every level") {
  const nlohmann::json ok = {{"mode", "noise_sweep"}, {"dataset", "x"}, {"train", {{"epochs", 2}, {"T", 3}}}};
  const ExperimentConfig c = ExperimentConfig::from_json(ok);
  CHECK(c.train.epochs == 2);
  CHECK(c.train.steps == 3);
  CHECK(ExperimentConfig::from_json(c.to_json()).to_json() == c.to_json());

  CHECK_THROWS_AS(ExperimentConfig::from_json({{"mode", "noise_sweep"}, {"sigmaa", {0.1}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"mode", "noise_sweep"}, {"train", {{"lr", 1}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"mode", "noise_sweep"}, {"backbone", {{"width", 1}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"mode", "sweep"}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"mode", "noise_sweep"}, {"sigma", "high"}}), ConfigError);
}

TEST_CASE("noise and few-shot settings are mutually exclusive") {
  ExperimentConfig c;
  c.sigma = {0.0, 0.25};
  c.shots = {10};
  CHECK_NOTHROW(c.validate(100, 10));  // D * L == |train|, the full set
  c.shots = {2, 10};
  CHECK_THROWS_AS(c.validate(100, 10), ConfigError);
  c.sigma = {0.0};
  CHECK_NOTHROW(c.validate(100, 10));
  c.mode = ExperimentMode::kFewShotSweep;
  c.shots.clear();
  CHECK_THROWS_AS(c.validate(100, 10), ConfigError);
}

TEST_CASE("CSV headers are fixed") {
  CHECK(kResultsHeader == "mode,model,sigma,D,seed,metric,value,reason");
  CHECK(kTrainLogHeader == "epoch,step,lr,loss,metric,q_ortho_residual");
  CHECK(kTrajectoryHeader == "run_id,seed,t,loss,norm_h,norm_step,pred_class");
  CHECK(kSoftmaxHeader == "run_id,seed,t,class,prob");
}

TEST_CASE("results rows are written verbatim with full-set D and sanitized reasons") {
  const fs::path p = fs::temp_directory_path() / "dfm_test_results.csv";
  write_results(p, {{"noise_sweep", "dfm", 0.25, std::nullopt, 3, "test_top1", 0.5, ""},
                    {"fewshot_sweep", "ff", 0.0, 4, 1, "test_top1", std::nan(""), "diverged, at step 2"}});
  CHECK(slurp(p) ==
        "mode,model,sigma,D,seed,metric,value,reason\n"
        "noise_sweep,dfm,0.25,full,3,test_top1,0.5,\n"
        "fewshot_sweep,ff,0,4,1,test_top1,NaN,diverged; at step 2\n");
  fs::remove(p);
}

TEST_CASE("noise sweep writes one row per model, split and metric") {
  ExperimentConfig c = tiny_config("dfm_test_sweep_a");
  fs::remove_all(c.output_dir);
  const ExperimentOutput out = run_experiment(c);
  // 2 models x {train, test} x {loss, top1, top5, auc}
  CHECK(out.rows.size() == 16);
  for (const auto& r : out.rows) {
    CHECK(r.reason.empty());
    CHECK(std::isfinite(r.value));
  }
  const std::string csv = slurp(c.output_dir / "results.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 17);
  CHECK(fs::exists(c.output_dir / "noise_sweep.svg"));

  SUBCASE("a second run reproduces results.csv byte for byte") {
    ExperimentConfig again = tiny_config("dfm_test_sweep_b");
    fs::remove_all(again.output_dir);
    run_experiment(again);
    CHECK(slurp(again.output_dir / "results.csv") == csv);
    fs::remove_all(again.output_dir);
  }
  fs::remove_all(c.output_dir);
}

TEST_CASE("cost report gives T passes the cost of T single passes") {
  ExperimentConfig c = tiny_config("dfm_test_cost");
  c.mode = ExperimentMode::kCostReport;
  c.train.steps = 5;
  c.models = {"dfm", "dfm-masked", "ff"};
  fs::remove_all(c.output_dir);
  const ExperimentOutput out = run_experiment(c);
  auto value = [&](const std::string& model, const std::string& metric) {
    for (const auto& r : out.rows) {
      if (r.model == model && r.metric == metric) return r.value;
    }
    FAIL("missing " << model << ' ' << metric);
    return 0.0;
  };
  CHECK(value("dfm", "flops_T5") == 5.0 * value("dfm", "flops_T1"));
  CHECK(value("dfm-masked", "flops_T5") == value("dfm", "flops_T5"));
  CHECK(value("dfm-masked", "parameters_T5") == value("dfm", "parameters_T5"));
  CHECK(value("ff", "flops_T5") < value("dfm", "flops_T1"));
  CHECK(fs::exists(c.output_dir / "cost.csv"));
  fs::remove_all(c.output_dir);
}

TEST_CASE("divergence is captured as a failure, not thrown") {
  ExperimentConfig c = tiny_config("dfm_test_diverge");
  c.train.epochs = 20;
  c.train.lr_initial = 1e6;
  c.train.lr_max = 1e12;
  c.train.lr_final = 1e6;
  c.train.ablation.orthogonality = false;
  const DataSplits data = load_splits(c);
  TrainedRun run;
  CHECK_NOTHROW(run = train_model("dfm", c, data.train, 0.0, 0));
  REQUIRE(run.failure.has_value());
  CHECK_FALSE(run.failure->empty());
}

TEST_CASE("saved models reload with identical predictions") {
  ExperimentConfig c = tiny_config("dfm_test_save");
  const DataSplits data = load_splits(c);
  for (const char* name : {"dfm", "ff", "dfm-conv"}) {
    CAPTURE(name);
    const TrainedRun run = train_model(name, c, data.train, 0.0, 5);
    REQUIRE_FALSE(run.failure.has_value());
    const fs::path p = fs::temp_directory_path() / "dfm_test_model.bin";
    save_model(p, *run.model, run.descriptor);
    const auto [model, desc] = load_model(p);
    CHECK(desc.name == name);
    const Tensor a = run.model->predict(data.test.images[0], 9), b = model->predict(data.test.images[0], 9);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    fs::remove(p);
  }
}
