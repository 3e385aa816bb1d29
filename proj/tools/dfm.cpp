// Command-line front end for the DFM engine.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "dfm/data.hpp"
#include "dfm/experiment.hpp"
#include "dfm/random.hpp"

namespace fs = std::filesystem;
using namespace dfm;

namespace {

void print_evaluation(const std::string& label, const Evaluation& ev, bool segmentation) {
  if (segmentation) {
    std::printf("%s loss=%s miou=%s\n", label.c_str(), format_number(ev.mean_loss).c_str(),
                format_number(ev.miou).c_str());
  } else {
    std::printf("%s loss=%s top1=%s top5=%s auc=%s\n", label.c_str(), format_number(ev.mean_loss).c_str(),
                format_number(ev.top1).c_str(), format_number(ev.top5).c_str(), format_number(ev.auc).c_str());
  }
}

Dataset test_split_for(const std::string& dataset) {
  ExperimentConfig cfg;
  cfg.dataset = dataset;
  return load_splits(cfg).test;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep feedback model engine"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run an experiment described by a JSON config");
  std::string config_path;
  run->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train", "Train one model and save a checkpoint");
  ExperimentConfig tcfg;
  std::string model_name = "dfm";
  double sigma = 0.0;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  train->add_option("--dataset", tcfg.dataset, "IDX dataset directory, or synthetic:seg")->required();
  train->add_option("--model", model_name, "Model")->check(CLI::IsMember(known_models()));
  train->add_option("--sigma", sigma, "Gaussian input noise std")->check(CLI::NonNegativeNumber);
  train->add_option("--shots", shots, "Examples per class (0 = full set)");
  train->add_option("--T", tcfg.train.steps, "Unrolled steps")->check(CLI::PositiveNumber);
  train->add_option("--tau", tcfg.train.tau, "Time constant")->check(CLI::PositiveNumber);
  train->add_option("--seed", seed, "Seed");
  train->add_option("--out", out_dir, "Output directory");
  train->add_option("--epochs", tcfg.train.epochs, "Epochs")->check(CLI::PositiveNumber);
  train->add_option("--lr-initial", tcfg.train.lr_initial, "One-cycle initial learning rate");
  train->add_option("--lr-max", tcfg.train.lr_max, "One-cycle peak learning rate");
  train->add_option("--lr-final", tcfg.train.lr_final, "One-cycle final learning rate");
  train->add_option("--widths", tcfg.backbone.stage_widths, "Backbone stage widths");
  train->add_option("--train-limit", tcfg.train_limit, "Use only the first N training images");
  train->add_option("--test-limit", tcfg.test_limit, "Use only the first N test images");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint, optionally under a corruption");
  std::string checkpoint, corruption, eval_dataset;
  std::uint64_t eval_seed = 0;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--corruption", corruption, "kind:severity, e.g. pixelate:0.5");
  eval->add_option("--dataset", eval_dataset, "Dataset (defaults to the one recorded in the checkpoint)");
  eval->add_option("--seed", eval_seed, "Seed for corruption noise");

  auto* traj = app.add_subcommand("traj", "Export prediction trajectories from a checkpoint");
  std::string traj_out, traj_softmax, traj_dataset;
  std::size_t traj_instances = 20;
  traj->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  traj->add_option("--out", traj_out, "Trajectory CSV")->required();
  traj->add_option("--softmax-out", traj_softmax, "Per-step softmax CSV");
  traj->add_option("--instances", traj_instances, "Number of test instances");
  traj->add_option("--dataset", traj_dataset, "Dataset (defaults to the one recorded in the checkpoint)");
  traj->add_option("--seed", eval_seed, "Seed for the initial states");

  auto* cost = app.add_subcommand("cost", "Parameter, FLOP and timing table");
  ExperimentConfig ccfg;
  std::size_t image_size = 32, classes = 10, timed = 10;
  cost->add_option("--T", ccfg.train.steps, "Unrolled steps")->check(CLI::PositiveNumber);
  cost->add_option("--widths", ccfg.backbone.stage_widths, "Backbone stage widths");
  cost->add_option("--size", image_size, "Square input resolution");
  cost->add_option("--classes", classes, "Number of classes");
  cost->add_option("--timed-batches", timed, "Timed batches (0 skips timing)");

  auto* make = app.add_subcommand("make-data", "Write the synthetic glyph dataset as IDX files");
  std::string data_out;
  std::size_t per_class = 50, test_per_class = 20, size = 32, n_classes = 10;
  std::uint64_t data_seed = 1;
  make->add_option("--out", data_out, "Output directory")->required();
  make->add_option("--per-class", per_class, "Training images per class");
  make->add_option("--test-per-class", test_per_class, "Test images per class");
  make->add_option("--size", size, "Square resolution");
  make->add_option("--classes", n_classes, "Number of classes");
  make->add_option("--seed", data_seed, "Seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const ExperimentConfig cfg = ExperimentConfig::load(config_path);
      const ExperimentOutput out = run_experiment(cfg);
      for (const auto& f : out.files) std::cout << f.string() << '\n';
    } else if (*train) {
      tcfg.output_dir = out_dir;
      if (shots > 0) tcfg.shots = {shots};
      tcfg.sigma = {sigma};
      DataSplits data = load_splits(tcfg);
      tcfg.validate(data.train.size(), data.train.classes);
      if (shots > 0) data.train = few_shot_sample(data.train, shots, stream_seed(seed, "few-shot", shots));
      fs::create_directories(tcfg.output_dir);
      TrainedRun run_result = train_model(model_name, tcfg, data.train, sigma, seed);
      write_train_log(tcfg.output_dir / "train_log.csv", run_result.log);
      std::vector<ResultRow> rows;
      auto add = [&](const std::string& metric, double value, const std::string& reason) {
        rows.push_back({"train", model_name, sigma, shots > 0 ? std::optional(shots) : std::nullopt, seed, metric, value, reason});
      };
      if (run_result.failure) {
        add("test_top1", std::numeric_limits<double>::quiet_NaN(), *run_result.failure);
        std::cerr << *run_result.failure << '\n';
      } else {
        const Evaluation ev = evaluate_noisy(*run_result.model, data.test, sigma, tcfg.train.label_smoothing,
                                             stream_seed(seed, "eval-test", 0));
        print_evaluation("test", ev, data.test.segmentation());
        add("test_loss", ev.mean_loss, "");
        if (data.test.segmentation()) {
          add("test_miou", ev.miou, "");
        } else {
          add("test_top1", ev.top1, "");
          add("test_top5", ev.top5, "");
          add("test_auc", ev.auc, "");
        }
        save_model(tcfg.output_dir / "model.ckpt", *run_result.model, run_result.descriptor);
      }
      write_results(tcfg.output_dir / "results.csv", rows);
      return run_result.failure ? 2 : 0;
    } else if (*eval) {
      auto [model, desc] = load_model(checkpoint);
      const Dataset test = test_split_for(eval_dataset.empty() ? desc.dataset : eval_dataset);
      if (corruption.empty()) {
        print_evaluation("clean", evaluate(*model, test, 0.1), test.segmentation());
      } else {
        const Corruption c = Corruption::parse(corruption);
        const Evaluation ev = evaluate(*model, test, 0.1, [&](const Tensor& x, std::size_t i) {
          return corrupt(x, c, stream_seed(eval_seed, "corrupt-" + c.to_string(), i));
        });
        print_evaluation(c.to_string(), ev, test.segmentation());
      }
    } else if (*traj) {
      auto [model, desc] = load_model(checkpoint);
      const auto* fm = dynamic_cast<const FeedbackModel*>(model.get());
      if (fm == nullptr) throw ConfigError("traj: checkpoint holds a feedforward model; nothing to unroll");
      const Dataset test = test_split_for(traj_dataset.empty() ? desc.dataset : traj_dataset);
      const auto recs = export_trajectories(*fm, test, traj_instances, 0.1, eval_seed);
      write_trajectories(traj_out, traj_softmax, recs);
      std::cout << traj_out << '\n';
    } else if (*cost) {
      Dataset shape_only;
      shape_only.classes = classes;
      shape_only.images.push_back(Tensor::zeros({1, image_size, image_size}));
      std::printf("%s\n", std::string(kCostHeader).c_str());
      for (const std::string name : {"dfm", "dfm-masked", "ff"}) {
        const auto model = build_model(describe_model(name, ccfg.backbone, ccfg.train, shape_only, 0));
        std::vector<std::size_t> steps{ccfg.train.steps};
        if (model->recurrent() && ccfg.train.steps != 1) steps.push_back(1);
        for (std::size_t T : steps) {
          CostOptions opts;
          opts.timed_batches = timed;
          opts.measure_time = timed > 0;
          const CostReport r = count_cost(*model, shape_only.image_shape(), T, opts);
          std::printf("%s,%zu,%llu,%llu,%s\n", name.c_str(), T, static_cast<unsigned long long>(r.parameter_count),
                      static_cast<unsigned long long>(r.flops_per_forward), format_number(r.mean_batch_seconds).c_str());
        }
      }
    } else if (*make) {
      fs::create_directories(data_out);
      const IdxLayout layout = IdxLayout::in(data_out);
      write_idx(make_synthetic_glyphs(per_class, size, n_classes, data_seed, data_seed + 1, Split::kTrain),
                layout.train_images, layout.train_labels);
      write_idx(make_synthetic_glyphs(test_per_class, size, n_classes, data_seed, data_seed + 2, Split::kTest),
                layout.test_images, layout.test_labels);
      std::cout << data_out << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "dfm: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
