// Command-line entry point: synthesize data, train, evaluate, gradient-check
// and report model complexity.
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mutr/complexity.hpp"
#include "mutr/data.hpp"
#include "mutr/kernels.hpp"
#include "mutr/train.hpp"
#include "mutr/verify.hpp"

namespace fs = std::filesystem;
using namespace mutr;

namespace {

struct CommonOpts {
  std::string config = "mobileutr";
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
};

nn::ModelConfig resolve_config(const CommonOpts& c) {
  nn::ModelConfig cfg = nn::config_by_name_or_path(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw InputError("--set expects key=value, got '" + kv + "'");
    }
    nn::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

int run_synth(const std::string& out, int count, int size, double diameter,
              double spread, double noise, double contrast_min,
              double contrast_max, std::uint64_t seed) {
  data::SynthSpec spec;
  spec.count = count;
  spec.size = size;
  if (diameter > 0) {
    spec.mean_diameter = diameter;
  } else {
    spec.mean_diameter = 144.0 * size / 256.0;  // keeps the kernel rule at 9 for 256
  }
  spec.diameter_spread = spread;
  spec.noise = noise;
  spec.contrast_min = contrast_min;
  spec.contrast_max = contrast_max;
  spec.seed = seed;
  auto ds = data::synth_generate(spec);
  data::save_dataset(out, ds);
  std::cout << "wrote " << ds.size() << " samples (" << size << "x" << size
            << ", mean diameter " << spec.mean_diameter << ") to " << out
            << "\n";
  return 0;
}

int run_train(const CommonOpts& common, const std::string& data_dir,
              const std::string& out, int epochs, int batch, int size,
              double val_ratio) {
  nn::ModelConfig cfg = resolve_config(common);
  if (!fs::exists(data_dir)) {
    throw InputError("dataset path does not exist: " + data_dir);
  }
  data::Dataset ds = data::load_dataset(data_dir);
  const int target = size > 0 ? size : cfg.input_size;
  cfg.input_size = target;
  cfg.validate();
  for (auto& s : ds) {
    if (s.image.dim(1) != target || s.image.dim(2) != target) {
      s = data::resize_sample(s, target);
    }
  }
  auto [train_set, val_set] = data::split(ds, 1.0 - val_ratio, common.seed);

  nn::Model model = nn::Model::build(cfg, DType::kF32, common.seed);
  train::TrainPlan plan;
  plan.epochs = epochs;
  plan.batch_size = batch;
  plan.seed = common.seed;
  plan.out_dir = out;
  const auto res = train::fit(model, train_set, val_set, plan);
  std::cout << "trained " << res.epochs_run << " epochs; final loss "
            << res.final_train_loss << "; best val IoU " << res.best_val_iou
            << "\ncheckpoint: " << (fs::path(out) / "checkpoint_final").string()
            << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& out, std::uint64_t seed, double val_ratio,
             const std::string& subset) {
  const std::string cfg_path = (fs::path(checkpoint) / "config.json").string();
  std::ifstream cf(cfg_path);
  if (!cf) throw InputError("checkpoint config not found: " + cfg_path);
  std::stringstream ss;
  ss << cf.rdbuf();
  nn::ModelConfig cfg = nn::parse_config_json(ss.str());

  data::Dataset ds = data::load_dataset(data_dir);
  for (auto& s : ds) {
    if (s.image.dim(1) != cfg.input_size || s.image.dim(2) != cfg.input_size) {
      s = data::resize_sample(s, cfg.input_size);
    }
  }
  if (subset != "all") {
    auto [train_set, val_set] = data::split(ds, 1.0 - val_ratio, seed);
    ds = subset == "train" ? std::move(train_set) : std::move(val_set);
  }

  nn::Model model = nn::Model::build(cfg, DType::kF32, seed);
  nn::load_checkpoint(checkpoint, model);
  const auto rep = train::evaluate(model, ds, 8);
  std::cout << rep.to_text();
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream f(fs::path(out) / "metrics.txt");
    f << rep.to_text();
  }
  return 0;
}

int run_complexity(const std::vector<std::string>& configs,
                   const std::vector<std::string>& overrides, int size,
                   bool ablation, bool per_layer, bool strict_flops) {
  for (const auto& name : configs) {
    CommonOpts c;
    c.config = name;
    c.overrides = overrides;
    nn::ModelConfig cfg = resolve_config(c);
    const auto rep = nn::complexity_report(cfg, size, name);
    std::cout << rep.to_text(per_layer, strict_flops) << "\n";
    if (ablation) {
      std::cout << "ablation grid (input " << (size > 0 ? size : cfg.input_size)
                << "):\n";
      for (const auto& r : nn::ablation_suite(cfg)) {
        char line[160];
        std::snprintf(line, sizeof(line), "  %-22s params %8.3f M   GFLOPs(MAC) %8.3f\n",
                      r.label.c_str(), static_cast<double>(r.total_params()) / 1e6,
                      (strict_flops ? 2.0 : 1.0) * static_cast<double>(r.total_macs()) / 1e9);
        std::cout << line;
      }
      std::cout << "\n";
    }
  }
  return 0;
}

int run_gradcheck(std::uint64_t seed, int seeds) {
  bool ok = true;
  for (const auto& r : nn::run_block_gradchecks(seed, seeds)) {
    const bool pass = r.passed();
    ok = ok && pass;
    std::printf("%-12s max rel err %.3e (tol %.0e)  [%s]\n", r.name.c_str(),
                r.max_rel_err, r.tolerance, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MobileUtr segmentation toolkit"};
  app.require_subcommand(1);

  std::string backend = "auto";
  app.add_option("--backend", backend, "Kernel backend: auto, scalar, avx2");

  CommonOpts common;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic lesion dataset");
  std::string synth_out = "synth_data";
  int synth_count = 200, synth_size = 256;
  double synth_diameter = 0.0, synth_spread = 0.15, synth_noise = 0.08;
  double synth_cmin = 0.18, synth_cmax = 0.35;
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--count", synth_count, "Number of samples");
  synth->add_option("--size", synth_size, "Image size (multiple of 16)");
  synth->add_option("--diameter", synth_diameter, "Mean lesion diameter in pixels");
  synth->add_option("--spread", synth_spread, "Relative diameter spread");
  synth->add_option("--noise", synth_noise, "Speckle noise level");
  synth->add_option("--contrast-min", synth_cmin, "Lesion contrast lower bound");
  synth->add_option("--contrast-max", synth_cmax, "Lesion contrast upper bound");
  synth->add_option("--seed", common.seed, "RNG seed");

  auto* trainc = app.add_subcommand("train", "Train on a dataset directory");
  std::string train_data, train_out = "run";
  int train_epochs = 300, train_batch = 8, train_size = 0;
  double val_ratio = 0.3;
  trainc->add_option("--config", common.config, "Builtin name or config file");
  trainc->add_option("--data", train_data, "Dataset directory")->required();
  trainc->add_option("--out", train_out, "Output directory");
  trainc->add_option("--epochs", train_epochs, "Training epochs");
  trainc->add_option("--batch", train_batch, "Batch size");
  trainc->add_option("--size", train_size, "Resize images to this size");
  trainc->add_option("--val-ratio", val_ratio, "Validation fraction");
  trainc->add_option("--seed", common.seed, "RNG seed");
  trainc->add_option("--set", common.overrides, "Config override key=value");

  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_out, eval_subset = "val";
  double eval_val_ratio = 0.3;
  evalc->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  evalc->add_option("--data", eval_data, "Dataset directory")->required();
  evalc->add_option("--out", eval_out, "Where to write metrics.txt");
  evalc->add_option("--split", eval_subset, "Subset: val, train or all");
  evalc->add_option("--val-ratio", eval_val_ratio, "Validation fraction");
  evalc->add_option("--seed", common.seed, "Split seed (must match training)");

  auto* gradc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  int gc_seeds = 5;
  gradc->add_option("--seed", common.seed, "Base RNG seed");
  gradc->add_option("--seeds", gc_seeds, "Number of seeds per block");

  auto* compl_cmd = app.add_subcommand("complexity", "Parameter/FLOP reports");
  std::vector<std::string> compl_configs;
  int compl_size = 0;
  bool compl_ablation = false, compl_layers = false, compl_strict = false;
  compl_cmd->add_option("--config", compl_configs, "Config name(s) or file(s)");
  compl_cmd->add_option("--size", compl_size, "Input size for FLOP counting");
  compl_cmd->add_flag("--ablation", compl_ablation, "Emit the ablation grid");
  compl_cmd->add_flag("--per-layer", compl_layers, "Per-layer rows");
  compl_cmd->add_flag("--strict-flops", compl_strict, "Report 2*MAC instead of MAC");
  compl_cmd->add_option("--set", common.overrides, "Config override key=value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (backend == "scalar") {
      kern::set_backend(kern::Backend::kScalar);
    } else if (backend == "avx2") {
      kern::set_backend(kern::Backend::kAvx2);
    } else if (backend != "auto") {
      throw InputError("unknown backend: " + backend);
    }

    if (synth->parsed()) {
      return run_synth(synth_out, synth_count, synth_size, synth_diameter,
                       synth_spread, synth_noise, synth_cmin, synth_cmax,
                       common.seed);
    }
    if (trainc->parsed()) {
      return run_train(common, train_data, train_out, train_epochs, train_batch,
                       train_size, val_ratio);
    }
    if (evalc->parsed()) {
      return run_eval(eval_ckpt, eval_data, eval_out, common.seed,
                      eval_val_ratio, eval_subset);
    }
    if (gradc->parsed()) return run_gradcheck(common.seed, gc_seeds);
    if (compl_cmd->parsed()) {
      if (compl_configs.empty()) compl_configs = {"mobileutr", "mobileutr-l"};
      return run_complexity(compl_configs, common.overrides, compl_size,
                            compl_ablation, compl_layers, compl_strict);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
