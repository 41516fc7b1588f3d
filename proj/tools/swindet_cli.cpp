// Command-line surface for the detector pipeline: dataset synthesis,
// training, hard-negative mining, evaluation, the window ablation sweep,
// gradient checking, and SVG plot generation.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "swindet/config.hpp"
#include "swindet/gradsuite.hpp"
#include "swindet/train.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::int64_t seed = -1;
  std::int64_t neck_window = 0;
  std::int64_t epochs = 0;
  std::string out_dir;
  std::string checkpoint;
  double hard_negative_rate = -1;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON run config (defaults to the desk preset)");
  cmd->add_option("--seed", f.seed, "override the root seed for model init, data, and sampling");
  cmd->add_option("--neck-window", f.neck_window, "override the neck attention window size");
  cmd->add_option("--epochs", f.epochs, "override the number of training epochs");
  cmd->add_option("--out", f.out_dir, "output directory");
  cmd->add_option("--checkpoint", f.checkpoint, "checkpoint path (resume source or eval subject)");
  cmd->add_option("--hard-negative-rate", f.hard_negative_rate,
                  "enable hard-negative sampling at this batch fraction");
}

swindet::RunConfig resolve_config(const CommonFlags& f) {
  swindet::RunConfig cfg =
      f.config_path.empty() ? swindet::RunConfig{} : swindet::load_run_config(f.config_path);
  if (f.seed >= 0) {
    cfg.train.seed = static_cast<std::uint64_t>(f.seed);
    cfg.data.scene.seed = static_cast<std::uint64_t>(f.seed);
  }
  if (f.neck_window > 0) cfg.model.neck.window = f.neck_window;
  if (f.epochs > 0) cfg.train.epochs = f.epochs;
  if (f.hard_negative_rate >= 0) {
    cfg.hard_negative.enabled = true;
    cfg.hard_negative.rate = f.hard_negative_rate;
  }
  cfg.validate();
  return cfg;
}

// Points the data dirs into out_dir when --out is given, so a run keeps its
// dataset, checkpoints, and metrics under one root.
void root_data_dirs(swindet::RunConfig& cfg, const std::string& out_dir) {
  if (out_dir.empty()) return;
  namespace fs = std::filesystem;
  cfg.data.train_dir = (fs::path(out_dir) / "data" / "train").string();
  cfg.data.val_dir = (fs::path(out_dir) / "data" / "val").string();
}

int cmd_synth(const CommonFlags& f) {
  swindet::RunConfig cfg = resolve_config(f);
  root_data_dirs(cfg, f.out_dir);
  auto [train_m, val_m] = swindet::ensure_datasets(cfg.data);
  std::cout << "wrote " << train_m.images.size() << " train images to " << cfg.data.train_dir
            << " and " << val_m.images.size() << " val images to " << cfg.data.val_dir << "\n";
  return 0;
}

int cmd_train(const CommonFlags& f) {
  swindet::RunConfig cfg = resolve_config(f);
  const std::string out = f.out_dir.empty() ? "runs/train" : f.out_dir;
  swindet::TrainResult r = swindet::train(cfg, out, f.checkpoint, &std::cout);
  std::cout << "final val AP50 " << r.final_val.ap50 << " AP " << r.final_val.ap
            << " AP_S " << r.final_val.ap_s << "; checkpoint at " << r.checkpoint_path << "\n";
  return 0;
}

int cmd_mine_hn(const CommonFlags& f) {
  if (f.checkpoint.empty()) throw swindet::usage_error("mine-hn requires --checkpoint");
  swindet::RunConfig cfg = resolve_config(f);
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(cfg.data.train_dir) / "manifest.json").string();
  swindet::DatasetManifest manifest = swindet::load_manifest(manifest_path);
  swindet::Detector<double> model = swindet::Detector<double>::load_file(f.checkpoint);
  manifest = swindet::mine_with_model(model, manifest, cfg.data.train_dir, cfg.eval);
  swindet::save_manifest(manifest, manifest_path);
  std::cout << "mined " << manifest.hard_negatives.size() << " hard negatives into "
            << manifest_path << "\n";
  return 0;
}

int cmd_eval(const CommonFlags& f) {
  if (f.checkpoint.empty()) throw swindet::usage_error("eval requires --checkpoint");
  swindet::RunConfig cfg = resolve_config(f);
  namespace fs = std::filesystem;
  const std::string out = f.out_dir.empty() ? "runs/eval" : f.out_dir;
  fs::create_directories(out);
  swindet::DatasetManifest val_m =
      swindet::load_manifest((fs::path(cfg.data.val_dir) / "manifest.json").string());
  swindet::Detector<double> model = swindet::Detector<double>::load_file(f.checkpoint);
  std::vector<swindet::ImageDetections> dump;
  swindet::APReport rep = swindet::evaluate(model, val_m, cfg.data.val_dir, cfg.eval, &dump);
  swindet::save_detections_jsonl(dump, (fs::path(out) / "detections.jsonl").string());
  swindet::write_text_file((fs::path(out) / "report.json").string(),
                           swindet::ap_report_to_json(rep).dump(2) + "\n");
  std::cout << "AP " << rep.ap << " AP50 " << rep.ap50 << " AP75 " << rep.ap75 << " AP_S "
            << rep.ap_s << " over " << rep.n_images << " images\n";
  return 0;
}

int cmd_ablate(const CommonFlags& f) {
  swindet::RunConfig cfg = resolve_config(f);
  const std::string out = f.out_dir.empty() ? "runs/ablate" : f.out_dir;
  std::vector<swindet::AblationRow> rows =
      swindet::ablate_window(cfg, {2, 3, 5}, out, &std::cout);
  std::cout << swindet::ablation_csv(rows);
  return 0;
}

int cmd_grad_check() {
  swindet::GradSuiteResult r = swindet::run_grad_check_suite(&std::cout);
  return r.all_pass ? 0 : 1;
}

int cmd_plot(const CommonFlags& f) {
  namespace fs = std::filesystem;
  const std::string run_dir = f.out_dir.empty() ? "runs/train" : f.out_dir;
  const std::string plots = (fs::path(run_dir) / "plots").string();
  bool wrote = false;
  const std::string metrics = (fs::path(run_dir) / "metrics.jsonl").string();
  if (fs::exists(metrics)) {
    swindet::plot_training_curves(swindet::load_metrics_jsonl(metrics), plots);
    std::cout << "wrote loss_curves.svg and val_ap50.svg to " << plots << "\n";
    wrote = true;
  }
  const std::string ablation = (fs::path(run_dir) / "ablation.csv").string();
  if (fs::exists(ablation)) {
    std::ifstream in(ablation);
    std::stringstream ss;
    ss << in.rdbuf();
    std::vector<swindet::AblationRow> rows = swindet::parse_ablation_csv(ss.str());
    std::vector<std::string> labels;
    std::vector<double> values;
    for (const auto& r : rows) {
      labels.push_back(std::to_string(r.window));
      values.push_back(r.report.ap_s);
    }
    fs::create_directories(plots);
    swindet::write_text_file((fs::path(plots) / "ap_s_by_window.svg").string(),
                             swindet::svg_bar_chart(labels, values, "AP_S by neck window", "AP_S"));
    std::cout << "wrote ap_s_by_window.svg to " << plots << "\n";
    wrote = true;
  }
  if (!wrote)
    throw swindet::usage_error("nothing to plot: no metrics.jsonl or ablation.csv in " + run_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"small-object detector pipeline"};
  app.require_subcommand(1);

  CommonFlags f;
  CLI::App* synth = app.add_subcommand("synth", "generate the synthetic train/val datasets");
  CLI::App* train = app.add_subcommand("train", "train a detector");
  CLI::App* mine = app.add_subcommand("mine-hn", "mine hard negatives into the train manifest");
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the val split");
  CLI::App* ablate = app.add_subcommand("ablate", "train once per neck window size {2,3,5}");
  CLI::App* gradcheck = app.add_subcommand("grad-check", "run the finite-difference suite");
  CLI::App* plot = app.add_subcommand("plot", "render SVG charts for a run directory");
  for (CLI::App* cmd : {synth, train, mine, eval, ablate, gradcheck, plot})
    add_common_flags(cmd, f);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(f);
    if (train->parsed()) return cmd_train(f);
    if (mine->parsed()) return cmd_mine_hn(f);
    if (eval->parsed()) return cmd_eval(f);
    if (ablate->parsed()) return cmd_ablate(f);
    if (gradcheck->parsed()) return cmd_grad_check();
    if (plot->parsed()) return cmd_plot(f);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
