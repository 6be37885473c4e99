// hsfusion: synthetic data, two-stage training, fusion and evaluation.
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hsf/config.hpp"
#include "hsf/errors.hpp"
#include "hsf/pipeline.hpp"

namespace fs = std::filesystem;
using namespace hsf;

namespace {

struct Common {
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string data_root;
  std::vector<std::string> sets;

  RunConfig load() const {
    Overrides ov;
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      ov.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) ov.emplace_back("seed", std::to_string(*seed));
    if (!out_dir.empty()) ov.emplace_back("out_dir", out_dir);
    if (!data_root.empty()) ov.emplace_back("data_root", data_root);
    std::optional<fs::path> file;
    if (!config_path.empty()) file = config_path;
    std::optional<Preset> p;
    if (!preset.empty()) p = parse_preset(preset);
    return load_config(file, ov, p);
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--preset", c.preset, "model scale preset")->check(CLI::IsMember({"paper", "toy"}));
  cmd->add_option("--seed", c.seed, "run seed");
  cmd->add_option("--out", c.out_dir, "output directory for checkpoints and reports");
  cmd->add_option("--data", c.data_root, "dataset root holding train/ and test/");
  cmd->add_option("--set", c.sets, "override a config key, key=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Infrared/visible image fusion with semantic feature extractors"};
  app.require_subcommand(1);
  Common common;

  auto* synth = app.add_subcommand("synth", "write a synthetic labelled dataset");
  add_common(synth, common);

  auto* train_cgfe = app.add_subcommand("train-cgfe", "train the semantic feature extractor of one modality");
  add_common(train_cgfe, common);
  std::string modality;
  bool resume = false;
  train_cgfe->add_option("--modality", modality, "ir or vis")->required()->check(CLI::IsMember({"ir", "vis"}));
  train_cgfe->add_flag("--resume", resume, "continue from the checkpoint in the output directory");

  auto* train_fusion = app.add_subcommand("train-fusion", "train the fusion stage on frozen extractors");
  add_common(train_fusion, common);
  std::string cgfe_ir, cgfe_vis, fusion_ckpt;
  train_fusion->add_option("--cgfe-ir", cgfe_ir, "infrared extractor checkpoint (default <out>/cgfe_ir.ckpt)");
  train_fusion->add_option("--cgfe-vis", cgfe_vis, "visible extractor checkpoint (default <out>/cgfe_vis.ckpt)");
  train_fusion->add_flag("--resume", resume, "continue from the checkpoint in the output directory");

  auto* fuse = app.add_subcommand("fuse", "fuse every pair of a split directory");
  add_common(fuse, common);
  std::string input_dir, output_dir;
  bool masks = false;
  fuse->add_option("--input", input_dir, "split directory with Infrared/ and Visible/")->required();
  fuse->add_option("--output", output_dir, "where fused PNGs go (default <out>/fused)");
  fuse->add_option("--cgfe-ir", cgfe_ir, "infrared extractor checkpoint");
  fuse->add_option("--cgfe-vis", cgfe_vis, "visible extractor checkpoint");
  fuse->add_option("--fusion", fusion_ckpt, "fusion checkpoint (default <out>/fusion.ckpt)");
  fuse->add_flag("--masks", masks, "also write thermal masks to <output>/masks");

  auto* evaluate = app.add_subcommand("evaluate", "score fused images against their sources");
  add_common(evaluate, common);
  std::string fused_dir, source_dir, report, seg_ckpt, pred_dir;
  evaluate->add_option("--fused", fused_dir, "directory of fused PNGs")->required();
  evaluate->add_option("--source", source_dir, "split directory with the source pairs")->required();
  evaluate->add_option("--report", report, "metrics CSV path (default <out>/metrics.csv)");
  evaluate->add_option("--seg-ckpt", seg_ckpt, "extractor checkpoint used to segment fused images");
  evaluate->add_option("--pred-dir", pred_dir, "directory of stored label predictions");

  CLI11_PARSE(app, argc, argv);

  const auto log = pipeline::stderr_logger();
  try {
    pipeline::configure_threads();
    const RunConfig cfg = common.load();
    auto ckpt_or = [&](const std::string& given, const fs::path& fallback) {
      return given.empty() ? fallback : fs::path(given);
    };

    if (*synth) {
      pipeline::cmd_synth(cfg, log);
    } else if (*train_cgfe) {
      const auto path = pipeline::cmd_train_cgfe(cfg, cgfe::parse_modality(modality), resume, log);
      log("wrote " + path.string());
    } else if (*train_fusion) {
      const auto path = pipeline::cmd_train_fusion(
          cfg, ckpt_or(cgfe_ir, pipeline::cgfe_checkpoint_path(cfg, cgfe::Modality::Infrared)),
          ckpt_or(cgfe_vis, pipeline::cgfe_checkpoint_path(cfg, cgfe::Modality::Visible)), resume, log);
      log("wrote " + path.string());
    } else if (*fuse) {
      const auto result = pipeline::cmd_fuse(
          cfg, ckpt_or(cgfe_ir, pipeline::cgfe_checkpoint_path(cfg, cgfe::Modality::Infrared)),
          ckpt_or(cgfe_vis, pipeline::cgfe_checkpoint_path(cfg, cgfe::Modality::Visible)),
          ckpt_or(fusion_ckpt, pipeline::fusion_checkpoint_path(cfg)), input_dir,
          ckpt_or(output_dir, cfg.out_dir / "fused"), masks, log);
      return result.failures.empty() ? 0 : 1;
    } else if (*evaluate) {
      pipeline::EvaluateOptions opts;
      opts.fused_dir = fused_dir;
      opts.source_dir = source_dir;
      opts.output_csv = ckpt_or(report, cfg.out_dir / "metrics.csv");
      if (!seg_ckpt.empty()) opts.seg_checkpoint = fs::path(seg_ckpt);
      if (!pred_dir.empty()) opts.prediction_dir = fs::path(pred_dir);
      pipeline::cmd_evaluate(cfg, opts, log);
    }
  } catch (const hsf::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
