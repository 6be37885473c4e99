#include "hsf/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <set>

#include "hsf/errors.hpp"
#include "hsf/png_io.hpp"

namespace hsf::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

Logger stderr_logger() {
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

void configure_threads() {
  const char* env = std::getenv("HSF_NUM_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("HSF_NUM_THREADS must be a positive integer, got '") + env + "'");
  torch::set_num_threads(static_cast<int>(n));
}

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

json palette_json(const LabelPalette& p) { return {{"names", p.names}, {"thermal_ids", p.thermal_ids}}; }

LabelPalette palette_from(const json& j) {
  LabelPalette p;
  p.names = j.at("names").get<std::vector<std::string>>();
  p.thermal_ids = j.at("thermal_ids").get<std::vector<int>>();
  p.validate();
  return p;
}

json adam_json(const AdamSettings& a) { return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}}; }

AdamSettings adam_from(const json& j) {
  AdamSettings a;
  a.lr = j.at("lr").get<double>();
  a.beta1 = j.at("beta1").get<double>();
  a.beta2 = j.at("beta2").get<double>();
  return a;
}

json state_json(const EpochState& s) {
  return {{"epochs_done", s.epochs_done}, {"steps", s.steps}, {"history", s.history}};
}

EpochState state_from(const json& meta) {
  EpochState s;
  s.epochs_done = meta.at("epochs_done").get<std::int64_t>();
  s.steps = meta.at("steps").get<std::int64_t>();
  s.history = meta.at("history").get<std::vector<std::vector<double>>>();
  return s;
}

void store_adam(Checkpoint& ckpt, const std::string& prefix, const Adam& opt) {
  const auto moments = opt.moments();
  for (std::size_t i = 0; i < moments.size(); ++i) {
    if (!moments[i]) continue;
    const std::string key = prefix + "/" + std::to_string(i);
    ckpt.add(key + "/step", torch::tensor({moments[i]->step}, torch::kInt64));
    ckpt.add(key + "/exp_avg", moments[i]->exp_avg);
    ckpt.add(key + "/exp_avg_sq", moments[i]->exp_avg_sq);
  }
}

void restore_adam(const Checkpoint& ckpt, const std::string& prefix, Adam& opt) {
  std::vector<std::optional<Adam::Moments>> moments(opt.params().size());
  for (std::size_t i = 0; i < moments.size(); ++i) {
    const std::string key = prefix + "/" + std::to_string(i);
    if (!ckpt.has(key + "/step")) continue;
    Adam::Moments m;
    m.step = ckpt.blob(key + "/step")[0].item<std::int64_t>();
    m.exp_avg = ckpt.blob(key + "/exp_avg").clone();
    m.exp_avg_sq = ckpt.blob(key + "/exp_avg_sq").clone();
    if (!m.exp_avg.sizes().equals(opt.params()[i].sizes()))
      throw FormatError("optimizer state " + key + " does not match its parameter");
    moments[i] = std::move(m);
  }
  opt.restore(moments);
}

std::string require_kind(const Checkpoint& ckpt, const std::string& kind) {
  const auto k = ckpt.meta.value("kind", std::string{});
  if (k != kind) throw ConfigError("expected a " + kind + " checkpoint, found '" + k + "'");
  return k;
}

double lr_at(const RunConfig& cfg, std::int64_t epoch, std::int64_t total) {
  if (!cfg.lr_decay || total <= 1) return cfg.lr;
  // constant for the first half, then linear towards zero
  const std::int64_t hold = total / 2;
  if (epoch < hold) return cfg.lr;
  const double span = static_cast<double>(total - hold + 1);
  return cfg.lr * (1.0 - static_cast<double>(epoch - hold + 1) / span);
}

void write_history_csv(const fs::path& path, const char* header, const std::vector<std::vector<double>>& rows) {
  std::string text = std::string(header) + "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) text += ',';
      text += i == 0 ? std::to_string(static_cast<std::int64_t>(row[i])) : fmt(row[i]);
    }
    text += '\n';
  }
  write_text(path, text);
}

torch::Tensor center_crop(const torch::Tensor& t, std::int64_t h, std::int64_t w) {
  const auto H = t.size(-2), W = t.size(-1);
  const auto top = (H - h) / 2, left = (W - w) / 2;
  return t.narrow(-2, top, h).narrow(-1, left, w).contiguous();
}

void check_compatible(const RunConfig& cfg, const cgfe::CgfeConfig& have, const std::string& what) {
  const auto want = cfg.cgfe_config();
  if (want.base_ch != have.base_ch || want.unet_depth != have.unet_depth ||
      want.resnet_blocks != have.resnet_blocks || want.dy_layers != have.dy_layers)
    throw ConfigError(what + " was trained at a different model scale than the current config");
}

}  // namespace

// --- checkpoints -----------------------------------------------------------

std::uint64_t fingerprint(const cgfe::CgfeModel& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, params] : m.networks()) {
    h ^= hash_string(name) + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    h ^= hsf::fingerprint(*params) + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  }
  return h;
}

Checkpoint save_cgfe(const cgfe::CgfeModel& m, const cgfe::CgfeOptimizers* opt, const EpochState& state,
                     const RunConfig& cfg) {
  Checkpoint ckpt;
  const auto& c = m.config;
  ckpt.meta = state_json(state);
  ckpt.meta["kind"] = "cgfe";
  ckpt.meta["preset"] = to_string(cfg.preset);
  ckpt.meta["modality"] = cgfe::to_string(m.modality);
  ckpt.meta["palette"] = palette_json(m.palette);
  ckpt.meta["model"] = {{"base_ch", c.base_ch},
                        {"unet_depth", c.unet_depth},
                        {"resnet_blocks", c.resnet_blocks},
                        {"dy_layers", c.dy_layers},
                        {"lambda_sere", c.lambda_sere},
                        {"cycle_weight", c.cycle_weight},
                        {"adversarial_weight", c.adversarial_weight},
                        {"reverse_cycle", c.reverse_cycle},
                        {"ohem_threshold", c.ohem_threshold},
                        {"ohem_min_kept_divisor", c.ohem_min_kept_divisor},
                        {"adam", adam_json(c.adam)}};
  ckpt.meta["rng"] = {{"seed", cfg.seed}, {"epoch", state.epochs_done}};
  ckpt.meta["config"] = cfg.to_text();
  for (const auto& [name, params] : m.networks()) store_params(ckpt, name, *params);
  if (opt) {
    store_adam(ckpt, "adam/G", opt->g);
    store_adam(ckpt, "adam/F", opt->f);
    store_adam(ckpt, "adam/Dx", opt->dx);
    store_adam(ckpt, "adam/Dy", opt->dy);
  }
  return ckpt;
}

cgfe::CgfeModel load_cgfe(const Checkpoint& ckpt, EpochState* state) {
  require_kind(ckpt, "cgfe");
  const auto& mj = ckpt.meta.at("model");
  cgfe::CgfeConfig c;
  c.base_ch = mj.at("base_ch").get<std::int64_t>();
  c.unet_depth = mj.at("unet_depth").get<std::int64_t>();
  c.resnet_blocks = mj.at("resnet_blocks").get<std::int64_t>();
  c.dy_layers = mj.at("dy_layers").get<std::int64_t>();
  c.lambda_sere = mj.at("lambda_sere").get<double>();
  c.cycle_weight = mj.at("cycle_weight").get<double>();
  c.adversarial_weight = mj.at("adversarial_weight").get<double>();
  c.reverse_cycle = mj.at("reverse_cycle").get<bool>();
  c.ohem_threshold = mj.at("ohem_threshold").get<double>();
  c.ohem_min_kept_divisor = mj.at("ohem_min_kept_divisor").get<std::int64_t>();
  c.adam = adam_from(mj.at("adam"));
  const auto modality = cgfe::parse_modality(ckpt.meta.at("modality").get<std::string>());
  auto m = cgfe::CgfeModel::create(modality, palette_from(ckpt.meta.at("palette")), c, 0);
  for (auto& [name, params] : m.networks()) restore_params(ckpt, name, *params);
  if (state) *state = state_from(ckpt.meta);
  return m;
}

void restore_cgfe_optimizers(const Checkpoint& ckpt, cgfe::CgfeOptimizers& opt) {
  restore_adam(ckpt, "adam/G", opt.g);
  restore_adam(ckpt, "adam/F", opt.f);
  restore_adam(ckpt, "adam/Dx", opt.dx);
  restore_adam(ckpt, "adam/Dy", opt.dy);
}

Checkpoint save_fusion(const fusion::FusionModel& fm, const Adam* opt, const EpochState& state,
                       const RunConfig& cfg) {
  Checkpoint ckpt;
  const auto& c = fm.config;
  ckpt.meta = state_json(state);
  ckpt.meta["kind"] = "fusion";
  ckpt.meta["preset"] = to_string(cfg.preset);
  ckpt.meta["model"] = {{"feature_channels", fm.feature_channels},
                        {"reduction", c.reduction},
                        {"mu", c.mu},
                        {"rho", c.rho},
                        {"eta", c.eta},
                        {"omega0", c.omega0},
                        {"gamma0", c.gamma0},
                        {"adam", adam_json(c.adam)}};
  ckpt.meta["rng"] = {{"seed", cfg.seed}, {"epoch", state.epochs_done}};
  ckpt.meta["config"] = cfg.to_text();
  for (const auto& [name, params] : fm.networks()) store_params(ckpt, name, *params);
  ckpt.add("omega", fm.omega.detach());
  ckpt.add("gamma", fm.gamma.detach());
  if (opt) store_adam(ckpt, "adam/fusion", *opt);
  return ckpt;
}

fusion::FusionModel load_fusion(const Checkpoint& ckpt, EpochState* state) {
  require_kind(ckpt, "fusion");
  const auto& mj = ckpt.meta.at("model");
  fusion::FusionConfig c;
  c.reduction = mj.at("reduction").get<std::int64_t>();
  c.mu = mj.at("mu").get<double>();
  c.rho = mj.at("rho").get<double>();
  c.eta = mj.at("eta").get<double>();
  c.omega0 = mj.at("omega0").get<double>();
  c.gamma0 = mj.at("gamma0").get<double>();
  c.adam = adam_from(mj.at("adam"));
  auto fm = fusion::FusionModel::create(mj.at("feature_channels").get<std::int64_t>(), c, 0);
  for (auto& [name, params] : fm.networks()) restore_params(ckpt, name, *params);
  {
    torch::NoGradGuard guard;
    for (auto* p : {&fm.omega, &fm.gamma}) {
      const auto& src = ckpt.blob(p == &fm.omega ? "omega" : "gamma");
      if (!src.sizes().equals(p->sizes())) throw FormatError("blend weight has the wrong shape");
      p->copy_(src);
    }
  }
  if (state) *state = state_from(ckpt.meta);
  return fm;
}

void restore_fusion_optimizer(const Checkpoint& ckpt, Adam& opt) { restore_adam(ckpt, "adam/fusion", opt); }

// --- data ------------------------------------------------------------------

PairLoader::PairLoader(DatasetSplit split, LabelPalette palette, const RunConfig& cfg)
    : split_(std::move(split)), palette_(std::move(palette)), cfg_(cfg) {}

ImagePair PairLoader::load(const std::string& id) const {
  ImagePair p = load_pair(split_, id, palette_);
  const auto h = cfg_.height, w = cfg_.width;
  if (p.height() == h && p.width() == w) return p;
  if (!cfg_.crop || p.height() < h || p.width() < w)
    throw SizeError(id + ": image is " + std::to_string(p.height()) + "x" + std::to_string(p.width()) +
                    ", config expects " + std::to_string(h) + "x" + std::to_string(w));
  p.ir = center_crop(p.ir, h, w);
  p.vis = center_crop(p.vis, h, w);
  if (p.label) p.label = center_crop(*p.label, h, w);
  return p;
}

std::vector<std::vector<std::string>> PairLoader::epoch_batches(std::int64_t epoch) const {
  std::vector<std::string> order = split_.ids;
  std::mt19937_64 rng(mix(cfg_.seed, 1000 + static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::vector<std::vector<std::string>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg_.batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(cfg_.batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

Batch PairLoader::batch(const std::vector<std::string>& ids, std::int64_t epoch) const {
  std::vector<ImagePair> pairs;
  pairs.reserve(ids.size());
  for (const auto& id : ids) {
    ImagePair p = load(id);
    if (cfg_.hflip && (mix(cfg_.seed ^ hash_string(id), 5000 + static_cast<std::uint64_t>(epoch)) & 1)) {
      p.ir = p.ir.flip({-1}).contiguous();
      p.vis = p.vis.flip({-1}).contiguous();
      if (p.label) p.label = p.label->flip({-1}).contiguous();
    }
    pairs.push_back(std::move(p));
  }
  std::vector<const ImagePair*> ptrs;
  for (const auto& p : pairs) ptrs.push_back(&p);
  return collate(ptrs);
}

// --- commands --------------------------------------------------------------

SynthResult cmd_synth(const RunConfig& cfg, const Logger& log) {
  cfg.validate();
  const auto palette = LabelPalette::fmb();
  SynthResult result;
  std::string manifest = "split,id,seed\n";
  const std::pair<const char*, std::int64_t> splits[] = {{"train", cfg.n_train}, {"test", cfg.n_test}};
  std::uint64_t stream = 0;
  for (const auto& [split, count] : splits) {
    const fs::path dir = cfg.data_root / split;
    for (std::int64_t i = 0; i < count; ++i, ++stream) {
      char id[24];
      std::snprintf(id, sizeof id, "%05lld", static_cast<long long>(i));
      const std::uint64_t scene_seed = mix(cfg.seed, stream);
      ImagePair pair = synth_scene(scene_seed, cfg.height, cfg.width, palette);
      pair.id = id;
      try {
        save_pair(dir, pair);
      } catch (const IoError& e) {
        throw IoError(std::string(e.what()) + " (writing " + (dir / id).string() + ")");
      }
      manifest += std::string(split) + "," + id + "," + std::to_string(scene_seed) + "\n";
      (std::string(split) == "train" ? result.train_ids : result.test_ids).push_back(id);
    }
  }
  write_text(cfg.data_root / "manifest.csv", manifest);
  say(log, "synth: wrote " + std::to_string(result.train_ids.size()) + " train and " +
               std::to_string(result.test_ids.size()) + " test pairs under " + cfg.data_root.string());
  return result;
}

fs::path cgfe_checkpoint_path(const RunConfig& cfg, cgfe::Modality m) {
  return cfg.out_dir / ("cgfe_" + cgfe::to_string(m) + ".ckpt");
}

fs::path fusion_checkpoint_path(const RunConfig& cfg) { return cfg.out_dir / "fusion.ckpt"; }

fs::path cmd_train_cgfe(const RunConfig& cfg, cgfe::Modality modality, bool resume, const Logger& log) {
  cfg.validate();
  const auto palette = LabelPalette::fmb();
  DatasetSplit split;
  try {
    split = DatasetSplit::discover(cfg.data_root, "train", SplitRole::Train);
  } catch (const NotFound& e) {
    throw ConfigError(std::string("semantic reinforce training needs a labelled train split: ") + e.what());
  }
  if (split.ids.empty()) throw ConfigError("train split under " + cfg.data_root.string() + " is empty");
  const PairLoader loader(split, palette, cfg);

  const fs::path ckpt_path = cgfe_checkpoint_path(cfg, modality);
  const fs::path csv_path = cfg.out_dir / ("cgfe_" + cgfe::to_string(modality) + "_loss.csv");

  EpochState state;
  cgfe::CgfeModel model;
  std::optional<Checkpoint> resumed;
  if (resume && fs::exists(ckpt_path)) {
    resumed = Checkpoint::load(ckpt_path);
    model = load_cgfe(*resumed, &state);
    if (model.modality != modality) throw ConfigError(ckpt_path.string() + " holds the other modality");
    check_compatible(cfg, model.config, ckpt_path.string());
    model.config = cfg.cgfe_config();
  } else {
    model = cgfe::CgfeModel::create(modality, palette, cfg.cgfe_config(), cfg.seed);
  }
  cgfe::CgfeOptimizers opt(model);
  if (resumed) restore_cgfe_optimizers(*resumed, opt);

  const std::int64_t total_epochs = cfg.epochs_cgfe;
  for (std::int64_t epoch = state.epochs_done; epoch < total_epochs; ++epoch) {
    const double lr = lr_at(cfg, epoch, total_epochs);
    opt.set_lr(lr);
    std::vector<double> sums(13, 0.0);
    std::int64_t nb = 0;
    for (const auto& ids : loader.epoch_batches(epoch)) {
      const Batch b = loader.batch(ids, epoch);
      const auto r = cgfe::train_step_cgfe(model, b, opt);
      const double vals[13] = {r.total,  r.l_cg,     r.adv_g,      r.adv_f,    r.cycle,
                               r.cycle_reverse, r.l_sere, r.l_str, r.ssim_term, r.sobel_term,
                               r.lambda, r.loss_dx,  r.loss_dy};
      for (int i = 0; i < 13; ++i) sums[i] += vals[i];
      ++nb;
      ++state.steps;
    }
    std::vector<double> row{static_cast<double>(epoch + 1)};
    for (double s : sums) row.push_back(s / static_cast<double>(nb));
    row.push_back(lr);
    state.history.push_back(row);
    state.epochs_done = epoch + 1;
    say(log, "train-cgfe " + cgfe::to_string(modality) + ": epoch " + std::to_string(epoch + 1) + "/" +
                 std::to_string(total_epochs) + " total=" + fmt(row[1]) + " l_sere=" + fmt(row[7]) +
                 " cycle=" + fmt(row[5]));
    if (cfg.checkpoint_every > 0 && state.epochs_done % cfg.checkpoint_every == 0 &&
        state.epochs_done < total_epochs) {
      save_cgfe(model, &opt, state, cfg).save(ckpt_path);
      write_history_csv(csv_path, kCgfeCsvHeader, state.history);
    }
  }
  save_cgfe(model, &opt, state, cfg).save(ckpt_path);
  write_history_csv(csv_path, kCgfeCsvHeader, state.history);
  return ckpt_path;
}

fs::path cmd_train_fusion(const RunConfig& cfg, const fs::path& cgfe_ir_path, const fs::path& cgfe_vis_path,
                          bool resume, const Logger& log) {
  cfg.validate();
  const auto cgfe_ir = load_cgfe(Checkpoint::load(cgfe_ir_path));
  const auto cgfe_vi = load_cgfe(Checkpoint::load(cgfe_vis_path));
  if (cgfe_ir.modality != cgfe::Modality::Infrared)
    throw ConfigError(cgfe_ir_path.string() + " is not an infrared CGFE checkpoint");
  if (cgfe_vi.modality != cgfe::Modality::Visible)
    throw ConfigError(cgfe_vis_path.string() + " is not a visible CGFE checkpoint");
  if (cgfe_ir.config.base_ch != cgfe_vi.config.base_ch ||
      cgfe_ir.config.resnet_blocks != cgfe_vi.config.resnet_blocks ||
      cgfe_ir.config.unet_depth != cgfe_vi.config.unet_depth)
    throw ConfigError("CGFE checkpoints differ in model scale");
  if (cgfe_ir.palette.names != cgfe_vi.palette.names || cgfe_ir.palette.thermal_ids != cgfe_vi.palette.thermal_ids)
    throw ConfigError("CGFE checkpoints use different label palettes");
  const std::int64_t channels = fusion::tap_channels(cgfe_ir.config.base_ch);
  if (channels % cfg.frb_reduction != 0)
    throw ConfigError("frb_reduction " + std::to_string(cfg.frb_reduction) + " does not divide the " +
                      std::to_string(channels) + " tap channels of the checkpoints");

  const std::uint64_t fp_ir = fingerprint(cgfe_ir), fp_vi = fingerprint(cgfe_vi);

  const auto split = DatasetSplit::discover(cfg.data_root, "train", SplitRole::Test);
  if (split.ids.empty()) throw ConfigError("train split under " + cfg.data_root.string() + " is empty");
  const PairLoader loader(split, cgfe_ir.palette, cfg);

  const fs::path ckpt_path = fusion_checkpoint_path(cfg);
  const fs::path csv_path = cfg.out_dir / "fusion_loss.csv";

  EpochState state;
  fusion::FusionModel fm;
  std::optional<Checkpoint> resumed;
  if (resume && fs::exists(ckpt_path)) {
    resumed = Checkpoint::load(ckpt_path);
    fm = load_fusion(*resumed, &state);
    if (fm.feature_channels != channels || fm.config.reduction != cfg.frb_reduction)
      throw ConfigError(ckpt_path.string() + " was trained at a different model scale");
    fm.config = cfg.fusion_config();
  } else {
    fm = fusion::FusionModel::create(channels, cfg.fusion_config(), mix(cfg.seed, 23));
  }
  Adam opt(fm.trainable(), fm.config.adam);
  if (resumed) restore_fusion_optimizer(*resumed, opt);

  const std::int64_t total_epochs = cfg.epochs_fusion;
  for (std::int64_t epoch = state.epochs_done; epoch < total_epochs; ++epoch) {
    const double lr = lr_at(cfg, epoch, total_epochs);
    opt.set_lr(lr);
    std::vector<double> sums(4, 0.0);
    std::int64_t nb = 0;
    fusion::GeoLossRecord last;
    for (const auto& ids : loader.epoch_batches(epoch)) {
      const Batch b = loader.batch(ids, epoch);
      last = fusion::train_step_fusion(fm, cgfe_ir, cgfe_vi, b, opt);
      sums[0] += last.total;
      sums[1] += last.ssim_term;
      sums[2] += last.mse_vis_term;
      sums[3] += last.mse_ir_term;
      ++nb;
      ++state.steps;
    }
    const auto c = fm.config;
    std::vector<double> row{static_cast<double>(epoch + 1)};
    for (double s : sums) row.push_back(s / static_cast<double>(nb));
    row.insert(row.end(), {c.mu, c.rho, c.eta, torch::sigmoid(fm.omega).item<double>(),
                           torch::sigmoid(fm.gamma).item<double>(), lr});
    state.history.push_back(row);
    state.epochs_done = epoch + 1;
    say(log, "train-fusion: epoch " + std::to_string(epoch + 1) + "/" + std::to_string(total_epochs) +
                 " total=" + fmt(row[1]) + " sigma_omega=" + fmt(row[8]) + " sigma_gamma=" + fmt(row[9]));
    if (cfg.checkpoint_every > 0 && state.epochs_done % cfg.checkpoint_every == 0 &&
        state.epochs_done < total_epochs) {
      auto ck = save_fusion(fm, &opt, state, cfg);
      ck.meta["cgfe_fingerprints"] = {{"ir", std::to_string(fp_ir)}, {"vis", std::to_string(fp_vi)}};
      ck.save(ckpt_path);
      write_history_csv(csv_path, kFusionCsvHeader, state.history);
    }
  }

  if (fingerprint(cgfe_ir) != fp_ir || fingerprint(cgfe_vi) != fp_vi)
    throw ContractError("CGFE parameters changed during fusion training");
  auto ck = save_fusion(fm, &opt, state, cfg);
  ck.meta["cgfe_fingerprints"] = {{"ir", std::to_string(fp_ir)}, {"vis", std::to_string(fp_vi)}};
  ck.save(ckpt_path);
  write_history_csv(csv_path, kFusionCsvHeader, state.history);
  return ckpt_path;
}

FuseResult cmd_fuse(const RunConfig& cfg, const fs::path& cgfe_ir_path, const fs::path& cgfe_vis_path,
                    const fs::path& fusion_path, const fs::path& input_dir, const fs::path& output_dir,
                    bool dump_masks, const Logger& log) {
  const auto cgfe_ir = load_cgfe(Checkpoint::load(cgfe_ir_path));
  const auto cgfe_vi = load_cgfe(Checkpoint::load(cgfe_vis_path));
  const auto fm = load_fusion(Checkpoint::load(fusion_path));
  if (cgfe_ir.modality != cgfe::Modality::Infrared || cgfe_vi.modality != cgfe::Modality::Visible)
    throw ConfigError("fuse needs an infrared and a visible CGFE checkpoint, in that order");
  if (fm.feature_channels != fusion::tap_channels(cgfe_ir.config.base_ch) ||
      cgfe_ir.config.base_ch != cgfe_vi.config.base_ch)
    throw ConfigError("fusion and CGFE checkpoints differ in model scale");

  // Ids come from the Infrared folder; a pair missing its visible half is a per-pair failure.
  DatasetSplit split;
  split.dir = input_dir;
  split.role = SplitRole::Test;
  const fs::path ir_dir = input_dir / "Infrared";
  if (!fs::is_directory(ir_dir)) throw NotFound("no Infrared directory in " + input_dir.string());
  for (const auto& entry : fs::directory_iterator(ir_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      split.ids.push_back(entry.path().stem().string());
  std::sort(split.ids.begin(), split.ids.end());
  const PairLoader loader(split, cgfe_ir.palette, cfg);

  FuseResult result;
  for (const auto& id : split.ids) {
    try {
      const ImagePair pair = loader.load(id);
      const auto fused = fusion::fuse_pair(fm, cgfe_ir, cgfe_vi, pair);
      const fs::path out = output_dir / (id + ".png");
      write_png(out, tensor_to_raster(fused.rgb));
      if (dump_masks) {
        const auto m = fused.mask.m.to(torch::kFloat32).div(255.0);
        write_png(output_dir / "masks" / (id + ".png"), tensor_to_raster(m));
      }
      result.written.push_back(id);
    } catch (const std::exception& e) {
      say(log, "fuse: " + id + " failed: " + e.what());
      result.failures.emplace_back(id, e.what());
    }
  }
  say(log, "fuse: wrote " + std::to_string(result.written.size()) + " images to " + output_dir.string() +
               (result.failures.empty() ? "" : ", " + std::to_string(result.failures.size()) + " failed"));
  return result;
}

metrics::Plane to_plane(const torch::Tensor& t) {
  auto x = t.detach().to(torch::kFloat64).contiguous();
  if (x.dim() == 3) x = x.squeeze(0);
  if (x.dim() != 2) throw SizeError("to_plane expects a [1,H,W] or [H,W] tensor");
  metrics::Plane p;
  p.height = static_cast<int>(x.size(0));
  p.width = static_cast<int>(x.size(1));
  p.values.assign(x.data_ptr<double>(), x.data_ptr<double>() + x.numel());
  return p;
}

EvaluateResult cmd_evaluate(const RunConfig& cfg, const EvaluateOptions& opts, const Logger& log) {
  const auto source = DatasetSplit::discover(opts.source_dir, "", SplitRole::Test);
  std::vector<std::string> fused_ids;
  if (!fs::is_directory(opts.fused_dir)) throw NotFound("no fused directory " + opts.fused_dir.string());
  for (const auto& entry : fs::directory_iterator(opts.fused_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      fused_ids.push_back(entry.path().stem().string());
  std::sort(fused_ids.begin(), fused_ids.end());
  {
    const std::set<std::string> src(source.ids.begin(), source.ids.end());
    const std::set<std::string> fus(fused_ids.begin(), fused_ids.end());
    for (const auto& id : fused_ids)
      if (!src.count(id)) throw AlignmentError("fused image " + id + " has no source pair");
    for (const auto& id : source.ids)
      if (!fus.count(id)) throw AlignmentError("source pair " + id + " has no fused image");
  }

  LabelPalette palette = LabelPalette::fmb();
  std::optional<cgfe::CgfeModel> seg_model;
  if (opts.seg_checkpoint) {
    seg_model = load_cgfe(Checkpoint::load(*opts.seg_checkpoint));
    palette = seg_model->palette;
  }
  const bool want_iou = seg_model || opts.prediction_dir;
  std::optional<metrics::ConfusionMatrix> confusion;
  if (want_iou) confusion.emplace(palette.size());
  bool any_label = false;

  const PairLoader loader(source, palette, cfg);
  EvaluateResult result;
  for (const auto& id : fused_ids) {
    const ImagePair pair = loader.load(id);
    const Raster8 raster = read_png(opts.fused_dir / (id + ".png"));
    torch::Tensor fused = raster_to_tensor(raster);
    if (fused.size(1) != pair.height() || fused.size(2) != pair.width())
      throw AlignmentError("fused image " + id + " differs in size from its sources");
    const torch::Tensor fused_y = fused.size(0) == 3 ? luminance(fused) : fused;
    result.rows.push_back(
        metrics::evaluate_fusion(id, to_plane(fused_y), to_plane(pair.ir), to_plane(luminance(pair.vis))));

    if (!want_iou || !pair.label) continue;
    torch::Tensor pred;
    if (seg_model) {
      torch::NoGradGuard guard;
      const bool rgb_in = cgfe::image_channels(seg_model->modality) == 3;
      torch::Tensor input = rgb_in ? (fused.size(0) == 3 ? fused : fused.expand({3, -1, -1})) : fused_y;
      pred = argmax_decode(cgfe::segment(*seg_model, to_signed(input.unsqueeze(0)))).squeeze(0);
    } else {
      const fs::path pf = *opts.prediction_dir / (id + ".png");
      const Raster8 pr = read_png(pf);
      if (pr.channels != 1) throw FormatError(pf.string() + ": prediction must be grayscale");
      pred = torch::from_blob(const_cast<std::uint8_t*>(pr.pixels.data()), {pr.height, pr.width}, torch::kUInt8)
                 .to(torch::kInt64);
      if (cfg.crop && (pred.size(0) != pair.height() || pred.size(1) != pair.width()))
        pred = center_crop(pred, pair.height(), pair.width());
      if (pred.size(0) != pair.height() || pred.size(1) != pair.width())
        throw AlignmentError("prediction " + id + " differs in size from its label");
      if (pred.max().item<std::int64_t>() >= palette.size())
        throw LabelRangeError(pf.string() + ": prediction outside the palette");
    }
    pred = pred.contiguous();
    const torch::Tensor truth = pair.label->contiguous();
    confusion->add({pred.data_ptr<std::int64_t>(), static_cast<std::size_t>(pred.numel())},
                   {truth.data_ptr<std::int64_t>(), static_cast<std::size_t>(truth.numel())});
    any_label = true;
  }
  result.summary = metrics::summarize(result.rows);

  std::string text = std::string(metrics::kReportHeader) + "\n";
  for (const auto& r : result.rows) text += metrics::format_row(r) + "\n";
  text += metrics::format_row(result.summary) + "\n";
  write_text(opts.output_csv, text);

  if (want_iou && any_label) {
    result.iou = confusion->iou();
    std::string iou_text = "class,name,iou\n";
    for (int c = 0; c < palette.size(); ++c) {
      const auto& v = result.iou->per_class[static_cast<std::size_t>(c)];
      iou_text += std::to_string(c) + "," + palette.names[static_cast<std::size_t>(c)] + "," +
                  (v ? fmt(*v) : std::string("nan")) + "\n";
    }
    iou_text += "mean,miou," + fmt(result.iou->miou) + "\n";
    write_text(opts.output_csv.parent_path() / "miou.csv", iou_text);
  } else if (want_iou) {
    say(log, "evaluate: no labels under " + opts.source_dir.string() + ", skipping mIoU");
  }
  say(log, "evaluate: " + std::to_string(result.rows.size()) + " images, mean ssimx=" + fmt(result.summary.ssimx));
  return result;
}

}  // namespace hsf::pipeline
