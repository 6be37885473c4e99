#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hsf/cgfe.hpp"
#include "hsf/checkpoint.hpp"
#include "hsf/config.hpp"
#include "hsf/fusion.hpp"
#include "hsf/metrics.hpp"

// The command surface: synthetic data, two-stage training, inference and
// evaluation. Each command is a plain function so tests can drive it
// without a process boundary.
namespace hsf::pipeline {

using Logger = std::function<void(const std::string&)>;

/// Logger writing to stderr.
Logger stderr_logger();

/// Caps torch's intra-op threads at HSF_NUM_THREADS when that is set.
/// Throws ConfigError on a malformed value.
void configure_threads();

// --- checkpoints -----------------------------------------------------------

struct EpochState {
  std::int64_t epochs_done = 0;
  std::int64_t steps = 0;
  std::vector<std::vector<double>> history;  // one row per epoch, CSV column order
};

Checkpoint save_cgfe(const cgfe::CgfeModel& m, const cgfe::CgfeOptimizers* opt,
                     const EpochState& state, const RunConfig& cfg);
/// Rebuilds the model; `state` receives the epoch counters and history.
cgfe::CgfeModel load_cgfe(const Checkpoint& ckpt, EpochState* state = nullptr);
void restore_cgfe_optimizers(const Checkpoint& ckpt, cgfe::CgfeOptimizers& opt);

Checkpoint save_fusion(const fusion::FusionModel& fm, const Adam* opt, const EpochState& state,
                       const RunConfig& cfg);
fusion::FusionModel load_fusion(const Checkpoint& ckpt, EpochState* state = nullptr);
void restore_fusion_optimizer(const Checkpoint& ckpt, Adam& opt);

/// Combined fingerprint of all four CGFE networks.
std::uint64_t fingerprint(const cgfe::CgfeModel& m);

// --- data ------------------------------------------------------------------

/// Loads pairs of a split, centre-cropping to the configured size when
/// `crop` is on.
class PairLoader {
public:
  PairLoader(DatasetSplit split, LabelPalette palette, const RunConfig& cfg);

  const DatasetSplit& split() const { return split_; }
  ImagePair load(const std::string& id) const;
  /// Deterministic batch order for an epoch: a permutation of the split's ids
  /// derived from (seed, epoch) and chunked into batches.
  std::vector<std::vector<std::string>> epoch_batches(std::int64_t epoch) const;
  /// Loads and collates one batch, applying the optional flip augmentation.
  Batch batch(const std::vector<std::string>& ids, std::int64_t epoch) const;

private:
  DatasetSplit split_;
  LabelPalette palette_;
  RunConfig cfg_;
};

// --- commands --------------------------------------------------------------

struct SynthResult {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

/// Writes n_train + n_test synthetic pairs under data_root/{train,test} and a
/// manifest.csv listing the scene seeds.
SynthResult cmd_synth(const RunConfig& cfg, const Logger& log = {});

inline constexpr const char* kCgfeCsvHeader =
    "epoch,total,l_cg,adv_g,adv_f,cycle,cycle_reverse,l_sere,l_str,ssim_term,sobel_term,lambda,"
    "loss_dx,loss_dy,lr";
inline constexpr const char* kFusionCsvHeader =
    "epoch,total,ssim_term,mse_vis,mse_ir,mu,rho,eta,sigma_omega,sigma_gamma,lr";

std::filesystem::path cgfe_checkpoint_path(const RunConfig& cfg, cgfe::Modality m);
std::filesystem::path fusion_checkpoint_path(const RunConfig& cfg);

/// Trains one CGFE on data_root/train. With `resume`, continues from an
/// existing checkpoint at the output path. Writes the checkpoint and a
/// per-epoch loss CSV. Throws ConfigError when labels are missing.
std::filesystem::path cmd_train_cgfe(const RunConfig& cfg, cgfe::Modality modality, bool resume = false,
                                     const Logger& log = {});

/// Trains the fusion stage on data_root/train with both CGFEs frozen.
/// Throws ConfigError when the checkpoints disagree in scale or palette.
std::filesystem::path cmd_train_fusion(const RunConfig& cfg, const std::filesystem::path& cgfe_ir,
                                       const std::filesystem::path& cgfe_vis, bool resume = false,
                                       const Logger& log = {});

struct FuseResult {
  std::vector<std::string> written;
  std::vector<std::pair<std::string, std::string>> failures;  // id, message
};

/// Fuses every pair under `input_dir` ({Infrared,Visible}/<id>.png) into
/// `output_dir/<id>.png`. Failures are collected, not thrown.
FuseResult cmd_fuse(const RunConfig& cfg, const std::filesystem::path& cgfe_ir,
                    const std::filesystem::path& cgfe_vis, const std::filesystem::path& fusion_ckpt,
                    const std::filesystem::path& input_dir, const std::filesystem::path& output_dir,
                    bool dump_masks = false, const Logger& log = {});

struct EvaluateOptions {
  std::filesystem::path fused_dir;
  std::filesystem::path source_dir;  // split dir with Infrared, Visible and optionally Label
  std::filesystem::path output_csv;
  std::optional<std::filesystem::path> seg_checkpoint;  // CGFE whose G segments fused images
  std::optional<std::filesystem::path> prediction_dir;  // stored label predictions <id>.png
};

struct EvaluateResult {
  std::vector<metrics::MetricReport> rows;
  metrics::MetricReport summary;
  std::optional<metrics::IouResult> iou;
};

/// Per-image fusion metrics plus a summary row; an mIoU CSV next to the
/// report when labels and a segmentation source are available. Throws
/// AlignmentError when fused and source ids differ.
EvaluateResult cmd_evaluate(const RunConfig& cfg, const EvaluateOptions& opts, const Logger& log = {});

/// Converts a [1,H,W] or [H,W] tensor to a metrics plane.
metrics::Plane to_plane(const torch::Tensor& t);

}  // namespace hsf::pipeline
