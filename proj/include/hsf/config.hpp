#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hsf/cgfe.hpp"
#include "hsf/fusion.hpp"

namespace hsf {

enum class Preset { Paper, Toy };

std::string to_string(Preset p);
Preset parse_preset(const std::string& s);

/// Every tunable of a run. Text form is a flat `key = value` file; unknown
/// keys are rejected.
struct RunConfig {
  Preset preset = Preset::Toy;
  std::filesystem::path data_root = "data";
  std::filesystem::path out_dir = "out";

  std::int64_t height = 128;
  std::int64_t width = 128;
  bool crop = false;
  bool hflip = false;

  std::int64_t base_ch = 16;
  std::int64_t unet_depth = 3;
  std::int64_t resnet_blocks = 7;
  std::int64_t dy_layers = 3;
  std::int64_t frb_reduction = 4;

  double lambda_sere = 80.0;
  double cycle_weight = 10.0;
  bool reverse_cycle = false;
  double ohem_threshold = 0.7;

  double mu = 100.0;
  double rho = 50.0;
  double eta = 40.0;
  double omega0 = 0.5;
  double gamma0 = 0.5;

  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  bool lr_decay = false;

  std::int64_t epochs_cgfe = 50;
  std::int64_t epochs_fusion = 50;
  std::int64_t batch_size = 1;  // paper preset: 4
  std::int64_t checkpoint_every = 0;
  std::uint64_t seed = 0;

  std::int64_t n_train = 20;
  std::int64_t n_test = 8;

  static RunConfig defaults(Preset preset);

  /// Throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Throws ConfigError on inconsistent or non-positive settings.
  void validate() const;

  /// Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const;

  cgfe::CgfeConfig cgfe_config() const;
  fusion::FusionConfig fusion_config() const;
  /// Input sizes must be multiples of this for the configured networks.
  std::int64_t size_multiple() const;
};

using Overrides = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines; `#` starts a comment.
Overrides parse_config_text(const std::string& text);

/// Builds a config from preset defaults, then the file (if any), then the
/// overrides. A `preset` entry in the file or overrides selects the base
/// defaults; `preset_flag` wins over both.
RunConfig load_config(const std::optional<std::filesystem::path>& file, const Overrides& overrides,
                      const std::optional<Preset>& preset_flag = std::nullopt);

}  // namespace hsf
