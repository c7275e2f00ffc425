#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace hiq {

/// Architecture hyperparameters.
struct ModelConfig {
  std::size_t input_size = 64;
  std::size_t in_channels = 3;
  std::vector<std::size_t> backbone_widths{16, 32, 64, 128};
  std::size_t convs_per_stage = 2;
  // 1-based stage indices, shallow to deep.
  std::vector<std::size_t> level1_taps{2, 3};
  std::vector<std::size_t> level2_taps{3, 4};
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t query_channels = 16;
  std::size_t query_height = 8;
  std::size_t query_width = 8;
  std::size_t decoder_channels = 64;
  std::size_t camp_dim = 32;
  double camp_lambda = 0.5;
  std::size_t max_components = 8;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LossConfig {
  double alpha = 1.0;
  double gamma = 2.0;
  double tau = 10.0;
  double w_ce1 = 1.0;
  double w_ce2 = 1.0;
  double w_cfl1 = 1.0;
  double w_cfl2 = 1.0;
  double w_bce = 1.0;

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

struct AblationFlags {
  bool cfl = true;
  bool eigen_init = true;
  bool camp = true;

  bool operator==(const AblationFlags&) const = default;
};

struct SynthConfig {
  std::size_t n_coarse = 8;
  std::vector<std::size_t> children{3, 3, 3, 3, 3, 3, 3, 3};
  std::size_t images_per_class = 100;
  std::size_t image_size = 64;
  double noise = 0.05;
  std::uint64_t seed = 2024;

  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | manifest
  SynthConfig synth;
  std::string train_manifest;
  std::string test_manifest;
  std::string taxonomy;
  std::string image_root;
  bool hflip = false;

  bool operator==(const DataConfig&) const = default;
};

struct TrainConfig {
  std::string model = "hierarchical";  // hierarchical | flat
  std::size_t epochs = 4;
  std::size_t batch_size = 8;
  double lr = 0.05;
  double backbone_lr_mult = 0.1;
  double momentum = 0.9;
  double grad_clip = 5.0;  // global-norm clip, 0 disables
  std::uint64_t seed = 1;
  bool log_wall_clock = false;
  AblationFlags flags;
  LossConfig loss;
  ModelConfig arch;
  DataConfig data;

  /// Loss weights with the ablation flags applied.
  LossConfig effective_loss() const;
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Flat `section.key -> value` view of a config file.
///
/// File syntax: `[section]` headers followed by `key = value` lines; `#`
/// comments. Keys outside any section must already be dotted.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config_text(std::string_view text);
ConfigMap read_config_file(const std::string& path);

/// Applies one dotted key; unknown keys and unparsable values are ConfigError.
void apply_setting(TrainConfig& cfg, std::string_view key, std::string_view value);
TrainConfig train_config_from(const ConfigMap& map, TrainConfig base = {});

ConfigMap to_config_map(const TrainConfig& cfg);
std::string to_config_text(const TrainConfig& cfg);
std::uint64_t config_digest(const TrainConfig& cfg);

}  // namespace hiq
