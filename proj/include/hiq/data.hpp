#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "hiq/config.hpp"
#include "hiq/hierarchy.hpp"
#include "hiq/tensor.hpp"

namespace hiq {

struct Sample {
  Tensor image;  // 3×H×W in [0, 1]
  std::size_t fine_label = 0;
  std::size_t coarse_label = 0;
};
using Dataset = std::vector<Sample>;

struct SyntheticData {
  LabelHierarchy hierarchy;
  Dataset train;
  Dataset test;
};

/// Shapes × layouts available to coarse classes.
inline constexpr std::size_t kSyntheticCoarseLimit = 16;

/// Coarse class c draws shape c mod 8 (disk, square, triangle, cross, ring,
/// bar, diamond, checker) at a large scale for c < 8 and a small one above.
/// Fine slot j picks a palette colour and a texture (plain, stripes, dots).
/// Each image is seeded from seed XOR its global index, so the output is a
/// pure function of cfg. The first 80% of every class go to train.
SyntheticData generate_synthetic(const SynthConfig& cfg, std::size_t threads = 1);

/// Decodes PPM/PGM (P2, P3, P5, P6) or PNG into 3×H×W values in [0, 1].
Tensor decode_image(const std::filesystem::path& path);
/// Writes 8-bit binary PPM.
void write_ppm(const std::filesystem::path& path, const Tensor& image);

/// Reads a `path,fine_label,coarse_label` CSV whose labels are taxonomy names.
/// Images are resized to input_size × input_size.
std::pair<LabelHierarchy, Dataset> load_manifest(const std::filesystem::path& csv,
                                                 const std::filesystem::path& taxonomy,
                                                 const std::filesystem::path& image_root, std::size_t input_size);
Dataset load_manifest(const std::filesystem::path& csv, const LabelHierarchy& h,
                      const std::filesystem::path& image_root, std::size_t input_size);

/// Per-channel statistics of a training split.
struct NormStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> stddev{1, 1, 1};
  std::vector<std::string> warnings;

  static constexpr double kEps = 1e-6;
  static NormStats compute(const Dataset& train);
  Tensor apply(const Tensor& image) const;
};

std::vector<Tensor> normalize_batch(const Dataset& samples, const NormStats& stats);

Tensor hflip(const Tensor& image);

/// Writes images, train.csv, test.csv and taxonomy.txt under dir.
void write_dataset(const std::filesystem::path& dir, const SyntheticData& data);

}  // namespace hiq
