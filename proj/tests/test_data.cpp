#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "hiq/data.hpp"
#include "hiq/error.hpp"

using namespace hiq;
namespace fs = std::filesystem;

namespace {

const std::string kData = HIQ_TEST_DATA_DIR;

SynthConfig small_synth(double noise = 0.0) {
  SynthConfig cfg;
  cfg.n_coarse = 4;
  cfg.children = {3, 3, 2, 3};
  cfg.images_per_class = 5;
  cfg.image_size = 32;
  cfg.noise = noise;
  cfg.seed = 99;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("hiq_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

bool bit_identical(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].fine_label != b[i].fine_label || a[i].coarse_label != b[i].coarse_label) return false;
    if (!std::equal(a[i].image.data().begin(), a[i].image.data().end(), b[i].image.data().begin())) return false;
  }
  return true;
}

}  // namespace

TEST(Synthetic, SameSeedGivesBitIdenticalData) {
  for (double noise : {0.0, 0.1}) {
    auto a = generate_synthetic(small_synth(noise), 1);
    auto b = generate_synthetic(small_synth(noise), 3);
    EXPECT_TRUE(bit_identical(a.train, b.train));
    EXPECT_TRUE(bit_identical(a.test, b.test));
    EXPECT_EQ(a.hierarchy, b.hierarchy);
  }
  auto other = small_synth(0.1);
  other.seed = 100;
  EXPECT_FALSE(bit_identical(generate_synthetic(small_synth(0.1)).train, generate_synthetic(other).train));
}

TEST(Synthetic, ShapeOfTheDataset) {
  auto cfg = small_synth();
  auto data = generate_synthetic(cfg);
  EXPECT_EQ(data.hierarchy.num_coarse(), 4u);
  EXPECT_EQ(data.hierarchy.num_fine(), 11u);
  EXPECT_EQ(data.hierarchy.max_branching(2), 3u);
  EXPECT_EQ(data.train.size(), 11u * 4);
  EXPECT_EQ(data.test.size(), 11u * 1);
  for (const auto& s : data.train) {
    EXPECT_EQ(s.image.shape(), (Shape{3, 32, 32}));
    EXPECT_EQ(data.hierarchy.parent_of(s.fine_label), s.coarse_label);
    for (double v : s.image.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
}

TEST(Synthetic, UniformChildrenGiveThatBranching) {
  SynthConfig cfg;
  cfg.images_per_class = 1;
  cfg.image_size = 8;
  EXPECT_EQ(generate_synthetic(cfg).hierarchy.max_branching(2), 3u);
}

TEST(Synthetic, FineClassMeansDifferInManyPixels) {
  auto cfg = small_synth();
  auto data = generate_synthetic(cfg);
  const std::size_t n = 3 * 32 * 32;
  std::vector<std::vector<double>> means(data.hierarchy.num_fine(), std::vector<double>(n, 0.0));
  std::vector<double> counts(data.hierarchy.num_fine(), 0.0);
  for (const auto* split : {&data.train, &data.test})
    for (const auto& s : *split) {
      for (std::size_t i = 0; i < n; ++i) means[s.fine_label][i] += s.image[i];
      counts[s.fine_label] += 1;
    }
  for (std::size_t f = 0; f < means.size(); ++f)
    for (auto& v : means[f]) v /= counts[f];
  for (std::size_t a = 0; a < means.size(); ++a)
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      std::size_t differing = 0;
      for (std::size_t i = 0; i < n; ++i) differing += std::abs(means[a][i] - means[b][i]) > 1e-9;
      EXPECT_GE(static_cast<double>(differing), 0.01 * static_cast<double>(n)) << a << " vs " << b;
    }
}

TEST(Synthetic, TooManyCoarseClassesRejected) {
  SynthConfig cfg;
  cfg.n_coarse = kSyntheticCoarseLimit + 1;
  cfg.children.assign(cfg.n_coarse, 2);
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
}

TEST(Manifest, HeaderOnlyGivesEmptyDataset) {
  TempDir dir("manifest_empty");
  write_text(dir.path / "m.csv", "path,fine_label,coarse_label\n");
  auto h = hiq::testing::hierarchy_of({2});
  EXPECT_TRUE(load_manifest(dir.path / "m.csv", h, dir.path, 8).empty());
}

TEST(Manifest, ParentMismatchNamesTheRow) {
  TempDir dir("manifest_mismatch");
  auto h = hiq::testing::hierarchy_of({1, 1});
  write_ppm(dir.path / "a.ppm", Tensor::full({3, 2, 2}, 0.5));
  write_text(dir.path / "m.csv", "path,fine_label,coarse_label\na.ppm,f0_0,c0\na.ppm,f1_0,c0\n");
  try {
    load_manifest(dir.path / "m.csv", h, dir.path, 2);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
  }
}

TEST(Manifest, UnknownLabelAndMissingFile) {
  TempDir dir("manifest_errors");
  auto h = hiq::testing::hierarchy_of({1});
  write_text(dir.path / "m.csv", "path,fine_label,coarse_label\na.ppm,nope,c0\n");
  EXPECT_THROW(load_manifest(dir.path / "m.csv", h, dir.path, 2), DataError);
  write_text(dir.path / "m.csv", "path,fine_label,coarse_label\nmissing.ppm,f0_0,c0\n");
  try {
    load_manifest(dir.path / "m.csv", h, dir.path, 2);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.ppm"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_manifest(dir.path / "absent.csv", h, dir.path, 2), IoError);
  write_text(dir.path / "m.csv", "file,fine,coarse\n");
  EXPECT_THROW(load_manifest(dir.path / "m.csv", h, dir.path, 2), FormatError);
}

TEST(Manifest, GroceryStoreSizedManifest) {
  TempDir dir("manifest_grocery");
  auto h = LabelHierarchy::load(kData + "/grocerystore_taxonomy.txt");
  write_ppm(dir.path / "img.ppm", Tensor::full({3, 4, 4}, 0.25));
  std::string csv = "path,fine_label,coarse_label\n";
  for (std::size_t i = 0; i < 5421; ++i) {
    const std::size_t f = i % h.num_fine();
    csv += "img.ppm," + h.fine_name(f) + "," + h.coarse_name(h.parent_of(f)) + "\n";
  }
  write_text(dir.path / "m.csv", csv);
  auto [loaded_h, data] = load_manifest(dir.path / "m.csv", kData + "/grocerystore_taxonomy.txt", dir.path, 4);
  EXPECT_EQ(data.size(), 5421u);
  EXPECT_EQ(loaded_h, h);
}

TEST(Manifest, ResizesToInputSize) {
  TempDir dir("manifest_resize");
  auto h = hiq::testing::hierarchy_of({1});
  write_ppm(dir.path / "a.ppm", Tensor::full({3, 6, 9}, 0.4));
  write_text(dir.path / "m.csv", "path,fine_label,coarse_label\n\"a.ppm\",f0_0,c0\n");
  auto data = load_manifest(dir.path / "m.csv", h, dir.path, 4);
  ASSERT_EQ(data.size(), 1u);
  EXPECT_EQ(data[0].image.shape(), (Shape{3, 4, 4}));
  for (double v : data[0].image.data()) EXPECT_NEAR(v, 102.0 / 255.0, 1e-12);
}

TEST(Images, PpmRoundTripAt8Bits) {
  TempDir dir("ppm");
  std::mt19937_64 g(1);
  std::uniform_int_distribution<int> level(0, 255);
  std::vector<double> px(3 * 5 * 7);
  for (auto& v : px) v = level(g) / 255.0;
  write_ppm(dir.path / "x.ppm", Tensor::from({3, 5, 7}, px));
  auto back = decode_image(dir.path / "x.ppm");
  ASSERT_EQ(back.shape(), (Shape{3, 5, 7}));
  for (std::size_t i = 0; i < px.size(); ++i) EXPECT_DOUBLE_EQ(back[i], px[i]);
}

TEST(Images, AsciiGreymapReplicatesChannels) {
  TempDir dir("pgm");
  write_text(dir.path / "g.pgm", "P2\n# comment\n2 1\n10\n0 5\n");
  auto img = decode_image(dir.path / "g.pgm");
  ASSERT_EQ(img.shape(), (Shape{3, 1, 2}));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(img[c * 2], 0.0);
    EXPECT_EQ(img[c * 2 + 1], 0.5);
  }
}

TEST(Images, PngDecodes) {
  auto img = decode_image(kData + "/two_pixels.png");
  ASSERT_EQ(img.shape(), (Shape{3, 1, 2}));
  EXPECT_EQ(img[0], 1.0);
  EXPECT_EQ(img[1], 0.0);
  EXPECT_EQ(img[2], 0.0);
  EXPECT_DOUBLE_EQ(img[3], 128.0 / 255.0);
  EXPECT_EQ(img[5], 1.0);
}

TEST(Images, UnknownFormatRejected) {
  TempDir dir("bad_image");
  write_text(dir.path / "x.bmp", "BM....");
  EXPECT_THROW(decode_image(dir.path / "x.bmp"), FormatError);
  write_text(dir.path / "t.ppm", "P6\n4 4\n255\nabc");
  EXPECT_THROW(decode_image(dir.path / "t.ppm"), FormatError);
}

TEST(Normalization, HandCase) {
  NormStats stats;
  stats.mean = {0.5, 0.5, 0.5};
  stats.stddev = {0.25, 0.25, 0.25};
  auto out = stats.apply(Tensor::full({3, 1, 1}, 0.8));
  for (double v : out.data()) EXPECT_NEAR(v, 1.2, 1e-15);
}

TEST(Normalization, StatisticsFromTrainingSplit) {
  auto data = generate_synthetic(small_synth(0.05));
  auto stats = NormStats::compute(data.train);
  EXPECT_TRUE(stats.warnings.empty());
  auto normalized = normalize_batch(data.train, stats);
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0, sq = 0, n = 0;
    for (const auto& img : normalized) {
      const std::size_t plane = img.dim(1) * img.dim(2);
      for (std::size_t i = 0; i < plane; ++i) {
        sum += img[c * plane + i];
        sq += img[c * plane + i] * img[c * plane + i];
        n += 1;
      }
    }
    EXPECT_NEAR(sum / n, 0.0, 1e-6);
    EXPECT_NEAR(sq / n, 1.0, 1e-3);
  }
}

TEST(Normalization, ConstantChannelIsGuarded) {
  Dataset train;
  for (int i = 0; i < 3; ++i) {
    auto img = Tensor::full({3, 2, 2}, 0.3);
    img.mutable_data()[i] = 0.9;  // channel 0 varies, channels 1 and 2 are constant
    train.push_back({img, 0, 0});
  }
  auto stats = NormStats::compute(train);
  EXPECT_EQ(stats.warnings.size(), 2u);
  auto out = stats.apply(train[0].image);
  for (std::size_t i = 4; i < 12; ++i) EXPECT_EQ(out[i], 0.0);
  for (double v : out.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_THROW(NormStats::compute({}), DataError);
}

TEST(Augmentation, HorizontalFlip) {
  auto img = Tensor::from({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto f = hflip(img);
  EXPECT_EQ(std::vector<double>(f.data().begin(), f.data().end()), (std::vector<double>{3, 2, 1, 6, 5, 4}));
  auto twice = hflip(f);
  EXPECT_EQ(std::vector<double>(twice.data().begin(), twice.data().end()),
            std::vector<double>(img.data().begin(), img.data().end()));
}

TEST(WriteDataset, ManifestRoundTrip) {
  TempDir dir("write_dataset");
  auto data = generate_synthetic(small_synth());
  write_dataset(dir.path, data);
  auto [h, train] = load_manifest(dir.path / "train.csv", dir.path / "taxonomy.txt", dir.path, 32);
  EXPECT_EQ(h, data.hierarchy);
  ASSERT_EQ(train.size(), data.train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    EXPECT_EQ(train[i].fine_label, data.train[i].fine_label);
    for (std::size_t j = 0; j < train[i].image.numel(); ++j)
      ASSERT_NEAR(train[i].image[j], data.train[i].image[j], 0.5 / 255.0 + 1e-12);
  }
}
