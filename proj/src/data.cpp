#include "hiq/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "hiq/error.hpp"
#include "hiq/rng.hpp"
#include "hiq/util.hpp"

namespace hiq {

namespace {

constexpr const char* kShapeNames[8] = {"disk", "square", "triangle", "cross", "ring", "bar", "diamond", "checker"};

constexpr double kPalette[6][3] = {
    {0.90, 0.20, 0.20}, {0.20, 0.80, 0.20}, {0.20, 0.30, 0.90},
    {0.90, 0.85, 0.20}, {0.80, 0.20, 0.80}, {0.20, 0.80, 0.85},
};

bool inside(std::size_t shape, double px, double py) {
  const double ax = std::abs(px), ay = std::abs(py);
  switch (shape) {
    case 0: return px * px + py * py <= 1.0;
    case 1: return std::max(ax, ay) <= 0.8;
    case 2: return py >= -0.8 && py <= 0.8 && ax <= 0.5 * (py + 0.8);
    case 3: return (ax <= 0.3 && ay <= 0.9) || (ay <= 0.3 && ax <= 0.9);
    case 4: {
      const double r2 = px * px + py * py;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 5: return ax <= 0.95 && ay <= 0.3;
    case 6: return ax + ay <= 1.0;
    default: {
      if (std::max(ax, ay) > 0.9) return false;
      const auto cx = static_cast<long>(std::floor((px + 1.0) * 2.0));
      const auto cy = static_cast<long>(std::floor((py + 1.0) * 2.0));
      return (cx + cy) % 2 == 0;
    }
  }
}

// Multiplier applied to the foreground colour: plain, stripes, dots.
double texture(std::size_t kind, double px, double py) {
  if (kind == 1) return std::fmod(std::floor((px + 2.0) * 3.0), 2.0) == 0.0 ? 1.0 : 0.45;
  if (kind == 2) {
    const double fx = px * 3.0 - std::round(px * 3.0), fy = py * 3.0 - std::round(py * 3.0);
    return fx * fx + fy * fy < 0.09 ? 0.35 : 1.0;
  }
  return 1.0;
}

Tensor render(std::size_t coarse, std::size_t slot, std::size_t size, double noise, Rng& rng) {
  const std::size_t shape = coarse % 8;
  const bool large = coarse < 8;
  const double radius = large ? rng.uniform(0.55, 0.7) : rng.uniform(0.3, 0.4);
  const double cx = rng.uniform(-0.1, 0.1), cy = rng.uniform(-0.1, 0.1);
  const double bg = rng.uniform(0.4, 0.6);
  double colour[3];
  for (int c = 0; c < 3; ++c) colour[c] = std::clamp(kPalette[slot % 6][c] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
  const std::size_t tex = slot % 3;

  const std::size_t plane = size * size;
  std::vector<double> px(3 * plane);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(size) * 2.0 - 1.0;
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(size) * 2.0 - 1.0;
      const double lx = (u - cx) / radius, ly = (v - cy) / radius;
      const bool fg = inside(shape, lx, ly);
      const double t = fg ? texture(tex, lx, ly) : 1.0;
      for (std::size_t c = 0; c < 3; ++c) px[c * plane + y * size + x] = fg ? colour[c] * t : bg;
    }
  if (noise > 0.0)
    for (auto& p : px) p = std::clamp(p + noise * rng.normal(), 0.0, 1.0);
  return Tensor::from({3, size, size}, std::move(px));
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i);
    });
  for (auto& th : pool) th.join();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Netpbm header tokens, skipping comments.
struct PnmReader {
  const std::string& bytes;
  std::size_t pos = 0;

  std::string token() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  }

  std::size_t number(const std::filesystem::path& path) {
    const std::string t = token();
    if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      throw FormatError("malformed PNM header in " + path.string());
    }
    return std::stoul(t);
  }
};

Tensor decode_pnm(const std::filesystem::path& path, const std::string& bytes) {
  PnmReader r{bytes};
  const std::string magic = r.token();
  const bool colour = magic == "P3" || magic == "P6";
  const bool binary = magic == "P5" || magic == "P6";
  if (!colour && magic != "P2" && magic != "P5") throw FormatError("unsupported PNM type in " + path.string());
  const std::size_t w = r.number(path), h = r.number(path), maxval = r.number(path);
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw FormatError("bad PNM dimensions in " + path.string());
  const std::size_t channels = colour ? 3 : 1, count = w * h * channels;
  std::vector<double> raw(count);
  if (binary) {
    const std::size_t bps = maxval > 255 ? 2 : 1;
    const std::size_t start = r.pos + 1;
    if (start + count * bps > bytes.size()) throw FormatError("truncated PNM data in " + path.string());
    for (std::size_t i = 0; i < count; ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + start + i * bps);
      raw[i] = bps == 2 ? static_cast<double>(p[0] << 8 | p[1]) : static_cast<double>(p[0]);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      if (r.pos >= bytes.size()) throw FormatError("truncated PNM data in " + path.string());
      raw[i] = static_cast<double>(r.number(path));
    }
  }
  std::vector<double> out(3 * w * h);
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      out[c * w * h + i] = raw[i * channels + (colour ? c : 0)] / static_cast<double>(maxval);
  return Tensor::from({3, h, w}, std::move(out));
}

Tensor decode_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw FormatError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  const std::size_t w = image.width, h = image.height;
  std::vector<double> out(3 * w * h);
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t c = 0; c < 3; ++c) out[c * w * h + i] = buf[i * 3 + c] / 255.0;
  return Tensor::from({3, h, w}, std::move(out));
}

std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back(trim(field));
      field.clear();
    } else {
      field += c;
    }
  }
  out.emplace_back(trim(field));
  return out;
}

}  // namespace

SyntheticData generate_synthetic(const SynthConfig& cfg, std::size_t threads) {
  cfg.validate();
  if (cfg.n_coarse > kSyntheticCoarseLimit) {
    throw ConfigError("synthetic data supports at most " + std::to_string(kSyntheticCoarseLimit) +
                      " coarse classes (shape × layout), got " + std::to_string(cfg.n_coarse));
  }
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::size_t c = 0; c < cfg.n_coarse; ++c) {
    const std::string coarse = std::string(kShapeNames[c % 8]) + (c < 8 ? "-large" : "-small");
    for (std::size_t j = 0; j < cfg.children[c]; ++j) pairs.emplace_back(coarse + "/v" + std::to_string(j), coarse);
  }
  SyntheticData out{LabelHierarchy::from_pairs(pairs), {}, {}};
  const LabelHierarchy& h = out.hierarchy;

  const std::size_t per = cfg.images_per_class, total = h.num_fine() * per;
  std::vector<Sample> all(total);
  parallel_for(total, threads, [&](std::size_t i) {
    const std::size_t fine = i / per;
    Rng rng(cfg.seed ^ static_cast<std::uint64_t>(i));
    all[i] = {render(h.parent_of(fine), h.local_slot(fine), cfg.image_size, cfg.noise, rng), fine, h.parent_of(fine)};
  });
  const std::size_t n_train = (per * 4) / 5 == 0 ? 1 : (per * 4) / 5;
  for (std::size_t i = 0; i < total; ++i) (i % per < n_train ? out.train : out.test).push_back(std::move(all[i]));
  return out;
}

Tensor decode_image(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 8 && bytes.compare(0, 8, "\x89PNG\r\n\x1a\n") == 0) return decode_png(path);
  if (bytes.size() >= 2 && bytes[0] == 'P') return decode_pnm(path, bytes);
  throw FormatError("unsupported image format: " + path.string());
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("write_ppm expects 3×H×W");
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  const auto px = image.data();
  std::string row(3 * plane, '\0');
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      row[3 * i + c] = static_cast<char>(std::lround(std::clamp(px[c * plane + i], 0.0, 1.0) * 255.0));
  out.write(row.data(), static_cast<std::streamsize>(row.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Dataset load_manifest(const std::filesystem::path& csv, const LabelHierarchy& h,
                      const std::filesystem::path& image_root, std::size_t input_size) {
  const std::string text = read_file(csv);
  std::istringstream lines(text);
  std::string line;
  std::size_t row = 0;
  Dataset out;
  bool header = true;
  while (std::getline(lines, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto fields = split_csv(line);
    if (header) {
      if (fields != std::vector<std::string>{"path", "fine_label", "coarse_label"}) {
        throw FormatError(csv.string() + ": expected header 'path,fine_label,coarse_label'");
      }
      header = false;
      continue;
    }
    if (fields.size() != 3) throw DataError(csv.string() + " row " + std::to_string(row) + ": expected 3 fields");
    const auto fine = h.find_fine(fields[1]);
    const auto coarse = h.find_coarse(fields[2]);
    if (!fine || !coarse) {
      throw DataError(csv.string() + " row " + std::to_string(row) + ": unknown label '" +
                      (fine ? fields[2] : fields[1]) + "'");
    }
    if (h.parent_of(*fine) != *coarse) {
      throw DataError(csv.string() + " row " + std::to_string(row) + ": '" + fields[1] + "' belongs to '" +
                      h.coarse_name(h.parent_of(*fine)) + "', not '" + fields[2] + "'");
    }
    const std::filesystem::path p = std::filesystem::path(fields[0]).is_absolute() ? std::filesystem::path(fields[0]) : image_root / fields[0];
    Tensor img = decode_image(p);
    if (img.dim(1) != input_size || img.dim(2) != input_size) img = bilinear_resize(img, input_size, input_size);
    out.push_back({std::move(img), *fine, *coarse});
  }
  if (header) throw FormatError(csv.string() + ": missing header");
  return out;
}

std::pair<LabelHierarchy, Dataset> load_manifest(const std::filesystem::path& csv,
                                                 const std::filesystem::path& taxonomy,
                                                 const std::filesystem::path& image_root, std::size_t input_size) {
  auto h = LabelHierarchy::load(taxonomy);
  auto data = load_manifest(csv, h, image_root, input_size);
  return {std::move(h), std::move(data)};
}

NormStats NormStats::compute(const Dataset& train) {
  NormStats s;
  if (train.empty()) throw DataError("cannot compute normalisation statistics of an empty split");
  auto accumulate = [&](auto&& term) {
    std::array<double, 3> acc{0, 0, 0};
    for (const auto& sample : train) {
      const std::size_t plane = sample.image.dim(1) * sample.image.dim(2);
      const auto px = sample.image.data();
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) acc[c] += term(px[c * plane + i], c);
    }
    return acc;
  };
  double count = 0;
  for (const auto& sample : train) count += static_cast<double>(sample.image.dim(1) * sample.image.dim(2));
  const auto sum = accumulate([](double x, std::size_t) { return x; });
  for (std::size_t c = 0; c < 3; ++c) s.mean[c] = sum[c] / count;
  // One correction pass removes the rounding left in the naive mean, so a
  // constant channel normalises to exact zeros.
  const auto residual = accumulate([&](double x, std::size_t c) { return x - s.mean[c]; });
  for (std::size_t c = 0; c < 3; ++c) s.mean[c] += residual[c] / count;
  const auto sq = accumulate([&](double x, std::size_t c) { return (x - s.mean[c]) * (x - s.mean[c]); });
  for (std::size_t c = 0; c < 3; ++c) {
    s.stddev[c] = std::sqrt(sq[c] / count);
    if (s.stddev[c] < kEps) {
      s.warnings.push_back("channel " + std::to_string(c) + " has zero variance; std clamped to 1e-6");
    }
  }
  return s;
}

Tensor NormStats::apply(const Tensor& image) const {
  const std::size_t plane = image.dim(1) * image.dim(2);
  std::vector<double> out(image.data().begin(), image.data().end());
  for (std::size_t c = 0; c < 3; ++c) {
    const double sd = std::max(stddev[c], kEps);
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = (out[c * plane + i] - mean[c]) / sd;
  }
  return Tensor::from(image.shape(), std::move(out));
}

std::vector<Tensor> normalize_batch(const Dataset& samples, const NormStats& stats) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(stats.apply(s.image));
  return out;
}

Tensor hflip(const Tensor& image) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto px = image.data();
  std::vector<double> out(px.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = px[(ch * h + y) * w + (w - 1 - x)];
  return Tensor::from(image.shape(), std::move(out));
}

void write_dataset(const std::filesystem::path& dir, const SyntheticData& data) {
  std::filesystem::create_directories(dir / "images");
  {
    std::ofstream tax(dir / "taxonomy.txt");
    if (!tax) throw IoError("cannot write " + (dir / "taxonomy.txt").string());
    tax << data.hierarchy.to_text();
  }
  const LabelHierarchy& h = data.hierarchy;
  for (const auto& [name, split] : {std::pair<const char*, const Dataset*>{"train", &data.train}, {"test", &data.test}}) {
    std::ofstream csv(dir / (std::string(name) + ".csv"));
    if (!csv) throw IoError("cannot write " + (dir / (std::string(name) + ".csv")).string());
    csv << "path,fine_label,coarse_label\n";
    for (std::size_t i = 0; i < split->size(); ++i) {
      const auto& s = (*split)[i];
      char file[64];
      std::snprintf(file, sizeof file, "images/%s_%05zu.ppm", name, i);
      write_ppm(dir / file, s.image);
      csv << file << ",\"" << h.fine_name(s.fine_label) << "\",\"" << h.coarse_name(s.coarse_label) << "\"\n";
    }
  }
}

}  // namespace hiq
