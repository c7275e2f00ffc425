#include "hiq/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "hiq/error.hpp"
#include "hiq/util.hpp"

namespace hiq {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t parse_size(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + std::string(key) + "': expected a non-negative integer, got '" +
                      std::string(v) + "'");
  }
  return out;
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + std::string(key) + "': expected an unsigned integer, got '" +
                      std::string(v) + "'");
  }
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  const std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ConfigError("config key '" + std::string(key) + "': expected a number, got '" + s + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected true/false, got '" + std::string(v) + "'");
}

std::vector<std::size_t> parse_list(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(parse_size(key, trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v = v.substr(comma + 1);
  }
  return out;
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, std::string_view)> set;
};

#define HIQ_SIZE(name, member)                                                         \
  Field {                                                                              \
    name, [](const TrainConfig& c) { return std::to_string(c.member); },              \
        [](TrainConfig& c, std::string_view v) { c.member = parse_size(name, v); }     \
  }
#define HIQ_U64(name, member)                                                          \
  Field {                                                                              \
    name, [](const TrainConfig& c) { return std::to_string(c.member); },              \
        [](TrainConfig& c, std::string_view v) { c.member = parse_u64(name, v); }      \
  }
#define HIQ_DOUBLE(name, member)                                                       \
  Field {                                                                              \
    name, [](const TrainConfig& c) { return fmt_double(c.member); },                  \
        [](TrainConfig& c, std::string_view v) { c.member = parse_double(name, v); }   \
  }
#define HIQ_BOOL(name, member)                                                         \
  Field {                                                                              \
    name, [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); }, \
        [](TrainConfig& c, std::string_view v) { c.member = parse_bool(name, v); }     \
  }
#define HIQ_LIST(name, member)                                                         \
  Field {                                                                              \
    name, [](const TrainConfig& c) { return fmt_list(c.member); },                    \
        [](TrainConfig& c, std::string_view v) { c.member = parse_list(name, v); }     \
  }
#define HIQ_STRING(name, member)                                                       \
  Field {                                                                              \
    name, [](const TrainConfig& c) { return c.member; },                              \
        [](TrainConfig& c, std::string_view v) { c.member = std::string(v); }          \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      HIQ_STRING("train.model", model),
      HIQ_SIZE("train.epochs", epochs),
      HIQ_SIZE("train.batch_size", batch_size),
      HIQ_DOUBLE("train.lr", lr),
      HIQ_DOUBLE("train.backbone_lr_mult", backbone_lr_mult),
      HIQ_DOUBLE("train.momentum", momentum),
      HIQ_DOUBLE("train.grad_clip", grad_clip),
      HIQ_U64("train.seed", seed),
      HIQ_BOOL("train.log_wall_clock", log_wall_clock),
      HIQ_BOOL("ablation.cfl", flags.cfl),
      HIQ_BOOL("ablation.eigen_init", flags.eigen_init),
      HIQ_BOOL("ablation.camp", flags.camp),
      HIQ_DOUBLE("loss.alpha", loss.alpha),
      HIQ_DOUBLE("loss.gamma", loss.gamma),
      HIQ_DOUBLE("loss.tau", loss.tau),
      HIQ_DOUBLE("loss.w_ce1", loss.w_ce1),
      HIQ_DOUBLE("loss.w_ce2", loss.w_ce2),
      HIQ_DOUBLE("loss.w_cfl1", loss.w_cfl1),
      HIQ_DOUBLE("loss.w_cfl2", loss.w_cfl2),
      HIQ_DOUBLE("loss.w_bce", loss.w_bce),
      HIQ_SIZE("model.input_size", arch.input_size),
      HIQ_SIZE("model.in_channels", arch.in_channels),
      HIQ_LIST("model.backbone_widths", arch.backbone_widths),
      HIQ_SIZE("model.convs_per_stage", arch.convs_per_stage),
      HIQ_LIST("model.level1_taps", arch.level1_taps),
      HIQ_LIST("model.level2_taps", arch.level2_taps),
      HIQ_SIZE("model.d_model", arch.d_model),
      HIQ_SIZE("model.heads", arch.heads),
      HIQ_SIZE("model.query_channels", arch.query_channels),
      HIQ_SIZE("model.query_height", arch.query_height),
      HIQ_SIZE("model.query_width", arch.query_width),
      HIQ_SIZE("model.decoder_channels", arch.decoder_channels),
      HIQ_SIZE("model.camp_dim", arch.camp_dim),
      HIQ_DOUBLE("model.camp_lambda", arch.camp_lambda),
      HIQ_SIZE("model.max_components", arch.max_components),
      HIQ_STRING("data.source", data.source),
      HIQ_STRING("data.train_manifest", data.train_manifest),
      HIQ_STRING("data.test_manifest", data.test_manifest),
      HIQ_STRING("data.taxonomy", data.taxonomy),
      HIQ_STRING("data.image_root", data.image_root),
      HIQ_BOOL("data.hflip", data.hflip),
      HIQ_SIZE("synth.n_coarse", data.synth.n_coarse),
      HIQ_LIST("synth.children", data.synth.children),
      HIQ_SIZE("synth.images_per_class", data.synth.images_per_class),
      HIQ_SIZE("synth.image_size", data.synth.image_size),
      HIQ_DOUBLE("synth.noise", data.synth.noise),
      HIQ_U64("synth.seed", data.synth.seed),
  };
  return table;
}

#undef HIQ_SIZE
#undef HIQ_U64
#undef HIQ_DOUBLE
#undef HIQ_BOOL
#undef HIQ_LIST
#undef HIQ_STRING

}  // namespace

void ModelConfig::validate() const {
  if (backbone_widths.empty()) throw ConfigError("model.backbone_widths is empty");
  if (convs_per_stage == 0) throw ConfigError("model.convs_per_stage must be >= 1");
  if (input_size >> backbone_widths.size() == 0) {
    throw ConfigError("model.input_size " + std::to_string(input_size) + " too small for " +
                      std::to_string(backbone_widths.size()) + " stride-2 stages");
  }
  for (const auto* taps : {&level1_taps, &level2_taps}) {
    if (taps->size() < 2) throw ConfigError("each level needs at least 2 backbone taps");
    for (std::size_t i = 0; i < taps->size(); ++i) {
      if ((*taps)[i] < 1 || (*taps)[i] > backbone_widths.size()) {
        throw ConfigError("tap stage " + std::to_string((*taps)[i]) + " outside [1, " +
                          std::to_string(backbone_widths.size()) + "]");
      }
      if (i > 0 && (*taps)[i] <= (*taps)[i - 1]) throw ConfigError("taps must be listed shallow to deep");
    }
  }
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("model.d_model " + std::to_string(d_model) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (query_channels == 0 || query_height == 0 || query_width == 0) throw ConfigError("empty query map shape");
  if (decoder_channels == 0 || camp_dim == 0) throw ConfigError("zero-width decoder or CAMP projection");
  if (max_components == 0) throw ConfigError("model.max_components must be >= 1");
}

void LossConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("loss.alpha must lie in [0, 1]");
  if (gamma < 0.0) throw ConfigError("loss.gamma must be >= 0");
  if (tau <= 0.0) throw ConfigError("loss.tau must be > 0");
  for (double w : {w_ce1, w_ce2, w_cfl1, w_cfl2, w_bce}) {
    if (w < 0.0) throw ConfigError("loss weights must be >= 0");
  }
  if (w_ce1 + w_ce2 + w_cfl1 + w_cfl2 + w_bce == 0.0) throw ConfigError("all loss weights are zero");
}

void SynthConfig::validate() const {
  if (n_coarse == 0) throw ConfigError("synth.n_coarse must be >= 1");
  if (children.size() != n_coarse) {
    throw ConfigError("synth.children lists " + std::to_string(children.size()) + " entries for " +
                      std::to_string(n_coarse) + " coarse classes");
  }
  for (auto c : children) {
    if (c == 0) throw ConfigError("synth.children entries must be >= 1");
  }
  if (images_per_class == 0) throw ConfigError("synth.images_per_class must be >= 1");
  if (image_size < 8) throw ConfigError("synth.image_size must be >= 8");
  if (noise < 0.0) throw ConfigError("synth.noise must be >= 0");
}

LossConfig TrainConfig::effective_loss() const {
  LossConfig out = loss;
  if (!flags.cfl) out.w_cfl1 = out.w_cfl2 = 0.0;
  if (!flags.camp) out.w_bce = 0.0;
  return out;
}

void TrainConfig::validate() const {
  if (model != "hierarchical" && model != "flat") throw ConfigError("train.model must be hierarchical or flat");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (!(backbone_lr_mult > 0.0 && backbone_lr_mult <= 1.0)) {
    throw ConfigError("train.backbone_lr_mult must lie in (0, 1]");
  }
  if (lr <= 0.0) throw ConfigError("train.lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must lie in [0, 1)");
  if (grad_clip < 0.0) throw ConfigError("train.grad_clip must be >= 0");
  if (data.source != "synthetic" && data.source != "manifest") {
    throw ConfigError("data.source must be synthetic or manifest");
  }
  if (data.source == "synthetic") data.synth.validate();
  arch.validate();
  loss.validate();
  if (model == "hierarchical") effective_loss().validate();
}

ConfigMap parse_config_text(std::string_view text) {
  ConfigMap out;
  std::string section;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": bad section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    std::string key(trim(line.substr(0, eq)));
    if (!section.empty()) key = section + "." + key;
    out[key] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

ConfigMap read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

void apply_setting(TrainConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(cfg, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

TrainConfig train_config_from(const ConfigMap& map, TrainConfig base) {
  for (const auto& [k, v] : map) apply_setting(base, k, v);
  return base;
}

ConfigMap to_config_map(const TrainConfig& cfg) {
  ConfigMap out;
  for (const auto& f : fields()) out[f.key] = f.get(cfg);
  return out;
}

std::string to_config_text(const TrainConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const std::string_view key = f.key;
    const auto dot = key.find('.');
    const std::string_view sec = key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += '\n';
      section = std::string(sec);
      out += "[" + section + "]\n";
    }
    out += std::string(key.substr(dot + 1)) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

std::uint64_t config_digest(const TrainConfig& cfg) { return fnv1a64(to_config_text(cfg)); }

}  // namespace hiq
