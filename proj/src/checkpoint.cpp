#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hiq/trainer.hpp"
#include "hiq/util.hpp"

namespace hiq {

// Layout: a text header terminated by "end\n", then raw little-endian doubles
// in directory order.
//
//   hiq-checkpoint <version>
//   model <hierarchical|flat>
//   config_digest <hex>
//   hierarchy_digest <hex>
//   config <bytes>\n<config text>
//   taxonomy <bytes>\n<taxonomy text>
//   norm <mean0> <mean1> <mean2> <std0> <std1> <std2>
//   tensors <count>
//   <name> <d0,d1,...> <offset> <count>      (one line per tensor)
//   end

namespace {

constexpr int kCheckpointVersion = 1;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void put_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

struct Cursor {
  const std::string& bytes;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint: " + what + " (offset " + std::to_string(pos) + ")");
  }
  std::string line() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) fail("truncated header");
    std::string out = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return out;
  }
  std::string take(std::size_t n) {
    if (pos + n > bytes.size()) fail("truncated header");
    std::string out = bytes.substr(pos, n);
    pos += n;
    return out;
  }
  // "key value" line; returns value.
  std::string field(const std::string& key) {
    const std::string l = line();
    if (l.rfind(key + " ", 0) != 0) fail("expected '" + key + "'");
    return l.substr(key.size() + 1);
  }
};

std::size_t to_size(Cursor& c, const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) c.fail("bad number '" + s + "'");
    return static_cast<std::size_t>(v);
  } catch (const std::logic_error&) {
    c.fail("bad number '" + s + "'");
  }
}

}  // namespace

std::string checkpoint_bytes(const TrainedModel& model) {
  const ParamList params = model.parameters();
  const std::string config = to_config_text(model.cfg);
  const std::string taxonomy = model.hierarchy.to_text();
  std::string out;
  out += "hiq-checkpoint " + std::to_string(kCheckpointVersion) + "\n";
  out += "model " + model.cfg.model + "\n";
  out += "config_digest " + to_hex(config_digest(model.cfg)) + "\n";
  out += "hierarchy_digest " + to_hex(model.hierarchy.digest()) + "\n";
  out += "config " + std::to_string(config.size()) + "\n" + config;
  out += "taxonomy " + std::to_string(taxonomy.size()) + "\n" + taxonomy;
  out += "norm";
  for (double v : model.stats.mean) out += " " + fmt(v);
  for (double v : model.stats.stddev) out += " " + fmt(v);
  out += "\ntensors " + std::to_string(params.size()) + "\n";
  std::size_t offset = 0;
  for (const auto& p : params) {
    std::string dims;
    for (std::size_t i = 0; i < p.tensor.rank(); ++i) dims += (i ? "," : "") + std::to_string(p.tensor.dim(i));
    out += p.name + " " + dims + " " + std::to_string(offset) + " " + std::to_string(p.tensor.numel()) + "\n";
    offset += p.tensor.numel();
  }
  out += "end\n";
  out.reserve(out.size() + offset * 8);
  for (const auto& p : params)
    for (double v : p.tensor.data()) put_le(out, v);
  return out;
}

void save_checkpoint(const TrainedModel& model, const std::filesystem::path& path) {
  const std::string bytes = checkpoint_bytes(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

TrainedModel checkpoint_from_bytes(const std::string& bytes, const LabelHierarchy* expected) {
  Cursor c{bytes};
  const std::string version = c.field("hiq-checkpoint");
  if (version != std::to_string(kCheckpointVersion)) {
    throw FormatError("checkpoint: unsupported format version " + version);
  }
  const std::string kind = c.field("model");
  const std::string cfg_digest = c.field("config_digest");
  const std::string h_digest = c.field("hierarchy_digest");
  const std::string config_text = c.take(to_size(c, c.field("config")));
  const std::string taxonomy_text = c.take(to_size(c, c.field("taxonomy")));

  TrainConfig cfg = train_config_from(parse_config_text(config_text));
  if (to_hex(config_digest(cfg)) != cfg_digest) c.fail("config digest mismatch");
  if (cfg.model != kind) c.fail("model kind mismatch");
  LabelHierarchy h = LabelHierarchy::parse(taxonomy_text);
  if (to_hex(h.digest()) != h_digest) c.fail("hierarchy digest mismatch");
  if (expected && expected->digest() != h.digest()) {
    throw ContractError("checkpoint hierarchy (" + std::to_string(h.num_coarse()) + " coarse, " +
                        std::to_string(h.num_fine()) + " fine, k_2 = " + std::to_string(h.max_branching(2)) +
                        ") does not match the expected hierarchy (" + std::to_string(expected->num_coarse()) +
                        " coarse, " + std::to_string(expected->num_fine()) +
                        " fine, k_2 = " + std::to_string(expected->max_branching(2)) + ")");
  }

  NormStats stats;
  {
    std::istringstream norm(c.field("norm"));
    for (auto& v : stats.mean)
      if (!(norm >> v)) c.fail("bad norm line");
    for (auto& v : stats.stddev)
      if (!(norm >> v)) c.fail("bad norm line");
  }

  TrainedModel model = initial_model(cfg, h, stats);
  ParamList params = model.parameters();
  const std::size_t count = to_size(c, c.field("tensors"));
  if (count != params.size()) c.fail("tensor count " + std::to_string(count) + " does not match the model");
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream entry(c.line());
    std::string name, dims;
    std::size_t offset = 0, n = 0;
    if (!(entry >> name >> dims >> offset >> n)) c.fail("bad tensor directory entry");
    if (name != params[i].name) c.fail("unexpected tensor '" + name + "', expected '" + params[i].name + "'");
    std::string expect_dims;
    for (std::size_t d = 0; d < params[i].tensor.rank(); ++d)
      expect_dims += (d ? "," : "") + std::to_string(params[i].tensor.dim(d));
    if (dims != expect_dims || n != params[i].tensor.numel()) c.fail("shape mismatch for '" + name + "'");
    spans.emplace_back(offset, n);
  }
  if (c.line() != "end") c.fail("missing end marker");
  const std::size_t data_start = c.pos;
  std::size_t total = 0;
  for (const auto& [offset, n] : spans) total = std::max(total, offset + n);
  if (data_start + total * 8 < bytes.size()) c.fail("trailing bytes after tensor data");
  for (std::size_t i = 0; i < count; ++i) {
    const auto [offset, n] = spans[i];
    if (data_start + (offset + n) * 8 > bytes.size()) {
      throw FormatError("checkpoint: truncated tensor data for '" + params[i].name + "'");
    }
    auto dst = params[i].tensor.mutable_data();
    for (std::size_t k = 0; k < n; ++k) dst[k] = get_le(bytes.data() + data_start + (offset + k) * 8);
  }
  return model;
}

TrainedModel load_checkpoint(const std::filesystem::path& path, const LabelHierarchy* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_bytes(ss.str(), expected);
}

}  // namespace hiq
