#include "hiq/hierarchy.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "hiq/error.hpp"
#include "hiq/util.hpp"

namespace hiq {

LabelHierarchy LabelHierarchy::from_pairs(const std::vector<std::pair<std::string, std::string>>& fine_to_coarse) {
  if (fine_to_coarse.empty()) throw FormatError("taxonomy has no classes");
  LabelHierarchy h;
  std::unordered_map<std::string, std::size_t> coarse_ids, fine_ids;
  for (const auto& [fine, coarse] : fine_to_coarse) {
    if (fine.empty() || coarse.empty()) throw FormatError("taxonomy entry with an empty name");
    if (!fine_ids.emplace(fine, h.fine_names_.size()).second) {
      throw FormatError("duplicate fine class '" + fine + "'");
    }
    auto [it, inserted] = coarse_ids.emplace(coarse, h.coarse_names_.size());
    if (inserted) {
      h.coarse_names_.push_back(coarse);
      h.children_.emplace_back();
    }
    const std::size_t fine_id = h.fine_names_.size();
    h.fine_names_.push_back(fine);
    h.parent_.push_back(it->second);
    h.slot_.push_back(h.children_[it->second].size());
    h.children_[it->second].push_back(fine_id);
  }
  for (const auto& c : h.children_) h.k2_ = std::max(h.k2_, c.size());
  return h;
}

LabelHierarchy LabelHierarchy::parse(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string_view::npos || line.find(',', comma + 1) != std::string_view::npos) {
      throw FormatError("taxonomy line " + std::to_string(line_no) + ": expected 'fine_name,coarse_name'");
    }
    const auto fine = trim(line.substr(0, comma));
    const auto coarse = trim(line.substr(comma + 1));
    if (fine.empty() || coarse.empty()) {
      throw FormatError("taxonomy line " + std::to_string(line_no) + ": empty class name");
    }
    for (const auto& [f, c] : pairs) {
      if (f == fine) {
        throw FormatError("taxonomy line " + std::to_string(line_no) + ": duplicate fine class '" +
                          std::string(fine) + "'");
      }
    }
    pairs.emplace_back(std::string(fine), std::string(coarse));
  }
  if (pairs.empty()) throw FormatError("taxonomy is empty");
  return from_pairs(pairs);
}

LabelHierarchy LabelHierarchy::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open taxonomy file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::size_t LabelHierarchy::num_classes(std::size_t level) const {
  if (level == 1) return coarse_names_.size();
  if (level == 2) return fine_names_.size();
  throw ContractError("hierarchy level " + std::to_string(level) + " outside [1, 2]");
}

std::size_t LabelHierarchy::max_branching(std::size_t level) const {
  if (level == 1) return coarse_names_.size();
  if (level == 2) return k2_;
  throw ContractError("hierarchy level " + std::to_string(level) + " outside [1, 2]");
}

std::size_t LabelHierarchy::parent_of(std::size_t fine_id) const {
  if (fine_id >= parent_.size()) {
    throw LabelError("fine id " + std::to_string(fine_id) + " outside [0, " + std::to_string(parent_.size()) + ")");
  }
  return parent_[fine_id];
}

std::span<const std::size_t> LabelHierarchy::children(std::size_t coarse_id) const {
  if (coarse_id >= children_.size()) {
    throw LabelError("coarse id " + std::to_string(coarse_id) + " outside [0, " +
                     std::to_string(children_.size()) + ")");
  }
  return children_[coarse_id];
}

std::size_t LabelHierarchy::local_slot(std::size_t fine_id) const {
  parent_of(fine_id);
  return slot_[fine_id];
}

SubclassMask LabelHierarchy::subclass_mask(std::size_t coarse_id) const {
  const auto kids = children(coarse_id);
  SubclassMask m;
  m.coarse_id = coarse_id;
  m.bits.assign(k2_, 0);
  std::fill_n(m.bits.begin(), kids.size(), 1);
  m.local_to_global.assign(kids.begin(), kids.end());
  return m;
}

std::optional<std::size_t> LabelHierarchy::find_coarse(std::string_view name) const {
  auto it = std::find(coarse_names_.begin(), coarse_names_.end(), name);
  if (it == coarse_names_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - coarse_names_.begin());
}

std::optional<std::size_t> LabelHierarchy::find_fine(std::string_view name) const {
  auto it = std::find(fine_names_.begin(), fine_names_.end(), name);
  if (it == fine_names_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - fine_names_.begin());
}

std::string LabelHierarchy::to_text() const {
  std::string out;
  for (std::size_t f = 0; f < fine_names_.size(); ++f) {
    out += fine_names_[f];
    out += ',';
    out += coarse_names_[parent_[f]];
    out += '\n';
  }
  return out;
}

std::uint64_t LabelHierarchy::digest() const { return fnv1a64(to_text()); }

}  // namespace hiq
