#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hiq {

/// Active query slots for one coarse class at the fine level.
///
/// Children are packed into the first slots in taxonomy order, so the
/// inactive slots always form a suffix of length k_2 - child count.
struct SubclassMask {
  std::size_t coarse_id = 0;
  std::vector<std::uint8_t> bits;          // length k_2
  std::vector<std::size_t> local_to_global;  // slot -> fine id, active slots only

  std::size_t active() const { return local_to_global.size(); }
};

/// Two-level label taxonomy with dense ids.
///
/// Levels are numbered 1 (coarse) and 2 (fine). Coarse ids are assigned by
/// first appearance in the taxonomy file, fine ids by line order. The query
/// budget is k_1 = N_1 at the top level and k_2 = max child count below it.
class LabelHierarchy {
 public:
  /// Parses `fine_name,coarse_name` lines; `#` starts a comment.
  static LabelHierarchy parse(std::string_view text);
  static LabelHierarchy load(const std::filesystem::path& path);
  static LabelHierarchy from_pairs(const std::vector<std::pair<std::string, std::string>>& fine_to_coarse);

  std::size_t levels() const { return 2; }
  std::size_t num_classes(std::size_t level) const;
  std::size_t max_branching(std::size_t level) const;
  std::size_t num_coarse() const { return coarse_names_.size(); }
  std::size_t num_fine() const { return fine_names_.size(); }

  std::size_t parent_of(std::size_t fine_id) const;
  std::span<const std::size_t> children(std::size_t coarse_id) const;
  std::size_t local_slot(std::size_t fine_id) const;
  SubclassMask subclass_mask(std::size_t coarse_id) const;

  const std::string& coarse_name(std::size_t id) const { return coarse_names_.at(id); }
  const std::string& fine_name(std::size_t id) const { return fine_names_.at(id); }
  std::optional<std::size_t> find_coarse(std::string_view name) const;
  std::optional<std::size_t> find_fine(std::string_view name) const;

  /// Canonical taxonomy text; parse(to_text()) reproduces the same ids.
  std::string to_text() const;
  std::uint64_t digest() const;

  bool operator==(const LabelHierarchy& other) const = default;

 private:
  std::vector<std::string> coarse_names_;
  std::vector<std::string> fine_names_;
  std::vector<std::size_t> parent_;
  std::vector<std::vector<std::size_t>> children_;
  std::vector<std::size_t> slot_;
  std::size_t k2_ = 0;
};

}  // namespace hiq
