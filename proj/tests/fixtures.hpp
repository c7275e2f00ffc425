#pragma once

#include <string>
#include <vector>

#include "hiq/config.hpp"
#include "hiq/hierarchy.hpp"

namespace hiq::testing {

// "f<c>_<j>,c<c>" lines for the given child counts.
inline std::string taxonomy_text(const std::vector<std::size_t>& children) {
  std::string text;
  for (std::size_t c = 0; c < children.size(); ++c)
    for (std::size_t j = 0; j < children[c]; ++j)
      text += "f" + std::to_string(c) + "_" + std::to_string(j) + ",c" + std::to_string(c) + "\n";
  return text;
}

inline LabelHierarchy hierarchy_of(const std::vector<std::size_t>& children) {
  return LabelHierarchy::parse(taxonomy_text(children));
}

// Small enough for finite differences through the whole model.
inline ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.input_size = 16;
  cfg.backbone_widths = {4, 4, 6, 6};
  cfg.convs_per_stage = 1;
  cfg.level1_taps = {2, 3};
  cfg.level2_taps = {3, 4};
  cfg.d_model = 4;
  cfg.heads = 2;
  cfg.query_channels = 2;
  cfg.query_height = 2;
  cfg.query_width = 2;
  cfg.decoder_channels = 3;
  cfg.camp_dim = 3;
  cfg.max_components = 3;
  return cfg;
}

}  // namespace hiq::testing
