#pragma once

#include <vector>

#include "hiq/config.hpp"
#include "hiq/nn.hpp"

namespace hiq {

/// Feature maps after each stage, shallow to deep, plus the pooled deepest
/// map (the prior consumed by CAMP).
struct BackboneTaps {
  std::vector<Tensor> maps;
  Tensor penultimate;
};

/// Stages of [conv3×3 → ReLU] × convs_per_stage followed by 2×2 average
/// pooling, so stage i (1-based) has spatial size input / 2^i.
struct Backbone {
  std::vector<std::vector<ConvLayer>> stages;
  std::size_t input_size = 0;

  static Backbone init(const ModelConfig& cfg, Rng& rng);
  BackboneTaps forward(const Tensor& image) const;
  void collect(ParamList& out) const;
};

/// 1×1 convolution to the fusion width.
Tensor project_channels(const Tensor& map, const ConvLayer& proj);

}  // namespace hiq
