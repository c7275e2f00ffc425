#pragma once

#include <vector>

#include "hiq/nn.hpp"

namespace hiq {

/// One convolutional cross-attention block. Queries come from the
/// low-resolution map resized onto the high-resolution grid; keys and values
/// come from the high-resolution map plus a learned positional embedding.
struct FTBlockParams {
  LayerNormParams norm_q;
  LayerNormParams norm_kv;
  ConvProjection proj_q;
  ConvProjection proj_k;
  ConvProjection proj_v;
  Tensor pos;  // (H·W)×d for the key/value grid, zero-initialised
  LinearLayer mix;
  std::size_t heads = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  static FTBlockParams init(Rng& rng, std::size_t d, std::size_t heads, std::size_t height, std::size_t width);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Fusion stack for one hierarchy level: a 1×1 projection per tap and
/// taps − 1 blocks folded from the deepest tap upward.
struct FusionStack {
  std::vector<ConvLayer> tap_proj;
  std::vector<FTBlockParams> blocks;

  // tap_shapes: C×H×W of each tap, shallow to deep.
  static FusionStack init(Rng& rng, const std::vector<Shape>& tap_shapes, std::size_t d, std::size_t heads);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Projects a d×H×W map and flattens it to (H·W)×d tokens; pos (if defined)
/// is added to the tokens.
Tensor tokens_from_map(const Tensor& map, const ConvProjection& proj, const Tensor& pos);

/// residual + mix(MHA(q, k, v)). q: Tq×d, k and v: Tkv×d.
Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& residual,
                       const LinearLayer& mix, std::size_t heads);

/// Fuses low (d×h×w) into the grid of high (d×H×W); output d×H×W.
Tensor ft_block(const Tensor& low, const Tensor& high, const FTBlockParams& params);

/// Left fold over taps (shallow to deep): fused = ft(deepest, next shallower),
/// then fused = ft(fused, next). Every tap is first projected to width d.
Tensor progressive_fuse(const std::vector<Tensor>& taps, const FusionStack& stack);

}  // namespace hiq
