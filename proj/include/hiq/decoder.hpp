#pragma once

#include <limits>
#include <vector>

#include "hiq/nn.hpp"

namespace hiq {

// Stand-in for −∞ on masked logits: the most negative finite double, so
// arithmetic on it stays finite while it still loses every argmax.
inline constexpr double kMaskedLogit = std::numeric_limits<double>::lowest();

/// Query cross-attention decoder for one level.
///
/// Each c_q×h_q×w_q query map becomes h_q·w_q tokens of width c_q, linearly
/// lifted to width d. All query tokens attend jointly over the fused map's
/// tokens; each query's rows are then reshaped to a d×h_q×w_q map and refined
/// by two conv3×3 + ReLU blocks. Slot s owns row s of the 1×1 logit conv.
struct LevelDecoder {
  LinearLayer query_in;  // c_q → d
  LayerNormParams norm_q;
  LayerNormParams norm_kv;
  ConvProjection proj_k;
  ConvProjection proj_v;
  LinearLayer mix;
  LayerNormParams norm_out;
  ConvLayer refine1;  // d → dec
  ConvLayer refine2;  // dec → dec
  Tensor logit_weight;  // slots×dec
  Tensor logit_bias;    // slots
  std::size_t slots = 0;
  std::size_t heads = 1;

  static LevelDecoder init(Rng& rng, std::size_t slots, std::size_t query_channels, std::size_t d,
                           std::size_t decoder_channels, std::size_t heads);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Per-query decoded maps (dec×h_q×w_q), one per input query.
std::vector<Tensor> decode_level(const std::vector<Tensor>& queries, const Tensor& fused, const LevelDecoder& dec);

/// One logit per query: 1×1 conv of the slot's row then GAP.
Tensor logits_from_decoded(const std::vector<Tensor>& decoded, const LevelDecoder& dec);

/// Query vector in the fused-feature space: query_in applied to GAP(query).
/// Used to compare queries with pooled features.
Tensor query_embedding(const Tensor& query_map, const LevelDecoder& dec);

}  // namespace hiq
