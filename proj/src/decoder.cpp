#include "hiq/decoder.hpp"

#include <cmath>

#include "hiq/error.hpp"

namespace hiq {

LevelDecoder LevelDecoder::init(Rng& rng, std::size_t slots, std::size_t query_channels, std::size_t d,
                                std::size_t decoder_channels, std::size_t heads) {
  if (slots == 0) throw ConfigError("decoder needs at least one query slot");
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("decoder width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  LevelDecoder dec;
  dec.query_in = LinearLayer::init(rng, query_channels, d);
  dec.norm_q = LayerNormParams::init(d);
  dec.norm_kv = LayerNormParams::init(d);
  dec.proj_k = ConvProjection::init(rng, d);
  dec.proj_v = ConvProjection::init(rng, d);
  dec.mix = LinearLayer::init(rng, d, d);
  dec.norm_out = LayerNormParams::init(d);
  dec.refine1 = ConvLayer::init(rng, d, decoder_channels, 3);
  dec.refine2 = ConvLayer::init(rng, decoder_channels, decoder_channels, 3);
  // Zero logit weights: early cross-entropy gradients would otherwise push the
  // shared refinement ReLUs dead before the classifier has learned anything.
  dec.logit_weight = param_zeros({slots, decoder_channels});
  dec.logit_bias = param_zeros({slots});
  dec.slots = slots;
  dec.heads = heads;
  return dec;
}

void LevelDecoder::collect(ParamList& out, const std::string& prefix) const {
  query_in.collect(out, prefix + ".query_in", ParamGroup::kHead);
  norm_q.collect(out, prefix + ".norm_q", ParamGroup::kHead);
  norm_kv.collect(out, prefix + ".norm_kv", ParamGroup::kHead);
  proj_k.collect(out, prefix + ".proj_k", ParamGroup::kHead);
  proj_v.collect(out, prefix + ".proj_v", ParamGroup::kHead);
  mix.collect(out, prefix + ".mix", ParamGroup::kHead);
  norm_out.collect(out, prefix + ".norm_out", ParamGroup::kHead);
  refine1.collect(out, prefix + ".refine1", ParamGroup::kHead);
  refine2.collect(out, prefix + ".refine2", ParamGroup::kHead);
  out.push_back({prefix + ".logit_weight", logit_weight, ParamGroup::kHead});
  out.push_back({prefix + ".logit_bias", logit_bias, ParamGroup::kHead});
}

std::vector<Tensor> decode_level(const std::vector<Tensor>& queries, const Tensor& fused, const LevelDecoder& dec) {
  if (queries.empty()) throw ContractError("decode_level: no queries");
  if (queries.size() != dec.slots) {
    throw ConfigError("decode_level: " + std::to_string(queries.size()) + " queries for " + std::to_string(dec.slots) +
                      " slots");
  }
  const std::size_t cq = dec.query_in.weight.dim(0), d = dec.query_in.weight.dim(1);
  const std::size_t qh = queries.front().dim(1), qw = queries.front().dim(2);
  std::vector<Tensor> tokens;
  tokens.reserve(queries.size());
  for (const auto& q : queries) {
    if (q.rank() != 3 || q.dim(0) != cq || q.dim(1) != qh || q.dim(2) != qw) {
      throw ConfigError("decode_level: query map " + shape_str(q.shape()) + " does not match width " +
                        std::to_string(cq));
    }
    tokens.push_back(map_to_tokens(q));
  }
  if (fused.rank() != 3 || fused.dim(0) != d) {
    throw ConfigError("decode_level: fused map " + shape_str(fused.shape()) + " does not match width " +
                      std::to_string(d));
  }
  const Tensor qt = dec.query_in(concat(tokens));
  const std::size_t fh = fused.dim(1), fw = fused.dim(2);
  const Tensor kv_map = tokens_to_map(dec.norm_kv(map_to_tokens(fused)), fh, fw);
  const Tensor k = map_to_tokens(dec.proj_k(kv_map));
  const Tensor v = map_to_tokens(dec.proj_v(kv_map));
  const Tensor att = dec.norm_out(add(qt, dec.mix(multi_head_attention(dec.norm_q(qt), k, v, dec.heads))));

  const std::size_t per = qh * qw;
  std::vector<Tensor> decoded;
  decoded.reserve(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const Tensor map = tokens_to_map(slice(att, i * per, per), qh, qw);
    decoded.push_back(relu(dec.refine2(relu(dec.refine1(map)))));
  }
  return decoded;
}

Tensor logits_from_decoded(const std::vector<Tensor>& decoded, const LevelDecoder& dec) {
  if (decoded.empty() || decoded.size() > dec.slots) throw ContractError("logits_from_decoded: bad map count");
  std::vector<Tensor> pooled;
  pooled.reserve(decoded.size());
  for (const auto& m : decoded) pooled.push_back(global_avg_pool(m));
  const std::size_t n = decoded.size(), c = dec.logit_weight.dim(1);
  const Tensor weights = n == dec.slots ? dec.logit_weight : slice(dec.logit_weight, 0, n);
  const Tensor bias = n == dec.slots ? dec.logit_bias : slice(dec.logit_bias, 0, n);
  // Row-wise dot product via a ones column.
  const Tensor dots = matmul(mul(stack(pooled), weights), Tensor::full({c, 1}, 1.0));
  return add(reshape(dots, {n}), bias);
}

Tensor query_embedding(const Tensor& query_map, const LevelDecoder& dec) {
  const Tensor pooled = reshape(global_avg_pool(query_map), {1, query_map.dim(0)});
  return reshape(dec.query_in(pooled), {dec.query_in.weight.dim(1)});
}

}  // namespace hiq
