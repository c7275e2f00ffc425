#include "hiq/fusion.hpp"

#include "hiq/backbone.hpp"
#include "hiq/error.hpp"

namespace hiq {

FTBlockParams FTBlockParams::init(Rng& rng, std::size_t d, std::size_t heads, std::size_t height,
                                  std::size_t width) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("fusion width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  FTBlockParams p;
  p.norm_q = LayerNormParams::init(d);
  p.norm_kv = LayerNormParams::init(d);
  p.proj_q = ConvProjection::init(rng, d);
  p.proj_k = ConvProjection::init(rng, d);
  p.proj_v = ConvProjection::init(rng, d);
  p.pos = param_zeros({height * width, d});
  p.mix = LinearLayer::init(rng, d, d);
  p.heads = heads;
  p.height = height;
  p.width = width;
  return p;
}

void FTBlockParams::collect(ParamList& out, const std::string& prefix) const {
  norm_q.collect(out, prefix + ".norm_q", ParamGroup::kHead);
  norm_kv.collect(out, prefix + ".norm_kv", ParamGroup::kHead);
  proj_q.collect(out, prefix + ".proj_q", ParamGroup::kHead);
  proj_k.collect(out, prefix + ".proj_k", ParamGroup::kHead);
  proj_v.collect(out, prefix + ".proj_v", ParamGroup::kHead);
  out.push_back({prefix + ".pos", pos, ParamGroup::kHead});
  mix.collect(out, prefix + ".mix", ParamGroup::kHead);
}

FusionStack FusionStack::init(Rng& rng, const std::vector<Shape>& tap_shapes, std::size_t d, std::size_t heads) {
  if (tap_shapes.size() < 2) throw ConfigError("progressive fusion needs at least 2 taps");
  FusionStack s;
  for (const auto& shape : tap_shapes) s.tap_proj.push_back(ConvLayer::init(rng, shape[0], d, 1));
  // Block j fuses into tap (n − 2 − j), the next shallower grid.
  for (std::size_t j = 0; j + 1 < tap_shapes.size(); ++j) {
    const auto& high = tap_shapes[tap_shapes.size() - 2 - j];
    s.blocks.push_back(FTBlockParams::init(rng, d, heads, high[1], high[2]));
  }
  return s;
}

void FusionStack::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < tap_proj.size(); ++i)
    tap_proj[i].collect(out, prefix + ".tap" + std::to_string(i), ParamGroup::kHead);
  for (std::size_t j = 0; j < blocks.size(); ++j) blocks[j].collect(out, prefix + ".block" + std::to_string(j));
}

Tensor tokens_from_map(const Tensor& map, const ConvProjection& proj, const Tensor& pos) {
  Tensor tokens = map_to_tokens(proj(map));
  if (!pos.defined()) return tokens;
  if (pos.shape() != tokens.shape()) {
    throw DimensionError("positional embedding " + shape_str(pos.shape()) + " vs tokens " +
                         shape_str(tokens.shape()));
  }
  return add(tokens, pos);
}

Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& residual,
                       const LinearLayer& mix, std::size_t heads) {
  return add(residual, mix(multi_head_attention(q, k, v, heads)));
}

Tensor ft_block(const Tensor& low, const Tensor& high, const FTBlockParams& p) {
  const std::size_t h = high.dim(1), w = high.dim(2);
  if (h == 0 || w == 0) throw DimensionError("ft_block: empty interim grid");
  if (low.dim(1) > h || low.dim(2) > w) {
    throw DimensionError("ft_block: low map " + shape_str(low.shape()) + " larger than high map " +
                         shape_str(high.shape()));
  }
  const Tensor up = (low.dim(1) == h && low.dim(2) == w) ? low : bilinear_resize(low, h, w);
  const Tensor residual = map_to_tokens(up);
  const Tensor q = tokens_from_map(tokens_to_map(p.norm_q(residual), h, w), p.proj_q, Tensor{});
  const Tensor kv_map = tokens_to_map(p.norm_kv(map_to_tokens(high)), h, w);
  const Tensor k = tokens_from_map(kv_map, p.proj_k, p.pos);
  const Tensor v = tokens_from_map(kv_map, p.proj_v, p.pos);
  return tokens_to_map(cross_attention(q, k, v, residual, p.mix, p.heads), h, w);
}

Tensor progressive_fuse(const std::vector<Tensor>& taps, const FusionStack& stack) {
  if (taps.size() < 2) throw ConfigError("progressive_fuse needs at least 2 taps, got " + std::to_string(taps.size()));
  if (taps.size() != stack.tap_proj.size()) throw ConfigError("tap count does not match the fusion stack");
  Tensor fused = project_channels(taps.back(), stack.tap_proj.back());
  for (std::size_t j = 0; j < stack.blocks.size(); ++j) {
    const std::size_t t = taps.size() - 2 - j;
    fused = ft_block(fused, project_channels(taps[t], stack.tap_proj[t]), stack.blocks[j]);
  }
  return fused;
}

}  // namespace hiq
