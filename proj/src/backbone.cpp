#include "hiq/backbone.hpp"

#include "hiq/error.hpp"

namespace hiq {

Backbone Backbone::init(const ModelConfig& cfg, Rng& rng) {
  Backbone b;
  b.input_size = cfg.input_size;
  std::size_t in = cfg.in_channels;
  for (std::size_t width : cfg.backbone_widths) {
    auto& stage = b.stages.emplace_back();
    for (std::size_t k = 0; k < cfg.convs_per_stage; ++k) {
      stage.push_back(ConvLayer::init(rng, in, width, 3));
      in = width;
    }
  }
  return b;
}

BackboneTaps Backbone::forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(1) != input_size || image.dim(2) != input_size) {
    throw DimensionError("backbone expects C×" + std::to_string(input_size) + "×" + std::to_string(input_size) +
                         " input, got " + shape_str(image.shape()));
  }
  BackboneTaps taps;
  Tensor x = image;
  for (const auto& stage : stages) {
    for (const auto& conv : stage) x = relu(conv(x));
    x = avg_pool2d(x, 2);
    taps.maps.push_back(x);
  }
  taps.penultimate = global_avg_pool(x);
  return taps;
}

void Backbone::collect(ParamList& out) const {
  for (std::size_t s = 0; s < stages.size(); ++s)
    for (std::size_t k = 0; k < stages[s].size(); ++k)
      stages[s][k].collect(out, "backbone.s" + std::to_string(s + 1) + ".c" + std::to_string(k + 1),
                           ParamGroup::kBackbone);
}

Tensor project_channels(const Tensor& map, const ConvLayer& proj) { return proj(map); }

}  // namespace hiq
