#include "hiq/nn.hpp"

#include <cmath>

namespace hiq {

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

Tensor param_normal(Rng& rng, Shape shape, double stddev) {
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor param_zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor param_full(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

ConvLayer ConvLayer::init(Rng& rng, std::size_t in, std::size_t out, std::size_t kernel) {
  const double fan_in = static_cast<double>(in * kernel * kernel);
  return {param_normal(rng, {out, in, kernel, kernel}, std::sqrt(2.0 / fan_in)), param_zeros({out}), kernel / 2};
}

ConvLayer ConvLayer::identity(std::size_t channels) {
  std::vector<double> w(channels * channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) w[c * channels + c] = 1.0;
  return {Tensor::from({channels, channels, 1, 1}, std::move(w), true), param_zeros({channels}), 0};
}

Tensor ConvLayer::operator()(const Tensor& x) const { return conv2d(x, weight, bias, {1, padding}); }

void ConvLayer::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".weight", weight, group});
  out.push_back({prefix + ".bias", bias, group});
}

LinearLayer LinearLayer::init(Rng& rng, std::size_t in, std::size_t out, double gain) {
  return {param_normal(rng, {in, out}, gain / std::sqrt(static_cast<double>(in))), param_zeros({out})};
}

LinearLayer LinearLayer::identity(std::size_t width) {
  std::vector<double> w(width * width, 0.0);
  for (std::size_t i = 0; i < width; ++i) w[i * width + i] = 1.0;
  return {Tensor::from({width, width}, std::move(w), true), param_zeros({width})};
}

void LinearLayer::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".weight", weight, group});
  out.push_back({prefix + ".bias", bias, group});
}

LayerNormParams LayerNormParams::init(std::size_t width) { return {param_full({width}, 1.0), param_zeros({width})}; }

void LayerNormParams::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".gamma", gamma, group});
  out.push_back({prefix + ".beta", beta, group});
}

ConvProjection ConvProjection::init(Rng& rng, std::size_t channels) {
  ConvProjection p;
  p.dw_weight = param_normal(rng, {channels, 1, 3, 3}, std::sqrt(2.0 / 9.0));
  p.dw_bias = param_zeros({channels});
  p.pointwise = ConvLayer::init(rng, channels, channels, 1);
  return p;
}

ConvProjection ConvProjection::identity(std::size_t channels) {
  std::vector<double> w(channels * 9, 0.0);
  for (std::size_t c = 0; c < channels; ++c) w[c * 9 + 4] = 1.0;
  return {Tensor::from({channels, 1, 3, 3}, std::move(w), true), param_zeros({channels}), ConvLayer::identity(channels)};
}

Tensor ConvProjection::operator()(const Tensor& map) const {
  return pointwise(depthwise_conv2d(map, dw_weight, dw_bias, {1, 1}));
}

void ConvProjection::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".dw_weight", dw_weight, group});
  out.push_back({prefix + ".dw_bias", dw_bias, group});
  pointwise.collect(out, prefix + ".pw", group);
}

}  // namespace hiq
