#pragma once

#include <string>
#include <vector>

#include "hiq/rng.hpp"
#include "hiq/tensor.hpp"

namespace hiq {

// Backbone parameters are stepped at a reduced learning rate.
enum class ParamGroup { kBackbone, kHead };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};
using ParamList = std::vector<NamedParam>;

std::size_t parameter_count(const ParamList& params);

// Leaf tensors with requires_grad set.
Tensor param_normal(Rng& rng, Shape shape, double stddev);
Tensor param_zeros(Shape shape);
Tensor param_full(Shape shape, double value);

struct ConvLayer {
  Tensor weight;  // out×in×k×k
  Tensor bias;    // out
  std::size_t padding = 0;

  // He-normal weights, zero bias.
  static ConvLayer init(Rng& rng, std::size_t in, std::size_t out, std::size_t kernel);
  // 1×1 conv with identity weights; requires in == out.
  static ConvLayer identity(std::size_t channels);

  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

struct LinearLayer {
  Tensor weight;  // in×out
  Tensor bias;    // out

  static LinearLayer init(Rng& rng, std::size_t in, std::size_t out, double gain = 1.0);
  static LinearLayer identity(std::size_t width);

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams init(std::size_t width);
  Tensor operator()(const Tensor& tokens) const { return layer_norm(tokens, gamma, beta); }
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

// Convolutional token projection: depthwise 3×3 (padding 1) then pointwise 1×1.
struct ConvProjection {
  Tensor dw_weight;  // d×1×3×3
  Tensor dw_bias;    // d
  ConvLayer pointwise;

  static ConvProjection init(Rng& rng, std::size_t channels);
  // Depthwise centre tap 1, pointwise identity: the map passes through unchanged.
  static ConvProjection identity(std::size_t channels);

  Tensor operator()(const Tensor& map) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

}  // namespace hiq
