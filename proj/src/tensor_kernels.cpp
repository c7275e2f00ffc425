// Dense kernels: matmul, convolutions, pooling, resize, softmax, layer norm,
// attention and cosine similarity. GEMMs go through Eigen maps over the
// row-major tensor storage.
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "hiq/tensor.hpp"

namespace hiq {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat cmap(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return ConstMapMat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MapMat mmap(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MapMat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void set_backward(Tensor& out, std::function<void(detail::Node&)> fn) {
  if (out.requires_grad()) out.node()->backward = std::move(fn);
}

std::vector<double>* input_grad(detail::Node& self, std::size_t i) {
  if (i >= self.inputs.size() || !self.inputs[i]) return nullptr;
  auto& in = *self.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " do not agree");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> y(m * n);
  mmap(y, m, n).noalias() = cmap(a.node()->data, m, k) * cmap(b.node()->data, k, n);
  flop_counter() += m * k * n;
  Tensor out = Tensor::make_result({m, n}, std::move(y), "matmul", {a, b});
  set_backward(out, [m, k, n](detail::Node& self) {
    auto g = cmap(self.grad, m, n);
    if (auto* ga = input_grad(self, 0)) {
      mmap(*ga, m, k).noalias() += g * cmap(self.inputs[1]->data, k, n).transpose();
    }
    if (auto* gb = input_grad(self, 1)) {
      mmap(*gb, k, n).noalias() += cmap(self.inputs[0]->data, m, k).transpose() * g;
    }
  });
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_rowvec");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) {
    throw DimensionError("add_rowvec: bias " + shape_str(bias.shape()) + " for rows of width " +
                         std::to_string(n));
  }
  std::vector<double> y(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += b[j];
  Tensor out = Tensor::make_result({m, n}, std::move(y), "add_rowvec", {x, bias});
  set_backward(out, [m, n](detail::Node& self) {
    if (auto* gx = input_grad(self, 0)) {
      for (std::size_t i = 0; i < m * n; ++i) (*gx)[i] += self.grad[i];
    }
    if (auto* gb = input_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += self.grad[i * n + j];
    }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_rowvec(y, bias) : y;
}

// ---- convolutions ---------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvOptions opts) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t s = opts.stride, p = opts.padding;
  if (weight.dim(1) != cin) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(weight.shape()));
  }
  if (kh > h + 2 * p || kw > w + 2 * p || s == 0) {
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != cout) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) + " outputs");
  }
  const std::size_t oh = conv_out(h, kh, s, p), ow = conv_out(w, kw, s, p);
  const std::size_t ck = cin * kh * kw, hw = oh * ow;

  auto cols = std::make_shared<std::vector<double>>(ck * hw, 0.0);
  const auto& xd = x.node()->data;
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = cols->data() + ((c * kh + ki) * kw + kj) * hw;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ki) - static_cast<std::ptrdiff_t>(p);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kj) - static_cast<std::ptrdiff_t>(p);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            row[oy * ow + ox] = xd[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
          }
        }
      }

  std::vector<double> y(cout * hw);
  auto ym = mmap(y, cout, hw);
  ym.noalias() = cmap(weight.node()->data, cout, ck) * cmap(*cols, ck, hw);
  if (bias.defined()) {
    auto b = bias.data();
    for (std::size_t o = 0; o < cout; ++o) ym.row(static_cast<Eigen::Index>(o)).array() += b[o];
  }
  flop_counter() += cout * ck * hw;

  Tensor out = Tensor::make_result({cout, oh, ow}, std::move(y), "conv2d", {x, weight, bias});
  set_backward(out, [=](detail::Node& self) {
    auto g = cmap(self.grad, cout, hw);
    if (auto* gw = input_grad(self, 1)) {
      mmap(*gw, cout, ck).noalias() += g * cmap(*cols, ck, hw).transpose();
    }
    if (auto* gb = input_grad(self, 2)) {
      for (std::size_t o = 0; o < cout; ++o) (*gb)[o] += std::accumulate(self.grad.begin() + static_cast<std::ptrdiff_t>(o * hw), self.grad.begin() + static_cast<std::ptrdiff_t>((o + 1) * hw), 0.0);
    }
    if (auto* gx = input_grad(self, 0)) {
      std::vector<double> dcols(ck * hw);
      mmap(dcols, ck, hw).noalias() = cmap(self.inputs[1]->data, cout, ck).transpose() * g;
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki)
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const double* row = dcols.data() + ((c * kh + ki) * kw + kj) * hw;
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ki) - static_cast<std::ptrdiff_t>(p);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kj) - static_cast<std::ptrdiff_t>(p);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                (*gx)[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * ow + ox];
              }
            }
          }
    }
  });
  return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvOptions opts) {
  require_rank(x, 3, "depthwise_conv2d");
  require_rank(weight, 4, "depthwise_conv2d weight");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t kh = weight.dim(2), kw = weight.dim(3), s = opts.stride, p = opts.padding;
  if (weight.dim(0) != c || weight.dim(1) != 1) {
    throw DimensionError("depthwise_conv2d: input " + shape_str(x.shape()) + " vs kernel " +
                         shape_str(weight.shape()));
  }
  if (kh > h + 2 * p || kw > w + 2 * p || s == 0) {
    throw DimensionError("depthwise_conv2d: kernel " + shape_str(weight.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t oh = conv_out(h, kh, s, p), ow = conv_out(w, kw, s, p);
  const auto& xd = x.node()->data;
  const auto& wd = weight.node()->data;
  std::vector<double> y(c * oh * ow, 0.0);

  // Visits every (output, input, weight) triple that contributes.
  auto for_taps = [=](auto&& fn) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
          for (std::size_t ki = 0; ki < kh; ++ki) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ki) - static_cast<std::ptrdiff_t>(p);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kj = 0; kj < kw; ++kj) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kj) - static_cast<std::ptrdiff_t>(p);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              fn((ch * oh + oy) * ow + ox, (ch * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix),
                 (ch * kh + ki) * kw + kj);
            }
          }
  };
  for_taps([&](std::size_t o, std::size_t i, std::size_t k) { y[o] += wd[k] * xd[i]; });
  if (bias.defined()) {
    auto b = bias.data();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < oh * ow; ++j) y[ch * oh * ow + j] += b[ch];
  }
  flop_counter() += c * oh * ow * kh * kw;

  Tensor out = Tensor::make_result({c, oh, ow}, std::move(y), "depthwise_conv2d", {x, weight, bias});
  set_backward(out, [=](detail::Node& self) {
    const auto& xv = self.inputs[0]->data;
    const auto& wv = self.inputs[1]->data;
    auto* gx = input_grad(self, 0);
    auto* gw = input_grad(self, 1);
    for_taps([&](std::size_t o, std::size_t i, std::size_t k) {
      if (gx) (*gx)[i] += self.grad[o] * wv[k];
      if (gw) (*gw)[k] += self.grad[o] * xv[i];
    });
    if (auto* gb = input_grad(self, 2)) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t j = 0; j < oh * ow; ++j) (*gb)[ch] += self.grad[ch * oh * ow + j];
    }
  });
  return out;
}

// ---- pooling / resize -----------------------------------------------------

Tensor avg_pool2d(const Tensor& x, std::size_t window) {
  require_rank(x, 3, "avg_pool2d");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (window == 0 || window > h || window > w) {
    throw DimensionError("avg_pool2d: window " + std::to_string(window) + " on " + shape_str(x.shape()));
  }
  const std::size_t oh = h / window, ow = w / window;
  const double inv = 1.0 / static_cast<double>(window * window);
  const auto& xd = x.node()->data;
  std::vector<double> y(c * oh * ow, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t a = 0; a < window; ++a)
          for (std::size_t b = 0; b < window; ++b) acc += xd[(ch * h + oy * window + a) * w + ox * window + b];
        y[(ch * oh + oy) * ow + ox] = acc * inv;
      }
  Tensor out = Tensor::make_result({c, oh, ow}, std::move(y), "avg_pool2d", {x});
  set_backward(out, [=](detail::Node& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double v = self.grad[(ch * oh + oy) * ow + ox] * inv;
          for (std::size_t a = 0; a < window; ++a)
            for (std::size_t b = 0; b < window; ++b) (*g)[(ch * h + oy * window + a) * w + ox * window + b] += v;
        }
  });
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 3, "global_avg_pool");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (hw == 0) throw DimensionError("global_avg_pool on empty map " + shape_str(x.shape()));
  const auto& xd = x.node()->data;
  std::vector<double> y(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += xd[ch * hw + j];
    y[ch] = acc / static_cast<double>(hw);
  }
  Tensor out = Tensor::make_result({c}, std::move(y), "global_avg_pool", {x});
  set_backward(out, [c, hw](detail::Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = self.grad[ch] / static_cast<double>(hw);
        for (std::size_t j = 0; j < hw; ++j) (*g)[ch * hw + j] += v;
      }
    }
  });
  return out;
}

namespace {

struct Lerp {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<Lerp> lerp_table(std::size_t in, std::size_t out) {
  std::vector<Lerp> t(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
    std::size_t i1 = std::min(i0 + 1, in - 1);
    const double frac = src - static_cast<double>(i0);
    t[o] = {i0, i1, 1.0 - frac, frac};
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_resize to an empty grid");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto ty = lerp_table(h, out_h);
  const auto tx = lerp_table(w, out_w);
  const auto& xd = x.node()->data;
  std::vector<double> y(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& ly = ty[oy];
      const double* r0 = xd.data() + (ch * h + ly.i0) * w;
      const double* r1 = xd.data() + (ch * h + ly.i1) * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& lx = tx[ox];
        y[(ch * out_h + oy) * out_w + ox] = ly.w0 * (lx.w0 * r0[lx.i0] + lx.w1 * r0[lx.i1]) +
                                            ly.w1 * (lx.w0 * r1[lx.i0] + lx.w1 * r1[lx.i1]);
      }
    }
  Tensor out = Tensor::make_result({c, out_h, out_w}, std::move(y), "bilinear_resize", {x});
  set_backward(out, [=](detail::Node& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const auto& ly = ty[oy];
        double* r0 = g->data() + (ch * h + ly.i0) * w;
        double* r1 = g->data() + (ch * h + ly.i1) * w;
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto& lx = tx[ox];
          const double v = self.grad[(ch * out_h + oy) * out_w + ox];
          r0[lx.i0] += v * ly.w0 * lx.w0;
          r0[lx.i1] += v * ly.w0 * lx.w1;
          r1[lx.i0] += v * ly.w1 * lx.w0;
          r1[lx.i1] += v * ly.w1 * lx.w1;
        }
      }
  });
  return out;
}

Tensor map_to_tokens(const Tensor& map) {
  require_rank(map, 3, "map_to_tokens");
  return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

Tensor tokens_to_map(const Tensor& tokens, std::size_t height, std::size_t width) {
  require_rank(tokens, 2, "tokens_to_map");
  if (tokens.dim(0) != height * width) {
    throw DimensionError("tokens_to_map: " + shape_str(tokens.shape()) + " cannot fill a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  return reshape(transpose(tokens), {tokens.dim(1), height, width});
}

// ---- softmax / layer norm -------------------------------------------------

namespace {

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
  }
  AxisSplit s{1, x.dim(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) s.inner *= x.dim(i);
  return s;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x, axis, "softmax");
  const auto& xd = x.node()->data;
  std::vector<double> y(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = xd[base];
      for (std::size_t j = 1; j < s.len; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) z += (y[base + j * s.inner] = std::exp(xd[base + j * s.inner] - mx));
      for (std::size_t j = 0; j < s.len; ++j) y[base + j * s.inner] /= z;
    }
  Tensor out = Tensor::make_result(x.shape(), std::move(y), "softmax", {x});
  set_backward(out, [s](detail::Node& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) dot += self.grad[base + j * s.inner] * self.data[base + j * s.inner];
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t i = base + j * s.inner;
          (*g)[i] += self.data[i] * (self.grad[i] - dot);
        }
      }
  });
  return out;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_axis(x, axis, "log_softmax");
  const auto& xd = x.node()->data;
  std::vector<double> y(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = xd[base];
      for (std::size_t j = 1; j < s.len; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) z += std::exp(xd[base + j * s.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t j = 0; j < s.len; ++j) y[base + j * s.inner] = xd[base + j * s.inner] - lz;
    }
  Tensor out = Tensor::make_result(x.shape(), std::move(y), "log_softmax", {x});
  set_backward(out, [s](detail::Node& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double total = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) total += self.grad[base + j * s.inner];
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t i = base + j * s.inner;
          (*g)[i] += self.grad[i] - std::exp(self.data[i]) * total;
        }
      }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on rank-0 tensor");
  const std::size_t d = x.dim(x.rank() - 1), rows = x.numel() / d;
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " for width " + std::to_string(d));
  }
  const auto& xd = x.node()->data;
  auto gd = gamma.data();
  auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> y(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mu) * is;
      (*xhat)[r * d + j] = xh;
      y[r * d + j] = gd[j] * xh + bd[j];
    }
  }
  Tensor out = Tensor::make_result(x.shape(), std::move(y), "layer_norm", {x, gamma, beta});
  set_backward(out, [=](detail::Node& self) {
    const auto& gam = self.inputs[1]->data;
    auto* gx = input_grad(self, 0);
    auto* gg = input_grad(self, 1);
    auto* gb = input_grad(self, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* go = self.grad.data() + r * d;
      const double* xh = xhat->data() + r * d;
      if (gg || gb) {
        for (std::size_t j = 0; j < d; ++j) {
          if (gg) (*gg)[j] += go[j] * xh[j];
          if (gb) (*gb)[j] += go[j];
        }
      }
      if (gx) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dxh = go[j] * gam[j];
          m1 += dxh;
          m2 += dxh * xh[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          (*gx)[r * d + j] += (*inv_std)[r] * (go[j] * gam[j] - m1 - xh[j] * m2);
        }
      }
    }
  });
  return out;
}

// ---- attention ------------------------------------------------------------

namespace {

struct AttnDims {
  std::size_t tq, tk, d, heads, dh;
};

AttnDims check_attention(const Tensor& q, const Tensor& k, std::size_t heads) {
  require_rank(q, 2, "attention query");
  require_rank(k, 2, "attention key");
  if (q.dim(1) != k.dim(1)) {
    throw DimensionError("attention: query width " + std::to_string(q.dim(1)) + " vs key width " +
                         std::to_string(k.dim(1)));
  }
  if (heads == 0 || q.dim(1) % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(q.dim(1)) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  return {q.dim(0), k.dim(0), q.dim(1), heads, q.dim(1) / heads};
}

// probs: heads × Tq × Tk
void attention_probs(const AttnDims& a, const std::vector<double>& qd, const std::vector<double>& kd,
                     std::vector<double>& probs) {
  probs.assign(a.heads * a.tq * a.tk, 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(a.dh));
  auto qm = cmap(qd, a.tq, a.d);
  auto km = cmap(kd, a.tk, a.d);
  for (std::size_t h = 0; h < a.heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * a.dh), dh = static_cast<Eigen::Index>(a.dh);
    MapMat p(probs.data() + h * a.tq * a.tk, static_cast<Eigen::Index>(a.tq), static_cast<Eigen::Index>(a.tk));
    p.noalias() = qm.middleCols(off, dh) * km.middleCols(off, dh).transpose();
    p *= scale;
    // Plain loops: Eigen's vectorised reductions peel by address, which
    // would make the rounding depend on where the buffer was allocated.
    for (std::size_t r = 0; r < a.tq; ++r) {
      double* row = probs.data() + (h * a.tq + r) * a.tk;
      const double mx = *std::max_element(row, row + a.tk);
      double total = 0.0;
      for (std::size_t j = 0; j < a.tk; ++j) total += row[j] = std::exp(row[j] - mx);
      for (std::size_t j = 0; j < a.tk; ++j) row[j] /= total;
    }
  }
  flop_counter() += a.heads * a.tq * a.tk * a.dh;
}

}  // namespace

std::vector<double> attention_weights(const Tensor& q, const Tensor& k, std::size_t heads) {
  const auto a = check_attention(q, k, heads);
  std::vector<double> probs;
  attention_probs(a, q.node()->data, k.node()->data, probs);
  return probs;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const auto a = check_attention(q, k, heads);
  require_rank(v, 2, "attention value");
  if (v.dim(0) != a.tk || v.dim(1) != a.d) {
    throw DimensionError("attention: value " + shape_str(v.shape()) + " vs key " + shape_str(k.shape()));
  }
  auto probs = std::make_shared<std::vector<double>>();
  attention_probs(a, q.node()->data, k.node()->data, *probs);
  std::vector<double> y(a.tq * a.d);
  auto ym = mmap(y, a.tq, a.d);
  auto vm = cmap(v.node()->data, a.tk, a.d);
  for (std::size_t h = 0; h < a.heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * a.dh), dh = static_cast<Eigen::Index>(a.dh);
    ConstMapMat p(probs->data() + h * a.tq * a.tk, static_cast<Eigen::Index>(a.tq), static_cast<Eigen::Index>(a.tk));
    ym.middleCols(off, dh).noalias() = p * vm.middleCols(off, dh);
  }
  flop_counter() += a.heads * a.tq * a.tk * a.dh;

  Tensor out = Tensor::make_result({a.tq, a.d}, std::move(y), "multi_head_attention", {q, k, v});
  set_backward(out, [a, probs](detail::Node& self) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(a.dh));
    auto g = cmap(self.grad, a.tq, a.d);
    auto qm = cmap(self.inputs[0]->data, a.tq, a.d);
    auto km = cmap(self.inputs[1]->data, a.tk, a.d);
    auto vm = cmap(self.inputs[2]->data, a.tk, a.d);
    auto* gq = input_grad(self, 0);
    auto* gk = input_grad(self, 1);
    auto* gv = input_grad(self, 2);
    RowMat dp(static_cast<Eigen::Index>(a.tq), static_cast<Eigen::Index>(a.tk));
    for (std::size_t h = 0; h < a.heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h * a.dh), dh = static_cast<Eigen::Index>(a.dh);
      ConstMapMat p(probs->data() + h * a.tq * a.tk, static_cast<Eigen::Index>(a.tq), static_cast<Eigen::Index>(a.tk));
      auto gh = g.middleCols(off, dh);
      if (gv) mmap(*gv, a.tk, a.d).middleCols(off, dh).noalias() += p.transpose() * gh;
      if (!gq && !gk) continue;
      dp.noalias() = gh * vm.middleCols(off, dh).transpose();
      for (Eigen::Index r = 0; r < dp.rows(); ++r) {
        double dot = 0.0;
        for (Eigen::Index j = 0; j < dp.cols(); ++j) dot += dp(r, j) * p(r, j);
        dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix() * scale;
      }
      if (gq) mmap(*gq, a.tq, a.d).middleCols(off, dh).noalias() += dp * km.middleCols(off, dh);
      if (gk) mmap(*gk, a.tk, a.d).middleCols(off, dh).noalias() += dp.transpose() * qm.middleCols(off, dh);
    }
  });
  return out;
}

// ---- cosine similarity ----------------------------------------------------

Tensor cosine_similarity(const Tensor& f, const Tensor& rows, double eps) {
  require_rank(rows, 2, "cosine_similarity rows");
  const std::size_t n = rows.dim(0), d = rows.dim(1);
  if (f.numel() != d) {
    throw DimensionError("cosine_similarity: feature width " + std::to_string(f.numel()) +
                         " vs query width " + std::to_string(d));
  }
  auto fv = f.data();
  auto rv = rows.data();
  double nf = 0.0;
  for (double x : fv) nf += x * x;
  nf = std::sqrt(nf);
  std::vector<double> norms(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double nr = 0.0, dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      nr += rv[i * d + j] * rv[i * d + j];
      dot += rv[i * d + j] * fv[j];
    }
    norms[i] = std::sqrt(nr);
    y[i] = dot / std::max(nf * norms[i], eps);
  }
  Tensor out = Tensor::make_result({n}, std::move(y), "cosine_similarity", {f, rows});
  set_backward(out, [=](detail::Node& self) {
    const auto& fd = self.inputs[0]->data;
    const auto& rd = self.inputs[1]->data;
    auto* gf = input_grad(self, 0);
    auto* gr = input_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const double g = self.grad[i], s = self.data[i];
      const double denom = nf * norms[i];
      const bool guarded = denom < eps;
      const double inv = 1.0 / std::max(denom, eps);
      for (std::size_t j = 0; j < d; ++j) {
        const double r = rd[i * d + j], x = fd[j];
        if (gf) (*gf)[j] += g * (guarded ? r * inv : r * inv - s * x / (nf * nf));
        if (gr) (*gr)[i * d + j] += g * (guarded ? x * inv : x * inv - s * r / (norms[i] * norms[i]));
      }
    }
  });
  return out;
}

}  // namespace hiq
