#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hiq/error.hpp"

namespace hiq {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  const char* op = "leaf";
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Handle to a node of the reverse-mode graph.
///
/// Copies share the underlying node, so a parameter tensor held by a module
/// and the same tensor held by the optimizer see the same storage. Values are
/// 64-bit and stored row-major.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse sweep from a scalar. Interior gradients are recomputed on every
  /// call; leaf gradients accumulate until zero_grad().
  void backward() const;

  /// Same values, no history, no gradient.
  Tensor detach() const;

  std::uint64_t id() const;
  const char* op() const;

  // Engine-internal; op implementations build nodes through these.
  static Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                            std::vector<Tensor> inputs);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// One entry per node reachable from a root, inputs before consumers.
struct GraphRecord {
  std::uint64_t id;
  std::string op;
  std::vector<std::uint64_t> inputs;
  Shape shape;
};
std::vector<GraphRecord> trace_graph(const Tensor& root);

// Multiply-add count accumulated by the matmul/conv/attention kernels on the
// calling thread. Used to assert structural cost claims.
std::uint64_t& flop_counter();

class FlopScope {
 public:
  FlopScope() : start_(flop_counter()) {}
  std::uint64_t elapsed() const { return flop_counter() - start_; }

 private:
  std::uint64_t start_;
};

// While alive, ops on the calling thread record no history (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// ---- elementwise -----------------------------------------------------------
// Binary ops accept equal shapes, or either operand holding a single value.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor relu(const Tensor& a);  // subgradient at 0 is 0
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);

// ---- reductions / shape ----------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // rank-2 only
Tensor concat(const std::vector<Tensor>& parts);  // along axis 0
Tensor stack(const std::vector<Tensor>& parts);   // new leading axis
Tensor slice(const Tensor& a, std::size_t start, std::size_t length);  // axis 0
Tensor pick(const Tensor& a, std::size_t flat_index);  // scalar view of one element

// ---- linear algebra --------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& x, const Tensor& bias);  // m×n + n
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);  // x·W + b

// ---- image ops (C×H×W) -----------------------------------------------------
struct ConvOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};
// bias may be an undefined Tensor.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, ConvOptions opts = {});
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        ConvOptions opts = {});
Tensor avg_pool2d(const Tensor& x, std::size_t window);
Tensor global_avg_pool(const Tensor& x);
// align_corners = false (half-pixel centres, edge clamped).
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);
// d×H×W  <->  (H·W)×d
Tensor map_to_tokens(const Tensor& map);
Tensor tokens_to_map(const Tensor& tokens, std::size_t height, std::size_t width);

// ---- normalisation / attention ---------------------------------------------
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Scaled dot-product attention over heads = d / heads column groups.
// q: Tq×d, k and v: Tk×d. Returns Tq×d (heads concatenated).
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads);
// Row-stochastic weights the same call would use, stacked heads×Tq×Tk.
std::vector<double> attention_weights(const Tensor& q, const Tensor& k, std::size_t heads);

// Cosine of f (length d) against each row of rows (n×d); denominators guarded by eps.
Tensor cosine_similarity(const Tensor& f, const Tensor& rows, double eps = 1e-12);

}  // namespace hiq
