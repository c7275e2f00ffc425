#include "hiq/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace hiq {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

std::atomic<std::uint64_t> g_next_id{1};

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

using BackwardFn = std::function<void(detail::Node&)>;

void set_backward(Tensor& out, BackwardFn fn) {
  if (out.requires_grad()) out.node()->backward = std::move(fn);
}

// Grad buffer of input i, or nullptr when that input does not need one.
std::vector<double>* input_grad(detail::Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

enum class Broadcast { kSame, kScalarB, kScalarA };

Broadcast classify(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.numel() == 1) return Broadcast::kScalarB;
  if (a.numel() == 1) return Broadcast::kScalarA;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
}

template <typename Fwd, typename Da, typename Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Da da, Db db) {
  const Broadcast mode = classify(a, b, op);
  const Shape shape = mode == Broadcast::kScalarA ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  auto xa = a.data();
  auto xb = b.data();
  auto ia = [mode](std::size_t i) { return mode == Broadcast::kScalarA ? 0 : i; };
  auto ib = [mode](std::size_t i) { return mode == Broadcast::kScalarB ? 0 : i; };
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = fwd(xa[ia(i)], xb[ib(i)]);
  Tensor out = Tensor::make_result(shape, std::move(y), op, {a, b});
  set_backward(out, [=](detail::Node& self) {
    const auto& va = self.inputs[0]->data;
    const auto& vb = self.inputs[1]->data;
    if (auto* ga = input_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) (*ga)[ia(i)] += self.grad[i] * da(va[ia(i)], vb[ib(i)]);
    }
    if (auto* gb = input_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) (*gb)[ib(i)] += self.grad[i] * db(va[ia(i)], vb[ib(i)]);
    }
  });
  return out;
}

// y = f(x) elementwise with dy/dx expressed through x and y.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  Tensor out = Tensor::make_result(a.shape(), std::move(y), op, {a});
  set_backward(out, [deriv](detail::Node& self) {
    auto* g = input_grad(self, 0);
    if (!g) return;
    const auto& xin = self.inputs[0]->data;
    for (std::size_t i = 0; i < xin.size(); ++i) (*g)[i] += self.grad[i] * deriv(xin[i], self.data[i]);
  });
  return out;
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = hiq::numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = hiq::numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_node({1}, {value}, requires_grad));
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, const char* op,
                           std::vector<Tensor> inputs) {
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
  auto node = new_node(std::move(shape), std::move(values), needs);
  node->op = op;
  if (needs) {
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_);
  }
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

std::uint64_t Tensor::id() const { return node_->id; }
const char* Tensor::op() const { return node_->op; }

Tensor Tensor::detach() const { return Tensor(new_node(node_->shape, node_->data, false)); }

namespace {

// Post-order over the nodes that carry gradients.
std::vector<detail::Node*> topo_order(detail::Node* root, bool grad_only) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child && (!grad_only || child->requires_grad) && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void Tensor::backward() const {
  if (!node_) throw ContractError("backward() on undefined tensor");
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) throw ContractError("backward() on a tensor that does not require grad");
  auto order = topo_order(node_.get(), true);
  for (auto* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

std::vector<GraphRecord> trace_graph(const Tensor& root) {
  std::vector<GraphRecord> out;
  for (auto* n : topo_order(root.node().get(), false)) {
    GraphRecord rec{n->id, n->op, {}, n->shape};
    for (const auto& in : n->inputs) {
      if (in) rec.inputs.push_back(in->id);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::uint64_t& flop_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      a, "add_scalar", [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  // log σ(x) = -softplus(-x); d/dx = σ(-x)
  return unary(
      a, "log_sigmoid",
      [](double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](double x, double) {
        if (x >= 0) {
          const double e = std::exp(-x);
          return e / (1.0 + e);
        }
        return 1.0 / (1.0 + std::exp(x));
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor pow(const Tensor& a, double exponent) {
  return unary(
      a, "pow", [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x, double) {
        if (exponent == 0.0) return 0.0;
        if (x == 0.0) return exponent == 1.0 ? 1.0 : (exponent > 1.0 ? 0.0 : HUGE_VAL);
        return exponent * std::pow(x, exponent - 1.0);
      });
}

// ---- reductions / shape ---------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::make_result({1}, {s}, "sum", {a});
  set_backward(out, [](detail::Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
  return out;
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::make_result({1}, {s / n}, "mean", {a});
  set_backward(out, [n](detail::Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (auto& v : *g) v += self.grad[0] / n;
    }
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto x = a.data();
  Tensor out = Tensor::make_result(std::move(shape), std::vector<double>(x.begin(), x.end()), "reshape", {a});
  set_backward(out, [](detail::Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto x = a.data();
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
  Tensor out = Tensor::make_result({n, m}, std::move(y), "transpose", {a});
  set_backward(out, [m, n](detail::Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j * m + i];
    }
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> y;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (p.rank() == 0 || pt != tail) {
      throw DimensionError("concat: " + shape_str(p.shape()) + " incompatible with " +
                           shape_str(parts[0].shape()));
    }
    offsets.push_back(y.size());
    rows += p.dim(0);
    y.insert(y.end(), p.data().begin(), p.data().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor out = Tensor::make_result(std::move(shape), std::move(y), "concat", parts);
  set_backward(out, [offsets](detail::Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (auto* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[k] + i];
      }
    }
  });
  return out;
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("stack of zero tensors");
  std::vector<Tensor> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != parts[0].shape()) {
      throw DimensionError("stack: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    lifted.push_back(reshape(p, s));
  }
  return concat(lifted);
}

Tensor slice(const Tensor& a, std::size_t start, std::size_t length) {
  if (a.rank() == 0 || start + length > a.dim(0) || length == 0) {
    throw DimensionError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                         ") of " + shape_str(a.shape()));
  }
  const std::size_t row = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = length;
  auto x = a.data();
  std::vector<double> y(x.begin() + static_cast<std::ptrdiff_t>(start * row),
                        x.begin() + static_cast<std::ptrdiff_t>((start + length) * row));
  Tensor out = Tensor::make_result(std::move(shape), std::move(y), "slice", {a});
  const std::size_t offset = start * row;
  set_backward(out, [offset](detail::Node& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[offset + i] += self.grad[i];
    }
  });
  return out;
}

Tensor pick(const Tensor& a, std::size_t flat_index) {
  if (flat_index >= a.numel()) {
    throw DimensionError("pick index " + std::to_string(flat_index) + " outside " + shape_str(a.shape()));
  }
  Tensor out = Tensor::make_result({1}, {a.data()[flat_index]}, "pick", {a});
  set_backward(out, [flat_index](detail::Node& self) {
    if (auto* g = input_grad(self, 0)) (*g)[flat_index] += self.grad[0];
  });
  return out;
}

}  // namespace hiq
