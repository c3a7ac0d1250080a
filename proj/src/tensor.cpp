#include "orinorm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include <Eigen/Core>

#include "orinorm/error.hpp"

namespace orinorm::ad {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::size_t numel() const { return value.size(); }
};

namespace {

thread_local bool t_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Gradient buffer of a parent, allocated on first use; nullptr when the
// parent does not take gradients.
double* grad_buffer(Node& n) {
  if (!n.requires_grad) {
    return nullptr;
  }
  if (n.grad.empty()) {
    n.grad.assign(n.value.size(), 0.0);
  }
  return n.grad.data();
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                   const std::vector<const Tensor*>& inputs, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor* t : inputs) {
      if (t->defined() && t->requires_grad()) {
        needs = true;
      }
    }
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) {
      node->parents.push_back(t->defined() ? t->node_ptr() : nullptr);
    }
    node->backward = std::move(bw);
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string(op) + ": undefined tensor");
  }
}

std::size_t check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(x.shape()));
  }
  return axis;
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape without_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  return out;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from_values(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  check_axis(*this, axis, "dim");
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

const std::vector<double>& Tensor::values() const {
  require_defined(*this, "values");
  return node_->value;
}

std::vector<double>& Tensor::mutable_values() {
  require_defined(*this, "values");
  return node_->value;
}

double Tensor::item() const {
  require_defined(*this, "item");
  if (node_->value.size() != 1) {
    throw std::invalid_argument("item: tensor of shape " + shape_str(node_->shape) +
                                " is not a scalar");
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && !node_->backward; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  require_defined(*this, "grad");
  if (node_->grad.empty()) {
    return std::vector<double>(node_->value.size(), 0.0);
  }
  return node_->grad;
}

std::vector<double>& Tensor::mutable_grad() {
  require_defined(*this, "grad");
  if (node_->grad.empty()) {
    node_->grad.assign(node_->value.size(), 0.0);
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) {
    node_->grad.clear();
  }
}

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return from_values(node_->shape, node_->value, false);
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (node_->value.size() != 1) {
    throw std::invalid_argument("backward: loss of shape " + shape_str(node_->shape) +
                                " is not a scalar");
  }
  if (!std::isfinite(node_->value[0])) {
    throw NumericError("backward: loss is not finite");
  }
  if (!node_->requires_grad) {
    return;
  }
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
      continue;
    }
    order.push_back(n);
    stack.pop_back();
  }
  grad_buffer(*node_)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) {
      n->backward(*n);
    }
  }
  for (Node* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->parents.clear();
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Broadcasting elementwise ops

namespace {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa;
  std::vector<std::size_t> sb;
};

std::vector<std::size_t> aligned_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t off = r - s.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = r; i-- > off;) {
    const std::size_t d = s[i - off];
    strides[i] = d == 1 ? 0 : stride;
    stride *= d;
  }
  return strides;
}

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da == db || db == 1) {
      bc.out[i] = da;
    } else if (da == 1) {
      bc.out[i] = db;
    } else {
      throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                  shape_str(b) + " do not broadcast");
    }
  }
  bc.sa = aligned_strides(a, bc.out);
  bc.sb = aligned_strides(b, bc.out);
  return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  const std::size_t total = shape_numel(bc.out);
  if (total == 0) {
    return;
  }
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t last = bc.out[r - 1];
  const std::size_t sal = bc.sa[r - 1];
  const std::size_t sbl = bc.sb[r - 1];
  const std::size_t blocks = total / last;
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  std::size_t o = 0;
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    std::size_t a = ia;
    std::size_t b = ib;
    for (std::size_t k = 0; k < last; ++k, ++o, a += sal, b += sbl) {
      f(o, a, b);
    }
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += bc.sa[d];
      ib += bc.sb[d];
      if (idx[d] < bc.out[d]) {
        break;
      }
      ia -= bc.sa[d] * bc.out[d];
      ib -= bc.sb[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class GradA, class GradB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, GradA ga, GradB gb) {
  require_defined(a, op);
  require_defined(b, op);
  Broadcast bc = make_broadcast(a.shape(), b.shape(), op);
  std::vector<double> out(shape_numel(bc.out));
  const double* av = a.values().data();
  const double* bv = b.values().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
  }
  Shape shape = bc.out;
  return make_result(std::move(shape), std::move(out), op, {&a, &b},
                     [bc = std::move(bc), ga, gb](Node& self) {
                       Node& na = parent(self, 0);
                       Node& nb = parent(self, 1);
                       double* gA = grad_buffer(na);
                       double* gB = grad_buffer(nb);
                       const double* g = self.grad.data();
                       const double* A = na.value.data();
                       const double* B = nb.value.data();
                       for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
                         if (gA) gA[i] += ga(g[o], A[i], B[j]);
                         if (gB) gB[j] += gb(g[o], A[i], B[j]);
                       });
                     });
}

template <class Fwd, class Grad>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Grad grad) {
  require_defined(x, op);
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), std::move(out), op, {&x}, [grad](Node& self) {
    Node& nx = parent(self, 0);
    double* gx = grad_buffer(nx);
    if (!gx) return;
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      gx[i] += grad(self.grad[i], nx.value[i], self.value[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double g, double, double) { return g * factor; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double g, double v, double) { return v > 0.0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) {
          return 1.0 / (1.0 + std::exp(-v));
        }
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); },
      [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); },
      [](double g, double v, double) { return g / v; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; },
      [](double g, double v, double) { return 2.0 * g * v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double g, double v, double) { return (v >= lo && v <= hi) ? g : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  if (weight.rank() != 2 || x.rank() == 0 || x.shape().back() != weight.dim(0)) {
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                " incompatible with weight " + shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(0);
  const std::size_t out_dim = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw std::invalid_argument("linear: bias " + shape_str(bias.shape()) +
                                " incompatible with weight " + shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<double> out(rows * out_dim);
  MutMap Y(out.data(), rows, out_dim);
  Y.noalias() = ConstMap(x.values().data(), rows, in) * ConstMap(weight.values().data(), in, out_dim);
  if (bias.defined()) {
    Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), out_dim);
  }
  const bool has_bias = bias.defined();
  return make_result(std::move(shape), std::move(out), "linear", {&x, &weight, &bias},
                     [rows, in, out_dim, has_bias](Node& self) {
                       Node& nx = parent(self, 0);
                       Node& nw = parent(self, 1);
                       ConstMap G(self.grad.data(), rows, out_dim);
                       if (double* gx = grad_buffer(nx)) {
                         MutMap(gx, rows, in).noalias() +=
                             G * ConstMap(nw.value.data(), in, out_dim).transpose();
                       }
                       if (double* gw = grad_buffer(nw)) {
                         MutMap(gw, in, out_dim).noalias() +=
                             ConstMap(nx.value.data(), rows, in).transpose() * G;
                       }
                       if (has_bias) {
                         if (double* gb = grad_buffer(parent(self, 2))) {
                           Eigen::Map<Eigen::RowVectorXd>(gb, out_dim) += G.colwise().sum();
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Shape and reduction ops

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  return make_result(std::move(shape), x.values(), "reshape", {&x}, [](Node& self) {
    if (double* gx = grad_buffer(parent(self, 0))) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({}, {total}, "sum", {&x}, [](Node& self) {
    Node& nx = parent(self, 0);
    if (double* gx = grad_buffer(nx)) {
      for (std::size_t i = 0; i < nx.value.size(); ++i) gx[i] += self.grad[0];
    }
  });
}

Tensor sum(const Tensor& x, std::size_t axis) {
  require_defined(x, "sum");
  check_axis(x, axis, "sum");
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const double* xv = x.values().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.len; ++j)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.len + j) * s.inner + i];
  return make_result(without_axis(x.shape(), axis), std::move(out), "sum_axis", {&x}, [s](Node& self) {
    if (double* gx = grad_buffer(parent(self, 0))) {
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.len; ++j)
          for (std::size_t i = 0; i < s.inner; ++i)
            gx[(o * s.len + j) * s.inner + i] += self.grad[o * s.inner + i];
    }
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) {
    throw std::invalid_argument("mean of an empty tensor");
  }
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor maxpool(const Tensor& x, std::size_t axis) {
  require_defined(x, "maxpool");
  check_axis(x, axis, "maxpool");
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.len == 0) {
    throw std::invalid_argument("maxpool over an empty axis of " + shape_str(x.shape()));
  }
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::uint32_t> arg(s.outer * s.inner, 0);
  const double* xv = x.values().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* base = xv + o * s.len * s.inner;
    double* dst = out.data() + o * s.inner;
    std::uint32_t* am = arg.data() + o * s.inner;
    std::copy(base, base + s.inner, dst);
    for (std::size_t j = 1; j < s.len; ++j) {
      const double* row = base + j * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        if (row[i] > dst[i]) {
          dst[i] = row[i];
          am[i] = static_cast<std::uint32_t>(j);
        }
      }
    }
  }
  return make_result(without_axis(x.shape(), axis), std::move(out), "maxpool", {&x},
                     [s, arg = std::move(arg)](Node& self) {
                       if (double* gx = grad_buffer(parent(self, 0))) {
                         for (std::size_t o = 0; o < s.outer; ++o)
                           for (std::size_t i = 0; i < s.inner; ++i) {
                             const std::size_t k = o * s.inner + i;
                             gx[(o * s.len + arg[k]) * s.inner + i] += self.grad[k];
                           }
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_defined(x, "softmax");
  check_axis(x, axis, "softmax");
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  const double* xv = x.values().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.len; ++j) mx = std::max(mx, xv[(o * s.len + j) * s.inner + i]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const std::size_t k = (o * s.len + j) * s.inner + i;
        out[k] = std::exp(xv[k] - mx);
        total += out[k];
      }
      for (std::size_t j = 0; j < s.len; ++j) out[(o * s.len + j) * s.inner + i] /= total;
    }
  return make_result(x.shape(), std::move(out), "softmax", {&x}, [s](Node& self) {
    if (double* gx = grad_buffer(parent(self, 0))) {
      const double* y = self.value.data();
      const double* g = self.grad.data();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < s.len; ++j) {
            const std::size_t k = (o * s.len + j) * s.inner + i;
            dot += g[k] * y[k];
          }
          for (std::size_t j = 0; j < s.len; ++j) {
            const std::size_t k = (o * s.len + j) * s.inner + i;
            gx[k] += y[k] * (g[k] - dot);
          }
        }
    }
  });
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) {
    throw std::invalid_argument("concat of an empty list");
  }
  for (const auto& t : xs) require_defined(t, "concat");
  const Shape& first = xs.front().shape();
  check_axis(xs.front(), axis, "concat");
  Shape shape = first;
  shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) ok = false;
    }
    if (!ok) {
      throw std::invalid_argument("concat: shape " + shape_str(s) + " does not match " +
                                  shape_str(first) + " outside axis " + std::to_string(axis));
    }
    lens.push_back(s[axis]);
    shape[axis] += s[axis];
  }
  const AxisSplit s = split_axis(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double* src = xs[k].values().data();
    const std::size_t chunk = lens[k] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy(src + o * chunk, src + (o + 1) * chunk, out.data() + o * s.len * s.inner + offset);
    }
    offset += chunk;
  }
  std::vector<const Tensor*> inputs;
  for (const auto& t : xs) inputs.push_back(&t);
  return make_result(std::move(shape), std::move(out), "concat", inputs,
                     [s, lens](Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < lens.size(); ++k) {
                         const std::size_t chunk = lens[k] * s.inner;
                         if (double* gx = grad_buffer(parent(self, k))) {
                           for (std::size_t o = 0; o < s.outer; ++o) {
                             const double* g = self.grad.data() + o * s.len * s.inner + offset;
                             for (std::size_t i = 0; i < chunk; ++i) gx[o * chunk + i] += g[i];
                           }
                         }
                         offset += chunk;
                       }
                     });
}

Tensor gather(const Tensor& x, std::span<const std::size_t> indices, const Shape& index_shape,
              std::size_t axis) {
  require_defined(x, "gather");
  check_axis(x, axis, "gather");
  if (shape_numel(index_shape) != indices.size()) {
    throw std::invalid_argument("gather: index shape " + shape_str(index_shape) + " does not hold " +
                                std::to_string(indices.size()) + " indices");
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  for (std::size_t t = 0; t < indices.size(); ++t) {
    if (indices[t] >= s.len) {
      throw std::invalid_argument("gather: index " + std::to_string(indices[t]) + " at position " +
                                  std::to_string(t) + " out of range for axis of length " +
                                  std::to_string(s.len));
    }
  }
  Shape shape(x.shape().begin(), x.shape().begin() + static_cast<std::ptrdiff_t>(axis));
  shape.insert(shape.end(), index_shape.begin(), index_shape.end());
  shape.insert(shape.end(), x.shape().begin() + static_cast<std::ptrdiff_t>(axis) + 1, x.shape().end());
  const std::size_t m = indices.size();
  std::vector<double> out(s.outer * m * s.inner);
  const double* xv = x.values().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t t = 0; t < m; ++t) {
      const double* src = xv + (o * s.len + indices[t]) * s.inner;
      std::copy(src, src + s.inner, out.data() + (o * m + t) * s.inner);
    }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(std::move(shape), std::move(out), "gather", {&x},
                     [s, idx = std::move(idx)](Node& self) {
                       if (double* gx = grad_buffer(parent(self, 0))) {
                         const std::size_t m = idx.size();
                         for (std::size_t o = 0; o < s.outer; ++o)
                           for (std::size_t t = 0; t < m; ++t) {
                             double* dst = gx + (o * s.len + idx[t]) * s.inner;
                             const double* g = self.grad.data() + (o * m + t) * s.inner;
                             for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[i];
                           }
                       }
                     });
}

Tensor cross3(const Tensor& a, const Tensor& b) {
  require_defined(a, "cross3");
  require_defined(b, "cross3");
  if (a.shape() != b.shape() || a.rank() == 0 || a.shape().back() != 3) {
    throw std::invalid_argument("cross3: shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()) + " must match with last axis 3");
  }
  const std::size_t n = a.numel() / 3;
  std::vector<double> out(a.numel());
  const double* A = a.values().data();
  const double* B = b.values().data();
  for (std::size_t k = 0; k < n; ++k) {
    const double* u = A + 3 * k;
    const double* v = B + 3 * k;
    out[3 * k + 0] = u[1] * v[2] - u[2] * v[1];
    out[3 * k + 1] = u[2] * v[0] - u[0] * v[2];
    out[3 * k + 2] = u[0] * v[1] - u[1] * v[0];
  }
  return make_result(a.shape(), std::move(out), "cross3", {&a, &b}, [n](Node& self) {
    Node& na = parent(self, 0);
    Node& nb = parent(self, 1);
    double* ga = grad_buffer(na);
    double* gb = grad_buffer(nb);
    for (std::size_t k = 0; k < n; ++k) {
      const double* g = self.grad.data() + 3 * k;
      const double* u = na.value.data() + 3 * k;
      const double* v = nb.value.data() + 3 * k;
      if (ga) {  // d/du (g . u x v) = v x g
        ga[3 * k + 0] += v[1] * g[2] - v[2] * g[1];
        ga[3 * k + 1] += v[2] * g[0] - v[0] * g[2];
        ga[3 * k + 2] += v[0] * g[1] - v[1] * g[0];
      }
      if (gb) {  // d/dv (g . u x v) = g x u
        gb[3 * k + 0] += g[1] * u[2] - g[2] * u[1];
        gb[3 * k + 1] += g[2] * u[0] - g[0] * u[2];
        gb[3 * k + 2] += g[0] * u[1] - g[1] * u[0];
      }
    }
  });
}

Tensor l2norm(const Tensor& x, std::size_t axis) {
  require_defined(x, "l2norm");
  check_axis(x, axis, "l2norm");
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const double* xv = x.values().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.len; ++j)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double v = xv[(o * s.len + j) * s.inner + i];
        out[o * s.inner + i] += v * v;
      }
  for (double& v : out) v = std::sqrt(v);
  return make_result(without_axis(x.shape(), axis), std::move(out), "l2norm", {&x}, [s](Node& self) {
    Node& nx = parent(self, 0);
    if (double* gx = grad_buffer(nx)) {
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const double norm = self.value[o * s.inner + i];
          if (norm == 0.0) continue;
          const double g = self.grad[o * s.inner + i] / norm;
          for (std::size_t j = 0; j < s.len; ++j) {
            const std::size_t k = (o * s.len + j) * s.inner + i;
            gx[k] += g * nx.value[k];
          }
        }
    }
  });
}

Tensor quat_to_rotation(const Tensor& q) {
  require_defined(q, "quat_to_rotation");
  if (q.numel() != 4) {
    throw std::invalid_argument("quat_to_rotation: expected 4 values, got shape " +
                                shape_str(q.shape()));
  }
  const auto& qv = q.values();
  const double n = std::sqrt(qv[0] * qv[0] + qv[1] * qv[1] + qv[2] * qv[2] + qv[3] * qv[3]);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw NumericError("quat_to_rotation: quaternion has zero or non-finite norm");
  }
  const double w = qv[0] / n, x = qv[1] / n, y = qv[2] / n, z = qv[3] / n;
  std::vector<double> r{1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
                        2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                        2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
  return make_result({3, 3}, std::move(r), "quat_to_rotation", {&q}, [n, w, x, y, z](Node& self) {
    double* gq = grad_buffer(parent(self, 0));
    if (!gq) return;
    const double* G = self.grad.data();
    const double dw[9] = {0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0};
    const double dx[9] = {0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x};
    const double dy[9] = {-4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y};
    const double dz[9] = {-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0};
    double gu[4] = {0, 0, 0, 0};
    for (int k = 0; k < 9; ++k) {
      gu[0] += G[k] * dw[k];
      gu[1] += G[k] * dx[k];
      gu[2] += G[k] * dy[k];
      gu[3] += G[k] * dz[k];
    }
    // Through the normalization u = q / |q|: (I - u u^T) / |q|.
    const double u[4] = {w, x, y, z};
    const double dot = gu[0] * w + gu[1] * x + gu[2] * y + gu[3] * z;
    for (int k = 0; k < 4; ++k) gq[k] += (gu[k] - dot * u[k]) / n;
  });
}

// ---------------------------------------------------------------------------
// Fused neighbor aggregation

Tensor edge_max(const Tensor& u, const Tensor& v, std::span<const std::size_t> indices,
                std::size_t k, const Tensor& weight, const Tensor& bias, const Tensor& su,
                const Tensor& sv) {
  for (const Tensor* t : {&u, &v, &weight, &bias, &su, &sv}) require_defined(*t, "edge_max");
  const bool ok = u.rank() == 2 && v.rank() == 2 && weight.rank() == 2 && bias.rank() == 1 &&
                  su.rank() == 2 && sv.rank() == 2 && u.dim(1) == weight.dim(0) &&
                  v.dim(1) == weight.dim(0) && bias.dim(0) == weight.dim(1) &&
                  su.dim(0) == u.dim(0) && su.dim(1) == weight.dim(1) && sv.dim(0) == v.dim(0) &&
                  sv.dim(1) == weight.dim(1);
  if (!ok) {
    throw std::invalid_argument("edge_max: incompatible shapes u " + shape_str(u.shape()) + ", v " +
                                shape_str(v.shape()) + ", weight " + shape_str(weight.shape()) +
                                ", su " + shape_str(su.shape()) + ", sv " + shape_str(sv.shape()));
  }
  const std::size_t n = u.dim(0);
  const std::size_t m = v.dim(0);
  const std::size_t h = weight.dim(0);
  const std::size_t c = weight.dim(1);
  if (k == 0 || indices.size() != n * k) {
    throw std::invalid_argument("edge_max: expected " + std::to_string(n) + " x " +
                                std::to_string(k) + " indices, got " + std::to_string(indices.size()));
  }
  for (std::size_t t = 0; t < indices.size(); ++t) {
    if (indices[t] >= m) {
      throw std::invalid_argument("edge_max: index " + std::to_string(indices[t]) +
                                  " out of range for " + std::to_string(m) + " neighbors");
    }
  }
  std::vector<double> out(n * c, 0.0);
  std::vector<std::uint32_t> arg(n * c, 0);
  std::vector<std::uint8_t> active(n * c, 0);
  RowMat hidden(k, h);
  RowMat z(k, c);
  ConstMap W(weight.values().data(), h, c);
  const double* U = u.values().data();
  const double* V = v.values().data();
  const double* B = bias.values().data();
  const double* SU = su.values().data();
  const double* SV = sv.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      const double* vj = V + indices[i * k + t] * h;
      for (std::size_t q = 0; q < h; ++q) hidden(t, q) = std::max(U[i * h + q] + vj[q], 0.0);
    }
    z.noalias() = hidden * W;
    double* dst = out.data() + i * c;
    std::uint32_t* am = arg.data() + i * c;
    for (std::size_t q = 0; q < c; ++q) {
      double best = -std::numeric_limits<double>::infinity();
      std::uint32_t best_t = 0;
      for (std::size_t t = 0; t < k; ++t) {
        const double val = z(t, q) + SV[indices[i * k + t] * c + q];
        if (val > best) {
          best = val;
          best_t = static_cast<std::uint32_t>(t);
        }
      }
      best += B[q] + SU[i * c + q];
      am[q] = best_t;
      if (best > 0.0) {
        dst[q] = best;
        active[i * c + q] = 1;
      }
    }
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(
      {n, c}, std::move(out), "edge_max", {&u, &v, &weight, &bias, &su, &sv},
      [n, k, h, c, idx = std::move(idx), arg = std::move(arg),
       active = std::move(active)](Node& self) {
        Node& nu = parent(self, 0);
        Node& nv = parent(self, 1);
        Node& nw = parent(self, 2);
        double* gu = grad_buffer(nu);
        double* gv = grad_buffer(nv);
        double* gw = grad_buffer(nw);
        double* gb = grad_buffer(parent(self, 3));
        double* gsu = grad_buffer(parent(self, 4));
        double* gsv = grad_buffer(parent(self, 5));
        const double* G = self.grad.data();
        const double* U = nu.value.data();
        const double* V = nv.value.data();
        const double* W = nw.value.data();
        std::vector<double> hid(h);
        std::vector<double> dh(h);
        std::vector<std::uint8_t> seen(k);
        for (std::size_t i = 0; i < n; ++i) {
          std::fill(seen.begin(), seen.end(), 0);
          for (std::size_t q = 0; q < c; ++q) {
            const std::size_t o = i * c + q;
            if (!active[o] || G[o] == 0.0) continue;
            const std::size_t j = idx[i * k + arg[o]];
            if (gb) gb[q] += G[o];
            if (gsu) gsu[o] += G[o];
            if (gsv) gsv[j * c + q] += G[o];
            seen[arg[o]] = 1;
          }
          if (!gu && !gv && !gw) continue;
          for (std::size_t t = 0; t < k; ++t) {
            if (!seen[t]) continue;
            const std::size_t j = idx[i * k + t];
            for (std::size_t p = 0; p < h; ++p) hid[p] = U[i * h + p] + V[j * h + p];
            std::fill(dh.begin(), dh.end(), 0.0);
            for (std::size_t q = 0; q < c; ++q) {
              const std::size_t o = i * c + q;
              if (!active[o] || arg[o] != t || G[o] == 0.0) continue;
              const double g = G[o];
              for (std::size_t p = 0; p < h; ++p) {
                if (hid[p] <= 0.0) continue;
                if (gw) gw[p * c + q] += hid[p] * g;
                dh[p] += W[p * c + q] * g;
              }
            }
            for (std::size_t p = 0; p < h; ++p) {
              if (hid[p] <= 0.0) continue;
              if (gu) gu[i * h + p] += dh[p];
              if (gv) gv[j * h + p] += dh[p];
            }
          }
        }
      });
}

Tensor linear_relu_max(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_defined(x, "linear_relu_max");
  require_defined(weight, "linear_relu_max");
  require_defined(bias, "linear_relu_max");
  if (x.rank() != 3 || weight.rank() != 2 || x.dim(2) != weight.dim(0) || bias.rank() != 1 ||
      bias.dim(0) != weight.dim(1) || x.dim(1) == 0) {
    throw std::invalid_argument("linear_relu_max: incompatible shapes x " + shape_str(x.shape()) +
                                ", weight " + shape_str(weight.shape()) + ", bias " +
                                shape_str(bias.shape()));
  }
  const std::size_t n = x.dim(0);
  const std::size_t k = x.dim(1);
  const std::size_t d = x.dim(2);
  const std::size_t c = weight.dim(1);
  std::vector<double> out(n * c, 0.0);
  std::vector<std::uint32_t> arg(n * c, 0);
  std::vector<std::uint8_t> active(n * c, 0);
  ConstMap W(weight.values().data(), d, c);
  const double* B = bias.values().data();
  RowMat z(k, c);
  for (std::size_t i = 0; i < n; ++i) {
    z.noalias() = ConstMap(x.values().data() + i * k * d, k, d) * W;
    for (std::size_t q = 0; q < c; ++q) {
      double best = z(0, q);
      std::uint32_t best_t = 0;
      for (std::size_t t = 1; t < k; ++t) {
        if (z(t, q) > best) {
          best = z(t, q);
          best_t = static_cast<std::uint32_t>(t);
        }
      }
      best += B[q];
      arg[i * c + q] = best_t;
      if (best > 0.0) {
        out[i * c + q] = best;
        active[i * c + q] = 1;
      }
    }
  }
  return make_result({n, c}, std::move(out), "linear_relu_max", {&x, &weight, &bias},
                     [n, k, d, c, arg = std::move(arg), active = std::move(active)](Node& self) {
                       Node& nx = parent(self, 0);
                       Node& nw = parent(self, 1);
                       double* gx = grad_buffer(nx);
                       double* gw = grad_buffer(nw);
                       double* gb = grad_buffer(parent(self, 2));
                       const double* G = self.grad.data();
                       const double* X = nx.value.data();
                       const double* W = nw.value.data();
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t q = 0; q < c; ++q) {
                           const std::size_t o = i * c + q;
                           if (!active[o] || G[o] == 0.0) continue;
                           const std::size_t row = (i * k + arg[o]) * d;
                           if (gb) gb[q] += G[o];
                           for (std::size_t p = 0; p < d; ++p) {
                             if (gw) gw[p * c + q] += X[row + p] * G[o];
                             if (gx) gx[row + p] += W[p * c + q] * G[o];
                           }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                  double h, double tol) {
  for (auto& t : inputs) {
    if (!t.requires_grad() || !t.is_leaf()) {
      throw std::invalid_argument("finite_diff_check: inputs must be leaves with requires_grad");
    }
    t.zero_grad();
  }
  Tensor loss = f();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());

  GradCheckResult result;
  bool first = true;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& vals = inputs[k].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      double plus = 0.0;
      double minus = 0.0;
      {
        NoGradGuard guard;
        vals[i] = saved + h;
        plus = f().item();
        vals[i] = saved - h;
        minus = f().item();
      }
      vals[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      if (first || err > result.max_rel_error || !std::isfinite(err)) {
        first = false;
        result.max_rel_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        result.worst_input = k;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  for (auto& t : inputs) t.zero_grad();
  result.passed = result.max_rel_error < tol;
  return result;
}

}  // namespace orinorm::ad
