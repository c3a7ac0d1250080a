#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace orinorm::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

/// Handle to a dense row-major double array that may take part in a
/// reverse-mode graph. Copies share the underlying node.
///
/// Results of ops on tensors that require gradients record their parents and
/// a backward rule; backward() on a scalar result accumulates into the grad
/// of every reachable tensor with requires_grad and then releases the graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  const std::vector<double>& values() const;
  /// Direct write access to the value buffer; meant for leaves (parameters,
  /// finite-difference perturbation).
  std::vector<double>& mutable_values();
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  /// Gradient buffer; zeros of the right size when nothing accumulated.
  std::vector<double> grad() const;
  std::vector<double>& mutable_grad();
  void zero_grad();

  /// Reverse pass from this scalar. Throws std::invalid_argument otherwise.
  void backward() const;

  /// Same values, no graph.
  Tensor detach() const;
  const char* op_name() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread while alive.
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

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);
/// Gradient is zero where the input lies outside [lo, hi].
Tensor clamp(const Tensor& x, double lo, double hi);

/// x[..., in] * weight[in, out] (+ bias[out]).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());

Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
/// Max over `axis` (removed from the shape). Gradient goes to the first
/// (lowest-index) maximizer.
Tensor maxpool(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
/// Selects entries along `axis`; the output shape is
/// x.shape[:axis] + index_shape + x.shape[axis+1:]. Backward scatter-adds.
Tensor gather(const Tensor& x, std::span<const std::size_t> indices, const Shape& index_shape,
              std::size_t axis = 0);
/// Cross product over the last axis (size 3); shapes must match.
Tensor cross3(const Tensor& a, const Tensor& b);
/// Euclidean norm over `axis` (removed). Gradient at a zero vector is zero.
Tensor l2norm(const Tensor& x, std::size_t axis);
/// Rotation matrix [3, 3] of the normalized quaternion q = (w, x, y, z).
Tensor quat_to_rotation(const Tensor& q);

/// Fused neighbor aggregation:
///   out[i, c] = max_t relu(sum_h relu(u[i, h] + v[j, h]) W[h, c] + b[c] + su[i, c] + sv[j, c])
/// with j = indices[i * k + t]. u [N, H], v [M, H], weight [H, C], bias [C],
/// su [N, C], sv [M, C]. Gradient goes to the lowest-index maximizing edge.
Tensor edge_max(const Tensor& u, const Tensor& v, std::span<const std::size_t> indices,
                std::size_t k, const Tensor& weight, const Tensor& bias, const Tensor& su,
                const Tensor& sv);
/// out[i, c] = max_t relu(x[i, t, :] W[:, c] + b[c]) for x [N, K, D]. Same
/// values and gradients as maxpool(relu(linear(x, W, b)), 1) up to ties.
Tensor linear_relu_max(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct GradCheckResult {
  bool passed = false;
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares backward() gradients of the scalar f() with central differences
/// for every coordinate of every input (leaves with requires_grad). The
/// error per coordinate is |a - n| / max(|a|, |n|, 1e-3).
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                  double h = 1e-6, double tol = 1e-4);

}  // namespace orinorm::ad
