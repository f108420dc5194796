#pragma once

// Dense n-dimensional tensors with define-by-run reverse-mode autodiff.
//
// Values are held in double storage. In the default Precision::f32 mode every
// op output is rounded to the nearest float, so results are float32-valued;
// Precision::f64 keeps full double precision and is used for gradient checks.
// The mode is thread-local so independent runs on different threads do not
// interfere.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace clipa {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision { f32, f64 };

Precision precision();
void set_precision(Precision p);

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p) : saved_(precision()) { set_precision(p); }
  ~PrecisionScope() { set_precision(saved_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

bool grad_enabled();

// Disables graph recording for its lifetime (evaluation, optimizer updates).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool saved_;
};

// Thread-local running count of multiply-accumulates executed by forward
// matmuls. One MAC is counted as one FLOP.
std::int64_t mac_counter();
void reset_mac_counter();

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  std::string_view op = "leaf";
  std::int64_t macs = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; does not record anything in the graph.
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  // Reverse-mode pass from a scalar root; accumulates into every tracked leaf.
  void backward() const;

  // Same storage, no graph history.
  Tensor detach() const;
  Tensor clone() const;

  std::string_view op_name() const { return node_->op; }
  std::int64_t macs() const { return node_->macs; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Visits every node reachable from root exactly once and sums the MACs each
// recorded op performed in its forward pass.
std::int64_t count_graph_macs(const Tensor& root);

// Number of distinct nodes reachable from root (including root).
std::int64_t count_graph_nodes(const Tensor& root);

// --- primitives -----------------------------------------------------------
// Elementwise binary ops accept identical shapes, or a right operand whose
// shape is a suffix of the left operand's shape (broadcast over leading axes).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// Multiplies every element of a by the single element of s (differentiable in both).
Tensor scale_by(const Tensor& a, const Tensor& s);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);

// [m,k]x[k,n], [b,m,k]x[b,k,n], or [...,m,k]x[k,n] (leading axes flattened).
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);
// Normalizes over the last axis; no affine terms.
Tensor layernorm(const Tensor& a, double eps = 1e-5);
Tensor gelu(const Tensor& a);
Tensor l2_normalize(const Tensor& a, int axis, double eps = 1e-12);

Tensor transpose(const Tensor& a, int axis0, int axis1);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const Tensor& a, const Tensor& b, int axis);

// Rows along axis 0. Repeated indices accumulate gradient.
Tensor gather_rows(const Tensor& a, std::span<const std::int64_t> indices);
// out[i] = a[i, indices[i]] for a of shape [n, c].
Tensor pick(const Tensor& a, std::span<const std::int64_t> indices);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Mean over one axis; that axis is removed from the shape.
Tensor mean_axis(const Tensor& a, int axis);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// Central-difference gradient check in 64-bit mode. Returns
// max |analytic - numeric| / max(1, |analytic|) over all parameter elements.
// Throws NumericError on non-finite values.
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps = 1e-6);

}  // namespace clipa
