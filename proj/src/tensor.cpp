#include "clipa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

namespace clipa {

namespace {

thread_local Precision g_precision = Precision::f32;
thread_local bool g_grad_enabled = true;
thread_local std::int64_t g_macs = 0;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

void round_to_precision(std::vector<double>& values) {
  if (g_precision != Precision::f32) return;
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

// Gradient buffer of an input, or nullptr when the input is not tracked.
double* grad_of(const NodePtr& node) {
  if (!node->requires_grad) return nullptr;
  node->ensure_grad();
  return node->grad.data();
}

Tensor make_op(Shape shape, std::vector<double> data, std::string_view op,
               std::initializer_list<Tensor> inputs, std::function<void(Node&)> backward,
               std::int64_t macs = 0) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->macs = macs;
  round_to_precision(node->data);
  if (g_grad_enabled) {
    bool tracked = false;
    for (const Tensor& t : inputs) tracked = tracked || t.requires_grad();
    if (tracked) {
      node->requires_grad = true;
      for (const Tensor& t : inputs) node->inputs.push_back(t.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

int normalize_axis(int axis, int rank) {
  const int resolved = axis < 0 ? axis + rank : axis;
  if (resolved < 0 || resolved >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return resolved;
}

struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t len = 1;
  std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Number of times b repeats inside a; throws when b is not a suffix of a.
std::int64_t broadcast_repeat(const Tensor& a, const Tensor& b, std::string_view op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool suffix = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!suffix) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " +
                         shape_str(sa));
  }
  return a.numel() / std::max<std::int64_t>(b.numel(), 1);
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

// C[m,n] += op(A) * op(B) for row-major buffers; A is [m,k] (or [k,m] when
// transposed), B is [k,n] (or [n,k] when transposed).
void gemm_acc(const double* a, bool trans_a, const double* b, bool trans_b, double* c, std::int64_t m,
              std::int64_t k, std::int64_t n) {
  MutMap cm(c, m, n);
  if (!trans_a && !trans_b) cm.noalias() += ConstMap(a, m, k) * ConstMap(b, k, n);
  else if (!trans_a && trans_b) cm.noalias() += ConstMap(a, m, k) * ConstMap(b, n, k).transpose();
  else if (trans_a && !trans_b) cm.noalias() += ConstMap(a, k, m).transpose() * ConstMap(b, k, n);
  else cm.noalias() += ConstMap(a, k, m).transpose() * ConstMap(b, n, k).transpose();
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }
bool grad_enabled() { return g_grad_enabled; }

NoGradScope::NoGradScope() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = saved_; }

std::int64_t mac_counter() { return g_macs; }
void reset_mac_counter() { g_macs = 0; }

// --- Tensor -----------------------------------------------------------------

Tensor::Tensor() : node_(std::make_shared<Node>()) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  round_to_precision(node->data);
  Tensor t(std::move(node));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

std::int64_t Tensor::dim(int axis) const {
  return node_->shape[static_cast<std::size_t>(normalize_axis(axis, rank()))];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) throw DimensionError("at(): rank mismatch");
  std::int64_t flat = 0;
  std::size_t i = 0;
  for (auto idx : index) {
    if (idx < 0 || idx >= node_->shape[i]) throw std::out_of_range("at(): index out of range");
    flat = flat * node_->shape[i] + idx;
    ++i;
  }
  return node_->data[static_cast<std::size_t>(flat)];
}

void Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.set_requires_grad(node_->requires_grad);
  return t;
}

namespace {

std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // inputs before consumers
}

}  // namespace

void Tensor::backward() const {
  if (numel() != 1) {
    throw DimensionError("backward() needs a scalar root, got " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;
  const auto order = topo_order(node_.get());
  for (Node* n : order)
    if (n->requires_grad) n->ensure_grad();
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
  // Release the recorded graph; leaves keep their accumulated gradients.
  for (Node* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->inputs.clear();
      n->grad.clear();
    }
  }
}

std::int64_t count_graph_macs(const Tensor& root) {
  std::int64_t total = 0;
  for (Node* n : topo_order(root.node().get())) total += n->macs;
  return total;
}

std::int64_t count_graph_nodes(const Tensor& root) {
  return static_cast<std::int64_t>(topo_order(root.node().get()).size());
}

// --- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const auto rep = broadcast_repeat(a, b, "add");
  const auto nb = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::int64_t r = 0; r < rep; ++r)
    for (std::int64_t j = 0; j < nb; ++j) out[r * nb + j] += bd[j];
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), "add", {a, b}, [an, bn, rep, nb](Node& self) {
    const double* g = self.grad.data();
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i];
    if (double* gb = grad_of(bn))
      for (std::int64_t r = 0; r < rep; ++r)
        for (std::int64_t j = 0; j < nb; ++j) gb[j] += g[r * nb + j];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto rep = broadcast_repeat(a, b, "sub");
  const auto nb = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::int64_t r = 0; r < rep; ++r)
    for (std::int64_t j = 0; j < nb; ++j) out[r * nb + j] -= bd[j];
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), "sub", {a, b}, [an, bn, rep, nb](Node& self) {
    const double* g = self.grad.data();
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i];
    if (double* gb = grad_of(bn))
      for (std::int64_t r = 0; r < rep; ++r)
        for (std::int64_t j = 0; j < nb; ++j) gb[j] -= g[r * nb + j];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto rep = broadcast_repeat(a, b, "mul");
  const auto nb = b.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::int64_t r = 0; r < rep; ++r)
    for (std::int64_t j = 0; j < nb; ++j) out[r * nb + j] *= bd[j];
  auto an = a.node(), bn = b.node();
  return make_op(a.shape(), std::move(out), "mul", {a, b}, [an, bn, rep, nb](Node& self) {
    const double* g = self.grad.data();
    if (double* ga = grad_of(an))
      for (std::int64_t r = 0; r < rep; ++r)
        for (std::int64_t j = 0; j < nb; ++j) ga[r * nb + j] += g[r * nb + j] * bn->data[j];
    if (double* gb = grad_of(bn))
      for (std::int64_t r = 0; r < rep; ++r)
        for (std::int64_t j = 0; j < nb; ++j) gb[j] += g[r * nb + j] * an->data[r * nb + j];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  auto an = a.node();
  return make_op(a.shape(), std::move(out), "scale", {a}, [an, factor](Node& self) {
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += value;
  auto an = a.node();
  return make_op(a.shape(), std::move(out), "add_scalar", {a}, [an](Node& self) {
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: scale must have one element, got " + shape_str(s.shape()));
  const double factor = s.data()[0];
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  auto an = a.node(), sn = s.node();
  return make_op(a.shape(), std::move(out), "scale_by", {a, s}, [an, sn](Node& self) {
    const double factor = sn->data[0];
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * factor;
    if (double* gs = grad_of(sn)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->data[i];
      gs[0] += acc;
    }
  });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= v;
  auto an = a.node();
  return make_op(a.shape(), std::move(out), "square", {a}, [an](Node& self) {
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += 2.0 * an->data[i] * self.grad[i];
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = std::exp(v);
  auto an = a.node();
  return make_op(a.shape(), std::move(out), "exp", {a}, [an](Node& self) {
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * self.data[i];
  });
}

// --- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  };
  std::int64_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_rhs = false;
  Shape out_shape;
  if (sa.size() >= 2 && sb.size() == 2) {
    k = sa.back();
    if (sb[0] != k) throw mismatch();
    n = sb[1];
    m = a.numel() / std::max<std::int64_t>(k, 1);
    if (k == 0) m = shape_numel(Shape(sa.begin(), sa.end() - 1));
    shared_rhs = true;
    out_shape = Shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);
  } else if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0] || sa[2] != sb[1]) throw mismatch();
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    out_shape = {batch, m, n};
  } else {
    throw mismatch();
  }

  std::vector<double> out(static_cast<std::size_t>(batch * m * n), 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::int64_t t = 0; t < batch; ++t) {
    gemm_acc(ad + t * m * k, false, bd + (shared_rhs ? 0 : t * k * n), false, out.data() + t * m * n, m, k, n);
  }
  const std::int64_t macs = batch * m * k * n;
  g_macs += macs;

  auto an = a.node(), bn = b.node();
  return make_op(
      std::move(out_shape), std::move(out), "matmul", {a, b},
      [an, bn, batch, m, k, n, shared_rhs](Node& self) {
        const double* g = self.grad.data();
        double* ga = grad_of(an);
        double* gb = grad_of(bn);
        for (std::int64_t t = 0; t < batch; ++t) {
          const double* at = an->data.data() + t * m * k;
          const double* bt = bn->data.data() + (shared_rhs ? 0 : t * k * n);
          const double* gt = g + t * m * n;
          if (ga) gemm_acc(gt, false, bt, true, ga + t * m * k, m, n, k);
          if (gb) gemm_acc(at, true, gt, false, gb + (shared_rhs ? 0 : t * k * n), k, m, n);
        }
      },
      macs);
}

// --- normalizations and activations ------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
  const int ax = normalize_axis(axis, a.rank());
  const auto s = split_at(a.shape(), ax);
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t in = 0; in < s.inner; ++in) {
      auto idx = [&](std::int64_t i) { return (o * s.len + i) * s.inner + in; };
      double mx = -INFINITY;
      for (std::int64_t i = 0; i < s.len; ++i) mx = std::max(mx, x[idx(i)]);
      double total = 0.0;
      for (std::int64_t i = 0; i < s.len; ++i) total += out[idx(i)] = std::exp(x[idx(i)] - mx);
      for (std::int64_t i = 0; i < s.len; ++i) out[idx(i)] /= total;
    }
  auto an = a.node();
  return make_op(a.shape(), std::move(out), "softmax", {a}, [an, s](Node& self) {
    double* ga = grad_of(an);
    if (!ga) return;
    const double* y = self.data.data();
    const double* g = self.grad.data();
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t in = 0; in < s.inner; ++in) {
        auto idx = [&](std::int64_t i) { return (o * s.len + i) * s.inner + in; };
        double dot = 0.0;
        for (std::int64_t i = 0; i < s.len; ++i) dot += g[idx(i)] * y[idx(i)];
        for (std::int64_t i = 0; i < s.len; ++i) ga[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
      }
  });
}

Tensor log_softmax(const Tensor& a, int axis) {
  const int ax = normalize_axis(axis, a.rank());
  const auto s = split_at(a.shape(), ax);
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t in = 0; in < s.inner; ++in) {
      auto idx = [&](std::int64_t i) { return (o * s.len + i) * s.inner + in; };
      double mx = -INFINITY;
      for (std::int64_t i = 0; i < s.len; ++i) mx = std::max(mx, x[idx(i)]);
      double total = 0.0;
      for (std::int64_t i = 0; i < s.len; ++i) total += std::exp(x[idx(i)] - mx);
      const double lse = mx + std::log(total);
      for (std::int64_t i = 0; i < s.len; ++i) out[idx(i)] = x[idx(i)] - lse;
    }
  auto an = a.node();
  return make_op(a.shape(), std::move(out), "log_softmax", {a}, [an, s](Node& self) {
    double* ga = grad_of(an);
    if (!ga) return;
    const double* y = self.data.data();
    const double* g = self.grad.data();
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t in = 0; in < s.inner; ++in) {
        auto idx = [&](std::int64_t i) { return (o * s.len + i) * s.inner + in; };
        double gsum = 0.0;
        for (std::int64_t i = 0; i < s.len; ++i) gsum += g[idx(i)];
        for (std::int64_t i = 0; i < s.len; ++i) ga[idx(i)] += g[idx(i)] - std::exp(y[idx(i)]) * gsum;
      }
  });
}

Tensor layernorm(const Tensor& a, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("layernorm: eps must be positive");
  if (a.rank() < 1) throw DimensionError("layernorm: needs rank >= 1");
  const std::int64_t width = a.shape().back();
  const std::int64_t rows = width ? a.numel() / width : 0;
  const auto x = a.data();
  std::vector<double> out(x.size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * width;
    double mu = 0.0;
    for (std::int64_t j = 0; j < width; ++j) mu += xr[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::int64_t j = 0; j < width; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::int64_t j = 0; j < width; ++j) out[r * width + j] = (xr[j] - mu) * is;
  }
  auto an = a.node();
  // xhat is recomputed from the unrounded statistics so the backward rule is exact.
  return make_op(a.shape(), std::move(out), "layernorm", {a},
                 [an, inv_std = std::move(inv_std), rows, width](Node& self) {
                   double* ga = grad_of(an);
                   if (!ga) return;
                   const double* x = an->data.data();
                   const double* g = self.grad.data();
                   std::vector<double> xhat(static_cast<std::size_t>(width));
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const double* xr = x + r * width;
                     const double* gr = g + r * width;
                     double mu = 0.0;
                     for (std::int64_t j = 0; j < width; ++j) mu += xr[j];
                     mu /= static_cast<double>(width);
                     double gmean = 0.0, gx = 0.0;
                     for (std::int64_t j = 0; j < width; ++j) {
                       xhat[j] = (xr[j] - mu) * inv_std[r];
                       gmean += gr[j];
                       gx += gr[j] * xhat[j];
                     }
                     gmean /= static_cast<double>(width);
                     gx /= static_cast<double>(width);
                     for (std::int64_t j = 0; j < width; ++j)
                       ga[r * width + j] += inv_std[r] * (gr[j] - gmean - xhat[j] * gx);
                   }
                 });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  auto an = a.node();
  return make_op(a.shape(), std::move(out), "gelu", {a}, [an](Node& self) {
    double* ga = grad_of(an);
    if (!ga) return;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = an->data[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      ga[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

Tensor l2_normalize(const Tensor& a, int axis, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("l2_normalize: eps must be positive");
  const int ax = normalize_axis(axis, a.rank());
  const auto s = split_at(a.shape(), ax);
  const auto x = a.data();
  std::vector<double> out(x.size());
  std::vector<double> norms(static_cast<std::size_t>(s.outer * s.inner));
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t in = 0; in < s.inner; ++in) {
      auto idx = [&](std::int64_t i) { return (o * s.len + i) * s.inner + in; };
      double sq = 0.0;
      for (std::int64_t i = 0; i < s.len; ++i) sq += x[idx(i)] * x[idx(i)];
      const double norm = std::sqrt(sq);
      norms[o * s.inner + in] = norm;
      const double denom = std::max(norm, eps);
      for (std::int64_t i = 0; i < s.len; ++i) out[idx(i)] = x[idx(i)] / denom;
    }
  auto an = a.node();
  return make_op(a.shape(), std::move(out), "l2_normalize", {a},
                 [an, s, eps, norms = std::move(norms)](Node& self) {
                   double* ga = grad_of(an);
                   if (!ga) return;
                   const double* x = an->data.data();
                   const double* g = self.grad.data();
                   for (std::int64_t o = 0; o < s.outer; ++o)
                     for (std::int64_t in = 0; in < s.inner; ++in) {
                       auto idx = [&](std::int64_t i) { return (o * s.len + i) * s.inner + in; };
                       const double norm = norms[o * s.inner + in];
                       if (norm > eps) {
                         double dot = 0.0;
                         for (std::int64_t i = 0; i < s.len; ++i) dot += g[idx(i)] * x[idx(i)];
                         const double n3 = norm * norm * norm;
                         for (std::int64_t i = 0; i < s.len; ++i)
                           ga[idx(i)] += g[idx(i)] / norm - x[idx(i)] * dot / n3;
                       } else {
                         for (std::int64_t i = 0; i < s.len; ++i) ga[idx(i)] += g[idx(i)] / eps;
                       }
                     }
                 });
}

// --- layout -------------------------------------------------------------------

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const int r = a.rank();
  if (static_cast<int>(axes.size()) != r) throw DimensionError("permute: expected " + std::to_string(r) + " axes");
  std::vector<int> resolved(axes.size());
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int i = 0; i < r; ++i) {
    resolved[i] = normalize_axis(axes[i], r);
    if (seen[resolved[i]]) throw DimensionError("permute: repeated axis");
    seen[resolved[i]] = true;
  }
  const Shape& in_shape = a.shape();
  Shape in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[resolved[i]];

  // Trailing axes that stay in place are copied as contiguous runs.
  int kept_tail = 0;
  std::int64_t run = 1;
  while (kept_tail < r && resolved[r - 1 - kept_tail] == r - 1 - kept_tail) {
    run *= in_shape[r - 1 - kept_tail];
    ++kept_tail;
  }
  const int lead = r - kept_tail;
  const auto n = a.numel();
  const std::int64_t runs = run ? n / run : 0;
  auto source = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(runs));
  std::vector<std::int64_t> counter(static_cast<std::size_t>(lead), 0);
  for (std::int64_t flat = 0; flat < runs; ++flat) {
    std::int64_t src = 0;
    for (int i = 0; i < lead; ++i) src += counter[i] * in_strides[resolved[i]];
    (*source)[flat] = src;
    for (int i = lead - 1; i >= 0; --i) {
      if (++counter[i] < out_shape[i]) break;
      counter[i] = 0;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(n));
  const double* x = a.data().data();
  for (std::int64_t i = 0; i < runs; ++i) std::copy(x + (*source)[i], x + (*source)[i] + run, out.data() + i * run);
  auto an = a.node();
  return make_op(std::move(out_shape), std::move(out), "permute", {a}, [an, source, run](Node& self) {
    double* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t i = 0; i < source->size(); ++i) {
      const double* g = self.grad.data() + static_cast<std::int64_t>(i) * run;
      double* dst = ga + (*source)[i];
      for (std::int64_t j = 0; j < run; ++j) dst[j] += g[j];
    }
  });
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  std::vector<int> axes(static_cast<std::size_t>(a.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[normalize_axis(axis0, a.rank())], axes[normalize_axis(axis1, a.rank())]);
  return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  auto an = a.node();
  return make_op(std::move(shape), std::move(out), "reshape", {a}, [an](Node& self) {
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  if (a.rank() != b.rank()) throw DimensionError("concat: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int ax = normalize_axis(axis, a.rank());
  for (int i = 0; i < a.rank(); ++i)
    if (i != ax && a.shape()[i] != b.shape()[i])
      throw DimensionError("concat: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const auto sa = split_at(a.shape(), ax);
  const auto sb = split_at(b.shape(), ax);
  const std::int64_t ca = sa.len * sa.inner, cb = sb.len * sb.inner;
  Shape out_shape = a.shape();
  out_shape[ax] += b.shape()[ax];
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(a.numel() + b.numel()));
  for (std::int64_t o = 0; o < sa.outer; ++o) {
    out.insert(out.end(), a.data().begin() + o * ca, a.data().begin() + (o + 1) * ca);
    out.insert(out.end(), b.data().begin() + o * cb, b.data().begin() + (o + 1) * cb);
  }
  auto an = a.node(), bn = b.node();
  const auto outer = sa.outer;
  return make_op(std::move(out_shape), std::move(out), "concat", {a, b}, [an, bn, outer, ca, cb](Node& self) {
    double* ga = grad_of(an);
    double* gb = grad_of(bn);
    for (std::int64_t o = 0; o < outer; ++o) {
      const double* g = self.grad.data() + o * (ca + cb);
      if (ga)
        for (std::int64_t j = 0; j < ca; ++j) ga[o * ca + j] += g[j];
      if (gb)
        for (std::int64_t j = 0; j < cb; ++j) gb[o * cb + j] += g[ca + j];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::int64_t> indices) {
  if (a.rank() < 1) throw DimensionError("gather_rows: needs rank >= 1");
  const std::int64_t rows = a.shape()[0];
  const std::int64_t width = rows ? a.numel() / rows : 0;
  std::vector<double> out;
  out.reserve(indices.size() * static_cast<std::size_t>(width));
  for (auto idx : indices) {
    if (idx < 0 || idx >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(idx) + " out of range for " +
                              std::to_string(rows) + " rows");
    }
    out.insert(out.end(), a.data().begin() + idx * width, a.data().begin() + (idx + 1) * width);
  }
  Shape out_shape = a.shape();
  out_shape[0] = static_cast<std::int64_t>(indices.size());
  auto an = a.node();
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  return make_op(std::move(out_shape), std::move(out), "gather_rows", {a},
                 [an, idx = std::move(idx), width](Node& self) {
                   double* ga = grad_of(an);
                   if (!ga) return;
                   for (std::size_t r = 0; r < idx.size(); ++r)
                     for (std::int64_t j = 0; j < width; ++j) ga[idx[r] * width + j] += self.grad[r * width + j];
                 });
}

Tensor pick(const Tensor& a, std::span<const std::int64_t> indices) {
  if (a.rank() != 2 || a.shape()[0] != static_cast<std::int64_t>(indices.size())) {
    throw DimensionError("pick: expected [" + std::to_string(indices.size()) + ",c], got " + shape_str(a.shape()));
  }
  const std::int64_t cols = a.shape()[1];
  std::vector<std::int64_t> flat(indices.size());
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= cols) throw std::out_of_range("pick: column index out of range");
    flat[i] = static_cast<std::int64_t>(i) * cols + indices[i];
    out[i] = a.data()[flat[i]];
  }
  auto an = a.node();
  return make_op({static_cast<std::int64_t>(indices.size())}, std::move(out), "pick", {a},
                 [an, flat = std::move(flat)](Node& self) {
                   if (double* ga = grad_of(an))
                     for (std::size_t i = 0; i < flat.size(); ++i) ga[flat[i]] += self.grad[i];
                 });
}

// --- reductions -----------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto an = a.node();
  return make_op({}, {total}, "sum", {a}, [an](Node& self) {
    if (double* ga = grad_of(an))
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean_axis(const Tensor& a, int axis) {
  const int ax = normalize_axis(axis, a.rank());
  const auto s = split_at(a.shape(), ax);
  if (s.len == 0) throw DimensionError("mean_axis over empty axis");
  std::vector<double> out(static_cast<std::size_t>(s.outer * s.inner), 0.0);
  const auto x = a.data();
  const double inv = 1.0 / static_cast<double>(s.len);
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t i = 0; i < s.len; ++i)
      for (std::int64_t in = 0; in < s.inner; ++in) out[o * s.inner + in] += x[(o * s.len + i) * s.inner + in];
  for (double& v : out) v *= inv;
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + ax);
  auto an = a.node();
  return make_op(std::move(out_shape), std::move(out), "mean_axis", {a}, [an, s, inv](Node& self) {
    double* ga = grad_of(an);
    if (!ga) return;
    for (std::int64_t o = 0; o < s.outer; ++o)
      for (std::int64_t i = 0; i < s.len; ++i)
        for (std::int64_t in = 0; in < s.inner; ++in)
          ga[(o * s.len + i) * s.inner + in] += self.grad[o * s.inner + in] * inv;
  });
}

// --- verification -------------------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  PrecisionScope scope(Precision::f64);
  auto check_finite = [](double v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(std::string("grad_check: non-finite ") + what);
  };
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor out = f();
  check_finite(out.item(), "function value");
  out.backward();

  double worst = 0.0;
  for (Tensor& p : params) {
    std::vector<double> analytic(static_cast<std::size_t>(p.numel()), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradScope no_grad;
        values[i] = saved + eps;
        plus = f().item();
        values[i] = saved - eps;
        minus = f().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      check_finite(numeric, "finite difference");
      check_finite(analytic[i], "analytic gradient");
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

}  // namespace clipa
