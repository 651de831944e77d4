#include "qcaps/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "qcaps/error.hpp"

namespace qcaps {

namespace {

std::atomic<std::uint64_t> g_node_counter{0};
thread_local bool g_grad_enabled = true;

/// Strides of `in` aligned to `out` (zero along broadcast axes).
Shape broadcast_strides(const Shape& out, const Shape& in) {
  const std::size_t n = out.size();
  const std::size_t off = n - in.size();
  const Shape raw = strides_of(in);
  Shape s(n, 0);
  for (std::size_t i = off; i < n; ++i) {
    if (in[i - off] != 1) s[i] = raw[i - off];
  }
  return s;
}

/// Visits every element of `out` in row-major order, passing the flat output
/// index and the offsets of two inputs addressed by strides `sa` and `sb`.
template <typename F>
void for_each_strided(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const int n = static_cast<int>(out.size());
  if (n == 0) {
    f(Index{0}, Index{0}, Index{0});
    return;
  }
  const Index inner = out[n - 1];
  const Index ia_step = sa[n - 1];
  const Index ib_step = sb[n - 1];
  const Index total = shape_size(out);
  Shape counter(n, 0);
  Index base_a = 0;
  Index base_b = 0;
  for (Index o = 0; o < total; o += inner) {
    for (Index k = 0; k < inner; ++k) f(o + k, base_a + k * ia_step, base_b + k * ib_step);
    for (int d = n - 2; d >= 0; --d) {
      ++counter[d];
      base_a += sa[d];
      base_b += sb[d];
      if (counter[d] < out[d]) break;
      base_a -= counter[d] * sa[d];
      base_b -= counter[d] * sb[d];
      counter[d] = 0;
    }
  }
}

struct AxisSplit {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename Scalar, typename Fwd, typename DA, typename DB>
Var<Scalar> binary_op(const Var<Scalar>& a, const Var<Scalar>& b, Fwd fwd, DA dfa, DB dfb) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const Shape out_shape = broadcast_shapes(as, bs);
  Tensor<Scalar> out(out_shape);
  const Scalar* pa = a.value().data();
  const Scalar* pb = b.value().data();
  Scalar* po = out.data();
  const bool same = as == out_shape && bs == out_shape;
  if (same) {
    for (Index i = 0; i < out.size(); ++i) po[i] = fwd(pa[i], pb[i]);
  } else {
    for_each_strided(out_shape, broadcast_strides(out_shape, as), broadcast_strides(out_shape, bs),
                     [&](Index o, Index ia, Index ib) { po[o] = fwd(pa[ia], pb[ib]); });
  }
  return make_op<Scalar>(std::move(out), {a, b}, [a, b, dfa, dfb, same](Node<Scalar>& self) {
    const Scalar* g = self.grad.data();
    const Scalar* pa = a.value().data();
    const Scalar* pb = b.value().data();
    Scalar* ga = a.requires_grad() ? a.node()->grad_ref().data() : nullptr;
    Scalar* gb = b.requires_grad() ? b.node()->grad_ref().data() : nullptr;
    auto body = [&](Index o, Index ia, Index ib) {
      if (ga) ga[ia] += g[o] * dfa(pa[ia], pb[ib]);
      if (gb) gb[ib] += g[o] * dfb(pa[ia], pb[ib]);
    };
    if (same) {
      for (Index i = 0; i < self.value.size(); ++i) body(i, i, i);
    } else {
      const Shape& os = self.value.shape();
      for_each_strided(os, broadcast_strides(os, a.shape()), broadcast_strides(os, b.shape()), body);
    }
  });
}

/// Element-wise op whose derivative is expressed through input x and output y.
template <typename Scalar, typename Fwd, typename Deriv>
Var<Scalar> unary_op(const Var<Scalar>& a, Fwd fwd, Deriv deriv) {
  Tensor<Scalar> out(a.shape());
  const Scalar* pa = a.value().data();
  Scalar* po = out.data();
  for (Index i = 0; i < out.size(); ++i) po[i] = fwd(pa[i]);
  return make_op<Scalar>(std::move(out), {a}, [a, deriv](Node<Scalar>& self) {
    const Scalar* g = self.grad.data();
    const Scalar* x = a.value().data();
    const Scalar* y = self.value.data();
    Scalar* ga = a.node()->grad_ref().data();
    for (Index i = 0; i < self.value.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

template <typename Scalar>
void im2col(const Scalar* x, Index c, Index h, Index w, Index kh, Index kw, Index stride, Index pad, Index oh,
            Index ow, Scalar* col) {
  for (Index ci = 0; ci < c; ++ci) {
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        Scalar* row = col + ((ci * kh + ky) * kw + kx) * oh * ow;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * stride - pad + ky;
          Scalar* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, Scalar(0));
            continue;
          }
          const Scalar* src = x + (ci * h + iy) * w;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* col, Index c, Index h, Index w, Index kh, Index kw, Index stride, Index pad, Index oh,
            Index ow, Scalar* x) {
  for (Index ci = 0; ci < c; ++ci) {
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        const Scalar* row = col + ((ci * kh + ky) * kw + kx) * oh * ow;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          Scalar* dst = x + (ci * h + iy) * w;
          const Scalar* src = row + oy * ow;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

std::uint64_t next_node_id() { return g_node_counter.fetch_add(1, std::memory_order_relaxed) + 1; }

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

template <typename Scalar>
Tensor<Scalar>& Node<Scalar>::grad_ref() {
  if (grad.empty()) grad = Tensor<Scalar>(value.shape());
  return grad;
}

template <typename Scalar>
Var<Scalar>::Var(Tensor<Scalar> value, bool requires_grad) : node_(std::make_shared<Node<Scalar>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->id = next_node_id();
}

template <typename Scalar>
Var<Scalar> make_op(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs, std::function<void(Node<Scalar>&)> bw) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->id = next_node_id();
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(bw);
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
void accumulate(const Var<Scalar>& v, const Tensor<Scalar>& g) {
  if (!v.requires_grad()) return;
  Tensor<Scalar>& dst = v.node()->grad_ref();
  if (dst.shape() != g.shape()) {
    throw ShapeMismatch("ShapeMismatch: gradient " + shape_string(g.shape()) + " for value " +
                        shape_string(dst.shape()));
  }
  for (Index i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename Scalar>
Var<Scalar> ParameterStore<Scalar>::add(const std::string& name, Tensor<Scalar> value, bool trainable) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  index_[name] = params_.size();
  params_.push_back(Parameter<Scalar>{name, Var<Scalar>(std::move(value), trainable), trainable});
  return params_.back().var;
}

template <typename Scalar>
Parameter<Scalar>& ParameterStore<Scalar>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return params_[it->second];
}

template <typename Scalar>
const Parameter<Scalar>& ParameterStore<Scalar>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return params_[it->second];
}

template <typename Scalar>
Index ParameterStore<Scalar>::trainable_count() const {
  Index n = 0;
  for (const auto& p : params_) {
    if (p.trainable) n += p.var.value().size();
  }
  return n;
}

template <typename Scalar>
void ParameterStore<Scalar>::zero_grad() {
  for (auto& p : params_) p.var.node()->grad = Tensor<Scalar>();
}

template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  if (loss.value().size() != 1) {
    throw NonScalarLoss("NonScalarLoss: loss has shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<Node<Scalar>*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node<Scalar>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node<Scalar>* x, const Node<Scalar>* y) { return x->id > y->id; });

  loss.node()->grad_ref()[0] += Scalar(1);
  for (Node<Scalar>* n : order) {
    if (n->backward && n->has_grad()) n->backward(*n);
  }
  for (Node<Scalar>* n : order) {
    if (n->backward) n->grad = Tensor<Scalar>();
  }
}

template <typename Scalar>
GradientMap<Scalar> backpropagate(const Var<Scalar>& loss, ParameterStore<Scalar>& params) {
  if (loss.value().size() != 1) {
    throw NonScalarLoss("NonScalarLoss: loss has shape " + shape_string(loss.shape()));
  }
  params.zero_grad();
  backward(loss);
  GradientMap<Scalar> out;
  for (const auto& p : params.all()) {
    if (!p.trainable) continue;
    const auto& g = p.var.grad();
    out[p.name] = g.empty() ? Tensor<Scalar>(p.var.shape()) : g;
  }
  return out;
}

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
  return Var<Scalar>(std::move(value), false);
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  return binary_op(
      a, b, [](Scalar x, Scalar y) { return x + y; }, [](Scalar, Scalar) { return Scalar(1); },
      [](Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  return binary_op(
      a, b, [](Scalar x, Scalar y) { return x - y; }, [](Scalar, Scalar) { return Scalar(1); },
      [](Scalar, Scalar) { return Scalar(-1); });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  return binary_op(
      a, b, [](Scalar x, Scalar y) { return x * y; }, [](Scalar, Scalar y) { return y; },
      [](Scalar x, Scalar) { return x; });
}

template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  return binary_op(
      a, b, [](Scalar x, Scalar y) { return x / y; }, [](Scalar, Scalar y) { return Scalar(1) / y; },
      [](Scalar x, Scalar y) { return -x / (y * y); });
}

template <typename Scalar>
Var<Scalar> neg(const Var<Scalar>& a) {
  return unary_op(a, [](Scalar x) { return -x; }, [](Scalar, Scalar) { return Scalar(-1); });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  return unary_op(a, [s](Scalar x) { return x + s; }, [](Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Var<Scalar> mul_scalar(const Var<Scalar>& a, Scalar s) {
  return unary_op(a, [s](Scalar x) { return x * s; }, [s](Scalar, Scalar) { return s; });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  return unary_op(
      a, [](Scalar x) { return x > Scalar(0) ? x : Scalar(0); },
      [](Scalar x, Scalar) { return x > Scalar(0) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  return unary_op(
      a,
      [](Scalar x) {
        if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
        const Scalar e = std::exp(x);
        return e / (Scalar(1) + e);
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  return unary_op(a, [](Scalar x) { return std::log(x); }, [](Scalar x, Scalar) { return Scalar(1) / x; });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  return unary_op(a, [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& a) {
  return unary_op(
      a, [](Scalar x) { return std::sqrt(x); }, [](Scalar, Scalar y) { return Scalar(0.5) / y; });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return unary_op(a, [](Scalar x) { return x * x; }, [](Scalar x, Scalar) { return Scalar(2) * x; });
}

template <typename Scalar>
Var<Scalar> cos(const Var<Scalar>& a) {
  return unary_op(a, [](Scalar x) { return std::cos(x); }, [](Scalar x, Scalar) { return -std::sin(x); });
}

template <typename Scalar>
Var<Scalar> sin(const Var<Scalar>& a) {
  return unary_op(a, [](Scalar x) { return std::sin(x); }, [](Scalar x, Scalar) { return std::cos(x); });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeMismatch("ShapeMismatch: matmul needs rank >= 2, got " + shape_string(as) + " x " + shape_string(bs));
  }
  const Index m = as[as.size() - 2];
  const Index k = as.back();
  const Index n = bs.back();
  const bool shared_b = bs.size() == 2;
  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  if (bs[bs.size() - 2] != k || (!shared_b && a_batch != b_batch)) {
    throw ShapeMismatch("ShapeMismatch: matmul " + shape_string(as) + " x " + shape_string(bs));
  }
  const Index batch = shape_size(a_batch);
  Shape out_shape = a_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<Scalar> out(out_shape);
  using CMap = Eigen::Map<const RowMatrix<Scalar>>;
  using MMap = Eigen::Map<RowMatrix<Scalar>>;
  for (Index t = 0; t < batch; ++t) {
    CMap A(a.value().data() + t * m * k, m, k);
    CMap B(b.value().data() + (shared_b ? 0 : t * k * n), k, n);
    MMap C(out.data() + t * m * n, m, n);
    C.noalias() = A * B;
  }
  return make_op<Scalar>(std::move(out), {a, b}, [a, b, m, k, n, batch, shared_b](Node<Scalar>& self) {
    for (Index t = 0; t < batch; ++t) {
      CMap G(self.grad.data() + t * m * n, m, n);
      if (a.requires_grad()) {
        MMap GA(a.node()->grad_ref().data() + t * m * k, m, k);
        CMap B(b.value().data() + (shared_b ? 0 : t * k * n), k, n);
        GA.noalias() += G * B.transpose();
      }
      if (b.requires_grad()) {
        MMap GB(b.node()->grad_ref().data() + (shared_b ? 0 : t * k * n), k, n);
        CMap A(a.value().data() + t * m * k, m, k);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

Index conv_output_extent(Index in, Index kernel, Index stride, Index padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w, Index stride, Index padding) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || stride < 1 || padding < 0 ||
      xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3]) {
    throw ShapeMismatch("ShapeMismatch: conv2d input " + shape_string(xs) + " kernel " + shape_string(ws));
  }
  const Index batch = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  const Index o = ws[0], kh = ws[2], kw = ws[3];
  const Index oh = conv_output_extent(h, kh, stride, padding);
  const Index ow = conv_output_extent(wd, kw, stride, padding);
  const Index ckk = c * kh * kw;
  const Index plane = oh * ow;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  Tensor<Scalar> out(Shape{batch, o, oh, ow});
  using CMap = Eigen::Map<const RowMatrix<Scalar>>;
  using MMap = Eigen::Map<RowMatrix<Scalar>>;
  CMap W(w.value().data(), o, ckk);
  std::vector<Scalar> col(pointwise ? 0 : static_cast<std::size_t>(ckk * plane));
  for (Index b = 0; b < batch; ++b) {
    const Scalar* xb = x.value().data() + b * c * h * wd;
    const Scalar* colp = xb;
    if (!pointwise) {
      im2col(xb, c, h, wd, kh, kw, stride, padding, oh, ow, col.data());
      colp = col.data();
    }
    MMap(out.data() + b * o * plane, o, plane).noalias() = W * CMap(colp, ckk, plane);
  }

  return make_op<Scalar>(std::move(out), {x, w},
                         [x, w, batch, c, h, wd, o, kh, kw, oh, ow, ckk, plane, stride, padding,
                          pointwise](Node<Scalar>& self) {
    CMap W(w.value().data(), o, ckk);
    std::vector<Scalar> col(pointwise ? 0 : static_cast<std::size_t>(ckk * plane));
    std::vector<Scalar> gcol(pointwise ? 0 : static_cast<std::size_t>(ckk * plane));
    for (Index b = 0; b < batch; ++b) {
      CMap G(self.grad.data() + b * o * plane, o, plane);
      const Scalar* xb = x.value().data() + b * c * h * wd;
      if (w.requires_grad()) {
        const Scalar* colp = xb;
        if (!pointwise) {
          im2col(xb, c, h, wd, kh, kw, stride, padding, oh, ow, col.data());
          colp = col.data();
        }
        MMap(w.node()->grad_ref().data(), o, ckk).noalias() += G * CMap(colp, ckk, plane).transpose();
      }
      if (x.requires_grad()) {
        Scalar* gx = x.node()->grad_ref().data() + b * c * h * wd;
        if (pointwise) {
          MMap(gx, ckk, plane).noalias() += W.transpose() * G;
        } else {
          MMap(gcol.data(), ckk, plane).noalias() = W.transpose() * G;
          col2im(gcol.data(), c, h, wd, kh, kw, stride, padding, oh, ow, gx);
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> permute(const Var<Scalar>& a, const std::vector<int>& axes) {
  const Shape& s = a.shape();
  const int n = static_cast<int>(s.size());
  if (static_cast<int>(axes.size()) != n) {
    throw ShapeMismatch("ShapeMismatch: permute of " + shape_string(s) + " with " + std::to_string(axes.size()) +
                        " axes");
  }
  std::vector<bool> used(n, false);
  const Shape in_strides = strides_of(s);
  Shape out_shape(n), src_strides(n);
  for (int d = 0; d < n; ++d) {
    const int ax = normalize_axis(axes[d], n);
    if (used[ax]) throw ShapeMismatch("ShapeMismatch: repeated axis in permute");
    used[ax] = true;
    out_shape[d] = s[ax];
    src_strides[d] = in_strides[ax];
  }
  Tensor<Scalar> out(out_shape);
  const Scalar* pa = a.value().data();
  Scalar* po = out.data();
  for_each_strided(out_shape, src_strides, src_strides, [&](Index o, Index i, Index) { po[o] = pa[i]; });
  return make_op<Scalar>(std::move(out), {a}, [a, src_strides](Node<Scalar>& self) {
    Scalar* ga = a.node()->grad_ref().data();
    const Scalar* g = self.grad.data();
    for_each_strided(self.value.shape(), src_strides, src_strides, [&](Index o, Index i, Index) { ga[i] += g[o]; });
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  Tensor<Scalar> out = a.value().reshaped(std::move(shape));
  return make_op<Scalar>(std::move(out), {a}, [a](Node<Scalar>& self) {
    Scalar* ga = a.node()->grad_ref().data();
    const Scalar* g = self.grad.data();
    for (Index i = 0; i < self.grad.size(); ++i) ga[i] += g[i];
  });
}

template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& a, int axis, Index start, Index end) {
  const int ax = normalize_axis(axis, a.ndim());
  const AxisSplit sp = split_at(a.shape(), ax);
  if (start < 0 || end > sp.extent || start >= end) {
    throw ShapeMismatch("ShapeMismatch: slice [" + std::to_string(start) + "," + std::to_string(end) + ") of axis " +
                        std::to_string(ax) + " in " + shape_string(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[ax] = end - start;
  const Index len = end - start;
  Tensor<Scalar> out(out_shape);
  for (Index o = 0; o < sp.outer; ++o) {
    const Scalar* src = a.value().data() + (o * sp.extent + start) * sp.inner;
    std::copy(src, src + len * sp.inner, out.data() + o * len * sp.inner);
  }
  return make_op<Scalar>(std::move(out), {a}, [a, sp, start, len](Node<Scalar>& self) {
    Scalar* ga = a.node()->grad_ref().data();
    const Scalar* g = self.grad.data();
    for (Index o = 0; o < sp.outer; ++o) {
      Scalar* dst = ga + (o * sp.extent + start) * sp.inner;
      const Scalar* src = g + o * len * sp.inner;
      for (Index i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ShapeMismatch("ShapeMismatch: concat of nothing");
  const int ax = normalize_axis(axis, parts[0].ndim());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<int>(s.size()) != static_cast<int>(out_shape.size())) {
      throw ShapeMismatch("ShapeMismatch: concat rank mismatch " + shape_string(s));
    }
    out_shape[ax] += s[ax];
    s[ax] = out_shape[ax];
    if (s != out_shape) throw ShapeMismatch("ShapeMismatch: concat " + shape_string(p.shape()));
  }
  const AxisSplit total = split_at(out_shape, ax);
  Tensor<Scalar> out(out_shape);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Index e = p.shape()[ax];
    for (Index o = 0; o < total.outer; ++o) {
      const Scalar* src = p.value().data() + o * e * total.inner;
      std::copy(src, src + e * total.inner, out.data() + (o * total.extent + off) * total.inner);
    }
    off += e;
  }
  return make_op<Scalar>(std::move(out), parts, [parts, offsets, total, ax](Node<Scalar>& self) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!parts[k].requires_grad()) continue;
      const Index e = parts[k].shape()[ax];
      Scalar* gp = parts[k].node()->grad_ref().data();
      for (Index o = 0; o < total.outer; ++o) {
        const Scalar* src = self.grad.data() + (o * total.extent + offsets[k]) * total.inner;
        Scalar* dst = gp + o * e * total.inner;
        for (Index i = 0; i < e * total.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> index_select(const Var<Scalar>& a, int axis, const std::vector<Index>& indices) {
  const int ax = normalize_axis(axis, a.ndim());
  const AxisSplit sp = split_at(a.shape(), ax);
  for (Index i : indices) {
    if (i < 0 || i >= sp.extent) throw ShapeMismatch("ShapeMismatch: index " + std::to_string(i) + " out of range");
  }
  if (indices.empty()) throw ShapeMismatch("ShapeMismatch: empty index_select");
  Shape out_shape = a.shape();
  const Index k = static_cast<Index>(indices.size());
  out_shape[ax] = k;
  Tensor<Scalar> out(out_shape);
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index j = 0; j < k; ++j) {
      const Scalar* src = a.value().data() + (o * sp.extent + indices[j]) * sp.inner;
      std::copy(src, src + sp.inner, out.data() + (o * k + j) * sp.inner);
    }
  }
  return make_op<Scalar>(std::move(out), {a}, [a, sp, indices, k](Node<Scalar>& self) {
    Scalar* ga = a.node()->grad_ref().data();
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index j = 0; j < k; ++j) {
        Scalar* dst = ga + (o * sp.extent + indices[j]) * sp.inner;
        const Scalar* src = self.grad.data() + (o * k + j) * sp.inner;
        for (Index i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> broadcast_to(const Var<Scalar>& a, const Shape& shape) {
  if (broadcast_shapes(a.shape(), shape) != shape) {
    throw ShapeMismatch("ShapeMismatch: cannot broadcast " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  const Shape st = broadcast_strides(shape, a.shape());
  Tensor<Scalar> out(shape);
  const Scalar* pa = a.value().data();
  Scalar* po = out.data();
  for_each_strided(shape, st, st, [&](Index o, Index i, Index) { po[o] = pa[i]; });
  return make_op<Scalar>(std::move(out), {a}, [a, st](Node<Scalar>& self) {
    Scalar* ga = a.node()->grad_ref().data();
    const Scalar* g = self.grad.data();
    for_each_strided(self.value.shape(), st, st, [&](Index o, Index i, Index) { ga[i] += g[o]; });
  });
}

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a, int axis) {
  const int ax = normalize_axis(axis, a.ndim());
  const AxisSplit sp = split_at(a.shape(), ax);
  Tensor<Scalar> out(a.shape());
  const Scalar* x = a.value().data();
  Scalar* y = out.data();
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.extent * sp.inner + i;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index e = 0; e < sp.extent; ++e) mx = std::max(mx, x[base + e * sp.inner]);
      Scalar total = 0;
      for (Index e = 0; e < sp.extent; ++e) {
        const Scalar v = std::exp(x[base + e * sp.inner] - mx);
        y[base + e * sp.inner] = v;
        total += v;
      }
      for (Index e = 0; e < sp.extent; ++e) y[base + e * sp.inner] /= total;
    }
  }
  return make_op<Scalar>(std::move(out), {a}, [a, sp](Node<Scalar>& self) {
    Scalar* ga = a.node()->grad_ref().data();
    const Scalar* g = self.grad.data();
    const Scalar* y = self.value.data();
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.extent * sp.inner + i;
        Scalar dot = 0;
        for (Index e = 0; e < sp.extent; ++e) dot += g[base + e * sp.inner] * y[base + e * sp.inner];
        for (Index e = 0; e < sp.extent; ++e) {
          const Index k = base + e * sp.inner;
          ga[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

namespace {

Shape reduced_shape(const Shape& s, int ax, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[ax] = 1;
  } else {
    out.erase(out.begin() + ax);
  }
  return out;
}

}  // namespace

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a, int axis, bool keepdim) {
  const int ax = normalize_axis(axis, a.ndim());
  const AxisSplit sp = split_at(a.shape(), ax);
  Tensor<Scalar> out(reduced_shape(a.shape(), ax, keepdim));
  const Scalar* x = a.value().data();
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index e = 0; e < sp.extent; ++e) {
      const Scalar* src = x + (o * sp.extent + e) * sp.inner;
      Scalar* dst = out.data() + o * sp.inner;
      for (Index i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  return make_op<Scalar>(std::move(out), {a}, [a, sp](Node<Scalar>& self) {
    Scalar* ga = a.node()->grad_ref().data();
    for (Index o = 0; o < sp.outer; ++o) {
      const Scalar* g = self.grad.data() + o * sp.inner;
      for (Index e = 0; e < sp.extent; ++e) {
        Scalar* dst = ga + (o * sp.extent + e) * sp.inner;
        for (Index i = 0; i < sp.inner; ++i) dst[i] += g[i];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a, int axis, bool keepdim) {
  const int ax = normalize_axis(axis, a.ndim());
  return mul_scalar(sum(a, ax, keepdim), Scalar(1) / static_cast<Scalar>(a.shape()[ax]));
}

template <typename Scalar>
Var<Scalar> max(const Var<Scalar>& a, int axis, bool keepdim) {
  const int ax = normalize_axis(axis, a.ndim());
  const AxisSplit sp = split_at(a.shape(), ax);
  Tensor<Scalar> out(reduced_shape(a.shape(), ax, keepdim));
  std::vector<Index> arg(static_cast<std::size_t>(sp.outer * sp.inner), 0);
  const Scalar* x = a.value().data();
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index i = 0; i < sp.inner; ++i) {
      Index best = 0;
      Scalar bv = x[o * sp.extent * sp.inner + i];
      for (Index e = 1; e < sp.extent; ++e) {
        const Scalar v = x[(o * sp.extent + e) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = e;
        }
      }
      out[o * sp.inner + i] = bv;
      arg[static_cast<std::size_t>(o * sp.inner + i)] = best;
    }
  }
  return make_op<Scalar>(std::move(out), {a}, [a, sp, arg](Node<Scalar>& self) {
    Scalar* ga = a.node()->grad_ref().data();
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index i = 0; i < sp.inner; ++i) {
        const Index e = arg[static_cast<std::size_t>(o * sp.inner + i)];
        ga[(o * sp.extent + e) * sp.inner + i] += self.grad[o * sp.inner + i];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> sum_all(const Var<Scalar>& a) {
  Scalar total = 0;
  for (Scalar v : a.value().values()) total += v;
  return make_op<Scalar>(Tensor<Scalar>::scalar(total), {a}, [a](Node<Scalar>& self) {
    const Scalar g = self.grad[0];
    Scalar* ga = a.node()->grad_ref().data();
    for (Index i = 0; i < a.value().size(); ++i) ga[i] += g;
  });
}

template <typename Scalar>
Var<Scalar> mean_all(const Var<Scalar>& a) {
  return mul_scalar(sum_all(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

#define QCAPS_INSTANTIATE_AUTODIFF(S)                                                         \
  template struct Node<S>;                                                                    \
  template class Var<S>;                                                                      \
  template class ParameterStore<S>;                                                           \
  template Var<S> make_op(Tensor<S>, std::vector<Var<S>>, std::function<void(Node<S>&)>);     \
  template void accumulate(const Var<S>&, const Tensor<S>&);                                  \
  template void backward(const Var<S>&);                                                      \
  template GradientMap<S> backpropagate(const Var<S>&, ParameterStore<S>&);                   \
  template Var<S> constant(Tensor<S>);                                                        \
  template Var<S> add(const Var<S>&, const Var<S>&);                                          \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                          \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                          \
  template Var<S> div(const Var<S>&, const Var<S>&);                                          \
  template Var<S> neg(const Var<S>&);                                                         \
  template Var<S> add_scalar(const Var<S>&, S);                                               \
  template Var<S> mul_scalar(const Var<S>&, S);                                               \
  template Var<S> relu(const Var<S>&);                                                        \
  template Var<S> sigmoid(const Var<S>&);                                                     \
  template Var<S> log(const Var<S>&);                                                         \
  template Var<S> exp(const Var<S>&);                                                         \
  template Var<S> sqrt(const Var<S>&);                                                        \
  template Var<S> square(const Var<S>&);                                                      \
  template Var<S> cos(const Var<S>&);                                                         \
  template Var<S> sin(const Var<S>&);                                                         \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                       \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, Index, Index);                         \
  template Var<S> permute(const Var<S>&, const std::vector<int>&);                            \
  template Var<S> reshape(const Var<S>&, Shape);                                              \
  template Var<S> slice(const Var<S>&, int, Index, Index);                                    \
  template Var<S> concat(const std::vector<Var<S>>&, int);                                    \
  template Var<S> index_select(const Var<S>&, int, const std::vector<Index>&);                \
  template Var<S> broadcast_to(const Var<S>&, const Shape&);                                  \
  template Var<S> softmax(const Var<S>&, int);                                                \
  template Var<S> sum(const Var<S>&, int, bool);                                              \
  template Var<S> mean(const Var<S>&, int, bool);                                             \
  template Var<S> max(const Var<S>&, int, bool);                                              \
  template Var<S> sum_all(const Var<S>&);                                                     \
  template Var<S> mean_all(const Var<S>&);

QCAPS_INSTANTIATE_AUTODIFF(float)
QCAPS_INSTANTIATE_AUTODIFF(double)

}  // namespace qcaps
