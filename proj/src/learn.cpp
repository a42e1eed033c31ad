#include "gazeneck/learn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include <Eigen/Core>

#include "gazeneck/errors.hpp"

namespace gazeneck::learn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using CMapR = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

void check_finite(const Node& n, const char* op) {
#ifndef NDEBUG
  for (float v : n.value)
    if (!std::isfinite(v)) throw Error(std::string("non-finite value produced by ") + op);
#else
  (void)n;
  (void)op;
#endif
}

// Builds the output node. Parents are only kept when a gradient is needed.
std::shared_ptr<Node> make_out(Shape shape, std::initializer_list<const Tensor*> inputs) {
  auto out = std::make_shared<Node>();
  out->value.assign(numel(shape), 0.0f);
  out->shape = std::move(shape);
  if (!g_grad_enabled) return out;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) out->requires_grad = true;
  if (out->requires_grad)
    for (const Tensor* t : inputs) out->parents.push_back(t->node());
  return out;
}

std::shared_ptr<Node> make_out(Shape shape, const std::vector<Tensor>& inputs) {
  auto out = std::make_shared<Node>();
  out->value.assign(numel(shape), 0.0f);
  out->shape = std::move(shape);
  if (!g_grad_enabled) return out;
  for (const auto& t : inputs)
    if (t.requires_grad()) out->requires_grad = true;
  if (out->requires_grad)
    for (const auto& t : inputs) out->parents.push_back(t.node());
  return out;
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const Tensor& a, int r, const char* op) {
  if (a.rank() != r) throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                                         shape_str(a.shape()));
}

Tensor finish(std::shared_ptr<Node> out, const char* op) {
  check_finite(*out, op);
  return Tensor(std::move(out));
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeMismatch("negative dimension in " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) r += (i ? ", " : "") + std::to_string(s[i]);
  return r + "]";
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value.assign(numel(shape), 0.0f);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from(const Shape& shape, Buffer values, bool requires_grad) {
  if (values.size() != numel(shape))
    throw ShapeMismatch("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from(const Shape& shape, const std::vector<float>& values, bool requires_grad) {
  return from(shape, Buffer(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::initializer_list<float> values, bool requires_grad) {
  return from(shape, Buffer(values), requires_grad);
}

float Tensor::item() const {
  if (size() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return Tensor::from(shape(), values(), false); }

NoGrad::NoGrad() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeMismatch("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward();
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  auto out = make_out(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < a.size(); ++i) out->value[i] = a.data()[i] + b.data()[i];
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get(), *pb = b.node().get();
    out->backward = [o, pa, pb] {
      for (Node* p : {pa, pb})
        if (p->requires_grad) {
          auto& g = p->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
        }
    };
  }
  return finish(out, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  auto out = make_out(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < a.size(); ++i) out->value[i] = a.data()[i] - b.data()[i];
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get(), *pb = b.node().get();
    out->backward = [o, pa, pb] {
      if (pa->requires_grad) {
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
      if (pb->requires_grad) {
        auto& g = pb->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o->grad[i];
      }
    };
  }
  return finish(out, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  auto out = make_out(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < a.size(); ++i) out->value[i] = a.data()[i] * b.data()[i];
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get(), *pb = b.node().get();
    out->backward = [o, pa, pb] {
      if (pa->requires_grad) {
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        auto& g = pb->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * pa->value[i];
      }
    };
  }
  return finish(out, "mul");
}

Tensor scale(const Tensor& a, float s) {
  auto out = make_out(a.shape(), {&a});
  for (std::size_t i = 0; i < a.size(); ++i) out->value[i] = a.data()[i] * s;
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get();
    out->backward = [o, pa, s] {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * s;
    };
  }
  return finish(out, "scale");
}

Tensor exp(const Tensor& a) {
  auto out = make_out(a.shape(), {&a});
  for (std::size_t i = 0; i < a.size(); ++i) out->value[i] = std::exp(a.data()[i]);
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get();
    out->backward = [o, pa] {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * o->value[i];
    };
  }
  return finish(out, "exp");
}

Tensor gelu(const Tensor& a) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  constexpr float kInvSqrt2Pi = 0.39894228040143268f;
  auto out = make_out(a.shape(), {&a});
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float x = a.data()[i];
    out->value[i] = 0.5f * x * (1.0f + std::erf(x * kInvSqrt2));
  }
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get();
    out->backward = [o, pa] {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float x = pa->value[i];
        const float d = 0.5f * (1.0f + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5f * x * x);
        g[i] += o->grad[i] * d;
      }
    };
  }
  return finish(out, "gelu");
}

Tensor sum(const Tensor& a) {
  auto out = make_out({1}, {&a});
  double s = 0.0;
  for (float v : a.values()) s += v;
  out->value[0] = static_cast<float>(s);
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get();
    out->backward = [o, pa] {
      auto& g = pa->ensure_grad();
      for (auto& v : g) v += o->grad[0];
    };
  }
  return finish(out, "sum");
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeMismatch("mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.size()));
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel(shape) != a.size())
    throw ShapeMismatch("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto out = make_out(shape, {&a});
  out->value = a.values();
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get();
    out->backward = [o, pa] {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
    };
  }
  return Tensor(out);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: nothing to concatenate");
  const int n = parts[0].dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != n) throw ShapeMismatch("concat_cols: row count mismatch");
    cols += p.dim(1);
  }
  auto out = make_out({n, cols}, parts);
  int off = 0;
  for (const auto& p : parts) {
    const int c = p.dim(1);
    for (int r = 0; r < n; ++r)
      std::copy_n(p.data() + static_cast<std::size_t>(r) * c, c, out->value.data() + static_cast<std::size_t>(r) * cols + off);
    off += c;
  }
  if (out->requires_grad) {
    std::vector<Node*> ps;
    for (const auto& p : parts) ps.push_back(p.node().get());
    Node* o = out.get();
    out->backward = [o, ps, n, cols] {
      int off = 0;
      for (Node* p : ps) {
        const int c = p->shape[1];
        if (p->requires_grad) {
          auto& g = p->ensure_grad();
          for (int r = 0; r < n; ++r)
            for (int j = 0; j < c; ++j)
              g[static_cast<std::size_t>(r) * c + j] += o->grad[static_cast<std::size_t>(r) * cols + off + j];
        }
        off += c;
      }
    };
  }
  return Tensor(out);
}

Tensor slice_cols(const Tensor& a, int begin, int count) {
  require_rank(a, 2, "slice_cols");
  const int n = a.dim(0), cols = a.dim(1);
  if (begin < 0 || count < 0 || begin + count > cols)
    throw ShapeMismatch("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                        shape_str(a.shape()));
  auto out = make_out({n, count}, {&a});
  for (int r = 0; r < n; ++r)
    std::copy_n(a.data() + static_cast<std::size_t>(r) * cols + begin, count,
                out->value.data() + static_cast<std::size_t>(r) * count);
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get();
    out->backward = [o, pa, n, cols, begin, count] {
      auto& g = pa->ensure_grad();
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < count; ++j)
          g[static_cast<std::size_t>(r) * cols + begin + j] += o->grad[static_cast<std::size_t>(r) * count + j];
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------- dense / conv

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const int n = x.dim(0), in = x.dim(1), outd = w.dim(0);
  if (w.dim(1) != in || b.size() != static_cast<std::size_t>(outd))
    throw ShapeMismatch("linear: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) + ", b " +
                        shape_str(b.shape()));
  auto out = make_out({n, outd}, {&x, &w, &b});
  {
    CMapR X(x.data(), n, in), W(w.data(), outd, in);
    Eigen::Map<const Eigen::RowVectorXf> B(b.data(), outd);
    MapR Y(out->value.data(), n, outd);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += B;
  }
  if (out->requires_grad) {
    Node *o = out.get(), *px = x.node().get(), *pw = w.node().get(), *pb = b.node().get();
    out->backward = [o, px, pw, pb, n, in, outd] {
      CMapR G(o->grad.data(), n, outd);
      if (px->requires_grad) {
        MapR(px->ensure_grad().data(), n, in).noalias() += G * CMapR(pw->value.data(), outd, in);
      }
      if (pw->requires_grad) {
        MapR(pw->ensure_grad().data(), outd, in).noalias() += G.transpose() * CMapR(px->value.data(), n, in);
      }
      if (pb->requires_grad) {
        Eigen::Map<Eigen::RowVectorXf>(pb->ensure_grad().data(), outd) += G.colwise().sum();
      }
    };
  }
  return finish(out, "linear");
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const int batch = a.dim(0), m = a.dim(1), kk = a.dim(2);
  const int n = trans_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != batch || (trans_b ? b.dim(2) : b.dim(1)) != kk)
    throw ShapeMismatch("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + (trans_b ? "^T" : ""));
  auto out = make_out({batch, m, n}, {&a, &b});
  const std::size_t sa = std::size_t(m) * kk, sb = std::size_t(kk) * n, so = std::size_t(m) * n;
  for (int i = 0; i < batch; ++i) {
    CMapR A(a.data() + i * sa, m, kk);
    MapR C(out->value.data() + i * so, m, n);
    if (trans_b) C.noalias() = A * CMapR(b.data() + i * sb, n, kk).transpose();
    else C.noalias() = A * CMapR(b.data() + i * sb, kk, n);
  }
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get(), *pb = b.node().get();
    out->backward = [o, pa, pb, batch, m, kk, n, sa, sb, so, trans_b] {
      for (int i = 0; i < batch; ++i) {
        CMapR G(o->grad.data() + i * so, m, n);
        CMapR A(pa->value.data() + i * sa, m, kk);
        if (trans_b) {
          CMapR B(pb->value.data() + i * sb, n, kk);
          if (pa->requires_grad) MapR(pa->ensure_grad().data() + i * sa, m, kk).noalias() += G * B;
          if (pb->requires_grad) MapR(pb->ensure_grad().data() + i * sb, n, kk).noalias() += G.transpose() * A;
        } else {
          CMapR B(pb->value.data() + i * sb, kk, n);
          if (pa->requires_grad) MapR(pa->ensure_grad().data() + i * sa, m, kk).noalias() += G * B.transpose();
          if (pb->requires_grad) MapR(pb->ensure_grad().data() + i * sb, kk, n).noalias() += A.transpose() * G;
        }
      }
    };
  }
  return finish(out, "bmm");
}

Tensor softmax(const Tensor& a) {
  if (a.rank() < 1) throw ShapeMismatch("softmax: scalar input");
  const int cols = a.dim(a.rank() - 1);
  const std::size_t rows = a.size() / std::size_t(cols);
  auto out = make_out(a.shape(), {&a});
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = a.data() + r * cols;
    float* y = out->value.data() + r * cols;
    const float mx = *std::max_element(x, x + cols);
    double z = 0;
    for (int c = 0; c < cols; ++c) z += y[c] = std::exp(x[c] - mx);
    for (int c = 0; c < cols; ++c) y[c] = static_cast<float>(y[c] / z);
  }
  if (out->requires_grad) {
    Node *o = out.get(), *pa = a.node().get();
    out->backward = [o, pa, rows, cols] {
      auto& g = pa->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const float* y = o->value.data() + r * cols;
        const float* go = o->grad.data() + r * cols;
        double dot = 0;
        for (int c = 0; c < cols; ++c) dot += double(go[c]) * y[c];
        for (int c = 0; c < cols; ++c) g[r * cols + c] += static_cast<float>(y[c] * (go[c] - dot));
      }
    };
  }
  return finish(out, "softmax");
}

namespace {

// col [C*k*k, Ho*Wo] for one image [C, H, W].
void im2col(const float* img, int c, int h, int w, int k, int s, int p, int ho, int wo, float* col) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s - p + ky;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s - p + kx;
            row[oy * wo + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? img[(static_cast<std::size_t>(ci) * h + iy) * w + ix] : 0.0f;
          }
        }
      }
}

void col2im(const float* col, int c, int h, int w, int k, int s, int p, int ho, int wo, float* img) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s - p + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s - p + kx;
            if (ix >= 0 && ix < w) img[(static_cast<std::size_t>(ci) * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int k, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int oc = w.dim(0), ckk = c * k * k;
  if (w.rank() != 2 || w.dim(1) != ckk || b.size() != static_cast<std::size_t>(oc))
    throw ShapeMismatch("conv2d: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) + ", k " +
                        std::to_string(k));
  if (stride < 1 || k < 1 || pad < 0) throw ShapeMismatch("conv2d: bad kernel geometry");
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeMismatch("conv2d: input " + shape_str(x.shape()) + " too small");
  const std::size_t hw = static_cast<std::size_t>(ho) * wo;
  auto out = make_out({n, oc, ho, wo}, {&x, &w, &b});
  // Columns are kept for the backward pass only when needed.
  auto cols = std::make_shared<std::vector<float>>(static_cast<std::size_t>(out->requires_grad ? n : 1) * ckk * hw);
  CMapR W(w.data(), oc, ckk);
  Eigen::Map<const Eigen::VectorXf> B(b.data(), oc);
  for (int i = 0; i < n; ++i) {
    float* col = cols->data() + (out->requires_grad ? static_cast<std::size_t>(i) * ckk * hw : 0);
    im2col(x.data() + static_cast<std::size_t>(i) * c * h * wd, c, h, wd, k, stride, pad, ho, wo, col);
    MapR Y(out->value.data() + static_cast<std::size_t>(i) * oc * hw, oc, static_cast<Eigen::Index>(hw));
    Y.noalias() = W * CMapR(col, ckk, static_cast<Eigen::Index>(hw));
    Y.colwise() += B;
  }
  if (out->requires_grad) {
    Node *o = out.get(), *px = x.node().get(), *pw = w.node().get(), *pb = b.node().get();
    out->backward = [=] {
      std::vector<float> dcol(static_cast<std::size_t>(ckk) * hw);
      for (int i = 0; i < n; ++i) {
        CMapR G(o->grad.data() + static_cast<std::size_t>(i) * oc * hw, oc, static_cast<Eigen::Index>(hw));
        CMapR col(cols->data() + static_cast<std::size_t>(i) * ckk * hw, ckk, static_cast<Eigen::Index>(hw));
        if (pw->requires_grad) MapR(pw->ensure_grad().data(), oc, ckk).noalias() += G * col.transpose();
        if (pb->requires_grad) Eigen::Map<Eigen::VectorXf>(pb->ensure_grad().data(), oc) += G.rowwise().sum();
        if (px->requires_grad) {
          MapR D(dcol.data(), ckk, static_cast<Eigen::Index>(hw));
          D.noalias() = CMapR(pw->value.data(), oc, ckk).transpose() * G;
          col2im(dcol.data(), c, h, wd, k, stride, pad, ho, wo,
                 px->ensure_grad().data() + static_cast<std::size_t>(i) * c * h * wd);
        }
      }
    };
  }
  return finish(out, "conv2d");
}

// ---------------------------------------------------------------- losses

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  require_same(pred, target, "l1_loss");
  auto out = make_out({1}, {&pred, &target});
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred.data()[i] - target.data()[i]);
  out->value[0] = static_cast<float>(s / static_cast<double>(pred.size()));
  if (out->requires_grad) {
    Node *o = out.get(), *pp = pred.node().get(), *pt = target.node().get();
    out->backward = [o, pp, pt] {
      const float g0 = o->grad[0] / static_cast<float>(pp->value.size());
      for (std::size_t i = 0; i < pp->value.size(); ++i) {
        const float d = pp->value[i] - pt->value[i];
        const float sg = d > 0 ? g0 : (d < 0 ? -g0 : 0.0f);
        if (pp->requires_grad) pp->ensure_grad()[i] += sg;
        if (pt->requires_grad) pt->ensure_grad()[i] -= sg;
      }
    };
  }
  return finish(out, "l1_loss");
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  require_same(pred, target, "mse_loss");
  auto out = make_out({1}, {&pred, &target});
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data()[i] - target.data()[i];
    s += d * d;
  }
  out->value[0] = static_cast<float>(s / static_cast<double>(pred.size()));
  if (out->requires_grad) {
    Node *o = out.get(), *pp = pred.node().get(), *pt = target.node().get();
    out->backward = [o, pp, pt] {
      const float g0 = 2.0f * o->grad[0] / static_cast<float>(pp->value.size());
      for (std::size_t i = 0; i < pp->value.size(); ++i) {
        const float d = (pp->value[i] - pt->value[i]) * g0;
        if (pp->requires_grad) pp->ensure_grad()[i] += d;
        if (pt->requires_grad) pt->ensure_grad()[i] -= d;
      }
    };
  }
  return finish(out, "mse_loss");
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  require_rank(logits, 2, "cross_entropy");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw ShapeMismatch("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  for (int t : targets)
    if (t < 0 || t >= k) throw IndexOutOfRange("cross_entropy: target " + std::to_string(t) + " not in [0, " +
                                               std::to_string(k) + ")");
  auto out = make_out({1}, {&logits});
  auto probs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n) * k);
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const float* z = logits.data() + static_cast<std::size_t>(r) * k;
    const float mx = *std::max_element(z, z + k);
    double se = 0.0;
    for (int j = 0; j < k; ++j) se += std::exp(static_cast<double>(z[j] - mx));
    const double lse = mx + std::log(se);
    total += lse - z[targets[r]];
    for (int j = 0; j < k; ++j) (*probs)[static_cast<std::size_t>(r) * k + j] = static_cast<float>(std::exp(z[j] - lse));
  }
  out->value[0] = static_cast<float>(total / n);
  if (out->requires_grad) {
    Node *o = out.get(), *pl = logits.node().get();
    out->backward = [o, pl, probs, targets, n, k] {
      auto& g = pl->ensure_grad();
      const float g0 = o->grad[0] / static_cast<float>(n);
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < k; ++j) {
          const std::size_t i = static_cast<std::size_t>(r) * k + j;
          g[i] += g0 * ((*probs)[i] - (j == targets[r] ? 1.0f : 0.0f));
        }
    };
  }
  return finish(out, "cross_entropy");
}

Tensor kl_loss(const Tensor& mu, const Tensor& logvar) {
  require_same(mu, logvar, "kl_loss");
  const int rows = mu.rank() == 2 ? mu.dim(0) : 1;
  auto out = make_out({1}, {&mu, &logvar});
  double s = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double m = mu.data()[i], lv = logvar.data()[i];
    s += m * m + std::exp(lv) - 1.0 - lv;
  }
  out->value[0] = static_cast<float>(0.5 * s / rows);
  if (out->requires_grad) {
    Node *o = out.get(), *pm = mu.node().get(), *pv = logvar.node().get();
    out->backward = [o, pm, pv, rows] {
      const float g0 = o->grad[0] / static_cast<float>(rows);
      for (std::size_t i = 0; i < pm->value.size(); ++i) {
        if (pm->requires_grad) pm->ensure_grad()[i] += g0 * pm->value[i];
        if (pv->requires_grad) pv->ensure_grad()[i] += g0 * 0.5f * (std::exp(pv->value[i]) - 1.0f);
      }
    };
  }
  return finish(out, "kl_loss");
}

// ---------------------------------------------------------------- blocks

namespace {

Tensor uniform_param(const Shape& shape, float bound, Rng& rng) {
  std::uniform_real_distribution<float> u(-bound, bound);
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(shape, std::move(v), true);
}

}  // namespace

Linear::Linear(int in, int out, Rng& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  w = uniform_param({out, in}, bound, rng);
  b = uniform_param({out}, bound, rng);
}

Conv2d::Conv2d(int in, int out, int k_, int stride_, int pad_, Rng& rng) : k(k_), stride(stride_), pad(pad_) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in * k * k));
  w = uniform_param({out, in * k * k}, bound, rng);
  b = uniform_param({out}, bound, rng);
}

Mlp::Mlp(const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2) throw ShapeMismatch("Mlp needs at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1], rng);
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = gelu(h);
  }
  return h;
}

std::vector<Tensor> Mlp::params() const {
  std::vector<Tensor> p;
  for (const auto& l : layers)
    for (const auto& t : l.params()) p.push_back(t);
  return p;
}

namespace {
int conv_out(int n) { return (n + 2 - 3) / 2 + 1; }
}  // namespace

ConvEncoder::ConvEncoder(int channels_, int height_, int width_, std::vector<int> widths_, int feature_, Rng& rng)
    : channels(channels_), height(height_), width(width_), feature(feature_), widths(std::move(widths_)) {
  if (widths.size() != 3) throw ShapeMismatch("ConvEncoder takes exactly three conv widths");
  c1 = Conv2d(channels, widths[0], 3, 2, 1, rng);
  c2 = Conv2d(widths[0], widths[1], 3, 2, 1, rng);
  c3 = Conv2d(widths[1], widths[2], 3, 2, 1, rng);
  const int h3 = conv_out(conv_out(conv_out(height))), w3 = conv_out(conv_out(conv_out(width)));
  fc = Linear(widths[2] * h3 * w3, feature, rng);
}

Tensor ConvEncoder::operator()(const Tensor& x) const {
  require_rank(x, 4, "ConvEncoder");
  if (x.dim(1) != channels || x.dim(2) != height || x.dim(3) != width)
    throw ShapeMismatch("ConvEncoder: expected [N, " + std::to_string(channels) + ", " + std::to_string(height) + ", " +
                        std::to_string(width) + "], got " + shape_str(x.shape()));
  Tensor h = gelu(c3(gelu(c2(gelu(c1(x))))));
  h = reshape(h, {x.dim(0), static_cast<int>(h.size() / static_cast<std::size_t>(x.dim(0)))});
  return gelu(fc(h));
}

std::vector<Tensor> ConvEncoder::params() const {
  std::vector<Tensor> p;
  for (const auto* c : {&c1, &c2, &c3})
    for (const auto& t : c->params()) p.push_back(t);
  for (const auto& t : fc.params()) p.push_back(t);
  return p;
}

nlohmann::json ConvEncoder::arch() const {
  return {{"channels", channels}, {"height", height}, {"width", width}, {"widths", widths}, {"feature", feature}};
}

AttentionLayer::AttentionLayer(int dim_, Rng& rng)
    : dim(dim_), q(dim_, dim_, rng), k(dim_, dim_, rng), v(dim_, dim_, rng), o(dim_, dim_, rng),
      ff({dim_, 2 * dim_, dim_}, rng) {}

Tensor AttentionLayer::operator()(const Tensor& h, int tokens) const {
  const int n = h.dim(0) / tokens;
  const Shape s3{n, tokens, dim};
  const Tensor scores = scale(bmm(reshape(q(h), s3), reshape(k(h), s3), true), 1.0f / std::sqrt(float(dim)));
  const Tensor ctx = bmm(softmax(scores), reshape(v(h), s3));
  const Tensor h1 = add(h, o(reshape(ctx, {n * tokens, dim})));
  return add(h1, ff(h1));
}

std::vector<Tensor> AttentionLayer::params() const {
  std::vector<Tensor> p;
  for (const auto* l : {&q, &k, &v, &o})
    for (const auto& t : l->params()) p.push_back(t);
  for (const auto& t : ff.params()) p.push_back(t);
  return p;
}

const char* to_string(DecoderKind k) { return k == DecoderKind::Attention ? "attention" : "mlp"; }

DecoderKind parse_decoder_kind(const std::string& s) {
  if (s == "mlp") return DecoderKind::Mlp;
  if (s == "attention") return DecoderKind::Attention;
  throw ConfigError("unknown decoder kind: " + s);
}

namespace {
constexpr int kAttentionLayers = 2;
}  // namespace

ChunkDecoder::ChunkDecoder(int in, int hidden, int layers, int k_, int d_, Rng& rng, DecoderKind kind_,
                           int attention_dim)
    : k(k_), d(d_), kind(kind_) {
  if (kind == DecoderKind::Attention) {
    dim = attention_dim;
    embed = Linear(in, k * dim, rng);
    for (int i = 0; i < kAttentionLayers; ++i) attn.emplace_back(dim, rng);
    readout = Linear(dim, d, rng);
    return;
  }
  std::vector<int> widths{in};
  for (int i = 0; i < layers; ++i) widths.push_back(hidden);
  widths.push_back(k * d);
  mlp = Mlp(widths, rng);
}

Tensor ChunkDecoder::operator()(const Tensor& x) const {
  if (kind == DecoderKind::Mlp) return mlp(x);
  const int n = x.dim(0);
  Tensor h = reshape(embed(x), {n * k, dim});
  for (const auto& layer : attn) h = layer(h, k);
  return reshape(readout(h), {n, k * d});
}

std::vector<Tensor> ChunkDecoder::params() const {
  if (kind == DecoderKind::Mlp) return mlp.params();
  std::vector<Tensor> p = embed.params();
  for (const auto& layer : attn)
    for (const auto& t : layer.params()) p.push_back(t);
  for (const auto& t : readout.params()) p.push_back(t);
  return p;
}

CvaeHeads::CvaeHeads(int in, int hidden, int latent_, Rng& rng) : latent(latent_), encoder({in, hidden, hidden, 2 * latent_}, rng) {}

std::pair<Tensor, Tensor> CvaeHeads::encode(const Tensor& x) const {
  const Tensor h = encoder(x);
  return {slice_cols(h, 0, latent), slice_cols(h, latent, latent)};
}

Tensor CvaeHeads::sample(const Tensor& mu, const Tensor& logvar, Rng& rng) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> e(mu.size());
  for (auto& v : e) v = nd(rng);
  const Tensor eps = Tensor::from(mu.shape(), std::move(e));
  return add(mu, mul(exp(scale(logvar, 0.5f)), eps));
}

// ---------------------------------------------------------------- Adam

void adam_update(float* p, const float* g, float* m, float* v, std::size_t n, int t, const AdamConfig& c) {
  if (t < 1) throw Error("adam_update: step must be >= 1");
  const double bc1 = 1.0 - std::pow(static_cast<double>(c.beta1), t);
  const double bc2 = 1.0 - std::pow(static_cast<double>(c.beta2), t);
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = c.beta1 * m[i] + (1.0f - c.beta1) * g[i];
    v[i] = c.beta2 * v[i] + (1.0f - c.beta2) * g[i] * g[i];
    const double mh = m[i] / bc1, vh = v[i] / bc2;
    p[i] -= static_cast<float>(c.lr * mh / (std::sqrt(vh) + c.eps));
  }
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto& g = p.grad();
    adam_update(p.data(), g.data(), m_[i].data(), v_[i].data(), p.size(), t_, cfg_);
  }
}

// ---------------------------------------------------------------- gradcheck

double gradcheck(const std::function<Tensor()>& f, const std::vector<Tensor>& wrt, double h) {
  std::vector<Tensor> ps = wrt;
  for (auto& p : ps) p.zero_grad();
  backward(f());
  double worst = 0.0;
  for (auto& p : ps) {
    const Buffer analytic = p.grad();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const float orig = p.data()[i];
      p.data()[i] = static_cast<float>(orig + h);
      double up;
      double down;
      {
        NoGrad ng;
        up = f().item();
        p.data()[i] = static_cast<float>(orig - h);
        down = f().item();
      }
      p.data()[i] = orig;
      const double num = (up - down) / (2.0 * h);
      diff2 += (num - analytic[i]) * (num - analytic[i]);
      a2 += static_cast<double>(analytic[i]) * analytic[i];
      n2 += num * num;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------- checkpoints

namespace {
constexpr char kMagic[4] = {'G', 'Z', 'N', 'K'};
}

void save_checkpoint(const std::string& path, const nlohmann::json& header, const std::vector<Tensor>& params) {
  nlohmann::json h = header;
  h["format_version"] = kCheckpointVersion;
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : params) shapes.push_back(p.shape());
  h["shapes"] = shapes;
  const std::string text = h.dump();
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path);
  const std::uint32_t ver = kCheckpointVersion;
  const std::uint64_t len = text.size();
  f.write(kMagic, 4);
  f.write(reinterpret_cast<const char*>(&ver), sizeof ver);
  f.write(reinterpret_cast<const char*>(&len), sizeof len);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params)
    f.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size() * sizeof(float)));
  if (!f) throw IoError("short write on checkpoint " + path);
}

namespace {

nlohmann::json read_header(std::ifstream& f, const std::string& path) {
  char magic[4];
  std::uint32_t ver = 0;
  std::uint64_t len = 0;
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": not a checkpoint file", 0);
  f.read(reinterpret_cast<char*>(&ver), sizeof ver);
  if (!f || ver != kCheckpointVersion) throw FormatError(path + ": unsupported checkpoint version", 4);
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!f || len > (1u << 26)) throw FormatError(path + ": bad header length", 8);
  std::string text(len, '\0');
  f.read(text.data(), static_cast<std::streamsize>(len));
  if (!f) throw FormatError(path + ": truncated header", 16);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": header: " + e.what(), 16 + e.byte);
  }
}

std::ifstream open_ckpt(const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) throw MissingCheckpoint("checkpoint not found: " + path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingCheckpoint("cannot open checkpoint " + path);
  return f;
}

}  // namespace

nlohmann::json read_checkpoint_header(const std::string& path) {
  auto f = open_ckpt(path);
  return read_header(f, path);
}

nlohmann::json load_checkpoint(const std::string& path, const std::vector<Tensor>& params) {
  auto f = open_ckpt(path);
  const auto h = read_header(f, path);
  const auto& shapes = h.at("shapes");
  if (shapes.size() != params.size())
    throw ModelMismatch(path + ": checkpoint has " + std::to_string(shapes.size()) + " tensors, model expects " +
                        std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i)
    if (shapes[i].get<Shape>() != params[i].shape())
      throw ModelMismatch(path + ": tensor " + std::to_string(i) + " is " + shape_str(shapes[i].get<Shape>()) +
                          ", model expects " + shape_str(params[i].shape()));
  for (auto p : params) {
    const auto off = static_cast<std::uint64_t>(f.tellg());
    f.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(p.size() * sizeof(float)));
    if (!f) throw FormatError(path + ": truncated parameter data", off);
  }
  return h;
}

}  // namespace gazeneck::learn
