// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cllm4rec {

namespace {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<RowMajor<T>> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return {t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <typename T>
Eigen::Map<const RowMajor<T>> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return {t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) throw NumericDomainError(std::string(op) + ": non-finite input");
  }
}

template <typename T>
void softmax_row(const T* in, T* out, std::size_t n) {
  T mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    total += out[j];
  }
  const T inv = T(1) / total;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.empty()) throw ShapeError("softmax: empty input");
  require_finite(logits, "softmax");
  Tensor<T> out(logits.shape());
  const std::size_t cols = logits.cols();
  for (std::size_t r = 0, n = logits.size() / cols; r < n; ++r) softmax_row(logits.row(r), out.row(r), cols);
  return out;
}

template <typename T>
Var Graph<T>::push(Tensor<T> value, bool requires_grad) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  return push(std::move(value), false);
}

template <typename T>
Var Graph<T>::constant_ref(const Tensor<T>& value) {
  Node n;
  n.external = &value;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::leaf(Tensor<T> value) {
  return push(std::move(value), true);
}

template <typename T>
Var Graph<T>::param(const Parameter<T>& p) {
  Node n;
  n.external = &p.value;
  if (sink_ && p.trainable) {
    n.requires_grad = true;
    n.grad_sink = &sink_->grad(p);
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  return nodes_.at(v.id).value();
}

template <typename T>
T Graph<T>::scalar(Var v) const {
  const auto& t = value(v);
  if (t.size() != 1) throw ShapeError("scalar(): tensor has shape " + shape_str(t.shape()));
  return t[0];
}

template <typename T>
const Tensor<T>& Graph<T>::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad_sink) return *n.grad_sink;
  if (n.grad.empty()) throw StateError("node has no gradient");
  return n.grad;
}

template <typename T>
Tensor<T>& Graph<T>::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad_sink) return *n.grad_sink;
  if (n.grad.empty() && !n.value().empty()) n.grad = Tensor<T>(n.value().shape());
  return n.grad;
}

template <typename T>
bool Graph<T>::grad_touched(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.grad_sink != nullptr || !n.grad.empty();
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (value(loss).size() != 1) throw ShapeError("backward() needs a scalar loss");
  if (!nodes_[loss.id].requires_grad) return;
  grad_ref(loss.id)[0] += T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && grad_touched(i)) n.backward();
  }
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  const auto& va = value(a);
  const auto& vb = value(b);
  require(va.shape() == vb.shape(), "add: shape " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, a, b, o] {
      const auto& g = nodes_[o.id].grad;
      for (Var in : {a, b}) {
        if (!requires_grad(in)) continue;
        auto& gi = grad_ref(in.id);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      }
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::add_row(Var x, Var bias) {
  const auto& vx = value(x);
  const auto& vb = value(bias);
  const std::size_t cols = vx.cols();
  require(vb.size() == cols, "add_row: bias size " + std::to_string(vb.size()) + " vs " + std::to_string(cols));
  Tensor<T> out(vx.shape());
  const std::size_t rows = vx.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = vx.row(r);
    T* orow = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) orow[c] = xr[c] + vb[c];
  }
  const bool rg = requires_grad(x) || requires_grad(bias);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, x, bias, o, rows, cols] {
      const auto& g = nodes_[o.id].grad;
      if (requires_grad(x)) {
        auto& gx = grad_ref(x.id);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (requires_grad(bias)) {
        auto& gb = grad_ref(bias.id);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::mul(Var a, Var b) {
  const auto& va = value(a);
  const auto& vb = value(b);
  require(va.shape() == vb.shape(), "mul: shape " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  const bool rg = requires_grad(a) || requires_grad(b);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, a, b, o] {
      const auto& g = nodes_[o.id].grad;
      const auto& va = value(a);
      const auto& vb = value(b);
      if (requires_grad(a)) {
        auto& ga = grad_ref(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
      }
      if (requires_grad(b)) {
        auto& gb = grad_ref(b.id);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
      }
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::scale(Var a, T factor) {
  const auto& va = value(a);
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * factor;
  const bool rg = requires_grad(a);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, a, o, factor] {
      const auto& g = nodes_[o.id].grad;
      auto& ga = grad_ref(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::sum(std::span<const Var> scalars) {
  T total = 0;
  bool rg = false;
  for (Var s : scalars) {
    total += scalar(s);
    rg = rg || requires_grad(s);
  }
  std::vector<Var> inputs(scalars.begin(), scalars.end());
  Var o = push(Tensor<T>({1}, std::vector<T>{total}), rg);
  if (rg) {
    nodes_[o.id].backward = [this, inputs = std::move(inputs), o] {
      const T g = nodes_[o.id].grad[0];
      for (Var in : inputs)
        if (requires_grad(in)) grad_ref(in.id)[0] += g;
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Var Graph<T>::matmul(Var x, Var w) {
  const auto& vx = value(x);
  const auto& vw = value(w);
  require(vw.rank() == 2, "matmul: weight must be 2-D");
  const std::size_t inner = vx.cols();
  const std::size_t rows = vx.size() / inner;
  const std::size_t outer = vw.dim(1);
  require(vw.dim(0) == inner, "matmul: " + shape_str(vx.shape()) + " x " + shape_str(vw.shape()));
  Tensor<T> out({rows, outer});
  as_matrix(out, rows, outer).noalias() = as_matrix(vx, rows, inner) * as_matrix(vw, inner, outer);
  const bool rg = requires_grad(x) || requires_grad(w);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, x, w, o, rows, inner, outer] {
      const auto g = as_matrix(std::as_const(nodes_[o.id].grad), rows, outer);
      if (requires_grad(x)) {
        as_matrix(grad_ref(x.id), rows, inner).noalias() += g * as_matrix(value(w), inner, outer).transpose();
      }
      if (requires_grad(w)) {
        as_matrix(grad_ref(w.id), inner, outer).noalias() += as_matrix(value(x), rows, inner).transpose() * g;
      }
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::matmul_nt(Var x, Var w) {
  const auto& vx = value(x);
  const auto& vw = value(w);
  require(vw.rank() == 2, "matmul_nt: weight must be 2-D");
  const std::size_t inner = vx.cols();
  const std::size_t rows = vx.size() / inner;
  const std::size_t outer = vw.dim(0);
  require(vw.dim(1) == inner, "matmul_nt: " + shape_str(vx.shape()) + " x " + shape_str(vw.shape()) + "^T");
  Tensor<T> out({rows, outer});
  as_matrix(out, rows, outer).noalias() = as_matrix(vx, rows, inner) * as_matrix(vw, outer, inner).transpose();
  const bool rg = requires_grad(x) || requires_grad(w);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, x, w, o, rows, inner, outer] {
      const auto g = as_matrix(std::as_const(nodes_[o.id].grad), rows, outer);
      if (requires_grad(x)) {
        as_matrix(grad_ref(x.id), rows, inner).noalias() += g * as_matrix(value(w), outer, inner);
      }
      if (requires_grad(w)) {
        as_matrix(grad_ref(w.id), outer, inner).noalias() += g.transpose() * as_matrix(value(x), rows, inner);
      }
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// indexing

template <typename T>
Var Graph<T>::rows(Var x, std::size_t begin, std::size_t count) {
  const auto& vx = value(x);
  const std::size_t cols = vx.cols();
  const std::size_t total = vx.size() / cols;
  if (begin + count > total) {
    throw IndexError("rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) + ") out of " +
                     std::to_string(total));
  }
  Tensor<T> out({count, cols});
  std::copy_n(vx.data() + begin * cols, count * cols, out.data());
  const bool rg = requires_grad(x);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, x, o, begin, count, cols] {
      const auto& g = nodes_[o.id].grad;
      T* gx = grad_ref(x.id).data() + begin * cols;
      for (std::size_t i = 0; i < count * cols; ++i) gx[i] += g[i];
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::gather_rows(std::span<const RowRef> refs) {
  if (refs.empty()) throw ShapeError("gather_rows: no rows");
  const std::size_t cols = value(refs[0].table).cols();
  Tensor<T> out({refs.size(), cols});
  bool rg = false;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& table = value(refs[i].table);
    require(table.cols() == cols, "gather_rows: mixed row widths");
    const std::size_t nrows = table.size() / cols;
    if (refs[i].row >= nrows) {
      throw IndexError("gather_rows: row " + std::to_string(refs[i].row) + " out of " + std::to_string(nrows));
    }
    std::copy_n(table.row(refs[i].row), cols, out.row(i));
    rg = rg || requires_grad(refs[i].table);
  }
  Var o = push(std::move(out), rg);
  if (rg) {
    std::vector<RowRef> saved(refs.begin(), refs.end());
    nodes_[o.id].backward = [this, saved = std::move(saved), o, cols] {
      const auto& g = nodes_[o.id].grad;
      for (std::size_t i = 0; i < saved.size(); ++i) {
        if (!requires_grad(saved[i].table)) continue;
        T* dst = grad_ref(saved[i].table.id).row(saved[i].row);
        const T* src = g.row(i);
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
      }
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// transformer pieces

template <typename T>
Var Graph<T>::layer_norm(Var x, Var gain, Var bias, T eps) {
  const auto& vx = value(x);
  const auto& vg = value(gain);
  const auto& vb = value(bias);
  const std::size_t cols = vx.cols();
  const std::size_t rows = vx.size() / cols;
  require(vg.size() == cols && vb.size() == cols, "layer_norm: gain/bias width mismatch");
  Tensor<T> out(vx.shape());
  Tensor<T> xhat(vx.shape());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = vx.row(r);
    T mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= T(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    T* hr = xhat.row(r);
    T* orow = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      hr[c] = (xr[c] - mean) * rstd[r];
      orow[c] = hr[c] * vg[c] + vb[c];
    }
  }
  const bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, x, gain, bias, o, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const auto& g = nodes_[o.id].grad;
      const auto& vg = value(gain);
      if (requires_grad(gain) || requires_grad(bias)) {
        Tensor<T>* gg = requires_grad(gain) ? &grad_ref(gain.id) : nullptr;
        Tensor<T>* gb = requires_grad(bias) ? &grad_ref(bias.id) : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const T gi = g[r * cols + c];
            if (gg) (*gg)[c] += gi * xhat[r * cols + c];
            if (gb) (*gb)[c] += gi;
          }
        }
      }
      if (requires_grad(x)) {
        auto& gx = grad_ref(x.id);
        std::vector<T> dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.row(r);
          const T* hr = xhat.row(r);
          T mean_d = 0;
          T mean_dh = 0;
          for (std::size_t c = 0; c < cols; ++c) {
            dxhat[c] = gr[c] * vg[c];
            mean_d += dxhat[c];
            mean_dh += dxhat[c] * hr[c];
          }
          mean_d /= T(cols);
          mean_dh /= T(cols);
          T* gxr = gx.row(r);
          for (std::size_t c = 0; c < cols; ++c) gxr[c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
        }
      }
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::gelu(Var x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  const auto& vx = value(x);
  Tensor<T> out(vx.shape());
  for (std::size_t i = 0; i < vx.size(); ++i) {
    const T v = vx[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  const bool rg = requires_grad(x);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, x, o] {
      const auto& g = nodes_[o.id].grad;
      const auto& vx = value(x);
      auto& gx = grad_ref(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = vx[i];
        const T th = std::tanh(kC * (v + kA * v * v * v));
        const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * kC * (T(1) + T(3) * kA * v * v);
        gx[i] += g[i] * d;
      }
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::causal_attention(Var qkv, std::size_t heads, std::span<const std::uint8_t> key_valid) {
  const auto& vq = value(qkv);
  const std::size_t packed = vq.cols();
  const std::size_t len = vq.size() / packed;
  require(packed % 3 == 0, "causal_attention: packed width not divisible by 3");
  const std::size_t width = packed / 3;
  require(heads > 0 && width % heads == 0, "causal_attention: width not divisible by heads");
  require(key_valid.empty() || key_valid.size() == len, "causal_attention: key mask length");
  const std::size_t hd = width / heads;
  const T inv_sqrt = T(1) / std::sqrt(T(hd));

  // probs[h][i][j], zero above the diagonal and at masked keys
  Tensor<T> probs({heads, len, len});
  Tensor<T> out({len, width});
  std::vector<T> scores(len);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t qo = h * hd;
    const std::size_t ko = width + h * hd;
    const std::size_t vo = 2 * width + h * hd;
    for (std::size_t i = 0; i < len; ++i) {
      const T* qi = vq.row(i) + qo;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        if (!key_valid.empty() && !key_valid[j]) continue;
        const T* kj = vq.row(j) + ko;
        T s = 0;
        for (std::size_t d = 0; d < hd; ++d) s += qi[d] * kj[d];
        scores[j] = s * inv_sqrt;
        mx = std::max(mx, scores[j]);
      }
      T* prow = probs.data() + (h * len + i) * len;
      if (mx == -std::numeric_limits<T>::infinity()) continue;
      T total = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        if (!key_valid.empty() && !key_valid[j]) continue;
        prow[j] = std::exp(scores[j] - mx);
        total += prow[j];
      }
      const T inv = T(1) / total;
      T* orow = out.row(i) + qo;
      for (std::size_t j = 0; j <= i; ++j) {
        if (prow[j] == T(0)) continue;
        prow[j] *= inv;
        const T* vj = vq.row(j) + vo;
        for (std::size_t d = 0; d < hd; ++d) orow[d] += prow[j] * vj[d];
      }
    }
  }
  const bool rg = requires_grad(qkv);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, qkv, o, heads, len, width, hd, inv_sqrt, probs = std::move(probs)] {
      const auto& g = nodes_[o.id].grad;
      const auto& vq = value(qkv);
      auto& gq = grad_ref(qkv.id);
      std::vector<T> dp(len);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t qo = h * hd;
        const std::size_t ko = width + h * hd;
        const std::size_t vo = 2 * width + h * hd;
        for (std::size_t i = 0; i < len; ++i) {
          const T* prow = probs.data() + (h * len + i) * len;
          const T* gi = g.row(i) + qo;
          T dot = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            if (prow[j] == T(0)) {
              dp[j] = 0;
              continue;
            }
            const T* vj = vq.row(j) + vo;
            T* gvj = gq.row(j) + vo;
            T s = 0;
            for (std::size_t d = 0; d < hd; ++d) {
              s += gi[d] * vj[d];
              gvj[d] += prow[j] * gi[d];
            }
            dp[j] = s;
            dot += s * prow[j];
          }
          const T* qi = vq.row(i) + qo;
          T* gqi = gq.row(i) + qo;
          for (std::size_t j = 0; j <= i; ++j) {
            if (prow[j] == T(0)) continue;
            const T ds = prow[j] * (dp[j] - dot) * inv_sqrt;
            const T* kj = vq.row(j) + ko;
            T* gkj = gq.row(j) + ko;
            for (std::size_t d = 0; d < hd; ++d) {
              gqi[d] += ds * kj[d];
              gkj[d] += ds * qi[d];
            }
          }
        }
      }
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
Var Graph<T>::softmax(Var x) {
  Tensor<T> out = cllm4rec::softmax(value(x));
  const bool rg = requires_grad(x);
  Var o = push(std::move(out), rg);
  if (rg) {
    nodes_[o.id].backward = [this, x, o] {
      const auto& g = nodes_[o.id].grad;
      const auto& p = nodes_[o.id].value();
      auto& gx = grad_ref(x.id);
      const std::size_t cols = p.cols();
      for (std::size_t r = 0, n = p.size() / cols; r < n; ++r) {
        const T* pr = p.row(r);
        const T* gr = g.row(r);
        T dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * pr[c];
        T* gxr = gx.row(r);
        for (std::size_t c = 0; c < cols; ++c) gxr[c] += pr[c] * (gr[c] - dot);
      }
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::masked_nll(Var logits, std::span<const std::size_t> targets, std::span<const std::uint8_t> mask) {
  const auto& vl = value(logits);
  const std::size_t vocab = vl.cols();
  const std::size_t rows = vl.size() / vocab;
  require(targets.size() == rows && mask.size() == rows,
          "masked_nll: " + std::to_string(rows) + " rows, " + std::to_string(targets.size()) + " targets, " +
              std::to_string(mask.size()) + " mask entries");
  Tensor<T> probs({rows, vocab});
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] >= vocab) {
      throw IndexError("masked_nll: target " + std::to_string(targets[r]) + " out of range " + std::to_string(vocab));
    }
    const T* lr = vl.row(r);
    T mx = lr[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, lr[c]);
    T total = 0;
    T* pr = probs.row(r);
    for (std::size_t c = 0; c < vocab; ++c) {
      pr[c] = std::exp(lr[c] - mx);
      total += pr[c];
    }
    loss += std::log(total) + mx - lr[targets[r]];
    const T inv = T(1) / total;
    for (std::size_t c = 0; c < vocab; ++c) pr[c] *= inv;
  }
  const bool rg = requires_grad(logits);
  Var o = push(Tensor<T>({1}, std::vector<T>{loss}), rg);
  if (rg) {
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    nodes_[o.id].backward = [this, logits, o, rows, vocab, probs = std::move(probs), tg = std::move(tg),
                             mk = std::move(mk)] {
      const T g = nodes_[o.id].grad[0];
      auto& gl = grad_ref(logits.id);
      for (std::size_t r = 0; r < rows; ++r) {
        if (!mk[r]) continue;
        const T* pr = probs.row(r);
        T* gr = gl.row(r);
        for (std::size_t c = 0; c < vocab; ++c) gr[c] += g * pr[c];
        gr[tg[r]] -= g;
      }
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::multinomial_nll(Var probs, std::span<const int> counts) {
  const auto& vp = value(probs);
  require(counts.size() == vp.size(),
          "multinomial_nll: " + std::to_string(vp.size()) + " probs vs " + std::to_string(counts.size()) + " counts");
  T total = 0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    if (counts[j] < 0) throw ValidationError("multinomial_nll: negative count at " + std::to_string(j));
    total += vp[j];
  }
  const T tol = T(1e-5) + T(vp.size()) * std::numeric_limits<T>::epsilon();
  if (std::abs(total - T(1)) > tol) {
    throw ValidationError("multinomial_nll: probabilities sum to " + std::to_string(total));
  }
  const T floor = T(kProbabilityFloor);
  T loss = 0;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    if (counts[j] > 0) loss -= T(counts[j]) * std::log(std::max(vp[j], floor));
  }
  const bool rg = requires_grad(probs);
  Var o = push(Tensor<T>({1}, std::vector<T>{loss}), rg);
  if (rg) {
    std::vector<int> saved(counts.begin(), counts.end());
    nodes_[o.id].backward = [this, probs, o, saved = std::move(saved), floor] {
      const T g = nodes_[o.id].grad[0];
      const auto& vp = value(probs);
      auto& gp = grad_ref(probs.id);
      for (std::size_t j = 0; j < saved.size(); ++j) {
        if (saved[j] > 0 && vp[j] > floor) gp[j] -= g * T(saved[j]) / vp[j];
      }
    };
  }
  return o;
}

template <typename T>
Var Graph<T>::l2_penalty(Var a, std::optional<std::span<const T>> b, T lambda) {
  if (!(lambda >= T(0))) throw ValidationError("l2_penalty: lambda must be nonnegative");
  const auto& va = value(a);
  if (b && b->size() != va.size()) {
    throw ShapeError("l2_penalty: sizes " + std::to_string(va.size()) + " vs " + std::to_string(b->size()));
  }
  Tensor<T> diff(va.shape());
  T sq = 0;
  for (std::size_t i = 0; i < va.size(); ++i) {
    diff[i] = b ? va[i] - (*b)[i] : va[i];
    sq += diff[i] * diff[i];
  }
  const bool rg = requires_grad(a);
  Var o = push(Tensor<T>({1}, std::vector<T>{lambda / T(2) * sq}), rg);
  if (rg) {
    nodes_[o.id].backward = [this, a, o, lambda, diff = std::move(diff)] {
      const T g = nodes_[o.id].grad[0] * lambda;
      auto& ga = grad_ref(a.id);
      for (std::size_t i = 0; i < diff.size(); ++i) ga[i] += g * diff[i];
    };
  }
  return o;
}

template class Graph<float>;
template class Graph<double>;
template Tensor<float> softmax(const Tensor<float>&);
template Tensor<double> softmax(const Tensor<double>&);

}  // namespace cllm4rec
