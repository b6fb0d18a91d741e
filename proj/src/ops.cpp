#include "l3/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "l3/kernels.hpp"

namespace l3::ops {

namespace {

template <typename T>
Tensor<T> new_output(std::vector<int64_t> shape, std::initializer_list<Tensor<T>> parents) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  if (grad_enabled()) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    if (rg) {
      out.node()->requires_grad = true;
      for (const auto& p : parents) out.node()->parents.push_back(p.node());
    }
  }
  return out;
}

template <typename T>
bool recording(const Tensor<T>& out) {
  return out.node()->requires_grad;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  check(a.rank() == 2 && b.rank() == 2, ErrorKind::Dimension, "matmul expects 2-D tensors");
  check(!(trans_a && trans_b), ErrorKind::Internal, "matmul: double transpose unsupported");
  const int64_t m = trans_a ? a.dim(1) : a.dim(0);
  const int64_t ka = trans_a ? a.dim(0) : a.dim(1);
  const int64_t kb = trans_b ? b.dim(1) : b.dim(0);
  const int64_t n = trans_b ? b.dim(0) : b.dim(1);
  check(ka == kb, ErrorKind::Dimension, "matmul: inner dimensions disagree");

  Tensor<T> out = new_output<T>({m, n}, {a, b});
  kernels::gemm<T>(trans_a, trans_b, m, n, ka, a.data(), a.dim(1), b.data(), b.dim(1), out.data(),
                   n, false);

  if (recording(out)) {
    auto an = a.node();
    auto bn = b.node();
    const int64_t k = ka;
    out.node()->backward = [an, bn, trans_a, trans_b, m, n, k](Node<T>& o) {
      const T* dy = o.grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        if (!trans_a && !trans_b) {
          kernels::gemm<T>(false, true, m, k, n, dy, n, bn->value.data(), bn->shape[1],
                           an->grad.data(), an->shape[1], true);
        } else if (!trans_a && trans_b) {
          kernels::gemm<T>(false, false, m, k, n, dy, n, bn->value.data(), bn->shape[1],
                           an->grad.data(), an->shape[1], true);
        } else {  // trans_a && !trans_b: dA[p,i] = sum_j B[p,j] dY[i,j]
          kernels::gemm<T>(false, true, k, m, n, bn->value.data(), bn->shape[1], dy, n,
                           an->grad.data(), an->shape[1], true);
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        if (!trans_a && !trans_b) {
          kernels::gemm<T>(true, false, k, n, m, an->value.data(), an->shape[1], dy, n,
                           bn->grad.data(), bn->shape[1], true);
        } else if (!trans_a && trans_b) {  // dB[j,p] = sum_i dY[i,j] A[i,p]
          kernels::gemm<T>(true, false, n, k, m, dy, n, an->value.data(), an->shape[1],
                           bn->grad.data(), bn->shape[1], true);
        } else {  // trans_a: dB[p,j] = sum_i A[p,i] dY[i,j]
          kernels::gemm<T>(false, false, k, n, m, an->value.data(), an->shape[1], dy, n,
                           bn->grad.data(), bn->shape[1], true);
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), ErrorKind::Dimension, "add: shape mismatch");
  Tensor<T> out = new_output<T>(a.shape(), {a, b});
  const int64_t n = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];

  if (recording(out)) {
    auto an = a.node();
    auto bn = b.node();
    out.node()->backward = [an, bn](Node<T>& o) {
      for (auto* p : {an.get(), bn.get()}) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        const int64_t n2 = p->numel();
        T* g = p->grad.data();
        const T* dy = o.grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n2; ++i) g[i] += dy[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape() == b.shape(), ErrorKind::Dimension, "mul: shape mismatch");
  Tensor<T> out = new_output<T>(a.shape(), {a, b});
  const int64_t n = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];

  if (recording(out)) {
    auto an = a.node();
    auto bn = b.node();
    out.node()->backward = [an, bn](Node<T>& o) {
      const T* dy = o.grad.data();
      const int64_t n2 = o.numel();
      if (an->requires_grad) {
        an->ensure_grad();
        T* g = an->grad.data();
        const T* vb = bn->value.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n2; ++i) g[i] += dy[i] * vb[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* g = bn->grad.data();
        const T* va = an->value.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n2; ++i) g[i] += dy[i] * va[i];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = new_output<T>(a.shape(), {a});
  const int64_t n = a.numel();
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (recording(out)) {
    auto an = a.node();
    out.node()->backward = [an, s](Node<T>& o) {
      an->ensure_grad();
      T* g = an->grad.data();
      const T* dy = o.grad.data();
      for (int64_t i = 0; i < o.numel(); ++i) g[i] += dy[i] * s;
    };
  }
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  Tensor<T> out = new_output<T>(a.shape(), {a});
  const int64_t n = a.numel();
  const T* pa = a.data();
  T* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    const T sg = T(1) / (T(1) + std::exp(-pa[i]));
    po[i] = pa[i] * sg;
  }
  if (recording(out)) {
    auto an = a.node();
    out.node()->backward = [an](Node<T>& o) {
      an->ensure_grad();
      T* g = an->grad.data();
      const T* x = an->value.data();
      const T* dy = o.grad.data();
      const int64_t n2 = o.numel();
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < n2; ++i) {
        const T sg = T(1) / (T(1) + std::exp(-x[i]));
        g[i] += dy[i] * (sg + x[i] * sg * (T(1) - sg));
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = new_output<T>({1}, {a});
  T acc = 0;
  const T* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
  out.data()[0] = acc;
  if (recording(out)) {
    auto an = a.node();
    out.node()->backward = [an](Node<T>& o) {
      an->ensure_grad();
      const T dy = o.grad[0];
      T* g = an->grad.data();
      for (int64_t i = 0; i < an->numel(); ++i) g[i] += dy;
    };
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0), ErrorKind::Dimension,
        "concat_cols: row counts disagree");
  const int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor<T> out = new_output<T>({rows, ca + cb}, {a, b});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(pa + r * ca, pa + (r + 1) * ca, po + r * (ca + cb));
    std::copy(pb + r * cb, pb + (r + 1) * cb, po + r * (ca + cb) + ca);
  }
  if (recording(out)) {
    auto an = a.node();
    auto bn = b.node();
    out.node()->backward = [an, bn, rows, ca, cb](Node<T>& o) {
      const T* dy = o.grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        T* g = an->grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < ca; ++j) g[r * ca + j] += dy[r * (ca + cb) + j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* g = bn->grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < cb; ++j) g[r * cb + j] += dy[r * (ca + cb) + ca + j];
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  check(x.rank() == 2, ErrorKind::Dimension, "softmax_rows expects 2-D input");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  const T* px = x.data();
  for (int64_t i = 0; i < x.numel(); ++i)
    check(std::isfinite(px[i]), ErrorKind::Numeric, "softmax_rows: non-finite input");
  Tensor<T> out = new_output<T>(x.shape(), {x});
  kernels::softmax_rows<T>(px, out.data(), rows, cols);
  if (recording(out)) {
    auto xn = x.node();
    auto on = out.node();
    out.node()->backward = [xn, rows, cols](Node<T>& o) {
      xn->ensure_grad();
      const T* p = o.value.data();
      const T* dy = o.grad.data();
      T* dx = xn->grad.data();
#pragma omp parallel for schedule(static)
      for (int64_t r = 0; r < rows; ++r) {
        T dot_pd = 0;
        for (int64_t j = 0; j < cols; ++j) dot_pd += p[r * cols + j] * dy[r * cols + j];
        for (int64_t j = 0; j < cols; ++j)
          dx[r * cols + j] += p[r * cols + j] * (dy[r * cols + j] - dot_pd);
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  check(x.rank() == 2, ErrorKind::Dimension, "rms_norm expects 2-D input");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  check(gain.numel() == cols, ErrorKind::Dimension, "rms_norm: gain length != row width");
  Tensor<T> out = new_output<T>(x.shape(), {x, gain});
  auto inv_rms = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  kernels::rms_norm_rows<T>(x.data(), gain.data(), out.data(), inv_rms->data(), rows, cols, eps);
  if (recording(out)) {
    auto xn = x.node();
    auto gn = gain.node();
    out.node()->backward = [xn, gn, inv_rms, rows, cols](Node<T>& o) {
      xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      kernels::rms_norm_rows_backward<T>(xn->value.data(), gn->value.data(), inv_rms->data(),
                                         o.grad.data(), xn->grad.data(),
                                         gn->requires_grad ? gn->grad.data() : nullptr, rows,
                                         cols);
    };
  }
  return out;
}

template <typename T>
void log_softmax_rows(const T* x, T* out, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const T* xi = x + r * cols;
    T* oi = out + r * cols;
    T mx = xi[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    T sum = 0;
    for (int64_t j = 0; j < cols; ++j) sum += std::exp(xi[j] - mx);
    const T lse = mx + std::log(sum);
    for (int64_t j = 0; j < cols; ++j) oi[j] = xi[j] - lse;
  }
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& targets) {
  check(logits.rank() == 2, ErrorKind::Dimension, "cross_entropy expects 2-D logits");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  check(static_cast<int64_t>(targets.size()) == n, ErrorKind::Dimension,
        "cross_entropy: one target per row required");
  for (auto t : targets)
    check(t >= 0 && t < v, ErrorKind::Index, "cross_entropy: target id out of range");

  auto lse = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  const T* z = logits.data();
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < n; ++r) {
    const T* zi = z + r * v;
    T mx = zi[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, zi[j]);
    T s = 0;
    for (int64_t j = 0; j < v; ++j) s += std::exp(zi[j] - mx);
    (*lse)[r] = mx + std::log(s);
  }
  T total = 0;
  for (int64_t r = 0; r < n; ++r) total += (*lse)[r] - z[r * v + targets[r]];

  Tensor<T> out = new_output<T>({1}, {logits});
  out.data()[0] = total / static_cast<T>(n);
  if (recording(out)) {
    auto zn = logits.node();
    auto tg = std::make_shared<std::vector<int32_t>>(targets);
    out.node()->backward = [zn, tg, lse, n, v](Node<T>& o) {
      zn->ensure_grad();
      const T g = o.grad[0] / static_cast<T>(n);
      const T* zv = zn->value.data();
      T* dz = zn->grad.data();
#pragma omp parallel for schedule(static)
      for (int64_t r = 0; r < n; ++r) {
        const T l = (*lse)[r];
        for (int64_t j = 0; j < v; ++j) dz[r * v + j] += g * std::exp(zv[r * v + j] - l);
        dz[r * v + (*tg)[r]] -= g;
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int32_t>& ids) {
  check(table.rank() == 2, ErrorKind::Dimension, "embedding expects a 2-D table");
  const int64_t v = table.dim(0), d = table.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  for (auto id : ids) check(id >= 0 && id < v, ErrorKind::Index, "embedding: id out of range");
  Tensor<T> out = new_output<T>({n, d}, {table});
  const T* tb = table.data();
  T* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) std::copy(tb + ids[i] * d, tb + (ids[i] + 1) * d, po + i * d);
  if (recording(out)) {
    auto tn = table.node();
    auto idv = std::make_shared<std::vector<int32_t>>(ids);
    out.node()->backward = [tn, idv, d](Node<T>& o) {
      tn->ensure_grad();
      T* g = tn->grad.data();
      const T* dy = o.grad.data();
      const int64_t n2 = static_cast<int64_t>(idv->size());
      // scatter in row order: ids may repeat, keep the accumulation serial
      for (int64_t i = 0; i < n2; ++i) {
        T* gr = g + (*idv)[i] * d;
        const T* dr = dy + i * d;
        for (int64_t j = 0; j < d; ++j) gr[j] += dr[j];
      }
    };
  }
  return out;
}

namespace {

template <typename T>
void rope_apply(const T* src, T* dst, int64_t rows, int64_t width, int n_heads,
                const int32_t* pos, const std::vector<T>& inv_freq, T sign, bool accumulate) {
  const int64_t dh = width / n_heads;
  const int64_t half = dh / 2;
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    const T p = static_cast<T>(pos[i]);
    for (int64_t j = 0; j < half; ++j) {
      const T ang = sign * p * inv_freq[static_cast<size_t>(j)];
      const T c = std::cos(ang), sn = std::sin(ang);
      for (int h = 0; h < n_heads; ++h) {
        const T* s = src + i * width + h * dh;
        T* o = dst + i * width + h * dh;
        const T x0 = s[j], x1 = s[j + half];
        if (accumulate) {
          o[j] += x0 * c - x1 * sn;
          o[j + half] += x0 * sn + x1 * c;
        } else {
          o[j] = x0 * c - x1 * sn;
          o[j + half] = x0 * sn + x1 * c;
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> rope(const Tensor<T>& x, const std::vector<int32_t>& positions, int n_heads, T base) {
  check(x.rank() == 2, ErrorKind::Dimension, "rope expects 2-D input");
  const int64_t n = x.dim(0), width = x.dim(1);
  check(static_cast<int64_t>(positions.size()) == n, ErrorKind::Dimension,
        "rope: one position per row required");
  check(width % n_heads == 0, ErrorKind::Dimension, "rope: width not divisible by head count");
  const int64_t dh = width / n_heads;
  check(dh % 2 == 0, ErrorKind::Dimension, "rope: head dim must be even");
  const int64_t half = dh / 2;

  auto inv_freq = std::make_shared<std::vector<T>>(static_cast<size_t>(half));
  for (int64_t j = 0; j < half; ++j)
    (*inv_freq)[static_cast<size_t>(j)] =
        std::pow(base, -static_cast<T>(2 * j) / static_cast<T>(dh));

  Tensor<T> out = new_output<T>(x.shape(), {x});
  rope_apply<T>(x.data(), out.data(), n, width, n_heads, positions.data(), *inv_freq, T(1),
                false);
  if (recording(out)) {
    auto xn = x.node();
    auto pv = std::make_shared<std::vector<int32_t>>(positions);
    out.node()->backward = [xn, pv, inv_freq, n, width, n_heads](Node<T>& o) {
      xn->ensure_grad();
      // the rotation is orthonormal; its adjoint is the opposite rotation
      rope_apply<T>(o.grad.data(), xn->grad.data(), n, width, n_heads, pv->data(), *inv_freq,
                    T(-1), true);
    };
  }
  return out;
}

namespace {

// attention context saved for backward: probabilities per (batch, head)
template <typename T>
struct AttnCtx {
  std::vector<T> probs;  // [batch, heads, L, L], causal rows only are valid
};

}  // namespace

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int batch,
                           int seqlen, int n_heads) {
  check(q.shape() == k.shape() && q.shape() == v.shape(), ErrorKind::Dimension,
        "attention: q/k/v shapes disagree");
  const int64_t n = q.dim(0), width = q.dim(1);
  check(n == static_cast<int64_t>(batch) * seqlen, ErrorKind::Dimension,
        "attention: rows != batch*seqlen");
  check(width % n_heads == 0, ErrorKind::Dimension, "attention: width not divisible by heads");
  const int64_t dh = width / n_heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  const int64_t L = seqlen;

  auto ctx = std::make_shared<AttnCtx<T>>();
  ctx->probs.assign(static_cast<size_t>(batch) * n_heads * L * L, T(0));

  Tensor<T> out = new_output<T>(q.shape(), {q, k, v});
  const T* pq = q.data();
  const T* pk = k.data();
  const T* pv = v.data();
  T* po = out.data();
  std::fill(po, po + out.numel(), T(0));

  const int64_t pairs = static_cast<int64_t>(batch) * n_heads;
#pragma omp parallel for schedule(static)
  for (int64_t bh = 0; bh < pairs; ++bh) {
    const int64_t b = bh / n_heads, h = bh % n_heads;
    const int64_t row0 = b * L;
    const int64_t col0 = h * dh;
    T* P = ctx->probs.data() + bh * L * L;
    for (int64_t i = 0; i < L; ++i) {
      const T* qi = pq + (row0 + i) * width + col0;
      T* Pi = P + i * L;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j <= i; ++j) {
        const T* kj = pk + (row0 + j) * width + col0;
        T s = 0;
        for (int64_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        s *= inv_scale;
        Pi[j] = s;
        mx = std::max(mx, s);
      }
      T sum = 0;
      for (int64_t j = 0; j <= i; ++j) {
        Pi[j] = std::exp(Pi[j] - mx);
        sum += Pi[j];
      }
      const T inv = T(1) / sum;
      T* oi = po + (row0 + i) * width + col0;
      for (int64_t j = 0; j <= i; ++j) {
        Pi[j] *= inv;
        const T* vj = pv + (row0 + j) * width + col0;
        const T w = Pi[j];
        for (int64_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
      }
    }
  }

  if (recording(out)) {
    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    out.node()->backward = [qn, kn, vn, ctx, batch, n_heads, L, dh, width,
                            inv_scale](Node<T>& o) {
      qn->ensure_grad();
      kn->ensure_grad();
      vn->ensure_grad();
      const T* dy = o.grad.data();
      const T* pq2 = qn->value.data();
      const T* pk2 = kn->value.data();
      const T* pv2 = vn->value.data();
      T* dq = qn->grad.data();
      T* dk = kn->grad.data();
      T* dv = vn->grad.data();
      const int64_t pairs2 = static_cast<int64_t>(batch) * n_heads;
#pragma omp parallel for schedule(static)
      for (int64_t bh = 0; bh < pairs2; ++bh) {
        const int64_t b = bh / n_heads, h = bh % n_heads;
        const int64_t row0 = b * L;
        const int64_t col0 = h * dh;
        const T* P = ctx->probs.data() + bh * L * L;
        std::vector<T> dS(static_cast<size_t>(L));
        for (int64_t i = 0; i < L; ++i) {
          const T* Pi = P + i * L;
          const T* doi = dy + (row0 + i) * width + col0;
          // dP and the softmax jacobian, fused row-wise
          T dot_pd = 0;
          for (int64_t j = 0; j <= i; ++j) {
            const T* vj = pv2 + (row0 + j) * width + col0;
            T dp = 0;
            for (int64_t c = 0; c < dh; ++c) dp += doi[c] * vj[c];
            dS[j] = dp;
            dot_pd += Pi[j] * dp;
          }
          T* dqi = dq + (row0 + i) * width + col0;
          const T* qi = pq2 + (row0 + i) * width + col0;
          for (int64_t j = 0; j <= i; ++j) {
            const T ds = Pi[j] * (dS[j] - dot_pd) * inv_scale;
            const T* kj = pk2 + (row0 + j) * width + col0;
            T* dkj = dk + (row0 + j) * width + col0;
            T* dvj = dv + (row0 + j) * width + col0;
            const T w = Pi[j];
            for (int64_t c = 0; c < dh; ++c) {
              dqi[c] += ds * kj[c];
              dkj[c] += ds * qi[c];
              dvj[c] += w * doi[c];
            }
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> kl_vs_target(const Tensor<T>& logits, const Tensor<T>& target_logp) {
  check(logits.shape() == target_logp.shape(), ErrorKind::Dimension,
        "kl_vs_target: shape mismatch");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  auto kl_rows = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  std::vector<T> logp(static_cast<size_t>(n) * v);
  log_softmax_rows<T>(logits.data(), logp.data(), n, v);
  const T* tl = target_logp.data();
  T total = 0;
  for (int64_t r = 0; r < n; ++r) {
    T acc = 0;
    for (int64_t j = 0; j < v; ++j) {
      const T lp = logp[r * v + j];
      acc += std::exp(lp) * (lp - tl[r * v + j]);
    }
    (*kl_rows)[r] = acc;
    total += acc;
  }
  Tensor<T> out = new_output<T>({1}, {logits});
  out.data()[0] = total / static_cast<T>(n);
  if (recording(out)) {
    auto zn = logits.node();
    auto tn = target_logp.node();
    out.node()->backward = [zn, tn, kl_rows, n, v](Node<T>& o) {
      zn->ensure_grad();
      const T g = o.grad[0] / static_cast<T>(n);
      std::vector<T> logp2(static_cast<size_t>(n) * v);
      log_softmax_rows<T>(zn->value.data(), logp2.data(), n, v);
      const T* tl2 = tn->value.data();
      T* dz = zn->grad.data();
#pragma omp parallel for schedule(static)
      for (int64_t r = 0; r < n; ++r) {
        const T klr = (*kl_rows)[r];
        for (int64_t j = 0; j < v; ++j) {
          const T lp = logp2[r * v + j];
          dz[r * v + j] += g * std::exp(lp) * ((lp - tl2[r * v + j]) - klr);
        }
      }
    };
  }
  return out;
}

#define L3_INSTANTIATE_OPS(T)                                                           \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, bool, bool);        \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                    \
  template Tensor<T> silu<T>(const Tensor<T>&);                                        \
  template Tensor<T> sum<T>(const Tensor<T>&);                                         \
  template Tensor<T> concat_cols<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                \
  template Tensor<T> rms_norm<T>(const Tensor<T>&, const Tensor<T>&, T);               \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, const std::vector<int32_t>&);  \
  template Tensor<T> embedding<T>(const Tensor<T>&, const std::vector<int32_t>&);      \
  template Tensor<T> rope<T>(const Tensor<T>&, const std::vector<int32_t>&, int, T);   \
  template Tensor<T> causal_attention<T>(const Tensor<T>&, const Tensor<T>&,           \
                                         const Tensor<T>&, int, int, int);             \
  template Tensor<T> kl_vs_target<T>(const Tensor<T>&, const Tensor<T>&);              \
  template void log_softmax_rows<T>(const T*, T*, int64_t, int64_t);

L3_INSTANTIATE_OPS(float)
L3_INSTANTIATE_OPS(double)
#undef L3_INSTANTIATE_OPS

}  // namespace l3::ops
