#include "l3/l3_layer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "l3/kernels.hpp"

namespace l3 {

template <typename T>
std::vector<Tensor<T>> L3Params<T>::parameters() {
  std::vector<Tensor<T>> ps{w_k};
  if (!tied) ps.push_back(w_v);
  ps.push_back(w_up);
  ps.push_back(w_mix);
  ps.push_back(norm_in);
  ps.push_back(norm_out);
  return ps;
}

template <typename T>
int64_t L3Params<T>::parameter_count() const {
  int64_t n = w_k.numel() + w_up.numel() + w_mix.numel() + norm_in.numel() + norm_out.numel();
  if (!tied) n += w_v.numel();
  return n;
}

template <typename T>
L3Params<T> make_l3_params(std::shared_ptr<const AllocationTable> alloc, int64_t d_in,
                           int64_t d_emb, int64_t d_up, int64_t d_out, bool tied, Rng& rng) {
  check(alloc != nullptr, ErrorKind::Config, "l3 params need an allocation table");
  check(!tied || d_emb == d_in, ErrorKind::Config, "tied tables require d_emb == d_in");
  const int64_t v = alloc->total;
  L3Params<T> p;
  p.alloc = std::move(alloc);
  p.tied = tied;
  p.d_in = d_in;
  p.d_emb = d_emb;
  p.d_up = d_up;
  p.d_out = d_out;
  p.w_k = Tensor<T>::param_uniform({v, d_in}, d_in, rng);
  p.w_v = tied ? p.w_k : Tensor<T>::param_uniform({v, d_emb}, d_emb, rng);
  p.w_up = Tensor<T>::param_uniform({d_up, d_emb}, d_emb, rng);
  p.w_mix = Tensor<T>::param_uniform({d_out, d_up + d_in}, d_up + d_in, rng);
  p.norm_in = Tensor<T>::from_data({d_in}, std::vector<T>(static_cast<size_t>(d_in), T(1)), true);
  p.norm_out = Tensor<T>::from_data({d_up}, std::vector<T>(static_cast<size_t>(d_up), T(1)), true);
  return p;
}

SortPlan make_sort_plan(const std::vector<int32_t>& tokens, const AllocationTable& alloc) {
  for (int32_t t : tokens)
    check(t >= 0 && t < alloc.vocab_size, ErrorKind::Index, "sort plan: token out of range");
  const int64_t n = static_cast<int64_t>(tokens.size());
  SortPlan plan;
  plan.fw.resize(static_cast<size_t>(n));
  std::iota(plan.fw.begin(), plan.fw.end(), int64_t{0});
  std::stable_sort(plan.fw.begin(), plan.fw.end(), [&](int64_t a, int64_t b) {
    return tokens[static_cast<size_t>(a)] < tokens[static_cast<size_t>(b)];
  });
  plan.bw.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) plan.bw[static_cast<size_t>(plan.fw[i])] = i;

  int64_t i = 0;
  while (i < n) {
    const int32_t t = tokens[static_cast<size_t>(plan.fw[i])];
    int64_t j = i;
    while (j < n && tokens[static_cast<size_t>(plan.fw[j])] == t) ++j;
    auto [lo, hi] = alloc.range_for(t);
    plan.blocks.push_back({t, i, j, lo, hi});
    i = j;
  }
  return plan;
}

template <typename T>
Tensor<T> l3_forward_naive(const Tensor<T>& x, int32_t token, const L3Params<T>& params, T eps) {
  check(x.rank() == 2 && x.dim(0) == 1 && x.dim(1) == params.d_in, ErrorKind::Dimension,
        "l3_forward_naive expects x of shape [1, d_in]");
  const auto& alloc = *params.alloc;
  check(token >= 0 && token < alloc.vocab_size, ErrorKind::Index, "token id out of range");
  auto [lo, hi] = alloc.range_for(token);
  std::vector<int32_t> rows;
  rows.reserve(static_cast<size_t>(hi - lo));
  for (int64_t r = lo; r < hi; ++r) rows.push_back(static_cast<int32_t>(r));

  Tensor<T> xn = ops::rms_norm(x, params.norm_in, eps);
  Tensor<T> k_t = ops::embedding(params.w_k, rows);
  Tensor<T> scores = ops::matmul(xn, k_t, false, true);
  Tensor<T> p = ops::softmax_rows(scores);
  Tensor<T> v_t = params.tied ? ops::embedding(params.w_k, rows) : ops::embedding(params.w_v, rows);
  Tensor<T> agg = ops::matmul(p, v_t);
  Tensor<T> up = ops::matmul(agg, params.w_up, false, true);
  Tensor<T> up_n = ops::rms_norm(up, params.norm_out, eps);
  Tensor<T> cat = ops::concat_cols(up_n, x);
  return ops::matmul(cat, params.w_mix, false, true);
}

namespace {

// Fused block-diagonal attend: out[i] = V_t(i)^T softmax(K_t(i) xn[i]).
// Blocks touch disjoint output rows and disjoint W_K/W_V slices, so the block
// loop parallelizes without any cross-thread accumulation.
template <typename T>
Tensor<T> l3_attend_sorted(const Tensor<T>& xn, const Tensor<T>& w_k, const Tensor<T>& w_v,
                           std::shared_ptr<const SortPlan> plan, int64_t d_emb) {
  const int64_t n = xn.dim(0);
  const int64_t d_in = xn.dim(1);

  auto probs = std::make_shared<std::vector<T>>();
  auto offsets = std::make_shared<std::vector<int64_t>>();
  offsets->reserve(plan->blocks.size() + 1);
  int64_t total = 0;
  for (const auto& b : plan->blocks) {
    offsets->push_back(total);
    total += (b.row_end - b.row_begin) * (b.emb_end - b.emb_begin);
  }
  offsets->push_back(total);
  probs->assign(static_cast<size_t>(total), T(0));

  Tensor<T> out = Tensor<T>::zeros({n, d_emb});
  if (grad_enabled() && (xn.requires_grad() || w_k.requires_grad() || w_v.requires_grad())) {
    out.node()->requires_grad = true;
    out.node()->parents = {xn.node(), w_k.node(), w_v.node()};
  }

  const T* px = xn.data();
  const T* pk = w_k.data();
  const T* pv = w_v.data();
  T* po = out.data();
  const int64_t nblocks = static_cast<int64_t>(plan->blocks.size());

#pragma omp parallel for schedule(dynamic, 1)
  for (int64_t bi = 0; bi < nblocks; ++bi) {
    const auto& b = plan->blocks[static_cast<size_t>(bi)];
    const int64_t dt = b.emb_end - b.emb_begin;
    T* P = probs->data() + (*offsets)[static_cast<size_t>(bi)];
    for (int64_t r = b.row_begin; r < b.row_end; ++r) {
      const int64_t orig = plan->fw[static_cast<size_t>(r)];
      const T* xi = px + orig * d_in;
      T* Pi = P + (r - b.row_begin) * dt;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j < dt; ++j) {
        const T* kj = pk + (b.emb_begin + j) * d_in;
        T s = 0;
        for (int64_t c = 0; c < d_in; ++c) s += xi[c] * kj[c];
        Pi[j] = s;
        mx = std::max(mx, s);
      }
      T sum = 0;
      for (int64_t j = 0; j < dt; ++j) {
        Pi[j] = std::exp(Pi[j] - mx);
        sum += Pi[j];
      }
      const T inv = T(1) / sum;
      T* oi = po + orig * d_emb;
      for (int64_t j = 0; j < dt; ++j) {
        Pi[j] *= inv;
        const T* vj = pv + (b.emb_begin + j) * d_emb;
        const T w = Pi[j];
        for (int64_t c = 0; c < d_emb; ++c) oi[c] += w * vj[c];
      }
    }
  }

  if (out.node()->requires_grad) {
    auto xn_node = xn.node();
    auto k_node = w_k.node();
    auto v_node = w_v.node();
    out.node()->backward = [xn_node, k_node, v_node, plan, probs, offsets, d_in,
                            d_emb](Node<T>& o) {
      xn_node->ensure_grad();
      k_node->ensure_grad();
      v_node->ensure_grad();
      const T* dy = o.grad.data();
      const T* px2 = xn_node->value.data();
      const T* pk2 = k_node->value.data();
      const T* pv2 = v_node->value.data();
      T* dx = xn_node->grad.data();
      T* dk = k_node->grad.data();
      T* dv = v_node->grad.data();
      const int64_t nb = static_cast<int64_t>(plan->blocks.size());
#pragma omp parallel for schedule(dynamic, 1)
      for (int64_t bi = 0; bi < nb; ++bi) {
        const auto& b = plan->blocks[static_cast<size_t>(bi)];
        const int64_t dt = b.emb_end - b.emb_begin;
        const T* P = probs->data() + (*offsets)[static_cast<size_t>(bi)];
        std::vector<T> ds(static_cast<size_t>(dt));
        for (int64_t r = b.row_begin; r < b.row_end; ++r) {
          const int64_t orig = plan->fw[static_cast<size_t>(r)];
          const T* Pi = P + (r - b.row_begin) * dt;
          const T* dyi = dy + orig * d_emb;
          const T* xi = px2 + orig * d_in;
          T dot_pd = 0;
          for (int64_t j = 0; j < dt; ++j) {
            const T* vj = pv2 + (b.emb_begin + j) * d_emb;
            T dp = 0;
            for (int64_t c = 0; c < d_emb; ++c) dp += dyi[c] * vj[c];
            ds[static_cast<size_t>(j)] = dp;
            dot_pd += Pi[j] * dp;
          }
          T* dxi = dx + orig * d_in;
          for (int64_t j = 0; j < dt; ++j) {
            const T dsj = Pi[j] * (ds[static_cast<size_t>(j)] - dot_pd);
            const T* kj = pk2 + (b.emb_begin + j) * d_in;
            T* dkj = dk + (b.emb_begin + j) * d_in;
            T* dvj = dv + (b.emb_begin + j) * d_emb;
            const T w = Pi[j];
            for (int64_t c = 0; c < d_in; ++c) {
              dxi[c] += dsj * kj[c];
              dkj[c] += dsj * xi[c];
            }
            for (int64_t c = 0; c < d_emb; ++c) dvj[c] += w * dyi[c];
          }
        }
      }
    };
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> l3_forward_sorted(const Tensor<T>& x, const std::vector<int32_t>& tokens,
                            const L3Params<T>& params, const SortPlan& plan, T eps) {
  const int64_t n = x.dim(0);
  check(x.rank() == 2 && x.dim(1) == params.d_in, ErrorKind::Dimension,
        "l3_forward_sorted expects x of shape [n, d_in]");
  check(static_cast<int64_t>(tokens.size()) == n &&
            static_cast<int64_t>(plan.fw.size()) == n,
        ErrorKind::Dimension, "sort plan was not built for this batch");
  for (const auto& b : plan.blocks) {
    check(b.row_begin < b.row_end && b.row_end <= n, ErrorKind::Dimension,
          "sort plan block out of range");
    check(tokens[static_cast<size_t>(plan.fw[b.row_begin])] == b.token, ErrorKind::Dimension,
          "sort plan does not match the token batch");
  }

  auto plan_copy = std::make_shared<const SortPlan>(plan);
  Tensor<T> xn = ops::rms_norm(x, params.norm_in, eps);
  Tensor<T> agg =
      l3_attend_sorted<T>(xn, params.w_k, params.tied ? params.w_k : params.w_v, plan_copy,
                          params.d_emb);
  Tensor<T> up = ops::matmul(agg, params.w_up, false, true);
  Tensor<T> up_n = ops::rms_norm(up, params.norm_out, eps);
  Tensor<T> cat = ops::concat_cols(up_n, x);
  return ops::matmul(cat, params.w_mix, false, true);
}

FlopsReport l3_flops(int64_t d_t, int64_t d_in, int64_t d_emb, int64_t d_up, int64_t d_out) {
  check(d_t >= 1 && d_in >= 1 && d_emb >= 1 && d_up >= 1 && d_out >= 1, ErrorKind::Config,
        "l3_flops: dimensions must be >= 1");
  FlopsReport r;
  r.key_scoring = 2 * d_t * d_in;
  r.softmax = 3 * d_t;
  r.value_aggregation = 2 * d_emb * d_t;
  r.up_projection = 2 * d_up * d_emb;
  r.mixing = 2 * d_out * (d_in + d_up);
  r.total = r.key_scoring + r.softmax + r.value_aggregation + r.up_projection + r.mixing;
  r.mixing_embedding_quadratic = 2 * d_emb * (d_emb + d_up);
  return r;
}

ActiveParamsReport expected_active_l3_params(const AllocationTable& alloc,
                                             const std::vector<int32_t>& stream, int64_t d_in,
                                             int64_t d_emb, int64_t d_up, int64_t d_out,
                                             bool tied) {
  check(!stream.empty(), ErrorKind::Config, "expected_active_l3_params: empty stream");
  double sum_dt = 0;
  for (int32_t t : stream) {
    check(t >= 0 && t < alloc.vocab_size, ErrorKind::Index, "stream token out of range");
    sum_dt += static_cast<double>(alloc.count_for(t));
  }
  ActiveParamsReport r;
  r.e_dt = sum_dt / static_cast<double>(stream.size());
  r.embedding_params = r.e_dt * static_cast<double>(tied ? d_in : d_in + d_emb);
  r.dense_params = d_up * d_emb + d_out * (d_in + d_up) + d_in + d_up;
  r.total = r.embedding_params + static_cast<double>(r.dense_params);
  return r;
}

#define L3_INSTANTIATE_LAYER(T)                                                              \
  template struct L3Params<T>;                                                               \
  template L3Params<T> make_l3_params<T>(std::shared_ptr<const AllocationTable>, int64_t,    \
                                         int64_t, int64_t, int64_t, bool, Rng&);             \
  template Tensor<T> l3_forward_naive<T>(const Tensor<T>&, int32_t, const L3Params<T>&, T);  \
  template Tensor<T> l3_forward_sorted<T>(const Tensor<T>&, const std::vector<int32_t>&,     \
                                          const L3Params<T>&, const SortPlan&, T);
L3_INSTANTIATE_LAYER(float)
L3_INSTANTIATE_LAYER(double)
#undef L3_INSTANTIATE_LAYER

}  // namespace l3
