#pragma once

#include <cstdint>
#include <vector>

#include "l3/tensor.hpp"

namespace l3::ops {

// 2-D matrix product with optional transposed operands (storage stays
// row-major; flags select which layout each operand is read in).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> silu(const Tensor<T>& a);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps);

// Mean negative log-likelihood of targets under row softmax; exp() of the
// result is perplexity.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& targets);

// Row gather: out[i] = table[ids[i]]. Backward scatter-adds into the table.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int32_t>& ids);

// Rotary position embedding, rotate-half pairing, applied per head.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, const std::vector<int32_t>& positions, int n_heads, T base);

// Multi-head causal self-attention over `batch` packed sequences of length
// `seqlen`. q/k/v are [batch*seqlen, n_heads*head_dim]; masking never crosses
// sequence boundaries.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int batch,
                           int seqlen, int n_heads);

// Mean over rows of KL(softmax(logits) || exp(target_logp)); the target is a
// constant distribution in log space.
template <typename T>
Tensor<T> kl_vs_target(const Tensor<T>& logits, const Tensor<T>& target_logp);

// --- shared forward helpers (no graph) ---

// Row log-softmax into out; returns nothing. Used by eval paths.
template <typename T>
void log_softmax_rows(const T* x, T* out, int64_t rows, int64_t cols);

#define L3_EXTERN_OPS(T)                                                                       \
  extern template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, bool, bool);        \
  extern template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                       \
  extern template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                       \
  extern template Tensor<T> scale<T>(const Tensor<T>&, T);                                    \
  extern template Tensor<T> silu<T>(const Tensor<T>&);                                        \
  extern template Tensor<T> sum<T>(const Tensor<T>&);                                         \
  extern template Tensor<T> concat_cols<T>(const Tensor<T>&, const Tensor<T>&);               \
  extern template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                \
  extern template Tensor<T> rms_norm<T>(const Tensor<T>&, const Tensor<T>&, T);               \
  extern template Tensor<T> cross_entropy<T>(const Tensor<T>&, const std::vector<int32_t>&);  \
  extern template Tensor<T> embedding<T>(const Tensor<T>&, const std::vector<int32_t>&);      \
  extern template Tensor<T> rope<T>(const Tensor<T>&, const std::vector<int32_t>&, int, T);   \
  extern template Tensor<T> causal_attention<T>(const Tensor<T>&, const Tensor<T>&,           \
                                                const Tensor<T>&, int, int, int);             \
  extern template Tensor<T> kl_vs_target<T>(const Tensor<T>&, const Tensor<T>&);              \
  extern template void log_softmax_rows<T>(const T*, T*, int64_t, int64_t);

L3_EXTERN_OPS(float)
L3_EXTERN_OPS(double)
#undef L3_EXTERN_OPS

}  // namespace l3::ops
