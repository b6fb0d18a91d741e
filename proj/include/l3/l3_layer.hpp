#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "l3/allocation.hpp"
#include "l3/ops.hpp"
#include "l3/rng.hpp"
#include "l3/tensor.hpp"

namespace l3 {

inline constexpr double kRmsEps = 1e-5;

// One lookup layer's learnables. Key/value embeddings live in flat tables so
// a token's rows are the contiguous slice [bounds[t], bounds[t+1]).
template <typename T>
struct L3Params {
  Tensor<T> w_k;      // [v, d_in]
  Tensor<T> w_v;      // [v, d_emb]; aliases w_k's node when tied
  Tensor<T> w_up;     // [d_up, d_emb]
  Tensor<T> w_mix;    // [d_out, d_up + d_in]
  Tensor<T> norm_in;  // [d_in]
  Tensor<T> norm_out; // [d_up]
  bool tied = false;
  int64_t d_in = 0, d_emb = 0, d_up = 0, d_out = 0;
  std::shared_ptr<const AllocationTable> alloc;

  std::vector<Tensor<T>> parameters();  // w_v omitted when tied
  int64_t parameter_count() const;
};

template <typename T>
L3Params<T> make_l3_params(std::shared_ptr<const AllocationTable> alloc, int64_t d_in,
                           int64_t d_emb, int64_t d_up, int64_t d_out, bool tied, Rng& rng);

// Stable sort of batch positions by token id plus per-distinct-token blocks.
// sorted[i] = original[fw[i]], bw inverts fw.
struct SortPlan {
  std::vector<int64_t> fw;
  std::vector<int64_t> bw;
  struct Block {
    int32_t token;
    int64_t row_begin, row_end;  // rows of the sorted batch
    int64_t emb_begin, emb_end;  // rows of W_K / W_V
  };
  std::vector<Block> blocks;
};

SortPlan make_sort_plan(const std::vector<int32_t>& tokens, const AllocationTable& alloc);

// Reference path: one token, one row. Composed from generic graph ops, so its
// gradient flows through a code path independent of the fused batched op.
template <typename T>
Tensor<T> l3_forward_naive(const Tensor<T>& x, int32_t token, const L3Params<T>& params,
                           T eps = static_cast<T>(kRmsEps));

// Batched block-diagonal path: per distinct token, one dense score/softmax/
// aggregate against that token's embedding slice. Row order of the output
// matches the input.
template <typename T>
Tensor<T> l3_forward_sorted(const Tensor<T>& x, const std::vector<int32_t>& tokens,
                            const L3Params<T>& params, const SortPlan& plan,
                            T eps = static_cast<T>(kRmsEps));

// Forward FLOP count for one token activating d_t embeddings. The mixing
// term is computed from the actual W_mix shape; the flat-quadratic variant
// 2*d_emb*(d_emb+d_up) is reported alongside since the two disagree whenever
// d_emb != d_out.
struct FlopsReport {
  int64_t key_scoring = 0;
  int64_t softmax = 0;
  int64_t value_aggregation = 0;
  int64_t up_projection = 0;
  int64_t mixing = 0;
  int64_t total = 0;
  int64_t mixing_embedding_quadratic = 0;  // not part of total
};

FlopsReport l3_flops(int64_t d_t, int64_t d_in, int64_t d_emb, int64_t d_up, int64_t d_out);

struct ActiveParamsReport {
  double e_dt = 0;                 // mean d_t over the stream
  double embedding_params = 0;     // E[d_t] * (d_in + d_emb), or * d_in when tied
  int64_t dense_params = 0;        // W_up, W_mix, norm gains
  double total = 0;
};

ActiveParamsReport expected_active_l3_params(const AllocationTable& alloc,
                                             const std::vector<int32_t>& stream, int64_t d_in,
                                             int64_t d_emb, int64_t d_up, int64_t d_out,
                                             bool tied);

#define L3_EXTERN_LAYER(T)                                                                   \
  extern template struct L3Params<T>;                                                       \
  extern template L3Params<T> make_l3_params<T>(std::shared_ptr<const AllocationTable>,     \
                                                int64_t, int64_t, int64_t, int64_t, bool,   \
                                                Rng&);                                      \
  extern template Tensor<T> l3_forward_naive<T>(const Tensor<T>&, int32_t,                  \
                                                const L3Params<T>&, T);                     \
  extern template Tensor<T> l3_forward_sorted<T>(const Tensor<T>&,                          \
                                                 const std::vector<int32_t>&,               \
                                                 const L3Params<T>&, const SortPlan&, T);
L3_EXTERN_LAYER(float)
L3_EXTERN_LAYER(double)
#undef L3_EXTERN_LAYER

}  // namespace l3
