#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "l3/model.hpp"

namespace l3 {

// Tuned lens: one trained norm+unembedding head per decoder-block boundary
// (plus the post-L3 boundaries), measuring how close each intermediate state
// already is to the final output distribution.

template <typename T>
struct LensHead {
  std::string boundary;  // trace label this head reads from
  Tensor<T> gain;        // [d_model]
  Tensor<T> unembed;     // [V, d_model]
};

template <typename T>
struct TunedLens {
  std::vector<LensHead<T>> heads;
};

struct LensTrainConfig {
  double lr = 3e-4;
  double weight_decay = 0.01;
  int64_t steps = 160;
  int64_t batch_rows = 1024;
  int64_t eval_every = 20;  // full-devset KL checks; the best head state wins
  uint64_t seed = 0;
};

struct KLProfile {
  std::vector<std::pair<std::string, double>> per_boundary;  // label -> mean KL (nats)
};

// Heads start from the model's own final norm + unembedding (so the last
// boundary starts at KL exactly 0) and minimize KL(lens || model) with AdamW
// against full-vocabulary soft targets. A head whose KL grows past 10x its
// starting value aborts; otherwise the best evaluated state is kept.
template <typename T>
TunedLens<T> train_tuned_lens(const Model<T>& model, const std::vector<int32_t>& devset,
                              int batch, int seqlen, const LensTrainConfig& cfg);

template <typename T>
KLProfile lens_kl_profile(const Model<T>& model, const TunedLens<T>& lens,
                          const std::vector<int32_t>& data, int batch, int seqlen);

void write_profile_csv(const KLProfile& profile, const std::string& path);

// Per-token access statistics: KL between the L3 score distribution and the
// uniform distribution over that token's embeddings, averaged per (token,
// layer) over the data.
struct AccessKlRecord {
  int32_t token = 0;
  int layer = 0;  // index into the model's L3 list
  int32_t d_t = 0;
  double ln_d = 0;
  double mean_kl = 0;
  int64_t count = 0;
};

template <typename T>
std::vector<AccessKlRecord> access_kl_stats(const Model<T>& model,
                                            const std::vector<int32_t>& data, int batch,
                                            int seqlen);

void write_access_csv(const std::vector<AccessKlRecord>& records, const std::string& path);

#define L3_EXTERN_ANALYSIS(T)                                                                 \
  extern template TunedLens<T> train_tuned_lens<T>(const Model<T>&,                          \
                                                   const std::vector<int32_t>&, int, int,    \
                                                   const LensTrainConfig&);                  \
  extern template KLProfile lens_kl_profile<T>(const Model<T>&, const TunedLens<T>&,         \
                                               const std::vector<int32_t>&, int, int);       \
  extern template std::vector<AccessKlRecord> access_kl_stats<T>(                            \
      const Model<T>&, const std::vector<int32_t>&, int, int);
L3_EXTERN_ANALYSIS(float)
L3_EXTERN_ANALYSIS(double)
#undef L3_EXTERN_ANALYSIS

}  // namespace l3
