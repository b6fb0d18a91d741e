#pragma once

#include <cstdint>
#include <vector>

#include "l3/tensor.hpp"

namespace l3 {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

// First/second moment buffers, one pair per parameter tensor, plus the step
// counter. Moments are kept in the parameter scalar type.
template <typename T>
struct OptimizerState {
  AdamWConfig cfg;
  int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

template <typename T>
OptimizerState<T> make_adamw(const std::vector<Tensor<T>>& params, const AdamWConfig& cfg);

// Scales every gradient by max_norm/norm when the global L2 norm exceeds
// max_norm. Returns the pre-clip norm. Non-finite gradients abort.
template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& params, double max_norm);

// One decoupled-weight-decay Adam update. `lr` overrides cfg.lr for schedule
// support; weight decay follows the torch convention (scaled by lr).
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state, double lr);

// Linear warmup to `peak`, then cosine decay to `floor`.
double cosine_lr(int64_t step, int64_t warmup_steps, int64_t total_steps, double peak,
                 double floor);

extern template OptimizerState<float> make_adamw<float>(const std::vector<Tensor<float>>&,
                                                        const AdamWConfig&);
extern template OptimizerState<double> make_adamw<double>(const std::vector<Tensor<double>>&,
                                                          const AdamWConfig&);
extern template double clip_global_norm<float>(std::vector<Tensor<float>>&, double);
extern template double clip_global_norm<double>(std::vector<Tensor<double>>&, double);
extern template void adamw_step<float>(std::vector<Tensor<float>>&, OptimizerState<float>&,
                                       double);
extern template void adamw_step<double>(std::vector<Tensor<double>>&, OptimizerState<double>&,
                                        double);

}  // namespace l3
