#include "l3/optim.hpp"

#include <cmath>

namespace l3 {

template <typename T>
OptimizerState<T> make_adamw(const std::vector<Tensor<T>>& params, const AdamWConfig& cfg) {
  OptimizerState<T> st;
  st.cfg = cfg;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto& p : params) {
    st.m.emplace_back(p.numel(), T(0));
    st.v.emplace_back(p.numel(), T(0));
  }
  return st;
}

template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params) {
    const T* g = p.grad();
    for (int64_t i = 0; i < p.numel(); ++i) sq += static_cast<double>(g[i]) * g[i];
  }
  const double norm = std::sqrt(sq);
  check(std::isfinite(norm), ErrorKind::Numeric, "gradient norm is not finite");
  if (norm > max_norm && norm > 0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      T* g = p.grad();
      const int64_t n = p.numel();
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < n; ++i) g[i] *= s;
    }
  }
  return norm;
}

template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state, double lr) {
  check(params.size() == state.m.size(), ErrorKind::Dimension,
        "optimizer state does not match parameter list");
  state.step += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const T eps = static_cast<T>(state.cfg.eps);
  const T wd_scale = static_cast<T>(1.0 - lr * state.cfg.weight_decay);

  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    check(static_cast<int64_t>(state.m[pi].size()) == p.numel(), ErrorKind::Dimension,
          "moment buffer shape mismatch");
    T* w = p.data();
    const T* g = p.grad();
    T* m = state.m[pi].data();
    T* v = state.v[pi].data();
    const int64_t n = p.numel();
    bool bad = false;
#pragma omp parallel for schedule(static) reduction(|| : bad)
    for (int64_t i = 0; i < n; ++i) {
      const T gi = g[i];
      bad = bad || !std::isfinite(gi);
      m[i] = static_cast<T>(b1) * m[i] + static_cast<T>(1.0 - b1) * gi;
      v[i] = static_cast<T>(b2) * v[i] + static_cast<T>(1.0 - b2) * gi * gi;
      const T mhat = static_cast<T>(static_cast<double>(m[i]) / bc1);
      const T vhat = static_cast<T>(static_cast<double>(v[i]) / bc2);
      w[i] = w[i] * wd_scale - static_cast<T>(lr) * mhat / (std::sqrt(vhat) + eps);
    }
    check(!bad, ErrorKind::Numeric, "non-finite gradient in adamw_step");
  }
}

double cosine_lr(int64_t step, int64_t warmup_steps, int64_t total_steps, double peak,
                 double floor) {
  check(total_steps >= warmup_steps, ErrorKind::Config,
        "cosine_lr: total_steps < warmup_steps");
  check(step >= 0 && step <= total_steps, ErrorKind::Config, "cosine_lr: step out of range");
  if (step < warmup_steps)
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return peak;
  const double t =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(t * 3.14159265358979323846));
}

template OptimizerState<float> make_adamw<float>(const std::vector<Tensor<float>>&,
                                                 const AdamWConfig&);
template OptimizerState<double> make_adamw<double>(const std::vector<Tensor<double>>&,
                                                   const AdamWConfig&);
template double clip_global_norm<float>(std::vector<Tensor<float>>&, double);
template double clip_global_norm<double>(std::vector<Tensor<double>>&, double);
template void adamw_step<float>(std::vector<Tensor<float>>&, OptimizerState<float>&, double);
template void adamw_step<double>(std::vector<Tensor<double>>&, OptimizerState<double>&, double);

}  // namespace l3
