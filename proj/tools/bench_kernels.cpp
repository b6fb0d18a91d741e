// Compares the GEMM backends (serial reference, hand OpenMP, BLAS when built
// in) and the block-diagonal L3 forward against its per-row naive path.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "l3/kernels.hpp"
#include "l3/l3_layer.hpp"
#include "l3/rng.hpp"

using l3::Rng;
using clk = std::chrono::steady_clock;

namespace {

double time_loop(int iters, const std::function<void()>& fn) {
  fn();  // warm up
  const auto t0 = clk::now();
  for (int i = 0; i < iters; ++i) fn();
  return std::chrono::duration<double>(clk::now() - t0).count() / iters;
}

void bench_gemm(int64_t m, int64_t k, int64_t n) {
  std::vector<float> a(static_cast<size_t>(m * k)), b(static_cast<size_t>(k * n)),
      c(static_cast<size_t>(m * n));
  Rng rng(7);
  for (auto& x : a) x = static_cast<float>(rng.uniform(-1, 1));
  for (auto& x : b) x = static_cast<float>(rng.uniform(-1, 1));
  const double flops = 2.0 * static_cast<double>(m) * static_cast<double>(k) *
                       static_cast<double>(n);
  const int iters = std::max(1, static_cast<int>(2e9 / flops));

  const double t_serial = time_loop(std::max(1, iters / 8), [&] {
    l3::kernels::serial::gemm<float>(false, false, m, n, k, a.data(), k, b.data(), n, c.data(), n,
                                     false);
  });
  const double t_omp = time_loop(iters, [&] {
    l3::kernels::gemm_openmp<float>(false, false, m, n, k, a.data(), k, b.data(), n, c.data(), n,
                                    false);
  });
  const double t_main = time_loop(iters, [&] {
    l3::kernels::gemm<float>(false, false, m, n, k, a.data(), k, b.data(), n, c.data(), n, false);
  });
  const char* main_name =
      l3::kernels::gemm_backend() == l3::kernels::Backend::Blas ? "blas" : "openmp";
  std::printf("gemm %5lldx%4lldx%4lld  serial %7.2f GF/s  openmp %7.2f GF/s  %s %7.2f GF/s\n",
              static_cast<long long>(m), static_cast<long long>(k), static_cast<long long>(n),
              flops / t_serial / 1e9, flops / t_omp / 1e9, main_name, flops / t_main / 1e9);
}

void bench_l3_paths(int64_t n, int32_t vocab, int32_t per_token) {
  Rng rng(11);
  auto alloc = std::make_shared<const l3::AllocationTable>(
      l3::uniform_allocate(vocab, per_token));
  auto params = l3::make_l3_params<float>(alloc, 256, 256, 512, 256, false, rng);

  std::vector<int32_t> tokens(static_cast<size_t>(n));
  for (auto& t : tokens) t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab)));
  std::vector<float> xdata(static_cast<size_t>(n) * 256);
  for (auto& x : xdata) x = static_cast<float>(rng.uniform(-1, 1));
  auto x = l3::Tensor<float>::from_data({n, 256}, xdata);
  const auto plan = l3::make_sort_plan(tokens, *alloc);

  l3::NoGradGuard ng;
  const double t_sorted =
      time_loop(10, [&] { l3::l3_forward_sorted<float>(x, tokens, params, plan); });
  const double t_naive = time_loop(2, [&] {
    for (int64_t i = 0; i < n; ++i) {
      auto row = l3::Tensor<float>::from_data(
          {1, 256}, std::vector<float>(xdata.begin() + i * 256, xdata.begin() + (i + 1) * 256));
      l3::l3_forward_naive<float>(row, tokens[static_cast<size_t>(i)], params);
    }
  });
  std::printf("l3 forward n=%lld vocab=%d d_t=%d  naive %8.2f ms  sorted %8.2f ms  (%.1fx)\n",
              static_cast<long long>(n), vocab, per_token, t_naive * 1e3, t_sorted * 1e3,
              t_naive / t_sorted);
}

}  // namespace

int main() {
  bench_gemm(4096, 256, 256);
  bench_gemm(4096, 256, 768);
  bench_gemm(4096, 256, 2048);
  bench_gemm(256, 256, 256);
  bench_l3_paths(4096, 512, 16);
  bench_l3_paths(4096, 512, 64);
  return 0;
}
