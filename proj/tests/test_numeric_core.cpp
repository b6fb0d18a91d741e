#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "l3/gradcheck.hpp"
#include "l3/kernels.hpp"
#include "l3/ops.hpp"
#include "l3/optim.hpp"

using namespace l3;

namespace {

template <typename T>
Tensor<T> random_tensor(std::vector<int64_t> shape, Rng& rng, bool requires_grad = false,
                        double scale = 1.0) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-scale, scale));
  return t;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  auto eye = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  auto col = Tensor<double>::from_data({2, 1}, {3, 4});
  auto r = ops::matmul(eye, col);
  CHECK(r.values() == std::vector<double>{3, 4});

  auto a = Tensor<double>::from_data({1, 2}, {1, 2});
  auto b = Tensor<double>::from_data({2, 1}, {3, 4});
  CHECK(ops::matmul(a, b).item() == 11.0);

  // I @ A == A exactly, random A
  Rng rng(3);
  auto A = random_tensor<double>({16, 9}, rng);
  std::vector<double> ident(16 * 16, 0);
  for (int i = 0; i < 16; ++i) ident[i * 16 + i] = 1;
  auto I = Tensor<double>::from_data({16, 16}, ident);
  CHECK(ops::matmul(I, A).values() == A.values());
}

TEST_CASE("matmul shape mismatch raises a dimension error") {
  auto a = Tensor<float>::from_data({1, 2}, {1, 2});
  auto b = Tensor<float>::from_data({3, 1}, {1, 2, 3});
  CHECK_THROWS_WITH_AS(ops::matmul(a, b), doctest::Contains("inner dimensions"), Error);
}

TEST_CASE("matmul gradient matches finite differences (5x7 @ 7x3)") {
  Rng rng(11);
  auto a = random_tensor<double>({5, 7}, rng, true);
  auto b = random_tensor<double>({7, 3}, rng, true);
  auto rep = finite_diff_check(
      [&] { return ops::sum(ops::matmul(a, b)); },
      {{"a", a}, {"b", b}}, 1e-5, 1e-5);
  INFO(rep.summary());
  CHECK(rep.pass);
}

TEST_CASE("matmul transpose flags agree with explicit transposition") {
  Rng rng(12);
  auto a = random_tensor<double>({4, 6}, rng, true);
  auto bt = random_tensor<double>({5, 6}, rng, true);  // represents B^T storage
  auto r1 = ops::matmul(a, bt, false, true);
  // reference: transpose manually
  std::vector<double> b(6 * 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j) b[j * 5 + i] = bt.values()[i * 6 + j];
  auto r2 = ops::matmul(a, Tensor<double>::from_data({6, 5}, b));
  for (int64_t i = 0; i < r1.numel(); ++i)
    CHECK(r1.values()[i] == doctest::Approx(r2.values()[i]).epsilon(1e-12));

  auto rep = finite_diff_check([&] { return ops::sum(ops::matmul(a, bt, false, true)); },
                               {{"a", a}, {"bt", bt}}, 1e-5, 1e-5);
  CHECK(rep.pass);

  auto at = random_tensor<double>({6, 4}, rng, true);
  auto b2 = random_tensor<double>({6, 5}, rng, true);
  auto rep2 = finite_diff_check([&] { return ops::sum(ops::matmul(at, b2, true, false)); },
                                {{"at", at}, {"b2", b2}}, 1e-5, 1e-5);
  CHECK(rep2.pass);
}

TEST_CASE("softmax rows: symmetry, single element, stabilization") {
  auto r1 = ops::softmax_rows(Tensor<double>::from_data({1, 2}, {0, 0}));
  CHECK(r1.values()[0] == doctest::Approx(0.5));
  CHECK(r1.values()[1] == doctest::Approx(0.5));

  for (double z : {-100.0, 0.0, 3.5, 1e4}) {
    auto r = ops::softmax_rows(Tensor<double>::from_data({1, 1}, {z}));
    CHECK(r.item() == 1.0);
  }

  auto big = ops::softmax_rows(Tensor<double>::from_data({1, 2}, {1000, 1000}));
  CHECK(big.values()[0] == doctest::Approx(0.5));
  CHECK(std::isfinite(big.values()[1]));
}

TEST_CASE("softmax rows sum to one on random inputs") {
  Rng rng(4);
  auto x = random_tensor<double>({13, 17}, rng, false, 30.0);
  auto p = ops::softmax_rows(x);
  for (int r = 0; r < 13; ++r) {
    double s = 0;
    for (int c = 0; c < 17; ++c) {
      const double v = p.values()[r * 17 + c];
      CHECK(v >= 0);
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("softmax rejects non-finite input") {
  auto x = Tensor<double>::from_data({1, 2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(ops::softmax_rows(x), Error);
  try {
    ops::softmax_rows(x);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
  }
}

TEST_CASE("rms_norm: zeros, unit vector, unit output RMS") {
  auto gain = Tensor<double>::from_data({4}, {1, 1, 1, 1});
  auto z = ops::rms_norm(Tensor<double>::zeros({1, 4}), gain, 1e-5);
  for (double v : z.values()) CHECK(v == 0);

  auto ones = ops::rms_norm(Tensor<double>::from_data({1, 4}, {1, 1, 1, 1}), gain, 1e-30);
  for (double v : ones.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));

  Rng rng(5);
  auto x = random_tensor<double>({1, 64}, rng, false, 3.0);
  auto y = ops::rms_norm(x, Tensor<double>::from_data({64}, std::vector<double>(64, 1.0)), 1e-5);
  double ms = 0;
  for (double v : y.values()) ms += v * v;
  CHECK(std::sqrt(ms / 64) == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("rms_norm gradient") {
  Rng rng(6);
  auto x = random_tensor<double>({3, 8}, rng, true);
  auto g = random_tensor<double>({8}, rng, true);
  auto rep = finite_diff_check(
      [&] {
        auto y = ops::rms_norm(x, g, 1e-5);
        return ops::sum(ops::mul(y, y));
      },
      {{"x", x}, {"g", g}}, 1e-5, 1e-4);
  INFO(rep.summary());
  CHECK(rep.pass);
}

TEST_CASE("cross_entropy: uniform, one-hot, brute-force oracle") {
  const int v = 4;
  auto uniform = Tensor<double>::zeros({1, v});
  CHECK(ops::cross_entropy(uniform, {2}).item() == doctest::Approx(std::log(4.0)));

  auto hot = Tensor<double>::zeros({1, 5});
  hot.values()[3] = 1e4;
  CHECK(ops::cross_entropy(hot, {3}).item() == doctest::Approx(0.0).epsilon(1e-9));

  Rng rng(7);
  auto logits = random_tensor<double>({3, 5}, rng, false, 4.0);
  std::vector<int32_t> targets{4, 0, 2};
  // independent evaluation through explicit log-sum-exp
  double expected = 0;
  for (int r = 0; r < 3; ++r) {
    double mx = -1e300;
    for (int c = 0; c < 5; ++c) mx = std::max(mx, logits.values()[r * 5 + c]);
    double s = 0;
    for (int c = 0; c < 5; ++c) s += std::exp(logits.values()[r * 5 + c] - mx);
    expected += mx + std::log(s) - logits.values()[r * 5 + targets[r]];
  }
  expected /= 3;
  CHECK(ops::cross_entropy(logits, targets).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("cross_entropy rejects out-of-range targets") {
  auto logits = Tensor<double>::zeros({2, 4});
  CHECK_THROWS_AS(ops::cross_entropy(logits, {0, 4}), Error);
}

TEST_CASE("cross_entropy gradient") {
  Rng rng(8);
  auto logits = random_tensor<double>({4, 6}, rng, true, 2.0);
  auto rep = finite_diff_check([&] { return ops::cross_entropy(logits, {1, 5, 0, 3}); },
                               {{"logits", logits}}, 1e-5, 1e-5);
  CHECK(rep.pass);
}

TEST_CASE("elementwise and structural op gradients") {
  Rng rng(9);
  auto a = random_tensor<double>({3, 5}, rng, true);
  auto b = random_tensor<double>({3, 5}, rng, true);
  auto rep = finite_diff_check(
      [&] {
        auto y = ops::concat_cols(ops::mul(ops::silu(a), b), ops::add(a, b));
        auto p = ops::softmax_rows(y);
        return ops::sum(ops::mul(p, y));
      },
      {{"a", a}, {"b", b}}, 1e-5, 1e-4);
  INFO(rep.summary());
  CHECK(rep.pass);
}

TEST_CASE("embedding gradient scatters into repeated rows") {
  Rng rng(10);
  auto table = random_tensor<double>({6, 4}, rng, true);
  std::vector<int32_t> ids{5, 1, 5, 5, 0};
  auto rep = finite_diff_check(
      [&] {
        auto e = ops::embedding(table, ids);
        return ops::sum(ops::mul(e, e));
      },
      {{"table", table}}, 1e-5, 1e-5);
  CHECK(rep.pass);
  CHECK_THROWS_AS(ops::embedding(table, {6}), Error);
}

TEST_CASE("rope preserves norms and inverts cleanly in the gradient") {
  Rng rng(13);
  auto x = random_tensor<double>({5, 16}, rng, true);  // 2 heads x 8
  std::vector<int32_t> pos{0, 1, 2, 3, 9};
  auto y = ops::rope(x, pos, 2, 10000.0);
  for (int r = 0; r < 5; ++r) {
    double nx = 0, ny = 0;
    for (int c = 0; c < 16; ++c) {
      nx += x.values()[r * 16 + c] * x.values()[r * 16 + c];
      ny += y.values()[r * 16 + c] * y.values()[r * 16 + c];
    }
    CHECK(ny == doctest::Approx(nx).epsilon(1e-9));
  }
  // position 0 is the identity rotation
  for (int c = 0; c < 16; ++c) CHECK(y.values()[c] == doctest::Approx(x.values()[c]));

  auto rep = finite_diff_check(
      [&] {
        auto r = ops::rope(x, pos, 2, 10000.0);
        return ops::sum(ops::mul(r, r));
      },
      {{"x", x}}, 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("causal attention matches a hand-rolled single-head oracle") {
  // one sequence, one head: the oracle computes masked attention directly
  Rng rng(14);
  const int L = 5, dh = 4;
  auto q = random_tensor<double>({L, dh}, rng);
  auto k = random_tensor<double>({L, dh}, rng);
  auto v = random_tensor<double>({L, dh}, rng);
  auto out = ops::causal_attention(q, k, v, 1, L, 1);

  for (int i = 0; i < L; ++i) {
    std::vector<double> s(static_cast<size_t>(i + 1));
    double mx = -1e300;
    for (int j = 0; j <= i; ++j) {
      double dot = 0;
      for (int c = 0; c < dh; ++c) dot += q.values()[i * dh + c] * k.values()[j * dh + c];
      s[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
      mx = std::max(mx, s[static_cast<size_t>(j)]);
    }
    double sum = 0;
    for (auto& sv : s) {
      sv = std::exp(sv - mx);
      sum += sv;
    }
    for (int c = 0; c < dh; ++c) {
      double o = 0;
      for (int j = 0; j <= i; ++j) o += s[static_cast<size_t>(j)] / sum * v.values()[j * dh + c];
      CHECK(out.values()[i * dh + c] == doctest::Approx(o).epsilon(1e-10));
    }
  }
}

TEST_CASE("causal attention gradient, multi-head multi-sequence") {
  Rng rng(15);
  const int B = 2, L = 4, H = 2, dh = 3;
  auto q = random_tensor<double>({B * L, H * dh}, rng, true);
  auto k = random_tensor<double>({B * L, H * dh}, rng, true);
  auto v = random_tensor<double>({B * L, H * dh}, rng, true);
  auto rep = finite_diff_check(
      [&] {
        auto o = ops::causal_attention(q, k, v, B, L, H);
        return ops::sum(ops::mul(o, o));
      },
      {{"q", q}, {"k", k}, {"v", v}}, 1e-5, 1e-4);
  INFO(rep.summary());
  CHECK(rep.pass);
}

TEST_CASE("kl_vs_target: zero at equality, gradient correct") {
  Rng rng(16);
  auto logits = random_tensor<double>({3, 6}, rng, true, 2.0);
  auto target = Tensor<double>::zeros({3, 6});
  ops::log_softmax_rows<double>(logits.data(), target.data(), 3, 6);
  CHECK(ops::kl_vs_target(logits, target).item() == doctest::Approx(0.0).epsilon(1e-12));

  auto other = random_tensor<double>({3, 6}, rng, false, 2.0);
  auto tlogp = Tensor<double>::zeros({3, 6});
  ops::log_softmax_rows<double>(other.data(), tlogp.data(), 3, 6);
  CHECK(ops::kl_vs_target(logits, tlogp).item() > 0);
  auto rep = finite_diff_check([&] { return ops::kl_vs_target(logits, tlogp); },
                               {{"logits", logits}}, 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("adamw: zero grad no-op, scalar step, lr=0") {
  auto p = Tensor<double>::from_data({1}, {1.0}, true);
  std::vector<Tensor<double>> params{p};
  AdamWConfig cfg;
  cfg.weight_decay = 0;
  auto st = make_adamw(params, cfg);

  p.grad()[0] = 0;
  adamw_step(params, st, 0.1);
  CHECK(p.values()[0] == 1.0);

  // one step with g=1, lr=0.1: bias-corrected update is lr to within eps
  p.values()[0] = 1.0;
  st = make_adamw(params, cfg);
  p.grad()[0] = 1.0;
  adamw_step(params, st, 0.1);
  CHECK(p.values()[0] == doctest::Approx(0.9).epsilon(1e-6));

  // lr=0 and wd=0 leaves parameters exactly unchanged
  auto q = Tensor<double>::from_data({3}, {1, -2, 3}, true);
  std::vector<Tensor<double>> qs{q};
  auto st2 = make_adamw(qs, cfg);
  q.grad()[0] = 0.3;
  q.grad()[1] = -4;
  q.grad()[2] = 11;
  adamw_step(qs, st2, 0.0);
  CHECK(q.values() == std::vector<double>{1, -2, 3});
  CHECK(st2.step == 1);
}

TEST_CASE("adamw rejects non-finite gradients") {
  auto p = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
  std::vector<Tensor<double>> params{p};
  auto st = make_adamw(params, AdamWConfig{});
  p.grad()[0] = std::nan("");
  CHECK_THROWS_AS(adamw_step(params, st, 0.1), Error);
}

TEST_CASE("global norm clipping") {
  auto p = Tensor<double>::from_data({2}, {0.0, 0.0}, true);
  std::vector<Tensor<double>> params{p};
  p.grad()[0] = 6;
  p.grad()[1] = 8;  // norm 10
  const double norm = clip_global_norm(params, 1.0);
  CHECK(norm == doctest::Approx(10.0));
  CHECK(std::hypot(p.grad()[0], p.grad()[1]) == doctest::Approx(1.0).epsilon(1e-12));

  p.grad()[0] = 0.3;
  p.grad()[1] = 0.4;
  clip_global_norm(params, 1.0);  // below the threshold: untouched
  CHECK(p.grad()[0] == 0.3);

  p.grad()[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(clip_global_norm(params, 1.0), Error);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(100, 100, 1000, 3e-4, 3e-5) == doctest::Approx(3e-4));
  CHECK(cosine_lr(1000, 100, 1000, 3e-4, 3e-5) == doctest::Approx(3e-5));
  CHECK(cosine_lr(550, 100, 1000, 3e-4, 3e-5) == doctest::Approx((3e-4 + 3e-5) / 2));
  CHECK(cosine_lr(50, 100, 1000, 3e-4, 3e-5) == doctest::Approx(1.5e-4));
  CHECK_THROWS_AS(cosine_lr(0, 100, 50, 1e-3, 1e-4), Error);
}

TEST_CASE("finite_diff_check on known cases") {
  // quadratic: analytic [2, 4]
  auto p = Tensor<double>::from_data({2}, {1, 2}, true);
  auto rep = finite_diff_check([&] { return ops::sum(ops::mul(p, p)); }, {{"p", p}}, 1e-5, 1e-6);
  CHECK(rep.pass);
  CHECK(rep.coords_checked == 2);

  // constant function: gradient ~ 0
  auto c = Tensor<double>::from_data({2}, {1, 2}, true);
  auto rep2 = finite_diff_check(
      [&] {
        auto z = ops::scale(c, 0.0);
        return ops::sum(z);
      },
      {{"c", c}}, 1e-5, 1e-8);
  CHECK(rep2.pass);
  CHECK(rep2.max_rel_err <= 1e-8);
}

TEST_CASE("gemm backends agree with the serial reference") {
  Rng rng(21);
  const int64_t m = 33, k = 29, n = 41;
  std::vector<float> a(static_cast<size_t>(m * k)), b(static_cast<size_t>(k * n));
  for (auto& x : a) x = static_cast<float>(rng.uniform(-1, 1));
  for (auto& x : b) x = static_cast<float>(rng.uniform(-1, 1));
  std::vector<float> ref(static_cast<size_t>(m * n)), omp(ref.size()), main_c(ref.size());
  kernels::serial::gemm<float>(false, false, m, n, k, a.data(), k, b.data(), n, ref.data(), n,
                               false);
  kernels::gemm_openmp<float>(false, false, m, n, k, a.data(), k, b.data(), n, omp.data(), n,
                              false);
  kernels::gemm<float>(false, false, m, n, k, a.data(), k, b.data(), n, main_c.data(), n, false);
  for (size_t i = 0; i < ref.size(); ++i) {
    CHECK(omp[i] == doctest::Approx(ref[i]).epsilon(1e-5));
    CHECK(main_c[i] == doctest::Approx(ref[i]).epsilon(1e-5));
  }
}

TEST_CASE("no-grad mode skips recording") {
  Rng rng(22);
  auto a = random_tensor<double>({2, 2}, rng, true);
  NoGradGuard ng;
  auto y = ops::matmul(a, a);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}
