#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "l3/gradcheck.hpp"
#include "l3/l3_layer.hpp"

using namespace l3;

namespace {

std::shared_ptr<const AllocationTable> random_alloc(Rng& rng, int32_t vocab, int32_t max_d) {
  std::vector<int32_t> d(static_cast<size_t>(vocab));
  for (auto& v : d) v = 1 + static_cast<int32_t>(rng.below(static_cast<uint64_t>(max_d)));
  return std::make_shared<const AllocationTable>(
      AllocationTable::from_counts(std::move(d), static_cast<uint32_t>(max_d)));
}

template <typename T>
Tensor<T> random_rows(Rng& rng, int64_t n, int64_t d, bool grad = false) {
  Tensor<T> t = Tensor<T>::zeros({n, d}, grad);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-1, 1));
  return t;
}

}  // namespace

TEST_CASE("sort plan: worked example, sorted input, all-equal input") {
  auto alloc = std::make_shared<const AllocationTable>(uniform_allocate(8, 2));
  auto plan = make_sort_plan({5, 2, 5}, *alloc);
  CHECK(plan.fw == std::vector<int64_t>{1, 0, 2});
  CHECK(plan.bw == std::vector<int64_t>{1, 0, 2});
  REQUIRE(plan.blocks.size() == 2);
  CHECK(plan.blocks[0].token == 2);
  CHECK(plan.blocks[0].row_begin == 0);
  CHECK(plan.blocks[0].row_end == 1);
  CHECK(plan.blocks[1].token == 5);
  CHECK(plan.blocks[1].row_begin == 1);
  CHECK(plan.blocks[1].row_end == 3);
  CHECK(plan.blocks[1].emb_begin == 10);
  CHECK(plan.blocks[1].emb_end == 12);

  auto sorted = make_sort_plan({1, 2, 3, 3}, *alloc);
  CHECK(sorted.fw == std::vector<int64_t>{0, 1, 2, 3});

  auto equal = make_sort_plan({4, 4, 4}, *alloc);
  REQUIRE(equal.blocks.size() == 1);
  CHECK(equal.blocks[0].row_begin == 0);
  CHECK(equal.blocks[0].row_end == 3);
}

TEST_CASE("sort plan inverse permutation property") {
  Rng rng(5);
  auto alloc = random_alloc(rng, 32, 5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int32_t> toks(1 + rng.below(100));
    for (auto& t : toks) t = static_cast<int32_t>(rng.below(32));
    auto plan = make_sort_plan(toks, *alloc);
    for (size_t i = 0; i < toks.size(); ++i)
      CHECK(plan.bw[static_cast<size_t>(plan.fw[i])] == static_cast<int64_t>(i));
    // blocks partition rows, embedding ranges disjoint and in bounds
    int64_t row = 0;
    int64_t prev_emb_end = -1;
    for (const auto& b : plan.blocks) {
      CHECK(b.row_begin == row);
      row = b.row_end;
      CHECK(b.emb_begin > prev_emb_end);
      CHECK(b.emb_end <= alloc->total);
      prev_emb_end = b.emb_begin;  // ranges are ordered by token, no overlap
    }
    CHECK(row == static_cast<int64_t>(toks.size()));
  }
}

TEST_CASE("naive forward: single embedding ignores the key row") {
  Rng rng(7);
  auto alloc = std::make_shared<const AllocationTable>(uniform_allocate(4, 1));
  auto params = make_l3_params<double>(alloc, 6, 5, 8, 6, false, rng);
  auto x = random_rows<double>(rng, 1, 6);
  auto out1 = l3_forward_naive<double>(x, 2, params);
  // clobber the key row; a single-row softmax is 1 regardless
  for (int64_t c = 0; c < 6; ++c) params.w_k.data()[2 * 6 + c] = 1234.5;
  auto out2 = l3_forward_naive<double>(x, 2, params);
  CHECK(out1.values() == out2.values());
}

TEST_CASE("naive forward: symmetric two-row softmax averages the values") {
  Rng rng(8);
  auto alloc = std::make_shared<const AllocationTable>(uniform_allocate(3, 2));
  auto params = make_l3_params<double>(alloc, 4, 5, 6, 4, false, rng);
  // zero the two key rows of token 1 so scores are equal
  auto [lo, hi] = alloc->range_for(1);
  for (int64_t r = lo; r < hi; ++r)
    for (int64_t c = 0; c < 4; ++c) params.w_k.data()[r * 4 + c] = 0;
  auto x = random_rows<double>(rng, 1, 4);

  auto out = l3_forward_naive<double>(x, 1, params);
  // oracle: replace both value rows by their mean; output must be unchanged
  std::vector<double> mean(5);
  for (int64_t c = 0; c < 5; ++c)
    mean[static_cast<size_t>(c)] =
        0.5 * (params.w_v.data()[lo * 5 + c] + params.w_v.data()[(lo + 1) * 5 + c]);
  for (int64_t r = lo; r < hi; ++r)
    for (int64_t c = 0; c < 5; ++c) params.w_v.data()[r * 5 + c] = mean[static_cast<size_t>(c)];
  auto out2 = l3_forward_naive<double>(x, 1, params);
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out.values()[i] == doctest::Approx(out2.values()[i]).epsilon(1e-12));
}

TEST_CASE("full-layer gradient check, naive path, untied and tied") {
  Rng rng(9);
  for (bool tied : {false, true}) {
    const int64_t d_in = 8;
    const int64_t d_emb = tied ? d_in : 5;
    auto alloc = random_alloc(rng, 6, 3);
    auto params = make_l3_params<double>(alloc, d_in, d_emb, 16, d_in, tied, rng);
    auto x = random_rows<double>(rng, 1, d_in, true);

    std::vector<std::pair<std::string, Tensor<double>>> named{
        {"x", x},       {"w_k", params.w_k},         {"w_up", params.w_up},
        {"w_mix", params.w_mix}, {"norm_in", params.norm_in}, {"norm_out", params.norm_out}};
    if (!tied) named.emplace_back("w_v", params.w_v);

    auto rep = finite_diff_check(
        [&] {
          auto out = l3_forward_naive<double>(x, 4, params);
          return ops::sum(ops::mul(out, out));
        },
        named, 1e-5, 1e-4);
    INFO(rep.summary());
    CHECK(rep.pass);
  }
}

TEST_CASE("full-layer gradient check through the sorted path") {
  Rng rng(10);
  auto alloc = random_alloc(rng, 8, 4);
  auto params = make_l3_params<double>(alloc, 6, 6, 10, 6, false, rng);
  std::vector<int32_t> toks{3, 1, 3, 7, 0, 3};
  auto x = random_rows<double>(rng, 6, 6, true);
  auto plan = make_sort_plan(toks, *alloc);

  auto rep = finite_diff_check(
      [&] {
        auto out = l3_forward_sorted<double>(x, toks, params, plan);
        return ops::sum(ops::mul(out, out));
      },
      {{"x", x},
       {"w_k", params.w_k},
       {"w_v", params.w_v},
       {"w_up", params.w_up},
       {"w_mix", params.w_mix},
       {"norm_in", params.norm_in},
       {"norm_out", params.norm_out}},
      1e-5, 1e-4);
  INFO(rep.summary());
  CHECK(rep.pass);
}

TEST_CASE("path equivalence: sorted equals per-row naive") {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const bool tied = trial % 2 == 0;
    const int32_t vocab = 2 + static_cast<int32_t>(rng.below(12));
    const int64_t d_in = 4 + static_cast<int64_t>(rng.below(8));
    const int64_t d_emb = tied ? d_in : 3 + static_cast<int64_t>(rng.below(6));
    auto alloc = random_alloc(rng, vocab, 4);
    auto params = make_l3_params<double>(alloc, d_in, d_emb, 12, d_in, tied, rng);

    const int64_t n = 1 + static_cast<int64_t>(rng.below(32));
    std::vector<int32_t> toks(static_cast<size_t>(n));
    for (auto& t : toks) t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab)));
    auto x = random_rows<double>(rng, n, d_in);
    auto plan = make_sort_plan(toks, *alloc);

    NoGradGuard ng;
    auto sorted = l3_forward_sorted<double>(x, toks, params, plan);
    for (int64_t r = 0; r < n; ++r) {
      auto row = Tensor<double>::from_data(
          {1, d_in},
          std::vector<double>(x.values().begin() + r * d_in, x.values().begin() + (r + 1) * d_in));
      auto naive = l3_forward_naive<double>(row, toks[static_cast<size_t>(r)], params);
      for (int64_t c = 0; c < d_in; ++c)
        CHECK(std::abs(sorted.values()[r * d_in + c] - naive.values()[c]) < 1e-10);
    }
  }
}

TEST_CASE("n=1 sorted path is exactly the naive path") {
  Rng rng(12);
  auto alloc = random_alloc(rng, 5, 3);
  auto params = make_l3_params<float>(alloc, 4, 4, 8, 4, false, rng);
  auto x = random_rows<float>(rng, 1, 4);
  std::vector<int32_t> toks{3};
  NoGradGuard ng;
  auto sorted = l3_forward_sorted<float>(x, toks, params, make_sort_plan(toks, *alloc));
  auto naive = l3_forward_naive<float>(x, 3, params);
  CHECK(sorted.values() == naive.values());
}

TEST_CASE("permutation property: row permutation permutes outputs") {
  Rng rng(13);
  auto alloc = random_alloc(rng, 6, 3);
  auto params = make_l3_params<float>(alloc, 5, 5, 7, 5, false, rng);
  const int64_t n = 9;
  std::vector<int32_t> toks(static_cast<size_t>(n));
  for (auto& t : toks) t = static_cast<int32_t>(rng.below(6));
  auto x = random_rows<float>(rng, n, 5);

  NoGradGuard ng;
  auto base = l3_forward_sorted<float>(x, toks, params, make_sort_plan(toks, *alloc));

  // rotate rows by 3
  std::vector<int32_t> toks2(toks.size());
  Tensor<float> x2 = Tensor<float>::zeros({n, 5});
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = (i + 3) % n;
    toks2[static_cast<size_t>(i)] = toks[static_cast<size_t>(j)];
    std::copy(x.values().begin() + j * 5, x.values().begin() + (j + 1) * 5,
              x2.values().begin() + i * 5);
  }
  auto rotated = l3_forward_sorted<float>(x2, toks2, params, make_sort_plan(toks2, *alloc));
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = (i + 3) % n;
    for (int64_t c = 0; c < 5; ++c)
      CHECK(rotated.values()[i * 5 + c] == base.values()[j * 5 + c]);
  }
}

TEST_CASE("softmax locality: rows outside a token's range never matter") {
  Rng rng(14);
  auto alloc = random_alloc(rng, 6, 3);
  auto params = make_l3_params<double>(alloc, 5, 4, 7, 5, false, rng);
  auto x = random_rows<double>(rng, 1, 5);
  const int32_t tok = 2;
  NoGradGuard ng;
  auto base = l3_forward_naive<double>(x, tok, params);

  auto [lo, hi] = alloc->range_for(tok);
  for (int64_t r = 0; r < alloc->total; ++r) {
    if (r >= lo && r < hi) continue;
    params.w_k.data()[r * 5] += 100.0;
    params.w_v.data()[r * 4] -= 50.0;
  }
  auto after = l3_forward_naive<double>(x, tok, params);
  CHECK(base.values() == after.values());  // bit-identical
}

TEST_CASE("tied mode equals untied initialized with W_V := W_K") {
  Rng rng(15);
  auto alloc = random_alloc(rng, 5, 3);
  auto tied = make_l3_params<double>(alloc, 6, 6, 9, 6, true, rng);

  Rng rng2(99);
  auto untied = make_l3_params<double>(alloc, 6, 6, 9, 6, false, rng2);
  untied.w_k.values() = tied.w_k.values();
  untied.w_v.values() = tied.w_k.values();
  untied.w_up.values() = tied.w_up.values();
  untied.w_mix.values() = tied.w_mix.values();

  auto x = random_rows<double>(rng, 3, 6);
  std::vector<int32_t> toks{4, 0, 4};
  NoGradGuard ng;
  auto a = l3_forward_sorted<double>(x, toks, tied, make_sort_plan(toks, *alloc));
  auto b = l3_forward_sorted<double>(x, toks, untied, make_sort_plan(toks, *alloc));
  CHECK(a.values() == b.values());
  CHECK(tied.parameter_count() + tied.w_k.numel() == untied.parameter_count());
}

TEST_CASE("plan mismatch is rejected") {
  Rng rng(16);
  auto alloc = random_alloc(rng, 5, 2);
  auto params = make_l3_params<float>(alloc, 4, 4, 6, 4, false, rng);
  auto x = random_rows<float>(rng, 3, 4);
  auto plan = make_sort_plan({1, 2, 3}, *alloc);
  std::vector<int32_t> other{1, 2, 2};
  CHECK_THROWS_AS(l3_forward_sorted<float>(x, other, params, plan), Error);
}

TEST_CASE("flops report: paper plug-ins and tiny case") {
  auto r = l3_flops(512, 1024, 512, 4096, 1024);
  CHECK(r.key_scoring == 1048576);
  CHECK(r.softmax == 1536);
  CHECK(r.value_aggregation == 524288);
  CHECK(r.up_projection == 2 * 4096 * 512);
  CHECK(r.mixing == 2 * 1024 * (1024 + 4096));
  CHECK(r.total == r.key_scoring + r.softmax + r.value_aggregation + r.up_projection + r.mixing);
  // the flat-quadratic variant of the mixing term is carried for comparison
  CHECK(r.mixing_embedding_quadratic == 2 * 512 * (512 + 4096));
  CHECK(r.mixing_embedding_quadratic != r.mixing);

  auto tiny = l3_flops(1, 1, 1, 1, 1);
  CHECK(tiny.key_scoring == 2);
  CHECK(tiny.softmax == 3);
  CHECK(tiny.value_aggregation == 2);
  CHECK(tiny.up_projection == 2);
  CHECK(tiny.mixing == 4);
  CHECK(tiny.total == 13);
}

TEST_CASE("flops monotone in d_t up to the cap") {
  const auto capped = l3_flops(64, 256, 256, 384, 256);
  for (int64_t dt = 1; dt <= 64; ++dt)
    CHECK(l3_flops(dt, 256, 256, 384, 256).total <= capped.total);
}

TEST_CASE("expected active params") {
  auto uni = uniform_allocate(10, 3);
  std::vector<int32_t> stream{0, 1, 2, 3, 4};
  auto r = expected_active_l3_params(uni, stream, 8, 6, 12, 8, false);
  CHECK(r.e_dt == doctest::Approx(3.0));
  CHECK(r.embedding_params == doctest::Approx(3.0 * 14));
  CHECK(r.dense_params == 12 * 6 + 8 * (8 + 12) + 8 + 12);

  // stream hitting only cap-wide tokens
  auto mixed = AllocationTable::from_counts({1, 5, 5, 2}, 5);
  auto r2 = expected_active_l3_params(mixed, {1, 2, 1, 2}, 4, 4, 4, 4, true);
  CHECK(r2.e_dt == doctest::Approx(5.0));
  CHECK(r2.embedding_params == doctest::Approx(5.0 * 4));  // tied: one table
}
