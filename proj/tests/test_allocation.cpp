#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "l3/allocation.hpp"
#include "l3/corpus.hpp"
#include "l3/rng.hpp"
#include "support/lzw_reference.hpp"

using namespace l3;

namespace {

std::vector<std::pair<std::vector<int32_t>, int64_t>> counter_items(const CodewordCounter& c) {
  std::vector<std::pair<std::vector<int32_t>, int64_t>> out;
  for (size_t i = 0; i < c.size(); ++i) out.emplace_back(c.word(i), c.count(i));
  return out;
}

}  // namespace

TEST_CASE("codeword counting reproduces the hand trace on [0,1,0,1,0,1]") {
  auto c = count_codewords({{0, 1, 0, 1, 0, 1}}, 2);
  CHECK(c.count_of(std::vector<int32_t>{0}) == 1);
  CHECK(c.count_of(std::vector<int32_t>{1}) == 0);
  CHECK(c.count_of(std::vector<int32_t>{0, 1}) == 2);
  CHECK(c.count_of(std::vector<int32_t>{0, 1, 0}) == 1);
  CHECK(c.size() == 4);  // two singles + two discovered codewords
}

TEST_CASE("codeword counting edge cases") {
  // empty stream: all singles at zero
  auto c0 = count_codewords({}, 3);
  CHECK(c0.size() == 3);
  for (size_t i = 0; i < 3; ++i) CHECK(c0.count(i) == 0);

  // single-token sequence: the scan body never fires
  auto c1 = count_codewords({{5}}, 8);
  CHECK(c1.size() == 8);
  for (size_t i = 0; i < 8; ++i) CHECK(c1.count(i) == 0);

  // out-of-range token
  CHECK_THROWS_AS(count_codewords({{7}}, 4), Error);
}

TEST_CASE("dictionary persists across lines within a run") {
  auto one_line = count_codewords({{0, 1, 0, 1}}, 2);
  auto two_lines = count_codewords({{0, 1}, {0, 1}}, 2);
  // the second line extends the dictionary the first line built
  CHECK(two_lines.count_of(std::vector<int32_t>{0, 1}) == 1);
  CHECK(one_line.count_of(std::vector<int32_t>{0, 1}) == 1);
}

TEST_CASE("counting matches the straight-line reference on constructed corpora") {
  const std::vector<std::pair<std::vector<std::vector<int32_t>>, int32_t>> cases = {
      {{{0, 1, 0, 1, 0, 1}}, 2},
      {{{0, 0, 0, 0, 0, 0, 0, 0}}, 2},
      {{{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2}}, 3},
      {{{1, 1, 2, 2, 1, 1, 2, 2, 1, 1}, {2, 2, 1, 1, 2, 2}}, 3},
      {{{3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9, 3, 2, 3, 8, 4, 6, 2, 6, 4}}, 10},
  };
  for (const auto& [lines, vocab] : cases) {
    auto ours = count_codewords(lines, vocab);
    auto ref = lzw_ref::count(lines, vocab);
    REQUIRE(ours.size() == ref.keys.size());
    for (size_t i = 0; i < ref.keys.size(); ++i) {
      CHECK(ours.word(i) == ref.keys[i]);  // same insertion order
      CHECK(ours.count(i) == ref.counts[i]);
    }
  }
}

TEST_CASE("counting matches the reference on a zipfian stream, exactly") {
  const int32_t vocab = 64;
  auto stream = zipf_token_stream(20000, vocab, 1.1, 99);
  // chop into lines of 40 tokens
  std::vector<std::vector<int32_t>> lines;
  for (size_t i = 0; i + 40 <= stream.size(); i += 40)
    lines.emplace_back(stream.begin() + static_cast<int64_t>(i),
                       stream.begin() + static_cast<int64_t>(i + 40));
  auto ours = count_codewords(lines, vocab);
  auto ref = lzw_ref::count(lines, vocab);
  REQUIRE(ours.size() == ref.keys.size());
  for (size_t i = 0; i < ref.keys.size(); ++i) {
    REQUIRE(ours.word(i) == ref.keys[i]);
    REQUIRE(ours.count(i) == ref.counts[i]);
  }
}

TEST_CASE("allocate: worked example, v=4, k=2") {
  auto c = count_codewords({{0, 1, 0, 1, 0, 1}}, 2);
  auto table = allocate(c, 4, 2);
  CHECK(table.d == std::vector<int32_t>{2, 2});
  CHECK(table.bounds == std::vector<int64_t>{0, 2, 4});
  CHECK(table.total == 4);
}

TEST_CASE("allocate: v equals vocab gives the all-ones table") {
  auto c = count_codewords({{0, 1, 0, 1}}, 2);
  auto t = allocate(c, 2, 5);
  CHECK(t.d == std::vector<int32_t>{1, 1});
}

TEST_CASE("allocate: k=1 feasible only at v == vocab") {
  auto c = count_codewords({{0, 1, 0, 1, 0, 1}}, 2);
  CHECK(allocate(c, 2, 1).total == 2);
  CHECK_THROWS_AS(allocate(c, 3, 1), Error);
  try {
    allocate(c, 3, 1);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Infeasible);
  }
}

TEST_CASE("allocate: v below vocab is a config error") {
  auto c = count_codewords({{0, 1}}, 2);
  CHECK_THROWS_AS(allocate(c, 1, 4), Error);
}

TEST_CASE("uniform allocation") {
  auto t = uniform_allocate(10, 4);
  CHECK(t.total == 40);
  CHECK(t.cap == 4);
  for (int32_t i = 0; i < 10; ++i) {
    CHECK(t.d[static_cast<size_t>(i)] == 4);
    CHECK(t.bounds[static_cast<size_t>(i)] == 4 * i);
  }
  // per_token 1 coincides with the initial allocation
  auto c = count_codewords({{0, 1, 2}}, 3);
  CHECK(uniform_allocate(3, 1).d == allocate(c, 3, 1).d);
}

TEST_CASE("allocation property trials: invariants hold for random counters") {
  Rng rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const int32_t vocab = 2 + static_cast<int32_t>(rng.below(30));
    const int64_t len = 10 + static_cast<int64_t>(rng.below(400));
    std::vector<std::vector<int32_t>> lines(1);
    for (int64_t i = 0; i < len; ++i)
      lines[0].push_back(static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab))));
    auto c = count_codewords(lines, vocab);

    const uint32_t k = 1 + static_cast<uint32_t>(rng.below(6));
    // max feasible grants under this cap
    std::vector<int64_t> per_token(static_cast<size_t>(vocab), 1);
    int64_t feasible = vocab;
    for (size_t i = 0; i < c.size(); ++i) {
      const int32_t t = c.word(i).back();
      if (per_token[static_cast<size_t>(t)] < k) {
        ++per_token[static_cast<size_t>(t)];
        ++feasible;
      }
    }
    const int64_t v = vocab + static_cast<int64_t>(rng.below(
                                  static_cast<uint64_t>(feasible - vocab + 1)));
    auto table = allocate(c, v, k);
    table.validate();  // throws on any invariant breach
    CHECK(table.total == v);
    CHECK(*std::max_element(table.d.begin(), table.d.end()) <= static_cast<int32_t>(k));

    // reference grant loop agrees exactly
    auto ref = lzw_ref::grant(lzw_ref::count(lines, vocab), vocab, v, k);
    REQUIRE(!ref.empty());
    CHECK(table.d == ref);
  }
}

TEST_CASE("dictionary growth bound") {
  Rng rng(5);
  const int32_t vocab = 16;
  std::vector<std::vector<int32_t>> lines;
  int64_t positions = 0;
  for (int l = 0; l < 20; ++l) {
    lines.emplace_back();
    for (int i = 0; i < 100; ++i)
      lines.back().push_back(static_cast<int32_t>(rng.below(vocab)));
    positions += 100;
  }
  auto c = count_codewords(lines, vocab);
  CHECK(static_cast<int64_t>(c.size()) <= positions + vocab);
}

TEST_CASE("grant order is monotone in codeword counts") {
  // all codewords ending in token 1 outrank those ending in token 2
  CodewordCounter c(3);
  c.add(std::vector<int32_t>{0, 1}, 100);
  c.add(std::vector<int32_t>{2, 1}, 90);
  c.add(std::vector<int32_t>{0, 2}, 10);
  c.add(std::vector<int32_t>{1, 2}, 5);
  for (int64_t v = 3; v <= 7; ++v) {
    auto t = allocate(c, v, 8);
    CHECK(t.d[1] >= t.d[2]);
  }
}

TEST_CASE("uncapped allocation exceeds the capped maximum on a zipf corpus") {
  const int32_t vocab = 256;
  auto stream = zipf_token_stream(200000, vocab, 1.15, 31);
  std::vector<std::vector<int32_t>> lines;
  for (size_t i = 0; i + 64 <= stream.size(); i += 64)
    lines.emplace_back(stream.begin() + static_cast<int64_t>(i),
                       stream.begin() + static_cast<int64_t>(i + 64));
  auto c = count_codewords(lines, vocab);
  const int64_t v = 8 * vocab;
  auto capped = allocate(c, v, 16);
  auto uncapped = allocate(c, v, 0);
  const int32_t capped_max = *std::max_element(capped.d.begin(), capped.d.end());
  const int32_t uncapped_max = *std::max_element(uncapped.d.begin(), uncapped.d.end());
  CHECK(capped_max == 16);
  CHECK(uncapped_max > capped_max);
}

TEST_CASE("per-position variant differs from the greedy scan") {
  const std::vector<std::vector<int32_t>> lines{{0, 1, 0, 1, 0, 1, 0, 1}};
  auto greedy = count_codewords(lines, 2, CountVariant::Greedy);
  auto per_pos = count_codewords(lines, 2, CountVariant::PerPosition);
  CHECK(counter_items(greedy) != counter_items(per_pos));
  // every multi-token codeword has its immediate prefix present, both variants
  for (const auto* c : {&greedy, &per_pos}) {
    for (size_t i = 0; i < c->size(); ++i) {
      const auto& w = c->word(i);
      if (w.size() > 1)
        CHECK(c->contains(std::span<const int32_t>(w.data(), w.size() - 1)));
    }
  }
}

TEST_CASE("parallel merge approximates sequential counting") {
  auto stream = zipf_token_stream(4000, 32, 1.1, 77);
  std::vector<std::vector<int32_t>> a, b;
  for (size_t i = 0; i + 50 <= stream.size(); i += 50) {
    auto& dst = (i / 50) % 2 == 0 ? a : b;
    dst.emplace_back(stream.begin() + static_cast<int64_t>(i),
                     stream.begin() + static_cast<int64_t>(i + 50));
  }
  auto ca = count_codewords(a, 32);
  auto cb = count_codewords(b, 32);
  ca.merge_from(cb);
  int64_t total = 0;
  for (size_t i = 0; i < ca.size(); ++i) total += ca.count(i);
  CHECK(total > 0);
}

TEST_CASE("allocation stats") {
  auto uni = uniform_allocate(10, 4);
  auto s = allocation_stats(uni, 256, 256);
  CHECK(s.histogram.at(4) == 10);
  CHECK(s.max_d == 4);
  CHECK(s.min_d == 4);
  CHECK(s.mean_d == doctest::Approx(4.0));
  CHECK(s.tokens_at_cap == 10);
  CHECK(s.worst_case_active_params == 4 * (256 + 256));

  auto t = AllocationTable::from_counts({1, 2, 3}, 3);
  auto s2 = allocation_stats(t);
  CHECK(s2.mean_d == doctest::Approx(2.0));
  CHECK(t.bounds == std::vector<int64_t>{0, 1, 3, 6});
  CHECK(s2.rank_count.front().second == 3);
}

TEST_CASE("allocation file round trip and corruption handling") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "l3_alloc_test";
  fs::create_directories(dir);
  const std::string path = (dir / "a.bin").string();

  auto c = count_codewords({{0, 1, 0, 1, 0, 1, 2, 2, 2, 0}}, 3);
  auto t = allocate(c, 7, 4);
  save_allocation(t, path);
  auto back = load_allocation(path);
  CHECK(back.d == t.d);
  CHECK(back.bounds == t.bounds);
  CHECK(back.cap == t.cap);
  CHECK(back.total == t.total);

  // truncation
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(path + ".trunc", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
  }
  CHECK_THROWS_AS(load_allocation(path + ".trunc"), Error);
  try {
    load_allocation(path + ".trunc");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Format);
  }

  // stored v disagreeing with the counts is an invariant error
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes[12] = static_cast<char>(bytes[12] + 1);  // low byte of v
    std::ofstream out(path + ".badv", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  try {
    load_allocation(path + ".badv");
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Invariant);
  }

  // bad magic
  {
    std::ofstream out(path + ".magic", std::ios::binary);
    out << "NOPE00000000";
  }
  CHECK_THROWS_AS(load_allocation(path + ".magic"), Error);
}
