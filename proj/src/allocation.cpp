#include "l3/allocation.hpp"

#include <algorithm>
#include <numeric>

#include "l3/serialize.hpp"

namespace l3 {

namespace {

constexpr char kMagic[4] = {'L', '3', 'A', 'L'};
constexpr uint32_t kVersion = 1;

uint64_t hash_word(std::span<const int32_t> w) {
  uint64_t h = 1469598103934665603ull;
  for (int32_t t : w) {
    h ^= static_cast<uint32_t>(t);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

CodewordCounter::CodewordCounter(int32_t vocab_size) : vocab_size_(vocab_size) {
  check(vocab_size > 0, ErrorKind::Config, "vocab size must be positive");
  words_.reserve(static_cast<size_t>(vocab_size) * 2);
  counts_.reserve(static_cast<size_t>(vocab_size) * 2);
  for (int32_t t = 0; t < vocab_size; ++t) {
    words_.push_back({t});
    counts_.push_back(0);
    index_[hash_word(words_.back())].push_back(words_.size() - 1);
  }
}

size_t CodewordCounter::upsert(std::span<const int32_t> w) {
  const uint64_t h = hash_word(w);
  auto& slots = index_[h];
  for (size_t s : slots) {
    if (words_[s].size() == w.size() && std::equal(w.begin(), w.end(), words_[s].begin()))
      return s;
  }
  words_.emplace_back(w.begin(), w.end());
  counts_.push_back(0);
  slots.push_back(words_.size() - 1);
  return words_.size() - 1;
}

bool CodewordCounter::contains(std::span<const int32_t> w) const {
  auto it = index_.find(hash_word(w));
  if (it == index_.end()) return false;
  for (size_t s : it->second)
    if (words_[s].size() == w.size() && std::equal(w.begin(), w.end(), words_[s].begin()))
      return true;
  return false;
}

int64_t CodewordCounter::count_of(std::span<const int32_t> w) const {
  auto it = index_.find(hash_word(w));
  if (it == index_.end()) return -1;
  for (size_t s : it->second)
    if (words_[s].size() == w.size() && std::equal(w.begin(), w.end(), words_[s].begin()))
      return counts_[s];
  return -1;
}

void CodewordCounter::add(std::span<const int32_t> w, int64_t delta) {
  counts_[upsert(w)] += delta;
}

void CodewordCounter::consume_sequence(std::span<const int32_t> toks) {
  for (int32_t t : toks)
    check(t >= 0 && t < vocab_size_, ErrorKind::Index, "token id out of vocab range");
  const int64_t n = static_cast<int64_t>(toks.size());
  int64_t last = 0;
  int64_t cur = 1;
  while (cur < n) {
    while (cur < n && contains(toks.subspan(last, cur - last))) ++cur;
    if (cur > last + 1) {
      counts_[upsert(toks.subspan(last, cur - 1 - last))] += 1;
      const size_t novel = upsert(toks.subspan(last, cur - last));
      counts_[novel] = 1;
    }
    last = cur;
    cur += 1;
  }
}

void CodewordCounter::consume_sequence_per_position(std::span<const int32_t> toks) {
  for (int32_t t : toks)
    check(t >= 0 && t < vocab_size_, ErrorKind::Index, "token id out of vocab range");
  const int64_t n = static_cast<int64_t>(toks.size());
  for (int64_t i = 0; i < n; ++i) {
    int64_t j = 0;
    while (i - j >= 0 && contains(toks.subspan(i - j, j + 1))) ++j;
    // window [i-j+1, i] is the longest known suffix ending at i
    counts_[upsert(toks.subspan(i - j + 1, j))] += 1;
    if (i - j >= 0) counts_[upsert(toks.subspan(i - j, j + 1))] = 1;
  }
}

void CodewordCounter::merge_from(const CodewordCounter& other) {
  check(other.vocab_size_ == vocab_size_, ErrorKind::Config, "vocab size mismatch in merge");
  for (size_t i = 0; i < other.words_.size(); ++i)
    if (other.counts_[i] != 0) counts_[upsert(other.words_[i])] += other.counts_[i];
}

CodewordCounter count_codewords(const std::vector<std::vector<int32_t>>& sequences,
                                int32_t vocab_size, CountVariant variant) {
  CodewordCounter counter(vocab_size);
  for (const auto& seq : sequences) {
    if (variant == CountVariant::Greedy)
      counter.consume_sequence(seq);
    else
      counter.consume_sequence_per_position(seq);
  }
  return counter;
}

void AllocationTable::validate() const {
  check(vocab_size > 0, ErrorKind::Invariant, "allocation: empty vocab");
  check(static_cast<int64_t>(d.size()) == vocab_size, ErrorKind::Invariant,
        "allocation: d length != vocab size");
  check(static_cast<int64_t>(bounds.size()) == vocab_size + 1, ErrorKind::Invariant,
        "allocation: bounds length != vocab size + 1");
  check(bounds[0] == 0, ErrorKind::Invariant, "allocation: bounds must start at 0");
  int64_t sum = 0;
  for (int32_t t = 0; t < vocab_size; ++t) {
    const int32_t dt = d[static_cast<size_t>(t)];
    check(dt >= 1, ErrorKind::Invariant, "allocation: every token needs >= 1 embedding");
    check(cap == 0 || dt <= static_cast<int32_t>(cap), ErrorKind::Invariant,
          "allocation: count exceeds cap");
    sum += dt;
    check(bounds[static_cast<size_t>(t) + 1] == bounds[static_cast<size_t>(t)] + dt,
          ErrorKind::Invariant, "allocation: bounds are not the prefix sums of d");
  }
  check(sum == total, ErrorKind::Invariant, "allocation: sum(d) != v");
}

AllocationTable AllocationTable::from_counts(std::vector<int32_t> counts, uint32_t cap) {
  AllocationTable t;
  t.vocab_size = static_cast<int32_t>(counts.size());
  t.cap = cap;
  t.d = std::move(counts);
  t.bounds.resize(t.d.size() + 1);
  t.bounds[0] = 0;
  for (size_t i = 0; i < t.d.size(); ++i) t.bounds[i + 1] = t.bounds[i] + t.d[i];
  t.total = t.bounds.back();
  t.validate();
  return t;
}

AllocationTable allocate(const CodewordCounter& counter, int64_t v, uint32_t k) {
  const int32_t vocab = counter.vocab_size();
  check(v >= vocab, ErrorKind::Config, "target embedding count below one per token");
  check(k == 0 || k >= 1, ErrorKind::Config, "cap must be >= 1");

  // Stable descending sort over insertion order resolves count ties the same
  // way a stable sort over an insertion-ordered dict would.
  std::vector<size_t> order(counter.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return counter.count(a) > counter.count(b); });

  std::vector<int32_t> d(static_cast<size_t>(vocab), 1);
  int64_t granted = vocab;
  size_t i = 0;
  while (granted < v) {
    check(i < order.size(), ErrorKind::Infeasible,
          "not enough codewords to reach the target embedding count under this cap");
    const auto& w = counter.word(order[i]);
    const int32_t t = w.back();
    if (k == 0 || d[static_cast<size_t>(t)] < static_cast<int32_t>(k)) {
      d[static_cast<size_t>(t)] += 1;
      granted += 1;
    }
    i += 1;
  }
  return AllocationTable::from_counts(std::move(d), k);
}

AllocationTable uniform_allocate(int32_t vocab_size, int32_t per_token) {
  check(per_token >= 1, ErrorKind::Config, "per-token count must be >= 1");
  return AllocationTable::from_counts(
      std::vector<int32_t>(static_cast<size_t>(vocab_size), per_token),
      static_cast<uint32_t>(per_token));
}

AllocationStats allocation_stats(const AllocationTable& table, int64_t d_in, int64_t d_emb) {
  table.validate();
  AllocationStats s;
  s.max_d = *std::max_element(table.d.begin(), table.d.end());
  s.min_d = *std::min_element(table.d.begin(), table.d.end());
  double sum = 0;
  for (int32_t dt : table.d) {
    ++s.histogram[dt];
    sum += dt;
    if (table.cap != 0 && dt == static_cast<int32_t>(table.cap)) ++s.tokens_at_cap;
  }
  s.mean_d = sum / static_cast<double>(table.vocab_size);

  std::vector<int32_t> sorted = table.d;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  s.rank_count.reserve(sorted.size());
  for (size_t r = 0; r < sorted.size(); ++r)
    s.rank_count.emplace_back(static_cast<int64_t>(r) + 1, sorted[r]);

  if (d_in > 0 && d_emb > 0) {
    const int64_t k = table.cap != 0 ? table.cap : s.max_d;
    s.worst_case_active_params = k * (d_in + d_emb);
  }
  return s;
}

void save_allocation(const AllocationTable& table, const std::string& path) {
  table.validate();
  BinaryWriter w(path);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(table.vocab_size));
  w.u64(static_cast<uint64_t>(table.total));
  w.u32(table.cap);
  w.vec(table.d);
  w.close();
}

AllocationTable load_allocation(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kMagic);
  check(r.u32() == kVersion, ErrorKind::Format, "unsupported allocation file version");
  const uint32_t vocab = r.u32();
  check(vocab > 0 && vocab <= (1u << 24), ErrorKind::Format, "implausible vocab size");
  const int64_t v = static_cast<int64_t>(r.u64());
  const uint32_t cap = r.u32();
  std::vector<int32_t> d;
  r.vec(d, vocab);
  AllocationTable t;
  t.vocab_size = static_cast<int32_t>(vocab);
  t.total = v;
  t.cap = cap;
  t.d = std::move(d);
  t.bounds.resize(t.d.size() + 1);
  t.bounds[0] = 0;
  for (size_t i = 0; i < t.d.size(); ++i) t.bounds[i + 1] = t.bounds[i] + t.d[i];
  t.validate();
  return t;
}

}  // namespace l3
