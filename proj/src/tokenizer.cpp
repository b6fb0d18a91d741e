#include "l3/tokenizer.hpp"

#include <algorithm>
#include <queue>

#include "l3/serialize.hpp"

namespace l3 {

namespace {
constexpr char kMagic[4] = {'L', '3', 'T', 'K'};
constexpr uint32_t kVersion = 1;

inline uint64_t pair_key(int32_t a, int32_t b) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b);
}
}  // namespace

Tokenizer Tokenizer::byte_level() {
  Tokenizer t;
  t.vocab_.reserve(256);
  for (int i = 0; i < 256; ++i) t.vocab_.push_back(std::string(1, static_cast<char>(i)));
  return t;
}

void Tokenizer::rebuild_rank_index() {
  pair_rank_.clear();
  pair_rank_.reserve(merges_.size() * 2);
  for (size_t i = 0; i < merges_.size(); ++i)
    pair_rank_[pair_key(merges_[i].first, merges_[i].second)] = static_cast<int32_t>(i);
}

Tokenizer Tokenizer::train_bpe(std::string_view corpus, int32_t target_vocab) {
  check(target_vocab >= 256, ErrorKind::Config, "target vocab below byte coverage (256)");
  check(!corpus.empty(), ErrorKind::Config, "bpe_train: empty corpus");

  Tokenizer tok = byte_level();
  std::vector<int32_t> seq(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) seq[i] = static_cast<uint8_t>(corpus[i]);

  std::unordered_map<uint64_t, int64_t> counts;
  while (tok.vocab_size() < target_vocab) {
    counts.clear();
    for (size_t i = 0; i + 1 < seq.size(); ++i) ++counts[pair_key(seq[i], seq[i + 1])];

    uint64_t best_key = 0;
    int64_t best_count = 0;
    for (const auto& [key, c] : counts) {
      if (c > best_count || (c == best_count && key < best_key)) {
        best_count = c;
        best_key = key;
      }
    }
    if (best_count < 2) break;  // no pair repeats

    const int32_t left = static_cast<int32_t>(best_key >> 32);
    const int32_t right = static_cast<int32_t>(best_key & 0xffffffffu);
    const int32_t merged = tok.vocab_size();
    tok.vocab_.push_back(tok.vocab_[left] + tok.vocab_[right]);
    tok.merges_.emplace_back(left, right);

    // rewrite in place, leftmost-first non-overlapping
    size_t w = 0;
    for (size_t r = 0; r < seq.size();) {
      if (r + 1 < seq.size() && seq[r] == left && seq[r + 1] == right) {
        seq[w++] = merged;
        r += 2;
      } else {
        seq[w++] = seq[r++];
      }
    }
    seq.resize(w);
  }
  tok.rebuild_rank_index();
  return tok;
}

std::vector<int32_t> Tokenizer::encode(std::string_view text) const {
  const size_t n = text.size();
  std::vector<int32_t> id(n);
  if (n == 0) return id;
  for (size_t i = 0; i < n; ++i) id[i] = static_cast<uint8_t>(text[i]);
  if (merges_.empty()) return id;

  // Linked-list merge with a min-heap over (rank, position): always applies
  // the earliest-trained mergeable pair, leftmost occurrence first, which
  // reproduces the order merges were applied during training.
  std::vector<int64_t> prev(n), next(n);
  std::vector<char> alive(n, 1);
  for (size_t i = 0; i < n; ++i) {
    prev[i] = static_cast<int64_t>(i) - 1;
    next[i] = (i + 1 < n) ? static_cast<int64_t>(i + 1) : -1;
  }

  using Cand = std::pair<int32_t, int64_t>;  // (rank, left position)
  std::priority_queue<Cand, std::vector<Cand>, std::greater<>> heap;
  auto push_pair = [&](int64_t pos) {
    const int64_t nx = next[pos];
    if (nx < 0) return;
    auto it = pair_rank_.find(pair_key(id[pos], id[nx]));
    if (it != pair_rank_.end()) heap.emplace(it->second, pos);
  };
  for (size_t i = 0; i + 1 < n; ++i) push_pair(static_cast<int64_t>(i));

  while (!heap.empty()) {
    auto [rank, pos] = heap.top();
    heap.pop();
    if (!alive[pos]) continue;
    const int64_t nx = next[pos];
    if (nx < 0 || !alive[nx]) continue;
    const auto& m = merges_[static_cast<size_t>(rank)];
    if (id[pos] != m.first || id[nx] != m.second) continue;  // stale candidate

    id[pos] = 256 + rank;
    alive[nx] = 0;
    next[pos] = next[nx];
    if (next[nx] >= 0) prev[next[nx]] = pos;
    if (prev[pos] >= 0) push_pair(prev[pos]);
    push_pair(pos);
  }

  std::vector<int32_t> out;
  out.reserve(n / 2);
  for (int64_t i = 0; i >= 0; i = next[i])
    if (alive[i]) out.push_back(id[i]);
  return out;
}

std::string Tokenizer::decode(std::span<const int32_t> ids) const {
  std::string out;
  for (int32_t t : ids) {
    check(t >= 0 && t < vocab_size(), ErrorKind::Index, "decode: token id out of range");
    out += vocab_[static_cast<size_t>(t)];
  }
  return out;
}

void Tokenizer::save(const std::string& path) const {
  BinaryWriter w(path);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(vocab_.size()));
  for (const auto& v : vocab_) w.str(v);
  w.u32(static_cast<uint32_t>(merges_.size()));
  for (const auto& [a, b] : merges_) {
    w.u32(static_cast<uint32_t>(a));
    w.u32(static_cast<uint32_t>(b));
  }
  w.close();
}

Tokenizer Tokenizer::load(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kMagic);
  const uint32_t version = r.u32();
  check(version == kVersion, ErrorKind::Format, "unsupported tokenizer version");
  const uint32_t vs = r.u32();
  check(vs >= 256 && vs <= (1u << 24), ErrorKind::Format, "implausible vocab size");
  Tokenizer tok;
  tok.vocab_.reserve(vs);
  for (uint32_t i = 0; i < vs; ++i) tok.vocab_.push_back(r.str(1u << 20));
  for (int i = 0; i < 256; ++i)
    check(tok.vocab_[static_cast<size_t>(i)] == std::string(1, static_cast<char>(i)),
          ErrorKind::Format, "vocab does not start with the byte alphabet");
  const uint32_t nm = r.u32();
  check(nm == vs - 256, ErrorKind::Format, "merge count does not match vocab size");
  for (uint32_t i = 0; i < nm; ++i) {
    const int32_t a = static_cast<int32_t>(r.u32());
    const int32_t b = static_cast<int32_t>(r.u32());
    const int32_t merged = static_cast<int32_t>(256 + i);
    check(a >= 0 && a < merged && b >= 0 && b < merged, ErrorKind::Format,
          "merge references a later token");
    check(tok.vocab_[static_cast<size_t>(merged)] ==
              tok.vocab_[static_cast<size_t>(a)] + tok.vocab_[static_cast<size_t>(b)],
          ErrorKind::Format, "merge bytes disagree with vocab entry");
    tok.merges_.emplace_back(a, b);
  }
  tok.rebuild_rank_index();
  return tok;
}

}  // namespace l3
