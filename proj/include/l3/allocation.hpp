#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "l3/common.hpp"

namespace l3 {

// Dictionary of token tuples -> occurrence counts, insertion-ordered. Single
// tokens are pre-seeded with count 0 so the greedy scan always has a match.
class CodewordCounter {
 public:
  explicit CodewordCounter(int32_t vocab_size);

  int32_t vocab_size() const { return vocab_size_; }
  size_t size() const { return words_.size(); }
  const std::vector<int32_t>& word(size_t i) const { return words_[i]; }
  int64_t count(size_t i) const { return counts_[i]; }
  int64_t count_of(std::span<const int32_t> w) const;
  bool contains(std::span<const int32_t> w) const;

  // Greedy longest-match scan of one token sequence; dictionary grows across
  // calls. Matches the behavior of segmenting at `last = cur` and re-entering
  // the scan one past the novel extension.
  void consume_sequence(std::span<const int32_t> toks);

  // Per-position sliding-suffix variant with the window clamped at the
  // sequence start. Kept for comparison; counts differ from the greedy scan.
  void consume_sequence_per_position(std::span<const int32_t> toks);

  // Sums counts from another counter (parallel sharding support). Codewords
  // unseen locally are appended in the other counter's order. The result is
  // an approximation of a sequential scan.
  void merge_from(const CodewordCounter& other);

  void add(std::span<const int32_t> w, int64_t delta);  // insert-or-bump, tests/generators

 private:
  size_t upsert(std::span<const int32_t> w);  // returns index, inserting with count 0

  int32_t vocab_size_;
  std::vector<std::vector<int32_t>> words_;
  std::vector<int64_t> counts_;
  std::unordered_map<uint64_t, std::vector<size_t>> index_;  // hash -> candidate slots
};

enum class CountVariant { Greedy, PerPosition };

CodewordCounter count_codewords(const std::vector<std::vector<int32_t>>& sequences,
                                int32_t vocab_size, CountVariant variant = CountVariant::Greedy);

// Per-token embedding counts plus prefix-sum bounds; the static router.
struct AllocationTable {
  int32_t vocab_size = 0;
  int64_t total = 0;            // v == sum(d)
  uint32_t cap = 0;             // k; 0 means uncapped
  std::vector<int32_t> d;       // size vocab_size, each in [1, cap]
  std::vector<int64_t> bounds;  // size vocab_size+1, bounds[0]=0, strictly increasing

  int32_t count_for(int32_t token) const { return d[static_cast<size_t>(token)]; }
  std::pair<int64_t, int64_t> range_for(int32_t token) const {
    return {bounds[static_cast<size_t>(token)], bounds[static_cast<size_t>(token) + 1]};
  }
  void validate() const;
  static AllocationTable from_counts(std::vector<int32_t> counts, uint32_t cap);
};

// Greedy grant pass: codewords in descending count order (stable on insertion
// order) each give one embedding to their final token while it is below cap.
AllocationTable allocate(const CodewordCounter& counter, int64_t v, uint32_t k);

AllocationTable uniform_allocate(int32_t vocab_size, int32_t per_token);

struct AllocationStats {
  std::map<int32_t, int64_t> histogram;  // d value -> token count
  int32_t max_d = 0;
  int32_t min_d = 0;
  double mean_d = 0;
  int64_t tokens_at_cap = 0;
  std::vector<std::pair<int64_t, int32_t>> rank_count;  // (rank, d) sorted descending by d
  int64_t worst_case_active_params = 0;                 // k * (d_in + d_emb) when dims given
};

AllocationStats allocation_stats(const AllocationTable& table, int64_t d_in = 0,
                                 int64_t d_emb = 0);

void save_allocation(const AllocationTable& table, const std::string& path);
AllocationTable load_allocation(const std::string& path);

}  // namespace l3
