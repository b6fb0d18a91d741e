#pragma once

// Straight-line reference for the codeword counter and the grant loop,
// written as a direct transliteration of the dictionary-scan pseudocode and
// kept independent of the production implementation on purpose: the tests
// compare the two for exact equality.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <vector>

namespace lzw_ref {

struct Counter {
  // insertion-ordered association list
  std::vector<std::vector<int32_t>> keys;
  std::vector<int64_t> counts;

  int64_t find(const std::vector<int32_t>& k) const {
    for (size_t i = 0; i < keys.size(); ++i)
      if (keys[i] == k) return static_cast<int64_t>(i);
    return -1;
  }
  bool contains(const std::vector<int32_t>& k) const { return find(k) >= 0; }
  void assign(const std::vector<int32_t>& k, int64_t v) {
    const int64_t i = find(k);
    if (i >= 0)
      counts[static_cast<size_t>(i)] = v;
    else {
      keys.push_back(k);
      counts.push_back(v);
    }
  }
  void bump(const std::vector<int32_t>& k) {
    const int64_t i = find(k);
    if (i >= 0)
      counts[static_cast<size_t>(i)] += 1;
    else {
      keys.push_back(k);
      counts.push_back(1);
    }
  }
};

inline Counter count(const std::vector<std::vector<int32_t>>& lines, int32_t vocab) {
  Counter c;
  for (int32_t s = 0; s < vocab; ++s) c.assign({s}, 0);
  for (const auto& toks : lines) {
    size_t last = 0;
    size_t cur = 1;
    while (cur < toks.size()) {
      while (cur < toks.size() &&
             c.contains(std::vector<int32_t>(toks.begin() + static_cast<int64_t>(last),
                                             toks.begin() + static_cast<int64_t>(cur))))
        cur += 1;
      if (cur > last + 1) {
        c.bump(std::vector<int32_t>(toks.begin() + static_cast<int64_t>(last),
                                    toks.begin() + static_cast<int64_t>(cur) - 1));
        c.assign(std::vector<int32_t>(toks.begin() + static_cast<int64_t>(last),
                                      toks.begin() + static_cast<int64_t>(cur)),
                 1);
      }
      last = cur;
      cur += 1;
    }
  }
  return c;
}

// descending stable sort on counts, then one grant per codeword to its final
// token while below cap; k == 0 means uncapped
inline std::vector<int32_t> grant(const Counter& c, int32_t vocab, int64_t target, uint32_t k) {
  std::vector<size_t> order(c.keys.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return c.counts[a] > c.counts[b]; });
  std::vector<int32_t> alloc(static_cast<size_t>(vocab), 1);
  int64_t granted = vocab;
  size_t i = 0;
  while (granted < target) {
    if (i >= order.size()) return {};  // infeasible
    const int32_t t = c.keys[order[i]].back();
    if (k == 0 || alloc[static_cast<size_t>(t)] < static_cast<int32_t>(k)) {
      alloc[static_cast<size_t>(t)] += 1;
      granted += 1;
    }
    i += 1;
  }
  return alloc;
}

}  // namespace lzw_ref
