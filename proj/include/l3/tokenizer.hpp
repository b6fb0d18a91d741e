#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "l3/common.hpp"

namespace l3 {

// Byte-level BPE. Ids [0,256) are the raw bytes; each merge appends one id.
// No pre-tokenization: merges are learned over the raw byte stream, so
// decode(encode(s)) == s for arbitrary bytes. Immutable after construction;
// encode/decode are safe to call from many threads.
class Tokenizer {
 public:
  // Identity byte tokenizer (vocab 256, no merges).
  static Tokenizer byte_level();

  // Greedy pair-merge training over `corpus` until vocab reaches target_vocab
  // or no adjacent pair occurs twice. Ties break toward the smaller (left,
  // right) id pair. target_vocab must be >= 256; an empty corpus is an error.
  static Tokenizer train_bpe(std::string_view corpus, int32_t target_vocab);

  std::vector<int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const int32_t> ids) const;

  int32_t vocab_size() const { return static_cast<int32_t>(vocab_.size()); }
  const std::vector<std::string>& vocab() const { return vocab_; }
  const std::vector<std::pair<int32_t, int32_t>>& merges() const { return merges_; }

  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);

 private:
  Tokenizer() = default;
  void rebuild_rank_index();

  std::vector<std::string> vocab_;
  std::vector<std::pair<int32_t, int32_t>> merges_;
  std::unordered_map<uint64_t, int32_t> pair_rank_;  // (left<<32|right) -> merge index
};

}  // namespace l3
