#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "l3/tokenizer.hpp"

namespace l3 {

// Corpus = directory of .txt files, consumed in filename order. Lines keep
// their trailing newline, mirroring how the allocation counter walks them.

std::vector<std::string> list_corpus_files(const std::string& dir);

std::string read_file(const std::string& path);

std::vector<std::string> read_lines(const std::string& path);

// Reads up to max_bytes from the corpus head (tokenizer training sample).
std::string read_corpus_sample(const std::string& dir, int64_t max_bytes);

// Encodes every line of every file and concatenates; newlines stay inside
// the lines, so they act as the document/record separator in the stream.
// Parallel over lines; output order is the file/line order.
std::vector<int32_t> tokenize_corpus(const Tokenizer& tok, const std::string& dir,
                                     int64_t max_tokens = -1);

// Same encoding but kept line-per-sequence, the shape count_codewords wants.
std::vector<std::vector<int32_t>> tokenize_corpus_lines(const Tokenizer& tok,
                                                        const std::string& dir,
                                                        int64_t max_lines = -1);

// Cached variant: stores the token stream next to `cache_path` ("L3TS" file)
// keyed by tokenizer+corpus fingerprints and re-reads it when they match.
std::vector<int32_t> tokenize_corpus_cached(const Tokenizer& tok, const std::string& dir,
                                            const std::string& cache_path);

// Splits a stream into train/validation; the validation tail is never
// shuffled into training.
struct SplitStream {
  std::vector<int32_t> train;
  std::vector<int32_t> val;
};
SplitStream split_stream(std::vector<int32_t> stream, double val_fraction);

// Deterministic synthetic text: a Zipfian word-level Markov chain with
// syllabic word shapes. Gives BPE natural merge structure and gives the
// token-conditioned layers real per-token statistics to learn.
struct SyntheticCorpusConfig {
  int64_t total_bytes = 8 << 20;
  int num_files = 8;
  uint64_t seed = 1234;
  int word_types = 4000;
  int successors_per_word = 24;   // Markov fan-out
  double zipf_exponent = 1.05;
  double noise_fraction = 0.08;   // words drawn from the unigram instead of the chain
};

void generate_synthetic_corpus(const std::string& dir, const SyntheticCorpusConfig& cfg);

// Raw Zipf-distributed token-id stream, for allocation experiments.
std::vector<int32_t> zipf_token_stream(int64_t n, int32_t vocab_size, double exponent,
                                       uint64_t seed);

}  // namespace l3
