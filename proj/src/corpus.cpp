#include "l3/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "l3/rng.hpp"
#include "l3/serialize.hpp"

namespace fs = std::filesystem;

namespace l3 {

std::vector<std::string> list_corpus_files(const std::string& dir) {
  check(fs::is_directory(dir), ErrorKind::Io, "corpus directory not found: " + dir);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  check(!files.empty(), ErrorKind::Io, "no .txt files in corpus directory: " + dir);
  return files;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), ErrorKind::Io, "cannot open: " + path);
  std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return s;
}

std::vector<std::string> read_lines(const std::string& path) {
  const std::string all = read_file(path);
  std::vector<std::string> lines;
  size_t start = 0;
  while (start < all.size()) {
    size_t nl = all.find('\n', start);
    if (nl == std::string::npos) {
      lines.push_back(all.substr(start));
      break;
    }
    lines.push_back(all.substr(start, nl - start + 1));  // keep the newline
    start = nl + 1;
  }
  return lines;
}

std::string read_corpus_sample(const std::string& dir, int64_t max_bytes) {
  std::string sample;
  for (const auto& f : list_corpus_files(dir)) {
    if (static_cast<int64_t>(sample.size()) >= max_bytes) break;
    const std::string content = read_file(f);
    const int64_t room = max_bytes - static_cast<int64_t>(sample.size());
    sample.append(content, 0, static_cast<size_t>(std::min<int64_t>(room, content.size())));
  }
  check(!sample.empty(), ErrorKind::Io, "corpus is empty: " + dir);
  return sample;
}

namespace {

template <typename PerLine>
void for_each_corpus_line(const std::string& dir, PerLine&& fn) {
  for (const auto& f : list_corpus_files(dir)) {
    for (auto& line : read_lines(f))
      if (!fn(std::move(line))) return;
  }
}

}  // namespace

std::vector<int32_t> tokenize_corpus(const Tokenizer& tok, const std::string& dir,
                                     int64_t max_tokens) {
  std::vector<std::string> lines;
  for_each_corpus_line(dir, [&](std::string line) {
    lines.push_back(std::move(line));
    return true;
  });
  std::vector<std::vector<int32_t>> encoded(lines.size());
#pragma omp parallel for schedule(dynamic, 256)
  for (int64_t i = 0; i < static_cast<int64_t>(lines.size()); ++i)
    encoded[static_cast<size_t>(i)] = tok.encode(lines[static_cast<size_t>(i)]);

  std::vector<int32_t> stream;
  for (const auto& e : encoded) {
    if (max_tokens >= 0 && static_cast<int64_t>(stream.size()) >= max_tokens) break;
    stream.insert(stream.end(), e.begin(), e.end());
  }
  if (max_tokens >= 0 && static_cast<int64_t>(stream.size()) > max_tokens)
    stream.resize(static_cast<size_t>(max_tokens));
  return stream;
}

std::vector<std::vector<int32_t>> tokenize_corpus_lines(const Tokenizer& tok,
                                                        const std::string& dir,
                                                        int64_t max_lines) {
  std::vector<std::string> lines;
  for_each_corpus_line(dir, [&](std::string line) {
    if (max_lines >= 0 && static_cast<int64_t>(lines.size()) >= max_lines) return false;
    lines.push_back(std::move(line));
    return true;
  });
  std::vector<std::vector<int32_t>> encoded(lines.size());
#pragma omp parallel for schedule(dynamic, 256)
  for (int64_t i = 0; i < static_cast<int64_t>(lines.size()); ++i)
    encoded[static_cast<size_t>(i)] = tok.encode(lines[static_cast<size_t>(i)]);
  return encoded;
}

std::vector<int32_t> tokenize_corpus_cached(const Tokenizer& tok, const std::string& dir,
                                            const std::string& cache_path) {
  uint64_t corpus_fp = 1469598103934665603ull;
  for (const auto& f : list_corpus_files(dir)) {
    corpus_fp ^= fnv1a_file(f);
    corpus_fp *= 1099511628211ull;
  }
  uint64_t tok_fp = fnv1a_bytes(tok.vocab().size() ? tok.vocab().back().data() : "",
                                tok.vocab().size() ? tok.vocab().back().size() : 0) ^
                    (static_cast<uint64_t>(tok.vocab_size()) << 32) ^ tok.merges().size();

  if (fs::exists(cache_path)) {
    try {
      BinaryReader r(cache_path);
      r.expect_magic("L3TS");
      if (r.u32() == 1 && r.u64() == corpus_fp && r.u64() == tok_fp) {
        const uint64_t n = r.u64();
        std::vector<int32_t> stream;
        r.vec(stream, n);
        return stream;
      }
    } catch (const Error&) {
      // stale or corrupt cache; fall through and rebuild
    }
  }

  std::vector<int32_t> stream = tokenize_corpus(tok, dir);
  BinaryWriter w(cache_path);
  w.magic("L3TS");
  w.u32(1);
  w.u64(corpus_fp);
  w.u64(tok_fp);
  w.u64(stream.size());
  w.vec(stream);
  w.close();
  return stream;
}

SplitStream split_stream(std::vector<int32_t> stream, double val_fraction) {
  check(val_fraction >= 0 && val_fraction < 1, ErrorKind::Config, "invalid validation fraction");
  SplitStream s;
  const int64_t n = static_cast<int64_t>(stream.size());
  const int64_t val_n = static_cast<int64_t>(static_cast<double>(n) * val_fraction);
  s.val.assign(stream.end() - val_n, stream.end());
  stream.resize(static_cast<size_t>(n - val_n));
  s.train = std::move(stream);
  return s;
}

namespace {

// Pronounceable word shapes out of alternating consonant/vowel syllables.
std::string make_word(Rng& rng) {
  static const char* kOnsets[] = {"b", "c", "d", "f", "g", "h", "j", "k",  "l",  "m",  "n",
                                  "p", "r", "s", "t", "v", "w", "z", "st", "tr", "ch", "pl"};
  static const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou", "ea"};
  static const char* kCodas[] = {"", "", "", "n", "r", "s", "t", "l", "nd", "rm"};
  const int syllables = 1 + static_cast<int>(rng.below(3));
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w += kOnsets[rng.below(std::size(kOnsets))];
    w += kVowels[rng.below(std::size(kVowels))];
  }
  w += kCodas[rng.below(std::size(kCodas))];
  return w;
}

}  // namespace

void generate_synthetic_corpus(const std::string& dir, const SyntheticCorpusConfig& cfg) {
  check(cfg.word_types >= 16, ErrorKind::Config, "need at least 16 word types");
  check(cfg.num_files >= 1 && cfg.total_bytes > 0, ErrorKind::Config, "invalid corpus size");
  fs::create_directories(dir);

  Rng rng(cfg.seed);
  std::vector<std::string> words;
  words.reserve(static_cast<size_t>(cfg.word_types));
  {
    std::unordered_map<std::string, int> seen;
    while (static_cast<int>(words.size()) < cfg.word_types) {
      std::string w = make_word(rng);
      if (seen.emplace(w, 1).second) words.push_back(std::move(w));
    }
  }

  ZipfSampler unigram(cfg.word_types, cfg.zipf_exponent);

  // Sparse first-order chain: each word type gets a fixed successor set with
  // Zipf-weighted transition probabilities.
  const int fan = cfg.successors_per_word;
  std::vector<int32_t> successors(static_cast<size_t>(cfg.word_types) * fan);
  for (int w = 0; w < cfg.word_types; ++w)
    for (int s = 0; s < fan; ++s)
      successors[static_cast<size_t>(w) * fan + s] = unigram.sample(rng);
  ZipfSampler within(fan, 1.2);

  const int64_t bytes_per_file = cfg.total_bytes / cfg.num_files;
  int32_t cur = unigram.sample(rng);
  for (int f = 0; f < cfg.num_files; ++f) {
    char name[64];
    std::snprintf(name, sizeof(name), "corpus_%03d.txt", f);
    std::ofstream os(fs::path(dir) / name, std::ios::binary);
    check(os.good(), ErrorKind::Io, "cannot write corpus file");
    int64_t written = 0;
    int words_in_sentence = 0;
    int sentences_in_line = 0;
    std::string line;
    while (written < bytes_per_file) {
      if (!line.empty()) line += ' ';
      line += words[static_cast<size_t>(cur)];
      ++words_in_sentence;
      if (rng.uniform() < cfg.noise_fraction)
        cur = unigram.sample(rng);
      else
        cur = successors[static_cast<size_t>(cur) * fan + within.sample(rng)];
      if (words_in_sentence >= 6 && (words_in_sentence >= 20 || rng.uniform() < 0.12)) {
        line += '.';
        words_in_sentence = 0;
        ++sentences_in_line;
        cur = unigram.sample(rng);
        if (sentences_in_line >= 3) {
          line += '\n';
          os.write(line.data(), static_cast<std::streamsize>(line.size()));
          written += static_cast<int64_t>(line.size());
          line.clear();
          sentences_in_line = 0;
        }
      }
    }
    if (!line.empty()) {
      line += '\n';
      os.write(line.data(), static_cast<std::streamsize>(line.size()));
    }
  }
}

std::vector<int32_t> zipf_token_stream(int64_t n, int32_t vocab_size, double exponent,
                                       uint64_t seed) {
  Rng rng(seed);
  ZipfSampler z(vocab_size, exponent);
  std::vector<int32_t> out(static_cast<size_t>(n));
  for (auto& t : out) t = z.sample(rng);
  return out;
}

}  // namespace l3
