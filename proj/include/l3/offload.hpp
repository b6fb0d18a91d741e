#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "l3/model.hpp"

namespace l3 {

// Two-tier parameter store. The slow tier is the memory-mapped checkpoint
// file; per-token W_K/W_V row slices are copied into resident cache slots by
// a single fetch-agent thread, with an injectable per-KB latency so transfer
// masking is reproducible on any machine. Exactly one compute thread consumes
// the cache; slots ping-pong between consecutive steps so a slice is never
// evicted before the step that uses it finishes.
class TierStore {
 public:
  TierStore(const std::string& checkpoint_path, int64_t latency_ns_per_kb);
  ~TierStore();
  TierStore(const TierStore&) = delete;
  TierStore& operator=(const TierStore&) = delete;

  int n_layers() const { return static_cast<int>(layers_.size()); }
  int64_t latency_ns_per_kb() const { return latency_ns_per_kb_; }
  int scalar_bytes() const { return scalar_bytes_; }

  struct Fetched {
    const void* k_data = nullptr;  // d_t rows of d_in scalars
    const void* v_data = nullptr;  // d_t rows of d_emb scalars (k_data when tied)
    int64_t rows = 0;
    uint64_t bytes_moved = 0;
  };

  class PrefetchHandle {
   public:
    // Blocks until layer `li`'s slice is resident; returns the cached bytes.
    const Fetched& await_layer(int li);
    void await_all();
    bool layer_ready(int li) const;
    std::chrono::steady_clock::time_point issue_time() const { return issue_; }
    std::chrono::steady_clock::time_point complete_time(int li) const;
    uint64_t bytes_moved() const;

   private:
    friend class TierStore;
    TierStore* store_ = nullptr;
    int slot_ = 0;
    std::chrono::steady_clock::time_point issue_;
    struct LayerState {
      std::atomic<bool> ready{false};
      std::chrono::steady_clock::time_point complete;
      Fetched fetched;
      std::string error;
    };
    std::vector<std::unique_ptr<LayerState>> layers_;
  };

  // Asynchronously copies rows [lo, hi) of each L3 layer's tables into the
  // given slot (0/1). Returns immediately. I/O or range errors surface when
  // the handle is awaited.
  std::unique_ptr<PrefetchHandle> prefetch_rows(const std::vector<std::pair<int64_t, int64_t>>&
                                                    row_ranges,  // one per layer
                                                int slot);

  // Convenience: ranges for token `t` from the allocation bounds.
  std::unique_ptr<PrefetchHandle> prefetch(int32_t token, int slot);

  const AllocationTable& allocation() const { return *alloc_; }

 private:
  struct LayerTables {
    uint64_t k_offset = 0;
    uint64_t v_offset = 0;  // == k_offset when tied
    int64_t d_in = 0, d_emb = 0;
    bool tied = false;
  };
  struct Request {
    PrefetchHandle* handle;
    int layer;
    int64_t lo, hi;
    int slot;
  };

  void agent_loop();
  void run_request(const Request& rq);

  std::string path_;
  int64_t latency_ns_per_kb_ = 0;
  int scalar_bytes_ = 4;
  const uint8_t* map_ = nullptr;
  uint64_t map_size_ = 0;
  std::shared_ptr<AllocationTable> alloc_;
  std::vector<LayerTables> layers_;
  // cache: [layer][slot] buffers large enough for the widest slice
  std::vector<std::array<std::vector<uint8_t>, 2>> k_cache_;
  std::vector<std::array<std::vector<uint8_t>, 2>> v_cache_;

  std::thread agent_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Request> queue_;
  bool stop_ = false;
};

enum class GenerateMode { Resident, Offloaded };

struct GenerateOptions {
  int n_new = 32;
  GenerateMode mode = GenerateMode::Resident;
  bool strict_prefetch = false;  // await every layer's slice before the first L3 layer
  bool worst_case = false;       // charge a full cap-sized slice at a seeded random offset
  uint64_t worst_case_seed = 7;
  int first_l3_layer = -1;       // move the first L3 layer to this decoder index (>=0)
};

struct TokenTiming {
  int64_t index = 0;
  double step_ms = 0;
  double stall_ms = 0;  // time blocked waiting for slices
  double fetch_ms = 0;  // prefetch issue -> last slice resident
};

struct TimingReport {
  std::string mode;
  int64_t tokens = 0;
  double total_s = 0;
  double tokens_per_s = 0;
  std::vector<TokenTiming> per_token;
  std::string to_json() const;
};

struct GenerateResult {
  std::vector<int32_t> tokens;  // newly generated ids
  TimingReport timing;
};

// Greedy decode with a KV cache. In offloaded mode the prefetch for a token's
// slices is issued the moment the token is produced and each L3 layer blocks
// until its slice is resident; the produced ids are identical across modes.
template <typename T>
GenerateResult generate(const Model<T>& model, TierStore* store,
                        std::span<const int32_t> prompt, const GenerateOptions& opts);

struct OverlapSummary {
  int64_t tokens = 0;
  double mean_stall_ms = 0;
  double p50_stall_ms = 0;
  double p99_stall_ms = 0;
  double max_stall_ms = 0;
  double total_stall_ms = 0;
  double zero_stall_fraction = 0;  // stalls below 1us
  double overhead_pct = -1;        // vs resident baseline; -1 when no baseline given
  std::string to_json() const;
};

OverlapSummary overlap_report(const TimingReport& timings,
                              const TimingReport* resident_baseline = nullptr);

extern template GenerateResult generate<float>(const Model<float>&, TierStore*,
                                               std::span<const int32_t>,
                                               const GenerateOptions&);
extern template GenerateResult generate<double>(const Model<double>&, TierStore*,
                                                std::span<const int32_t>,
                                                const GenerateOptions&);

}  // namespace l3
