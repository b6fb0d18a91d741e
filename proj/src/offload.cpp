#include "l3/offload.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "l3/rng.hpp"

namespace l3 {

using json = nlohmann::json;
using clock_t_ = std::chrono::steady_clock;

namespace {
double ms_between(clock_t_::time_point a, clock_t_::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

void latency_wait(clock_t_::time_point deadline) {
  // sleep the bulk, spin the tail; keeps the injected latency tight without
  // burning a core for long transfers
  for (;;) {
    const auto now = clock_t_::now();
    if (now >= deadline) return;
    const auto left = deadline - now;
    if (left > std::chrono::microseconds(300))
      std::this_thread::sleep_for(left - std::chrono::microseconds(200));
  }
}
}  // namespace

TierStore::TierStore(const std::string& checkpoint_path, int64_t latency_ns_per_kb)
    : path_(checkpoint_path), latency_ns_per_kb_(latency_ns_per_kb) {
  const ModelConfig cfg = peek_checkpoint_config(checkpoint_path);
  alloc_ = peek_checkpoint_allocation(checkpoint_path);
  check(!cfg.l3_positions.empty() && alloc_ != nullptr, ErrorKind::Config,
        "checkpoint has no L3 layers to offload");
  const CheckpointLayout layout = read_checkpoint_layout(checkpoint_path);
  scalar_bytes_ = layout.scalar_bytes;

  const int fd = ::open(checkpoint_path.c_str(), O_RDONLY);
  check(fd >= 0, ErrorKind::Io, "cannot open checkpoint for mmap: " + checkpoint_path);
  struct stat st;
  check(::fstat(fd, &st) == 0, ErrorKind::Io, "fstat failed");
  map_size_ = static_cast<uint64_t>(st.st_size);
  void* m = ::mmap(nullptr, map_size_, PROT_READ, MAP_SHARED, fd, 0);
  ::close(fd);
  check(m != MAP_FAILED, ErrorKind::Io, "mmap failed: " + checkpoint_path);
  map_ = static_cast<const uint8_t*>(m);

  for (size_t i = 0; i < cfg.l3_positions.size(); ++i) {
    const std::string stem = "l3." + std::to_string(i) + ".";
    const auto* k = layout.find(stem + "w_k");
    check(k != nullptr, ErrorKind::Format, "checkpoint misses " + stem + "w_k");
    LayerTables lt;
    lt.k_offset = k->offset;
    lt.d_in = cfg.d_model;
    lt.d_emb = cfg.l3_d_emb;
    lt.tied = cfg.tie_kv;
    if (cfg.tie_kv) {
      lt.v_offset = k->offset;
    } else {
      const auto* v = layout.find(stem + "w_v");
      check(v != nullptr, ErrorKind::Format, "checkpoint misses " + stem + "w_v");
      lt.v_offset = v->offset;
    }
    layers_.push_back(lt);
  }

  const int64_t max_d = *std::max_element(alloc_->d.begin(), alloc_->d.end());
  const int64_t widest = alloc_->cap != 0 ? std::max<int64_t>(alloc_->cap, max_d) : max_d;
  k_cache_.resize(layers_.size());
  v_cache_.resize(layers_.size());
  for (size_t i = 0; i < layers_.size(); ++i) {
    const size_t kb = static_cast<size_t>(widest * layers_[i].d_in * scalar_bytes_);
    const size_t vb = static_cast<size_t>(widest * layers_[i].d_emb * scalar_bytes_);
    for (int s = 0; s < 2; ++s) {
      k_cache_[i][static_cast<size_t>(s)].resize(kb);
      if (!layers_[i].tied) v_cache_[i][static_cast<size_t>(s)].resize(vb);
    }
  }
  agent_ = std::thread([this] { agent_loop(); });
}

TierStore::~TierStore() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  if (agent_.joinable()) agent_.join();
  if (map_) ::munmap(const_cast<uint8_t*>(map_), map_size_);
}

void TierStore::agent_loop() {
  for (;;) {
    Request rq;
    {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [this] { return stop_ || !queue_.empty(); });
      if (stop_ && queue_.empty()) return;
      rq = queue_.front();
      queue_.pop_front();
    }
    run_request(rq);
  }
}

void TierStore::run_request(const Request& rq) {
  auto& state = *rq.handle->layers_[static_cast<size_t>(rq.layer)];
  const auto start = clock_t_::now();
  const LayerTables& lt = layers_[static_cast<size_t>(rq.layer)];
  const int64_t rows = rq.hi - rq.lo;
  uint64_t moved = 0;
  if (rq.lo < 0 || rq.hi > alloc_->total || rows <= 0) {
    state.error = "slice out of range";
  } else {
    const size_t kb = static_cast<size_t>(rows * lt.d_in * scalar_bytes_);
    auto& kbuf = k_cache_[static_cast<size_t>(rq.layer)][static_cast<size_t>(rq.slot)];
    std::memcpy(kbuf.data(), map_ + lt.k_offset + static_cast<uint64_t>(rq.lo * lt.d_in) *
                                                       static_cast<uint64_t>(scalar_bytes_),
                kb);
    state.fetched.k_data = kbuf.data();
    moved += kb;
    if (lt.tied) {
      state.fetched.v_data = kbuf.data();
    } else {
      const size_t vb = static_cast<size_t>(rows * lt.d_emb * scalar_bytes_);
      auto& vbuf = v_cache_[static_cast<size_t>(rq.layer)][static_cast<size_t>(rq.slot)];
      std::memcpy(vbuf.data(), map_ + lt.v_offset + static_cast<uint64_t>(rq.lo * lt.d_emb) *
                                                        static_cast<uint64_t>(scalar_bytes_),
                  vb);
      state.fetched.v_data = vbuf.data();
      moved += vb;
    }
    state.fetched.rows = rows;
    state.fetched.bytes_moved = moved;
  }
  if (latency_ns_per_kb_ > 0) {
    const auto delay = std::chrono::nanoseconds(
        static_cast<int64_t>(static_cast<double>(moved) / 1024.0 *
                             static_cast<double>(latency_ns_per_kb_)));
    latency_wait(start + delay);
  }
  {
    std::lock_guard<std::mutex> lk(mu_);
    state.complete = clock_t_::now();
    state.ready.store(true, std::memory_order_release);
  }
  cv_.notify_all();
}

std::unique_ptr<TierStore::PrefetchHandle> TierStore::prefetch_rows(
    const std::vector<std::pair<int64_t, int64_t>>& row_ranges, int slot) {
  check(row_ranges.size() == layers_.size(), ErrorKind::Dimension,
        "one row range per L3 layer required");
  auto handle = std::make_unique<PrefetchHandle>();
  handle->store_ = this;
  handle->slot_ = slot;
  handle->issue_ = clock_t_::now();
  handle->layers_.reserve(layers_.size());
  for (size_t i = 0; i < layers_.size(); ++i)
    handle->layers_.push_back(std::make_unique<PrefetchHandle::LayerState>());
  {
    std::lock_guard<std::mutex> lk(mu_);
    for (size_t i = 0; i < layers_.size(); ++i)
      queue_.push_back(Request{handle.get(), static_cast<int>(i), row_ranges[i].first,
                               row_ranges[i].second, slot});
  }
  cv_.notify_all();
  return handle;
}

std::unique_ptr<TierStore::PrefetchHandle> TierStore::prefetch(int32_t token, int slot) {
  check(token >= 0 && token < alloc_->vocab_size, ErrorKind::Index,
        "prefetch: token out of range");
  std::vector<std::pair<int64_t, int64_t>> ranges(layers_.size(), alloc_->range_for(token));
  return prefetch_rows(ranges, slot);
}

const TierStore::Fetched& TierStore::PrefetchHandle::await_layer(int li) {
  auto& state = *layers_.at(static_cast<size_t>(li));
  if (!state.ready.load(std::memory_order_acquire)) {
    std::unique_lock<std::mutex> lk(store_->mu_);
    store_->cv_.wait(lk, [&] { return state.ready.load(std::memory_order_acquire); });
  }
  check(state.error.empty(), ErrorKind::Io, "prefetch failed: " + state.error);
  return state.fetched;
}

void TierStore::PrefetchHandle::await_all() {
  for (int i = 0; i < static_cast<int>(layers_.size()); ++i) await_layer(i);
}

bool TierStore::PrefetchHandle::layer_ready(int li) const {
  return layers_.at(static_cast<size_t>(li))->ready.load(std::memory_order_acquire);
}

std::chrono::steady_clock::time_point TierStore::PrefetchHandle::complete_time(int li) const {
  return layers_.at(static_cast<size_t>(li))->complete;
}

uint64_t TierStore::PrefetchHandle::bytes_moved() const {
  uint64_t total = 0;
  for (const auto& l : layers_)
    if (l->ready.load(std::memory_order_acquire)) total += l->fetched.bytes_moved;
  return total;
}

// ---------------------------------------------------------------------------
// inference engine (no autodiff)

namespace {

template <typename T>
void gemv_rows(const T* w, const T* x, T* y, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const T* wr = w + r * cols;
    T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    int64_t c = 0;
    for (; c + 4 <= cols; c += 4) {
      s0 += wr[c] * x[c];
      s1 += wr[c + 1] * x[c + 1];
      s2 += wr[c + 2] * x[c + 2];
      s3 += wr[c + 3] * x[c + 3];
    }
    for (; c < cols; ++c) s0 += wr[c] * x[c];
    y[r] = (s0 + s1) + (s2 + s3);
  }
}

template <typename T>
void rms_norm_vec(const T* x, const T* gain, T* y, int64_t d) {
  T ms = 0;
  for (int64_t i = 0; i < d; ++i) ms += x[i] * x[i];
  const T inv = T(1) / std::sqrt(ms / static_cast<T>(d) + static_cast<T>(kRmsEps));
  for (int64_t i = 0; i < d; ++i) y[i] = x[i] * inv * gain[i];
}

template <typename T>
void rope_vec(T* x, int64_t pos, int n_heads, int64_t dh, T base) {
  const int64_t half = dh / 2;
  for (int64_t j = 0; j < half; ++j) {
    const T ang = static_cast<T>(pos) * std::pow(base, -static_cast<T>(2 * j) / static_cast<T>(dh));
    const T c = std::cos(ang), s = std::sin(ang);
    for (int h = 0; h < n_heads; ++h) {
      T* p = x + h * dh;
      const T x0 = p[j], x1 = p[j + half];
      p[j] = x0 * c - x1 * s;
      p[j + half] = x0 * s + x1 * c;
    }
  }
}

template <typename T>
void softmax_vec(T* x, int64_t n) {
  T mx = x[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  T sum = 0;
  for (int64_t i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  const T inv = T(1) / sum;
  for (int64_t i = 0; i < n; ++i) x[i] *= inv;
}

template <typename T>
struct InferScratch {
  std::vector<T> x, xn, q, k, v, attn, proj, ff_gate, ff_up, ff_act, scores, agg, up, upn, cat,
      logits;
  std::vector<std::vector<T>> k_cache, v_cache;  // per layer, [pos][d_model]

  InferScratch(const ModelConfig& cfg, int64_t capacity, int64_t max_slice_rows) {
    const size_t d = static_cast<size_t>(cfg.d_model);
    x.resize(d);
    xn.resize(d);
    q.resize(d);
    k.resize(d);
    v.resize(d);
    attn.resize(d);
    proj.resize(d);
    ff_gate.resize(static_cast<size_t>(cfg.d_ff));
    ff_up.resize(static_cast<size_t>(cfg.d_ff));
    ff_act.resize(static_cast<size_t>(cfg.d_ff));
    scores.resize(static_cast<size_t>(std::max(capacity, max_slice_rows)));
    up.resize(static_cast<size_t>(cfg.l3_d_up));
    upn.resize(static_cast<size_t>(cfg.l3_d_up));
    agg.resize(static_cast<size_t>(cfg.l3_d_emb));
    cat.resize(static_cast<size_t>(cfg.l3_d_up + cfg.d_model));
    logits.resize(static_cast<size_t>(cfg.vocab_size));
    k_cache.assign(static_cast<size_t>(cfg.n_layers),
                   std::vector<T>(static_cast<size_t>(capacity) * d));
    v_cache.assign(static_cast<size_t>(cfg.n_layers),
                   std::vector<T>(static_cast<size_t>(capacity) * d));
  }
};

}  // namespace

template <typename T>
GenerateResult generate(const Model<T>& model, TierStore* store,
                        std::span<const int32_t> prompt, const GenerateOptions& opts) {
  check(!prompt.empty(), ErrorKind::Config, "generate: empty prompt");
  check(opts.n_new >= 1, ErrorKind::Config, "generate: n_new must be >= 1");
  const ModelConfig& cfg = model.config();
  const bool offloaded = opts.mode == GenerateMode::Offloaded;
  const bool has_l3 = !model.l3.empty();
  if (offloaded && has_l3) {
    check(store != nullptr, ErrorKind::Config, "offloaded mode needs a TierStore");
    check(store->n_layers() == static_cast<int>(model.l3.size()), ErrorKind::Config,
          "store layer count does not match the model");
    check(store->scalar_bytes() == static_cast<int>(sizeof(T)), ErrorKind::Config,
          "store precision does not match the model");
  }

  std::vector<int> positions = cfg.l3_positions;
  if (opts.first_l3_layer >= 0 && !positions.empty()) {
    positions[0] = opts.first_l3_layer;
    int prev = -1;
    for (int p : positions) {
      check(p > prev && p < cfg.n_layers, ErrorKind::Config,
            "first_l3_layer override breaks the position ordering");
      prev = p;
    }
  }

  const int64_t total_positions = static_cast<int64_t>(prompt.size()) + opts.n_new;
  check(total_positions <= cfg.context_length, ErrorKind::Dimension,
        "prompt plus generation exceeds the context length");

  const auto* alloc = model.allocation().get();
  const int64_t vocab_rows = has_l3 ? alloc->total : 0;
  int64_t worst_rows = 0;
  if (opts.worst_case && has_l3) {
    int32_t maxd = *std::max_element(alloc->d.begin(), alloc->d.end());
    worst_rows = alloc->cap != 0 ? static_cast<int64_t>(alloc->cap) : maxd;
    check(worst_rows <= vocab_rows, ErrorKind::Config, "worst-case slice wider than the table");
  }

  // slice selection: the real allocation range, or a seeded random cap-wide
  // window in worst-case benchmarking mode (same selection in both modes)
  auto ranges_for = [&](int32_t tok, int64_t step_idx) {
    std::vector<std::pair<int64_t, int64_t>> rs;
    rs.reserve(model.l3.size());
    for (size_t li = 0; li < model.l3.size(); ++li) {
      if (opts.worst_case) {
        Rng r(opts.worst_case_seed ^ (static_cast<uint64_t>(step_idx) * 0x9e3779b97f4a7c15ull +
                                      li * 0x2545f4914f6cdd1dull));
        const int64_t lo =
            static_cast<int64_t>(r.below(static_cast<uint64_t>(vocab_rows - worst_rows + 1)));
        rs.emplace_back(lo, lo + worst_rows);
      } else {
        rs.push_back(alloc->range_for(tok));
      }
    }
    return rs;
  };

  int64_t max_slice_rows = 0;
  if (has_l3) {
    max_slice_rows = *std::max_element(alloc->d.begin(), alloc->d.end());
    max_slice_rows = std::max(max_slice_rows, worst_rows);
  }
  InferScratch<T> sc(cfg, total_positions, max_slice_rows);
  const int64_t d = cfg.d_model;
  const int64_t dh = cfg.head_dim;
  const T theta = static_cast<T>(cfg.rope_theta);

  GenerateResult out;
  out.timing.mode = offloaded ? "offloaded" : "resident";
  std::unique_ptr<TierStore::PrefetchHandle> handle, next_handle;
  int slot = 0;

  if (offloaded && has_l3) handle = store->prefetch_rows(ranges_for(prompt[0], 0), slot);

  const auto run_start = clock_t_::now();
  int32_t produced = -1;
  for (int64_t pos = 0; pos < total_positions - 1; ++pos) {
    const bool in_prompt = pos < static_cast<int64_t>(prompt.size());
    const int32_t tok = in_prompt ? prompt[static_cast<size_t>(pos)] : produced;
    const bool decode_step = pos >= static_cast<int64_t>(prompt.size()) - 1;

    // next token already known during prefill: issue its prefetch now
    if (offloaded && has_l3 && pos + 1 < static_cast<int64_t>(prompt.size()))
      next_handle =
          store->prefetch_rows(ranges_for(prompt[static_cast<size_t>(pos + 1)], pos + 1), 1 - slot);

    const auto step_start = clock_t_::now();
    double stall_ms = 0;

    // --- one decoder step ---
    const T* emb = model.tok_emb.data() + static_cast<int64_t>(tok) * d;
    std::copy(emb, emb + d, sc.x.begin());
    size_t l3_idx = 0;
    bool first_l3_seen = false;
    for (int li = 0; li < cfg.n_layers; ++li) {
      const auto& b = model.blocks[static_cast<size_t>(li)];
      rms_norm_vec<T>(sc.x.data(), b.attn_norm.data(), sc.xn.data(), d);
      gemv_rows<T>(b.wq.data(), sc.xn.data(), sc.q.data(), d, d);
      gemv_rows<T>(b.wk.data(), sc.xn.data(), sc.k.data(), d, d);
      gemv_rows<T>(b.wv.data(), sc.xn.data(), sc.v.data(), d, d);
      rope_vec<T>(sc.q.data(), pos, cfg.n_heads, dh, theta);
      rope_vec<T>(sc.k.data(), pos, cfg.n_heads, dh, theta);
      std::copy(sc.k.begin(), sc.k.end(),
                sc.k_cache[static_cast<size_t>(li)].begin() + pos * d);
      std::copy(sc.v.begin(), sc.v.end(),
                sc.v_cache[static_cast<size_t>(li)].begin() + pos * d);

      const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
      for (int h = 0; h < cfg.n_heads; ++h) {
        const T* qh = sc.q.data() + h * dh;
        const T* kc = sc.k_cache[static_cast<size_t>(li)].data() + h * dh;
        for (int64_t j = 0; j <= pos; ++j) {
          const T* kj = kc + j * d;
          T s = 0;
          for (int64_t c = 0; c < dh; ++c) s += qh[c] * kj[c];
          sc.scores[static_cast<size_t>(j)] = s * inv_scale;
        }
        softmax_vec<T>(sc.scores.data(), pos + 1);
        T* oh = sc.attn.data() + h * dh;
        std::fill(oh, oh + dh, T(0));
        const T* vc = sc.v_cache[static_cast<size_t>(li)].data() + h * dh;
        for (int64_t j = 0; j <= pos; ++j) {
          const T w = sc.scores[static_cast<size_t>(j)];
          const T* vj = vc + j * d;
          for (int64_t c = 0; c < dh; ++c) oh[c] += w * vj[c];
        }
      }
      gemv_rows<T>(b.wo.data(), sc.attn.data(), sc.proj.data(), d, d);
      for (int64_t c = 0; c < d; ++c) sc.x[static_cast<size_t>(c)] += sc.proj[static_cast<size_t>(c)];

      rms_norm_vec<T>(sc.x.data(), b.mlp_norm.data(), sc.xn.data(), d);
      gemv_rows<T>(b.w_gate.data(), sc.xn.data(), sc.ff_gate.data(), cfg.d_ff, d);
      gemv_rows<T>(b.w_up.data(), sc.xn.data(), sc.ff_up.data(), cfg.d_ff, d);
      for (int64_t c = 0; c < cfg.d_ff; ++c) {
        const T g = sc.ff_gate[static_cast<size_t>(c)];
        const T sg = T(1) / (T(1) + std::exp(-g));
        sc.ff_act[static_cast<size_t>(c)] = g * sg * sc.ff_up[static_cast<size_t>(c)];
      }
      gemv_rows<T>(b.w_down.data(), sc.ff_act.data(), sc.proj.data(), d, cfg.d_ff);
      for (int64_t c = 0; c < d; ++c) sc.x[static_cast<size_t>(c)] += sc.proj[static_cast<size_t>(c)];

      if (l3_idx < positions.size() && positions[l3_idx] == li) {
        const auto& lp = model.l3[l3_idx];
        const T* k_rows;
        const T* v_rows;
        int64_t rows;
        if (offloaded) {
          const auto wait0 = clock_t_::now();
          if (opts.strict_prefetch && !first_l3_seen) handle->await_all();
          const auto& f = handle->await_layer(static_cast<int>(l3_idx));
          stall_ms += ms_between(wait0, clock_t_::now());
          check(handle->layer_ready(static_cast<int>(l3_idx)), ErrorKind::Internal,
                "L3 executed before its slice was resident");
          k_rows = static_cast<const T*>(f.k_data);
          v_rows = static_cast<const T*>(f.v_data);
          rows = f.rows;
        } else {
          auto range = ranges_for(tok, pos)[l3_idx];
          rows = range.second - range.first;
          k_rows = lp.w_k.data() + range.first * lp.d_in;
          v_rows = (lp.tied ? lp.w_k : lp.w_v).data() + range.first * lp.d_emb;
        }
        first_l3_seen = true;

        rms_norm_vec<T>(sc.x.data(), lp.norm_in.data(), sc.xn.data(), d);
        for (int64_t j = 0; j < rows; ++j) {
          const T* kr = k_rows + j * lp.d_in;
          T s = 0;
          for (int64_t c = 0; c < lp.d_in; ++c) s += kr[c] * sc.xn[static_cast<size_t>(c)];
          sc.scores[static_cast<size_t>(j)] = s;
        }
        softmax_vec<T>(sc.scores.data(), rows);
        std::fill(sc.agg.begin(), sc.agg.end(), T(0));
        for (int64_t j = 0; j < rows; ++j) {
          const T w = sc.scores[static_cast<size_t>(j)];
          const T* vr = v_rows + j * lp.d_emb;
          for (int64_t c = 0; c < lp.d_emb; ++c) sc.agg[static_cast<size_t>(c)] += w * vr[c];
        }
        gemv_rows<T>(lp.w_up.data(), sc.agg.data(), sc.up.data(), lp.d_up, lp.d_emb);
        rms_norm_vec<T>(sc.up.data(), lp.norm_out.data(), sc.upn.data(), lp.d_up);
        std::copy(sc.upn.begin(), sc.upn.end(), sc.cat.begin());
        std::copy(sc.x.begin(), sc.x.end(), sc.cat.begin() + lp.d_up);
        gemv_rows<T>(lp.w_mix.data(), sc.cat.data(), sc.x.data(), lp.d_out, lp.d_up + lp.d_in);
        ++l3_idx;
      }
    }

    if (decode_step) {
      rms_norm_vec<T>(sc.x.data(), model.final_norm.data(), sc.xn.data(), d);
      gemv_rows<T>(model.unembed.data(), sc.xn.data(), sc.logits.data(), cfg.vocab_size, d);
      int32_t best = 0;
      for (int32_t vtok = 1; vtok < cfg.vocab_size; ++vtok)
        if (sc.logits[static_cast<size_t>(vtok)] > sc.logits[static_cast<size_t>(best)])
          best = vtok;
      produced = best;
      out.tokens.push_back(best);

      TokenTiming tt;
      tt.index = static_cast<int64_t>(out.tokens.size()) - 1;
      tt.step_ms = ms_between(step_start, clock_t_::now());
      tt.stall_ms = stall_ms;
      if (offloaded && has_l3 && handle) {
        auto last = handle->issue_time();
        for (int li2 = 0; li2 < static_cast<int>(model.l3.size()); ++li2)
          last = std::max(last, handle->complete_time(li2));
        tt.fetch_ms = ms_between(handle->issue_time(), last);
      }
      out.timing.per_token.push_back(tt);

      if (static_cast<int>(out.tokens.size()) < opts.n_new && offloaded && has_l3)
        next_handle = store->prefetch_rows(ranges_for(produced, pos + 1), 1 - slot);
    }

    handle = std::move(next_handle);
    slot = 1 - slot;
  }

  out.timing.tokens = static_cast<int64_t>(out.tokens.size());
  out.timing.total_s =
      std::chrono::duration<double>(clock_t_::now() - run_start).count();
  out.timing.tokens_per_s =
      out.timing.total_s > 0 ? static_cast<double>(out.timing.tokens) / out.timing.total_s : 0;
  return out;
}

std::string TimingReport::to_json() const {
  json j;
  j["mode"] = mode;
  j["tokens"] = tokens;
  j["total_s"] = total_s;
  j["tokens_per_s"] = tokens_per_s;
  json arr = json::array();
  for (const auto& t : per_token)
    arr.push_back(json{{"index", t.index},
                       {"step_ms", t.step_ms},
                       {"stall_ms", t.stall_ms},
                       {"fetch_ms", t.fetch_ms}});
  j["per_token"] = arr;
  return j.dump(2);
}

OverlapSummary overlap_report(const TimingReport& timings, const TimingReport* resident_baseline) {
  check(!timings.per_token.empty(), ErrorKind::Config, "overlap_report: no tokens");
  OverlapSummary s;
  s.tokens = static_cast<int64_t>(timings.per_token.size());
  std::vector<double> stalls;
  stalls.reserve(timings.per_token.size());
  int64_t zero = 0;
  for (const auto& t : timings.per_token) {
    stalls.push_back(t.stall_ms);
    s.total_stall_ms += t.stall_ms;
    if (t.stall_ms < 1e-3) ++zero;
  }
  std::sort(stalls.begin(), stalls.end());
  s.mean_stall_ms = s.total_stall_ms / static_cast<double>(stalls.size());
  s.p50_stall_ms = stalls[stalls.size() / 2];
  s.p99_stall_ms = stalls[static_cast<size_t>(static_cast<double>(stalls.size() - 1) * 0.99)];
  s.max_stall_ms = stalls.back();
  s.zero_stall_fraction = static_cast<double>(zero) / static_cast<double>(stalls.size());
  if (resident_baseline && resident_baseline->total_s > 0)
    s.overhead_pct =
        (timings.total_s - resident_baseline->total_s) / resident_baseline->total_s * 100.0;
  return s;
}

std::string OverlapSummary::to_json() const {
  json j;
  j["tokens"] = tokens;
  j["mean_stall_ms"] = mean_stall_ms;
  j["p50_stall_ms"] = p50_stall_ms;
  j["p99_stall_ms"] = p99_stall_ms;
  j["max_stall_ms"] = max_stall_ms;
  j["total_stall_ms"] = total_stall_ms;
  j["zero_stall_fraction"] = zero_stall_fraction;
  if (overhead_pct >= -0.5) j["overhead_pct"] = overhead_pct;
  return j.dump(2);
}

template GenerateResult generate<float>(const Model<float>&, TierStore*,
                                        std::span<const int32_t>, const GenerateOptions&);
template GenerateResult generate<double>(const Model<double>&, TierStore*,
                                         std::span<const int32_t>, const GenerateOptions&);

}  // namespace l3
