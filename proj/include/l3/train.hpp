#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "l3/model.hpp"

namespace l3 {

struct TrainConfig {
  int64_t batch_tokens = 4096;   // per optimizer step; must be a multiple of the context
  int64_t total_tokens = 1 << 20;
  int64_t warmup_steps = 100;
  double peak_lr = 3e-4;
  double min_lr = 3e-5;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  int64_t log_interval = 20;   // steps between metric records
  int64_t eval_interval = 0;   // steps between validation runs; 0 = final only
  int64_t eval_tokens = 1 << 17;
  std::string metrics_path;    // JSONL; deterministic fields only
  std::string timing_path;     // JSONL sidecar for wall-clock times
  std::string checkpoint_path;

  void validate(const ModelConfig& mcfg) const;
};

struct TrainResult {
  int64_t steps = 0;
  double final_train_loss = 0;
  double final_val_ppl = 0;
};

// AdamW + cosine schedule + global-norm clipping over packed windows of the
// training stream. Deterministic for a fixed config, seed, precision and
// thread count. A non-finite loss saves the last good state and aborts.
template <typename T>
TrainResult train_model(Model<T>& model, const TrainConfig& cfg,
                        const std::vector<int32_t>& train_stream,
                        const std::vector<int32_t>& val_stream);

// exp(mean token NLL) over non-overlapping windows.
template <typename T>
double eval_perplexity(const Model<T>& model, const std::vector<int32_t>& stream,
                       int context_length, int64_t max_tokens = -1);

// --- experiment matrix ---

struct MatrixVariantSpec {
  std::string name;
  bool has_l3 = false;
  bool uniform = false;          // uniform allocation instead of LZW
  bool tied = false;
  std::vector<int> positions;    // decoder indices for the L3 layers
};

struct MatrixRow {
  std::string name;
  int n_layers = 0;
  double final_val_ppl = 0;
  int64_t total_params = 0;
  double active_params = 0;  // expected per-token actives; equals total for dense rows
  int64_t flops_per_token = 0;
  double e_dt = 0;  // 0 for dense rows
  std::string checkpoint_path;
};

struct MatrixReport {
  std::vector<MatrixRow> rows;
  std::string to_json() const;
  std::string table() const;
};

// Applies the iso-FLOP rule to each variant (drop one decoder layer when the
// L3 addition would push per-token FLOPs more than 5% past the dense
// baseline), trains all variants with a shared seed and token budget, and
// evaluates them on the same held-out stream.
template <typename T>
MatrixReport experiment_matrix(const ModelConfig& base, const TrainConfig& tcfg,
                               std::shared_ptr<const AllocationTable> lzw_alloc,
                               std::shared_ptr<const AllocationTable> uniform_alloc,
                               const std::vector<int32_t>& train_stream,
                               const std::vector<int32_t>& val_stream,
                               const std::vector<MatrixVariantSpec>& variants,
                               const std::string& out_dir);

// The iso-FLOP adjustment by itself (exposed for tests and the CLI).
ModelConfig apply_iso_flop_rule(const ModelConfig& base, const MatrixVariantSpec& spec,
                                const AllocationTable& alloc);

extern template TrainResult train_model<float>(Model<float>&, const TrainConfig&,
                                               const std::vector<int32_t>&,
                                               const std::vector<int32_t>&);
extern template TrainResult train_model<double>(Model<double>&, const TrainConfig&,
                                                const std::vector<int32_t>&,
                                                const std::vector<int32_t>&);
extern template double eval_perplexity<float>(const Model<float>&, const std::vector<int32_t>&,
                                              int, int64_t);
extern template double eval_perplexity<double>(const Model<double>&, const std::vector<int32_t>&,
                                               int, int64_t);

}  // namespace l3
