#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "l3/l3_layer.hpp"
#include "l3/optim.hpp"

namespace l3 {

struct ModelConfig {
  int32_t vocab_size = 2048;
  int n_layers = 8;
  int64_t d_model = 256;
  int n_heads = 4;
  int64_t head_dim = 64;
  int64_t d_ff = 512;
  int context_length = 256;
  std::vector<int> l3_positions;  // decoder layer indices followed by an L3 layer
  int64_t l3_d_emb = 256;
  int64_t l3_d_up = 384;
  bool tie_kv = false;
  std::string allocation_path;  // provenance only; the table itself travels alongside
  std::string precision = "f32";
  uint64_t seed = 0;
  double rope_theta = 10000.0;
  std::string init_scheme = "uniform_fan_in_v1";

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct DecoderBlock {
  Tensor<T> attn_norm;  // [d_model]
  Tensor<T> wq, wk, wv, wo;  // [d_model, d_model]
  Tensor<T> mlp_norm;   // [d_model]
  Tensor<T> w_gate, w_up;  // [d_ff, d_model]
  Tensor<T> w_down;        // [d_model, d_ff]
};

// Decoder-only transformer with optional L3 layers spliced between blocks.
// The L3 output replaces the hidden state; the input rides along inside the
// mix concatenation, which is the skip path.
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, std::shared_ptr<const AllocationTable> alloc);

  // tokens laid out as `batch` rows of `seqlen`; returns logits [batch*seqlen, V].
  // When `trace` is given, the hidden state after every decoder block is
  // appended to it, with a separate entry after each L3 layer so drops across
  // the lookup layers stay attributable.
  Tensor<T> forward(const std::vector<int32_t>& tokens, int batch, int seqlen,
                    std::vector<std::pair<std::string, Tensor<T>>>* trace = nullptr) const;

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters();
  std::vector<Tensor<T>> parameters();
  int64_t parameter_count();

  const ModelConfig& config() const { return cfg_; }
  const std::shared_ptr<const AllocationTable>& allocation() const { return alloc_; }

  Tensor<T> tok_emb;     // [V, d_model]
  Tensor<T> final_norm;  // [d_model]
  Tensor<T> unembed;     // [V, d_model]
  std::vector<DecoderBlock<T>> blocks;
  std::vector<L3Params<T>> l3;  // parallel to cfg.l3_positions

 private:
  ModelConfig cfg_;
  std::shared_ptr<const AllocationTable> alloc_;
};

// Forward-pass FLOPs per token, used for the iso-FLOP bookkeeping. Attention
// score/mix terms use the mean causal width (L+1)/2. The L3 term plugs in the
// worst-case d_t = cap.
int64_t dense_flops_per_token(const ModelConfig& cfg);
int64_t l3_flops_per_token_worst_case(const ModelConfig& cfg, const AllocationTable& alloc);
int64_t model_flops_per_token(const ModelConfig& cfg, const AllocationTable* alloc);

// --- checkpoint ("L3CK") ---

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model, const OptimizerState<T>* opt,
                     int64_t step, uint64_t rng_state);

template <typename T>
struct LoadedCheckpoint {
  std::unique_ptr<Model<T>> model;
  std::optional<OptimizerState<T>> opt;
  int64_t step = 0;
  uint64_t rng_state = 0;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path);

ModelConfig peek_checkpoint_config(const std::string& path);
std::shared_ptr<AllocationTable> peek_checkpoint_allocation(const std::string& path);

// Byte layout of the serialized tensors, for mmap-based offloading.
struct CheckpointLayout {
  struct Entry {
    std::string name;
    std::vector<int64_t> shape;
    uint64_t offset = 0;  // absolute file offset of the raw little-endian data
    uint64_t bytes = 0;
  };
  int scalar_bytes = 4;
  std::vector<Entry> entries;
  const Entry* find(const std::string& name) const;
};

CheckpointLayout read_checkpoint_layout(const std::string& path);

extern template class Model<float>;
extern template class Model<double>;
extern template void save_checkpoint<float>(const std::string&, Model<float>&,
                                            const OptimizerState<float>*, int64_t, uint64_t);
extern template void save_checkpoint<double>(const std::string&, Model<double>&,
                                             const OptimizerState<double>*, int64_t, uint64_t);
extern template LoadedCheckpoint<float> load_checkpoint<float>(const std::string&);
extern template LoadedCheckpoint<double> load_checkpoint<double>(const std::string&);

}  // namespace l3
