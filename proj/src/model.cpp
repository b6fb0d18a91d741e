#include "l3/model.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

namespace l3 {

using json = nlohmann::json;

void ModelConfig::validate() const {
  check(vocab_size > 0, ErrorKind::Config, "vocab_size must be positive");
  check(n_layers > 0, ErrorKind::Config, "n_layers must be positive");
  check(d_model == static_cast<int64_t>(n_heads) * head_dim, ErrorKind::Config,
        "d_model must equal n_heads * head_dim");
  check(head_dim % 2 == 0, ErrorKind::Config, "head_dim must be even for rotary embeddings");
  check(context_length > 0, ErrorKind::Config, "context_length must be positive");
  check(d_ff > 0, ErrorKind::Config, "d_ff must be positive");
  int prev = -1;
  for (int p : l3_positions) {
    check(p > prev, ErrorKind::Config, "l3_positions must be strictly increasing");
    check(p >= 0 && p < n_layers, ErrorKind::Config, "l3 position outside decoder layers");
    prev = p;
  }
  if (!l3_positions.empty()) {
    check(l3_d_emb > 0 && l3_d_up > 0, ErrorKind::Config, "l3 dims must be positive");
    check(!tie_kv || l3_d_emb == d_model, ErrorKind::Config,
          "tied tables require l3_d_emb == d_model");
  }
  check(precision == "f32" || precision == "f64", ErrorKind::Config,
        "precision must be f32 or f64");
}

std::string ModelConfig::to_json() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["n_layers"] = n_layers;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["head_dim"] = head_dim;
  j["d_ff"] = d_ff;
  j["context_length"] = context_length;
  j["l3_positions"] = l3_positions;
  j["l3_d_emb"] = l3_d_emb;
  j["l3_d_up"] = l3_d_up;
  j["tie_kv"] = tie_kv;
  j["allocation_path"] = allocation_path;
  j["precision"] = precision;
  j["seed"] = seed;
  j["rope_theta"] = rope_theta;
  j["init_scheme"] = init_scheme;
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("config json: ") + e.what());
  }
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<int32_t>();
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int>();
    c.head_dim = j.at("head_dim").get<int64_t>();
    c.d_ff = j.at("d_ff").get<int64_t>();
    c.context_length = j.at("context_length").get<int>();
    c.l3_positions = j.at("l3_positions").get<std::vector<int>>();
    c.l3_d_emb = j.at("l3_d_emb").get<int64_t>();
    c.l3_d_up = j.at("l3_d_up").get<int64_t>();
    c.tie_kv = j.at("tie_kv").get<bool>();
    c.allocation_path = j.at("allocation_path").get<std::string>();
    c.precision = j.at("precision").get<std::string>();
    c.seed = j.at("seed").get<uint64_t>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.init_scheme = j.value("init_scheme", std::string("uniform_fan_in_v1"));
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("config json: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
Model<T>::Model(ModelConfig cfg, std::shared_ptr<const AllocationTable> alloc)
    : cfg_(std::move(cfg)), alloc_(std::move(alloc)) {
  cfg_.validate();
  if (!cfg_.l3_positions.empty()) {
    check(alloc_ != nullptr, ErrorKind::Config, "l3 layers need an allocation table");
    check(alloc_->vocab_size == cfg_.vocab_size, ErrorKind::Config,
          "allocation vocab does not match model vocab");
  }

  Rng root(cfg_.seed ^ 0x5eedf00dull);
  const int64_t d = cfg_.d_model;
  tok_emb = Tensor<T>::param_uniform({cfg_.vocab_size, d}, d, root);
  blocks.resize(static_cast<size_t>(cfg_.n_layers));
  for (auto& b : blocks) {
    b.attn_norm = Tensor<T>::from_data({d}, std::vector<T>(static_cast<size_t>(d), T(1)), true);
    b.wq = Tensor<T>::param_uniform({d, d}, d, root);
    b.wk = Tensor<T>::param_uniform({d, d}, d, root);
    b.wv = Tensor<T>::param_uniform({d, d}, d, root);
    b.wo = Tensor<T>::param_uniform({d, d}, d, root);
    b.mlp_norm = Tensor<T>::from_data({d}, std::vector<T>(static_cast<size_t>(d), T(1)), true);
    b.w_gate = Tensor<T>::param_uniform({cfg_.d_ff, d}, d, root);
    b.w_up = Tensor<T>::param_uniform({cfg_.d_ff, d}, d, root);
    b.w_down = Tensor<T>::param_uniform({d, cfg_.d_ff}, cfg_.d_ff, root);
  }
  for (size_t i = 0; i < cfg_.l3_positions.size(); ++i)
    l3.push_back(make_l3_params<T>(alloc_, d, cfg_.l3_d_emb, cfg_.l3_d_up, d, cfg_.tie_kv, root));
  final_norm = Tensor<T>::from_data({d}, std::vector<T>(static_cast<size_t>(d), T(1)), true);
  unembed = Tensor<T>::param_uniform({cfg_.vocab_size, d}, d, root);
}

template <typename T>
Tensor<T> Model<T>::forward(const std::vector<int32_t>& tokens, int batch, int seqlen,
                            std::vector<std::pair<std::string, Tensor<T>>>* trace) const {
  check(seqlen <= cfg_.context_length, ErrorKind::Dimension,
        "sequence longer than the configured context");
  check(static_cast<int64_t>(tokens.size()) == static_cast<int64_t>(batch) * seqlen,
        ErrorKind::Dimension, "token count does not match batch layout");
  const T eps = static_cast<T>(kRmsEps);

  std::vector<int32_t> positions(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int32_t>(i % seqlen);

  Tensor<T> h = ops::embedding(tok_emb, tokens);

  // one plan serves every L3 layer in this batch
  SortPlan plan;
  if (!l3.empty()) plan = make_sort_plan(tokens, *alloc_);

  size_t l3_idx = 0;
  for (int li = 0; li < cfg_.n_layers; ++li) {
    const auto& b = blocks[static_cast<size_t>(li)];
    Tensor<T> an = ops::rms_norm(h, b.attn_norm, eps);
    Tensor<T> q = ops::rope(ops::matmul(an, b.wq, false, true), positions, cfg_.n_heads,
                            static_cast<T>(cfg_.rope_theta));
    Tensor<T> k = ops::rope(ops::matmul(an, b.wk, false, true), positions, cfg_.n_heads,
                            static_cast<T>(cfg_.rope_theta));
    Tensor<T> v = ops::matmul(an, b.wv, false, true);
    Tensor<T> attn = ops::causal_attention(q, k, v, batch, seqlen, cfg_.n_heads);
    h = ops::add(h, ops::matmul(attn, b.wo, false, true));

    Tensor<T> mn = ops::rms_norm(h, b.mlp_norm, eps);
    Tensor<T> gated = ops::mul(ops::silu(ops::matmul(mn, b.w_gate, false, true)),
                               ops::matmul(mn, b.w_up, false, true));
    h = ops::add(h, ops::matmul(gated, b.w_down, false, true));

    if (trace) trace->emplace_back("block" + std::to_string(li), h);
    if (l3_idx < cfg_.l3_positions.size() && cfg_.l3_positions[l3_idx] == li) {
      h = l3_forward_sorted(h, tokens, l3[l3_idx], plan, eps);
      ++l3_idx;
      if (trace) trace->emplace_back("block" + std::to_string(li) + "+l3", h);
    }
  }
  Tensor<T> hn = ops::rms_norm(h, final_norm, eps);
  return ops::matmul(hn, unembed, false, true);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Model<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>>> ps;
  ps.emplace_back("tok_emb", tok_emb);
  for (size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string p = "layer." + std::to_string(i) + ".";
    ps.emplace_back(p + "attn_norm", b.attn_norm);
    ps.emplace_back(p + "wq", b.wq);
    ps.emplace_back(p + "wk", b.wk);
    ps.emplace_back(p + "wv", b.wv);
    ps.emplace_back(p + "wo", b.wo);
    ps.emplace_back(p + "mlp_norm", b.mlp_norm);
    ps.emplace_back(p + "w_gate", b.w_gate);
    ps.emplace_back(p + "w_up", b.w_up);
    ps.emplace_back(p + "w_down", b.w_down);
  }
  for (size_t i = 0; i < l3.size(); ++i) {
    auto& lp = l3[i];
    const std::string p = "l3." + std::to_string(i) + ".";
    ps.emplace_back(p + "w_k", lp.w_k);
    if (!lp.tied) ps.emplace_back(p + "w_v", lp.w_v);
    ps.emplace_back(p + "w_up", lp.w_up);
    ps.emplace_back(p + "w_mix", lp.w_mix);
    ps.emplace_back(p + "norm_in", lp.norm_in);
    ps.emplace_back(p + "norm_out", lp.norm_out);
  }
  ps.emplace_back("final_norm", final_norm);
  ps.emplace_back("unembed", unembed);
  return ps;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::parameters() {
  std::vector<Tensor<T>> out;
  for (auto& [name, p] : named_parameters()) out.push_back(p);
  return out;
}

template <typename T>
int64_t Model<T>::parameter_count() {
  int64_t n = 0;
  for (auto& p : parameters()) n += p.numel();
  return n;
}

int64_t dense_flops_per_token(const ModelConfig& cfg) {
  const int64_t d = cfg.d_model;
  const int64_t mean_width = (cfg.context_length + 1) / 2;
  const int64_t per_layer = 8 * d * d          // qkv + output projections
                            + 4 * d * mean_width  // scores + value mix
                            + 6 * d * cfg.d_ff;   // swiglu
  return cfg.n_layers * per_layer + 2 * d * cfg.vocab_size;
}

int64_t l3_flops_per_token_worst_case(const ModelConfig& cfg, const AllocationTable& alloc) {
  if (cfg.l3_positions.empty()) return 0;
  const int64_t k = alloc.cap != 0 ? alloc.cap : *std::max_element(alloc.d.begin(), alloc.d.end());
  const FlopsReport r = l3_flops(k, cfg.d_model, cfg.l3_d_emb, cfg.l3_d_up, cfg.d_model);
  return static_cast<int64_t>(cfg.l3_positions.size()) * r.total;
}

int64_t model_flops_per_token(const ModelConfig& cfg, const AllocationTable* alloc) {
  int64_t f = dense_flops_per_token(cfg);
  if (!cfg.l3_positions.empty()) {
    check(alloc != nullptr, ErrorKind::Config, "flops accounting needs the allocation table");
    f += l3_flops_per_token_worst_case(cfg, *alloc);
  }
  return f;
}

template class Model<float>;
template class Model<double>;

}  // namespace l3
