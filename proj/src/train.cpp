#include "l3/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace l3 {

using json = nlohmann::json;

void TrainConfig::validate(const ModelConfig& mcfg) const {
  check(batch_tokens >= mcfg.context_length && batch_tokens % mcfg.context_length == 0,
        ErrorKind::Config, "batch_tokens must be a positive multiple of the context length");
  check(total_tokens >= batch_tokens, ErrorKind::Config, "total_tokens below one batch");
  check(peak_lr >= min_lr && min_lr >= 0, ErrorKind::Config, "invalid learning-rate range");
  check(clip_norm > 0, ErrorKind::Config, "clip_norm must be positive");
}

namespace {

class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path) {
    if (!path.empty()) {
      os_.open(path);
      check(os_.good(), ErrorKind::Io, "cannot open metrics file: " + path);
    }
  }
  void row(const json& j) {
    if (os_.is_open()) os_ << j.dump() << "\n";
  }
  void flush() {
    if (os_.is_open()) os_.flush();
  }

 private:
  std::ofstream os_;
};

// Window order for one epoch: a seeded Fisher-Yates permutation, a pure
// function of (seed, epoch) so resume and replay agree exactly.
std::vector<int64_t> epoch_permutation(uint64_t seed, int64_t epoch, int64_t n) {
  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), int64_t{0});
  Rng rng(seed ^ (0xa0761d6478bd642full * static_cast<uint64_t>(epoch + 1)));
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
  }
  return perm;
}

}  // namespace

template <typename T>
double eval_perplexity(const Model<T>& model, const std::vector<int32_t>& stream,
                       int context_length, int64_t max_tokens) {
  check(!stream.empty(), ErrorKind::Config, "eval_perplexity: empty stream");
  const int64_t L = context_length;
  check(static_cast<int64_t>(stream.size()) > L, ErrorKind::Config,
        "eval_perplexity: stream shorter than one window");
  NoGradGuard ng;

  constexpr int64_t kGroup = 16;  // windows per forward
  double total_nll = 0;
  int64_t total_targets = 0;
  std::vector<int32_t> inputs, targets;
  int64_t i = 0;
  while (i + L + 1 <= static_cast<int64_t>(stream.size())) {
    inputs.clear();
    targets.clear();
    int64_t group = 0;
    while (group < kGroup && i + L + 1 <= static_cast<int64_t>(stream.size())) {
      if (max_tokens >= 0 && total_targets + static_cast<int64_t>(targets.size()) + L > max_tokens)
        break;
      inputs.insert(inputs.end(), stream.begin() + i, stream.begin() + i + L);
      targets.insert(targets.end(), stream.begin() + i + 1, stream.begin() + i + L + 1);
      i += L;
      ++group;
    }
    if (inputs.empty()) break;
    Tensor<T> logits = model.forward(inputs, static_cast<int>(group), static_cast<int>(L));
    Tensor<T> loss = ops::cross_entropy(logits, targets);
    total_nll += static_cast<double>(loss.item()) * static_cast<double>(targets.size());
    total_targets += static_cast<int64_t>(targets.size());
  }
  check(total_targets > 0, ErrorKind::Config, "eval_perplexity: no complete window fits");
  return std::exp(total_nll / static_cast<double>(total_targets));
}

template <typename T>
TrainResult train_model(Model<T>& model, const TrainConfig& cfg,
                        const std::vector<int32_t>& train_stream,
                        const std::vector<int32_t>& val_stream) {
  const ModelConfig& mcfg = model.config();
  cfg.validate(mcfg);
  const int64_t L = mcfg.context_length;
  const int64_t seqs_per_batch = cfg.batch_tokens / L;
  const int64_t total_steps = cfg.total_tokens / cfg.batch_tokens;
  const int64_t window = L + 1;
  const int64_t n_windows = static_cast<int64_t>(train_stream.size()) / window;
  check(n_windows >= seqs_per_batch, ErrorKind::Config,
        "training stream too small for one batch");

  auto params = model.parameters();
  AdamWConfig acfg;
  acfg.lr = cfg.peak_lr;
  acfg.weight_decay = cfg.weight_decay;
  OptimizerState<T> opt = make_adamw<T>(params, acfg);

  JsonlWriter metrics(cfg.metrics_path);
  JsonlWriter timings(cfg.timing_path);

  std::vector<int64_t> perm;
  int64_t perm_epoch = -1;
  std::vector<int32_t> inputs(static_cast<size_t>(seqs_per_batch * L));
  std::vector<int32_t> targets(static_cast<size_t>(seqs_per_batch * L));

  TrainResult res;
  const auto wall0 = std::chrono::steady_clock::now();
  for (int64_t step = 0; step < total_steps; ++step) {
    for (int64_t s = 0; s < seqs_per_batch; ++s) {
      const int64_t gidx = step * seqs_per_batch + s;
      const int64_t epoch = gidx / n_windows;
      if (epoch != perm_epoch) {
        perm = epoch_permutation(mcfg.seed, epoch, n_windows);
        perm_epoch = epoch;
      }
      const int64_t w = perm[static_cast<size_t>(gidx % n_windows)] * window;
      std::copy(train_stream.begin() + w, train_stream.begin() + w + L,
                inputs.begin() + s * L);
      std::copy(train_stream.begin() + w + 1, train_stream.begin() + w + L + 1,
                targets.begin() + s * L);
    }

    Tensor<T> logits = model.forward(inputs, static_cast<int>(seqs_per_batch),
                                     static_cast<int>(L));
    Tensor<T> loss = ops::cross_entropy(logits, targets);
    const double loss_val = static_cast<double>(loss.item());
    if (!std::isfinite(loss_val)) {
      if (!cfg.checkpoint_path.empty())
        save_checkpoint(cfg.checkpoint_path, model, &opt, step, 0);
      fail(ErrorKind::Numeric, "training loss is not finite at step " + std::to_string(step));
    }
    backward(loss);
    const double gnorm = clip_global_norm(params, cfg.clip_norm);
    const double lr = cosine_lr(step + 1, cfg.warmup_steps, total_steps, cfg.peak_lr, cfg.min_lr);
    adamw_step(params, opt, lr);
    for (auto& p : params) p.zero_grad();
    res.final_train_loss = loss_val;

    const bool last = step + 1 == total_steps;
    if (cfg.log_interval > 0 && (step % cfg.log_interval == 0 || last)) {
      metrics.row(json{{"step", step + 1},
                       {"tokens", (step + 1) * cfg.batch_tokens},
                       {"loss", loss_val},
                       {"lr", lr},
                       {"grad_norm", gnorm}});
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
      timings.row(json{{"step", step + 1}, {"wall_s", wall}});
      metrics.flush();
      timings.flush();
    }
    if ((cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 && !last) &&
        !val_stream.empty()) {
      const double ppl = eval_perplexity(model, val_stream, static_cast<int>(L), cfg.eval_tokens);
      metrics.row(json{{"step", step + 1}, {"val_ppl", ppl}});
      metrics.flush();
    }
    res.steps = step + 1;
  }

  if (!val_stream.empty()) {
    res.final_val_ppl = eval_perplexity(model, val_stream, static_cast<int>(L), cfg.eval_tokens);
    metrics.row(json{{"step", res.steps}, {"val_ppl", res.final_val_ppl}, {"final", true}});
    metrics.flush();
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model, &opt, res.steps, 0);
  return res;
}

ModelConfig apply_iso_flop_rule(const ModelConfig& base, const MatrixVariantSpec& spec,
                                const AllocationTable& alloc) {
  ModelConfig cfg = base;
  cfg.tie_kv = spec.tied;
  cfg.l3_positions = spec.positions;
  if (!spec.has_l3) {
    cfg.l3_positions.clear();
    cfg.tie_kv = false;
    return cfg;
  }
  const int64_t dense = dense_flops_per_token(base);
  auto ratio = [&](const ModelConfig& c) {
    return static_cast<double>(model_flops_per_token(c, &alloc)) / static_cast<double>(dense);
  };
  ModelConfig dropped = cfg;
  dropped.n_layers = cfg.n_layers - 1;
  for (auto& p : dropped.l3_positions) p = std::min(p, dropped.n_layers - 1);
  const double r_keep = ratio(cfg);
  const double r_drop = dropped.n_layers >= 1 ? ratio(dropped) : 1e9;
  ModelConfig chosen = std::abs(r_keep - 1.0) <= std::abs(r_drop - 1.0) ? cfg : dropped;
  check(std::abs(ratio(chosen) - 1.0) <= 0.05, ErrorKind::Config,
        "cannot bring the L3 variant within 5% of the dense FLOP baseline");
  return chosen;
}

std::string MatrixReport::to_json() const {
  json arr = json::array();
  for (const auto& r : rows)
    arr.push_back(json{{"name", r.name},
                       {"n_layers", r.n_layers},
                       {"final_val_ppl", r.final_val_ppl},
                       {"total_params", r.total_params},
                       {"active_params", r.active_params},
                       {"flops_per_token", r.flops_per_token},
                       {"e_dt", r.e_dt},
                       {"checkpoint", r.checkpoint_path}});
  return arr.dump(2);
}

std::string MatrixReport::table() const {
  std::ostringstream os;
  os << "variant         layers  val ppl    params      active      flops/tok  E[d_t]\n";
  for (const auto& r : rows) {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%-15s %-7d %-10.4f %-11lld %-11.0f %-10lld %.2f\n",
                  r.name.c_str(), r.n_layers, r.final_val_ppl,
                  static_cast<long long>(r.total_params), r.active_params,
                  static_cast<long long>(r.flops_per_token), r.e_dt);
    os << buf;
  }
  return os.str();
}

template <typename T>
MatrixReport experiment_matrix(const ModelConfig& base, const TrainConfig& tcfg,
                               std::shared_ptr<const AllocationTable> lzw_alloc,
                               std::shared_ptr<const AllocationTable> uniform_alloc,
                               const std::vector<int32_t>& train_stream,
                               const std::vector<int32_t>& val_stream,
                               const std::vector<MatrixVariantSpec>& variants,
                               const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  MatrixReport report;
  for (const auto& spec : variants) {
    auto alloc = spec.uniform ? uniform_alloc : lzw_alloc;
    check(!spec.has_l3 || alloc != nullptr, ErrorKind::Config,
          "variant " + spec.name + " needs an allocation table");
    ModelConfig cfg = apply_iso_flop_rule(base, spec, spec.has_l3 ? *alloc : AllocationTable{});

    Model<T> model(cfg, spec.has_l3 ? alloc : nullptr);
    TrainConfig vt = tcfg;
    const std::string stem = out_dir + "/" + spec.name;
    vt.metrics_path = stem + ".metrics.jsonl";
    vt.timing_path = stem + ".timing.jsonl";
    vt.checkpoint_path = stem + ".ckpt";
    TrainResult res = train_model(model, vt, train_stream, val_stream);

    MatrixRow row;
    row.name = spec.name;
    row.n_layers = cfg.n_layers;
    row.final_val_ppl = res.final_val_ppl;
    row.total_params = model.parameter_count();
    row.flops_per_token = model_flops_per_token(cfg, spec.has_l3 ? alloc.get() : nullptr);
    row.active_params = static_cast<double>(row.total_params);
    if (spec.has_l3 && !val_stream.empty()) {
      const auto ap = expected_active_l3_params(*alloc, val_stream, cfg.d_model, cfg.l3_d_emb,
                                                cfg.l3_d_up, cfg.d_model, cfg.tie_kv);
      row.e_dt = ap.e_dt;
      int64_t l3_total = 0;
      for (auto& lp : model.l3) l3_total += lp.parameter_count();
      row.active_params = static_cast<double>(row.total_params - l3_total) +
                          static_cast<double>(model.l3.size()) * ap.total;
    }
    row.checkpoint_path = vt.checkpoint_path;
    report.rows.push_back(std::move(row));
  }
  return report;
}

template TrainResult train_model<float>(Model<float>&, const TrainConfig&,
                                        const std::vector<int32_t>&,
                                        const std::vector<int32_t>&);
template TrainResult train_model<double>(Model<double>&, const TrainConfig&,
                                         const std::vector<int32_t>&,
                                         const std::vector<int32_t>&);
template double eval_perplexity<float>(const Model<float>&, const std::vector<int32_t>&, int,
                                       int64_t);
template double eval_perplexity<double>(const Model<double>&, const std::vector<int32_t>&, int,
                                        int64_t);
template MatrixReport experiment_matrix<float>(
    const ModelConfig&, const TrainConfig&, std::shared_ptr<const AllocationTable>,
    std::shared_ptr<const AllocationTable>, const std::vector<int32_t>&,
    const std::vector<int32_t>&, const std::vector<MatrixVariantSpec>&, const std::string&);
template MatrixReport experiment_matrix<double>(
    const ModelConfig&, const TrainConfig&, std::shared_ptr<const AllocationTable>,
    std::shared_ptr<const AllocationTable>, const std::vector<int32_t>&,
    const std::vector<int32_t>&, const std::vector<MatrixVariantSpec>&, const std::string&);

}  // namespace l3
