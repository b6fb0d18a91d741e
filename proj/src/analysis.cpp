#include "l3/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "l3/kernels.hpp"
#include "l3/serialize.hpp"

namespace l3 {

namespace {

// devset forward once, keeping every boundary state and the final log-probs
template <typename T>
struct DevsetStates {
  std::vector<std::pair<std::string, Tensor<T>>> boundaries;
  Tensor<T> final_logp;  // [n, V]
};

template <typename T>
DevsetStates<T> collect_states(const Model<T>& model, const std::vector<int32_t>& tokens,
                               int batch, int seqlen) {
  NoGradGuard ng;
  DevsetStates<T> out;
  Tensor<T> logits = model.forward(tokens, batch, seqlen, &out.boundaries);
  out.final_logp = Tensor<T>::zeros(logits.shape());
  ops::log_softmax_rows<T>(logits.data(), out.final_logp.data(), logits.dim(0), logits.dim(1));
  return out;
}

template <typename T>
double full_kl(const Tensor<T>& states, const LensHead<T>& head, const Tensor<T>& target_logp,
               T eps) {
  NoGradGuard ng;
  Tensor<T> hn = ops::rms_norm(states, head.gain, eps);
  Tensor<T> logits = ops::matmul(hn, head.unembed, false, true);
  Tensor<T> kl = ops::kl_vs_target(logits, target_logp);
  return static_cast<double>(kl.item());
}

template <typename T>
Tensor<T> gather_rows_plain(const Tensor<T>& src, const std::vector<int64_t>& rows) {
  const int64_t d = src.dim(1);
  Tensor<T> out = Tensor<T>::zeros({static_cast<int64_t>(rows.size()), d});
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy(src.data() + rows[i] * d, src.data() + (rows[i] + 1) * d,
              out.data() + static_cast<int64_t>(i) * d);
  return out;
}

}  // namespace

template <typename T>
TunedLens<T> train_tuned_lens(const Model<T>& model, const std::vector<int32_t>& devset,
                              int batch, int seqlen, const LensTrainConfig& cfg) {
  DevsetStates<T> dev = collect_states(model, devset, batch, seqlen);
  const T eps = static_cast<T>(kRmsEps);
  const int64_t n = dev.final_logp.dim(0);

  TunedLens<T> lens;
  for (auto& [label, state] : dev.boundaries) {
    LensHead<T> head;
    head.boundary = label;
    head.gain = Tensor<T>::from_data({model.final_norm.numel()},
                                     model.final_norm.values(), true);
    head.unembed = Tensor<T>::from_data(model.unembed.shape(), model.unembed.values(), true);

    const double init_kl = full_kl(state, head, dev.final_logp, eps);
    double best_kl = init_kl;
    std::vector<T> best_gain = head.gain.values();
    std::vector<T> best_unembed = head.unembed.values();

    std::vector<Tensor<T>> params{head.gain, head.unembed};
    AdamWConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    OptimizerState<T> opt = make_adamw<T>(params, acfg);

    Rng rng(cfg.seed ^ fnv1a_bytes(label.data(), label.size()));
    std::vector<int64_t> rows(static_cast<size_t>(std::min<int64_t>(cfg.batch_rows, n)));
    for (int64_t step = 0; step < cfg.steps; ++step) {
      for (auto& r : rows) r = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
      Tensor<T> h = gather_rows_plain(state, rows);
      Tensor<T> t = gather_rows_plain(dev.final_logp, rows);
      Tensor<T> hn = ops::rms_norm(h, head.gain, eps);
      Tensor<T> logits = ops::matmul(hn, head.unembed, false, true);
      Tensor<T> loss = ops::kl_vs_target(logits, t);
      backward(loss);
      adamw_step(params, opt, cfg.lr);
      for (auto& p : params) p.zero_grad();

      if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
        const double kl = full_kl(state, head, dev.final_logp, eps);
        check(kl <= init_kl * 10.0 + 1e-6, ErrorKind::Numeric,
              "lens training diverged at boundary " + label);
        if (kl < best_kl) {
          best_kl = kl;
          best_gain = head.gain.values();
          best_unembed = head.unembed.values();
        }
      }
    }
    head.gain.values() = best_gain;
    head.unembed.values() = best_unembed;
    lens.heads.push_back(std::move(head));
  }
  return lens;
}

template <typename T>
KLProfile lens_kl_profile(const Model<T>& model, const TunedLens<T>& lens,
                          const std::vector<int32_t>& data, int batch, int seqlen) {
  DevsetStates<T> dev = collect_states(model, data, batch, seqlen);
  check(dev.boundaries.size() == lens.heads.size(), ErrorKind::Dimension,
        "lens was trained for a different model layout");
  KLProfile profile;
  const T eps = static_cast<T>(kRmsEps);
  for (size_t i = 0; i < lens.heads.size(); ++i) {
    check(dev.boundaries[i].first == lens.heads[i].boundary, ErrorKind::Dimension,
          "boundary labels disagree: " + dev.boundaries[i].first);
    const double kl = full_kl(dev.boundaries[i].second, lens.heads[i], dev.final_logp, eps);
    check(kl >= -1e-9, ErrorKind::Numeric, "negative KL in lens profile");
    profile.per_boundary.emplace_back(lens.heads[i].boundary, kl);
  }
  return profile;
}

void write_profile_csv(const KLProfile& profile, const std::string& path) {
  std::ofstream os(path);
  check(os.good(), ErrorKind::Io, "cannot write " + path);
  os << "boundary,mean_kl_nats\n";
  for (const auto& [label, kl] : profile.per_boundary) os << label << "," << kl << "\n";
}

template <typename T>
std::vector<AccessKlRecord> access_kl_stats(const Model<T>& model,
                                            const std::vector<int32_t>& data, int batch,
                                            int seqlen) {
  check(!model.l3.empty(), ErrorKind::Config, "access_kl_stats needs an L3 model");
  NoGradGuard ng;
  std::vector<std::pair<std::string, Tensor<T>>> trace;
  model.forward(data, batch, seqlen, &trace);
  const auto& alloc = *model.allocation();

  // pre-L3 boundary states are the inputs of the corresponding L3 layers
  std::vector<Tensor<T>> l3_inputs;
  for (size_t i = 0; i < trace.size(); ++i)
    if (trace[i].first.find("+l3") != std::string::npos) l3_inputs.push_back(trace[i - 1].second);
  check(l3_inputs.size() == model.l3.size(), ErrorKind::Internal, "trace misses L3 boundaries");

  std::map<std::pair<int, int32_t>, std::pair<double, int64_t>> acc;  // (layer, token) -> (sum, n)
  for (size_t li = 0; li < model.l3.size(); ++li) {
    const auto& lp = model.l3[li];
    const Tensor<T>& h = l3_inputs[li];
    const int64_t n = h.dim(0);
    const int64_t d_in = lp.d_in;
    std::vector<double> kls(static_cast<size_t>(n));
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < n; ++r) {
      const int32_t tok = data[static_cast<size_t>(r)];
      auto [lo, hi] = alloc.range_for(tok);
      const int64_t dt = hi - lo;
      // normalize, score, softmax, entropy
      std::vector<T> xn(static_cast<size_t>(d_in));
      kernels::serial::rms_norm_rows<T>(h.data() + r * d_in, lp.norm_in.data(), xn.data(),
                                        nullptr, 1, d_in, static_cast<T>(kRmsEps));
      std::vector<double> s(static_cast<size_t>(dt));
      double mx = -1e300;
      for (int64_t j = 0; j < dt; ++j) {
        const T* kr = lp.w_k.data() + (lo + j) * d_in;
        double acc_s = 0;
        for (int64_t c = 0; c < d_in; ++c)
          acc_s += static_cast<double>(kr[c]) * static_cast<double>(xn[static_cast<size_t>(c)]);
        s[static_cast<size_t>(j)] = acc_s;
        mx = std::max(mx, acc_s);
      }
      double sum = 0;
      for (auto& sv : s) {
        sv = std::exp(sv - mx);
        sum += sv;
      }
      double entropy = 0;
      for (auto& sv : s) {
        const double p = sv / sum;
        if (p > 0) entropy -= p * std::log(p);
      }
      kls[static_cast<size_t>(r)] = std::log(static_cast<double>(dt)) - entropy;
    }
    for (int64_t r = 0; r < n; ++r) {
      auto& slot = acc[{static_cast<int>(li), data[static_cast<size_t>(r)]}];
      slot.first += kls[static_cast<size_t>(r)];
      slot.second += 1;
    }
  }

  std::vector<AccessKlRecord> records;
  records.reserve(acc.size());
  for (const auto& [key, val] : acc) {
    AccessKlRecord rec;
    rec.layer = key.first;
    rec.token = key.second;
    rec.d_t = alloc.count_for(key.second);
    rec.ln_d = std::log(static_cast<double>(rec.d_t));
    rec.mean_kl = val.first / static_cast<double>(val.second);
    rec.count = val.second;
    check(rec.mean_kl >= -1e-9, ErrorKind::Numeric, "negative access KL");
    check(rec.mean_kl <= rec.ln_d + 1e-9, ErrorKind::Numeric, "access KL above entropy bound");
    records.push_back(rec);
  }
  return records;
}

void write_access_csv(const std::vector<AccessKlRecord>& records, const std::string& path) {
  std::ofstream os(path);
  check(os.good(), ErrorKind::Io, "cannot write " + path);
  os << "token_id,layer,d_t,ln_d_t,mean_kl,count\n";
  for (const auto& r : records)
    os << r.token << "," << r.layer << "," << r.d_t << "," << r.ln_d << "," << r.mean_kl << ","
       << r.count << "\n";
}

#define L3_INSTANTIATE_ANALYSIS(T)                                                            \
  template TunedLens<T> train_tuned_lens<T>(const Model<T>&, const std::vector<int32_t>&,    \
                                            int, int, const LensTrainConfig&);               \
  template KLProfile lens_kl_profile<T>(const Model<T>&, const TunedLens<T>&,                \
                                        const std::vector<int32_t>&, int, int);              \
  template std::vector<AccessKlRecord> access_kl_stats<T>(const Model<T>&,                   \
                                                          const std::vector<int32_t>&, int,  \
                                                          int);
L3_INSTANTIATE_ANALYSIS(float)
L3_INSTANTIATE_ANALYSIS(double)
#undef L3_INSTANTIATE_ANALYSIS

}  // namespace l3
