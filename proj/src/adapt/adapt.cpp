#include "promptlab/adapt/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <functional>
#include <numeric>

#include "promptlab/core/error.hpp"
#include "promptlab/core/ops.hpp"
#include "promptlab/core/rng.hpp"
#include "promptlab/vlm/container.hpp"

namespace promptlab::adapt {

using namespace promptlab::core;
using vlm::PromptSegment;
using vlm::VLModel;

namespace {

constexpr uint64_t kTagPromptInit = 0x9401717;
constexpr uint64_t kTagPromptOrder = 0x0d37;
constexpr uint64_t kTagIclSample = 0x1c1;

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0 || batch_size < 1 || lr <= 0.0) {
    throw ConfigError(
        "TrainConfig: epochs must be >= 0, batch_size >= 1, lr > 0");
  }
}

std::string variant_name(PromptVariant v) {
  switch (v) {
    case PromptVariant::Prol: return "prol";
    case PromptVariant::ManProl: return "man_prol";
    case PromptVariant::CoProl: return "co_prol";
    case PromptVariant::Robust: return "robust_prol";
    case PromptVariant::RobustSS: return "rpol_ss";
  }
  return "unknown";
}

PromptVariant variant_from_name(const std::string& name) {
  if (name == "prol") return PromptVariant::Prol;
  if (name == "man_prol") return PromptVariant::ManProl;
  if (name == "co_prol") return PromptVariant::CoProl;
  if (name == "robust_prol") return PromptVariant::Robust;
  if (name == "rpol_ss") return PromptVariant::RobustSS;
  throw ValueError("unknown prompt variant: " + name);
}

int PromptParams::learnable_tokens() const {
  switch (variant) {
    case PromptVariant::Prol:
    case PromptVariant::CoProl:
      return ctx.dim(0) + query.dim(0);
    case PromptVariant::ManProl:
      return ctx.dim(0);
    case PromptVariant::Robust:
    case PromptVariant::RobustSS:
      return ctx1.dim(0) + ctx2.dim(0) + query.dim(0);
  }
  return 0;
}

std::vector<double> ve_feature(const VLModel& model,
                               const synth::ImageSample& img) {
  Tensor tokens = vlm::visual_tokens(nullptr, model, img);
  Tensor pooled = mean_rows(nullptr, tokens);
  return std::vector<double>(pooled.data(), pooled.data() + pooled.size());
}

double cosine_similarity(const std::vector<double>& a,
                         const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: length mismatch");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

std::vector<std::vector<double>> support_features(
    const VLModel& model, const synth::SupportSet& support) {
  std::vector<std::vector<double>> feats;
  feats.reserve(support.entries.size());
  for (const auto& e : support.entries) {
    feats.push_back(ve_feature(model, e.sample));
  }
  return feats;
}

// Indices ordered by descending similarity, ties toward the lower index.
std::vector<size_t> ranked_by_similarity(
    const std::vector<std::vector<double>>& feats,
    const std::vector<double>& query) {
  std::vector<std::pair<double, size_t>> order;
  order.reserve(feats.size());
  for (size_t i = 0; i < feats.size(); ++i) {
    order.emplace_back(cosine_similarity(feats[i], query), i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<size_t> idx;
  idx.reserve(order.size());
  for (const auto& [sim, i] : order) idx.push_back(i);
  return idx;
}

}  // namespace

std::vector<std::vector<double>> compute_support_features(
    const VLModel& model, const synth::SupportSet& support) {
  return support_features(model, support);
}

int knn_classify(const VLModel& model, const synth::SupportSet& support,
                 const synth::ImageSample& img, int k) {
  return knn_classify_with(support, support_features(model, support),
                           ve_feature(model, img), k);
}

int knn_classify_with(const synth::SupportSet& support,
                      const std::vector<std::vector<double>>& feats,
                      const std::vector<double>& query, int k) {
  if (support.entries.empty()) throw ValueError("knn_classify: empty support");
  if (k < 1 || k > static_cast<int>(support.entries.size())) {
    throw ValueError("knn_classify: k=" + std::to_string(k) +
                     " outside [1," + std::to_string(support.entries.size()) +
                     "]");
  }
  const auto ranked = ranked_by_similarity(feats, query);

  struct Vote {
    int count = 0;
    double sim_sum = 0.0;
  };
  std::vector<std::pair<int, Vote>> votes;  // class id -> vote
  for (int i = 0; i < k; ++i) {
    const size_t idx = ranked[i];
    const int cid = support.entries[idx].class_id;
    const double sim = cosine_similarity(feats[idx], query);
    auto it = std::find_if(votes.begin(), votes.end(),
                           [cid](const auto& v) { return v.first == cid; });
    if (it == votes.end()) {
      votes.push_back({cid, {1, sim}});
    } else {
      it->second.count += 1;
      it->second.sim_sum += sim;
    }
  }
  int best = -1;
  Vote best_vote;
  for (const auto& [cid, vote] : votes) {
    const double mean_sim = vote.sim_sum / vote.count;
    bool take = false;
    if (best < 0 || vote.count > best_vote.count) {
      take = true;
    } else if (vote.count == best_vote.count) {
      const double best_mean = best_vote.sim_sum / best_vote.count;
      // Smaller mean cosine distance == larger mean similarity.
      if (mean_sim > best_mean || (mean_sim == best_mean && cid < best)) {
        take = true;
      }
    }
    if (take) {
      best = cid;
      best_vote = vote;
    }
  }
  return best;
}

int zero_shot_classify(const VLModel& model, const synth::ImageSample& img,
                       const std::vector<int>& label_ids) {
  return vlm::classify(
      model, {}, img,
      {PromptSegment::text(vlm::manual_query_tokens(model.tokenizer))},
      label_ids);
}

int LinearProbe::predict(const std::vector<double>& feature) const {
  if (static_cast<int>(feature.size()) != feature_dim) {
    throw ShapeError("LinearProbe: feature length mismatch");
  }
  int best = class_ids[0];
  double best_score = -1e300;
  for (size_t c = 0; c < class_ids.size(); ++c) {
    double s = bias[c];
    const double* w = weights.data() + c * feature_dim;
    for (int j = 0; j < feature_dim; ++j) s += w[j] * feature[j];
    if (s > best_score) {
      best_score = s;
      best = class_ids[c];
    }
  }
  return best;
}

LinearProbe linear_probe_train(const VLModel& model,
                               const std::vector<synth::ImageSample>& samples,
                               const std::vector<int>& class_ids,
                               const ProbeConfig& cfg) {
  if (samples.empty()) throw ValueError("linear_probe_train: no samples");
  if (class_ids.empty()) throw ValueError("linear_probe_train: no classes");

  LinearProbe probe;
  probe.class_ids = class_ids;
  std::sort(probe.class_ids.begin(), probe.class_ids.end());

  std::vector<int> targets;  // index into probe.class_ids
  std::vector<bool> seen(probe.class_ids.size(), false);
  targets.reserve(samples.size());
  for (const auto& s : samples) {
    const auto it = std::lower_bound(probe.class_ids.begin(),
                                     probe.class_ids.end(), s.label);
    if (it == probe.class_ids.end() || *it != s.label) {
      throw ValueError("linear_probe_train: sample of class " +
                       std::to_string(s.label) + " outside the class list");
    }
    const size_t ci = static_cast<size_t>(it - probe.class_ids.begin());
    targets.push_back(static_cast<int>(ci));
    seen[ci] = true;
  }
  for (size_t c = 0; c < seen.size(); ++c) {
    if (!seen[c]) {
      throw ValueError("linear_probe_train: class " +
                       std::to_string(probe.class_ids[c]) +
                       " has no training sample");
    }
  }

  std::vector<std::vector<double>> feats;
  feats.reserve(samples.size());
  for (const auto& s : samples) feats.push_back(ve_feature(model, s));
  const int d = static_cast<int>(feats[0].size());
  const int n_classes = static_cast<int>(probe.class_ids.size());
  const size_t n = samples.size();
  probe.feature_dim = d;
  probe.weights.assign(static_cast<size_t>(n_classes) * d, 0.0);
  probe.bias.assign(n_classes, 0.0);

  std::vector<double> gw(probe.weights.size());
  std::vector<double> gb(probe.bias.size());
  std::vector<double> logits(n_classes);
  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (size_t i = 0; i < n; ++i) {
      const double* f = feats[i].data();
      double mx = -1e300;
      for (int c = 0; c < n_classes; ++c) {
        double s = probe.bias[c];
        const double* w = probe.weights.data() + static_cast<size_t>(c) * d;
        for (int j = 0; j < d; ++j) s += w[j] * f[j];
        logits[c] = s;
        mx = std::max(mx, s);
      }
      double sum = 0.0;
      for (int c = 0; c < n_classes; ++c) {
        logits[c] = std::exp(logits[c] - mx);
        sum += logits[c];
      }
      for (int c = 0; c < n_classes; ++c) {
        const double p = logits[c] / sum;
        const double err = p - (c == targets[i] ? 1.0 : 0.0);
        gb[c] += err;
        double* gwr = gw.data() + static_cast<size_t>(c) * d;
        for (int j = 0; j < d; ++j) gwr[j] += err * f[j];
      }
    }
    double max_grad = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (size_t i = 0; i < gw.size(); ++i) {
      gw[i] *= inv_n;
      max_grad = std::max(max_grad, std::abs(gw[i]));
    }
    for (size_t i = 0; i < gb.size(); ++i) {
      gb[i] *= inv_n;
      max_grad = std::max(max_grad, std::abs(gb[i]));
    }
    probe.iters_run = iter + 1;
    if (max_grad < cfg.tol) break;
    for (size_t i = 0; i < gw.size(); ++i) probe.weights[i] -= cfg.lr * gw[i];
    for (size_t i = 0; i < gb.size(); ++i) probe.bias[i] -= cfg.lr * gb[i];
  }

  size_t correct = 0;
  for (size_t i = 0; i < n; ++i) {
    correct += probe.predict(feats[i]) == samples[i].label ? 1 : 0;
  }
  probe.train_accuracy = static_cast<double>(correct) / n;
  return probe;
}

namespace {

std::vector<PromptSegment> demo_segments(const VLModel& model,
                                         const synth::SupportSet& support,
                                         const std::vector<size_t>& indices) {
  const auto& tok = model.tokenizer;
  std::vector<PromptSegment> out;
  out.reserve(indices.size() * 2);
  for (size_t idx : indices) {
    const auto& entry = support.entries[idx];
    out.push_back(PromptSegment::visual(
        vlm::visual_tokens(nullptr, model, entry.sample)));
    out.push_back(PromptSegment::text({tok.id("this"), tok.id("is"),
                                       tok.id("a"),
                                       tok.class_token(entry.class_id),
                                       tok.eoc_id()}));
  }
  return out;
}

}  // namespace

std::vector<PromptSegment> icl_random(const VLModel& model,
                                      const synth::SupportSet& support,
                                      int k, uint64_t seed) {
  const size_t n = support.entries.size();
  if (k < 1 || static_cast<size_t>(k) > n) {
    throw ValueError("icl_random: k=" + std::to_string(k) + " outside [1," +
                     std::to_string(n) + "]");
  }
  Rng rng(derive_seed(seed, {kTagIclSample}));
  std::vector<size_t> indices(n);
  std::iota(indices.begin(), indices.end(), size_t{0});
  // Forward Fisher-Yates prefix: the first k slots are the sampled order.
  for (int i = 0; i < k; ++i) {
    const size_t j = i + rng.below(n - i);
    std::swap(indices[i], indices[j]);
  }
  indices.resize(k);
  return demo_segments(model, support, indices);
}

std::vector<PromptSegment> icl_rice(const VLModel& model,
                                    const synth::SupportSet& support,
                                    const synth::ImageSample& test_img,
                                    int k) {
  return icl_rice_with(model, support, support_features(model, support),
                       ve_feature(model, test_img), k);
}

std::vector<PromptSegment> icl_rice_with(
    const VLModel& model, const synth::SupportSet& support,
    const std::vector<std::vector<double>>& feats,
    const std::vector<double>& query, int k) {
  const size_t n = support.entries.size();
  if (k < 1 || static_cast<size_t>(k) > n) {
    throw ValueError("icl_rice: k=" + std::to_string(k) + " outside [1," +
                     std::to_string(n) + "]");
  }
  return demo_segments(model, support, rice_selection(feats, query, k));
}

std::vector<size_t> rice_selection(
    const std::vector<std::vector<double>>& support_feats,
    const std::vector<double>& query_feat, int k) {
  std::vector<size_t> ranked = ranked_by_similarity(support_feats, query_feat);
  ranked.resize(k);
  // Most similar demo goes last, adjacent to the query image.
  std::reverse(ranked.begin(), ranked.end());
  return ranked;
}

int icl_classify(const VLModel& model,
                 const std::vector<PromptSegment>& context,
                 const synth::ImageSample& img,
                 const std::vector<int>& label_ids) {
  return vlm::classify(
      model, context, img,
      {PromptSegment::text(vlm::manual_query_tokens(model.tokenizer))},
      label_ids);
}

// ---------------------------------------------------------------------------
// Soft-prompt training
// ---------------------------------------------------------------------------

namespace {

Tensor normal_init(std::vector<int> shape, Rng& rng, double std_dev = 1.0) {
  Tensor t(std::move(shape), true);
  double* p = t.data();
  for (size_t i = 0; i < t.size(); ++i) p[i] = rng.normal() * std_dev;
  return t;
}

using SegmentBuilder =
    std::function<std::vector<PromptSegment>(core::Tape*, size_t)>;

void run_prompt_training(const VLModel& model, PromptParams& params,
                         const TrainConfig& cfg, size_t n_samples,
                         const SegmentBuilder& build,
                         const std::vector<int>& label_tokens,
                         const std::vector<Tensor>& learnables,
                         const std::function<double()>* holdout_eval) {
  model.require_frozen("prompt training");
  if (n_samples == 0) throw ValueError("prompt training: empty support set");

  Rng order_rng(derive_seed(cfg.seed, {kTagPromptOrder}));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order(n_samples);
    std::iota(order.begin(), order.end(), size_t{0});
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (size_t bs = 0; bs < n_samples;
         bs += static_cast<size_t>(cfg.batch_size)) {
      const size_t be =
          std::min(n_samples, bs + static_cast<size_t>(cfg.batch_size));
      for (const Tensor& t : learnables) {
        Tensor handle = t;
        handle.zero_grad();
      }
      for (size_t i = bs; i < be; ++i) {
        const size_t idx = order[i];
        core::Tape tape;
        double lv = 0.0;
        try {
          std::vector<PromptSegment> segments = build(&tape, idx);
          segments.push_back(PromptSegment::text({label_tokens[idx]}));
          Tensor logits = vlm::forward_logits(&tape, model, segments);
          const int t = logits.dim(0);
          std::vector<int> targets(t, 0);
          std::vector<bool> mask(t, false);
          targets[t - 2] = label_tokens[idx];
          mask[t - 2] = true;
          Tensor loss = cross_entropy(&tape, logits, targets, mask);
          lv = loss.item();
          if (std::isfinite(lv)) tape.backward(loss);
        } catch (const NumericError& e) {
          lv = std::numeric_limits<double>::quiet_NaN();
        }
        if (!std::isfinite(lv)) {
          throw DivergenceError("prompt training: non-finite loss at epoch " +
                                std::to_string(epoch) + " with lr " +
                                std::to_string(cfg.lr));
        }
        epoch_loss += lv;
      }
      const double step = cfg.lr / static_cast<double>(be - bs);
      for (const Tensor& t : learnables) {
        Tensor handle = t;
        double* w = handle.data();
        const double* g = handle.grad();
        const size_t sz = handle.size();
        for (size_t j = 0; j < sz; ++j) w[j] -= step * g[j];
      }
    }
    params.train_loss.push_back(epoch_loss / static_cast<double>(n_samples));
    if (holdout_eval) params.holdout_loss.push_back((*holdout_eval)());
  }
  if (model.digest() != model.frozen_digest) {
    throw ProtocolError("prompt training mutated the frozen model");
  }
}

synth::ImageSample sample_at_scale(const synth::ImageSample& s, int scale) {
  if (s.scale == scale) return s;
  return synth::materialize_at_scale(s, scale);
}

// -log P(label | prefix) for a holdout sample under the current prompt.
double holdout_sample_loss(const VLModel& model,
                           const std::vector<PromptSegment>& prefix,
                           int class_id) {
  const auto scores = vlm::class_scores(model, prefix, {class_id});
  return -scores[0];
}

}  // namespace

PromptParams prol_train(const VLModel& model, const synth::SupportSet& support,
                        int ctx_tokens, int query_tokens,
                        const TrainConfig& cfg, int scale,
                        const std::vector<synth::ImageSample>* holdout) {
  cfg.validate();
  if (ctx_tokens < 1 || query_tokens < 1) {
    throw ConfigError("prol_train: token counts must be positive");
  }
  const int d = model.lm_config.d_model;
  Rng rng(derive_seed(cfg.seed, {kTagPromptInit}));
  PromptParams p;
  p.variant = PromptVariant::Prol;
  p.ctx = normal_init({ctx_tokens, d}, rng);
  p.query = normal_init({query_tokens, d}, rng);
  p.scale = scale;
  p.train_echo = cfg;

  std::vector<Tensor> vis;
  std::vector<int> labels;
  for (const auto& e : support.entries) {
    vis.push_back(
        vlm::visual_tokens(nullptr, model, sample_at_scale(e.sample, scale)));
    labels.push_back(model.tokenizer.class_token(e.class_id));
  }

  SegmentBuilder build = [&](core::Tape*, size_t i) {
    return std::vector<PromptSegment>{PromptSegment::soft(p.ctx),
                                      PromptSegment::visual(vis[i]),
                                      PromptSegment::soft(p.query)};
  };

  std::function<double()> holdout_fn;
  std::vector<Tensor> hvis;
  std::vector<int> hlabel;
  if (holdout) {
    for (const auto& s : *holdout) {
      hvis.push_back(
          vlm::visual_tokens(nullptr, model, sample_at_scale(s, scale)));
      hlabel.push_back(s.label);
    }
    holdout_fn = [&]() {
      double total = 0.0;
      for (size_t i = 0; i < hvis.size(); ++i) {
        total += holdout_sample_loss(
            model,
            {PromptSegment::soft(p.ctx), PromptSegment::visual(hvis[i]),
             PromptSegment::soft(p.query)},
            hlabel[i]);
      }
      return total / static_cast<double>(hvis.size());
    };
  }

  run_prompt_training(model, p, cfg, support.entries.size(), build, labels,
                      {p.ctx, p.query}, holdout ? &holdout_fn : nullptr);
  return p;
}

PromptParams man_prol_train(const VLModel& model,
                            const synth::SupportSet& support, int ctx_tokens,
                            const TrainConfig& cfg) {
  cfg.validate();
  if (ctx_tokens < 1) {
    throw ConfigError("man_prol_train: token count must be positive");
  }
  const int d = model.lm_config.d_model;
  Rng rng(derive_seed(cfg.seed, {kTagPromptInit}));
  PromptParams p;
  p.variant = PromptVariant::ManProl;
  p.ctx = normal_init({ctx_tokens, d}, rng);
  p.manual_query = vlm::manual_query_tokens(model.tokenizer);
  p.query =
      embedding_lookup(nullptr, model.we.get("we.tok_emb"), p.manual_query);
  p.scale = synth::kPretrainScale;
  p.train_echo = cfg;

  std::vector<Tensor> vis;
  std::vector<int> labels;
  for (const auto& e : support.entries) {
    vis.push_back(vlm::visual_tokens(nullptr, model, e.sample));
    labels.push_back(model.tokenizer.class_token(e.class_id));
  }
  SegmentBuilder build = [&](core::Tape*, size_t i) {
    return std::vector<PromptSegment>{PromptSegment::soft(p.ctx),
                                      PromptSegment::visual(vis[i]),
                                      PromptSegment::soft(p.query)};
  };
  run_prompt_training(model, p, cfg, support.entries.size(), build, labels,
                      {p.ctx}, nullptr);
  return p;
}

namespace {

nn::ParamSet init_metanet(int d, Rng& rng) {
  nn::ParamSet net;
  const int hidden = std::max(1, d / 4);
  net.add("mnet.w1", normal_init({d, hidden}, rng, 0.02));
  net.add("mnet.b1", Tensor::zeros({hidden}, true));
  // Zero-initialized output layer: the conditioning starts as a no-op.
  net.add("mnet.w2", Tensor::zeros({hidden, d}, true));
  net.add("mnet.b2", Tensor::zeros({d}, true));
  return net;
}

Tensor metanet_shift(core::Tape* tape, const nn::ParamSet& net,
                     const Tensor& mean_token_row) {
  Tensor h = gelu(tape, add_rowvec(tape,
                                   matmul(tape, mean_token_row,
                                          net.get("mnet.w1")),
                                   net.get("mnet.b1")));
  Tensor out = add_rowvec(tape, matmul(tape, h, net.get("mnet.w2")),
                          net.get("mnet.b2"));
  return reshape(tape, out, {out.dim(1)});
}

}  // namespace

PromptParams co_prol_train(const VLModel& model,
                           const synth::SupportSet& support, int ctx_tokens,
                           int query_tokens, const TrainConfig& cfg) {
  cfg.validate();
  if (ctx_tokens < 1 || query_tokens < 1) {
    throw ConfigError("co_prol_train: token counts must be positive");
  }
  const int d = model.lm_config.d_model;
  Rng rng(derive_seed(cfg.seed, {kTagPromptInit}));
  PromptParams p;
  p.variant = PromptVariant::CoProl;
  p.ctx = normal_init({ctx_tokens, d}, rng);
  p.query = normal_init({query_tokens, d}, rng);
  p.metanet = init_metanet(d, rng);
  p.scale = synth::kPretrainScale;
  p.train_echo = cfg;

  std::vector<Tensor> vis;
  std::vector<Tensor> mean_vis;
  std::vector<int> labels;
  for (const auto& e : support.entries) {
    vis.push_back(vlm::visual_tokens(nullptr, model, e.sample));
    mean_vis.push_back(mean_rows(nullptr, vis.back()));
    labels.push_back(model.tokenizer.class_token(e.class_id));
  }

  SegmentBuilder build = [&](core::Tape* tape, size_t i) {
    Tensor shift = metanet_shift(tape, p.metanet, mean_vis[i]);
    Tensor ctx_eff = add_rowvec(tape, p.ctx, shift);
    return std::vector<PromptSegment>{PromptSegment::soft(ctx_eff),
                                      PromptSegment::visual(vis[i]),
                                      PromptSegment::soft(p.query)};
  };

  std::vector<Tensor> learnables = {p.ctx, p.query};
  for (const auto& [name, t] : p.metanet.items()) learnables.push_back(t);
  run_prompt_training(model, p, cfg, support.entries.size(), build, labels,
                      learnables, nullptr);
  return p;
}

namespace {

PromptParams robust_train_impl(const VLModel& model,
                               const synth::SupportSet& support,
                               std::array<int, 3> scales, int ctx_tokens,
                               int query_tokens, const TrainConfig& cfg,
                               PromptVariant variant,
                               const std::vector<synth::ImageSample>* holdout) {
  cfg.validate();
  if (ctx_tokens < 2 || ctx_tokens % 2 != 0) {
    throw ConfigError("robust prompt training: context token count " +
                      std::to_string(ctx_tokens) +
                      " must be even (the context splits into two pieces)");
  }
  if (query_tokens < 1) {
    throw ConfigError("robust prompt training: query tokens must be positive");
  }
  const int d = model.lm_config.d_model;
  Rng rng(derive_seed(cfg.seed, {kTagPromptInit}));
  PromptParams p;
  p.variant = variant;
  p.ctx1 = normal_init({ctx_tokens / 2, d}, rng);
  p.ctx2 = normal_init({ctx_tokens / 2, d}, rng);
  p.query = normal_init({query_tokens, d}, rng);
  p.scales = scales;
  p.scale = scales[2];
  p.train_echo = cfg;

  // Visual tokens per sample per scale slot. Identical scales share one
  // render and one encoder pass.
  std::vector<std::array<Tensor, 3>> vis(support.entries.size());
  std::vector<int> labels;
  for (size_t i = 0; i < support.entries.size(); ++i) {
    const auto& e = support.entries[i];
    for (int slot = 0; slot < 3; ++slot) {
      bool reused = false;
      for (int prev = 0; prev < slot; ++prev) {
        if (scales[prev] == scales[slot]) {
          vis[i][slot] = vis[i][prev];
          reused = true;
          break;
        }
      }
      if (!reused) {
        vis[i][slot] = vlm::visual_tokens(
            nullptr, model, sample_at_scale(e.sample, scales[slot]));
      }
    }
    labels.push_back(model.tokenizer.class_token(e.class_id));
  }

  SegmentBuilder build = [&](core::Tape*, size_t i) {
    return std::vector<PromptSegment>{
        PromptSegment::visual(vis[i][0]), PromptSegment::soft(p.ctx1),
        PromptSegment::visual(vis[i][1]), PromptSegment::soft(p.ctx2),
        PromptSegment::visual(vis[i][2]), PromptSegment::soft(p.query)};
  };

  std::function<double()> holdout_fn;
  std::vector<std::array<Tensor, 3>> hvis;
  std::vector<int> hlabel;
  if (holdout) {
    hvis.resize(holdout->size());
    for (size_t i = 0; i < holdout->size(); ++i) {
      for (int slot = 0; slot < 3; ++slot) {
        hvis[i][slot] = vlm::visual_tokens(
            nullptr, model, sample_at_scale((*holdout)[i], scales[slot]));
      }
      hlabel.push_back((*holdout)[i].label);
    }
    holdout_fn = [&]() {
      double total = 0.0;
      for (size_t i = 0; i < hvis.size(); ++i) {
        total += holdout_sample_loss(
            model,
            {PromptSegment::visual(hvis[i][0]), PromptSegment::soft(p.ctx1),
             PromptSegment::visual(hvis[i][1]), PromptSegment::soft(p.ctx2),
             PromptSegment::visual(hvis[i][2]), PromptSegment::soft(p.query)},
            hlabel[i]);
      }
      return total / static_cast<double>(hvis.size());
    };
  }

  run_prompt_training(model, p, cfg, support.entries.size(), build, labels,
                      {p.ctx1, p.ctx2, p.query},
                      holdout ? &holdout_fn : nullptr);
  return p;
}

}  // namespace

PromptParams robust_prol_train(
    const VLModel& model, const synth::SupportSet& support,
    std::array<int, 3> scales, int ctx_tokens, int query_tokens,
    const TrainConfig& cfg, const std::vector<synth::ImageSample>* holdout) {
  if (scales[2] != synth::kPretrainScale) {
    throw ConfigError(
        "robust_prol_train: the last scale must be the pretraining scale " +
        std::to_string(synth::kPretrainScale));
  }
  return robust_train_impl(model, support, scales, ctx_tokens, query_tokens,
                           cfg, PromptVariant::Robust, holdout);
}

PromptParams rpol_ss_train(const VLModel& model,
                           const synth::SupportSet& support, int scale,
                           int ctx_tokens, int query_tokens,
                           const TrainConfig& cfg) {
  PromptParams p =
      robust_train_impl(model, support, {scale, scale, scale}, ctx_tokens,
                        query_tokens, cfg, PromptVariant::RobustSS, nullptr);
  p.scale = scale;
  return p;
}

MultiScaleImage MultiScaleImage::materialize(const synth::ImageSample& sample,
                                             std::span<const int> scales) {
  MultiScaleImage out;
  for (int s : scales) {
    if (out.has_scale(s)) continue;
    if (sample.scale == s) {
      out.views.push_back(sample);
    } else {
      out.views.push_back(synth::materialize_at_scale(sample, s));
    }
  }
  return out;
}

MultiScaleImage MultiScaleImage::single(synth::ImageSample sample) {
  MultiScaleImage out;
  out.views.push_back(std::move(sample));
  return out;
}

const synth::ImageSample& MultiScaleImage::at_scale(int scale) const {
  for (const auto& v : views) {
    if (v.scale == scale) return v;
  }
  throw ValueError("MultiScaleImage: no view at scale " +
                   std::to_string(scale));
}

bool MultiScaleImage::has_scale(int scale) const {
  for (const auto& v : views) {
    if (v.scale == scale) return true;
  }
  return false;
}

std::vector<double> prompt_scores(const VLModel& model,
                                  const PromptParams& params,
                                  const MultiScaleImage& img,
                                  const std::vector<int>& sorted_label_ids) {
  switch (params.variant) {
    case PromptVariant::Prol:
    case PromptVariant::ManProl: {
      Tensor v =
          vlm::visual_tokens(nullptr, model, img.at_scale(params.scale));
      return vlm::class_scores(model,
                               {PromptSegment::soft(params.ctx),
                                PromptSegment::visual(v),
                                PromptSegment::soft(params.query)},
                               sorted_label_ids);
    }
    case PromptVariant::CoProl: {
      Tensor v =
          vlm::visual_tokens(nullptr, model, img.at_scale(params.scale));
      Tensor shift =
          metanet_shift(nullptr, params.metanet, mean_rows(nullptr, v));
      Tensor ctx_eff = add_rowvec(nullptr, params.ctx, shift);
      return vlm::class_scores(model,
                               {PromptSegment::soft(ctx_eff),
                                PromptSegment::visual(v),
                                PromptSegment::soft(params.query)},
                               sorted_label_ids);
    }
    case PromptVariant::Robust:
    case PromptVariant::RobustSS: {
      std::array<Tensor, 3> v;
      for (int slot = 0; slot < 3; ++slot) {
        bool reused = false;
        for (int prev = 0; prev < slot; ++prev) {
          if (params.scales[prev] == params.scales[slot]) {
            v[slot] = v[prev];
            reused = true;
            break;
          }
        }
        if (!reused) {
          v[slot] = vlm::visual_tokens(nullptr, model,
                                       img.at_scale(params.scales[slot]));
        }
      }
      return vlm::class_scores(
          model,
          {PromptSegment::visual(v[0]), PromptSegment::soft(params.ctx1),
           PromptSegment::visual(v[1]), PromptSegment::soft(params.ctx2),
           PromptSegment::visual(v[2]), PromptSegment::soft(params.query)},
          sorted_label_ids);
    }
  }
  throw ValueError("prompt_scores: unknown variant");
}

namespace {

int argmax_lowest_id(const std::vector<int>& sorted_ids,
                     const std::vector<double>& scores) {
  int best = sorted_ids[0];
  double best_score = scores[0];
  for (size_t i = 1; i < sorted_ids.size(); ++i) {
    if (scores[i] > best_score) {
      best_score = scores[i];
      best = sorted_ids[i];
    }
  }
  return best;
}

std::vector<int> sorted_ids(const std::vector<int>& label_ids) {
  if (label_ids.empty()) throw ValueError("classify: empty label set");
  std::vector<int> ids = label_ids;
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

int prol_classify(const VLModel& model, const PromptParams& params,
                  const synth::ImageSample& img,
                  const std::vector<int>& label_ids) {
  if (params.variant == PromptVariant::Robust ||
      params.variant == PromptVariant::RobustSS) {
    throw ValueError("prol_classify: use robust_prol_classify for " +
                     variant_name(params.variant));
  }
  const std::array<int, 1> need{params.scale};
  MultiScaleImage ms = MultiScaleImage::materialize(img, need);
  const std::vector<int> ids = sorted_ids(label_ids);
  return argmax_lowest_id(ids, prompt_scores(model, params, ms, ids));
}

int robust_prol_classify(const VLModel& model, const PromptParams& params,
                         const MultiScaleImage& img,
                         const std::vector<int>& label_ids) {
  if (params.variant != PromptVariant::Robust &&
      params.variant != PromptVariant::RobustSS) {
    throw ValueError("robust_prol_classify: got variant " +
                     variant_name(params.variant));
  }
  const std::vector<int> ids = sorted_ids(label_ids);
  return argmax_lowest_id(ids, prompt_scores(model, params, img, ids));
}

void EnsembleSpec::validate() const {
  if (members.empty()) throw ValueError("EnsembleSpec: no members");
  if (mode == Mode::SS) {
    for (const auto& m : members) {
      if (m.scale != members[0].scale) {
        throw ConfigError("EnsembleSpec: SS members must share one scale");
      }
    }
  } else {
    if (members.size() != 3) {
      throw ConfigError("EnsembleSpec: MS needs exactly three members");
    }
    std::vector<int> scales;
    for (const auto& m : members) scales.push_back(m.scale);
    std::sort(scales.begin(), scales.end());
    if (scales != std::vector<int>{16, 24, 32}) {
      throw ConfigError(
          "EnsembleSpec: MS member scales must cover {16,24,32}");
    }
  }
}

int ensemble_classify(const VLModel& model, const EnsembleSpec& spec,
                      const MultiScaleImage& img,
                      const std::vector<int>& label_ids) {
  spec.validate();
  const std::vector<int> ids = sorted_ids(label_ids);
  std::vector<double> mean_scores(ids.size(), 0.0);
  for (const PromptParams& member : spec.members) {
    const std::vector<double> s = prompt_scores(model, member, img, ids);
    for (size_t i = 0; i < ids.size(); ++i) mean_scores[i] += s[i];
  }
  for (double& s : mean_scores) s /= static_cast<double>(spec.members.size());
  return argmax_lowest_id(ids, mean_scores);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

Tensor vec_tensor(const std::vector<double>& v) {
  return Tensor::from_data({static_cast<int>(v.size())},
                           std::vector<double>(v));
}

}  // namespace

void save_prompt(const PromptParams& params, const std::string& path) {
  vlm::Container c;
  c.magic = "PRMT";
  c.seed = params.train_echo.seed;
  c.flag = static_cast<uint8_t>(params.variant);
  c.tensors.emplace_back(
      "meta.scales",
      Tensor::from_data({3}, {static_cast<double>(params.scales[0]),
                              static_cast<double>(params.scales[1]),
                              static_cast<double>(params.scales[2])}));
  c.tensors.emplace_back(
      "meta.scale",
      Tensor::from_data({1}, {static_cast<double>(params.scale)}));
  c.tensors.emplace_back(
      "meta.train",
      Tensor::from_data({3}, {static_cast<double>(params.train_echo.epochs),
                              static_cast<double>(params.train_echo.batch_size),
                              params.train_echo.lr}));
  if (params.ctx.defined()) c.tensors.emplace_back("prompt.ctx", params.ctx);
  if (params.ctx1.defined()) c.tensors.emplace_back("prompt.ctx1", params.ctx1);
  if (params.ctx2.defined()) c.tensors.emplace_back("prompt.ctx2", params.ctx2);
  if (params.query.defined()) {
    c.tensors.emplace_back("prompt.query", params.query);
  }
  if (!params.manual_query.empty()) {
    std::vector<double> ids;
    for (int id : params.manual_query) ids.push_back(id);
    c.tensors.emplace_back("meta.manual_query", vec_tensor(ids));
  }
  for (const auto& [name, t] : params.metanet.items()) {
    c.tensors.emplace_back(name, t);
  }
  if (!params.train_loss.empty()) {
    c.tensors.emplace_back("curve.train_loss", vec_tensor(params.train_loss));
  }
  if (!params.holdout_loss.empty()) {
    c.tensors.emplace_back("curve.holdout_loss",
                           vec_tensor(params.holdout_loss));
  }
  c.words = {variant_name(params.variant)};
  vlm::write_container(path, c);
}

PromptParams load_prompt(const std::string& path) {
  vlm::Container c = vlm::read_container(path, "PRMT");
  PromptParams p;
  p.variant = static_cast<PromptVariant>(c.flag);
  p.train_echo.seed = c.seed;
  for (auto& [name, t] : c.tensors) {
    if (name == "meta.scales") {
      for (int i = 0; i < 3; ++i) p.scales[i] = static_cast<int>(t.at(i));
    } else if (name == "meta.scale") {
      p.scale = static_cast<int>(t.at(0));
    } else if (name == "meta.train") {
      p.train_echo.epochs = static_cast<int>(t.at(0));
      p.train_echo.batch_size = static_cast<int>(t.at(1));
      p.train_echo.lr = t.at(2);
    } else if (name == "meta.manual_query") {
      for (size_t i = 0; i < t.size(); ++i) {
        p.manual_query.push_back(static_cast<int>(t.at(i)));
      }
    } else if (name == "prompt.ctx") {
      p.ctx = t;
    } else if (name == "prompt.ctx1") {
      p.ctx1 = t;
    } else if (name == "prompt.ctx2") {
      p.ctx2 = t;
    } else if (name == "prompt.query") {
      p.query = t;
    } else if (name.rfind("mnet.", 0) == 0) {
      p.metanet.add(name, t);
    } else if (name == "curve.train_loss") {
      p.train_loss.assign(t.data(), t.data() + t.size());
    } else if (name == "curve.holdout_loss") {
      p.holdout_loss.assign(t.data(), t.data() + t.size());
    } else {
      throw FormatError("load_prompt: unexpected tensor " + name);
    }
  }
  if (!c.words.empty() && c.words[0] != variant_name(p.variant)) {
    throw FormatError("load_prompt: variant tag mismatch");
  }
  return p;
}

}  // namespace promptlab::adapt
