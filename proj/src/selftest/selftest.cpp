#include "promptlab/selftest/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

#include "promptlab/adapt/adapt.hpp"
#include "promptlab/core/error.hpp"
#include "promptlab/core/gradcheck.hpp"
#include "promptlab/core/ops.hpp"
#include "promptlab/core/rng.hpp"
#include "promptlab/synth/synth.hpp"
#include "promptlab/vlm/container.hpp"
#include "promptlab/vlm/vlm.hpp"

namespace promptlab::selftest {

using namespace promptlab::core;
using vlm::PromptSegment;

namespace {

constexpr double kGradBound = 1e-4;

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad,
                     double scale_v = 1.0) {
  Tensor t(std::move(shape), requires_grad);
  for (size_t i = 0; i < t.size(); ++i) t.at(i) = rng.normal() * scale_v;
  return t;
}

// Scalar loss with non-uniform downstream gradients.
Tensor weighted_sum(Tape* tape, Tensor out, const Tensor& weights) {
  return sum_all(tape, mul(tape, std::move(out), weights));
}

CheckResult grad_result(const std::string& name, const GradCheckReport& rep) {
  CheckResult r;
  r.name = name;
  r.value = rep.max_rel_err;
  r.threshold = kGradBound;
  r.pass = rep.max_rel_err <= kGradBound;
  r.detail = std::to_string(rep.entries_checked) + " entries, worst at " +
             rep.worst_entry;
  return r;
}

// One-sample pretraining-style loss: <bos> [V(img)] this is a NAME <eoc>.
Tensor caption_loss(Tape* tape, const vlm::VLModel& model,
                    const synth::ImageSample& img) {
  const auto& tok = model.tokenizer;
  std::vector<PromptSegment> segments;
  std::vector<int> token_at;
  segments.push_back(PromptSegment::text({tok.bos_id()}));
  token_at.push_back(tok.bos_id());
  segments.push_back(
      PromptSegment::visual(vlm::visual_tokens(tape, model, img)));
  for (int j = 0; j < model.ve_config.token_count(); ++j) token_at.push_back(-1);
  const std::vector<int> caption = {tok.id("this"), tok.id("is"), tok.id("a"),
                                    tok.class_token(img.label), tok.eoc_id()};
  segments.push_back(PromptSegment::text(caption));
  for (int id : caption) token_at.push_back(id);

  Tensor logits = vlm::forward_logits(tape, model, segments);
  const int t = logits.dim(0);
  std::vector<int> targets(t, 0);
  std::vector<bool> mask(t, false);
  for (int i = 0; i + 1 < t; ++i) {
    if (token_at[i + 1] >= 0) {
      targets[i] = token_at[i + 1];
      mask[i] = true;
    }
  }
  return cross_entropy(tape, logits, targets, mask);
}

std::vector<Tensor> all_trainable(vlm::VLModel& model) {
  std::vector<Tensor> params;
  for (nn::ParamSet* set : {&model.ve, &model.we, &model.lm}) {
    for (auto& [name, t] : set->items()) {
      if (t.requires_grad()) params.push_back(t);
    }
  }
  return params;
}

// Independent cosine similarity for the oracles (no shared code path with
// adapt::cosine_similarity beyond the mathematical definition).
double oracle_cosine(const std::vector<double>& a,
                     const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Brute-force top-k by repeated max scan (selection order: higher sim first,
// ties toward the lower index).
std::vector<size_t> oracle_topk(const std::vector<double>& sims, int k) {
  std::vector<bool> used(sims.size(), false);
  std::vector<size_t> out;
  for (int round = 0; round < k; ++round) {
    int best = -1;
    for (size_t i = 0; i < sims.size(); ++i) {
      if (used[i]) continue;
      if (best < 0 || sims[i] > sims[static_cast<size_t>(best)]) {
        best = static_cast<int>(i);
      }
    }
    used[static_cast<size_t>(best)] = true;
    out.push_back(static_cast<size_t>(best));
  }
  return out;
}

int oracle_knn(const synth::SupportSet& support,
               const std::vector<double>& sims, int k) {
  const std::vector<size_t> top = oracle_topk(sims, k);
  std::map<int, std::pair<int, double>> votes;  // class -> (count, sim sum)
  for (size_t idx : top) {
    auto& v = votes[support.entries[idx].class_id];
    v.first += 1;
    v.second += sims[idx];
  }
  int best = -1;
  int best_count = -1;
  double best_mean = -2.0;
  for (const auto& [cid, v] : votes) {
    const double mean = v.second / v.first;
    if (v.first > best_count ||
        (v.first == best_count && (mean > best_mean ||
                                   (mean == best_mean && cid < best)))) {
      best = cid;
      best_count = v.first;
      best_mean = mean;
    }
  }
  return best;
}

vlm::VLModel small_frozen_model(uint64_t seed) {
  nn::LMConfig lm;
  lm.d_model = 32;
  lm.n_layers = 2;
  lm.n_heads = 4;
  lm.max_seq_len = 128;
  nn::VEConfig ve;
  ve.channels = {6, 12};
  ve.d_model = 32;
  vlm::VLModel model = vlm::make_model(lm, ve, seed);
  model.freeze();
  return model;
}

}  // namespace

std::vector<CheckResult> gradient_suite() {
  std::vector<CheckResult> results;
  Rng rng(0x96ad5eed);

  auto check_primitive = [&](const std::string& name,
                             const std::vector<Tensor>& params,
                             const std::function<Tensor(Tape*)>& forward) {
    results.push_back(grad_result("primitive/" + name,
                               grad_check(forward, params, 1e-5)));
  };

  {
    Tensor a = random_tensor({3, 4}, rng, true);
    Tensor b = random_tensor({3, 4}, rng, true);
    Tensor w = random_tensor({3, 4}, rng, false);
    check_primitive("add", {a, b}, [=](Tape* t) {
      return weighted_sum(t, add(t, a, b), w);
    });
    check_primitive("mul", {a, b}, [=](Tape* t) {
      return weighted_sum(t, mul(t, a, b), w);
    });
    check_primitive("scale", {a}, [=](Tape* t) {
      return weighted_sum(t, scale(t, a, -1.7), w);
    });
    check_primitive("gelu", {a}, [=](Tape* t) {
      return weighted_sum(t, gelu(t, a), w);
    });
    Tensor v = random_tensor({4}, rng, true);
    check_primitive("add_rowvec", {a, v}, [=](Tape* t) {
      return weighted_sum(t, add_rowvec(t, a, v), w);
    });
  }
  {
    Tensor a = random_tensor({3, 4}, rng, true);
    Tensor b = random_tensor({4, 5}, rng, true);
    Tensor w = random_tensor({3, 5}, rng, false);
    check_primitive("matmul", {a, b}, [=](Tape* t) {
      return weighted_sum(t, matmul(t, a, b), w);
    });
  }
  {
    Tensor a = random_tensor({3, 4}, rng, true);
    Tensor wt = random_tensor({4, 3}, rng, false);
    check_primitive("transpose", {a}, [=](Tape* t) {
      return weighted_sum(t, transpose(t, a), wt);
    });
    Tensor wr = random_tensor({2, 6}, rng, false);
    check_primitive("reshape", {a}, [=](Tape* t) {
      return weighted_sum(t, reshape(t, a, {2, 6}), wr);
    });
  }
  {
    Tensor x = random_tensor({3, 5}, rng, true);
    Tensor w = random_tensor({3, 5}, rng, false);
    check_primitive("softmax_rows", {x}, [=](Tape* t) {
      return weighted_sum(t, softmax_rows(t, x), w);
    });
  }
  {
    Tensor x = random_tensor({3, 8}, rng, true);
    Tensor g = random_tensor({8}, rng, true);
    Tensor b = random_tensor({8}, rng, true);
    Tensor w = random_tensor({3, 8}, rng, false);
    check_primitive("layer_norm", {x, g, b}, [=](Tape* t) {
      return weighted_sum(t, layer_norm(t, x, g, b), w);
    });
  }
  {
    Tensor table = random_tensor({7, 4}, rng, true);
    const std::vector<int> ids = {1, 3, 3, 0, 6};
    Tensor w = random_tensor({5, 4}, rng, false);
    check_primitive("embedding_lookup", {table}, [=](Tape* t) {
      return weighted_sum(t, embedding_lookup(t, table, ids), w);
    });
  }
  {
    Tensor a = random_tensor({2, 3}, rng, true);
    Tensor b = random_tensor({3, 3}, rng, true);
    Tensor w = random_tensor({5, 3}, rng, false);
    check_primitive("concat_rows", {a, b}, [=](Tape* t) {
      return weighted_sum(t, concat_rows(t, {a, b}), w);
    });
  }
  {
    Tensor a = random_tensor({3, 2}, rng, true);
    Tensor b = random_tensor({3, 4}, rng, true);
    Tensor w = random_tensor({3, 6}, rng, false);
    check_primitive("concat_cols", {a, b}, [=](Tape* t) {
      return weighted_sum(t, concat_cols(t, {a, b}), w);
    });
  }
  {
    Tensor a = random_tensor({5, 3}, rng, true);
    Tensor w1 = random_tensor({2, 3}, rng, false);
    check_primitive("slice_rows", {a}, [=](Tape* t) {
      return weighted_sum(t, slice_rows(t, a, 1, 2), w1);
    });
    Tensor a2 = random_tensor({3, 6}, rng, true);
    Tensor w2 = random_tensor({3, 3}, rng, false);
    check_primitive("slice_cols", {a2}, [=](Tape* t) {
      return weighted_sum(t, slice_cols(t, a2, 2, 3), w2);
    });
  }
  {
    Tensor a = random_tensor({4, 3}, rng, true);
    Tensor w = random_tensor({1, 3}, rng, false);
    check_primitive("mean_rows", {a}, [=](Tape* t) {
      return weighted_sum(t, mean_rows(t, a), w);
    });
    check_primitive("sum_all", {a}, [=](Tape* t) { return sum_all(t, a); });
  }
  {
    Tensor logits = random_tensor({4, 6}, rng, true);
    const std::vector<int> targets = {2, 0, 5, 1};
    const std::vector<bool> mask = {true, false, true, true};
    check_primitive("cross_entropy", {logits}, [=](Tape* t) {
      return cross_entropy(t, logits, targets, mask);
    });
  }
  {
    Tensor x = random_tensor({2, 6, 6}, rng, true);
    Tensor w = random_tensor({3, 2, 3, 3}, rng, true);
    Tensor b = random_tensor({3}, rng, true);
    Tensor ws = random_tensor({3, 3, 3}, rng, false);
    check_primitive("conv2d_s2", {x, w, b}, [=](Tape* t) {
      return weighted_sum(t, conv2d(t, x, w, b, 2, 1), ws);
    });
    Tensor ws1 = random_tensor({3, 6, 6}, rng, false);
    check_primitive("conv2d_s1", {x, w, b}, [=](Tape* t) {
      return weighted_sum(t, conv2d(t, x, w, b, 1, 1), ws1);
    });
  }
  {
    Tensor x = random_tensor({2, 7, 7}, rng, true);
    Tensor w = random_tensor({2, 2, 2}, rng, false);
    check_primitive("adaptive_avg_pool2d", {x}, [=](Tape* t) {
      return weighted_sum(t, adaptive_avg_pool2d(t, x, 2, 2), w);
    });
  }

  // Composed VLM pretraining loss, full parameter sweep on a small config.
  {
    nn::LMConfig lm;
    lm.d_model = 8;
    lm.n_layers = 1;
    lm.n_heads = 2;
    lm.max_seq_len = 32;
    nn::VEConfig ve;
    ve.channels = {4, 6};
    ve.d_model = 8;
    vlm::VLModel tiny = vlm::make_model(lm, ve, 0x717);
    const synth::ImageSample img =
        synth::render(synth::class_by_id(5), 16, 0xbeef);
    auto forward = [&tiny, &img](Tape* t) {
      return caption_loss(t, tiny, img);
    };
    results.push_back(grad_result(
        "vlm_loss/full_small", grad_check(forward, all_trainable(tiny), 1e-5)));
  }

  // Same loss on the default desk config, sampled entries across every
  // trainable tensor.
  {
    vlm::VLModel model = vlm::make_model(nn::LMConfig{}, nn::VEConfig{}, 0x99);
    const synth::ImageSample img =
        synth::render(synth::class_by_id(17), synth::kPretrainScale, 0xcafe);
    auto forward = [&model, &img](Tape* t) {
      return caption_loss(t, model, img);
    };
    results.push_back(grad_result(
        "vlm_loss/default_sampled",
        grad_check_sampled(forward, all_trainable(model), 160, 0xd5, 1e-5)));
  }

  // ProL and Robust-ProL losses: gradients w.r.t. the soft tokens through a
  // frozen default-size model.
  {
    vlm::VLModel model = vlm::make_model(nn::LMConfig{}, nn::VEConfig{}, 0x42);
    model.freeze();
    Rng prng(0x5077);
    const synth::ImageSample img =
        synth::render(synth::class_by_id(3), synth::kPretrainScale, 0xf00d);
    const int label_token = model.tokenizer.class_token(img.label);
    const int d = model.lm_config.d_model;

    Tensor ctx = random_tensor({64, d}, prng, true);
    Tensor query = random_tensor({8, d}, prng, true);
    const Tensor vis = vlm::visual_tokens(nullptr, model, img);
    auto prol_forward = [&](Tape* t) {
      std::vector<PromptSegment> segments = {PromptSegment::soft(ctx),
                                             PromptSegment::visual(vis),
                                             PromptSegment::soft(query)};
      segments.push_back(PromptSegment::text({label_token}));
      Tensor logits = vlm::forward_logits(t, model, segments);
      const int tt = logits.dim(0);
      std::vector<int> targets(tt, 0);
      std::vector<bool> mask(tt, false);
      targets[tt - 2] = label_token;
      mask[tt - 2] = true;
      return cross_entropy(t, logits, targets, mask);
    };
    results.push_back(grad_result(
        "prol_loss/soft_tokens_sampled",
        grad_check_sampled(prol_forward, {ctx, query}, 96, 0xa1, 1e-5)));

    Tensor ctx1 = random_tensor({32, d}, prng, true);
    Tensor ctx2 = random_tensor({32, d}, prng, true);
    Tensor rquery = random_tensor({8, d}, prng, true);
    const Tensor v16 = vlm::visual_tokens(
        nullptr, model, synth::materialize_at_scale(img, 16));
    const Tensor v24 = vlm::visual_tokens(
        nullptr, model, synth::materialize_at_scale(img, 24));
    auto robust_forward = [&](Tape* t) {
      std::vector<PromptSegment> segments = {
          PromptSegment::visual(v16),  PromptSegment::soft(ctx1),
          PromptSegment::visual(v24),  PromptSegment::soft(ctx2),
          PromptSegment::visual(vis),  PromptSegment::soft(rquery)};
      segments.push_back(PromptSegment::text({label_token}));
      Tensor logits = vlm::forward_logits(t, model, segments);
      const int tt = logits.dim(0);
      std::vector<int> targets(tt, 0);
      std::vector<bool> mask(tt, false);
      targets[tt - 2] = label_token;
      mask[tt - 2] = true;
      return cross_entropy(t, logits, targets, mask);
    };
    results.push_back(grad_result(
        "robust_prol_loss/soft_tokens_sampled",
        grad_check_sampled(robust_forward, {ctx1, ctx2, rquery}, 96, 0xa2,
                           1e-5)));
  }

  return results;
}

std::vector<CheckResult> oracle_suite(uint64_t seed) {
  std::vector<CheckResult> results;
  vlm::VLModel model = small_frozen_model(derive_seed(seed, {0x0de1}));

  auto [base_ids, novel_ids] = synth::make_splits(8, 8, seed);
  const synth::SupportSet support =
      synth::build_support(base_ids, 5, derive_seed(seed, {0x5a9}));
  const auto feats = adapt::compute_support_features(model, support);

  Rng rng(derive_seed(seed, {0xca5e5}));
  auto random_image = [&]() {
    const int cid = static_cast<int>(rng.below(synth::kNumClasses));
    return synth::render(synth::class_by_id(cid), synth::kPretrainScale,
                         rng.next_u64());
  };

  {
    int mismatches = 0;
    const int cases = 120;
    for (int i = 0; i < cases; ++i) {
      const synth::ImageSample img = random_image();
      const auto qfeat = adapt::ve_feature(model, img);
      const int k = 1 + static_cast<int>(rng.below(12));
      std::vector<double> sims(feats.size());
      for (size_t j = 0; j < feats.size(); ++j) {
        sims[j] = oracle_cosine(feats[j], qfeat);
      }
      const int mine = adapt::knn_classify_with(support, feats, qfeat, k);
      const int want = oracle_knn(support, sims, k);
      mismatches += mine != want ? 1 : 0;
    }
    results.push_back({"oracle/knn_bruteforce", mismatches == 0,
                       static_cast<double>(mismatches), 0.0,
                       std::to_string(cases) + " randomized cases"});
  }

  {
    int mismatches = 0;
    const int cases = 120;
    for (int i = 0; i < cases; ++i) {
      const synth::ImageSample img = random_image();
      const auto qfeat = adapt::ve_feature(model, img);
      const int k = 1 + static_cast<int>(rng.below(10));
      std::vector<double> sims(feats.size());
      for (size_t j = 0; j < feats.size(); ++j) {
        sims[j] = oracle_cosine(feats[j], qfeat);
      }
      std::vector<size_t> want = oracle_topk(sims, k);
      std::reverse(want.begin(), want.end());
      const std::vector<size_t> mine = adapt::rice_selection(feats, qfeat, k);
      mismatches += mine != want ? 1 : 0;
    }
    results.push_back({"oracle/rice_bruteforce", mismatches == 0,
                       static_cast<double>(mismatches), 0.0,
                       std::to_string(cases) + " randomized cases"});
  }

  {
    int mismatches = 0;
    const int cases = 110;
    for (int i = 0; i < cases; ++i) {
      const synth::ImageSample img = random_image();
      std::vector<int> ids(synth::kNumClasses);
      for (int c = 0; c < synth::kNumClasses; ++c) ids[c] = c;
      rng.shuffle(ids);
      ids.resize(2 + rng.below(7));
      const int a = adapt::zero_shot_classify(model, img, ids);
      std::vector<int> shuffled = ids;
      rng.shuffle(shuffled);
      const int b = adapt::zero_shot_classify(model, img, shuffled);
      mismatches += a != b ? 1 : 0;
    }
    results.push_back({"oracle/label_permutation_invariance", mismatches == 0,
                       static_cast<double>(mismatches), 0.0,
                       std::to_string(cases) + " randomized label sets"});
  }

  {
    // Shared-forward class scoring must equal the per-label scorer bitwise.
    int mismatches = 0;
    const int cases = 24;
    for (int i = 0; i < cases; ++i) {
      const synth::ImageSample img = random_image();
      const std::vector<PromptSegment> prefix = {
          PromptSegment::visual(vlm::visual_tokens(nullptr, model, img)),
          PromptSegment::text(vlm::manual_query_tokens(model.tokenizer))};
      std::vector<int> ids = {0, 7, 13, 29, 41, 47};
      const auto fast = vlm::class_scores(model, prefix, ids);
      for (size_t j = 0; j < ids.size(); ++j) {
        const double slow = vlm::score_label(
            model, prefix, {model.tokenizer.class_token(ids[j])});
        if (std::memcmp(&fast[j], &slow, sizeof(double)) != 0) ++mismatches;
      }
    }
    results.push_back({"oracle/shared_forward_scoring_bitwise",
                       mismatches == 0, static_cast<double>(mismatches), 0.0,
                       std::to_string(cases) + " prompts x 6 labels"});
  }

  {
    // Ensemble-SS with three identical members reproduces the single member.
    adapt::TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 16;
    tc.seed = derive_seed(seed, {0xe5e});
    const adapt::PromptParams member =
        adapt::prol_train(model, support, 16, 4, tc);
    adapt::EnsembleSpec spec;
    spec.mode = adapt::EnsembleSpec::Mode::SS;
    spec.members = {member, member, member};
    int mismatches = 0;
    const int cases = 20;
    for (int i = 0; i < cases; ++i) {
      const synth::ImageSample img = random_image();
      const auto ms = adapt::MultiScaleImage::single(img);
      const int single = adapt::prol_classify(model, member, img, base_ids);
      const int ens = adapt::ensemble_classify(model, spec, ms, base_ids);
      mismatches += single != ens ? 1 : 0;
    }
    results.push_back({"oracle/ensemble_identical_members", mismatches == 0,
                       static_cast<double>(mismatches), 0.0,
                       std::to_string(cases) + " images"});
  }

  return results;
}

std::vector<CheckResult> frozen_contract_suite(const std::string& tmp_dir) {
  namespace fs = std::filesystem;
  std::vector<CheckResult> results;
  fs::create_directories(tmp_dir);

  vlm::VLModel model = small_frozen_model(0xf20);
  auto [base_ids, novel_ids] = synth::make_splits(8, 8, 0xf21);
  const synth::SupportSet support = synth::build_support(base_ids, 5, 0xf22);
  const uint64_t digest0 = model.digest();

  adapt::TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 11;
  const synth::ImageSample probe_img =
      synth::render(synth::class_by_id(base_ids[0]), synth::kPretrainScale, 9);

  adapt::PromptParams prol = adapt::prol_train(model, support, 8, 4, tc);
  adapt::PromptParams man = adapt::man_prol_train(model, support, 8, tc);
  adapt::PromptParams co = adapt::co_prol_train(model, support, 8, 4, tc);
  adapt::PromptParams robust =
      adapt::robust_prol_train(model, support, {16, 24, 32}, 8, 4, tc);
  adapt::PromptParams ss = adapt::rpol_ss_train(model, support, 24, 8, 4, tc);
  (void)adapt::knn_classify(model, support, probe_img, 8);
  (void)adapt::icl_classify(
      model, adapt::icl_random(model, support, 8, 5), probe_img, base_ids);
  (void)adapt::icl_classify(model, adapt::icl_rice(model, support, probe_img),
                            probe_img, base_ids);
  (void)adapt::zero_shot_classify(model, probe_img, base_ids);
  {
    std::vector<synth::ImageSample> samples;
    for (const auto& e : support.entries) samples.push_back(e.sample);
    (void)adapt::linear_probe_train(model, samples, base_ids);
  }
  const auto ms =
      adapt::MultiScaleImage::materialize(probe_img, std::array<int, 3>{16, 24, 32});
  (void)adapt::prol_classify(model, prol, probe_img, base_ids);
  (void)adapt::prol_classify(model, man, probe_img, base_ids);
  (void)adapt::prol_classify(model, co, probe_img, base_ids);
  (void)adapt::robust_prol_classify(model, robust, ms, base_ids);
  (void)adapt::robust_prol_classify(model, ss, ms, base_ids);
  {
    adapt::EnsembleSpec spec;
    spec.mode = adapt::EnsembleSpec::Mode::SS;
    spec.members = {prol, prol, prol};
    (void)adapt::ensemble_classify(model, spec, ms, base_ids);
  }

  results.push_back({"frozen/digest_stable_across_methods",
                     model.digest() == digest0,
                     static_cast<double>(model.digest() != digest0), 0.0,
                     "every adaptation method ran"});

  // Checkpoint round trip: bitwise tensors and byte-identical re-save.
  const std::string p1 = (fs::path(tmp_dir) / "model_a.vlmc").string();
  const std::string p2 = (fs::path(tmp_dir) / "model_b.vlmc").string();
  vlm::save_checkpoint(model, p1);
  vlm::VLModel loaded = vlm::load_checkpoint(p1);
  vlm::save_checkpoint(loaded, p2);
  auto read_bytes = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  };
  const std::string bytes1 = read_bytes(p1);
  const std::string bytes2 = read_bytes(p2);
  const bool roundtrip = !bytes1.empty() && bytes1 == bytes2 &&
                         loaded.frozen && loaded.digest() == digest0;
  results.push_back({"frozen/checkpoint_roundtrip_bitwise", roundtrip,
                     roundtrip ? 0.0 : 1.0, 0.0,
                     std::to_string(bytes1.size()) + " bytes"});

  // Corrupting one payload byte must be detected.
  {
    std::string corrupted = bytes1;
    // Offset 42 sits inside the first tensor payload (21-byte header, then
    // name + rank + dims of "meta.lm").
    corrupted[42] = static_cast<char>(corrupted[42] ^ 0xff);
    const std::string p3 = (fs::path(tmp_dir) / "model_corrupt.vlmc").string();
    std::ofstream out(p3, std::ios::binary);
    out << corrupted;
    out.close();
    bool detected = false;
    try {
      (void)vlm::load_checkpoint(p3);
    } catch (const FormatError&) {
      detected = true;
    }
    results.push_back({"frozen/corruption_detected", detected,
                       detected ? 0.0 : 1.0, 0.0, "payload byte flipped"});
  }

  return results;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const CheckResult& r : results) {
    if (!r.pass) return false;
  }
  return true;
}

void print_results(const std::vector<CheckResult>& results) {
  for (const CheckResult& r : results) {
    std::printf("[%s] %-44s value=%.3g bound=%.3g %s\n",
                r.pass ? "PASS" : "FAIL", r.name.c_str(), r.value, r.threshold,
                r.detail.c_str());
  }
}

}  // namespace promptlab::selftest
