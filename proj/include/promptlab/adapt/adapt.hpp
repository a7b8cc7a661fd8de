#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "promptlab/nn/blocks.hpp"
#include "promptlab/synth/synth.hpp"
#include "promptlab/vlm/vlm.hpp"

namespace promptlab::adapt {

using core::Tensor;

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  double lr = 0.1;  // desk default; the reference recipe's 1.0 is a flag away
  uint64_t seed = 0;

  void validate() const;
};

enum class PromptVariant { Prol, ManProl, CoProl, Robust, RobustSS };

std::string variant_name(PromptVariant v);
PromptVariant variant_from_name(const std::string& name);

// Learnable soft-prompt state. Plain ProL variants use `ctx`; the robust
// variants split the same context budget into ctx1/ctx2.
struct PromptParams {
  PromptVariant variant = PromptVariant::Prol;
  Tensor ctx;
  Tensor ctx1, ctx2;
  Tensor query;                   // man_prol: fixed template embeddings
  std::vector<int> manual_query;  // man_prol only
  nn::ParamSet metanet;           // co_prol only
  int scale = synth::kPretrainScale;
  std::array<int, 3> scales{16, 24, 32};
  TrainConfig train_echo;
  std::vector<double> train_loss;    // per-epoch mean
  std::vector<double> holdout_loss;  // per-epoch, when a holdout set is given

  int learnable_tokens() const;
};

// Mean-pooled visual-encoder feature (length d_model).
std::vector<double> ve_feature(const vlm::VLModel& model,
                               const synth::ImageSample& img);
double cosine_similarity(const std::vector<double>& a,
                         const std::vector<double>& b);

// VE features of every support entry, in entry order; computed once and
// reused across queries by the evaluation grid.
std::vector<std::vector<double>> compute_support_features(
    const vlm::VLModel& model, const synth::SupportSet& support);

// Majority vote over the K nearest support samples by cosine similarity.
// Vote ties break toward the smaller mean cosine distance, then the lowest
// class id.
int knn_classify(const vlm::VLModel& model, const synth::SupportSet& support,
                 const synth::ImageSample& img, int k = 8);

int knn_classify_with(const synth::SupportSet& support,
                      const std::vector<std::vector<double>>& support_feats,
                      const std::vector<double>& query_feat, int k);

// Empty context + the manual query template.
int zero_shot_classify(const vlm::VLModel& model,
                       const synth::ImageSample& img,
                       const std::vector<int>& label_ids);

struct ProbeConfig {
  int max_iters = 400;
  double lr = 0.5;
  double tol = 1e-6;  // stop once max |grad| falls below
};

struct LinearProbe {
  std::vector<double> weights;  // [n_classes, d]
  std::vector<double> bias;
  std::vector<int> class_ids;  // ascending
  int feature_dim = 0;
  double train_accuracy = 0.0;
  int iters_run = 0;

  int predict(const std::vector<double>& feature) const;
};

// Multinomial logistic regression on frozen VE features by full-batch
// gradient descent. Every id in class_ids must occur among the samples.
LinearProbe linear_probe_train(const vlm::VLModel& model,
                               const std::vector<synth::ImageSample>& samples,
                               const std::vector<int>& class_ids,
                               const ProbeConfig& cfg = {});

// K demonstrations sampled without replacement, each rendered as
// [V(img)] "this is a <name>" <eoc>.
std::vector<vlm::PromptSegment> icl_random(const vlm::VLModel& model,
                                           const synth::SupportSet& support,
                                           int k, uint64_t seed);

// K most similar support images by VE feature; ordered least-similar first
// so the strongest demonstration sits adjacent to the query. Selection ties
// break toward the lowest sample index.
std::vector<vlm::PromptSegment> icl_rice(const vlm::VLModel& model,
                                         const synth::SupportSet& support,
                                         const synth::ImageSample& test_img,
                                         int k = 8);

std::vector<vlm::PromptSegment> icl_rice_with(
    const vlm::VLModel& model, const synth::SupportSet& support,
    const std::vector<std::vector<double>>& support_feats,
    const std::vector<double>& query_feat, int k);

// The demonstration order RICE uses: top-k by similarity, reversed so the
// most similar index comes last.
std::vector<size_t> rice_selection(
    const std::vector<std::vector<double>>& support_feats,
    const std::vector<double>& query_feat, int k);

// classify() with the manual query template appended after the test image.
int icl_classify(const vlm::VLModel& model,
                 const std::vector<vlm::PromptSegment>& context,
                 const synth::ImageSample& img,
                 const std::vector<int>& label_ids);

// Soft-prompt training. Gradients flow only into the prompt (and MetaNet);
// the model stays frozen, which is asserted via its digest.
PromptParams prol_train(const vlm::VLModel& model,
                        const synth::SupportSet& support, int ctx_tokens,
                        int query_tokens, const TrainConfig& cfg,
                        int scale = synth::kPretrainScale,
                        const std::vector<synth::ImageSample>* holdout = nullptr);

PromptParams man_prol_train(const vlm::VLModel& model,
                            const synth::SupportSet& support, int ctx_tokens,
                            const TrainConfig& cfg);

PromptParams co_prol_train(const vlm::VLModel& model,
                           const synth::SupportSet& support, int ctx_tokens,
                           int query_tokens, const TrainConfig& cfg);

PromptParams robust_prol_train(
    const vlm::VLModel& model, const synth::SupportSet& support,
    std::array<int, 3> scales, int ctx_tokens, int query_tokens,
    const TrainConfig& cfg,
    const std::vector<synth::ImageSample>* holdout = nullptr);

// Robust-ProL with every visual slot at one scale.
PromptParams rpol_ss_train(const vlm::VLModel& model,
                           const synth::SupportSet& support, int scale,
                           int ctx_tokens, int query_tokens,
                           const TrainConfig& cfg);

// Scale views of one logical test image, for multi-scale prompts.
struct MultiScaleImage {
  std::vector<synth::ImageSample> views;

  static MultiScaleImage materialize(const synth::ImageSample& sample,
                                     std::span<const int> scales);
  static MultiScaleImage single(synth::ImageSample sample);
  const synth::ImageSample& at_scale(int scale) const;
  bool has_scale(int scale) const;
};

// Per-class log-likelihood scores for any prompt variant; label ids must be
// sorted ascending. The image must provide every scale the variant needs.
std::vector<double> prompt_scores(const vlm::VLModel& model,
                                  const PromptParams& params,
                                  const MultiScaleImage& img,
                                  const std::vector<int>& sorted_label_ids);

int prol_classify(const vlm::VLModel& model, const PromptParams& params,
                  const synth::ImageSample& img,
                  const std::vector<int>& label_ids);

int robust_prol_classify(const vlm::VLModel& model, const PromptParams& params,
                         const MultiScaleImage& img,
                         const std::vector<int>& label_ids);

struct EnsembleSpec {
  enum class Mode { SS, MS };

  std::vector<PromptParams> members;
  Mode mode = Mode::SS;

  void validate() const;
};

// Averages the members' per-label log-likelihood scores before the argmax;
// MS members each see the test image at their own scale.
int ensemble_classify(const vlm::VLModel& model, const EnsembleSpec& spec,
                      const MultiScaleImage& img,
                      const std::vector<int>& label_ids);

void save_prompt(const PromptParams& params, const std::string& path);
PromptParams load_prompt(const std::string& path);

}  // namespace promptlab::adapt
