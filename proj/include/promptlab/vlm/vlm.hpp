#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "promptlab/core/tensor.hpp"
#include "promptlab/nn/blocks.hpp"
#include "promptlab/synth/synth.hpp"
#include "promptlab/vlm/tokenizer.hpp"

namespace promptlab::vlm {

using core::Tape;
using core::Tensor;

// One piece of an assembled prompt. Visual and soft segments carry
// embeddings directly; text segments carry token ids resolved through the
// word-embedding table at assembly time.
struct PromptSegment {
  enum class Kind { Visual, Text, Soft };

  Kind kind = Kind::Text;
  Tensor emb;               // Visual / Soft
  std::vector<int> tokens;  // Text

  static PromptSegment visual(Tensor t);
  static PromptSegment text(std::vector<int> ids);
  static PromptSegment soft(Tensor t);
  int length() const;
};

struct VLModel {
  Tokenizer tokenizer;
  nn::LMConfig lm_config;
  nn::VEConfig ve_config;
  nn::ParamSet ve, we, lm;
  bool frozen = false;
  uint64_t root_seed = 0;
  uint64_t frozen_digest = 0;

  // Flips every parameter to non-trainable and pins the digest. Values are
  // never touched.
  void freeze();
  // FNV-1a over all parameter payloads in canonical order.
  uint64_t digest() const;
  void require_frozen(const char* op) const;
};

VLModel make_model(const nn::LMConfig& lm_cfg, const nn::VEConfig& ve_cfg,
                   uint64_t seed);

// [h,w,3] pixels -> [3,h,w] tensor.
Tensor image_to_chw(const synth::ImageSample& img);

// Visual tokens of an image through the (possibly frozen) encoder.
Tensor visual_tokens(Tape* tape, const VLModel& model,
                     const synth::ImageSample& img);

// Concatenates segments into the LM input [t, d_model]. Text segments go
// through the word-embedding table; visual/soft segments pass through as-is.
// Positions are added later by the LM, not here.
Tensor assemble(Tape* tape, const VLModel& model,
                const std::vector<PromptSegment>& segments);

Tensor forward_logits(Tape* tape, const VLModel& model,
                      const std::vector<PromptSegment>& segments);

// Sum over label tokens of log P(token | prefix, previous label tokens).
// Frozen models only; always <= 0.
double score_label(const VLModel& model,
                   const std::vector<PromptSegment>& prefix,
                   const std::vector<int>& label_tokens);

// Per-class-id log-likelihood scores for single-token class labels, sharing
// one forward pass over the prefix. Bitwise identical to calling score_label
// per label (causal masking makes suffix positions inert).
std::vector<double> class_scores(const VLModel& model,
                                 const std::vector<PromptSegment>& prefix,
                                 const std::vector<int>& class_ids);

// argmax_{y in label_ids} score(y); ties break toward the lowest class id.
int classify_prefix(const VLModel& model,
                    const std::vector<PromptSegment>& prefix,
                    const std::vector<int>& label_ids);

int classify(const VLModel& model, const std::vector<PromptSegment>& context,
             const synth::ImageSample& image,
             const std::vector<PromptSegment>& query,
             const std::vector<int>& label_ids);

// "this is a" as token ids.
std::vector<int> manual_query_tokens(const Tokenizer& tok);

struct CorpusConfig {
  int images_per_class = 200;
  int k_min = 1;  // images per interleaved sequence
  int k_max = 4;
  uint64_t seed = 2024;
};

struct PretrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double lr = 0.05;
  double momentum = 0.9;
};

struct PretrainReport {
  std::vector<double> epoch_loss;
  double final_caption_accuracy = 0.0;
  double wall_seconds = 0.0;
  int sequences_per_epoch = 0;
};

// Joint VE+WE+LM training on interleaved image-caption sequences
//   <bos> [V(img1)] this is a c1 <eoc> ... [V(imgk)] this is a ck <eoc>
// with k uniform in [k_min, k_max]; cross-entropy on text-token targets
// only. The caller freezes the model afterwards. `corpus_override` (tests)
// must contain in-distribution samples only.
PretrainReport pretrain(VLModel& model, const CorpusConfig& corpus,
                        const PretrainConfig& opt,
                        const std::vector<synth::ImageSample>* corpus_override = nullptr);

void save_checkpoint(const VLModel& model, const std::string& path);
VLModel load_checkpoint(const std::string& path);
// Raises ConfigError if the stored model does not match the expected config.
VLModel load_checkpoint(const std::string& path, const nn::LMConfig& expect);

}  // namespace promptlab::vlm
