#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "promptlab/core/tensor.hpp"

namespace promptlab::nn {

using core::Tape;
using core::Tensor;

struct LMConfig {
  int d_model = 64;
  int n_layers = 3;
  int n_heads = 4;
  int max_seq_len = 256;
  int vocab_size = 0;  // set from the tokenizer

  void validate() const;
};

struct VEConfig {
  std::array<int, 2> channels{8, 16};
  int pool_grid = 2;  // output grid side; token count = pool_grid^2
  int d_model = 64;
  int kernel = 3;
  int stride = 2;  // per conv stage

  int token_count() const { return pool_grid * pool_grid; }
  void validate() const;
};

// Ordered set of named tensors. Insertion order is the canonical order for
// initialization draws, serialization and digests. The trainable flag is the
// tensor's requires_grad; freeze() flips flags only, never values.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  std::vector<Tensor> trainable() const;
  size_t total_params() const;

  void freeze();
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Deterministic initialization from the project PRNG: weight matrices and
// embeddings ~ N(0, 0.02^2); biases zero; layer-norm gains one.
ParamSet init_lm_params(const LMConfig& cfg, uint64_t seed);
ParamSet init_we_params(const LMConfig& cfg, uint64_t seed);
ParamSet init_ve_params(const VEConfig& cfg, uint64_t seed);

// Visual encoder: two strided conv+gelu stages, adaptive average pooling to
// the pool grid, then a shared linear projection of each cell to d_model.
// Input is [3,h,w] with h == w >= 8; emits [token_count, d_model] and the
// token count does not depend on the input scale.
Tensor ve_forward(Tape* tape, const ParamSet& ve, const VEConfig& cfg,
                  const Tensor& image_chw);

// Decoder-only transformer over pre-assembled input embeddings [t, d_model].
// Adds learned absolute positions internally, applies a causal mask, and
// returns logits [t, vocab_size]. Logits at position t are a function of
// embeddings[0..t] only, bitwise.
Tensor lm_forward(Tape* tape, const ParamSet& lm, const LMConfig& cfg,
                  const Tensor& pos_emb, const Tensor& embeddings);

}  // namespace promptlab::nn
