#include "promptlab/nn/blocks.hpp"

#include <cmath>

#include "promptlab/core/error.hpp"
#include "promptlab/core/ops.hpp"
#include "promptlab/core/rng.hpp"

namespace promptlab::nn {

using namespace promptlab::core;

void LMConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq_len <= 0 ||
      vocab_size <= 0) {
    throw ConfigError("LMConfig: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("LMConfig: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
}

void VEConfig::validate() const {
  if (channels[0] <= 0 || channels[1] <= 0 || pool_grid <= 0 || d_model <= 0 ||
      kernel <= 0 || stride <= 0) {
    throw ConfigError("VEConfig: all dimensions must be positive");
  }
}

Tensor& ParamSet::add(const std::string& name, Tensor t) {
  if (index_.count(name)) {
    throw ValueError("ParamSet: duplicate name " + name);
  }
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParamSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("ParamSet: no tensor named " + name);
  return items_[it->second].second;
}

const Tensor& ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("ParamSet: no tensor named " + name);
  return items_[it->second].second;
}

bool ParamSet::has(const std::string& name) const {
  return index_.count(name) > 0;
}

std::vector<Tensor> ParamSet::trainable() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : items_) {
    if (t.requires_grad()) out.push_back(t);
  }
  return out;
}

size_t ParamSet::total_params() const {
  size_t n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

void ParamSet::freeze() {
  for (auto& [name, t] : items_) t.set_requires_grad(false);
}

void ParamSet::zero_grads() {
  for (auto& [name, t] : items_) t.zero_grad();
}

namespace {

constexpr double kInitStd = 0.02;

Tensor normal_tensor(std::vector<int> shape, Rng& rng, double std_dev) {
  Tensor t(std::move(shape), true);
  double* p = t.data();
  const size_t n = t.size();
  for (size_t i = 0; i < n; ++i) p[i] = rng.normal() * std_dev;
  return t;
}

}  // namespace

ParamSet init_we_params(const LMConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x7e5u}));
  ParamSet we;
  we.add("we.tok_emb", normal_tensor({cfg.vocab_size, cfg.d_model}, rng, kInitStd));
  we.add("we.pos_emb", normal_tensor({cfg.max_seq_len, cfg.d_model}, rng, kInitStd));
  return we;
}

ParamSet init_lm_params(const LMConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x1aau}));
  ParamSet lm;
  const int d = cfg.d_model;
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string p = "lm.h" + std::to_string(layer) + ".";
    lm.add(p + "ln1.g", Tensor::full({d}, 1.0, true));
    lm.add(p + "ln1.b", Tensor::zeros({d}, true));
    lm.add(p + "attn.wqkv", normal_tensor({d, 3 * d}, rng, kInitStd));
    lm.add(p + "attn.bqkv", Tensor::zeros({3 * d}, true));
    lm.add(p + "attn.wo", normal_tensor({d, d}, rng, kInitStd));
    lm.add(p + "attn.bo", Tensor::zeros({d}, true));
    lm.add(p + "ln2.g", Tensor::full({d}, 1.0, true));
    lm.add(p + "ln2.b", Tensor::zeros({d}, true));
    lm.add(p + "mlp.w1", normal_tensor({d, 4 * d}, rng, kInitStd));
    lm.add(p + "mlp.b1", Tensor::zeros({4 * d}, true));
    lm.add(p + "mlp.w2", normal_tensor({4 * d, d}, rng, kInitStd));
    lm.add(p + "mlp.b2", Tensor::zeros({d}, true));
  }
  lm.add("lm.lnf.g", Tensor::full({d}, 1.0, true));
  lm.add("lm.lnf.b", Tensor::zeros({d}, true));
  lm.add("lm.head.w", normal_tensor({d, cfg.vocab_size}, rng, kInitStd));
  lm.add("lm.head.b", Tensor::zeros({cfg.vocab_size}, true));
  return lm;
}

ParamSet init_ve_params(const VEConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x0efu}));
  ParamSet ve;
  const int k = cfg.kernel;
  ve.add("ve.conv1.w", normal_tensor({cfg.channels[0], 3, k, k}, rng, kInitStd));
  ve.add("ve.conv1.b", Tensor::zeros({cfg.channels[0]}, true));
  ve.add("ve.conv2.w",
         normal_tensor({cfg.channels[1], cfg.channels[0], k, k}, rng, kInitStd));
  ve.add("ve.conv2.b", Tensor::zeros({cfg.channels[1]}, true));
  ve.add("ve.proj.w", normal_tensor({cfg.channels[1], cfg.d_model}, rng, kInitStd));
  ve.add("ve.proj.b", Tensor::zeros({cfg.d_model}, true));
  return ve;
}

Tensor ve_forward(Tape* tape, const ParamSet& ve, const VEConfig& cfg,
                  const Tensor& image_chw) {
  if (image_chw.rank() != 3 || image_chw.dim(0) != 3) {
    throw ShapeError("ve_forward: expected [3,h,w], got " +
                     image_chw.shape_str());
  }
  const int h = image_chw.dim(1), w = image_chw.dim(2);
  if (h != w) {
    throw ShapeError("ve_forward: image must be square, got " +
                     image_chw.shape_str());
  }
  if (h < 8) {
    throw ValueError("ve_forward: side " + std::to_string(h) +
                     " below the minimum scale of 8");
  }
  const int pad = cfg.kernel / 2;
  Tensor h1 = gelu(tape, conv2d(tape, image_chw, ve.get("ve.conv1.w"),
                                ve.get("ve.conv1.b"), cfg.stride, pad));
  Tensor h2 = gelu(tape, conv2d(tape, h1, ve.get("ve.conv2.w"),
                                ve.get("ve.conv2.b"), cfg.stride, pad));
  Tensor pooled = adaptive_avg_pool2d(tape, h2, cfg.pool_grid, cfg.pool_grid);
  // [c, g, g] -> cells as rows [g*g, c], then project each cell to d_model.
  Tensor cells = transpose(
      tape, reshape(tape, pooled, {cfg.channels[1], cfg.token_count()}));
  return add_rowvec(tape, matmul(tape, cells, ve.get("ve.proj.w")),
                    ve.get("ve.proj.b"));
}

namespace {

// Additive causal mask: entries above the diagonal get -1e30, which
// underflows to exactly zero in the softmax, keeping logits at position t
// bitwise independent of positions > t.
Tensor causal_mask(int t) {
  Tensor m({t, t});
  double* p = m.data();
  for (int i = 0; i < t; ++i) {
    for (int j = i + 1; j < t; ++j) p[static_cast<size_t>(i) * t + j] = -1e30;
  }
  return m;
}

}  // namespace

Tensor lm_forward(Tape* tape, const ParamSet& lm, const LMConfig& cfg,
                  const Tensor& pos_emb, const Tensor& embeddings) {
  if (embeddings.rank() != 2 || embeddings.dim(1) != cfg.d_model) {
    throw ShapeError("lm_forward: expected [t," + std::to_string(cfg.d_model) +
                     "], got " + embeddings.shape_str());
  }
  const int t = embeddings.dim(0);
  if (t > cfg.max_seq_len) {
    throw ShapeError("lm_forward: sequence length " + std::to_string(t) +
                     " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  const int d = cfg.d_model;
  const int dh = d / cfg.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor x = add(tape, embeddings, slice_rows(tape, pos_emb, 0, t));
  const Tensor mask = causal_mask(t);

  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string p = "lm.h" + std::to_string(layer) + ".";
    Tensor a = layer_norm(tape, x, lm.get(p + "ln1.g"), lm.get(p + "ln1.b"));
    Tensor qkv = add_rowvec(tape, matmul(tape, a, lm.get(p + "attn.wqkv")),
                            lm.get(p + "attn.bqkv"));
    std::vector<Tensor> heads;
    heads.reserve(cfg.n_heads);
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      Tensor q = slice_cols(tape, qkv, hd * dh, dh);
      Tensor k = slice_cols(tape, qkv, d + hd * dh, dh);
      Tensor v = slice_cols(tape, qkv, 2 * d + hd * dh, dh);
      Tensor scores =
          scale(tape, matmul(tape, q, transpose(tape, k)), att_scale);
      Tensor att = softmax_rows(tape, add(tape, scores, mask));
      heads.push_back(matmul(tape, att, v));
    }
    Tensor ctx = concat_cols(tape, heads);
    Tensor attn_out = add_rowvec(tape, matmul(tape, ctx, lm.get(p + "attn.wo")),
                                 lm.get(p + "attn.bo"));
    x = add(tape, x, attn_out);

    Tensor m = layer_norm(tape, x, lm.get(p + "ln2.g"), lm.get(p + "ln2.b"));
    Tensor hmid = gelu(tape, add_rowvec(tape, matmul(tape, m, lm.get(p + "mlp.w1")),
                                        lm.get(p + "mlp.b1")));
    Tensor mlp_out = add_rowvec(tape, matmul(tape, hmid, lm.get(p + "mlp.w2")),
                                lm.get(p + "mlp.b2"));
    x = add(tape, x, mlp_out);
  }

  Tensor f = layer_norm(tape, x, lm.get("lm.lnf.g"), lm.get("lm.lnf.b"));
  return add_rowvec(tape, matmul(tape, f, lm.get("lm.head.w")),
                    lm.get("lm.head.b"));
}

}  // namespace promptlab::nn
