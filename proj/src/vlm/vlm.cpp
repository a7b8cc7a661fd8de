#include "promptlab/vlm/vlm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "promptlab/core/error.hpp"
#include "promptlab/core/ops.hpp"
#include "promptlab/core/rng.hpp"
#include "promptlab/vlm/container.hpp"

namespace promptlab::vlm {

using namespace promptlab::core;

namespace {

constexpr uint64_t kTagCorpus = 0xc0a9c5;
constexpr uint64_t kTagOrder = 0x0ade5;

// Incremental FNV-1a across tensors.
uint64_t fnv1a_step(uint64_t h, const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

PromptSegment PromptSegment::visual(Tensor t) {
  PromptSegment s;
  s.kind = Kind::Visual;
  s.emb = std::move(t);
  return s;
}

PromptSegment PromptSegment::text(std::vector<int> ids) {
  PromptSegment s;
  s.kind = Kind::Text;
  s.tokens = std::move(ids);
  return s;
}

PromptSegment PromptSegment::soft(Tensor t) {
  PromptSegment s;
  s.kind = Kind::Soft;
  s.emb = std::move(t);
  return s;
}

int PromptSegment::length() const {
  if (kind == Kind::Text) return static_cast<int>(tokens.size());
  return emb.defined() ? emb.dim(0) : 0;
}

void VLModel::freeze() {
  ve.freeze();
  we.freeze();
  lm.freeze();
  frozen = true;
  frozen_digest = digest();
}

uint64_t VLModel::digest() const {
  uint64_t h = 14695981039346656037ull;
  for (const nn::ParamSet* set : {&ve, &we, &lm}) {
    for (const auto& [name, t] : set->items()) {
      h = fnv1a_step(h, name.data(), name.size());
      h = fnv1a_step(h, t.data(), t.size() * sizeof(double));
    }
  }
  return h;
}

void VLModel::require_frozen(const char* op) const {
  if (!frozen) {
    throw ProtocolError(std::string(op) + ": model must be frozen first");
  }
}

VLModel make_model(const nn::LMConfig& lm_cfg, const nn::VEConfig& ve_cfg,
                   uint64_t seed) {
  VLModel m;
  m.tokenizer = Tokenizer::build();
  m.lm_config = lm_cfg;
  m.lm_config.vocab_size = m.tokenizer.vocab_size();
  m.ve_config = ve_cfg;
  if (ve_cfg.d_model != lm_cfg.d_model) {
    throw ConfigError("make_model: VE d_model " +
                      std::to_string(ve_cfg.d_model) + " != LM d_model " +
                      std::to_string(lm_cfg.d_model));
  }
  m.root_seed = seed;
  m.ve = nn::init_ve_params(m.ve_config, derive_seed(seed, {1}));
  m.we = nn::init_we_params(m.lm_config, derive_seed(seed, {2}));
  m.lm = nn::init_lm_params(m.lm_config, derive_seed(seed, {3}));
  return m;
}

Tensor image_to_chw(const synth::ImageSample& img) {
  Tensor t({3, img.h, img.w});
  double* p = t.data();
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.h; ++y) {
      for (int x = 0; x < img.w; ++x) {
        p[(static_cast<size_t>(c) * img.h + y) * img.w + x] = img.at(y, x, c);
      }
    }
  }
  return t;
}

Tensor visual_tokens(Tape* tape, const VLModel& model,
                     const synth::ImageSample& img) {
  return nn::ve_forward(tape, model.ve, model.ve_config, image_to_chw(img));
}

Tensor assemble(Tape* tape, const VLModel& model,
                const std::vector<PromptSegment>& segments) {
  if (segments.empty()) {
    throw ValueError("assemble: prompt must contain at least one token");
  }
  int total = 0;
  std::vector<Tensor> parts;
  parts.reserve(segments.size());
  for (const PromptSegment& seg : segments) {
    switch (seg.kind) {
      case PromptSegment::Kind::Text: {
        if (seg.tokens.empty()) {
          throw ValueError("assemble: empty text segment");
        }
        parts.push_back(
            embedding_lookup(tape, model.we.get("we.tok_emb"), seg.tokens));
        break;
      }
      case PromptSegment::Kind::Visual:
      case PromptSegment::Kind::Soft: {
        if (!seg.emb.defined() || seg.emb.rank() != 2 ||
            seg.emb.dim(1) != model.lm_config.d_model) {
          throw ShapeError("assemble: segment embedding must be [n," +
                           std::to_string(model.lm_config.d_model) + "]");
        }
        parts.push_back(seg.emb);
        break;
      }
    }
    total += parts.back().dim(0);
  }
  if (total > model.lm_config.max_seq_len) {
    std::string breakdown;
    for (const PromptSegment& seg : segments) {
      if (!breakdown.empty()) breakdown += "+";
      breakdown += std::to_string(seg.length());
    }
    throw ShapeError("assemble: prompt length " + std::to_string(total) +
                     " (" + breakdown + ") exceeds max_seq_len " +
                     std::to_string(model.lm_config.max_seq_len));
  }
  return concat_rows(tape, parts);
}

Tensor forward_logits(Tape* tape, const VLModel& model,
                      const std::vector<PromptSegment>& segments) {
  Tensor embeddings = assemble(tape, model, segments);
  return nn::lm_forward(tape, model.lm, model.lm_config,
                        model.we.get("we.pos_emb"), embeddings);
}

namespace {

double log_softmax_at(const double* row, int v, int index) {
  double mx = row[0];
  for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
  return row[index] - mx - std::log(sum);
}

}  // namespace

double score_label(const VLModel& model,
                   const std::vector<PromptSegment>& prefix,
                   const std::vector<int>& label_tokens) {
  model.require_frozen("score_label");
  if (label_tokens.empty()) throw ValueError("score_label: empty label");
  for (int t : label_tokens) {
    if (t < 0 || t >= model.tokenizer.vocab_size()) {
      throw IndexError("score_label: token " + std::to_string(t) +
                       " outside vocabulary");
    }
  }
  int prefix_len = 0;
  for (const PromptSegment& s : prefix) prefix_len += s.length();
  if (prefix_len < 1) {
    throw ValueError("score_label: prefix must contain at least one token");
  }
  std::vector<PromptSegment> full = prefix;
  full.push_back(PromptSegment::text(label_tokens));
  Tensor logits = forward_logits(nullptr, model, full);
  const int v = logits.dim(1);
  double score = 0.0;
  for (size_t j = 0; j < label_tokens.size(); ++j) {
    const double* row =
        logits.data() + (static_cast<size_t>(prefix_len) - 1 + j) * v;
    score += log_softmax_at(row, v, label_tokens[j]);
  }
  return score;
}

std::vector<double> class_scores(const VLModel& model,
                                 const std::vector<PromptSegment>& prefix,
                                 const std::vector<int>& class_ids) {
  model.require_frozen("class_scores");
  Tensor logits = forward_logits(nullptr, model, prefix);
  const int t = logits.dim(0), v = logits.dim(1);
  const double* last = logits.data() + (static_cast<size_t>(t) - 1) * v;
  std::vector<double> scores;
  scores.reserve(class_ids.size());
  for (int cid : class_ids) {
    scores.push_back(log_softmax_at(last, v, model.tokenizer.class_token(cid)));
  }
  return scores;
}

int classify_prefix(const VLModel& model,
                    const std::vector<PromptSegment>& prefix,
                    const std::vector<int>& label_ids) {
  if (label_ids.empty()) throw ValueError("classify: empty label set");
  std::vector<int> sorted = label_ids;
  std::sort(sorted.begin(), sorted.end());
  const std::vector<double> scores = class_scores(model, prefix, sorted);
  int best = sorted[0];
  double best_score = scores[0];
  for (size_t i = 1; i < sorted.size(); ++i) {
    if (scores[i] > best_score) {
      best_score = scores[i];
      best = sorted[i];
    }
  }
  return best;
}

int classify(const VLModel& model, const std::vector<PromptSegment>& context,
             const synth::ImageSample& image,
             const std::vector<PromptSegment>& query,
             const std::vector<int>& label_ids) {
  model.require_frozen("classify");
  std::vector<PromptSegment> prefix = context;
  prefix.push_back(PromptSegment::visual(visual_tokens(nullptr, model, image)));
  for (const PromptSegment& q : query) prefix.push_back(q);
  return classify_prefix(model, prefix, label_ids);
}

std::vector<int> manual_query_tokens(const Tokenizer& tok) {
  return {tok.id("this"), tok.id("is"), tok.id("a")};
}

namespace {

struct SequenceBatchItem {
  std::vector<const synth::ImageSample*> images;
};

}  // namespace

PretrainReport pretrain(VLModel& model, const CorpusConfig& corpus,
                        const PretrainConfig& opt,
                        const std::vector<synth::ImageSample>* corpus_override) {
  if (model.frozen) throw ProtocolError("pretrain: model is frozen");
  if (opt.epochs < 0 || opt.batch_size < 1 || opt.lr <= 0.0) {
    throw ConfigError("pretrain: epochs must be >= 0, batch_size >= 1, lr > 0");
  }
  if (corpus.k_min < 1 || corpus.k_max < corpus.k_min) {
    throw ConfigError("pretrain: bad interleave range");
  }

  const auto t_start = std::chrono::steady_clock::now();

  // Materialize the corpus once. Default: images_per_class in-distribution
  // renders per class at the pretraining scale.
  std::vector<synth::ImageSample> storage;
  std::vector<const synth::ImageSample*> corpus_images;
  if (corpus_override) {
    for (const auto& s : *corpus_override) {
      if (s.is_shifted()) {
        throw ProtocolError(
            "pretrain: OOD purity violated, corpus contains a '" +
            synth::shift_name(s.shift) + "' sample");
      }
      corpus_images.push_back(&s);
    }
  } else {
    storage.reserve(static_cast<size_t>(synth::kNumClasses) *
                    corpus.images_per_class);
    for (int cid = 0; cid < synth::kNumClasses; ++cid) {
      for (int j = 0; j < corpus.images_per_class; ++j) {
        const uint64_t s = derive_seed(
            corpus.seed, {kTagCorpus, static_cast<uint64_t>(cid),
                          static_cast<uint64_t>(j)});
        storage.push_back(
            synth::render(synth::class_by_id(cid), synth::kPretrainScale, s));
      }
    }
    for (const auto& s : storage) corpus_images.push_back(&s);
  }
  if (corpus_images.empty()) throw ValueError("pretrain: empty corpus");

  std::vector<Tensor> params;
  for (nn::ParamSet* set : {&model.ve, &model.we, &model.lm}) {
    for (auto& [name, t] : set->items()) {
      if (t.requires_grad()) params.push_back(t);
    }
  }
  std::vector<std::vector<double>> velocity(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    velocity[i].assign(params[i].size(), 0.0);
  }

  const Tokenizer& tok = model.tokenizer;
  const std::vector<int> caption_prefix = {tok.id("this"), tok.id("is"),
                                           tok.id("a")};

  Rng order_rng(derive_seed(corpus.seed, {kTagOrder}));
  PretrainReport report;
  size_t cap_correct = 0, cap_total = 0;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    const bool last_epoch = epoch == opt.epochs - 1;
    std::vector<size_t> order(corpus_images.size());
    std::iota(order.begin(), order.end(), size_t{0});
    order_rng.shuffle(order);

    // Group the epoch's images into interleaved sequences.
    std::vector<SequenceBatchItem> sequences;
    size_t pos = 0;
    while (pos < order.size()) {
      const int span = corpus.k_max - corpus.k_min + 1;
      size_t k = corpus.k_min + order_rng.below(span);
      k = std::min(k, order.size() - pos);
      SequenceBatchItem item;
      for (size_t j = 0; j < k; ++j) {
        item.images.push_back(corpus_images[order[pos + j]]);
      }
      sequences.push_back(std::move(item));
      pos += k;
    }
    report.sequences_per_epoch = static_cast<int>(sequences.size());

    double epoch_loss = 0.0;
    for (size_t batch_start = 0; batch_start < sequences.size();
         batch_start += opt.batch_size) {
      const size_t batch_end =
          std::min(sequences.size(), batch_start + opt.batch_size);
      const size_t batch_n = batch_end - batch_start;
      for (Tensor& p : params) p.zero_grad();

      for (size_t si = batch_start; si < batch_end; ++si) {
        Tape tape;
        std::vector<PromptSegment> segments;
        std::vector<int> token_at;  // token id per position, -1 for visual
        segments.push_back(PromptSegment::text({tok.bos_id()}));
        token_at.push_back(tok.bos_id());
        for (const synth::ImageSample* img : sequences[si].images) {
          segments.push_back(
              PromptSegment::visual(visual_tokens(&tape, model, *img)));
          for (int j = 0; j < model.ve_config.token_count(); ++j) {
            token_at.push_back(-1);
          }
          std::vector<int> caption = caption_prefix;
          caption.push_back(tok.class_token(img->label));
          caption.push_back(tok.eoc_id());
          segments.push_back(PromptSegment::text(caption));
          for (int id : caption) token_at.push_back(id);
        }

        Tensor logits = forward_logits(&tape, model, segments);
        const int t = logits.dim(0);
        std::vector<int> targets(t, 0);
        std::vector<bool> mask(t, false);
        for (int i = 0; i + 1 < t; ++i) {
          if (token_at[i + 1] >= 0) {
            targets[i] = token_at[i + 1];
            mask[i] = true;
          }
        }
        Tensor loss = cross_entropy(&tape, logits, targets, mask);
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw DivergenceError("pretrain: non-finite loss at epoch " +
                                std::to_string(epoch));
        }
        epoch_loss += loss_value;

        if (last_epoch) {
          const int v = logits.dim(1);
          for (int i = 1; i < t; ++i) {
            if (token_at[i] >= 0 && tok.class_of_token(token_at[i]) >= 0) {
              const double* row = logits.data() + (static_cast<size_t>(i) - 1) * v;
              const int pred = static_cast<int>(
                  std::max_element(row, row + v) - row);
              cap_correct += pred == token_at[i] ? 1 : 0;
              ++cap_total;
            }
          }
        }
        tape.backward(loss);
      }

      // Mean-reduced batch gradient, then SGD with momentum.
      const double inv_n = 1.0 / static_cast<double>(batch_n);
      for (size_t pi = 0; pi < params.size(); ++pi) {
        double* g = params[pi].grad();
        double* w = params[pi].data();
        double* vel = velocity[pi].data();
        const size_t n = params[pi].size();
        for (size_t i = 0; i < n; ++i) {
          const double gm = g[i] * inv_n;
          vel[i] = opt.momentum * vel[i] + gm;
          w[i] -= opt.lr * vel[i];
        }
      }
    }
    report.epoch_loss.push_back(epoch_loss / sequences.size());
  }

  report.final_caption_accuracy =
      cap_total > 0 ? static_cast<double>(cap_correct) / cap_total : 0.0;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return report;
}

namespace {

Tensor config_tensor(std::initializer_list<int> values) {
  std::vector<double> v;
  for (int x : values) v.push_back(static_cast<double>(x));
  const int n = static_cast<int>(v.size());
  return Tensor::from_data({n}, std::move(v));
}

}  // namespace

void save_checkpoint(const VLModel& model, const std::string& path) {
  Container c;
  c.magic = "VLMC";
  c.seed = model.root_seed;
  c.flag = model.frozen ? 1 : 0;
  c.tensors.emplace_back(
      "meta.lm",
      config_tensor({model.lm_config.d_model, model.lm_config.n_layers,
                     model.lm_config.n_heads, model.lm_config.max_seq_len,
                     model.lm_config.vocab_size}));
  c.tensors.emplace_back(
      "meta.ve",
      config_tensor({model.ve_config.channels[0], model.ve_config.channels[1],
                     model.ve_config.pool_grid, model.ve_config.d_model,
                     model.ve_config.kernel, model.ve_config.stride}));
  for (const nn::ParamSet* set : {&model.ve, &model.we, &model.lm}) {
    for (const auto& [name, t] : set->items()) {
      c.tensors.emplace_back(name, t);
    }
  }
  c.words = model.tokenizer.vocab();
  write_container(path, c);
}

VLModel load_checkpoint(const std::string& path) {
  Container c = read_container(path, "VLMC");
  VLModel m;
  m.root_seed = c.seed;
  m.frozen = c.flag != 0;
  m.tokenizer = Tokenizer::from_vocab(c.words);

  const Tensor* meta_lm = nullptr;
  const Tensor* meta_ve = nullptr;
  for (const auto& [name, t] : c.tensors) {
    if (name == "meta.lm") meta_lm = &t;
    if (name == "meta.ve") meta_ve = &t;
  }
  if (!meta_lm || !meta_ve || meta_lm->size() != 5 || meta_ve->size() != 6) {
    throw FormatError("load_checkpoint: missing config metadata");
  }
  m.lm_config.d_model = static_cast<int>(meta_lm->at(0));
  m.lm_config.n_layers = static_cast<int>(meta_lm->at(1));
  m.lm_config.n_heads = static_cast<int>(meta_lm->at(2));
  m.lm_config.max_seq_len = static_cast<int>(meta_lm->at(3));
  m.lm_config.vocab_size = static_cast<int>(meta_lm->at(4));
  m.ve_config.channels[0] = static_cast<int>(meta_ve->at(0));
  m.ve_config.channels[1] = static_cast<int>(meta_ve->at(1));
  m.ve_config.pool_grid = static_cast<int>(meta_ve->at(2));
  m.ve_config.d_model = static_cast<int>(meta_ve->at(3));
  m.ve_config.kernel = static_cast<int>(meta_ve->at(4));
  m.ve_config.stride = static_cast<int>(meta_ve->at(5));
  m.lm_config.validate();
  m.ve_config.validate();
  if (m.lm_config.vocab_size != m.tokenizer.vocab_size()) {
    throw FormatError("load_checkpoint: vocabulary size mismatch");
  }

  const bool trainable = !m.frozen;
  for (auto& [name, t] : c.tensors) {
    if (name.rfind("meta.", 0) == 0) continue;
    Tensor param = t;
    param.set_requires_grad(trainable);
    if (name.rfind("ve.", 0) == 0) {
      m.ve.add(name, std::move(param));
    } else if (name.rfind("we.", 0) == 0) {
      m.we.add(name, std::move(param));
    } else if (name.rfind("lm.", 0) == 0) {
      m.lm.add(name, std::move(param));
    } else {
      throw FormatError("load_checkpoint: unexpected tensor " + name);
    }
  }
  if (!m.we.has("we.tok_emb") || !m.we.has("we.pos_emb")) {
    throw FormatError("load_checkpoint: missing embedding tensors");
  }
  if (m.we.get("we.tok_emb").dim(1) != m.lm_config.d_model) {
    throw ConfigError("load_checkpoint: token embedding width " +
                      std::to_string(m.we.get("we.tok_emb").dim(1)) +
                      " does not match d_model " +
                      std::to_string(m.lm_config.d_model));
  }
  if (m.frozen) m.frozen_digest = m.digest();
  return m;
}

VLModel load_checkpoint(const std::string& path, const nn::LMConfig& expect) {
  VLModel m = load_checkpoint(path);
  if (m.lm_config.d_model != expect.d_model ||
      m.lm_config.n_layers != expect.n_layers ||
      m.lm_config.n_heads != expect.n_heads ||
      m.lm_config.max_seq_len != expect.max_seq_len) {
    throw ConfigError(
        "load_checkpoint: stored LM config (d_model " +
        std::to_string(m.lm_config.d_model) + ", layers " +
        std::to_string(m.lm_config.n_layers) +
        ") does not match the expected config (d_model " +
        std::to_string(expect.d_model) + ", layers " +
        std::to_string(expect.n_layers) + ")");
  }
  return m;
}

}  // namespace promptlab::vlm
