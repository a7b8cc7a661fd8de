#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "promptlab/adapt/adapt.hpp"
#include "promptlab/core/error.hpp"
#include "promptlab/core/ops.hpp"
#include "promptlab/core/rng.hpp"

using namespace promptlab;
using namespace promptlab::adapt;
using core::Rng;
using core::Tensor;

namespace {

vlm::VLModel test_model(uint64_t seed) {
  nn::LMConfig lm;
  lm.d_model = 16;
  lm.n_layers = 1;
  lm.n_heads = 2;
  lm.max_seq_len = 128;
  nn::VEConfig ve;
  ve.channels = {4, 6};
  ve.d_model = 16;
  vlm::VLModel m = vlm::make_model(lm, ve, seed);
  m.freeze();
  return m;
}

synth::SupportSet small_support(uint64_t seed, int n_classes = 4,
                                int per_class = 3) {
  auto [base, novel] = synth::make_splits(8, 8, seed);
  base.resize(n_classes);
  return synth::build_support(base, per_class, seed);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.defined() && b.defined() && a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("knn: exact-match query and full-tie fallback") {
  vlm::VLModel m = test_model(1);
  synth::SupportSet support = small_support(11);
  // K=1 with the query equal to a support image returns that image's label.
  const auto& probe = support.entries[7];
  CHECK(knn_classify(m, support, probe.sample, 1) == probe.class_id);

  // All-identical features: full tie, lowest class id among support wins.
  std::vector<std::vector<double>> flat(
      support.entries.size(), std::vector<double>(8, 0.5));
  const std::vector<double> query(8, 0.25);
  const int pred = knn_classify_with(support, flat, query,
                                     static_cast<int>(flat.size()));
  int lowest = support.entries[0].class_id;
  for (const auto& e : support.entries) lowest = std::min(lowest, e.class_id);
  CHECK(pred == lowest);

  CHECK_THROWS_AS(knn_classify(m, support, probe.sample, 0), ValueError);
  CHECK_THROWS_AS(knn_classify(m, support, probe.sample, 1000), ValueError);
  CHECK_THROWS_AS(knn_classify(m, synth::SupportSet{}, probe.sample, 1),
                  ValueError);
}

TEST_CASE("zero_shot_classify equals classify with empty context by definition") {
  vlm::VLModel m = test_model(2);
  const synth::ImageSample img = synth::render(synth::class_by_id(5), 32, 3);
  const std::vector<int> ids = {1, 5, 9, 22};
  const int a = zero_shot_classify(m, img, ids);
  const int b = vlm::classify(
      m, {}, img,
      {vlm::PromptSegment::text(vlm::manual_query_tokens(m.tokenizer))}, ids);
  CHECK(a == b);
  std::vector<int> perm = {22, 9, 5, 1};
  CHECK(zero_shot_classify(m, img, perm) == a);
}

TEST_CASE("linear probe: separability, zero-iteration tie-break, errors") {
  vlm::VLModel m = test_model(3);
  // The test VE has 6 output channels, so features live in a rank-6
  // subspace; 6 points of 2 classes are then separable in general position.
  std::vector<synth::ImageSample> samples;
  for (int cid : {0, 9}) {
    for (int j = 0; j < 3; ++j) {
      samples.push_back(synth::render(synth::class_by_id(cid), 32, 100 + j));
    }
  }
  ProbeConfig pc;
  pc.max_iters = 20000;
  pc.lr = 1.0;
  pc.tol = 1e-9;
  LinearProbe probe = linear_probe_train(m, samples, {0, 9}, pc);
  CHECK(probe.train_accuracy == 1.0);

  ProbeConfig zero;
  zero.max_iters = 0;
  LinearProbe init = linear_probe_train(m, samples, {0, 9}, zero);
  // Zero weights give uniform scores; strict argmax keeps the lowest id.
  CHECK(init.predict(ve_feature(m, samples.back())) == 0);

  CHECK_THROWS_AS(linear_probe_train(m, samples, {0, 9, 13}), ValueError);
  CHECK_THROWS_AS(linear_probe_train(m, {}, {0}), ValueError);
}

TEST_CASE("icl_random: determinism, full-permutation case, token arithmetic") {
  vlm::VLModel m = test_model(4);
  synth::SupportSet support = small_support(21);
  const auto a = icl_random(m, support, 5, 99);
  const auto b = icl_random(m, support, 5, 99);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].kind == vlm::PromptSegment::Kind::Text) {
      CHECK(a[i].tokens == b[i].tokens);
    } else {
      CHECK(bitwise_equal(a[i].emb, b[i].emb));
    }
  }

  const int n = static_cast<int>(support.entries.size());
  const auto all = icl_random(m, support, n, 7);
  std::multiset<int> seen;
  for (const auto& seg : all) {
    if (seg.kind == vlm::PromptSegment::Kind::Text) {
      seen.insert(seg.tokens[3]);  // the class-name token
    }
  }
  std::multiset<int> want;
  for (const auto& e : support.entries) {
    want.insert(m.tokenizer.class_token(e.class_id));
  }
  CHECK(seen == want);

  // Context length: k demos, each m=4 visual tokens + 5 text tokens.
  int total = 0;
  for (const auto& seg : icl_random(m, support, 5, 1)) total += seg.length();
  CHECK(total == 5 * (m.ve_config.token_count() + 5));

  CHECK_THROWS_AS(icl_random(m, support, n + 1, 0), ValueError);
}

TEST_CASE("icl_rice: self-retrieval sits adjacent to the query, ties by index") {
  vlm::VLModel m = test_model(5);
  synth::SupportSet support = small_support(31);
  const auto feats = compute_support_features(m, support);

  // Query equal to support entry 4: it must be selected and ordered last.
  const auto sel = rice_selection(feats, feats[4], 3);
  CHECK(sel.back() == 4);

  // All-orthogonal (here: identical) similarities: selection is the first K
  // indices by the tie rule.
  std::vector<std::vector<double>> flat(feats.size(),
                                        std::vector<double>(4, 1.0));
  const std::vector<double> q = {1.0, 0.0, 0.0, 0.0};
  const auto tied = rice_selection(flat, q, 4);
  CHECK(tied == std::vector<size_t>({3, 2, 1, 0}));  // least-similar first

  CHECK_THROWS_AS(icl_rice(m, support, support.entries[0].sample, 0),
                  ValueError);
}

TEST_CASE("prol_train: zero epochs yields the documented N(0,1) init") {
  vlm::VLModel m = test_model(6);
  synth::SupportSet support = small_support(41);
  TrainConfig tc;
  tc.epochs = 0;
  tc.seed = 5;
  PromptParams a = prol_train(m, support, 16, 4, tc);
  PromptParams b = prol_train(m, support, 16, 4, tc);
  CHECK(bitwise_equal(a.ctx, b.ctx));
  CHECK(bitwise_equal(a.query, b.query));
  CHECK(a.train_loss.empty());
  CHECK(a.learnable_tokens() == 20);

  // Rough N(0,1) shape of the init.
  double mean = 0.0, var = 0.0;
  for (size_t i = 0; i < a.ctx.size(); ++i) mean += a.ctx.at(i);
  mean /= a.ctx.size();
  for (size_t i = 0; i < a.ctx.size(); ++i) {
    var += (a.ctx.at(i) - mean) * (a.ctx.at(i) - mean);
  }
  var /= a.ctx.size();
  CHECK(std::abs(mean) < 0.2);
  CHECK(std::abs(var - 1.0) < 0.35);

  TrainConfig other = tc;
  other.seed = 6;
  PromptParams c = prol_train(m, support, 16, 4, other);
  CHECK_FALSE(bitwise_equal(a.ctx, c.ctx));
}

TEST_CASE("prol_train: deterministic, finite, frozen digest intact") {
  vlm::VLModel m = test_model(7);
  synth::SupportSet support = small_support(51);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.seed = 9;
  const uint64_t digest0 = m.digest();
  PromptParams a = prol_train(m, support, 8, 2, tc);
  PromptParams b = prol_train(m, support, 8, 2, tc);
  CHECK(bitwise_equal(a.ctx, b.ctx));
  CHECK(bitwise_equal(a.query, b.query));
  CHECK(a.train_loss.size() == 3);
  for (double l : a.train_loss) CHECK(std::isfinite(l));
  CHECK(m.digest() == digest0);
  // Training moved the parameters.
  TrainConfig zero = tc;
  zero.epochs = 0;
  PromptParams init = prol_train(m, support, 8, 2, zero);
  CHECK_FALSE(bitwise_equal(a.ctx, init.ctx));
}

TEST_CASE("prol divergence raises a structured error") {
  vlm::VLModel m = test_model(8);
  synth::SupportSet support = small_support(61);
  // Non-finite activations anywhere in training surface as divergence.
  support.entries[0].sample.pixels[0] = std::nan("");
  TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 1;
  try {
    prol_train(m, support, 8, 2, tc);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch") != std::string::npos);
    CHECK(msg.find("lr") != std::string::npos);
  }
}

TEST_CASE("man_prol: fixed template query, only the context learns") {
  vlm::VLModel m = test_model(9);
  synth::SupportSet support = small_support(71);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 3;
  PromptParams p = man_prol_train(m, support, 8, tc);
  CHECK(p.variant == PromptVariant::ManProl);
  CHECK(p.learnable_tokens() == 8);
  // Query embeddings are bitwise rows of the word-embedding table.
  Tensor direct = core::embedding_lookup(
      nullptr, m.we.get("we.tok_emb"), p.manual_query);
  CHECK(bitwise_equal(p.query, direct));
  // And the manual query is the template "this is a".
  CHECK(p.manual_query == vlm::manual_query_tokens(m.tokenizer));
}

TEST_CASE("co_prol at init behaves exactly like prol (zero-init output layer)") {
  vlm::VLModel m = test_model(10);
  synth::SupportSet support = small_support(81);
  TrainConfig tc;
  tc.epochs = 0;
  tc.seed = 17;
  PromptParams prol = prol_train(m, support, 8, 2, tc);
  PromptParams co = co_prol_train(m, support, 8, 2, tc);
  CHECK(bitwise_equal(prol.ctx, co.ctx));
  CHECK(bitwise_equal(prol.query, co.query));
  // The meta-network's output layer starts at zero.
  const Tensor& w2 = co.metanet.get("mnet.w2");
  for (size_t i = 0; i < w2.size(); ++i) CHECK(w2.at(i) == 0.0);

  std::vector<int> ids = {0, 1, 2, 3, 9, 17};
  for (int trial = 0; trial < 5; ++trial) {
    const synth::ImageSample img = synth::render(
        synth::class_by_id(trial * 7 % 48), 32, 900 + trial);
    CHECK(prol_classify(m, prol, img, ids) == prol_classify(m, co, img, ids));
  }
}

TEST_CASE("robust prompt: token parity, shape checks, config errors") {
  vlm::VLModel m = test_model(11);
  synth::SupportSet support = small_support(91);
  TrainConfig tc;
  tc.epochs = 0;
  tc.seed = 23;
  PromptParams prol = prol_train(m, support, 16, 4, tc);
  PromptParams robust =
      robust_prol_train(m, support, {16, 24, 32}, 16, 4, tc);
  CHECK(robust.ctx1.dim(0) + robust.ctx2.dim(0) == 16);
  CHECK(robust.learnable_tokens() == prol.learnable_tokens());
  CHECK(robust.scales == std::array<int, 3>{16, 24, 32});

  CHECK_THROWS_AS(robust_prol_train(m, support, {16, 24, 32}, 15, 4, tc),
                  ConfigError);
  CHECK_THROWS_AS(robust_prol_train(m, support, {16, 24, 16}, 16, 4, tc),
                  ConfigError);
}

TEST_CASE("robust classify needs every scale; single-scale variant works") {
  vlm::VLModel m = test_model(12);
  synth::SupportSet support = small_support(101);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.seed = 2;
  PromptParams robust =
      robust_prol_train(m, support, {16, 24, 32}, 8, 2, tc);
  PromptParams ss = rpol_ss_train(m, support, 24, 8, 2, tc);
  CHECK(ss.scales == std::array<int, 3>{24, 24, 24});
  CHECK(ss.variant == PromptVariant::RobustSS);

  const synth::ImageSample img = synth::render(synth::class_by_id(1), 32, 55);
  const std::vector<int> ids = support.base_ids;
  const std::array<int, 3> scales{16, 24, 32};
  const MultiScaleImage views = MultiScaleImage::materialize(img, scales);
  const int a = robust_prol_classify(m, robust, views, ids);
  const int b = robust_prol_classify(m, robust, views, ids);
  CHECK(a == b);
  (void)robust_prol_classify(m, ss, views, ids);

  const MultiScaleImage only32 = MultiScaleImage::single(img);
  CHECK_THROWS_AS(robust_prol_classify(m, robust, only32, ids), ValueError);
  CHECK_THROWS_AS(robust_prol_classify(m, prol_train(m, support, 4, 2,
                                                     TrainConfig{.epochs = 0}),
                                       views, ids),
                  ValueError);
  CHECK_THROWS_AS(prol_classify(m, robust, img, ids), ValueError);
}

TEST_CASE("ensemble: single member is the member; averaging matches the oracle") {
  vlm::VLModel m = test_model(13);
  synth::SupportSet support = small_support(111);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  const std::vector<int> ids = support.base_ids;

  std::vector<PromptParams> members;
  for (uint64_t s : {1ull, 2ull, 3ull}) {
    TrainConfig mc = tc;
    mc.seed = s;
    members.push_back(prol_train(m, support, 8, 2, mc));
  }

  EnsembleSpec single;
  single.mode = EnsembleSpec::Mode::SS;
  single.members = {members[0]};
  const synth::ImageSample img = synth::render(synth::class_by_id(2), 32, 66);
  const MultiScaleImage views = MultiScaleImage::single(img);
  CHECK(ensemble_classify(m, single, views, ids) ==
        prol_classify(m, members[0], img, ids));

  EnsembleSpec three;
  three.mode = EnsembleSpec::Mode::SS;
  three.members = members;
  const int pred = ensemble_classify(m, three, views, ids);
  // Hand-computed average-of-scores oracle.
  std::vector<int> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> mean(sorted.size(), 0.0);
  for (const auto& member : members) {
    const auto s = prompt_scores(m, member, views, sorted);
    for (size_t i = 0; i < s.size(); ++i) mean[i] += s[i] / 3.0;
  }
  int want = sorted[0];
  double best = mean[0];
  for (size_t i = 1; i < sorted.size(); ++i) {
    if (mean[i] > best) {
      best = mean[i];
      want = sorted[i];
    }
  }
  CHECK(pred == want);

  EnsembleSpec bad_ms;
  bad_ms.mode = EnsembleSpec::Mode::MS;
  bad_ms.members = members;  // all at scale 32
  CHECK_THROWS_AS(bad_ms.validate(), ConfigError);
  EnsembleSpec empty;
  CHECK_THROWS_AS(empty.validate(), ValueError);
}

TEST_CASE("prompt params survive a save/load round trip bitwise") {
  namespace fs = std::filesystem;
  vlm::VLModel m = test_model(14);
  synth::SupportSet support = small_support(121);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 77;
  const std::string dir =
      (fs::temp_directory_path() / "promptlab_test_adapt").string();
  fs::create_directories(dir);

  PromptParams co = co_prol_train(m, support, 8, 2, tc);
  save_prompt(co, dir + "/co.prmt");
  PromptParams co2 = load_prompt(dir + "/co.prmt");
  CHECK(co2.variant == PromptVariant::CoProl);
  CHECK(bitwise_equal(co.ctx, co2.ctx));
  CHECK(bitwise_equal(co.query, co2.query));
  CHECK(bitwise_equal(co.metanet.get("mnet.w1"), co2.metanet.get("mnet.w1")));
  CHECK(co.train_loss == co2.train_loss);
  CHECK(co2.train_echo.seed == tc.seed);

  PromptParams robust =
      robust_prol_train(m, support, {16, 24, 32}, 8, 2, tc);
  save_prompt(robust, dir + "/robust.prmt");
  PromptParams robust2 = load_prompt(dir + "/robust.prmt");
  CHECK(robust2.variant == PromptVariant::Robust);
  CHECK(bitwise_equal(robust.ctx1, robust2.ctx1));
  CHECK(bitwise_equal(robust.ctx2, robust2.ctx2));
  CHECK(robust2.scales == robust.scales);

  // Predictions carry over exactly.
  const synth::ImageSample img = synth::render(synth::class_by_id(3), 32, 12);
  const std::array<int, 3> scales{16, 24, 32};
  const MultiScaleImage views = MultiScaleImage::materialize(img, scales);
  CHECK(robust_prol_classify(m, robust, views, support.base_ids) ==
        robust_prol_classify(m, robust2, views, support.base_ids));
}

TEST_CASE("training loss decreases on a tiny memorization task") {
  vlm::VLModel m = test_model(15);
  synth::SupportSet support = small_support(131, 2, 2);
  TrainConfig tc;
  tc.epochs = 25;
  tc.batch_size = 4;
  tc.lr = 0.5;
  tc.seed = 4;
  PromptParams p = prol_train(m, support, 8, 2, tc);
  CHECK(p.train_loss.front() > p.train_loss.back());
}
