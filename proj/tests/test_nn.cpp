#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "promptlab/core/error.hpp"
#include "promptlab/core/ops.hpp"
#include "promptlab/core/rng.hpp"
#include "promptlab/nn/blocks.hpp"

using namespace promptlab;
using namespace promptlab::core;
using namespace promptlab::nn;

namespace {

LMConfig small_lm() {
  LMConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.max_seq_len = 32;
  cfg.vocab_size = 11;
  return cfg;
}

VEConfig small_ve() {
  VEConfig cfg;
  cfg.channels = {4, 6};
  cfg.d_model = 16;
  return cfg;
}

Tensor randn(std::vector<int> shape, Rng& rng, bool rg = false) {
  Tensor t(std::move(shape), rg);
  for (size_t i = 0; i < t.size(); ++i) t.at(i) = rng.normal();
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool pin_mode() { return std::getenv("PROMPTLAB_PIN") != nullptr; }

}  // namespace

TEST_CASE("init_params is deterministic and biases start at zero") {
  const LMConfig cfg = small_lm();
  ParamSet a = init_lm_params(cfg, 7);
  ParamSet b = init_lm_params(cfg, 7);
  ParamSet c = init_lm_params(cfg, 8);
  bool all_equal = true;
  bool any_diff_c = false;
  for (size_t i = 0; i < a.items().size(); ++i) {
    all_equal &= bitwise_equal(a.items()[i].second, b.items()[i].second);
    any_diff_c |= !bitwise_equal(a.items()[i].second, c.items()[i].second);
  }
  CHECK(all_equal);
  CHECK(any_diff_c);
  CHECK(a.get("lm.h0.attn.bqkv").at(0) == 0.0);
  CHECK(a.get("lm.h0.mlp.b1").at(3) == 0.0);
  CHECK(a.get("lm.h1.attn.bo").at(1) == 0.0);
  CHECK(a.get("lm.lnf.g").at(0) == 1.0);
}

TEST_CASE("lm_forward causality: prefix logits are bitwise stable") {
  const LMConfig cfg = small_lm();
  ParamSet lm = init_lm_params(cfg, 3);
  ParamSet we = init_we_params(cfg, 3);
  const Tensor& pos = we.get("we.pos_emb");
  Rng rng(100);
  Tensor x = randn({10, cfg.d_model}, rng);

  Tensor base = lm_forward(nullptr, lm, cfg, pos, x);
  for (int t : {3, 7, 9}) {
    Tensor xp = x.clone();
    for (int j = 0; j < cfg.d_model; ++j) {
      xp.at(static_cast<size_t>(t) * cfg.d_model + j) += 0.5 + j * 0.01;
    }
    Tensor out = lm_forward(nullptr, lm, cfg, pos, xp);
    REQUIRE(std::memcmp(out.data(), base.data(),
                        static_cast<size_t>(t) * cfg.vocab_size *
                            sizeof(double)) == 0);
    // The perturbed position itself must change (the test has teeth).
    bool changed = false;
    for (int v = 0; v < cfg.vocab_size; ++v) {
      changed |= out.at(static_cast<size_t>(t) * cfg.vocab_size + v) !=
                 base.at(static_cast<size_t>(t) * cfg.vocab_size + v);
    }
    CHECK(changed);
  }
}

TEST_CASE("lm_forward suffix extension keeps prefix rows bitwise identical") {
  const LMConfig cfg = small_lm();
  ParamSet lm = init_lm_params(cfg, 3);
  ParamSet we = init_we_params(cfg, 3);
  Rng rng(101);
  Tensor x = randn({9, cfg.d_model}, rng);
  Tensor head = slice_rows(nullptr, x, 0, 6);
  Tensor full = lm_forward(nullptr, lm, cfg, we.get("we.pos_emb"), x);
  Tensor part = lm_forward(nullptr, lm, cfg, we.get("we.pos_emb"), head);
  REQUIRE(std::memcmp(full.data(), part.data(),
                      static_cast<size_t>(6) * cfg.vocab_size *
                          sizeof(double)) == 0);
}

TEST_CASE("lm_forward shapes and length guard") {
  const LMConfig cfg = small_lm();
  ParamSet lm = init_lm_params(cfg, 1);
  ParamSet we = init_we_params(cfg, 1);
  Rng rng(5);
  Tensor one = randn({1, cfg.d_model}, rng);
  Tensor out = lm_forward(nullptr, lm, cfg, we.get("we.pos_emb"), one);
  CHECK(out.dim(0) == 1);
  CHECK(out.dim(1) == cfg.vocab_size);
  Tensor too_long = randn({cfg.max_seq_len + 1, cfg.d_model}, rng);
  CHECK_THROWS_AS(lm_forward(nullptr, lm, cfg, we.get("we.pos_emb"), too_long),
                  ShapeError);
}

TEST_CASE("position sensitivity: swapping embeddings changes final logits") {
  const LMConfig cfg = small_lm();
  ParamSet lm = init_lm_params(cfg, 3);
  ParamSet we = init_we_params(cfg, 3);
  Rng rng(102);
  Tensor x = randn({8, cfg.d_model}, rng);
  Tensor swapped = x.clone();
  for (int j = 0; j < cfg.d_model; ++j) {
    std::swap(swapped.at(static_cast<size_t>(2) * cfg.d_model + j),
              swapped.at(static_cast<size_t>(5) * cfg.d_model + j));
  }
  Tensor a = lm_forward(nullptr, lm, cfg, we.get("we.pos_emb"), x);
  Tensor b = lm_forward(nullptr, lm, cfg, we.get("we.pos_emb"), swapped);
  bool changed = false;
  for (int v = 0; v < cfg.vocab_size; ++v) {
    changed |= a.at(static_cast<size_t>(7) * cfg.vocab_size + v) !=
               b.at(static_cast<size_t>(7) * cfg.vocab_size + v);
  }
  CHECK(changed);
}

TEST_CASE("gradient flows to input embeddings with a fully frozen ParamSet") {
  const LMConfig cfg = small_lm();
  ParamSet lm = init_lm_params(cfg, 4);
  ParamSet we = init_we_params(cfg, 4);
  lm.freeze();
  we.freeze();
  CHECK(lm.trainable().empty());

  Rng rng(103);
  Tensor x = randn({5, cfg.d_model}, rng, true);
  Tape tape;
  Tensor logits = lm_forward(&tape, lm, cfg, we.get("we.pos_emb"), x);
  Tensor loss = cross_entropy(&tape, logits, {1, 2, 3, 4, 5},
                              {true, true, true, true, false});
  tape.backward(loss);
  double grad_norm = 0.0;
  for (size_t i = 0; i < x.size(); ++i) grad_norm += x.grad()[i] * x.grad()[i];
  CHECK(grad_norm > 0.0);
  CHECK(lm.get("lm.h0.attn.wqkv").grad() == nullptr);
}

TEST_CASE("freeze flips flags but never values") {
  const LMConfig cfg = small_lm();
  ParamSet lm = init_lm_params(cfg, 9);
  Tensor before = lm.get("lm.h0.attn.wqkv").clone();
  lm.freeze();
  CHECK(bitwise_equal(before, lm.get("lm.h0.attn.wqkv")));
  CHECK_FALSE(lm.get("lm.h0.attn.wqkv").requires_grad());
}

TEST_CASE("ve_forward: token count is scale-independent, outputs differ") {
  const VEConfig cfg = small_ve();
  ParamSet ve = init_ve_params(cfg, 11);
  Rng rng(12);
  Tensor img16 = randn({3, 16, 16}, rng);
  for (size_t i = 0; i < img16.size(); ++i) {
    img16.at(i) = std::abs(img16.at(i)) / 4.0;
  }
  // Nearest-neighbor upsample of the same content to 32x32.
  Tensor img32({3, 32, 32});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        img32.at((static_cast<size_t>(c) * 32 + y) * 32 + x) =
            img16.at((static_cast<size_t>(c) * 16 + y / 2) * 16 + x / 2);
      }
    }
  }
  Tensor t16 = ve_forward(nullptr, ve, cfg, img16);
  Tensor t32 = ve_forward(nullptr, ve, cfg, img32);
  CHECK(t16.dim(0) == cfg.token_count());
  CHECK(t32.dim(0) == cfg.token_count());
  CHECK(t16.dim(1) == cfg.d_model);
  CHECK_FALSE(bitwise_equal(t16, t32));

  Tensor again = ve_forward(nullptr, ve, cfg, img16);
  CHECK(bitwise_equal(t16, again));

  Tensor tiny({3, 6, 6});
  CHECK_THROWS_AS(ve_forward(nullptr, ve, cfg, tiny), ValueError);
  Tensor rect_shaped = Tensor::zeros({3, 16, 24});
  CHECK_THROWS_AS(ve_forward(nullptr, ve, cfg, rect_shaped), ShapeError);
}

TEST_CASE("ve_forward on a zero image equals bias-only propagation") {
  const VEConfig cfg = small_ve();
  ParamSet ve = init_ve_params(cfg, 21);
  // Init biases are zero, which would make the oracle trivially zero; give
  // them values first.
  Rng rng(22);
  for (const char* name : {"ve.conv1.b", "ve.conv2.b", "ve.proj.b"}) {
    Tensor b = ve.get(name);
    for (size_t i = 0; i < b.size(); ++i) b.at(i) = rng.normal();
  }

  const int s = 16;
  Tensor zero_img({3, s, s});
  Tensor got = ve_forward(nullptr, ve, cfg, zero_img);

  // Independent propagation: conv over a zero image emits its bias at every
  // pixel; conv over the resulting per-channel constant is a per-pixel sum
  // of the kernel taps that land inside the image.
  auto gelu_scalar = [](double v) {
    return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 *
                                      (v + 0.044715 * v * v * v)));
  };
  const int c1 = cfg.channels[0], c2 = cfg.channels[1];
  const int s1 = (s + 2 - 3) / 2 + 1;
  const int s2 = (s1 + 2 - 3) / 2 + 1;
  std::vector<double> h1(c1);
  for (int c = 0; c < c1; ++c) h1[c] = gelu_scalar(ve.get("ve.conv1.b").at(c));
  std::vector<double> h2(static_cast<size_t>(c2) * s2 * s2);
  const Tensor& w2 = ve.get("ve.conv2.w");
  for (int co = 0; co < c2; ++co) {
    for (int oy = 0; oy < s2; ++oy) {
      for (int ox = 0; ox < s2; ++ox) {
        double acc = ve.get("ve.conv2.b").at(co);
        for (int ci = 0; ci < c1; ++ci) {
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * 2 + ky - 1;
            if (iy < 0 || iy >= s1) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * 2 + kx - 1;
              if (ix < 0 || ix >= s1) continue;
              acc += h1[ci] *
                     w2.at(((static_cast<size_t>(co) * c1 + ci) * 3 + ky) * 3 +
                           kx);
            }
          }
        }
        h2[(static_cast<size_t>(co) * s2 + oy) * s2 + ox] = gelu_scalar(acc);
      }
    }
  }
  const int g = cfg.pool_grid;
  auto lo = [](int i, int in, int on) { return (i * in) / on; };
  auto hi = [](int i, int in, int on) { return ((i + 1) * in + on - 1) / on; };
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const int cell = gy * g + gx;
      for (int dcol = 0; dcol < cfg.d_model; ++dcol) {
        double acc = ve.get("ve.proj.b").at(dcol);
        for (int co = 0; co < c2; ++co) {
          double pool = 0.0;
          int cnt = 0;
          for (int y = lo(gy, s2, g); y < hi(gy, s2, g); ++y) {
            for (int x = lo(gx, s2, g); x < hi(gx, s2, g); ++x) {
              pool += h2[(static_cast<size_t>(co) * s2 + y) * s2 + x];
              ++cnt;
            }
          }
          pool /= cnt;
          acc += pool * ve.get("ve.proj.w").at(
                            static_cast<size_t>(co) * cfg.d_model + dcol);
        }
        REQUIRE(std::abs(acc - got.at(static_cast<size_t>(cell) * cfg.d_model +
                                      dcol)) <= 1e-12);
      }
    }
  }
}

TEST_CASE("lm_forward regression pin: seed-0 params, fixed input") {
  const LMConfig cfg = small_lm();
  ParamSet lm = init_lm_params(cfg, 0);
  ParamSet we = init_we_params(cfg, 0);
  Rng rng(0);
  Tensor x = randn({4, cfg.d_model}, rng);
  Tensor out = lm_forward(nullptr, lm, cfg, we.get("we.pos_emb"), x);
  const size_t last = static_cast<size_t>(3) * cfg.vocab_size;
  if (pin_mode()) {
    std::printf("PIN lm_forward: {%.17g, %.17g, %.17g, %.17g}\n",
                out.at(last), out.at(last + 1), out.at(last + 2),
                out.at(last + 3));
    return;
  }
  const double want[4] = {0.024424149865685273, -0.10100644919448429,
                          0.043862457145905275, -0.011305401416291189};
  for (int i = 0; i < 4; ++i) {
    CHECK(out.at(last + i) == doctest::Approx(want[i]).epsilon(1e-12));
  }
}
