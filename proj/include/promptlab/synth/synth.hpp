#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace promptlab::synth {

inline constexpr int kNumShapes = 6;
inline constexpr int kNumColors = 8;
inline constexpr int kNumClasses = kNumShapes * kNumColors;  // 48
inline constexpr std::array<int, 3> kScales{16, 24, 32};
inline constexpr int kPretrainScale = 32;

enum class ShapeKind { Circle, Square, Triangle, Cross, Ring, Bar };

struct ClassSpec {
  int id;
  ShapeKind shape;
  int color;         // index into the palette
  std::string name;  // "<color>_<shape>", one tokenizer token
};

const std::vector<ClassSpec>& class_table();
const ClassSpec& class_by_id(int id);
const std::array<double, 3>& palette_color(int color);

enum class ShiftKind {
  InDist,
  V2Resample,
  Rendition,
  Corruption,
  Sketch,
  AdvFiltered,
};

enum class CorruptionKind { GaussNoise, Blur, Pixelate };

struct ShiftSpec {
  ShiftKind kind = ShiftKind::InDist;
  CorruptionKind corruption = CorruptionKind::GaussNoise;
  int severity = 0;  // 1..5, Corruption only

  bool operator==(const ShiftSpec&) const = default;
};

std::string shift_name(const ShiftSpec& spec);
ShiftSpec shift_from_name(const std::string& name);

// Per-severity corruption constants (index severity-1). Versioned: changing
// any entry requires bumping kSeverityTableVersion.
inline constexpr int kSeverityTableVersion = 1;
inline constexpr std::array<double, 5> kGaussSigma{0.03, 0.06, 0.12, 0.24, 0.48};
inline constexpr std::array<int, 5> kBlurRadius{1, 2, 3, 5, 8};
inline constexpr std::array<int, 5> kPixelateFactor{2, 3, 4, 6, 8};

// Scene randomization ranges. The salt keeps profiles on unrelated seed
// streams even with identical ranges.
struct JitterProfile {
  double pos_lo = 0.32, pos_hi = 0.68;
  double size_lo = 0.18, size_hi = 0.34;
  double bg_sat_lo = 0.08, bg_sat_hi = 0.35;
  double bg_val_lo = 0.12, bg_val_hi = 0.45;
  double noise_std = 0.02;
  uint64_t salt = 0;
};

const JitterProfile& default_profile();
const JitterProfile& v2_profile();
const JitterProfile& profile_by_id(int id);  // 0 = default, 1 = v2

struct ImageSample {
  std::vector<double> pixels;  // h*w*3, row-major (y, x, channel), in [0,1]
  int h = 0, w = 0;
  int label = -1;
  int scale = 0;
  ShiftSpec shift;
  uint64_t seed = 0;        // scene seed; scale-independent
  uint64_t shift_seed = 0;  // 0 unless shifted
  int profile_id = 0;

  double at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * w + x) * 3 + c];
  }
  bool is_shifted() const { return shift.kind != ShiftKind::InDist; }
};

// Draws the class shape at a seeded position/size/rotation over a seeded
// background hue. The scene is a function of (class, seed, profile) only, so
// the same seed re-rendered at another scale shows the same scene.
ImageSample render(const ClassSpec& cls, int scale, uint64_t seed,
                   const JitterProfile& profile = default_profile());

// Applies one distribution shift to an in-distribution sample. Output pixels
// stay clamped to [0,1]. Shifting an already-shifted sample is a protocol
// error; AdvFiltered is a selection, not a transform, and is rejected here.
ImageSample apply_shift(const ImageSample& sample, const ShiftSpec& shift,
                        uint64_t shift_seed);

// Rebuilds the same logical sample (scene + shift provenance) at another
// scale; used by multi-scale prompting.
ImageSample materialize_at_scale(const ImageSample& sample, int scale);

// Base/novel class split. The 8-class base set is a prefix of the 16-class
// set which is a prefix of the 32-class set; the novel block is fixed across
// all n_base settings and disjoint from every base set.
std::pair<std::vector<int>, std::vector<int>> make_splits(int n_base,
                                                          int n_novel,
                                                          uint64_t seed);

struct SupportSet {
  struct Entry {
    ImageSample sample;
    int class_id;
  };
  std::vector<Entry> entries;  // ordered by (class, index)
  std::vector<int> base_ids;
  int per_class = 0;
};

// per_class in-distribution samples per base class at the pretraining scale.
SupportSet build_support(const std::vector<int>& base_ids, int per_class,
                         uint64_t seed);

struct AdvFilterResult {
  std::vector<ImageSample> samples;  // tagged AdvFiltered
  size_t pool_size = 0;
  size_t requested = 0;  // 0 = all
  bool short_of_request = false;
};

// Keeps the pool samples a probe classifier gets wrong, in pool order.
AdvFilterResult build_adv_filtered(
    const std::vector<ImageSample>& pool,
    const std::function<int(const ImageSample&)>& probe, size_t requested = 0);

// Binary image container: 16-byte header (magic "SYNI", u32 version, u32 h,
// u32 w) followed by h*w*3 little-endian f64. A manifest.json in the same
// directory maps file -> class id -> shift -> seed.
void export_dataset(const std::string& dir,
                    const std::vector<ImageSample>& samples);
std::vector<double> load_image_grid(const std::string& path, int* h, int* w);

}  // namespace promptlab::synth
