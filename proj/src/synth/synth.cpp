#include "promptlab/synth/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "promptlab/core/error.hpp"
#include "promptlab/core/rng.hpp"

namespace promptlab::synth {

using core::derive_seed;
using core::Rng;

namespace {

const std::array<std::string, kNumShapes> kShapeNames = {
    "circle", "square", "triangle", "cross", "ring", "bar"};

const std::array<std::string, kNumColors> kColorNames = {
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "white"};

const std::array<std::array<double, 3>, kNumColors> kPalette = {{
    {0.90, 0.10, 0.10},  // red
    {0.10, 0.80, 0.15},  // green
    {0.15, 0.20, 0.90},  // blue
    {0.95, 0.85, 0.10},  // yellow
    {0.60, 0.15, 0.80},  // purple
    {0.95, 0.55, 0.10},  // orange
    {0.10, 0.80, 0.85},  // cyan
    {0.95, 0.95, 0.95},  // white
}};

// Seed-stream tags.
constexpr uint64_t kTagScene = 0x5ce6e;
constexpr uint64_t kTagNoise = 0x6015e;
constexpr uint64_t kTagV2 = 0xf2f2;
constexpr uint64_t kTagShift = 0x54f1;
constexpr uint64_t kTagSplit = 0x5b117;
constexpr uint64_t kTagSupport = 0x5a9907;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = (h - std::floor(h)) * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Scene {
  double cx, cy, radius, rot;
  std::array<double, 3> bg;
};

Scene draw_scene(const ClassSpec& cls, uint64_t seed,
                 const JitterProfile& profile) {
  Rng rng(derive_seed(seed, {kTagScene, static_cast<uint64_t>(cls.id),
                             profile.salt}));
  Scene sc;
  sc.cx = rng.uniform(profile.pos_lo, profile.pos_hi);
  sc.cy = rng.uniform(profile.pos_lo, profile.pos_hi);
  sc.radius = rng.uniform(profile.size_lo, profile.size_hi);
  sc.rot = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double bg_h = rng.uniform();
  const double bg_s = rng.uniform(profile.bg_sat_lo, profile.bg_sat_hi);
  const double bg_v = rng.uniform(profile.bg_val_lo, profile.bg_val_hi);
  sc.bg = hsv_to_rgb(bg_h, bg_s, bg_v);
  return sc;
}

// Signed distance to the shape boundary in canvas units, negative inside.
// Approximate outside polygon corners, which is fine for rasterization.
double shape_sdf(ShapeKind shape, double px, double py, double rot,
                 double r) {
  const double c = std::cos(-rot), s = std::sin(-rot);
  const double qx = px * c - py * s;
  const double qy = px * s + py * c;
  switch (shape) {
    case ShapeKind::Circle:
      return std::hypot(px, py) - r;
    case ShapeKind::Square:
      return std::max(std::abs(qx), std::abs(qy)) - 0.82 * r;
    case ShapeKind::Triangle: {
      double d = -1e9;
      for (int i = 0; i < 3; ++i) {
        const double ang =
            rot + std::numbers::pi / 2.0 + i * 2.0 * std::numbers::pi / 3.0;
        // Edge opposite the vertex at `ang`: outward normal -(cos,sin),
        // at distance r/2 from the center (equilateral, circumradius r).
        const double nx = -std::cos(ang), ny = -std::sin(ang);
        d = std::max(d, px * nx + py * ny - 0.5 * r);
      }
      return d;
    }
    case ShapeKind::Cross: {
      const double bar1 =
          std::max(std::abs(qx) - r, std::abs(qy) - 0.30 * r);
      const double bar2 =
          std::max(std::abs(qy) - r, std::abs(qx) - 0.30 * r);
      return std::min(bar1, bar2);
    }
    case ShapeKind::Ring:
      return std::abs(std::hypot(px, py) - 0.78 * r) - 0.22 * r;
    case ShapeKind::Bar:
      return std::max(std::abs(qx) - r, std::abs(qy) - 0.30 * r);
  }
  return 1e9;
}

void check_scale(int scale) {
  if (std::find(kScales.begin(), kScales.end(), scale) == kScales.end()) {
    throw ValueError("unsupported scale " + std::to_string(scale) +
                     " (supported: 16, 24, 32)");
  }
}

int profile_id_of(const JitterProfile& profile) {
  return profile.salt == v2_profile().salt ? 1 : 0;
}

}  // namespace

const std::vector<ClassSpec>& class_table() {
  static const std::vector<ClassSpec> table = [] {
    std::vector<ClassSpec> t;
    t.reserve(kNumClasses);
    for (int s = 0; s < kNumShapes; ++s) {
      for (int c = 0; c < kNumColors; ++c) {
        ClassSpec spec;
        spec.id = s * kNumColors + c;
        spec.shape = static_cast<ShapeKind>(s);
        spec.color = c;
        spec.name = kColorNames[c] + "_" + kShapeNames[s];
        t.push_back(std::move(spec));
      }
    }
    return t;
  }();
  return table;
}

const ClassSpec& class_by_id(int id) {
  const auto& table = class_table();
  if (id < 0 || id >= static_cast<int>(table.size())) {
    throw IndexError("class id " + std::to_string(id) + " outside [0,48)");
  }
  return table[id];
}

const std::array<double, 3>& palette_color(int color) {
  if (color < 0 || color >= kNumColors) {
    throw IndexError("color index " + std::to_string(color));
  }
  return kPalette[color];
}

std::string shift_name(const ShiftSpec& spec) {
  switch (spec.kind) {
    case ShiftKind::InDist: return "indist";
    case ShiftKind::V2Resample: return "v2";
    case ShiftKind::Rendition: return "rendition";
    case ShiftKind::Sketch: return "sketch";
    case ShiftKind::AdvFiltered: return "adv";
    case ShiftKind::Corruption: {
      std::string kind;
      switch (spec.corruption) {
        case CorruptionKind::GaussNoise: kind = "gauss_noise"; break;
        case CorruptionKind::Blur: kind = "blur"; break;
        case CorruptionKind::Pixelate: kind = "pixelate"; break;
      }
      return "corruption_" + kind + "_" + std::to_string(spec.severity);
    }
  }
  return "unknown";
}

ShiftSpec shift_from_name(const std::string& name) {
  ShiftSpec spec;
  if (name == "indist") return spec;
  if (name == "v2") { spec.kind = ShiftKind::V2Resample; return spec; }
  if (name == "rendition") { spec.kind = ShiftKind::Rendition; return spec; }
  if (name == "sketch") { spec.kind = ShiftKind::Sketch; return spec; }
  if (name == "adv") { spec.kind = ShiftKind::AdvFiltered; return spec; }
  if (name.rfind("corruption_", 0) == 0) {
    spec.kind = ShiftKind::Corruption;
    const std::string rest = name.substr(11);
    const size_t us = rest.rfind('_');
    if (us != std::string::npos) {
      const std::string kind = rest.substr(0, us);
      if (kind == "gauss_noise") spec.corruption = CorruptionKind::GaussNoise;
      else if (kind == "blur") spec.corruption = CorruptionKind::Blur;
      else if (kind == "pixelate") spec.corruption = CorruptionKind::Pixelate;
      else throw ValueError("unknown corruption kind in " + name);
      spec.severity = std::stoi(rest.substr(us + 1));
      if (spec.severity < 1 || spec.severity > 5) {
        throw ValueError("corruption severity must be in 1..5: " + name);
      }
      return spec;
    }
  }
  throw ValueError("unknown shift name: " + name);
}

const JitterProfile& default_profile() {
  static const JitterProfile p{};
  return p;
}

const JitterProfile& v2_profile() {
  static const JitterProfile p = [] {
    JitterProfile q;
    q.pos_lo = 0.28;
    q.pos_hi = 0.72;
    q.size_lo = 0.16;
    q.size_hi = 0.37;
    q.bg_val_hi = 0.50;
    q.noise_std = 0.03;
    q.salt = 0xb2;
    return q;
  }();
  return p;
}

const JitterProfile& profile_by_id(int id) {
  if (id == 0) return default_profile();
  if (id == 1) return v2_profile();
  throw IndexError("unknown jitter profile id " + std::to_string(id));
}

ImageSample render(const ClassSpec& cls, int scale, uint64_t seed,
                   const JitterProfile& profile) {
  check_scale(scale);
  const Scene sc = draw_scene(cls, seed, profile);
  const auto& color = kPalette[cls.color];
  Rng noise(derive_seed(seed, {kTagNoise, static_cast<uint64_t>(cls.id),
                               profile.salt, static_cast<uint64_t>(scale)}));
  ImageSample img;
  img.h = img.w = img.scale = scale;
  img.label = cls.id;
  img.seed = seed;
  img.profile_id = profile_id_of(profile);
  img.pixels.resize(static_cast<size_t>(scale) * scale * 3);
  size_t idx = 0;
  for (int y = 0; y < scale; ++y) {
    for (int x = 0; x < scale; ++x) {
      const double u = (x + 0.5) / scale;
      const double v = (y + 0.5) / scale;
      const double d = shape_sdf(cls.shape, u - sc.cx, v - sc.cy, sc.rot,
                                 sc.radius);
      const double alpha = std::clamp(0.5 - d * scale, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        const double base = sc.bg[c] * (1.0 - alpha) + color[c] * alpha;
        img.pixels[idx++] =
            clamp01(base + noise.normal() * profile.noise_std);
      }
    }
  }
  return img;
}

namespace {

// Outline + texture re-rendering of the same scene (rendition-style analog).
ImageSample render_rendition(const ClassSpec& cls, int scale,
                             uint64_t scene_seed, const JitterProfile& profile,
                             uint64_t shift_seed) {
  const Scene sc = draw_scene(cls, scene_seed, profile);
  const auto& color = kPalette[cls.color];
  Rng style(derive_seed(shift_seed, {kTagShift, 0xa47}));
  const double stripe_freq = style.uniform(5.0, 9.0);
  const double stripe_ang = style.uniform(0.0, 2.0 * std::numbers::pi);
  const double stripe_phase = style.uniform(0.0, 1.0);
  const double paper = style.uniform(0.86, 0.96);

  ImageSample img;
  img.h = img.w = img.scale = scale;
  img.label = cls.id;
  img.seed = scene_seed;
  img.profile_id = profile_id_of(profile);
  img.pixels.resize(static_cast<size_t>(scale) * scale * 3);
  const double ca = std::cos(stripe_ang), sa = std::sin(stripe_ang);
  const double stroke = 1.4 / scale;  // outline half-width in canvas units
  size_t idx = 0;
  for (int y = 0; y < scale; ++y) {
    for (int x = 0; x < scale; ++x) {
      const double u = (x + 0.5) / scale;
      const double v = (y + 0.5) / scale;
      const double d = shape_sdf(cls.shape, u - sc.cx, v - sc.cy, sc.rot,
                                 sc.radius);
      std::array<double, 3> px{paper, paper, paper};
      if (std::abs(d) <= stroke) {
        for (int c = 0; c < 3; ++c) px[c] = color[c] * 0.55;
      } else if (d < 0.0) {
        const double wave =
            std::sin((u * ca + v * sa) * stripe_freq * 2.0 * std::numbers::pi +
                     stripe_phase * 2.0 * std::numbers::pi);
        const double mixw = wave > 0.0 ? 0.55 : 0.15;
        for (int c = 0; c < 3; ++c) {
          px[c] = color[c] * mixw + paper * (1.0 - mixw);
        }
      }
      for (int c = 0; c < 3; ++c) img.pixels[idx++] = clamp01(px[c]);
    }
  }
  return img;
}

void box_blur(std::vector<double>& pixels, int h, int w, int radius) {
  std::vector<double> tmp(pixels.size());
  // Horizontal pass, edge-clamped window.
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int x0 = std::max(0, x - radius), x1 = std::min(w - 1, x + radius);
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int xx = x0; xx <= x1; ++xx) {
          s += pixels[(static_cast<size_t>(y) * w + xx) * 3 + c];
        }
        tmp[(static_cast<size_t>(y) * w + x) * 3 + c] = s / (x1 - x0 + 1);
      }
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int y0 = std::max(0, y - radius), y1 = std::min(h - 1, y + radius);
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int yy = y0; yy <= y1; ++yy) {
          s += tmp[(static_cast<size_t>(yy) * w + x) * 3 + c];
        }
        pixels[(static_cast<size_t>(y) * w + x) * 3 + c] = s / (y1 - y0 + 1);
      }
    }
  }
}

void pixelate(std::vector<double>& pixels, int h, int w, int block) {
  for (int by = 0; by < h; by += block) {
    const int y1 = std::min(h, by + block);
    for (int bx = 0; bx < w; bx += block) {
      const int x1 = std::min(w, bx + block);
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int y = by; y < y1; ++y) {
          for (int x = bx; x < x1; ++x) {
            s += pixels[(static_cast<size_t>(y) * w + x) * 3 + c];
          }
        }
        const double avg = s / ((y1 - by) * (x1 - bx));
        for (int y = by; y < y1; ++y) {
          for (int x = bx; x < x1; ++x) {
            pixels[(static_cast<size_t>(y) * w + x) * 3 + c] = avg;
          }
        }
      }
    }
  }
}

void sketchify(std::vector<double>& pixels, int h, int w) {
  std::vector<double> gray(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const size_t p = (static_cast<size_t>(y) * w + x) * 3;
      gray[static_cast<size_t>(y) * w + x] =
          0.299 * pixels[p] + 0.587 * pixels[p + 1] + 0.114 * pixels[p + 2];
    }
  }
  std::vector<double> mag(gray.size(), 0.0);
  double max_mag = 0.0;
  auto g = [&](int y, int x) {
    return gray[static_cast<size_t>(std::clamp(y, 0, h - 1)) * w +
                std::clamp(x, 0, w - 1)];
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (g(y - 1, x + 1) + 2 * g(y, x + 1) + g(y + 1, x + 1)) -
                        (g(y - 1, x - 1) + 2 * g(y, x - 1) + g(y + 1, x - 1));
      const double gy = (g(y + 1, x - 1) + 2 * g(y + 1, x) + g(y + 1, x + 1)) -
                        (g(y - 1, x - 1) + 2 * g(y - 1, x) + g(y - 1, x + 1));
      const double m = std::hypot(gx, gy);
      mag[static_cast<size_t>(y) * w + x] = m;
      max_mag = std::max(max_mag, m);
    }
  }
  const double norm = max_mag > 1e-12 ? 1.0 / max_mag : 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double e = clamp01(mag[static_cast<size_t>(y) * w + x] * norm * 1.8);
      const size_t p = (static_cast<size_t>(y) * w + x) * 3;
      pixels[p] = pixels[p + 1] = pixels[p + 2] = 1.0 - e;
    }
  }
}

}  // namespace

ImageSample apply_shift(const ImageSample& sample, const ShiftSpec& shift,
                        uint64_t shift_seed) {
  if (sample.is_shifted()) {
    throw ProtocolError("apply_shift: sample already carries shift '" +
                        shift_name(sample.shift) + "'");
  }
  switch (shift.kind) {
    case ShiftKind::InDist:
      return sample;
    case ShiftKind::AdvFiltered:
      throw ValueError(
          "apply_shift: adv filtering is a selection, not a transform; use "
          "build_adv_filtered");
    case ShiftKind::Corruption:
      if (shift.severity < 1 || shift.severity > 5) {
        throw ValueError("apply_shift: corruption severity " +
                         std::to_string(shift.severity) + " outside 1..5");
      }
      break;
    default:
      break;
  }

  ImageSample out;
  switch (shift.kind) {
    case ShiftKind::V2Resample: {
      const uint64_t reseed = derive_seed(sample.seed, {kTagV2, shift_seed});
      out = render(class_by_id(sample.label), sample.scale, reseed,
                   v2_profile());
      out.seed = sample.seed;  // provenance keeps the original scene seed
      break;
    }
    case ShiftKind::Rendition:
      out = render_rendition(class_by_id(sample.label), sample.scale,
                             sample.seed, profile_by_id(sample.profile_id),
                             shift_seed);
      break;
    case ShiftKind::Corruption: {
      out = sample;
      const int sev = shift.severity - 1;
      switch (shift.corruption) {
        case CorruptionKind::GaussNoise: {
          Rng rng(derive_seed(shift_seed,
                              {kTagShift, static_cast<uint64_t>(sample.scale)}));
          const double sigma = kGaussSigma[sev];
          for (double& p : out.pixels) {
            p = clamp01(p + rng.normal() * sigma);
          }
          break;
        }
        case CorruptionKind::Blur:
          box_blur(out.pixels, out.h, out.w, kBlurRadius[sev]);
          break;
        case CorruptionKind::Pixelate:
          pixelate(out.pixels, out.h, out.w, kPixelateFactor[sev]);
          break;
      }
      break;
    }
    case ShiftKind::Sketch:
      out = sample;
      sketchify(out.pixels, out.h, out.w);
      break;
    default:
      out = sample;
      break;
  }
  out.label = sample.label;
  out.scale = sample.scale;
  out.h = out.w = sample.scale;
  out.profile_id = sample.profile_id;
  out.shift = shift;
  out.shift_seed = shift_seed;
  return out;
}

ImageSample materialize_at_scale(const ImageSample& sample, int scale) {
  check_scale(scale);
  ImageSample base = render(class_by_id(sample.label), scale, sample.seed,
                            profile_by_id(sample.profile_id));
  if (!sample.is_shifted()) return base;
  if (sample.shift.kind == ShiftKind::AdvFiltered) {
    // The underlying image is in-distribution; only the tag carries over.
    base.shift = sample.shift;
    base.shift_seed = sample.shift_seed;
    return base;
  }
  return apply_shift(base, sample.shift, sample.shift_seed);
}

std::pair<std::vector<int>, std::vector<int>> make_splits(int n_base,
                                                          int n_novel,
                                                          uint64_t seed) {
  if (n_base < 1 || n_base > 32) {
    throw ValueError("make_splits: n_base " + std::to_string(n_base) +
                     " outside [1,32]");
  }
  if (n_novel < 1 || n_base + n_novel > kNumClasses ||
      32 + n_novel > kNumClasses) {
    throw ValueError("make_splits: n_novel " + std::to_string(n_novel) +
                     " does not fit");
  }
  std::vector<int> perm(kNumClasses);
  for (int i = 0; i < kNumClasses; ++i) perm[i] = i;
  Rng rng(derive_seed(seed, {kTagSplit}));
  rng.shuffle(perm);
  std::vector<int> base(perm.begin(), perm.begin() + n_base);
  // The novel block starts at a fixed offset so it is identical for every
  // n_base setting and disjoint from all of them.
  std::vector<int> novel(perm.begin() + 32, perm.begin() + 32 + n_novel);
  for (int b : base) {
    if (std::find(novel.begin(), novel.end(), b) != novel.end()) {
      throw ValueError("make_splits: base/novel overlap on class " +
                       std::to_string(b));
    }
  }
  return {std::move(base), std::move(novel)};
}

SupportSet build_support(const std::vector<int>& base_ids, int per_class,
                         uint64_t seed) {
  if (base_ids.empty() || per_class < 1) {
    throw ValueError("build_support: empty class list or per_class < 1");
  }
  SupportSet set;
  set.base_ids = base_ids;
  set.per_class = per_class;
  for (int cid : base_ids) {
    for (int j = 0; j < per_class; ++j) {
      const uint64_t s = derive_seed(
          seed, {kTagSupport, static_cast<uint64_t>(cid),
                 static_cast<uint64_t>(j)});
      set.entries.push_back({render(class_by_id(cid), kPretrainScale, s), cid});
    }
  }
  return set;
}

AdvFilterResult build_adv_filtered(
    const std::vector<ImageSample>& pool,
    const std::function<int(const ImageSample&)>& probe, size_t requested) {
  if (pool.empty()) throw ValueError("build_adv_filtered: empty pool");
  AdvFilterResult result;
  result.pool_size = pool.size();
  result.requested = requested;
  for (const ImageSample& s : pool) {
    if (s.is_shifted()) {
      throw ProtocolError("build_adv_filtered: pool must be in-distribution");
    }
    if (probe(s) != s.label) {
      ImageSample tagged = s;
      tagged.shift.kind = ShiftKind::AdvFiltered;
      result.samples.push_back(std::move(tagged));
      if (requested > 0 && result.samples.size() == requested) break;
    }
  }
  result.short_of_request =
      requested > 0 && result.samples.size() < requested;
  return result;
}

void export_dataset(const std::string& dir,
                    const std::vector<ImageSample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  char name[32];
  for (size_t i = 0; i < samples.size(); ++i) {
    const ImageSample& s = samples[i];
    std::snprintf(name, sizeof(name), "img_%05zu.syni", i);
    const fs::path path = fs::path(dir) / name;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("export_dataset: cannot open " + path.string());
    const uint32_t version = 1, h = s.h, w = s.w;
    out.write("SYNI", 4);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(s.pixels.data()),
              static_cast<std::streamsize>(s.pixels.size() * sizeof(double)));
    if (!out) throw FormatError("export_dataset: write failed for " + path.string());
    manifest.push_back({{"file", name},
                        {"class_id", s.label},
                        {"class_name", class_by_id(s.label).name},
                        {"shift", shift_name(s.shift)},
                        {"seed", s.seed},
                        {"shift_seed", s.shift_seed},
                        {"scale", s.scale},
                        {"profile_id", s.profile_id}});
  }
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

std::vector<double> load_image_grid(const std::string& path, int* h, int* w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_image_grid: cannot open " + path);
  char magic[4];
  uint32_t version = 0, hh = 0, ww = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hh), 4);
  in.read(reinterpret_cast<char*>(&ww), 4);
  if (!in || std::memcmp(magic, "SYNI", 4) != 0) {
    throw FormatError("load_image_grid: bad magic in " + path);
  }
  if (version != 1) {
    throw FormatError("load_image_grid: unsupported version " +
                      std::to_string(version));
  }
  std::vector<double> pixels(static_cast<size_t>(hh) * ww * 3);
  in.read(reinterpret_cast<char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size() * sizeof(double)));
  if (!in) throw FormatError("load_image_grid: truncated file " + path);
  *h = static_cast<int>(hh);
  *w = static_cast<int>(ww);
  return pixels;
}

}  // namespace promptlab::synth
