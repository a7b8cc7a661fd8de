#include "promptlab/eval/eval.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "promptlab/core/error.hpp"
#include "promptlab/core/rng.hpp"
#include "promptlab/eval/svg.hpp"
#include "promptlab/vlm/container.hpp"

namespace promptlab::eval {

using core::derive_seed;
using synth::ShiftSpec;

namespace {

constexpr uint64_t kTagSupportSeed = 0x5a99;
constexpr uint64_t kTagTestScene = 0x7e57;
constexpr uint64_t kTagTestShift = 0x7e58;
constexpr uint64_t kTagStarPool = 0x57a9;
constexpr uint64_t kTagAdvPool = 0xadf0;
constexpr uint64_t kTagIclContext = 0x1c7c;
constexpr uint64_t kTagMethod = 0xa3e7;
constexpr uint64_t kTagEnsembleMember = 0xe5b;
constexpr uint64_t kTagAblateHoldout = 0xab1a;

uint64_t name_hash(const std::string& s) { return vlm::fnv1a(s.data(), s.size()); }

std::string normalize_shift(const std::string& name) {
  if (name == "corruption") return "corruption_gauss_noise_3";
  return name;
}

int shift_order(const std::string& name) {
  if (name == "indist") return 0;
  if (name == "v2") return 1;
  if (name == "rendition") return 2;
  if (name.rfind("corruption", 0) == 0) return 3;
  if (name == "sketch") return 4;
  if (name == "adv") return 5;
  return 6;
}

std::string fmt_double(double v, const char* spec) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace

const std::vector<std::string> kKnownMethods = {
    "zero_shot",   "knn",        "supervised_fs", "supervised_star",
    "icl_random",  "icl_rice",   "prol",          "man_prol",
    "co_prol",     "robust_prol", "rpol_ss_16",   "rpol_ss_24",
    "rpol_ss_32",  "ensemble_ss", "ensemble_ms"};

bool method_is_base_only(const std::string& method) {
  return method == "knn" || method == "supervised_fs" ||
         method == "supervised_star";
}

void ExperimentConfig::validate() const {
  if (schema_version != 1) {
    throw ConfigError("config: unsupported schema_version " +
                      std::to_string(schema_version));
  }
  if (methods.empty()) throw ConfigError("config: no methods listed");
  for (const std::string& m : methods) {
    if (std::find(kKnownMethods.begin(), kKnownMethods.end(), m) ==
        kKnownMethods.end()) {
      throw ConfigError("config: unknown method '" + m + "'");
    }
  }
  if (n_base != 8 && n_base != 16 && n_base != 24 && n_base != 32) {
    throw ConfigError("config: n_base must be one of {8,16,24,32}");
  }
  if (n_novel < 1 || n_base + n_novel > synth::kNumClasses) {
    throw ConfigError("config: bad n_novel");
  }
  if (shifts.empty()) throw ConfigError("config: no shifts listed");
  for (const std::string& s : shifts) {
    try {
      synth::shift_from_name(normalize_shift(s));
    } catch (const ValueError& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  if (seeds.empty()) throw ConfigError("config: no seeds listed");
  train.validate();
  if (n_test_per_class < 1 || support_per_class < 1) {
    throw ConfigError("config: test/support counts must be positive");
  }
  if (ctx_tokens < 1 || query_tokens < 1) {
    throw ConfigError("config: token counts must be positive");
  }
  if (knn_k < 1 || icl_k < 1) throw ConfigError("config: k must be positive");
  if (jobs < 0) throw ConfigError("config: jobs must be >= 0");
  if (checkpoint.empty()) throw ConfigError("config: checkpoint path missing");
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "schema_version") c.schema_version = value.get<int>();
    else if (key == "methods") c.methods = value.get<std::vector<std::string>>();
    else if (key == "method") c.methods = {value.get<std::string>()};
    else if (key == "n_base") c.n_base = value.get<int>();
    else if (key == "n_novel") c.n_novel = value.get<int>();
    else if (key == "shifts") c.shifts = value.get<std::vector<std::string>>();
    else if (key == "seeds") c.seeds = value.get<std::vector<uint64_t>>();
    else if (key == "train") {
      const auto& t = value;
      if (t.contains("epochs")) c.train.epochs = t["epochs"].get<int>();
      if (t.contains("batch_size")) c.train.batch_size = t["batch_size"].get<int>();
      if (t.contains("lr")) c.train.lr = t["lr"].get<double>();
    } else if (key == "checkpoint") c.checkpoint = value.get<std::string>();
    else if (key == "out_dir") c.out_dir = value.get<std::string>();
    else if (key == "n_test_per_class") c.n_test_per_class = value.get<int>();
    else if (key == "support_per_class") c.support_per_class = value.get<int>();
    else if (key == "split_seed") c.split_seed = value.get<uint64_t>();
    else if (key == "eval_seed") c.eval_seed = value.get<uint64_t>();
    else if (key == "ctx_tokens") c.ctx_tokens = value.get<int>();
    else if (key == "query_tokens") c.query_tokens = value.get<int>();
    else if (key == "knn_k") c.knn_k = value.get<int>();
    else if (key == "icl_k") c.icl_k = value.get<int>();
    else if (key == "jobs") c.jobs = value.get<int>();
    else if (key == "record_timings") c.record_timings = value.get<bool>();
    else if (key == "export_datasets") c.export_datasets = value.get<bool>();
    else if (key == "supervised_star_per_class")
      c.supervised_star_per_class = value.get<int>();
    else if (key == "adv_pool_per_class")
      c.adv_pool_per_class = value.get<int>();
    else throw ConfigError("config: unknown field '" + key + "'");
  }
  for (std::string& s : c.shifts) s = normalize_shift(s);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json ExperimentConfig::to_json() const {
  return nlohmann::json{{"schema_version", schema_version},
                        {"methods", methods},
                        {"n_base", n_base},
                        {"n_novel", n_novel},
                        {"shifts", shifts},
                        {"seeds", seeds},
                        {"train",
                         {{"epochs", train.epochs},
                          {"batch_size", train.batch_size},
                          {"lr", train.lr}}},
                        {"checkpoint", checkpoint},
                        {"out_dir", out_dir},
                        {"n_test_per_class", n_test_per_class},
                        {"support_per_class", support_per_class},
                        {"split_seed", split_seed},
                        {"eval_seed", eval_seed},
                        {"ctx_tokens", ctx_tokens},
                        {"query_tokens", query_tokens},
                        {"knn_k", knn_k},
                        {"icl_k", icl_k},
                        {"jobs", jobs},
                        {"record_timings", record_timings},
                        {"export_datasets", export_datasets},
                        {"supervised_star_per_class", supervised_star_per_class},
                        {"adv_pool_per_class", adv_pool_per_class}};
}

namespace {

struct TestItem {
  synth::ImageSample img;                // at the pretraining scale
  adapt::MultiScaleImage views;          // filled when multi-scale is needed
  std::vector<double> feat;              // mean-pooled VE feature
};

bool needs_multiscale(const std::vector<std::string>& methods) {
  for (const std::string& m : methods) {
    if (m == "robust_prol" || m == "ensemble_ms" || m.rfind("rpol_ss", 0) == 0) {
      return true;
    }
  }
  return false;
}

std::vector<synth::ImageSample> star_pool(const std::vector<int>& class_ids,
                                          int per_class, uint64_t eval_seed) {
  std::vector<synth::ImageSample> pool;
  pool.reserve(class_ids.size() * per_class);
  for (int cid : class_ids) {
    for (int j = 0; j < per_class; ++j) {
      const uint64_t s =
          derive_seed(eval_seed, {kTagStarPool, static_cast<uint64_t>(cid),
                                  static_cast<uint64_t>(j)});
      pool.push_back(
          synth::render(synth::class_by_id(cid), synth::kPretrainScale, s));
    }
  }
  return pool;
}

struct MethodState {
  adapt::PromptParams prompt;
  adapt::EnsembleSpec ensemble;
  adapt::LinearProbe probe;
  std::vector<vlm::PromptSegment> random_context;
  bool uses_prompt = false;
  bool uses_ensemble = false;
  bool uses_probe = false;
};

}  // namespace

std::vector<ResultRecord> run(const ExperimentConfig& raw_config) {
  ExperimentConfig config = raw_config;
  for (std::string& s : config.shifts) s = normalize_shift(s);
  config.validate();
  if (config.jobs > 0) omp_set_num_threads(config.jobs);

  vlm::VLModel model = vlm::load_checkpoint(config.checkpoint);
  if (!model.frozen) {
    throw ProtocolError("run: checkpoint " + config.checkpoint +
                        " is not frozen");
  }
  const uint64_t digest_before = model.digest();

  auto [base_ids, novel_ids] =
      synth::make_splits(config.n_base, config.n_novel, config.split_seed);
  std::sort(base_ids.begin(), base_ids.end());
  std::sort(novel_ids.begin(), novel_ids.end());

  const bool multiscale = needs_multiscale(config.methods);
  const std::array<int, 3> all_scales{16, 24, 32};

  // Supervised* probes and the adversarial filters are functions of the
  // class lists and the eval seed only; share them across record seeds.
  std::map<std::string, adapt::LinearProbe> star_probes;
  auto star_probe_for = [&](const std::vector<int>& ids,
                            const std::string& tag) -> adapt::LinearProbe& {
    auto it = star_probes.find(tag);
    if (it == star_probes.end()) {
      const auto pool =
          star_pool(ids, config.supervised_star_per_class, config.eval_seed);
      it = star_probes
               .emplace(tag, adapt::linear_probe_train(model, pool, ids))
               .first;
    }
    return it->second;
  };

  // Test sets per (shift, regime), shared across record seeds so base/novel
  // and method comparisons are paired.
  auto build_test_items = [&](const ShiftSpec& shift,
                              const std::vector<int>& class_ids,
                              const std::string& regime_tag) {
    std::vector<synth::ImageSample> images;
    if (shift.kind == synth::ShiftKind::AdvFiltered) {
      std::vector<synth::ImageSample> pool;
      for (int cid : class_ids) {
        for (int j = 0; j < config.adv_pool_per_class; ++j) {
          const uint64_t s = derive_seed(
              config.eval_seed, {kTagAdvPool, static_cast<uint64_t>(cid),
                                 static_cast<uint64_t>(j)});
          pool.push_back(
              synth::render(synth::class_by_id(cid), synth::kPretrainScale, s));
        }
      }
      const adapt::LinearProbe& probe = star_probe_for(class_ids, regime_tag);
      const auto filtered = synth::build_adv_filtered(
          pool, [&](const synth::ImageSample& img) {
            return probe.predict(adapt::ve_feature(model, img));
          });
      std::map<int, int> per_class;
      for (const auto& s : filtered.samples) {
        if (per_class[s.label] >= config.n_test_per_class) continue;
        per_class[s.label] += 1;
        images.push_back(s);
      }
    } else {
      const uint64_t shift_tag = name_hash(synth::shift_name(shift));
      for (int cid : class_ids) {
        for (int j = 0; j < config.n_test_per_class; ++j) {
          const uint64_t scene = derive_seed(
              config.eval_seed, {kTagTestScene, static_cast<uint64_t>(cid),
                                 static_cast<uint64_t>(j)});
          synth::ImageSample img = synth::render(
              synth::class_by_id(cid), synth::kPretrainScale, scene);
          if (shift.kind != synth::ShiftKind::InDist) {
            const uint64_t sseed = derive_seed(
                config.eval_seed,
                {kTagTestShift, shift_tag, static_cast<uint64_t>(cid),
                 static_cast<uint64_t>(j)});
            img = synth::apply_shift(img, shift, sseed);
          }
          images.push_back(std::move(img));
        }
      }
    }
    std::vector<TestItem> items(images.size());
#pragma omp parallel for schedule(dynamic)
    for (size_t i = 0; i < images.size(); ++i) {
      items[i].img = std::move(images[i]);
      items[i].feat = adapt::ve_feature(model, items[i].img);
      if (multiscale) {
        items[i].views =
            adapt::MultiScaleImage::materialize(items[i].img, all_scales);
      } else {
        items[i].views = adapt::MultiScaleImage::single(items[i].img);
      }
    }
    return items;
  };

  std::map<std::string, std::vector<TestItem>> test_cache;
  auto test_items_for = [&](const std::string& shift_name,
                            const std::string& regime)
      -> const std::vector<TestItem>& {
    const std::string key = shift_name + "/" + regime;
    auto it = test_cache.find(key);
    if (it == test_cache.end()) {
      const ShiftSpec shift = synth::shift_from_name(shift_name);
      const auto& ids = regime == "base" ? base_ids : novel_ids;
      it = test_cache.emplace(key, build_test_items(shift, ids, regime)).first;
    }
    return it->second;
  };

  std::vector<ResultRecord> records;
  for (const uint64_t seed : config.seeds) {
    const synth::SupportSet support = synth::build_support(
        base_ids, config.support_per_class,
        derive_seed(seed, {kTagSupportSeed}));
    const auto support_feats = adapt::compute_support_features(model, support);

    // Per-method adaptation state, built once per record seed.
    std::map<std::string, MethodState> states;
    for (const std::string& method : config.methods) {
      MethodState state;
      adapt::TrainConfig tc = config.train;
      tc.seed = derive_seed(seed, {kTagMethod, name_hash(method)});
      if (method == "prol") {
        state.prompt = adapt::prol_train(model, support, config.ctx_tokens,
                                         config.query_tokens, tc);
        state.uses_prompt = true;
      } else if (method == "man_prol") {
        state.prompt =
            adapt::man_prol_train(model, support, config.ctx_tokens, tc);
        state.uses_prompt = true;
      } else if (method == "co_prol") {
        state.prompt = adapt::co_prol_train(model, support, config.ctx_tokens,
                                            config.query_tokens, tc);
        state.uses_prompt = true;
      } else if (method == "robust_prol") {
        state.prompt =
            adapt::robust_prol_train(model, support, {16, 24, 32},
                                     config.ctx_tokens, config.query_tokens, tc);
        state.uses_prompt = true;
      } else if (method.rfind("rpol_ss_", 0) == 0) {
        const int sc = std::stoi(method.substr(8));
        state.prompt = adapt::rpol_ss_train(model, support, sc,
                                            config.ctx_tokens,
                                            config.query_tokens, tc);
        state.uses_prompt = true;
      } else if (method == "ensemble_ss" || method == "ensemble_ms") {
        const bool ms = method == "ensemble_ms";
        state.ensemble.mode = ms ? adapt::EnsembleSpec::Mode::MS
                                 : adapt::EnsembleSpec::Mode::SS;
        for (int k = 0; k < 3; ++k) {
          adapt::TrainConfig mc = tc;
          mc.seed = derive_seed(tc.seed, {kTagEnsembleMember,
                                          static_cast<uint64_t>(k)});
          const int sc = ms ? all_scales[k] : synth::kPretrainScale;
          state.ensemble.members.push_back(
              adapt::prol_train(model, support, config.ctx_tokens,
                                config.query_tokens, mc, sc));
        }
        state.uses_ensemble = true;
      } else if (method == "supervised_fs") {
        std::vector<synth::ImageSample> samples;
        for (const auto& e : support.entries) samples.push_back(e.sample);
        state.probe = adapt::linear_probe_train(model, samples, base_ids);
        state.uses_probe = true;
      } else if (method == "supervised_star") {
        state.probe = star_probe_for(base_ids, "base");
        state.uses_probe = true;
      } else if (method == "icl_random") {
        state.random_context = adapt::icl_random(
            model, support, config.icl_k,
            derive_seed(seed, {kTagIclContext}));
      }
      states.emplace(method, std::move(state));
    }

    for (const std::string& shift : config.shifts) {
      for (const std::string& regime : {std::string("base"),
                                        std::string("novel")}) {
        const auto& label_ids = regime == "base" ? base_ids : novel_ids;
        const auto& items = test_items_for(shift, regime);
        for (const std::string& method : config.methods) {
          if (regime == "novel" && method_is_base_only(method)) continue;
          const MethodState& state = states.at(method);
          const auto t0 = std::chrono::steady_clock::now();
          std::vector<char> correct(items.size(), 0);
#pragma omp parallel for schedule(dynamic)
          for (size_t i = 0; i < items.size(); ++i) {
            const TestItem& item = items[i];
            int pred = -1;
            if (method == "zero_shot") {
              pred = adapt::zero_shot_classify(model, item.img, label_ids);
            } else if (method == "knn") {
              pred = adapt::knn_classify_with(support, support_feats,
                                              item.feat, config.knn_k);
            } else if (method == "supervised_fs" ||
                       method == "supervised_star") {
              pred = state.probe.predict(item.feat);
            } else if (method == "icl_random") {
              pred = adapt::icl_classify(model, state.random_context, item.img,
                                         label_ids);
            } else if (method == "icl_rice") {
              const auto context = adapt::icl_rice_with(
                  model, support, support_feats, item.feat, config.icl_k);
              pred = adapt::icl_classify(model, context, item.img, label_ids);
            } else if (state.uses_ensemble) {
              pred = adapt::ensemble_classify(model, state.ensemble,
                                              item.views, label_ids);
            } else if (state.prompt.variant == adapt::PromptVariant::Robust ||
                       state.prompt.variant == adapt::PromptVariant::RobustSS) {
              pred = adapt::robust_prol_classify(model, state.prompt,
                                                 item.views, label_ids);
            } else {
              pred = adapt::prol_classify(model, state.prompt, item.img,
                                          label_ids);
            }
            correct[i] = pred == item.img.label ? 1 : 0;
          }
          ResultRecord rec;
          rec.method = method;
          rec.shift = shift;
          rec.regime = regime;
          rec.n_classes = config.n_base;
          rec.seed = seed;
          rec.n_test = static_cast<int>(items.size());
          for (char c : correct) rec.correct += c;
          rec.wall_ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
          records.push_back(std::move(rec));
        }
      }
    }
  }

  if (model.digest() != digest_before) {
    throw ProtocolError("run: the frozen model digest changed");
  }

  std::sort(records.begin(), records.end(),
            [](const ResultRecord& a, const ResultRecord& b) {
              return std::tie(a.method, a.shift, a.regime, a.n_classes,
                              a.seed) < std::tie(b.method, b.shift, b.regime,
                                                 b.n_classes, b.seed);
            });

  if (!config.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(config.out_dir);
    write_text_file((fs::path(config.out_dir) / "results.csv").string(),
                    records_to_csv(records, config.record_timings));
    write_text_file(
        (fs::path(config.out_dir) / "results.json").string(),
        records_to_json(records, config.record_timings).dump(2) + "\n");
    if (config.export_datasets) {
      for (const auto& [key, items] : test_cache) {
        std::string dir_name = key;
        std::replace(dir_name.begin(), dir_name.end(), '/', '_');
        std::vector<synth::ImageSample> samples;
        for (const TestItem& item : items) samples.push_back(item.img);
        synth::export_dataset(
            (fs::path(config.out_dir) / "datasets" / dir_name).string(),
            samples);
      }
    }
  }
  return records;
}

std::string records_to_csv(const std::vector<ResultRecord>& records,
                           bool with_timings) {
  std::string csv = "method,shift,regime,n_classes,seed,accuracy,n_test,wall_ms\n";
  for (const ResultRecord& r : records) {
    csv += r.method + "," + r.shift + "," + r.regime + "," +
           std::to_string(r.n_classes) + "," + std::to_string(r.seed) + "," +
           fmt_double(r.accuracy(), "%.6f") + "," + std::to_string(r.n_test) +
           "," + (with_timings ? fmt_double(r.wall_ms, "%.3f") : "0") + "\n";
  }
  return csv;
}

nlohmann::json records_to_json(const std::vector<ResultRecord>& records,
                               bool with_timings) {
  nlohmann::json arr = nlohmann::json::array();
  for (const ResultRecord& r : records) {
    arr.push_back({{"method", r.method},
                   {"shift", r.shift},
                   {"regime", r.regime},
                   {"n_classes", r.n_classes},
                   {"seed", r.seed},
                   {"accuracy", r.accuracy()},
                   {"correct", r.correct},
                   {"n_test", r.n_test},
                   {"wall_ms", with_timings ? r.wall_ms : 0.0}});
  }
  return arr;
}

std::vector<ResultRecord> records_from_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("records_from_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) {
    throw FormatError("records_from_csv: empty file " + path);
  }
  std::vector<ResultRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 8) {
      throw FormatError("records_from_csv: bad row '" + line + "'");
    }
    ResultRecord r;
    r.method = fields[0];
    r.shift = fields[1];
    r.regime = fields[2];
    r.n_classes = std::stoi(fields[3]);
    r.seed = std::stoull(fields[4]);
    const double acc = std::stod(fields[5]);
    r.n_test = std::stoi(fields[6]);
    r.correct = static_cast<int>(std::lround(acc * r.n_test));
    r.wall_ms = std::stod(fields[7]);
    records.push_back(std::move(r));
  }
  return records;
}

Layout layout_from_name(const std::string& name) {
  if (name == "base_table") return Layout::BaseTable;
  if (name == "novel_table") return Layout::NovelTable;
  if (name == "ensemble_table") return Layout::EnsembleTable;
  if (name == "ss_table") return Layout::SSTable;
  if (name == "sota_table") return Layout::SotaTable;
  throw ValueError("unknown table layout: " + name);
}

namespace {

struct CellKey {
  std::string shift;
  std::string regime;
  int n_classes;

  bool operator<(const CellKey& o) const {
    return std::tie(shift, regime, n_classes) <
           std::tie(o.shift, o.regime, o.n_classes);
  }
};

std::vector<std::string> layout_rows(Layout layout) {
  switch (layout) {
    case Layout::BaseTable:
      return {"supervised_star", "supervised_fs", "knn",        "icl_random",
              "icl_rice",        "prol",          "robust_prol"};
    case Layout::NovelTable:
      return {"zero_shot", "icl_random", "icl_rice", "prol", "robust_prol"};
    case Layout::EnsembleTable:
      return {"prol", "ensemble_ss", "ensemble_ms", "robust_prol"};
    case Layout::SSTable:
      return {"prol", "robust_prol", "rpol_ss_32", "rpol_ss_24", "rpol_ss_16"};
    case Layout::SotaTable:
      return {"man_prol", "co_prol", "robust_prol"};
  }
  return {};
}

}  // namespace

TableResult tabulate(const std::vector<ResultRecord>& records, Layout layout) {
  TableResult result;
  const std::vector<std::string> wanted_rows = layout_rows(layout);

  const bool both_regimes = layout == Layout::NovelTable;
  const std::string fixed_regime =
      (layout == Layout::SotaTable || layout == Layout::NovelTable) ? "novel"
                                                                    : "base";

  // Aggregate means per (method, cell).
  struct Agg {
    double sum = 0.0;
    int count = 0;
  };
  std::map<std::pair<std::string, CellKey>, Agg> cells;
  std::set<CellKey> col_set;
  std::set<std::string> methods_present;
  for (const ResultRecord& r : records) {
    if (std::find(wanted_rows.begin(), wanted_rows.end(), r.method) ==
        wanted_rows.end()) {
      continue;
    }
    if (!both_regimes && r.regime != fixed_regime) continue;
    CellKey key{r.shift, both_regimes ? r.regime : fixed_regime, r.n_classes};
    cells[{r.method, key}].sum += r.accuracy();
    cells[{r.method, key}].count += 1;
    col_set.insert(key);
    methods_present.insert(r.method);
  }

  std::vector<CellKey> columns(col_set.begin(), col_set.end());
  std::sort(columns.begin(), columns.end(),
            [](const CellKey& a, const CellKey& b) {
              const int oa = shift_order(a.shift), ob = shift_order(b.shift);
              return std::tie(oa, a.shift, a.n_classes, a.regime) <
                     std::tie(ob, b.shift, b.n_classes, b.regime);
            });

  std::vector<std::string> rows;
  for (const std::string& m : wanted_rows) {
    if (methods_present.count(m)) rows.push_back(m);
  }
  if (rows.empty() || columns.empty()) {
    result.markdown = "(no matching records)\n";
    result.warnings.push_back("no records matched the layout");
    return result;
  }

  // Values in percent; NaN marks a missing cell.
  std::vector<std::vector<double>> value(
      rows.size(), std::vector<double>(columns.size(),
                                       std::numeric_limits<double>::quiet_NaN()));
  for (size_t ri = 0; ri < rows.size(); ++ri) {
    for (size_t ci = 0; ci < columns.size(); ++ci) {
      auto it = cells.find({rows[ri], columns[ci]});
      if (it == cells.end()) {
        result.warnings.push_back(
            "missing cell: method=" + rows[ri] + " shift=" +
            columns[ci].shift + " regime=" + columns[ci].regime +
            " n_classes=" + std::to_string(columns[ci].n_classes));
        continue;
      }
      value[ri][ci] = 100.0 * it->second.sum / it->second.count;
    }
  }

  // Best / second-best markers per column.
  std::vector<std::vector<int>> marker(
      rows.size(), std::vector<int>(columns.size(), 0));
  for (size_t ci = 0; ci < columns.size(); ++ci) {
    double best = -1.0, second = -1.0;
    for (size_t ri = 0; ri < rows.size(); ++ri) {
      const double v = value[ri][ci];
      if (std::isnan(v)) continue;
      if (v > best) {
        second = best;
        best = v;
      } else if (v > second) {
        second = v;
      }
    }
    for (size_t ri = 0; ri < rows.size(); ++ri) {
      const double v = value[ri][ci];
      if (std::isnan(v)) continue;
      if (v == best) marker[ri][ci] = 1;
      else if (second >= 0.0 && v == second) marker[ri][ci] = 2;
    }
  }

  auto col_name = [&](const CellKey& k) {
    std::string name = k.shift;
    if (both_regimes) name += "/" + k.regime;
    name += "@" + std::to_string(k.n_classes);
    return name;
  };

  std::string md = "| method |";
  std::string sep = "|---|";
  for (const CellKey& c : columns) {
    md += " " + col_name(c) + " |";
    sep += "---|";
  }
  md += "\n" + sep + "\n";
  std::string csv = "method";
  for (const CellKey& c : columns) csv += "," + col_name(c);
  csv += "\n";
  for (size_t ri = 0; ri < rows.size(); ++ri) {
    md += "| " + rows[ri] + " |";
    csv += rows[ri];
    for (size_t ci = 0; ci < columns.size(); ++ci) {
      const double v = value[ri][ci];
      if (std::isnan(v)) {
        md += " — |";
        csv += ",";
        continue;
      }
      const std::string num = fmt_double(v, "%.2f");
      if (marker[ri][ci] == 1) md += " **" + num + "** |";
      else if (marker[ri][ci] == 2) md += " _" + num + "_ |";
      else md += " " + num + " |";
      csv += "," + num;
    }
    md += "\n";
    csv += "\n";
  }
  md += "\nBold = best per column, italic = second best.\n";
  result.markdown = md;
  result.csv = csv;
  return result;
}

std::string plot_accuracy_vs_nclasses(const std::vector<ResultRecord>& records,
                                      const std::string& shift,
                                      const std::string& regime) {
  if (records.empty()) throw ValueError("plot: no records");
  std::map<std::string, std::map<int, std::pair<double, int>>> agg;
  for (const ResultRecord& r : records) {
    if (r.shift != shift || r.regime != regime) continue;
    auto& cell = agg[r.method][r.n_classes];
    cell.first += r.accuracy();
    cell.second += 1;
  }
  if (agg.empty()) {
    throw ValueError("plot: no records for shift=" + shift + " regime=" +
                     regime);
  }
  std::vector<Series> series;
  // Fixed method order keeps colors stable across plots.
  for (const std::string& m : kKnownMethods) {
    auto it = agg.find(m);
    if (it == agg.end()) continue;
    Series s;
    s.name = m;
    for (const auto& [n_classes, cell] : it->second) {
      s.points.emplace_back(n_classes, 100.0 * cell.first / cell.second);
    }
    series.push_back(std::move(s));
  }
  return render_line_chart("accuracy vs classes (" + shift + ", " + regime +
                               ")",
                           "number of classes", "accuracy [%]", series);
}

std::string plot_loss_curves(const std::vector<LossCurve>& curves) {
  if (curves.empty()) throw ValueError("plot_loss_curves: no curves");
  std::vector<Series> series;
  for (const LossCurve& c : curves) {
    Series train;
    train.name = c.label + " train";
    for (size_t e = 0; e < c.train.size(); ++e) {
      train.points.emplace_back(static_cast<double>(e + 1), c.train[e]);
    }
    series.push_back(std::move(train));
    if (!c.holdout.empty()) {
      Series hold;
      hold.name = c.label + " test";
      for (size_t e = 0; e < c.holdout.size(); ++e) {
        hold.points.emplace_back(static_cast<double>(e + 1), c.holdout[e]);
      }
      series.push_back(std::move(hold));
    }
  }
  return render_line_chart("prompt-learning loss", "epoch", "loss", series);
}

nlohmann::json curves_to_json(const std::vector<LossCurve>& curves) {
  nlohmann::json arr = nlohmann::json::array();
  for (const LossCurve& c : curves) {
    arr.push_back(
        {{"label", c.label}, {"train", c.train}, {"holdout", c.holdout}});
  }
  return arr;
}

std::vector<LossCurve> curves_from_json(const nlohmann::json& j) {
  std::vector<LossCurve> curves;
  for (const auto& item : j) {
    LossCurve c;
    c.label = item.at("label").get<std::string>();
    c.train = item.at("train").get<std::vector<double>>();
    if (item.contains("holdout")) {
      c.holdout = item.at("holdout").get<std::vector<double>>();
    }
    curves.push_back(std::move(c));
  }
  return curves;
}

std::vector<LossCurve> ablate_tokens(const ExperimentConfig& raw_config,
                                     const std::vector<int>& token_counts) {
  ExperimentConfig config = raw_config;
  config.validate();
  if (token_counts.empty()) throw ValueError("ablate: no token counts");
  for (int c : token_counts) {
    if (c < 2 || c % 2 != 0) {
      throw ValueError(
          "ablate: context token counts must be positive and even (the "
          "robust variant splits the context), got " + std::to_string(c));
    }
  }
  vlm::VLModel model = vlm::load_checkpoint(config.checkpoint);
  if (!model.frozen) throw ProtocolError("ablate: checkpoint is not frozen");

  auto [base_ids, novel_ids] =
      synth::make_splits(config.n_base, config.n_novel, config.split_seed);
  std::sort(base_ids.begin(), base_ids.end());
  const synth::SupportSet support = synth::build_support(
      base_ids, config.support_per_class,
      derive_seed(config.seeds[0], {kTagSupportSeed}));

  // Held-out in-distribution images of the base classes.
  std::vector<synth::ImageSample> holdout;
  const int holdout_per_class = 10;
  for (int cid : base_ids) {
    for (int j = 0; j < holdout_per_class; ++j) {
      const uint64_t s = derive_seed(
          config.eval_seed, {kTagAblateHoldout, static_cast<uint64_t>(cid),
                             static_cast<uint64_t>(j)});
      holdout.push_back(
          synth::render(synth::class_by_id(cid), synth::kPretrainScale, s));
    }
  }

  adapt::TrainConfig tc = config.train;
  tc.seed = derive_seed(config.seeds[0], {kTagMethod, name_hash("ablate")});

  std::vector<LossCurve> curves;
  for (int count : token_counts) {
    adapt::PromptParams prol = adapt::prol_train(
        model, support, count, config.query_tokens, tc,
        synth::kPretrainScale, &holdout);
    curves.push_back(
        {"prol ctx" + std::to_string(count), prol.train_loss,
         prol.holdout_loss});
    adapt::PromptParams robust = adapt::robust_prol_train(
        model, support, {16, 24, 32}, count, config.query_tokens, tc,
        &holdout);
    curves.push_back({"robust ctx" + std::to_string(count),
                      robust.train_loss, robust.holdout_loss});
  }

  if (!config.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(config.out_dir);
    write_text_file((fs::path(config.out_dir) / "ablate_curves.json").string(),
                    curves_to_json(curves).dump(2) + "\n");
    write_text_file((fs::path(config.out_dir) / "ablate_curves.svg").string(),
                    plot_loss_curves(curves));
  }
  return curves;
}

}  // namespace promptlab::eval
