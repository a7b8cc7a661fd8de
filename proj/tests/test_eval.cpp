#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "promptlab/core/error.hpp"
#include "promptlab/eval/eval.hpp"
#include "promptlab/eval/svg.hpp"
#include "promptlab/vlm/vlm.hpp"

using namespace promptlab;
using namespace promptlab::eval;

namespace {

namespace fs = std::filesystem;

std::string test_dir() {
  const std::string dir =
      (fs::temp_directory_path() / "promptlab_test_eval").string();
  fs::create_directories(dir);
  return dir;
}

std::string make_checkpoint() {
  static std::string path;
  if (!path.empty()) return path;
  nn::LMConfig lm;
  lm.d_model = 16;
  lm.n_layers = 1;
  lm.n_heads = 2;
  lm.max_seq_len = 128;
  nn::VEConfig ve;
  ve.channels = {4, 6};
  ve.d_model = 16;
  vlm::VLModel m = vlm::make_model(lm, ve, 12345);
  m.freeze();
  path = test_dir() + "/eval_model.vlmc";
  vlm::save_checkpoint(m, path);
  return path;
}

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.methods = {"zero_shot", "knn", "icl_rice", "prol"};
  cfg.n_base = 8;
  cfg.shifts = {"indist", "sketch"};
  cfg.seeds = {0, 1};
  cfg.train.epochs = 1;
  cfg.train.batch_size = 8;
  cfg.checkpoint = make_checkpoint();
  cfg.n_test_per_class = 2;
  cfg.support_per_class = 3;
  cfg.ctx_tokens = 8;
  cfg.query_tokens = 2;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("config validation rejects unknown methods, shifts and fields") {
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"bogus_field", 1}}),
                  ConfigError);
  ExperimentConfig cfg = small_config();
  cfg.methods = {"nonsense"};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.n_base = 9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.shifts = {"weird"};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.seeds = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.checkpoint = "";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  // The "corruption" alias normalizes to the default corruption shift.
  const auto j = nlohmann::json{{"methods", {"zero_shot"}},
                                {"shifts", {"corruption"}},
                                {"checkpoint", make_checkpoint()}};
  CHECK(ExperimentConfig::from_json(j).shifts[0] == "corruption_gauss_noise_3");
}

TEST_CASE("run: record schema, base-only methods, accuracy accounting") {
  ExperimentConfig cfg = small_config();
  const auto records = run(cfg);
  // knn is base-only: 2 shifts x 2 seeds; others: 2 shifts x 2 regimes x 2
  // seeds.
  int knn_records = 0, prol_records = 0;
  for (const auto& r : records) {
    CHECK((r.regime == "base" || r.regime == "novel"));
    CHECK(r.n_classes == 8);
    CHECK(r.n_test == 16);  // 8 classes x 2 per class
    CHECK(r.correct >= 0);
    CHECK(r.correct <= r.n_test);
    CHECK(r.accuracy() == doctest::Approx(
        static_cast<double>(r.correct) / r.n_test));
    if (r.method == "knn") {
      ++knn_records;
      CHECK(r.regime == "base");
    }
    if (r.method == "prol") ++prol_records;
  }
  CHECK(knn_records == 4);
  CHECK(prol_records == 8);
}

TEST_CASE("run twice produces byte-identical CSV and JSON") {
  ExperimentConfig cfg = small_config();
  cfg.methods = {"zero_shot", "icl_random"};
  cfg.seeds = {3};
  cfg.out_dir = test_dir() + "/run_a";
  (void)run(cfg);
  ExperimentConfig cfg2 = cfg;
  cfg2.out_dir = test_dir() + "/run_b";
  (void)run(cfg2);
  const std::string csv_a = slurp(cfg.out_dir + "/results.csv");
  CHECK(!csv_a.empty());
  CHECK(csv_a == slurp(cfg2.out_dir + "/results.csv"));
  CHECK(slurp(cfg.out_dir + "/results.json") ==
        slurp(cfg2.out_dir + "/results.json"));
  CHECK(csv_a.rfind("method,shift,regime,n_classes,seed,accuracy,n_test,"
                    "wall_ms\n", 0) == 0);
  // Deterministic output zeroes the timing column.
  std::stringstream ss(csv_a);
  std::string line;
  std::getline(ss, line);
  while (std::getline(ss, line)) {
    CHECK(line.substr(line.rfind(',') + 1) == "0");
  }
}

TEST_CASE("run refuses an unfrozen checkpoint") {
  nn::LMConfig lm;
  lm.d_model = 16;
  lm.n_layers = 1;
  lm.n_heads = 2;
  lm.max_seq_len = 128;
  nn::VEConfig ve;
  ve.channels = {4, 6};
  ve.d_model = 16;
  vlm::VLModel m = vlm::make_model(lm, ve, 5);
  const std::string path = test_dir() + "/unfrozen.vlmc";
  vlm::save_checkpoint(m, path);
  ExperimentConfig cfg = small_config();
  cfg.checkpoint = path;
  CHECK_THROWS_AS(run(cfg), ProtocolError);
}

TEST_CASE("records round trip through CSV") {
  ExperimentConfig cfg = small_config();
  cfg.methods = {"zero_shot"};
  cfg.seeds = {0};
  cfg.out_dir = test_dir() + "/csv_rt";
  const auto records = run(cfg);
  const auto loaded = records_from_csv(cfg.out_dir + "/results.csv");
  REQUIRE(loaded.size() == records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    CHECK(loaded[i].method == records[i].method);
    CHECK(loaded[i].shift == records[i].shift);
    CHECK(loaded[i].regime == records[i].regime);
    CHECK(loaded[i].seed == records[i].seed);
    CHECK(loaded[i].correct == records[i].correct);
    CHECK(loaded[i].n_test == records[i].n_test);
  }
}

TEST_CASE("tabulate: means over seeds, markers match a sort oracle") {
  std::vector<ResultRecord> records;
  auto rec = [](const std::string& m, const std::string& s,
                const std::string& reg, uint64_t seed, int correct) {
    ResultRecord r;
    r.method = m;
    r.shift = s;
    r.regime = reg;
    r.n_classes = 8;
    r.seed = seed;
    r.correct = correct;
    r.n_test = 100;
    return r;
  };
  // Means over two seeds: prol 80, icl_rice 60, icl_random 30.
  records.push_back(rec("prol", "indist", "base", 0, 78));
  records.push_back(rec("prol", "indist", "base", 1, 82));
  records.push_back(rec("icl_rice", "indist", "base", 0, 55));
  records.push_back(rec("icl_rice", "indist", "base", 1, 65));
  records.push_back(rec("icl_random", "indist", "base", 0, 30));
  records.push_back(rec("icl_random", "indist", "base", 1, 30));

  const TableResult table = tabulate(records, Layout::BaseTable);
  // Independent sort: best = prol (80), second = icl_rice (60).
  CHECK(table.markdown.find("**80.00**") != std::string::npos);
  CHECK(table.markdown.find("_60.00_") != std::string::npos);
  CHECK(table.markdown.find("| icl_random | 30.00 |") != std::string::npos);
  // Missing methods produce no rows and no silent zeros.
  CHECK(table.markdown.find("robust_prol") == std::string::npos);

  // Single-seed mean equals the value itself.
  const TableResult single = tabulate({rec("prol", "v2", "base", 0, 42)},
                                      Layout::BaseTable);
  CHECK(single.markdown.find("42.00") != std::string::npos);

  // Empty records: no crash, warning emitted.
  const TableResult empty = tabulate({}, Layout::NovelTable);
  CHECK(!empty.warnings.empty());
}

TEST_CASE("tabulate flags missing cells with an em dash and a warning") {
  std::vector<ResultRecord> records;
  ResultRecord r;
  r.method = "prol";
  r.shift = "indist";
  r.regime = "base";
  r.n_classes = 8;
  r.seed = 0;
  r.correct = 50;
  r.n_test = 100;
  records.push_back(r);
  r.method = "icl_rice";
  r.shift = "sketch";
  records.push_back(r);
  const TableResult table = tabulate(records, Layout::BaseTable);
  CHECK(table.markdown.find("—") != std::string::npos);
  CHECK(table.warnings.size() == 2);  // each method misses one shift
}

TEST_CASE("svg: deterministic bytes, padded axis range, finite-data guard") {
  std::vector<Series> series = {{"a", {{0.0, 0.0}, {10.0, 50.0}}},
                                {"b", {{0.0, 25.0}, {10.0, 10.0}}}};
  const std::string svg1 = render_line_chart("t", "x", "y", series);
  const std::string svg2 = render_line_chart("t", "x", "y", series);
  CHECK(svg1 == svg2);
  // 5% padding of the x range [0,10] puts the first tick at -0.5.
  CHECK(svg1.find(">-0.5<") != std::string::npos);
  CHECK(svg1.find(">10.5<") != std::string::npos);

  series[0].points[0].second = std::nan("");
  CHECK_THROWS_AS(render_line_chart("t", "x", "y", series), ValueError);
  CHECK_THROWS_AS(render_line_chart("t", "x", "y", {}), ValueError);
}

TEST_CASE("plot_accuracy_vs_nclasses: one series per method, single point") {
  ResultRecord r;
  r.method = "prol";
  r.shift = "indist";
  r.regime = "base";
  r.n_classes = 8;
  r.seed = 0;
  r.correct = 70;
  r.n_test = 100;
  const std::string svg = plot_accuracy_vs_nclasses({r}, "indist", "base");
  CHECK(svg.find("prol") != std::string::npos);
  CHECK(svg.find("<circle") != std::string::npos);
  CHECK_THROWS_AS(plot_accuracy_vs_nclasses({r}, "sketch", "base"),
                  ValueError);
}

TEST_CASE("loss curves serialize and plot") {
  std::vector<LossCurve> curves = {{"prol ctx8", {1.0, 0.5, 0.2}, {1.1, 0.7, 0.4}}};
  const nlohmann::json j = curves_to_json(curves);
  const auto back = curves_from_json(j);
  REQUIRE(back.size() == 1);
  CHECK(back[0].train == curves[0].train);
  CHECK(back[0].holdout == curves[0].holdout);
  const std::string svg = plot_loss_curves(back);
  CHECK(svg.find("prol ctx8 train") != std::string::npos);
  CHECK(svg.find("prol ctx8 test") != std::string::npos);
}

TEST_CASE("ablate: curve length equals epochs, even counts enforced") {
  ExperimentConfig cfg = small_config();
  cfg.train.epochs = 2;
  cfg.out_dir.clear();
  const auto curves = ablate_tokens(cfg, {4});
  REQUIRE(curves.size() == 2);  // prol + robust per count
  for (const auto& c : curves) {
    CHECK(c.train.size() == 2);
    CHECK(c.holdout.size() == 2);
  }
  CHECK_THROWS_AS(ablate_tokens(cfg, {5}), ValueError);
  CHECK_THROWS_AS(ablate_tokens(cfg, {}), ValueError);
}
