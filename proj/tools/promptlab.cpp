#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "promptlab/core/error.hpp"
#include "promptlab/core/rng.hpp"
#include "promptlab/eval/eval.hpp"
#include "promptlab/eval/svg.hpp"
#include "promptlab/selftest/selftest.hpp"
#include "promptlab/vlm/vlm.hpp"

namespace {

namespace fs = std::filesystem;
using promptlab::eval::ExperimentConfig;

nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw promptlab::ConfigError("cannot open config " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir,
                 uint64_t seed) {
  promptlab::nn::LMConfig lm;
  promptlab::nn::VEConfig ve;
  promptlab::vlm::CorpusConfig corpus;
  promptlab::vlm::PretrainConfig opt;
  if (!config_path.empty()) {
    const nlohmann::json j = load_json(config_path);
    if (j.contains("d_model")) {
      lm.d_model = j["d_model"].get<int>();
      ve.d_model = lm.d_model;
    }
    if (j.contains("n_layers")) lm.n_layers = j["n_layers"].get<int>();
    if (j.contains("n_heads")) lm.n_heads = j["n_heads"].get<int>();
    if (j.contains("max_seq_len")) lm.max_seq_len = j["max_seq_len"].get<int>();
    if (j.contains("ve_channels")) {
      ve.channels[0] = j["ve_channels"][0].get<int>();
      ve.channels[1] = j["ve_channels"][1].get<int>();
    }
    if (j.contains("images_per_class")) {
      corpus.images_per_class = j["images_per_class"].get<int>();
    }
    if (j.contains("k_min")) corpus.k_min = j["k_min"].get<int>();
    if (j.contains("k_max")) corpus.k_max = j["k_max"].get<int>();
    if (j.contains("epochs")) opt.epochs = j["epochs"].get<int>();
    if (j.contains("batch_size")) opt.batch_size = j["batch_size"].get<int>();
    if (j.contains("lr")) opt.lr = j["lr"].get<double>();
    if (j.contains("momentum")) opt.momentum = j["momentum"].get<double>();
  }
  corpus.seed = promptlab::core::derive_seed(seed, {0xc0});

  promptlab::vlm::VLModel model = promptlab::vlm::make_model(lm, ve, seed);
  std::printf("pretraining: %d classes x %d images, d_model=%d, %d layers\n",
              promptlab::synth::kNumClasses, corpus.images_per_class,
              lm.d_model, lm.n_layers);
  const promptlab::vlm::PretrainReport report =
      promptlab::vlm::pretrain(model, corpus, opt);
  model.freeze();

  fs::create_directories(out_dir);
  const std::string ckpt = (fs::path(out_dir) / "checkpoint.vlmc").string();
  promptlab::vlm::save_checkpoint(model, ckpt);

  nlohmann::json rj = {{"final_caption_accuracy", report.final_caption_accuracy},
                       {"epoch_loss", report.epoch_loss},
                       {"wall_seconds", report.wall_seconds},
                       {"sequences_per_epoch", report.sequences_per_epoch},
                       {"seed", seed},
                       {"checkpoint", ckpt}};
  promptlab::eval::write_text_file(
      (fs::path(out_dir) / "pretrain_report.json").string(), rj.dump(2) + "\n");
  std::printf("caption accuracy %.4f, wall %.1fs, checkpoint %s\n",
              report.final_caption_accuracy, report.wall_seconds, ckpt.c_str());
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& checkpoint,
            const std::string& out_dir, bool seed_set, uint64_t seed,
            int jobs) {
  ExperimentConfig config = ExperimentConfig::from_file(config_path);
  if (!checkpoint.empty()) config.checkpoint = checkpoint;
  if (!out_dir.empty()) config.out_dir = out_dir;
  if (seed_set) config.seeds = {seed};
  if (jobs > 0) config.jobs = jobs;
  const auto records = promptlab::eval::run(config);
  std::printf("%zu records", records.size());
  if (!config.out_dir.empty()) {
    std::printf(" -> %s/results.csv", config.out_dir.c_str());
  }
  std::printf("\n");
  return 0;
}

int cmd_tabulate(const std::string& config_path, const std::string& out_dir) {
  const nlohmann::json j = load_json(config_path);
  const auto layout =
      promptlab::eval::layout_from_name(j.at("layout").get<std::string>());
  const auto records = promptlab::eval::records_from_csv(
      j.at("records").get<std::string>());
  const auto table = promptlab::eval::tabulate(records, layout);
  for (const std::string& w : table.warnings) {
    std::fprintf(stderr, "warning: %s\n", w.c_str());
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const std::string stem = j.at("layout").get<std::string>();
    promptlab::eval::write_text_file(
        (fs::path(out_dir) / (stem + ".md")).string(), table.markdown);
    promptlab::eval::write_text_file(
        (fs::path(out_dir) / (stem + ".csv")).string(), table.csv);
    std::printf("wrote %s/%s.{md,csv}\n", out_dir.c_str(), stem.c_str());
  } else {
    std::printf("%s", table.markdown.c_str());
  }
  return 0;
}

int cmd_plot(const std::string& config_path, const std::string& out_dir) {
  const nlohmann::json j = load_json(config_path);
  const std::string style = j.at("style").get<std::string>();
  std::string svg;
  std::string stem;
  if (style == "accuracy_vs_nclasses") {
    const auto records = promptlab::eval::records_from_csv(
        j.at("records").get<std::string>());
    const std::string shift = j.value("shift", std::string("indist"));
    const std::string regime = j.value("regime", std::string("base"));
    svg = promptlab::eval::plot_accuracy_vs_nclasses(records, shift, regime);
    stem = "accuracy_" + shift + "_" + regime;
  } else if (style == "loss_curves") {
    const nlohmann::json cj = load_json(j.at("curves").get<std::string>());
    svg = promptlab::eval::plot_loss_curves(
        promptlab::eval::curves_from_json(cj));
    stem = "loss_curves";
  } else {
    throw promptlab::ConfigError("unknown plot style '" + style + "'");
  }
  const std::string dir = out_dir.empty() ? "." : out_dir;
  fs::create_directories(dir);
  const std::string path = (fs::path(dir) / (stem + ".svg")).string();
  promptlab::eval::write_text_file(path, svg);
  std::printf("wrote %s\n", path.c_str());
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& checkpoint,
               const std::string& out_dir) {
  const nlohmann::json j = load_json(config_path);
  ExperimentConfig config = ExperimentConfig::from_json(
      j.contains("experiment") ? j.at("experiment") : j);
  if (!checkpoint.empty()) config.checkpoint = checkpoint;
  if (!out_dir.empty()) config.out_dir = out_dir;
  std::vector<int> counts = {32, 64, 128};
  if (j.contains("token_counts")) {
    counts = j.at("token_counts").get<std::vector<int>>();
  }
  const auto curves = promptlab::eval::ablate_tokens(config, counts);
  for (const auto& c : curves) {
    std::printf("%-18s final train loss %.5f", c.label.c_str(),
                c.train.empty() ? 0.0 : c.train.back());
    if (!c.holdout.empty()) std::printf(", holdout %.5f", c.holdout.back());
    std::printf("\n");
  }
  return 0;
}

int cmd_selftest(uint64_t seed) {
  using namespace promptlab::selftest;
  std::vector<CheckResult> all;
  auto grads = gradient_suite();
  all.insert(all.end(), grads.begin(), grads.end());
  auto oracles = oracle_suite(seed);
  all.insert(all.end(), oracles.begin(), oracles.end());
  auto frozen = frozen_contract_suite(
      (fs::temp_directory_path() / "promptlab_selftest").string());
  all.insert(all.end(), frozen.begin(), frozen.end());
  print_results(all);
  const bool ok = all_passed(all);
  std::printf("%s (%zu checks)\n", ok ? "ALL PASS" : "FAILURES PRESENT",
              all.size());
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale lab for prompt robustness on a frozen toy VLM"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_dir;
  uint64_t seed = 0;
  int jobs = 0;

  auto add_common = [&](CLI::App* cmd, bool with_all = true) {
    cmd->add_option("--config", config_path, "JSON config file");
    if (with_all) {
      cmd->add_option("--checkpoint", checkpoint, "model checkpoint path");
    }
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed, "root seed");
    cmd->add_option("--jobs", jobs, "worker threads (0 = default)");
  };

  CLI::App* pretrain = app.add_subcommand("pretrain", "train + freeze the VLM");
  add_common(pretrain, false);
  CLI::App* run = app.add_subcommand("run", "run an evaluation grid");
  add_common(run);
  CLI::App* tabulate = app.add_subcommand("tabulate", "records -> table");
  add_common(tabulate, false);
  CLI::App* plot = app.add_subcommand("plot", "records/curves -> SVG");
  add_common(plot, false);
  CLI::App* ablate = app.add_subcommand("ablate", "token-count ablation");
  add_common(ablate);
  CLI::App* selftest =
      app.add_subcommand("selftest", "gradient + oracle suites");
  add_common(selftest, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (pretrain->parsed()) {
      if (out_dir.empty()) throw promptlab::ConfigError("pretrain needs --out");
      return cmd_pretrain(config_path, out_dir, seed);
    }
    if (run->parsed()) {
      if (config_path.empty()) throw promptlab::ConfigError("run needs --config");
      return cmd_run(config_path, checkpoint, out_dir,
                     run->count("--seed") > 0, seed, jobs);
    }
    if (tabulate->parsed()) {
      if (config_path.empty()) {
        throw promptlab::ConfigError("tabulate needs --config");
      }
      return cmd_tabulate(config_path, out_dir);
    }
    if (plot->parsed()) {
      if (config_path.empty()) throw promptlab::ConfigError("plot needs --config");
      return cmd_plot(config_path, out_dir);
    }
    if (ablate->parsed()) {
      if (config_path.empty()) {
        throw promptlab::ConfigError("ablate needs --config");
      }
      return cmd_ablate(config_path, checkpoint, out_dir);
    }
    if (selftest->parsed()) return cmd_selftest(seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
