#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "regionbag/harness.hpp"
#include "regionbag/plots.hpp"

namespace fs = std::filesystem;
using namespace regionbag;

namespace {

struct CommonTrainArgs {
  std::string config_path;
  std::string dataset;
  std::string teacher;
  std::string out_dir;
  int64_t seed = -1;
  int steps = -1;
  int batch = -1;
  double lr = -1;
};

void add_train_flags(CLI::App* cmd, CommonTrainArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config JSON file");
  cmd->add_option("--data", args.dataset, "dataset root directory");
  cmd->add_option("--teacher", args.teacher, "frozen teacher checkpoint");
  cmd->add_option("--out", args.out_dir, "output directory for the run");
  cmd->add_option("--seed", args.seed, "random seed");
  cmd->add_option("--steps", args.steps, "training steps");
  cmd->add_option("--batch", args.batch, "scenes per step");
  cmd->add_option("--lr", args.lr, "learning rate");
}

ExperimentConfig resolve_config(const CommonTrainArgs& args, const std::string& supervision) {
  ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = ExperimentConfig::load_file(args.config_path);
  if (!args.dataset.empty()) cfg.dataset_path = args.dataset;
  if (!args.teacher.empty()) cfg.teacher_checkpoint = args.teacher;
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (args.seed >= 0) cfg.seed = uint64_t(args.seed);
  if (args.steps >= 0) cfg.steps = args.steps;
  if (args.batch > 0) cfg.batch_scenes = args.batch;
  if (args.lr > 0) cfg.learning_rate = args.lr;
  cfg.supervision = supervision;
  if (cfg.dataset_path.empty()) throw CLI::ValidationError("--data (or config) is required");
  if (cfg.teacher_checkpoint.empty())
    throw CLI::ValidationError("--teacher (or config) is required");
  return cfg;
}

void print_eval(const EvalResult& eval) {
  std::cout << "AP50 novel: " << eval.ap50_novel << "\nAP50 base:  " << eval.ap50_base
            << "\nAP50 all:   " << eval.ap50_all << "\n";
  for (const auto& [name, ap] : eval.per_category)
    std::cout << "  " << name << ": " << 100.0 * ap << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bag-of-regions alignment for open-vocabulary detection on a synthetic benchmark"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  std::string gen_out;
  uint64_t gen_seed = 7;
  int gen_train = 400, gen_test = 150;
  int gen_width = 96, gen_height = 96;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--train", gen_train, "number of training scenes");
  gen->add_option("--test", gen_test, "number of test scenes");
  gen->add_option("--width", gen_width, "scene width in pixels");
  gen->add_option("--height", gen_height, "scene height in pixels");

  // ---- pretrain-vlm ----
  auto* pre = app.add_subcommand("pretrain-vlm", "pretrain and freeze the toy teacher");
  std::string pre_out = "teacher.ckpt";
  uint64_t pre_seed = 11;
  int pre_pairs = 2500, pre_steps = -1;
  pre->add_option("--out", pre_out, "checkpoint path");
  pre->add_option("--seed", pre_seed, "seed");
  pre->add_option("--pairs", pre_pairs, "corpus size (scene/caption pairs)");
  pre->add_option("--steps", pre_steps, "pretraining steps (default from config)");

  // ---- train / train-caption ----
  auto* train = app.add_subcommand("train", "train the detector with VLM distillation");
  CommonTrainArgs train_args;
  add_train_flags(train, train_args);
  bool no_bag = false, no_ind = false, no_pe = false, no_dropout = false, use_cache = false;
  train->add_flag("--no-bag-loss", no_bag, "disable the bag alignment loss");
  train->add_flag("--no-individual-loss", no_ind, "disable the individual alignment loss");
  train->add_flag("--no-spatial-pe", no_pe, "disable spatial positional embeddings");
  train->add_flag("--no-word-dropout", no_dropout, "disable word dropout");
  train->add_flag("--proposal-cache", use_cache, "enable the proposal cache");

  auto* trainc = app.add_subcommand("train-caption", "train with caption supervision");
  CommonTrainArgs trainc_args;
  add_train_flags(trainc, trainc_args);

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (AP50 per category)");
  std::string ev_ckpt, ev_teacher, ev_data, ev_split = "test", ev_config;
  ev->add_option("--checkpoint", ev_ckpt, "student checkpoint")->required();
  ev->add_option("--teacher", ev_teacher, "teacher checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset root")->required();
  ev->add_option("--split", ev_split, "dataset split");
  ev->add_option("--config", ev_config, "experiment config JSON (for eval parameters)");

  // ---- ablate ----
  auto* ab = app.add_subcommand("ablate", "run the toggle grid and parameter sweeps");
  CommonTrainArgs ab_args;
  add_train_flags(ab, ab_args);
  std::vector<std::string> ab_sweeps;
  int ab_seeds = 3;
  int ab_par = 0;
  bool ab_with_baseline = false, ab_with_caption = false;
  ab->add_option("--sweeps", ab_sweeps,
                 "parameter sweep axes (overlap, p_b, bags, words)");
  ab->add_option("--seeds", ab_seeds, "seeds per cell");
  ab->add_option("--parallel", ab_par, "worker threads (0 = hardware)");
  ab->add_flag("--with-baseline", ab_with_baseline, "include the no-distillation baseline");
  ab->add_flag("--with-caption", ab_with_caption, "include the caption-supervised cell");

  // ---- plot ----
  auto* pl = app.add_subcommand("plot", "emit figures for a finished run");
  std::string pl_run, pl_out;
  pl->add_option("--run", pl_run, "run directory containing run.jsonl")->required();
  pl->add_option("--out", pl_out, "output directory (default: run dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const Catalog catalog = default_catalog();
      SceneGenConfig scfg;
      scfg.width = gen_width;
      scfg.height = gen_height;
      Rng rng(gen_seed);
      DatasetSplits splits;
      uint64_t next_id = 1;
      for (int i = 0; i < gen_train; ++i) {
        SyntheticScene s = generate_scene(catalog, scfg, rng);
        s.id = next_id++;
        splits["train"].push_back(std::move(s));
      }
      for (int i = 0; i < gen_test; ++i) {
        SyntheticScene s = generate_scene(catalog, scfg, rng);
        s.id = next_id++;
        splits["test"].push_back(std::move(s));
      }
      write_dataset(gen_out, catalog, splits);
      std::cout << "wrote " << gen_train << " train + " << gen_test << " test scenes to "
                << gen_out << "\n";
    } else if (pre->parsed()) {
      const Catalog catalog = default_catalog();
      VlmConfig vcfg;
      if (pre_steps >= 0) vcfg.pretrain_steps = pre_steps;
      FrozenVLM vlm(vcfg, Vocab::build(catalog.names()), pre_seed);
      const auto corpus = build_pretrain_corpus(catalog, pre_pairs, pre_seed ^ 0xC0FFEE);
      Rng rng(pre_seed + 1);
      const auto report = pretrain_toy_vlm(vlm, corpus, catalog.names(), rng);
      vlm.save(pre_out);
      if (!report.losses.empty())
        std::cout << "pretrained " << report.losses.size()
                  << " steps, final loss " << report.losses.back() << "\n";
      std::cout << "teacher checkpoint: " << pre_out << "\n";
    } else if (train->parsed()) {
      ExperimentConfig cfg = resolve_config(train_args, "vlm");
      if (no_bag) cfg.use_bag_loss = false;
      if (no_ind) cfg.use_individual_loss = false;
      if (no_pe) cfg.use_spatial_pe = false;
      if (no_dropout) cfg.use_word_dropout = false;
      if (use_cache) cfg.use_proposal_cache = true;
      const RunRecord rec = train_detector(cfg);
      std::cout << "trained " << rec.steps.size() << " steps in " << rec.wall_seconds
                << "s\n";
      print_eval(rec.eval);
    } else if (trainc->parsed()) {
      ExperimentConfig cfg = resolve_config(trainc_args, "caption");
      const RunRecord rec = train_detector_caption(cfg);
      std::cout << "trained " << rec.steps.size() << " steps in " << rec.wall_seconds
                << "s\n";
      print_eval(rec.eval);
    } else if (ev->parsed()) {
      ExperimentConfig cfg;
      if (!ev_config.empty()) cfg = ExperimentConfig::load_file(ev_config);
      auto vlm = FrozenVLM::load(ev_teacher);
      auto det = StudentDetector::load(ev_ckpt);
      cfg.student = det->config();
      const Dataset ds = read_dataset(ev_data);
      if (!ds.splits.count(ev_split))
        throw std::runtime_error("dataset has no split: " + ev_split);
      const EvalResult eval =
          evaluate_ap50(*vlm, *det, ds.catalog, ds.splits.at(ev_split), cfg);
      print_eval(eval);
    } else if (ab->parsed()) {
      ExperimentConfig base = resolve_config(ab_args, "vlm");
      if (base.out_dir.empty()) throw CLI::ValidationError("--out is required for ablate");
      std::vector<AblationCell> cells = ablation_toggle_grid(base);
      if (ab_with_baseline) {
        ExperimentConfig c = base;
        c.use_bag_loss = c.use_individual_loss = false;
        c.use_spatial_pe = false;
        cells.push_back({"cls_only", c});
      }
      if (ab_with_caption) {
        ExperimentConfig c = base;
        c.supervision = "caption";
        cells.push_back({"caption", c});
      }
      for (const auto& axis : ab_sweeps) {
        ExperimentConfig best = base;  // sweeps run on the full configuration
        for (auto& cell : ablation_sweep(best, axis)) cells.push_back(std::move(cell));
      }
      std::vector<uint64_t> seeds;
      for (int s = 0; s < ab_seeds; ++s) seeds.push_back(base.seed + uint64_t(s));
      const auto rows = run_ablation(cells, seeds, base.out_dir, ab_par);
      int failures = 0;
      for (const auto& row : rows) {
        std::cout << row.cell << " seed " << row.seed << ": ";
        if (row.failed) {
          std::cout << "FAILED (" << row.error << ")\n";
          ++failures;
        } else {
          std::cout << "novel " << row.ap50_novel << " base " << row.ap50_base << " all "
                    << row.ap50_all << "\n";
        }
      }
      std::cout << "table: " << base.out_dir << "/ablation.csv\n";
      return failures == 0 ? 0 : 1;
    } else if (pl->parsed()) {
      const std::string out = pl_out.empty() ? pl_run : pl_out;
      fs::create_directories(out);
      const RunRecord rec = RunRecord::read_jsonl(pl_run + "/run.jsonl");
      std::vector<Series> series;
      auto collect = [&](const char* name, auto getter) {
        Series s;
        s.label = name;
        for (const auto& st : rec.steps) s.ys.push_back(getter(st));
        bool any = false;
        for (double y : s.ys) any |= y != 0.0;
        if (any) series.push_back(std::move(s));
      };
      collect("total", [](const StepLosses& s) { return s.total; });
      collect("cls", [](const StepLosses& s) { return s.cls; });
      collect("bag", [](const StepLosses& s) { return s.bag; });
      collect("individual", [](const StepLosses& s) { return s.individual; });
      collect("caption", [](const StepLosses& s) { return s.caption; });
      svg_line_chart(out + "/losses.svg", "training losses", series);
      std::vector<std::string> names;
      std::vector<double> values;
      for (const auto& [name, ap] : rec.eval.per_category) {
        names.push_back(name);
        values.push_back(100.0 * ap);
      }
      svg_bar_chart(out + "/ap50_per_category.svg", "AP50 per category", names, values);
      std::cout << "figures written to " << out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
