#include "dlr/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dlr/config.hpp"
#include "dlr/errors.hpp"
#include "dlr/evaluate.hpp"
#include "dlr/model.hpp"
#include "dlr/stage1.hpp"
#include "dlr/stage2.hpp"
#include "dlr/stage3.hpp"
#include "dlr/synthtask.hpp"

namespace fs = std::filesystem;

namespace dlr {

void write_pgm(const std::string& path, const std::vector<double>& values, int width, int height) {
  if (static_cast<int>(values.size()) != width * height) throw SizeMismatch("pgm size mismatch");
  double lo = values.empty() ? 0.0 : values.front();
  double hi = lo;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string body;
  for (double v : values) {
    const double t = hi > lo ? (v - lo) / (hi - lo) : 0.0;
    body.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

std::unique_ptr<DlrModel> model_from_checkpoint(const fs::path& ckpt, CheckpointManifest* manifest_out) {
  const auto manifest = read_manifest(ckpt);
  const auto cfg = RunConfig::parse(manifest.config_text);
  auto model = std::make_unique<DlrModel>(cfg.model, cfg.run.seed);
  load_checkpoint(ckpt, model->store());
  if (manifest_out) *manifest_out = manifest;
  return model;
}

std::vector<TaskInstance> filter_families(const std::vector<TaskInstance>& tasks, const std::vector<Family>& fams) {
  std::vector<TaskInstance> out;
  for (const auto& t : tasks)
    if (std::find(fams.begin(), fams.end(), t.family) != fams.end()) out.push_back(t);
  return out;
}

struct GenDataArgs {
  std::uint64_t seed = 0;
  int count = 1000;
  std::string families = "attribute,relational,global";
  int grid = 8;
  std::string out;
};

void cmd_gen_data(const GenDataArgs& a) {
  if (a.count < 0) throw ConfigError("--count must be >= 0");
  const auto fams = parse_families(a.families);
  fs::create_directories(a.out);
  std::vector<TaskInstance> tasks;
  Json ids = Json::array();
  for (int i = 0; i < a.count; ++i) {
    tasks.push_back(generate_task(a.seed + static_cast<std::uint64_t>(i), fams[i % fams.size()], a.grid));
    ids.push_back(tasks.back().id);
  }
  write_tasks_jsonl(fs::path(a.out) / "tasks.jsonl", tasks);
  Json fam_names = Json::array();
  for (auto f : fams) fam_names.push_back(std::string(to_string(f)));
  write_json(fs::path(a.out) / "manifest.json", Json{{"command", "gen-data"},
                                                     {"seed", a.seed},
                                                     {"count", a.count},
                                                     {"families", fam_names},
                                                     {"grid", a.grid},
                                                     {"ids", ids}});
}

struct TrainArgs {
  int stage = 1;
  std::string config;
  std::string data;
  std::string out;
  bool skip_pretrain = false;
  bool no_focus_reward = false;
  bool freeze_latent = false;
};

void cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  if (a.stage < 1 || a.stage > 3) throw ConfigError("--stage must be 1, 2 or 3");
  if (a.skip_pretrain && a.stage != 2) throw ConfigError("--skip-pretrain applies to stage 2 only");
  if ((a.no_focus_reward || a.freeze_latent) && a.stage != 3) {
    throw ConfigError("--no-focus-reward and --freeze-latent-policy apply to stage 3 only");
  }
  const auto cfg = RunConfig::load(a.config);
  if (!fs::exists(a.data)) throw IoError("data file " + a.data + " does not exist");
  if (!cfg.run.dev_data.empty() && !fs::exists(cfg.run.dev_data)) {
    throw IoError("dev data " + cfg.run.dev_data + " does not exist");
  }

  DlrModel model(cfg.model, cfg.run.seed);
  const bool needs_init = a.stage == 3 || (a.stage == 2 && !a.skip_pretrain);
  if (needs_init) {
    if (cfg.run.init_checkpoint.empty() || !fs::exists(cfg.run.init_checkpoint)) {
      throw CheckpointError("stage " + std::to_string(a.stage) + " requires a stage-" + std::to_string(a.stage - 1) +
                            " checkpoint in [run] init_checkpoint");
    }
    const auto prior = read_manifest(cfg.run.init_checkpoint);
    if (prior.stage != a.stage - 1) {
      throw CheckpointError("init checkpoint is from stage " + std::to_string(prior.stage) + ", expected stage " +
                            std::to_string(a.stage - 1));
    }
    load_checkpoint(cfg.run.init_checkpoint, model.store());
  }

  fs::create_directories(a.out);
  const fs::path out(a.out);
  write_text(out / "config.ini", cfg.text);
  JsonlWriter metrics(out / "metrics.jsonl");
  const auto tasks = read_tasks_jsonl(a.data);
  const auto dev = cfg.run.dev_data.empty() ? std::vector<TaskInstance>{} : read_tasks_jsonl(cfg.run.dev_data);

  Json summary;
  switch (a.stage) {
    case 1: {
      const auto r = train_stage1(model, filter_families(tasks, cfg.stage1_families), cfg.stage1, cfg.run.seed,
                                  metrics.sink());
      summary = {{"steps", r.steps}, {"final_loss", r.final_loss}, {"final_top1", r.final_top1}};
      break;
    }
    case 2: {
      const auto r = train_stage2(model, tasks, dev, cfg.stage2, cfg.run.seed, metrics.sink());
      summary = {{"steps", r.steps}, {"dev_tf_acc", r.dev_tf_acc}, {"dev", r.dev.to_json()}};
      break;
    }
    default: {
      Stage3Ablations ab{a.no_focus_reward, a.freeze_latent};
      const auto r = train_stage3(model, tasks, dev, cfg.stage3, cfg.sglp, cfg.reward, ab, cfg.run.seed,
                                  metrics.sink());
      summary = {{"iterations", r.iterations}, {"updates", r.updates}, {"eval", r.eval.to_json()}};
      break;
    }
  }
  CheckpointManifest manifest{a.stage, cfg.run.seed, cfg.text};
  save_checkpoint(out / "checkpoint.dlr", model.store(), manifest);
  write_json(out / "manifest.json", Json{{"argv", argv},
                                         {"stage", a.stage},
                                         {"seed", cfg.run.seed},
                                         {"config_hash", manifest.config_hash()},
                                         {"skip_pretrain", a.skip_pretrain},
                                         {"no_focus_reward", a.no_focus_reward},
                                         {"freeze_latent_policy", a.freeze_latent},
                                         {"summary", summary}});
}

void cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out) {
  CheckpointManifest manifest;
  const auto model = model_from_checkpoint(ckpt, &manifest);
  const auto cfg = RunConfig::parse(manifest.config_text);
  const auto tasks = read_tasks_jsonl(data);
  const auto rep = evaluate(*model, tasks, cfg.caps);
  fs::create_directories(out);
  auto j = rep.to_json();
  j["checkpoint_stage"] = manifest.stage;
  j["config_hash"] = manifest.config_hash();
  write_json(fs::path(out) / "report.json", j);
}

void cmd_inspect(const std::string& ckpt, const std::string& id, const std::string& dump) {
  CheckpointManifest manifest;
  const auto model = model_from_checkpoint(ckpt, &manifest);
  const auto cfg = RunConfig::parse(manifest.config_text);
  const auto task = regenerate_task(id, cfg.model.patch);
  const auto rec = evaluate_task(*model, task, cfg.caps);
  fs::create_directories(dump);
  const int g = task.image.size;
  const auto uniform = std::vector<double>(static_cast<std::size_t>(g) * g, 1.0 / (g * g));
  for (std::size_t k = 0; k < rec.generation.steps.size(); ++k) {
    const auto stem = (fs::path(dump) / ("step" + std::to_string(k + 1))).string();
    write_pgm(stem + "_latent.pgm", rec.generation.steps[k].attn, g, g);
    write_pgm(stem + "_oracle.pgm", k < task.oracle_masks.size() ? task.oracle_masks[k] : uniform, g, g);
  }
  std::ostringstream txt;
  txt << "task " << task.id << "\n";
  txt << "question " << task.question << "\n";
  txt << "gold " << task.answer << "\n";
  txt << "generated " << detokenize(rec.generation.tokens, model->vocab()) << "\n";
  txt << "valid " << (rec.valid ? 1 : 0) << "\n";
  txt << "correct " << (rec.correct ? 1 : 0) << "\n";
  txt << "truncated " << (rec.generation.truncated ? 1 : 0) << "\n";
  for (std::size_t k = 0; k < rec.generation.steps.size(); ++k) {
    txt << "step " << k + 1 << " kl ";
    if (k < task.oracle_masks.size()) {
      std::ostringstream v;
      v.precision(6);
      v << std::fixed << kl_divergence(task.oracle_masks[k], rec.generation.steps[k].attn);
      txt << v.str();
    } else {
      txt << "none";
    }
    txt << "\n";
  }
  write_text(fs::path(dump) / "trajectory.txt", txt.str());
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Desk-scale latent visual reasoning trainer", "dlr"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate synthetic grid VQA tasks");
  g->add_option("--seed", gen.seed, "First task seed")->required();
  g->add_option("--count", gen.count, "Number of tasks")->required();
  g->add_option("--families", gen.families, "Comma-separated families, cycled in order");
  g->add_option("--grid", gen.grid, "Grid size");
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Run one training stage");
  t->add_option("--stage", tr.stage, "1, 2 or 3")->required();
  t->add_option("--config", tr.config, "Run config")->required();
  t->add_option("--data", tr.data, "tasks.jsonl")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_flag("--skip-pretrain", tr.skip_pretrain, "Stage 2 from a fresh grounder");
  t->add_flag("--no-focus-reward", tr.no_focus_reward, "Stage 3 with beta = 0");
  t->add_flag("--freeze-latent-policy", tr.freeze_latent, "Stage 3 without grounder updates");

  std::string ckpt;
  std::string data;
  std::string out;
  auto* e = app.add_subcommand("eval", "Greedy evaluation");
  e->add_option("--ckpt", ckpt, "Checkpoint")->required();
  e->add_option("--data", data, "tasks.jsonl")->required();
  e->add_option("--out", out, "Output directory for report.json")->required();

  std::string task_id;
  std::string dump;
  auto* in = app.add_subcommand("inspect", "Dump attention heatmaps for one task");
  in->add_option("--ckpt", ckpt, "Checkpoint")->required();
  in->add_option("--task-id", task_id, "Task id")->required();
  in->add_option("--dump", dump, "Output directory")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }
  try {
    if (*g) cmd_gen_data(gen);
    if (*t) cmd_train(tr, std::vector<std::string>(args.begin() + 1, args.end()));
    if (*e) cmd_eval(ckpt, data, out);
    if (*in) cmd_inspect(ckpt, task_id, dump);
  } catch (const std::exception& ex) {
    std::cerr << "dlr: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace dlr
