#include <doctest.h>

#include "dlr/metrics.hpp"

#include "dlr/cli.hpp"
#include "dlr/config.hpp"
#include "dlr/errors.hpp"
#include "helpers.hpp"

using namespace dlr;
namespace fs = std::filesystem;

namespace {

const char* const kTinyConfig = R"(# tiny pipeline
[run]
seed = 3
dev_data = data/tasks.jsonl

[model]
d = 16
layers = 1
heads = 2

[grounder]
slots = 4
heads = 2

[generate]
max_new_tokens = 40

[stage1]
batch = 4
epochs = 1

[stage2]
batch = 4
epochs = 1
dev_count = 3

[stage3]
max_tasks = 2
eval_count = 3
)";

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dlr");
  return run_cli(args);
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config parsing is strict") {
  CHECK_NOTHROW(RunConfig::parse(kTinyConfig));
  CHECK_THROWS_AS(RunConfig::parse("[model]\nwidth = 3\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[model]\nd = 16\nd = 32\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[extras]\nd = 16\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("d = 16\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[model]\nd = sixteen\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[model]\nd = 16x\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[model]\nd = 18\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[sglp]\nsigma = 0\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[stage1]\nfamilies = attribute, colors\n"), ConfigError);
  const auto c = RunConfig::parse("[stage1]\nfamilies = global\n[generate]\nmax_steps = 2\n");
  CHECK(c.stage1_families == std::vector<Family>{Family::global});
  CHECK(c.stage3.caps.max_steps == 2);
  CHECK(c.stage2.caps.max_steps == 2);
}

TEST_CASE("config paths resolve against the file") {
  const auto dir = testutil::scratch_dir("cli_paths");
  write(dir / "run.ini", "[run]\ninit_checkpoint = ../prev/checkpoint.dlr\n");
  const auto c = RunConfig::load(dir / "run.ini");
  CHECK(fs::path(c.run.init_checkpoint) == (dir / "../prev/checkpoint.dlr").lexically_normal());
}

TEST_CASE("checkpoints round trip byte for byte") {
  const auto dir = testutil::scratch_dir("cli_ckpt");
  const auto cfg = RunConfig::parse(kTinyConfig);
  DlrModel a(cfg.model, 1);
  save_checkpoint(dir / "a.dlr", a.store(), {2, 99, cfg.text});
  DlrModel b(cfg.model, 2);
  CHECK(a.store().checksum() != b.store().checksum());
  const auto m = load_checkpoint(dir / "a.dlr", b.store());
  CHECK(m.stage == 2);
  CHECK(m.seed == 99u);
  CHECK(m.config_text == cfg.text);
  CHECK(m.config_hash() == fnv1a(cfg.text));
  save_checkpoint(dir / "b.dlr", b.store(), m);
  CHECK(testutil::slurp(dir / "a.dlr") == testutil::slurp(dir / "b.dlr"));
  CHECK(testutil::slurp(dir / "a.dlr").substr(0, 4) == "DLR1");

  auto other = cfg.model;
  other.grounder.slots = 5;
  DlrModel c(other, 1);
  CHECK_THROWS_AS(load_checkpoint(dir / "a.dlr", c.store()), CheckpointError);
  write(dir / "junk.dlr", "not a checkpoint");
  CHECK_THROWS_AS(read_manifest(dir / "junk.dlr"), CheckpointError);
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("gen-data is deterministic") {
  const auto dir = testutil::scratch_dir("cli_gen");
  REQUIRE(cli({"gen-data", "--seed", "10", "--count", "7", "--families", "attribute,global", "--out",
               (dir / "a").string()}) == 0);
  REQUIRE(cli({"gen-data", "--seed", "10", "--count", "7", "--families", "attribute,global", "--out",
               (dir / "b").string()}) == 0);
  CHECK(testutil::slurp(dir / "a/tasks.jsonl") == testutil::slurp(dir / "b/tasks.jsonl"));
  CHECK(testutil::slurp(dir / "a/manifest.json") == testutil::slurp(dir / "b/manifest.json"));
  CHECK(count_lines(dir / "a/tasks.jsonl") == 7);
  const auto tasks = read_tasks_jsonl(dir / "a/tasks.jsonl");
  CHECK(tasks[0] == generate_task(10, Family::attribute));
  CHECK(tasks[1] == generate_task(11, Family::global));
  CHECK(cli({"gen-data", "--seed", "1", "--count", "2", "--families", "bogus", "--out", (dir / "c").string()}) == 1);
  CHECK(cli({"gen-data", "--count", "2", "--out", (dir / "d").string()}) != 0);
}

TEST_CASE("training stages chain through checkpoints") {
  const auto dir = testutil::scratch_dir("cli_train");
  REQUIRE(cli({"gen-data", "--seed", "0", "--count", "8", "--out", (dir / "data").string()}) == 0);
  write(dir / "s1.ini", kTinyConfig);
  const auto data = (dir / "data/tasks.jsonl").string();

  // Later stages refuse to start without the previous checkpoint.
  CHECK(cli({"train", "--stage", "3", "--config", (dir / "s1.ini").string(), "--data", data, "--out",
             (dir / "bad").string()}) == 1);
  CHECK(cli({"train", "--stage", "1", "--no-focus-reward", "--config", (dir / "s1.ini").string(), "--data", data,
             "--out", (dir / "bad").string()}) == 1);

  REQUIRE(cli({"train", "--stage", "1", "--config", (dir / "s1.ini").string(), "--data", data, "--out",
               (dir / "run1").string()}) == 0);
  for (const char* f : {"config.ini", "metrics.jsonl", "checkpoint.dlr", "manifest.json"}) {
    CHECK(fs::exists(dir / "run1" / f));
  }
  CHECK(read_manifest(dir / "run1/checkpoint.dlr").stage == 1);

  write(dir / "s2.ini", std::string(kTinyConfig) + "\n");
  {
    auto text = std::string(kTinyConfig);
    text.insert(text.find("dev_data"), "init_checkpoint = run1/checkpoint.dlr\n");
    write(dir / "s2.ini", text);
  }
  // A stage-1 checkpoint cannot seed stage 3.
  CHECK(cli({"train", "--stage", "3", "--config", (dir / "s2.ini").string(), "--data", data, "--out",
             (dir / "bad").string()}) == 1);
  REQUIRE(cli({"train", "--stage", "2", "--config", (dir / "s2.ini").string(), "--data", data, "--out",
               (dir / "run2").string()}) == 0);
  {
    auto text = std::string(kTinyConfig);
    text.insert(text.find("dev_data"), "init_checkpoint = run2/checkpoint.dlr\n");
    write(dir / "s3.ini", text);
  }
  REQUIRE(cli({"train", "--stage", "3", "--freeze-latent-policy", "--config", (dir / "s3.ini").string(), "--data",
               data, "--out", (dir / "run3").string()}) == 0);
  const auto manifest = Json::parse(testutil::slurp(dir / "run3/manifest.json"));
  CHECK(manifest["stage"] == 3);
  CHECK(manifest["freeze_latent_policy"] == true);
  CHECK(count_lines(dir / "run3/metrics.jsonl") == 2);

  SUBCASE("eval is deterministic and reports families") {
    REQUIRE(cli({"eval", "--ckpt", (dir / "run3/checkpoint.dlr").string(), "--data", data, "--out",
                 (dir / "eval_a").string()}) == 0);
    REQUIRE(cli({"eval", "--ckpt", (dir / "run3/checkpoint.dlr").string(), "--data", data, "--out",
                 (dir / "eval_b").string()}) == 0);
    const auto a = testutil::slurp(dir / "eval_a/report.json");
    CHECK(a == testutil::slurp(dir / "eval_b/report.json"));
    const auto rep = Json::parse(a);
    CHECK(rep["count"] == 8);
    for (const char* f : {"attribute", "relational", "global"}) CHECK(rep["families"].contains(f));
  }

  SUBCASE("inspect writes paired heatmaps") {
    REQUIRE(cli({"inspect", "--ckpt", (dir / "run2/checkpoint.dlr").string(), "--task-id", "relational-g8-s7",
                 "--dump", (dir / "inspect").string()}) == 0);
    const auto txt = testutil::slurp(dir / "inspect/trajectory.txt");
    int steps = 0;
    for (std::size_t p = txt.find("\nstep "); p != std::string::npos; p = txt.find("\nstep ", p + 1)) ++steps;
    int pgms = 0;
    for (const auto& e : fs::directory_iterator(dir / "inspect")) {
      if (e.path().extension() != ".pgm") continue;
      ++pgms;
      const auto bytes = testutil::slurp(e.path());
      CHECK(bytes.rfind("P5\n8 8\n255\n", 0) == 0);
      CHECK(bytes.size() == std::string("P5\n8 8\n255\n").size() + 64);
    }
    CHECK(pgms == 2 * steps);
    CHECK(cli({"inspect", "--ckpt", (dir / "run2/checkpoint.dlr").string(), "--task-id", "nope", "--dump",
               (dir / "inspect2").string()}) == 1);
  }
}

TEST_CASE("pgm scaling") {
  const auto dir = testutil::scratch_dir("cli_pgm");
  write_pgm((dir / "a.pgm").string(), {0.0, 0.5, 1.0, 0.25}, 2, 2);
  const auto bytes = testutil::slurp(dir / "a.pgm");
  REQUIRE(bytes.size() == 11u + 4u);
  CHECK(static_cast<unsigned char>(bytes[11]) == 0);
  CHECK(static_cast<unsigned char>(bytes[13]) == 255);
  write_pgm((dir / "flat.pgm").string(), {0.3, 0.3}, 2, 1);
  const auto flat = testutil::slurp(dir / "flat.pgm");
  CHECK(flat.substr(flat.size() - 2) == std::string(2, '\0'));
  CHECK_THROWS_AS(write_pgm((dir / "bad.pgm").string(), {0.3}, 2, 1), SizeMismatch);
}

}
