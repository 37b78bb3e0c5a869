#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "svil/experiment.hpp"

using namespace svil;
using namespace svil::exp;
namespace fs = std::filesystem;

namespace {

io::Json tiny_doc() {
  return io::Json::parse(R"({
    "seed": 3,
    "dataset": {"identities_per_domain": 6, "images_per_identity": 6},
    "train": {"epochs": 2, "identities_per_batch": 4, "eval_every": 1}
  })");
}

ExperimentConfig tiny(const std::string& out) {
  auto c = parse_config(tiny_doc());
  c.output_dir = fs::temp_directory_path() / out;
  fs::remove_all(c.output_dir);
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string field_of(const io::Json& doc) {
  try {
    parse_config(doc);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<none>";
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SVIL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, ErrorsNameTheField) {
  EXPECT_EQ(field_of(io::Json::parse(R"({"seed": 1})")), "dataset");
  auto d = tiny_doc();
  d["train"]["bogus"] = 1;
  EXPECT_EQ(field_of(d), "train.bogus");
  d = tiny_doc();
  d["kind"] = "nope";
  EXPECT_EQ(field_of(d), "kind");
  d = tiny_doc();
  d["train"]["weight_mode"] = "medium";
  EXPECT_EQ(field_of(d), "train.weight_mode");
  d = tiny_doc();
  d["dataset"]["identities_per_domain"] = -4;
  EXPECT_EQ(field_of(d), "dataset.identities_per_domain");
  d = tiny_doc();
  d["train"]["identities_per_batch"] = 9;
  EXPECT_EQ(field_of(d), "train.identities_per_batch");
  d = tiny_doc();
  d["kind"] = "single-source-camera-split";
  d["camera_split"] = {{"subsets", 5}};
  EXPECT_EQ(field_of(d), "camera_split.subsets");
}

TEST(Config, CanonicalRoundTripAndHash) {
  auto c = parse_config(tiny_doc());
  const auto doc = to_json(c);
  EXPECT_EQ(to_json(parse_config(doc)).dump(), doc.dump());
  auto moved = c;
  moved.output_dir = "/elsewhere";
  EXPECT_EQ(config_hash(moved), config_hash(c));
  moved.train.step.sjm = false;
  EXPECT_NE(config_hash(moved), config_hash(c));
  EXPECT_EQ(c.dataset.seed, 3u);
  EXPECT_EQ(c.train.seed, 3u);
}

TEST(Config, EnvironmentOverrides) {
  auto c = parse_config(tiny_doc());
  ::setenv("SVIL_OUTPUT_DIR", "/tmp/svil_env_out", 1);
  ::setenv("SVIL_SEED", "41", 1);
  apply_environment(c);
  ::unsetenv("SVIL_OUTPUT_DIR");
  EXPECT_EQ(c.output_dir, fs::path("/tmp/svil_env_out"));
  EXPECT_EQ(c.seed, 41u);
  EXPECT_EQ(c.dataset.seed, 41u);
  EXPECT_EQ(c.train.seed, 41u);
  ::setenv("SVIL_SEED", "x1", 1);
  EXPECT_THROW(apply_environment(c), ConfigError);
  ::unsetenv("SVIL_SEED");
}

TEST(Records, RoundTripLosslessly) {
  eval::EvalResult e;
  e.mAP = 0.1 + 0.2;
  e.cmc = {0.25, 1.0 / 3, 1.0};
  e.per_query_ap = {0.3, 1.0 / 7};
  e.evaluated_queries = {0, 2};
  e.excluded_queries = 1;
  const auto ej = to_json(e);
  EXPECT_EQ(to_json(eval_from_json(io::Json::parse(ej.dump()))).dump(), ej.dump());

  train::IterationRecord r;
  r.iteration = 17;
  r.epoch = 2;
  r.split = {{0, 2}, 1};
  r.lr_scale = 0.1;
  r.meta_train.agnostic_ce = 2.0 / 3;
  r.meta_train.specific_ce = {1.1, std::exp(1.0)};
  r.meta_train.specific_triplet = {0.3, 0.0};
  r.meta_train.total = 1e-17;
  r.meta_test_loss = 3.14159;
  r.temperature = 1.0 / 16;
  r.style_norm = 12.5;
  const auto rj = to_json(r);
  EXPECT_EQ(to_json(iteration_from_json(io::Json::parse(rj.dump()))).dump(), rj.dump());
  r.meta_test_loss.reset();
  EXPECT_FALSE(iteration_from_json(to_json(r)).meta_test_loss.has_value());

  train::EpochRecord ep;
  ep.epoch = 4;
  ep.mean_total_loss = 2.718281828459045;
  ep.target = e;
  const auto pj = to_json(ep);
  EXPECT_EQ(to_json(epoch_from_json(io::Json::parse(pj.dump()))).dump(), pj.dump());
  ep.target.reset();
  EXPECT_FALSE(epoch_from_json(to_json(ep)).target.has_value());
}

TEST(Ablate, CombinationCounts) {
  auto base = tiny("svil_test_ablate");
  base.train.epochs = 1;
  EXPECT_EQ(ablate(base, {}, false).size(), 1u);
  const auto two = ablate(base, {parse_toggle("sjm", base)}, false);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_EQ(two[0].settings, (std::vector<std::pair<std::string, std::string>>{{"sjm", "off"}}));
  EXPECT_EQ(two[1].settings, (std::vector<std::pair<std::string, std::string>>{{"sjm", "on"}}));
  const auto four = ablate(base, {parse_toggle("sjm", base), parse_toggle("maml", base)}, true);
  EXPECT_EQ(four.size(), 4u);
  EXPECT_TRUE(fs::exists(base.output_dir / "summary.tsv"));
  EXPECT_TRUE(fs::exists(base.output_dir / "ablation.json"));
  EXPECT_TRUE(fs::exists(base.output_dir / "sjm-on_maml-off" / "final_eval.json"));
  EXPECT_THROW(parse_toggle("dropout", base), ConfigError);
  EXPECT_EQ(parse_toggle("weight_mode=hard", base).values, (std::vector<std::string>{"hard"}));
}

TEST(Ablate, TogglesOnlyTouchTheirField) {
  const auto base = parse_config(tiny_doc());
  auto c = base;
  apply_toggle(c, "sjm", "off");
  auto expect = to_json(base);
  expect["train"]["sjm"] = false;
  EXPECT_EQ(to_json(c).dump(), expect.dump());
  c = base;
  apply_toggle(c, "loss", "spec");
  EXPECT_EQ(c.train.step.lambda, 0.0);
  apply_toggle(c, "loss", "all");
  EXPECT_EQ(c.train.step.lambda, 0.1);
  apply_toggle(c, "sjm_stage", "2");
  EXPECT_EQ(c.encoder.sjm_stage, 2u);
}

TEST(Run, Fig1WritesTwoRunsAndComparison) {
  auto c = tiny("svil_test_fig1");
  c.kind = ExperimentKind::kFig1;
  c.train.epochs = 1;
  const auto summary = run_experiment(c);
  EXPECT_TRUE(fs::exists(c.output_dir / "original" / "final_eval.json"));
  EXPECT_TRUE(fs::exists(c.output_dir / "stylized" / "final_eval.json"));
  const auto cmp = io::read_json(c.output_dir / "comparison.json");
  EXPECT_TRUE(cmp.contains("mAP_delta"));
  EXPECT_EQ(cmp.at("stylized_better").get<bool>(), cmp.at("mAP_delta").get<double>() > 0);
  EXPECT_THROW(ablate(c, {}, false), ConfigError);
}

TEST(Run, SameConfigTwiceIsByteIdentical) {
  auto a = tiny("svil_test_rerun_a");
  auto b = tiny("svil_test_rerun_b");
  run_experiment(a);
  run_experiment(b);
  // config.json is left out: it records output_dir.
  for (const char* f : {"metrics.jsonl", "final_eval.json", "summary.tsv", "stamp.json"}) {
    EXPECT_EQ(slurp(a.output_dir / f), slurp(b.output_dir / f)) << f;
  }
  EXPECT_EQ(slurp(a.output_dir / "checkpoints" / "final.bin"), slurp(b.output_dir / "checkpoints" / "final.bin"));
  EXPECT_FALSE(slurp(a.output_dir / "metrics.jsonl").empty());
}

TEST(Cli, ExitCodes) {
  const auto dir = fs::temp_directory_path() / "svil_test_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "missing.json") << R"({"seed": 1})";
  EXPECT_EQ(run_cli("run " + (dir / "missing.json").string()), 2);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(run_cli("run " + (dir / "broken.json").string()), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("eval " + (dir / "nothing").string() + " " + (dir / "nowhere").string()), 1);

  auto doc = tiny_doc();
  doc["train"]["epochs"] = 1;
  doc["output_dir"] = (dir / "out").string();
  std::ofstream(dir / "ok.json") << doc.dump();
  EXPECT_EQ(run_cli("run " + (dir / "ok.json").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "final_eval.json"));
  EXPECT_EQ(run_cli("dump-dataset " + (dir / "ok.json").string() + " -o " + (dir / "data").string()), 0);
  EXPECT_EQ(run_cli("eval " + (dir / "out" / "checkpoints" / "final").string() + " " + (dir / "data").string()), 0);
}
