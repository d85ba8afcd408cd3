#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include <doctest.h>

#include "pseudoseg/checkpoint.hpp"
#include "pseudoseg/runner.hpp"

using namespace pseudoseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pseudoseg_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json tiny_config_json(const fs::path& out) {
  return json{
      {"dataset",
       {{"source", "shapes"}, {"num_classes", 4}, {"canvas", {64, 64}}, {"n_train", 12},
        {"n_val", 3}, {"dataset_seed", 21}, {"fraction", "1/3"}, {"split_seed", 1},
        {"min_class_pixels", 16}}},
      {"model", {{"backbone", "desk4_tiny"}, {"hypercolumn", true}}},
      {"train",
       {{"iterations", 6}, {"labeled_batch", 2}, {"unlabeled_batch", 2}, {"mode", "unlabeled"},
        {"seed", 3}, {"eval_interval", 3}, {"checkpoint_interval", 3},
        {"attention_embed_dim", 8}}},
      {"augment", {{"crop", {64, 64}}, {"cutout_size", 16}}},
      {"output_dir", out.string()}};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("config parsing, defaults and validation errors") {
  SUBCASE("round-trip preserves every field") {
    const auto j = tiny_config_json("/tmp/x");
    const auto cfg = run::ExperimentConfig::from_json(j);
    CHECK(cfg.dataset.n_train == 12);
    CHECK(cfg.train.iterations == 6);
    CHECK(cfg.train.fusion.gamma == 0.5);  // default preset
    const auto echoed = run::ExperimentConfig::from_json(cfg.to_json());
    CHECK(echoed.to_json() == cfg.to_json());
  }
  SUBCASE("unknown fields are named") {
    auto j = tiny_config_json("/tmp/x");
    j["train"]["learning_rate_typo"] = 0.1;
    try {
      run::ExperimentConfig::from_json(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("learning_rate_typo") != std::string::npos);
    }
  }
  SUBCASE("wrong types are named") {
    auto j = tiny_config_json("/tmp/x");
    j["train"]["iterations"] = "many";
    try {
      run::ExperimentConfig::from_json(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("train.iterations") != std::string::npos);
    }
  }
  SUBCASE("semantic validation names the field") {
    auto cfg = run::ExperimentConfig::from_json(tiny_config_json("/tmp/x"));
    cfg.dataset.fraction = "3/2";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.dataset.fraction = "1/3";
    cfg.train.fusion.temperature = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
  SUBCASE("fusion presets") {
    auto j = tiny_config_json("/tmp/x");
    j["fusion"] = {{"preset", "high_data"}};
    const auto cfg = run::ExperimentConfig::from_json(j);
    CHECK(cfg.train.fusion.gamma == 0.3);
    CHECK(cfg.train.fusion.temperature == 0.7);
  }
}

TEST_CASE("config_diff reports exactly the changed leaves") {
  const auto a = run::ExperimentConfig::from_json(tiny_config_json("/tmp/x"));
  auto b = a;
  b.train.fusion.temperature = 1.0;
  const auto d = run::config_diff(a.to_json(), b.to_json());
  REQUIRE(d.size() == 1);
  CHECK(d[0] == "fusion.temperature");
  CHECK(run::config_diff(a.to_json(), a.to_json()).empty());
}

TEST_CASE("make-splits writes byte-identical files on rerun") {
  const fs::path out = temp_dir("splits");
  auto cfg = run::ExperimentConfig::from_json(tiny_config_json(out));
  cfg.dataset.fraction = "1/3";
  const auto files1 = run::cmd_make_splits(cfg, {1, 2, 3});
  REQUIRE(files1.size() == 6);
  std::vector<std::string> contents;
  for (const auto& f : files1) contents.push_back(read_file(f));
  const auto files2 = run::cmd_make_splits(cfg, {1, 2, 3});
  for (std::size_t i = 0; i < files1.size(); ++i) CHECK(read_file(files2[i]) == contents[i]);
  // each labeled list is class-covered by construction; spot-check sizes
  const auto ids = data::load_id_list(files1[0]);
  CHECK(ids.size() == 4);  // ceil(12/3)
  fs::remove_all(out);
}

TEST_CASE("run_train emits config echo, metrics stream and checkpoints") {
  const fs::path out = temp_dir("train");
  const auto cfg = run::ExperimentConfig::from_json(tiny_config_json(out));
  const auto outcome = run::run_train(cfg);
  CHECK(fs::exists(out / "config.json"));
  CHECK(fs::exists(out / "metrics.jsonl"));
  CHECK(fs::exists(out / "best.ckpt"));
  CHECK(fs::exists(out / "final.ckpt"));
  CHECK(fs::exists(out / "ckpt_3.ckpt"));

  // each metrics line carries the full loss/metric tuple
  std::ifstream metrics(out / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(metrics, line)) {
    const auto j = json::parse(line);
    for (const char* key : {"iteration", "l_s", "l_u", "l_x", "l_sa", "miou", "ece"})
      CHECK(j.contains(key));
    ++lines;
  }
  CHECK(lines == 2);  // iterations 6, eval every 3
  CHECK(outcome.final_eval.miou >= 0.0);
  CHECK(outcome.variant_ece.count("full") == 1);

  SUBCASE("identical rerun produces a byte-identical metrics stream") {
    const std::string first = read_file(out / "metrics.jsonl");
    run::run_train(cfg);
    CHECK(read_file(out / "metrics.jsonl") == first);
  }

  SUBCASE("eval on the final checkpoint reproduces the training-time eval") {
    const auto report = run::run_eval(out / "final.ckpt", cfg);
    CHECK(report["miou"].get<double>() == doctest::Approx(outcome.final_eval.miou));
    CHECK(report["ece"].get<double>() == doctest::Approx(outcome.final_eval.ece));
    CHECK(report["variant_ece"].size() == 7);
  }
  fs::remove_all(out);
}

TEST_CASE("checkpoint round-trip restores parameters exactly") {
  const fs::path dir = temp_dir("ckpt");
  net::ParamStore a, b;
  Rng rng = make_rng(5);
  a.add("x", net::he_normal({3, 4}, 3, rng));
  b.add("y", net::he_normal({2}, 2, rng));
  train::save_checkpoint(dir / "t.ckpt", a, b, "{\"cfg\":1}", 42);
  const auto ckpt = train::load_checkpoint(dir / "t.ckpt");
  CHECK(ckpt.iteration == 42);
  CHECK(ckpt.config_json == "{\"cfg\":1}");
  net::ParamStore a2;
  a2.add("x", Tensor({3, 4}));
  train::restore_params(a2, ckpt.theta);
  for (std::int64_t i = 0; i < 12; ++i) CHECK(a2.at(0).value[i] == a.at(0).value[i]);
  // shape mismatch is a data error
  net::ParamStore bad;
  bad.add("x", Tensor({4, 3}));
  CHECK_THROWS_AS(train::restore_params(bad, ckpt.theta), DataError);
  fs::remove_all(dir);
}

TEST_CASE("ablate smoke run asserts single-field sweeps and writes tables") {
  const fs::path out = temp_dir("ablate");
  auto cfg = run::ExperimentConfig::from_json(tiny_config_json(out));
  cfg.train.iterations = 2;
  cfg.train.eval_interval = 2;
  const auto rows = run::run_ablate(cfg, "sharpening");
  CHECK(rows.size() == 6);  // 2 arms x 3 seeds
  CHECK(fs::exists(out / "ablate_sharpening.json"));
  CHECK(fs::exists(out / "ablate_sharpening.csv"));
  std::set<std::string> arms;
  for (const auto& row : rows) arms.insert(row["arm"].get<std::string>());
  CHECK(arms.size() == 2);
  CHECK_THROWS_AS(run::run_ablate(cfg, "bogus_study"), ConfigError);
  fs::remove_all(out);
}

TEST_CASE("selftrain smoke run emits the three-row comparison") {
  const fs::path out = temp_dir("selftrain");
  auto cfg = run::ExperimentConfig::from_json(tiny_config_json(out));
  cfg.train.iterations = 3;
  cfg.train.eval_interval = 3;
  const auto result = run::run_selftrain(cfg);
  REQUIRE(result["table"].size() == 3);
  std::vector<std::string> methods;
  for (const auto& row : result["table"]) methods.push_back(row["method"].get<std::string>());
  CHECK(methods == std::vector<std::string>{"supervised_teacher", "selftrain_student",
                                            "pseudoseg"});
  CHECK(fs::exists(out / "selftrain.json"));
  CHECK(fs::exists(out / "offline_labels" / "manifest.json"));
  fs::remove_all(out);
}

#ifdef PSEUDOSEG_CLI_PATH
TEST_CASE("command-line interface end to end") {
  const fs::path out = temp_dir("clibin");
  const fs::path cfg_file = out / "config.json";
  {
    std::ofstream f(cfg_file);
    auto j = tiny_config_json(out / "run");
    f << j.dump(2);
  }
  const std::string cli = PSEUDOSEG_CLI_PATH;

  SUBCASE("train subcommand succeeds") {
    const int rc =
        std::system((cli + " train --config " + cfg_file.string() + " >/dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(rc) == 0);
    CHECK(fs::exists(out / "run" / "metrics.jsonl"));
  }
  SUBCASE("invalid config field exits with code 2") {
    const fs::path bad = out / "bad.json";
    {
      std::ofstream f(bad);
      auto j = tiny_config_json(out / "run2");
      j["train"]["bogus_field"] = 1;
      f << j.dump(2);
    }
    const int rc =
        std::system((cli + " train --config " + bad.string() + " >/dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(rc) == 2);
  }
  SUBCASE("make-splits writes id lists") {
    const int rc = std::system(
        (cli + " make-splits --config " + cfg_file.string() + " --out " + (out / "sp").string() +
         " >/dev/null 2>&1")
            .c_str());
    CHECK(WEXITSTATUS(rc) == 0);
    CHECK(fs::exists(out / "sp" / "labeled_1-3_seed1.txt"));
    CHECK(fs::exists(out / "sp" / "unlabeled_1-3_seed3.txt"));
  }
  fs::remove_all(out);
}
#endif
