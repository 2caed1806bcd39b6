#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

namespace fs = std::filesystem;

namespace {

fs::path Scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("chemcpa_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int RunCli(const std::string& args) {
  const std::string cmd = std::string(CHEMCPA_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kSmall = "--n-genes 10 --n-drugs 3 --cells-per-combo 8 --fingerprint-dim 32";

}  // namespace

TEST(Cli, SynthIsReproducible) {
  const auto dir = Scratch("synth");
  ASSERT_EQ(RunCli("synth --seed 5 " + std::string(kSmall) + " --out " + (dir / "a").string()), 0);
  ASSERT_EQ(RunCli("synth --seed 5 " + std::string(kSmall) + " --out " + (dir / "b").string()), 0);
  EXPECT_EQ(Slurp(dir / "a" / "dataset.csv"), Slurp(dir / "b" / "dataset.csv"));
  EXPECT_EQ(Slurp(dir / "a" / "ground_truth.json"), Slurp(dir / "b" / "ground_truth.json"));
  EXPECT_TRUE(fs::exists(dir / "a" / "run_config.json"));
}

TEST(Cli, TrainEvalProbePipeline) {
  const auto dir = Scratch("pipe");
  const std::string data = (dir / "synth" / "dataset.csv").string();
  ASSERT_EQ(RunCli("synth --seed 2 " + std::string(kSmall) + " --out " + (dir / "synth").string()), 0);
  const fs::path cfg = dir / "cfg.json";
  std::ofstream(cfg) << R"({"hparams": {"latent_dim": 4, "autoencoder_width": 8, "autoencoder_depth": 1,
                            "adversary_width": 8, "adversary_depth": 1, "embedding_dim": 16,
                            "embedding_encoder_width": 8, "embedding_encoder_depth": 1}})";
  ASSERT_EQ(RunCli("train --seed 2 --epochs 2 --config " + cfg.string() + " --data " + data + " --out " +
                (dir / "train").string()),
            0);
  const std::string ckpt = (dir / "train" / "model.ckpt").string();
  const std::string split = (dir / "train" / "dataset.csv").string();
  ASSERT_TRUE(fs::exists(ckpt));
  EXPECT_TRUE(fs::exists(dir / "train" / "training_log.csv"));
  ASSERT_EQ(RunCli("eval --checkpoint " + ckpt + " --data " + split + " --out " + (dir / "eval").string()), 0);
  const auto summary = nlohmann::json::parse(Slurp(dir / "eval" / "summary.json"));
  EXPECT_FALSE(summary.empty());
  EXPECT_EQ(Slurp(dir / "eval" / "scores.csv").rfind("drug,dose,covariate", 0), 0u);
  ASSERT_EQ(RunCli("probe --seed 1 --epochs 2 --target covariate --checkpoint " + ckpt + " --data " + split +
                " --out " + (dir / "probe").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "probe" / "probe_covariate.json"));
}

TEST(Cli, ExitCodes) {
  const auto dir = Scratch("codes");
  EXPECT_EQ(RunCli("eval --data x.csv --out " + dir.string()), 1);  // --checkpoint missing
  EXPECT_EQ(RunCli("synth --out " + dir.string()), 1);                // seed missing
  EXPECT_EQ(RunCli("no-such-command"), 1);
  EXPECT_EQ(RunCli("eval --checkpoint " + (dir / "none.ckpt").string() + " --data " + (dir / "none.csv").string() +
                " --out " + dir.string()),
            2);
  EXPECT_EQ(RunCli("fingerprint --smiles C1CC"), 2);
  EXPECT_EQ(RunCli("fingerprint --smiles CCO --dim 64"), 0);
}
