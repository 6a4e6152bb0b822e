#include <gtest/gtest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"

namespace fs = std::filesystem;
using compass::cli::run;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::path(testing::TempDir()) / ("compass_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int count_arrows(const std::string& dot) {
    int n = 0;
    std::istringstream in(dot);
    std::string line;
    while (std::getline(in, line)) {
        if (line.find(" -> ") != std::string::npos) {
            ++n;
        }
    }
    return n;
}

const std::string kData = COMPASS_TEST_DATA_DIR;

// Small dataset plus a short training run shared by the pipeline tests.
class CliPipeline : public testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = fresh_dir("pipeline");
        const std::string d = (root_ / "data").string();
        ASSERT_EQ(run({"gen-data", "--data-dir", kData, "--roles", "Location", "--partner-roles", "Instrument,Location",
                       "--n", "60", "--seed", "7", "--out", d}),
                  0);
        ASSERT_EQ(run({"train", "--data", d, "--out", (root_ / "ck").string(), "--steps", "60", "--checkpoints",
                       "0,15,30,45,60", "--layers", "1", "--heads", "2", "--d-model", "16", "--d-head", "8",
                       "--d-mlp", "32", "--lr", "1e-2", "--seed", "1"}),
                  0);
    }
    static fs::path root_;
};

fs::path CliPipeline::root_;

}  // namespace

TEST(CheckpointGrid, DefaultGridAtFullLength) {
    EXPECT_EQ(compass::cli::default_checkpoint_grid(8000), (std::vector<int>{0, 8, 32, 128, 512, 2000, 8000}));
}

TEST(CheckpointGrid, ZeroStepsGivesInitialOnly) {
    EXPECT_EQ(compass::cli::default_checkpoint_grid(0), (std::vector<int>{0}));
}

TEST(CheckpointGrid, ScaledGridIsStrictlyIncreasingAndEndsAtTotal) {
    for (int total : {1, 7, 100, 2000, 16000}) {
        const auto g = compass::cli::default_checkpoint_grid(total);
        EXPECT_EQ(g.front(), 0);
        EXPECT_EQ(g.back(), total);
        for (std::size_t i = 1; i < g.size(); ++i) {
            EXPECT_LT(g[i - 1], g[i]);
        }
    }
}

TEST(Digest, Sha256KnownVectors) {
    EXPECT_EQ(compass::cli::sha256_bytes("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(compass::cli::sha256_bytes(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Digest, DirectoryDigestIgnoresManifestAndTracksContent) {
    const fs::path d = fresh_dir("digest");
    std::ofstream(d / "a.txt") << "one";
    const std::string before = compass::cli::directory_digest(d);
    std::ofstream(d / "manifest.json") << "{}";
    EXPECT_EQ(compass::cli::directory_digest(d), before);
    std::ofstream(d / "a.txt") << "two";
    EXPECT_NE(compass::cli::directory_digest(d), before);
}

TEST(ExitCodes, MissingLexiconIsInputError) {
    const fs::path d = fresh_dir("nolex");
    EXPECT_EQ(run({"gen-data", "--lexicon", (d / "absent.json").string(), "--templates",
                   kData + "/templates.json", "--out", (d / "o").string()}),
              2);
}

TEST(ExitCodes, UnknownFlagAndMissingSubcommand) {
    EXPECT_EQ(run({"train", "--no-such-flag"}), 2);
    EXPECT_EQ(run({}), 2);
}

TEST(ExitCodes, HelpIsZero) {
    EXPECT_EQ(run({"--help"}), 0);
}

TEST(ExitCodes, CorruptCheckpointIsSchemaViolation) {
    const fs::path d = fresh_dir("badckpt");
    std::ofstream(d / "bad.ckpt") << "not a checkpoint";
    std::ofstream(d / "p.jsonl") << "";
    std::ofstream(d / "v.txt") << "a\n";
    EXPECT_EQ(run({"attribute", "--checkpoint", (d / "bad.ckpt").string(), "--pairs", (d / "p.jsonl").string(),
                   "--vocab", (d / "v.txt").string(), "--out", (d / "o").string()}),
              4);
}

TEST(ExitCodes, MalformedTimelineIsSchemaViolation) {
    const fs::path d = fresh_dir("badtl");
    std::ofstream(d / "t.csv") << "role,step\nLocation,0\n";
    EXPECT_EQ(run({"emerge", "--timeline", (d / "t.csv").string(), "--out", (d / "o").string()}), 4);
}

TEST(ExitCodes, BadChoiceIsInputError) {
    const fs::path d = fresh_dir("badchoice");
    std::ofstream(d / "t.csv") << "x";
    EXPECT_EQ(run({"emerge", "--timeline", (d / "t.csv").string(), "--ind-mode", "maybe", "--out",
                   (d / "o").string()}),
              2);
}

TEST_F(CliPipeline, GenDataWritesAllArtifacts) {
    for (const char* f : {"vocab.txt", "corpus.txt", "pairs.jsonl", "stats.json", "manifest.json"}) {
        EXPECT_TRUE(fs::exists(root_ / "data" / f)) << f;
    }
    const json stats = json::parse(slurp(root_ / "data" / "stats.json"));
    EXPECT_EQ(stats["per_role"]["Location"], 60);
    EXPECT_EQ(stats["leakage_rate"], 0.0);
}

TEST_F(CliPipeline, TrainWritesRequestedCheckpoints) {
    for (const char* f : {"step_00000000.ckpt", "step_00000015.ckpt", "step_00000030.ckpt", "step_00000045.ckpt",
                          "step_00000060.ckpt", "train_log.csv"}) {
        EXPECT_TRUE(fs::exists(root_ / "ck" / f)) << f;
    }
}

TEST_F(CliPipeline, ZeroStepsWritesSingleCheckpoint) {
    const fs::path out = root_ / "ck0";
    ASSERT_EQ(run({"train", "--data", (root_ / "data").string(), "--out", out.string(), "--steps", "0", "--layers",
                   "1", "--heads", "2", "--d-model", "16", "--d-mlp", "32"}),
              0);
    int n = 0;
    for (const auto& e : fs::directory_iterator(out)) {
        n += e.path().extension() == ".ckpt";
    }
    EXPECT_EQ(n, 1);
    EXPECT_TRUE(fs::exists(out / "step_00000000.ckpt"));
}

TEST_F(CliPipeline, VersionMismatchIsExitThree) {
    const fs::path d = fresh_dir("vers");
    std::string bytes = slurp(root_ / "ck" / "step_00000000.ckpt");
    bytes[8] = static_cast<char>(99);
    std::ofstream(d / "v.ckpt", std::ios::binary) << bytes;
    EXPECT_EQ(run({"attribute", "--checkpoint", (d / "v.ckpt").string(), "--pairs",
                   (root_ / "data" / "pairs.jsonl").string(), "--vocab", (root_ / "data" / "vocab.txt").string(),
                   "--out", (d / "o").string()}),
              3);
}

TEST_F(CliPipeline, TimelineIsThreadIndependentAndReplays) {
    const auto timeline = [&](const std::string& out, const std::string& threads) {
        return run({"--threads", threads, "timeline", "--checkpoints", (root_ / "ck").string(), "--pairs",
                    (root_ / "data" / "pairs.jsonl").string(), "--vocab", (root_ / "data" / "vocab.txt").string(),
                    "--role", "Location", "--no-filter", "--max-pairs", "8", "--topk", "40", "--n-boot", "50",
                    "--min-seg", "2", "--out", out});
    };
    const fs::path a = root_ / "tl_a";
    const fs::path b = root_ / "tl_b";
    ASSERT_EQ(timeline(a.string(), "1"), 0);
    ASSERT_EQ(timeline(b.string(), "3"), 0);
    EXPECT_EQ(compass::cli::directory_digest(a), compass::cli::directory_digest(b));
    const auto portable = [](const fs::path& dir) {
        json m = json::parse(slurp(dir / "manifest.json"));
        m.erase("argv");
        m["config"].erase("out");
        return m;
    };
    EXPECT_EQ(portable(a), portable(b));
    for (const char* f : {"timeline.csv", "emergence.json", "graph_step_0.json", "graph_step_60.json"}) {
        EXPECT_TRUE(fs::exists(a / f)) << f;
    }
    EXPECT_EQ(run({"replay", (a / "manifest.json").string(), "--out", (root_ / "tl_c").string(), "--check"}), 0);

    ASSERT_EQ(run({"emerge", "--timeline", (a / "timeline.csv").string(), "--n-boot", "50", "--min-seg", "2",
                   "--out", (root_ / "em").string()}),
              0);
    const json em = json::parse(slurp(root_ / "em" / "emergence.json"));
    EXPECT_TRUE(em.contains("t_det"));
    EXPECT_TRUE(em.contains("t_ind"));
    EXPECT_TRUE(em.contains("t_cons"));

    ASSERT_EQ(run({"compare", a.string(), b.string(), "--out", (root_ / "cmp").string()}), 0);
    const json cmp = json::parse(slurp(root_ / "cmp" / "similarity.json"));
    EXPECT_EQ(cmp["mean_over_common_steps"]["n_steps"], 5);
    EXPECT_DOUBLE_EQ(cmp["mean_over_common_steps"]["node_jaccard"].get<double>(), 1.0);
}

TEST_F(CliPipeline, ReplayRejectsChangedInput) {
    const fs::path d = fresh_dir("replay_changed");
    fs::copy_file(root_ / "data" / "vocab.txt", d / "vocab.txt");
    const fs::path g = root_ / "attr_for_replay";
    ASSERT_EQ(run({"attribute", "--checkpoint", (root_ / "ck" / "step_00000060.ckpt").string(), "--pairs",
                   (root_ / "data" / "pairs.jsonl").string(), "--vocab", (d / "vocab.txt").string(), "--no-filter",
                   "--max-pairs", "4", "--out", g.string()}),
              0);
    std::ofstream(d / "vocab.txt", std::ios::app) << "extra\n";
    EXPECT_EQ(run({"replay", (g / "manifest.json").string(), "--out", (d / "o").string()}), 2);
}

TEST_F(CliPipeline, RenderKeepsAllEdgesOfSmallCircuit) {
    const fs::path at = root_ / "attr5";
    ASSERT_EQ(run({"attribute", "--checkpoint", (root_ / "ck" / "step_00000060.ckpt").string(), "--pairs",
                   (root_ / "data" / "pairs.jsonl").string(), "--vocab", (root_ / "data" / "vocab.txt").string(),
                   "--no-filter", "--max-pairs", "8", "--topk", "5", "--out", at.string()}),
              0);
    ASSERT_EQ(run({"render", "--graph", (at / "graph_step_60.json").string(), "--out", (root_ / "r5").string()}), 0);
    EXPECT_EQ(count_arrows(slurp(root_ / "r5" / "causal_flow.dot")), 5);
}
