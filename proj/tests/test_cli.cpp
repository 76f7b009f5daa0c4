#include "ubench/cli.hpp"
#include "ubench/pipeline.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

using namespace ubench;
namespace fs = std::filesystem;

namespace {

int invoke(std::initializer_list<std::string> args) {
    std::vector<std::string> storage{"ubench"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& s : storage) argv.push_back(s.c_str());
    return cli::run(static_cast<int>(argv.size()), argv.data());
}

struct CliTest : ::testing::Test {
    fs::path dir;
    fs::path config;

    void SetUp() override {
        dir = fs::temp_directory_path() /
              ("ubench_test_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
        config = dir / "tiny.yaml";
        std::ofstream(config) << "schema_version: 1\n"
                                 "# tiny problem\n"
                                 "trials: 2\n"
                                 "data_seeds: 1\n"
                                 "epochs: 3\n"
                                 "batch_size: 32\n"
                                 "measures: [entropy, largest]\n"
                                 "dataset.classes: 4\n"
                                 "dataset.per_class: 30\n"
                                 "dataset.test_per_class: 10\n"
                                 "dataset.dim: 4\n"
                                 "workers: 1\n";
        cli::stop_flag().store(false);
    }
    fs::path out() const { return dir / "out"; }
};

}  // namespace

TEST_F(CliTest, UnknownFlagIsUsageError) {
    EXPECT_EQ(invoke({"sweep", "--config", config.string(), "--bogus"}), cli::kExitConfig);
    EXPECT_EQ(invoke({"frobnicate"}), cli::kExitConfig);
    EXPECT_EQ(invoke({}), cli::kExitConfig);
}

TEST_F(CliTest, MissingConfigIsExitTwo) {
    EXPECT_EQ(invoke({"partition", "--out", out().string()}), cli::kExitConfig);
    EXPECT_EQ(invoke({"sweep", "--config", (dir / "absent.yaml").string()}), cli::kExitConfig);
}

TEST_F(CliTest, BadConfigOrOverrideIsExitTwo) {
    std::ofstream(dir / "bad.yaml") << "schema_version: 1\ntrails: 2\n";
    EXPECT_EQ(invoke({"partition", "-c", (dir / "bad.yaml").string(), "-o", out().string()}), cli::kExitConfig);
    EXPECT_EQ(invoke({"partition", "-c", config.string(), "-o", out().string(), "--set", "nokey=1"}),
              cli::kExitConfig);
    EXPECT_FALSE(fs::exists(out()));
}

TEST_F(CliTest, PartitionWritesUnderOut) {
    ASSERT_EQ(invoke({"partition", "--config", config.string(), "--out", out().string()}), cli::kExitOk);
    EXPECT_TRUE(fs::exists(out() / "partition" / "partition.txt"));
    EXPECT_TRUE(fs::exists(out() / "partition" / "pool.csv"));
    EXPECT_TRUE(fs::exists(out() / "partition" / "test.csv"));
    EXPECT_TRUE(fs::exists(out() / "config.yaml"));
}

TEST_F(CliTest, OverrideBeatsConfigFile) {
    ASSERT_EQ(invoke({"partition", "-c", config.string(), "-o", out().string(), "--set", "trials=1"}), cli::kExitOk);
    const auto resolved = pipeline::load_config(out() / "config.yaml");
    EXPECT_EQ(resolved.trials, 1u);
    EXPECT_EQ(resolved.output_dir, out());
}

TEST_F(CliTest, ReportOnEmptyOutIsExitTwo) {
    fs::create_directories(out());
    EXPECT_EQ(invoke({"report", "--out", out().string()}), cli::kExitConfig);
    EXPECT_EQ(invoke({"report"}), cli::kExitConfig);
    EXPECT_EQ(invoke({"evaluate", "-c", config.string(), "-o", out().string()}), cli::kExitConfig);
}

TEST_F(CliTest, SweepThenReportProducesBothTables) {
    ASSERT_EQ(invoke({"sweep", "-c", config.string(), "-o", out().string()}), cli::kExitOk);
    for (const char* f : {"in_domain.txt", "out_domain.txt", "in_domain.csv", "out_domain.csv", "in_domain.tex",
                          "out_domain.tex"})
        fs::remove(out() / "report" / f);
    ASSERT_EQ(invoke({"report", "--out", out().string()}), cli::kExitOk);
    for (const char* f : {"in_domain.txt", "out_domain.txt", "in_domain.csv", "out_domain.csv", "in_domain.tex",
                          "out_domain.tex"})
        EXPECT_TRUE(fs::exists(out() / "report" / f)) << f;
    EXPECT_TRUE(fs::exists(out() / "eval.jsonl"));
    EXPECT_TRUE(fs::exists(out() / "eval_summary.json"));
    EXPECT_TRUE(fs::exists(out() / "runs.jsonl"));
}

TEST_F(CliTest, RerunIsByteIdentical) {
    ASSERT_EQ(invoke({"sweep", "-c", config.string(), "-o", out().string()}), cli::kExitOk);
    auto slurp = [](const fs::path& p) {
        std::ifstream is(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(is), {});
    };
    const auto before = slurp(out() / "report" / "out_domain.tex");
    const auto times = fs::last_write_time(out() / "checkpoints");
    ASSERT_EQ(invoke({"sweep", "-c", config.string(), "-o", out().string()}), cli::kExitOk);
    EXPECT_EQ(slurp(out() / "report" / "out_domain.tex"), before);
    EXPECT_EQ(fs::last_write_time(out() / "checkpoints"), times);
    ASSERT_EQ(invoke({"evaluate", "-c", config.string(), "-o", out().string()}), cli::kExitOk);
    EXPECT_EQ(slurp(out() / "report" / "out_domain.tex"), before);
}

TEST_F(CliTest, TrainSingleRun) {
    ASSERT_EQ(invoke({"train", "-c", config.string(), "-o", out().string(), "--algorithm", "mixup", "--trial", "1"}),
              cli::kExitOk);
    const auto records = pipeline::load_run_records(out());
    ASSERT_EQ(records.size(), 1u);
    EXPECT_EQ(records[0].key.algorithm, algo::Algorithm::mixup);
    EXPECT_EQ(records[0].key.trial, 1u);
    EXPECT_EQ(records[0].status, pipeline::RunStatus::done);
    EXPECT_EQ(invoke({"train", "-c", config.string(), "-o", out().string(), "--algorithm", "nope"}),
              cli::kExitConfig);
}

TEST_F(CliTest, StopFlagStopsBeforeTraining) {
    cli::stop_flag().store(true);
    EXPECT_EQ(invoke({"sweep", "-c", config.string(), "-o", out().string()}), cli::kExitPartial);
    cli::stop_flag().store(false);
    EXPECT_FALSE(fs::exists(out() / "eval.jsonl"));
    EXPECT_EQ(invoke({"sweep", "-c", config.string(), "-o", out().string()}), cli::kExitOk);
}

TEST_F(CliTest, SelftestPasses) { EXPECT_EQ(invoke({"selftest"}), cli::kExitOk); }
