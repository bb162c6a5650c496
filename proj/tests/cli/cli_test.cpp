#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "dstod/downstream.hpp"
#include "synthetic.hpp"

namespace fs = std::filesystem;
using namespace dstod;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  static fs::path dir;

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / ("dstod_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir / "data");
    synth::WorldOptions wo;
    wo.domains = {"taxi", "hotel"};
    wo.slots_per_domain = 2;
    wo.values_per_slot = 4;
    wo.aliases_per_value = 1;
    const auto world = synth::make_world(wo);
    const auto taxi = synth::make_dialogs(world, {"taxi"}, 12, 6, 6, 3);
    save_dialogs(dir / "data" / "train.jsonl", taxi.train);
    save_dialogs(dir / "data" / "dev.jsonl", taxi.dev);
    save_dialogs(dir / "data" / "test.jsonl", taxi.test);
    world.ontology.save(dir / "data" / "ontology.json");
    save_comments(dir / "comments.jsonl", synth::make_comments(world, "taxi", 60, 4));
    std::ofstream dump(dir / "dump.txt");
    for (const auto& line : synth::make_flat_corpus(world, 200, 5)) dump << line.text << '\n';
  }

  static void TearDownTestSuite() { fs::remove_all(dir); }

  Outcome run(const std::string& args) {
    const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = std::string(DSTOD_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  /// Last stdout line: the output path printed by a stage.
  static fs::path printed(const Outcome& o) {
    auto s = o.out;
    while (!s.empty() && s.back() == '\n') s.pop_back();
    return s.substr(s.rfind('\n') == std::string::npos ? 0 : s.rfind('\n') + 1);
  }
};

fs::path CliTest::dir;

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("extract-terms --domain taxi").code, 2);
  EXPECT_EQ(run("pretrain --corpus x --objective nope").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(CliTest, StageErrorIsStructured) {
  const auto o = run("extract-terms --dialogs missing.jsonl --domain taxi --out " + (dir / "runs").string());
  EXPECT_EQ(o.code, 1);
  const auto j = nlohmann::json::parse(o.err);
  EXPECT_EQ(j.at("error"), "io");
  EXPECT_NE(j.at("message").get<std::string>().find("missing.jsonl"), std::string::npos);
}

TEST_F(CliTest, ExtractTermsDeterministicAndCached) {
  const auto args = "extract-terms --dialogs " + (dir / "data" / "train.jsonl").string() + " --domain taxi --top-n 10";
  const auto a = run(args + " --out " + (dir / "ra").string());
  const auto b = run(args + " --out " + (dir / "rb").string());
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(printed(a).filename(), printed(b).filename());
  EXPECT_EQ(slurp(printed(a)), slurp(printed(b)));
  const auto again = run(args + " --out " + (dir / "ra").string());
  EXPECT_EQ(again.code, 0);
  EXPECT_NE(again.out.find("up to date"), std::string::npos);
  const auto prov = nlohmann::json::parse(slurp(printed(a).parent_path() / "provenance.json"));
  EXPECT_EQ(prov.at("config").at("top-n"), 10);
  EXPECT_TRUE(prov.at("outputs").contains("terms.json"));
  EXPECT_TRUE(prov.at("inputs").contains("dialogs"));
}

TEST_F(CliTest, ConfigFileAndFlagPrecedence) {
  std::ofstream(dir / "cfg.json") << R"({"top-n": 5, "domain": "taxi"})";
  const auto base = "extract-terms --dialogs " + (dir / "data" / "train.jsonl").string() + " --config " +
                    (dir / "cfg.json").string() + " --out " + (dir / "rc").string();
  const auto from_file = run(base);
  ASSERT_EQ(from_file.code, 0) << from_file.err;
  EXPECT_EQ(DomainTermSet::load(printed(from_file)).top_n, 5u);
  const auto overridden = run(base + " --top-n 7");
  ASSERT_EQ(overridden.code, 0) << overridden.err;
  EXPECT_EQ(DomainTermSet::load(printed(overridden)).top_n, 7u);
}

TEST_F(CliTest, GradCheckCorruptHookFails) {
  const auto ok = run("grad-check --out " + (dir / "rg").string());
  EXPECT_EQ(ok.code, 0) << ok.err;
  const auto bad = run("grad-check --corrupt rr.weight --out " + (dir / "rg").string());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("rr/rr.weight"), std::string::npos);
}

TEST_F(CliTest, PipelineEndToEnd) {
  const auto out = " --out " + (dir / "rp").string();
  const auto terms = run("extract-terms --dialogs " + (dir / "data" / "train.jsonl").string() +
                         " --domain taxi --top-n 20" + out);
  ASSERT_EQ(terms.code, 0) << terms.err;

  const auto cc = run("build-corpus cc --terms " + printed(terms).string() + " --input " +
                      (dir / "dump.txt").string() + " --target 50" + out);
  ASSERT_EQ(cc.code, 0) << cc.err;
  EXPECT_FALSE(load_corpus(printed(cc)).empty());

  const auto reddit = run("build-corpus reddit --terms " + printed(terms).string() + " --comments " +
                          (dir / "comments.jsonl").string() + out);
  ASSERT_EQ(reddit.code, 0) << reddit.err;
  const auto triples = load_triples(printed(reddit));
  ASSERT_GT(triples.size(), 10u);

  const std::string small = " --layers 1 --hidden 16 --heads 2 --ffn 32 --max-len 48 --epochs 1 --lr 1e-3";
  const auto plm = run("pretrain --objective mlm --corpus " + printed(cc).string() + small + out);
  ASSERT_EQ(plm.code, 0) << plm.err;
  EXPECT_TRUE(fs::exists(printed(plm) / "vocab.json"));

  const auto bank = run("pretrain --objective rs-contrast --corpus " + printed(reddit).string() + " --init " +
                        printed(plm).string() + " --adapter-domain taxi --bottleneck 8 --epochs 1 --lr 1e-3" + out);
  ASSERT_EQ(bank.code, 0) << bank.err;
  EXPECT_EQ(load_bank<float>(printed(bank)).domain, "taxi");

  const auto ft = run("finetune --task dst --ckpt " + printed(plm).string() + " --adapters " +
                      printed(bank).string() + " --data " + (dir / "data").string() +
                      " --domains taxi --epochs 1 --lr 1e-3" + out);
  ASSERT_EQ(ft.code, 0) << ft.err;
  const auto ft_dir = (dir / "rp");
  fs::path ft_run;
  for (const auto& e : fs::directory_iterator(ft_dir))
    if (e.path().filename().string().rfind("finetune-", 0) == 0) ft_run = e.path();
  ASSERT_FALSE(ft_run.empty());
  const auto reports = nlohmann::json::parse(slurp(ft_run / "reports.json"));
  ASSERT_EQ(reports.size(), 2u);
  const auto test_report = EvalReport::from_json(reports[0]);
  EXPECT_EQ(test_report.metric, "jga");

  const auto ev = run("evaluate --model " + (ft_run / "model").string() + " --data " + (dir / "data").string() +
                      " --domains taxi" + out);
  ASSERT_EQ(ev.code, 0) << ev.err;
  fs::path ev_run;
  for (const auto& e : fs::directory_iterator(ft_dir))
    if (e.path().filename().string().rfind("evaluate-", 0) == 0) ev_run = e.path();
  ASSERT_FALSE(ev_run.empty());
  const auto ev_report = EvalReport::from_json(nlohmann::json::parse(slurp(ev_run / "reports.json"))[0]);
  EXPECT_EQ(ev_report.n_items, test_report.n_items);
  EXPECT_NEAR(ev_report.value, test_report.value, 1e-12);

  const auto rep = run("report --format json " + ft_run.string());
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(nlohmann::json::parse(rep.out).size(), 2u);
}

}  // namespace
