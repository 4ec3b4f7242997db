#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "noop/data/generators.hpp"
#include "noop/harness/config.hpp"
#include "noop/harness/probe.hpp"
#include "noop/harness/report.hpp"
#include "noop/harness/runner.hpp"

namespace fs = std::filesystem;
namespace h = noop::harness;
namespace data = noop::data;
namespace nd = noop::nd;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("noop_harness_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Small enough that the whole stage list runs in about a second.
h::RunConfig tiny(const fs::path& out, const std::string& name) {
  auto c = h::parse_config_text(R"(
[data]
n_per_class = 12
size = 8
shots = 2
pretrain_per_class = 20
[denoiser]
epochs = 2
base = 4
emb = 8
seeds = 0,1
[dc]
instability_seeds = 2
ensemble_noises = 2
[noop]
epochs = 2
seeds = 0,1
[prompt]
epochs = 2
[transfer]
n_per_class = 5
[probe]
epochs = 2
min_clean_accuracy = 0
)");
  c.run.name = name;
  c.run.out_dir = out.string();
  return c;
}

}  // namespace

TEST(Config, DefaultsMatchDocumentedValues) {
  const h::RunConfig c;
  EXPECT_EQ(c.data.n_per_class, 200u);
  EXPECT_EQ(c.data.shots, 16u);
  EXPECT_EQ(c.denoiser.epochs, 30u);
  EXPECT_EQ(c.dc.t, 500u);
  EXPECT_EQ(c.noop.epochs, 20u);
  EXPECT_EQ(c.noop.batch, 32u);
  EXPECT_EQ(c.noop.lr_eps, 1e-2);
  EXPECT_EQ(c.noop.lr_meta, 1e-3);
  EXPECT_EQ(c.dc.ensemble_noises, 5u);
  EXPECT_EQ(c.run.stages, h::all_stages());
  EXPECT_NO_THROW(h::validate(c));
}

TEST(Config, SnapshotRoundTrips) {
  h::RunConfig c;
  h::apply_override(c, "noop.lr_eps=0.0375");
  h::apply_override(c, "denoiser.seeds = 4,9");
  h::apply_override(c, "run.precision=f64");
  h::apply_override(c, "noop.use_meta=false");
  const auto text = h::to_ini(c);
  EXPECT_EQ(h::to_ini(h::parse_config_text(text)), text);
  EXPECT_EQ(h::flatten(h::parse_config_text(text)), h::flatten(c));
}

TEST(Config, UnknownKeysAndSectionsAreRejected) {
  EXPECT_THROW(h::parse_config_text("[noop]\nepoch = 3\n"), h::ConfigError);
  EXPECT_THROW(h::parse_config_text("[nope]\nepochs = 3\n"), h::ConfigError);
  EXPECT_THROW(h::parse_config_text("epochs = 3\n"), h::ConfigError);
  h::RunConfig c;
  EXPECT_THROW(h::apply_override(c, "noop.epochs"), h::ConfigError);
  EXPECT_THROW(h::apply_override(c, "noop.epochs=many"), h::ConfigError);
  EXPECT_THROW(h::apply_override(c, "noop.use_meta=maybe"), h::ConfigError);
}

TEST(Config, RangeChecks) {
  for (const char* bad : {"[dc]\nt = 0\n", "[dc]\nt = 1001\n", "[data]\nsize = 12\n", "[data]\nshots = 200\n",
                          "[run]\nprecision = f16\n", "[run]\nname = a/b\n", "[data]\ngenerator = faces\n",
                          "[run]\nstages = gen-data,fly\n", "[schedule]\nbeta_start = 0.5\nbeta_end = 0.1\n"}) {
    EXPECT_THROW(h::parse_config_text(bad), h::ConfigError) << bad;
  }
}

TEST(Config, OverridesApplyInOrder) {
  h::RunConfig c;
  h::apply_override(c, "noop.epochs=3");
  h::apply_override(c, "noop.epochs=5");
  EXPECT_EQ(c.noop.epochs, 5u);
}

class ProbeTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto train = data::gen_shapes(150, 16, 3);
    test = new data::Dataset(data::gen_shapes(15, 16, 4));
    probe = new h::ProbeClassifier<float>(1, 16, 4, 5);
    h::train_probe(*probe, train, data::all_indices(train), {.epochs = 15, .batch = 32, .lr = 3e-3, .seed = 5});
    probe->certify(*test, data::all_indices(*test), 0.9);
  }
  static void TearDownTestSuite() {
    delete probe;
    delete test;
  }
  static double accuracy_at(double abar) {
    const auto idx = data::all_indices(*test);
    const auto x0 = data::to_tensor<float>(*test, idx);
    nd::Rng rng(9);
    const auto eps = rng.normal_tensor<float>(x0.shape());
    auto s = noop::diffusion::make_schedule(2);
    s.alpha_bar = {abar, abar};
    return noop::dc::accuracy(h::destruction_probe(*probe, s, x0, eps, 1).predicted, data::labels_of(*test, idx));
  }
  static inline data::Dataset* test = nullptr;
  static inline h::ProbeClassifier<float>* probe = nullptr;
};

TEST_F(ProbeTest, CleanLimitKeepsCleanAccuracy) {
  EXPECT_EQ(accuracy_at(1.0), *probe->clean_accuracy());
  EXPECT_GE(*probe->clean_accuracy(), 0.9);
}

TEST_F(ProbeTest, FullDestructionFallsToChance) {
  // Sixty images, four classes: a generous band around 1/4.
  EXPECT_LT(std::abs(accuracy_at(1e-12) - 0.25), 0.2);
}

TEST_F(ProbeTest, LogitsAndPredictionsAgree) {
  const auto out = probe->evaluate(data::to_tensor<float>(*test, data::all_indices(*test)));
  for (std::size_t i = 0; i < out.predicted.size(); ++i) {
    EXPECT_EQ(out.predicted[i], noop::dc::argmax_lowest(out.logits[i]));
  }
}

TEST(Probe, UncertifiedProbeIsRejected) {
  const h::ProbeClassifier<float> p(1, 8, 4, 1);
  const auto x = nd::Tensor<float>::zeros({2, 1, 8, 8});
  EXPECT_THROW(h::destruction_probe(p, noop::diffusion::make_schedule(), x, x, 500), std::logic_error);
}

TEST(Probe, CertifyThrowsBelowThreshold) {
  const auto ds = data::gen_shapes(10, 8, 1);
  h::ProbeClassifier<float> p(1, 8, 4, 1);
  EXPECT_THROW(p.certify(ds, data::all_indices(ds), 1.0), std::runtime_error);
  EXPECT_FALSE(p.clean_accuracy());
}

TEST(Runner, GenDataWritesDatasetSplitAndManifest) {
  const auto dir = fresh_dir("gen");
  const auto a = h::run_experiment(tiny(dir, "g"), {"gen-data"});
  const auto ds = data::load_dataset(a.dataset());
  EXPECT_EQ(ds.size(), 48u);
  EXPECT_EQ(h::read_file(a.dataset().string()).substr(0, 4), "NDS1");
  const auto split = h::read_csv(a.split().string());
  EXPECT_EQ(split.size(), 49u);
  const auto manifest = nlohmann::json::parse(h::read_file(a.manifest().string()));
  EXPECT_EQ(manifest["stages"].size(), 1u);
  EXPECT_EQ(manifest["stages"][0]["stage"], "gen-data");
  EXPECT_EQ(manifest["config"]["data.shots"], "2");
  EXPECT_TRUE(fs::exists(a.config()));
}

TEST(Runner, MissingPrerequisiteIsExplicit) {
  const auto dir = fresh_dir("missing");
  try {
    h::run_experiment(tiny(dir, "m"), {"eval-dc"});
    FAIL() << "expected MissingArtifact";
  } catch (const h::MissingArtifact& e) {
    EXPECT_NE(std::string(e.what()).find("gen-data"), std::string::npos);
  }
  h::run_experiment(tiny(dir, "m"), {"gen-data"});
  EXPECT_THROW(h::run_experiment(tiny(dir, "m"), {"eval-dc"}), h::MissingArtifact);
}

TEST(Runner, ReportOnEmptyRunIsAnError) {
  const auto dir = fresh_dir("empty");
  EXPECT_THROW(h::write_report(h::RunArtifacts{dir / "nothing"}), h::MissingArtifact);
  const auto a = h::run_experiment(tiny(dir, "e"), {"gen-data"});
  EXPECT_THROW(h::write_report(a), h::MissingArtifact);
}

TEST(Runner, ChangedConfigNeedsForce) {
  const auto dir = fresh_dir("force");
  auto c = tiny(dir, "f");
  h::run_experiment(c, {"gen-data"});
  c.data.seed = 99;
  EXPECT_THROW(h::run_experiment(c, {"gen-data"}), h::ConfigError);
  EXPECT_NO_THROW(h::run_experiment(c, {"gen-data"}, {.force = true}));
}

TEST(Runner, UnknownStageIsConfigError) {
  EXPECT_THROW(h::run_experiment(tiny(fresh_dir("unknown"), "u"), {"fly"}), h::ConfigError);
}

TEST(Runner, FullTinyRunIsDeterministicAndSkipsFinishedStages) {
  const auto dir = fresh_dir("det");
  const auto c = tiny(dir / "unused", "r");
  ::setenv("NOOP_RUNS_DIR", (dir / "two").c_str(), 1);
  const auto b = h::run_experiment(c, h::all_stages());
  ::setenv("NOOP_RUNS_DIR", (dir / "one").c_str(), 1);
  const auto a = h::run_experiment(c, h::all_stages());
  for (const auto& f : {a.metrics(), a.losses(), a.spectral(), a.stats(), a.manifest(), a.config()}) {
    const auto rel = fs::relative(f, a.root);
    EXPECT_EQ(h::read_file(f.string()), h::read_file((b.root / rel).string())) << rel;
  }
  const auto before = fs::last_write_time(a.stage_file("train-noop", "done"));
  const auto timing = h::read_file(a.timing().string());
  h::run_experiment(c, {"train-noop", "eval-noop"});
  ::unsetenv("NOOP_RUNS_DIR");
  EXPECT_EQ(fs::last_write_time(a.stage_file("train-noop", "done")), before);
  EXPECT_EQ(h::read_file(a.timing().string()), timing);

  // Header plus one row per (method, seed, test image); every score row
  // carries one distance per class.
  const auto tab = h::read_metrics(a.metrics());
  for (const auto& r : tab.rows) EXPECT_EQ(r.d.size(), 4u);
  EXPECT_EQ(tab.accuracy_by_seed("zero-shot").size(), 2u);
  const auto rows = h::write_report(a);
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows.front().method, "zero-shot");
  for (const auto& r : rows) {
    for (const auto& [seed, acc] : r.accuracy) EXPECT_EQ(tab.accuracy(r.method, seed), acc);
  }
}

TEST(Runner, ForceRerunsDownstreamStages) {
  const auto dir = fresh_dir("downstream");
  const auto c = tiny(dir, "d");
  const auto a = h::run_experiment(c, {"gen-data", "train-denoiser", "eval-dc"});
  fs::remove(a.stage_file("eval-dc", "metrics.csv"));
  h::run_experiment(c, {"train-denoiser"}, {.force = true});
  EXPECT_FALSE(a.done("eval-dc"));
  EXPECT_TRUE(a.done("gen-data"));
}

TEST(Runner, RunsDirEnvironmentOverride) {
  const auto dir = fresh_dir("env");
  ::setenv("NOOP_RUNS_DIR", (dir / "elsewhere").c_str(), 1);
  const auto a = h::run_experiment(tiny(dir / "ignored", "x"), {"gen-data"});
  ::unsetenv("NOOP_RUNS_DIR");
  EXPECT_EQ(a.root, dir / "elsewhere" / "x");
  EXPECT_TRUE(fs::exists(a.dataset()));
}

TEST(Runner, DeletedArtifactRerunsOnlyItsStage) {
  const auto dir = fresh_dir("isolation");
  const auto c = tiny(dir, "i");
  const auto a = h::run_experiment(c, {"gen-data", "train-denoiser", "eval-dc"});
  const auto ckpt = h::read_file(a.ckpt("denoiser", 1).string());
  const auto gen = fs::last_write_time(a.stage_file("gen-data", "done"));
  const auto eval = fs::last_write_time(a.stage_file("eval-dc", "done"));
  fs::remove(a.ckpt("denoiser", 1));
  EXPECT_FALSE(a.done("train-denoiser"));
  EXPECT_TRUE(a.done("eval-dc"));
  h::run_experiment(c, {"gen-data", "train-denoiser", "eval-dc"});
  EXPECT_EQ(h::read_file(a.ckpt("denoiser", 1).string()), ckpt);
  EXPECT_EQ(fs::last_write_time(a.stage_file("gen-data", "done")), gen);
  EXPECT_EQ(fs::last_write_time(a.stage_file("eval-dc", "done")), eval);
}

TEST(Runner, InstabilitySummaryMatchesScoreRows) {
  const auto dir = fresh_dir("instability");
  const auto a = h::run_experiment(tiny(dir, "s"), {"gen-data", "train-denoiser", "instability"});
  const auto tab = h::read_metrics(a.metrics());
  const auto csv = h::read_csv(a.instability().string());
  ASSERT_EQ(csv.size(), 3u);
  for (std::size_t i = 1; i < csv.size(); ++i) {
    const auto acc = tab.accuracy_by_seed(csv[i][0]);
    ASSERT_EQ(acc.size(), 2u);
    const double mean = (acc.at(0) + acc.at(1)) / 2;
    EXPECT_DOUBLE_EQ(h::parse_number<double>(csv[i][2], "mean"), mean);
    EXPECT_DOUBLE_EQ(h::parse_number<double>(csv[i][3], "std"), std::abs(acc.at(0) - acc.at(1)) / 2);
    const double flip = h::parse_number<double>(csv[i][4], "flip");
    EXPECT_GE(flip, 0.0);
    EXPECT_LE(flip, 1.0);
  }
}
