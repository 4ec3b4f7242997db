#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "noop/data/dataset.hpp"
#include "noop/data/generators.hpp"
#include "noop/dc/classifier.hpp"
#include "noop/diffusion/denoiser.hpp"
#include "noop/diffusion/train.hpp"
#include "noop/harness/config.hpp"
#include "noop/harness/probe.hpp"
#include "noop/harness/text.hpp"
#include "noop/nd/checkpoint.hpp"
#include "noop/optim/noop.hpp"
#include "noop/optim/prompt.hpp"
#include "noop/spectral/spectral.hpp"

namespace noop::harness {

namespace fs = std::filesystem;

/// A stage needs an artifact that an earlier stage has not produced.
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// NOOP_RUNS_DIR, when set and nonempty, replaces run.out_dir.
inline fs::path runs_root(const RunConfig& c) {
  const char* env = std::getenv("NOOP_RUNS_DIR");
  return (env != nullptr && *env != '\0') ? fs::path(env) : fs::path(c.run.out_dir);
}

inline fs::path run_dir(const RunConfig& c) { return runs_root(c) / c.run.name; }

inline data::Dataset generate(const std::string& generator, std::size_t n_per_class, std::size_t size,
                              std::uint64_t seed) {
  if (generator == "shapes") return data::gen_shapes(n_per_class, size, seed);
  if (generator == "shapes-shifted") return data::gen_shapes(n_per_class, size, seed, data::shifted_shape_style());
  if (generator == "textures") return data::gen_textures(n_per_class, size, seed);
  throw ConfigError("unknown generator '" + generator + "'");
}

/// One per-image score row of metrics.csv.
struct MetricRow {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t t = 0;  // 0 marks a multi-timestep ensemble
  std::size_t image_id = 0;
  std::size_t true_label = 0;
  std::size_t pred_label = 0;
  std::vector<double> d;
};

struct TimingRow {
  std::string method;
  std::string phase;  // train or eval
  std::uint64_t seed = 0;
  double seconds = 0;
};

struct LossRow {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double loss = 0;
};

inline std::string metrics_header(std::size_t classes) {
  std::string h = "run,stage,method,seed,shot,t,image_id,true_label,pred_label";
  for (std::size_t k = 0; k < classes; ++k) h += ",d_" + std::to_string(k);
  return h;
}

/// Paths of everything a run directory can hold.
struct RunArtifacts {
  fs::path root;
  fs::path config() const { return root / "config.ini"; }
  fs::path manifest() const { return root / "manifest.json"; }
  fs::path metrics() const { return root / "metrics.csv"; }
  fs::path timing() const { return root / "timing.csv"; }
  fs::path losses() const { return root / "losses.csv"; }
  fs::path spectral() const { return root / "spectral.csv"; }
  fs::path stats() const { return root / "stats.csv"; }
  fs::path report_csv() const { return root / "report.csv"; }
  fs::path report_txt() const { return root / "report.txt"; }
  fs::path dataset() const { return root / "data" / "dataset.nds"; }
  fs::path pretrain() const { return root / "data" / "pretrain.nds"; }
  fs::path transfer_set() const { return root / "data" / "transfer.nds"; }
  fs::path split() const { return root / "data" / "split.csv"; }
  fs::path ckpt(const std::string& what, std::uint64_t seed) const {
    return root / "ckpt" / (what + "_s" + std::to_string(seed) + ".nock");
  }
  fs::path probe_ckpt() const { return root / "ckpt" / "probe.nock"; }
  fs::path stage_file(const std::string& stage, const std::string& kind) const {
    return root / "stages" / (stage + "." + kind);
  }
  fs::path instability() const { return root / "instability.csv"; }

  /// A stage is done when its marker and every file it recorded still exist,
  /// so deleting an artifact makes the next invocation redo that stage.
  bool done(const std::string& stage) const {
    const auto marker = stage_file(stage, "done");
    if (!fs::exists(marker)) return false;
    for (const char* kind : {"metrics.csv", "timing.csv", "loss.csv"})
      if (!fs::exists(stage_file(stage, kind))) return false;
    std::ifstream is(marker);
    const auto j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded() || !j.contains("artifacts")) return false;
    for (const auto& f : j["artifacts"])
      if (!fs::exists(root / f.get<std::string>())) return false;
    return true;
  }
};

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
    if (!os) throw std::runtime_error("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_if_exists(const fs::path& path) {
  return fs::exists(path) ? read_file(path.string()) : std::string();
}

inline void require_file(const fs::path& path, const std::string& stage, const std::string& producer) {
  if (!fs::exists(path)) {
    throw MissingArtifact(stage + " needs " + path.string() + "; run " + producer + " first");
  }
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace detail

/// Rows a stage produces, written as fragments under stages/ once the stage
/// finishes. The .done marker is written last so an interrupted stage reruns.
class StageOutput {
 public:
  StageOutput(std::string stage, const RunConfig& cfg) : stage_(std::move(stage)), cfg_(cfg) {}

  void add(MetricRow r) { metrics_.push_back(std::move(r)); }
  void time(const std::string& method, const std::string& phase, std::uint64_t seed, double seconds) {
    timing_.push_back({method, phase, seed, seconds});
  }
  void losses(const std::string& method, std::uint64_t seed, const std::vector<double>& curve) {
    for (std::size_t e = 0; e < curve.size(); ++e) losses_.push_back({method, seed, e, curve[e]});
  }
  void loss_at(const std::string& method, std::uint64_t seed, std::size_t epoch, double loss) {
    losses_.push_back({method, seed, epoch, loss});
  }
  void param(const std::string& key, const std::string& value) { params_[key] = value; }
  void artifact(const fs::path& path) { artifacts_.push_back(path); }

  void commit(const RunArtifacts& a) {
    std::stable_sort(metrics_.begin(), metrics_.end(), [](const MetricRow& x, const MetricRow& y) {
      return std::tie(x.method, x.seed, x.image_id) < std::tie(y.method, y.seed, y.image_id);
    });
    std::string m;
    for (const auto& r : metrics_) {
      m += cfg_.run.name + "," + stage_ + "," + r.method + "," + fmt(r.seed) + "," + fmt(cfg_.data.shots) + "," +
           fmt(r.t) + "," + fmt(r.image_id) + "," + fmt(r.true_label) + "," + fmt(r.pred_label);
      for (double v : r.d) m += "," + fmt(v);
      m += "\n";
    }
    std::string t;
    for (const auto& r : timing_) t += stage_ + "," + r.method + "," + r.phase + "," + fmt(r.seed) + "," + fmt(r.seconds) + "\n";
    std::string l;
    for (const auto& r : losses_) l += stage_ + "," + r.method + "," + fmt(r.seed) + "," + fmt(r.epoch) + "," + fmt(r.loss) + "\n";
    detail::write_text(a.stage_file(stage_, "metrics.csv"), m);
    detail::write_text(a.stage_file(stage_, "timing.csv"), t);
    detail::write_text(a.stage_file(stage_, "loss.csv"), l);
    nlohmann::ordered_json done;
    done["stage"] = stage_;
    done["params"] = params_;
    std::vector<std::string> files;
    for (const auto& p : artifacts_) files.push_back(fs::relative(p, a.root).generic_string());
    done["artifacts"] = files;
    detail::write_text(a.stage_file(stage_, "done"), done.dump(2) + "\n");
  }

 private:
  std::string stage_;
  const RunConfig& cfg_;
  std::vector<MetricRow> metrics_;
  std::vector<TimingRow> timing_;
  std::vector<LossRow> losses_;
  std::map<std::string, std::string> params_;
  std::vector<fs::path> artifacts_;
};

/// Rebuilds metrics.csv, timing.csv, losses.csv and manifest.json from the
/// fragments of every finished stage, in canonical stage order.
inline void assemble(const RunConfig& cfg, const RunArtifacts& a, std::size_t classes) {
  std::string metrics = metrics_header(classes) + "\n";
  std::string timing = "stage,method,phase,seed,seconds\n";
  std::string losses = "stage,method,seed,epoch,loss\n";
  nlohmann::ordered_json manifest;
  manifest["run"] = cfg.run.name;
  manifest["precision"] = cfg.run.precision;
  manifest["config"] = flatten(cfg);
  manifest["stages"] = nlohmann::ordered_json::array();
  for (const auto& stage : all_stages()) {
    if (!a.done(stage)) continue;
    metrics += detail::read_if_exists(a.stage_file(stage, "metrics.csv"));
    timing += detail::read_if_exists(a.stage_file(stage, "timing.csv"));
    losses += detail::read_if_exists(a.stage_file(stage, "loss.csv"));
    manifest["stages"].push_back(nlohmann::ordered_json::parse(read_file(a.stage_file(stage, "done").string())));
  }
  detail::write_text(a.metrics(), metrics);
  detail::write_text(a.timing(), timing);
  detail::write_text(a.losses(), losses);
  detail::write_text(a.manifest(), manifest.dump(2) + "\n");
}

/// All stages for one precision. Each stage reads its inputs from the run
/// directory, so any stage can run in a fresh process.
template <typename T>
class Experiment {
 public:
  Experiment(const RunConfig& cfg, RunArtifacts a)
      : cfg_(cfg),
        a_(std::move(a)),
        sched_(diffusion::make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)) {}

  void run(const std::string& stage) {
    StageOutput out(stage, cfg_);
    if (stage == "gen-data") gen_data(out);
    else if (stage == "train-denoiser") train_denoiser(out);
    else if (stage == "eval-dc") eval_dc(out);
    else if (stage == "eval-ensemble") eval_ensemble(out);
    else if (stage == "train-noop") train_noop(out);
    else if (stage == "eval-noop") eval_noop(out);
    else if (stage == "train-prompt") train_prompt(out);
    else if (stage == "transfer") transfer(out);
    else if (stage == "instability") instability(out);
    else if (stage == "spectra") spectra(out);
    else if (stage == "stats") stats(out);
    else if (stage == "probe") probe(out);
    else throw ConfigError("unknown stage '" + stage + "'");
    out.commit(a_);
  }

 private:
  // ---- inputs ------------------------------------------------------------

  const data::Dataset& dataset(const std::string& stage) {
    if (!ds_) {
      detail::require_file(a_.dataset(), stage, "gen-data");
      ds_ = data::load_dataset(a_.dataset());
    }
    return *ds_;
  }

  const data::FewShotSplit& split(const std::string& stage) {
    if (!split_) {
      detail::require_file(a_.split(), stage, "gen-data");
      data::FewShotSplit s;
      const auto rows = read_csv(a_.split().string());
      for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto idx = parse_number<std::size_t>(rows[i].at(0), "split index");
        (rows[i].at(1) == "train" ? s.train : s.test).push_back(idx);
      }
      s.shots = cfg_.data.shots;
      s.seed = cfg_.data.split_seed;
      split_ = std::move(s);
    }
    return *split_;
  }

  std::vector<std::size_t> classes(const data::Dataset& ds) const {
    std::vector<std::size_t> c(ds.classes());
    for (std::size_t k = 0; k < c.size(); ++k) c[k] = k;
    return c;
  }

  diffusion::DenoiserConfig denoiser_config(const data::Dataset& ds) const {
    return {.classes = ds.classes(), .channels = ds.channels, .image_size = ds.height, .base = cfg_.denoiser.base,
            .emb = cfg_.denoiser.emb};
  }

  /// Experiment seed i pairs with denoiser seeds[i mod count].
  std::uint64_t denoiser_seed(std::size_t i) const { return cfg_.denoiser.seeds[i % cfg_.denoiser.seeds.size()]; }

  diffusion::Denoiser<T> denoiser(std::size_t i, const std::string& stage) {
    const auto& ds = dataset(stage);
    const auto seed = denoiser_seed(i);
    const auto path = a_.ckpt("denoiser", seed);
    detail::require_file(path, stage, "train-denoiser");
    diffusion::Denoiser<T> m(denoiser_config(ds), seed);
    nd::restore<T>(nd::load_checkpoint(path), m.params());
    m.set_frozen(true);
    return m;
  }

  optim::NoOpConfig noop_config(std::uint64_t seed) const {
    return {.epochs = cfg_.noop.epochs, .batch = cfg_.noop.batch, .lr_eps = cfg_.noop.lr_eps,
            .lr_meta = cfg_.noop.lr_meta, .t = cfg_.dc.t, .use_meta = cfg_.noop.use_meta, .seed = seed};
  }

  optim::NoOpState<T> load_noop(const std::string& what, std::uint64_t seed, const std::string& stage,
                                const std::string& producer) {
    const auto& ds = dataset(stage);
    const auto path = a_.ckpt(what, seed);
    detail::require_file(path, stage, producer);
    auto s = optim::make_state<T>(ds.channels, ds.height, noop_config(seed));
    optim::load_state(path, s);
    return s;
  }

  /// Noise stream j of evaluation seed s: one standard-normal row per image.
  nd::Tensor<T> eval_noise(std::uint64_t s, std::uint64_t j, const nd::Shape& shape) const {
    nd::Rng rng(nd::mix_seed(nd::mix_seed(cfg_.run.seed, s), j));
    return rng.template normal_tensor<T>(shape);
  }

  // ---- row helpers ---------------------------------------------------------

  void add_scores(StageOutput& out, const std::string& method, std::uint64_t seed, std::size_t t,
                  std::span<const std::size_t> ids, std::span<const std::size_t> labels,
                  const std::vector<dc::ClassScores>& scores) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      out.add({method, seed, t, ids[i], labels[i], scores[i].predicted, scores[i].distances});
    }
  }

  void add_ensemble(StageOutput& out, const std::string& method, std::uint64_t seed, std::size_t t,
                    std::span<const std::size_t> ids, std::span<const std::size_t> labels,
                    const std::vector<dc::EnsembleResult>& res) {
    for (std::size_t i = 0; i < res.size(); ++i) {
      out.add({method, seed, t, ids[i], labels[i], res[i].predicted, res[i].mean_distances});
    }
  }

  std::vector<nd::Tensor<T>> ensemble_noises(std::uint64_t s, const nd::Shape& shape) const {
    std::vector<nd::Tensor<T>> v;
    for (std::size_t j = 0; j < cfg_.dc.ensemble_noises; ++j) v.push_back(eval_noise(s, j, shape));
    return v;
  }

  std::string ensemble_name() const { return "ensemble-" + std::to_string(cfg_.dc.ensemble_noises); }

  // ---- stages --------------------------------------------------------------

  void gen_data(StageOutput& out) {
    const auto ds = generate(cfg_.data.generator, cfg_.data.n_per_class, cfg_.data.size, cfg_.data.seed);
    const auto pre =
        generate(cfg_.data.generator, cfg_.data.pretrain_per_class, cfg_.data.size, cfg_.data.pretrain_seed);
    const auto s = data::few_shot_split(ds, cfg_.data.shots, cfg_.data.split_seed);
    fs::create_directories(a_.dataset().parent_path());
    data::save_dataset(ds, a_.dataset());
    data::save_dataset(pre, a_.pretrain());
    std::vector<std::pair<std::size_t, std::string>> rows;
    for (auto i : s.train) rows.emplace_back(i, "train");
    for (auto i : s.test) rows.emplace_back(i, "test");
    std::sort(rows.begin(), rows.end());
    std::string text = "index,role\n";
    for (const auto& [i, role] : rows) text += fmt(i) + "," + role + "\n";
    detail::write_text(a_.split(), text);
    out.param("generator", cfg_.data.generator);
    out.param("images", fmt(ds.size()));
    out.param("pretrain_images", fmt(pre.size()));
    out.param("train", fmt(s.train.size()));
    out.param("test", fmt(s.test.size()));
    out.param("shots", fmt(cfg_.data.shots));
    for (const auto& p : {a_.dataset(), a_.pretrain(), a_.split()}) out.artifact(p);
  }

  void train_denoiser(StageOutput& out) {
    const auto& ds = dataset("train-denoiser");
    detail::require_file(a_.pretrain(), "train-denoiser", "gen-data");
    const auto pre = data::load_dataset(a_.pretrain());
    const auto idx = data::all_indices(pre);
    std::set<std::uint64_t> seen;
    for (auto seed : cfg_.denoiser.seeds) {
      if (!seen.insert(seed).second) continue;
      diffusion::Denoiser<T> m(denoiser_config(ds), seed);
      const auto start = detail::Clock::now();
      const auto curve = diffusion::train_denoiser<T>(
          m, pre, idx, sched_,
          {.epochs = cfg_.denoiser.epochs, .batch = cfg_.denoiser.batch, .lr = cfg_.denoiser.lr, .seed = seed});
      out.time("denoiser", "train", seed, detail::seconds_since(start));
      out.losses("denoiser", seed, curve);
      const auto path = a_.ckpt("denoiser", seed);
      fs::create_directories(path.parent_path());
      nd::save_checkpoint<T>(path, m.params().items());
      out.artifact(path);
    }
    out.param("epochs", fmt(cfg_.denoiser.epochs));
    out.param("batch", fmt(cfg_.denoiser.batch));
    out.param("lr", fmt(cfg_.denoiser.lr));
    out.param("seeds", join(cfg_.denoiser.seeds));
  }

  void eval_dc(StageOutput& out) {
    const auto& ds = dataset("eval-dc");
    const auto& sp = split("eval-dc");
    const auto x0 = data::to_tensor<T>(ds, sp.test);
    const auto labels = data::labels_of(ds, sp.test);
    for (std::size_t i = 0; i < cfg_.noop.seeds.size(); ++i) {
      const auto s = cfg_.noop.seeds[i];
      const auto m = denoiser(i, "eval-dc");
      const auto eps = eval_noise(s, 0, x0.shape());
      const auto start = detail::Clock::now();
      const auto scores = dc::evaluate_set<T>(m, sched_, x0, cfg_.dc.t, eps, classes(ds));
      out.time("zero-shot", "eval", s, detail::seconds_since(start));
      add_scores(out, "zero-shot", s, cfg_.dc.t, sp.test, labels, scores);
    }
    out.param("t", fmt(cfg_.dc.t));
  }

  void eval_ensemble(StageOutput& out) {
    const auto& ds = dataset("eval-ensemble");
    const auto& sp = split("eval-ensemble");
    const auto x0 = data::to_tensor<T>(ds, sp.test);
    const auto labels = data::labels_of(ds, sp.test);
    const std::vector<std::size_t> t_one{cfg_.dc.t};
    const std::vector<std::size_t> t_all(cfg_.dc.ensemble_timesteps.begin(), cfg_.dc.ensemble_timesteps.end());
    for (std::size_t i = 0; i < cfg_.noop.seeds.size(); ++i) {
      const auto s = cfg_.noop.seeds[i];
      const auto m = denoiser(i, "eval-ensemble");
      const auto noises = ensemble_noises(s, x0.shape());
      auto start = detail::Clock::now();
      const auto ens = dc::ensemble_set<T>(m, sched_, x0, t_one, noises, classes(ds));
      out.time(ensemble_name(), "eval", s, detail::seconds_since(start));
      add_ensemble(out, ensemble_name(), s, cfg_.dc.t, sp.test, labels, ens);
      const std::vector<nd::Tensor<T>> first{noises.front()};
      start = detail::Clock::now();
      const auto tens = dc::ensemble_set<T>(m, sched_, x0, t_all, first, classes(ds));
      out.time("timestep-ensemble", "eval", s, detail::seconds_since(start));
      add_ensemble(out, "timestep-ensemble", s, 0, sp.test, labels, tens);
    }
    out.param("t", fmt(cfg_.dc.t));
    out.param("noises", fmt(cfg_.dc.ensemble_noises));
    out.param("timesteps", join(cfg_.dc.ensemble_timesteps));
  }

  void train_noop(StageOutput& out) {
    const auto& ds = dataset("train-noop");
    const auto& sp = split("train-noop");
    for (std::size_t i = 0; i < cfg_.noop.seeds.size(); ++i) {
      const auto s = cfg_.noop.seeds[i];
      const auto m = denoiser(i, "train-noop");
      const auto cfg = noop_config(s);
      auto state = optim::make_state<T>(ds.channels, ds.height, cfg);
      const auto start = detail::Clock::now();
      const auto curve = optim::train_noop<T>(m, sched_, ds, sp.train, state, cfg);
      out.time("noop", "train", s, detail::seconds_since(start));
      out.losses("noop", s, curve);
      const auto path = a_.ckpt("noop", s);
      fs::create_directories(path.parent_path());
      optim::save_state(path, state);
      out.artifact(path);
    }
    out.param("shots", fmt(cfg_.data.shots));
    out.param("epochs", fmt(cfg_.noop.epochs));
    out.param("batch", fmt(cfg_.noop.batch));
    out.param("lr_eps", fmt(cfg_.noop.lr_eps));
    out.param("lr_meta", fmt(cfg_.noop.lr_meta));
    out.param("t", fmt(cfg_.dc.t));
    out.param("use_meta", cfg_.noop.use_meta ? "true" : "false");
  }

  void eval_noop(StageOutput& out) {
    const auto& ds = dataset("eval-noop");
    const auto& sp = split("eval-noop");
    const auto x0 = data::to_tensor<T>(ds, sp.test);
    const auto labels = data::labels_of(ds, sp.test);
    for (std::size_t i = 0; i < cfg_.noop.seeds.size(); ++i) {
      const auto s = cfg_.noop.seeds[i];
      const auto m = denoiser(i, "eval-noop");
      const auto trained = load_noop("noop", s, "eval-noop", "train-noop");
      const auto initial = optim::make_state<T>(ds.channels, ds.height, noop_config(s));
      auto start = detail::Clock::now();
      add_scores(out, "noop", s, cfg_.dc.t, sp.test, labels, optim::classify_noop<T>(m, sched_, trained, x0, classes(ds)));
      out.time("noop", "eval", s, detail::seconds_since(start));
      add_scores(out, "noop-init", s, cfg_.dc.t, sp.test, labels,
                 optim::classify_noop<T>(m, sched_, initial, x0, classes(ds)));
    }
    out.param("t", fmt(cfg_.dc.t));
  }

  void train_prompt(StageOutput& out) {
    const auto& ds = dataset("train-prompt");
    const auto& sp = split("train-prompt");
    const auto x0 = data::to_tensor<T>(ds, sp.test);
    const auto labels = data::labels_of(ds, sp.test);
    for (std::size_t i = 0; i < cfg_.noop.seeds.size(); ++i) {
      const auto s = cfg_.noop.seeds[i];
      auto m = denoiser(i, "train-prompt");
      // Objective on fixed (t, noise) draws, before and after training.
      const auto objective_seed = nd::mix_seed(s, 8);
      const double before = optim::denoising_objective<T>(m, sched_, ds, sp.train, 32, objective_seed);
      auto start = detail::Clock::now();
      const auto curve = optim::train_prompt<T>(
          m, sched_, ds, sp.train,
          {.epochs = cfg_.prompt.epochs, .batch = cfg_.prompt.batch, .lr = cfg_.prompt.lr, .seed = s});
      out.time("prompt", "train", s, detail::seconds_since(start));
      out.losses("prompt", s, curve);
      out.losses("prompt-objective", s, {before});
      out.loss_at("prompt-objective", s, cfg_.prompt.epochs,
                  optim::denoising_objective<T>(m, sched_, ds, sp.train, 32, objective_seed));
      const auto ppath = a_.ckpt("prompt", s);
      fs::create_directories(ppath.parent_path());
      nd::save_checkpoint<T>(ppath, optim::prompt_params(m).items());
      out.artifact(ppath);
      start = detail::Clock::now();
      add_scores(out, "prompt", s, cfg_.dc.t, sp.test, labels,
                 dc::evaluate_set<T>(m, sched_, x0, cfg_.dc.t, eval_noise(s, 0, x0.shape()), classes(ds)));
      out.time("prompt", "eval", s, detail::seconds_since(start));

      // NoOp trained against the prompted backbone.
      const auto cfg = noop_config(s);
      auto state = optim::make_state<T>(ds.channels, ds.height, cfg);
      start = detail::Clock::now();
      out.losses("noop+prompt", s, optim::train_noop<T>(m, sched_, ds, sp.train, state, cfg));
      out.time("noop+prompt", "train", s, detail::seconds_since(start));
      const auto npath = a_.ckpt("noop_prompt", s);
      optim::save_state(npath, state);
      out.artifact(npath);
      start = detail::Clock::now();
      add_scores(out, "noop+prompt", s, cfg_.dc.t, sp.test, labels,
                 optim::classify_noop<T>(m, sched_, state, x0, classes(ds)));
      out.time("noop+prompt", "eval", s, detail::seconds_since(start));
    }
    out.param("epochs", fmt(cfg_.prompt.epochs));
    out.param("batch", fmt(cfg_.prompt.batch));
    out.param("lr", fmt(cfg_.prompt.lr));
  }

  void transfer(StageOutput& out) {
    const auto& ds = dataset("transfer");
    const auto target = generate(cfg_.transfer.generator, cfg_.transfer.n_per_class, cfg_.data.size, cfg_.transfer.seed);
    if (target.classes() != ds.classes()) throw ConfigError("transfer target has a different class count");
    data::save_dataset(target, a_.transfer_set());
    out.artifact(a_.transfer_set());
    const auto ids = data::all_indices(target);
    const auto x0 = data::to_tensor<T>(target, ids);
    const auto labels = data::labels_of(target, ids);
    for (std::size_t i = 0; i < cfg_.noop.seeds.size(); ++i) {
      const auto s = cfg_.noop.seeds[i];
      const auto m = denoiser(i, "transfer");
      const auto state = load_noop("noop", s, "transfer", "train-noop");
      const auto start = detail::Clock::now();
      add_scores(out, "transfer", s, cfg_.dc.t, ids, labels, optim::classify_noop<T>(m, sched_, state, x0, classes(ds)));
      out.time("transfer", "eval", s, detail::seconds_since(start));
      add_scores(out, "transfer-zero-shot", s, cfg_.dc.t, ids, labels,
                 dc::evaluate_set<T>(m, sched_, x0, cfg_.dc.t, eval_noise(s, 0, x0.shape()), classes(ds)));
    }
    out.param("source", cfg_.data.generator);
    out.param("target", cfg_.transfer.generator);
    out.param("target_images", fmt(target.size()));
  }

  void instability(StageOutput& out) {
    const auto& ds = dataset("instability");
    const auto& sp = split("instability");
    const auto x0 = data::to_tensor<T>(ds, sp.test);
    const auto labels = data::labels_of(ds, sp.test);
    const auto m = denoiser(0, "instability");
    const std::vector<std::size_t> t_one{cfg_.dc.t};
    const std::string single = "instability-single", ensemble = "instability-" + ensemble_name();
    std::map<std::string, std::vector<std::vector<std::size_t>>> preds;
    for (std::uint64_t e = 0; e < cfg_.dc.instability_seeds; ++e) {
      const auto noises = ensemble_noises(1000 + e, x0.shape());
      const auto one = dc::evaluate_set<T>(m, sched_, x0, cfg_.dc.t, noises.front(), classes(ds));
      add_scores(out, single, e, cfg_.dc.t, sp.test, labels, one);
      preds[single].push_back(dc::predictions(one));
      const auto ens = dc::ensemble_set<T>(m, sched_, x0, t_one, noises, classes(ds));
      add_ensemble(out, ensemble, e, cfg_.dc.t, sp.test, labels, ens);
      auto& p = preds[ensemble].emplace_back();
      for (const auto& r : ens) p.push_back(r.predicted);
    }
    // Per-method spread over evaluation seeds: accuracy mean, population
    // std, and the fraction of images whose prediction ever changes.
    std::string csv = "method,seeds,mean,std,flip_rate\n";
    for (const auto& method : {single, ensemble}) {
      const auto& p = preds[method];
      std::vector<double> acc;
      for (const auto& row : p) acc.push_back(dc::accuracy(row, labels));
      double mean = 0, var = 0;
      for (double a : acc) mean += a;
      mean /= static_cast<double>(acc.size());
      for (double a : acc) var += (a - mean) * (a - mean);
      std::size_t flips = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        bool differs = false;
        for (const auto& row : p) differs = differs || row[i] != p.front()[i];
        flips += differs;
      }
      csv += method + "," + fmt(acc.size()) + "," + fmt(mean) + "," + fmt(std::sqrt(var / static_cast<double>(acc.size()))) +
             "," + fmt(static_cast<double>(flips) / static_cast<double>(labels.size())) + "\n";
    }
    detail::write_text(a_.instability(), csv);
    out.artifact(a_.instability());
    out.param("seeds", fmt(cfg_.dc.instability_seeds));
    out.param("denoiser_seed", fmt(denoiser_seed(0)));
  }

  /// Noise-only optimisation with the high-frequency ratio of eps recorded
  /// before training (epoch 0) and after every epoch.
  void spectra(StageOutput& out) {
    const auto& ds = dataset("spectra");
    const auto& sp = split("spectra");
    std::string csv = "epoch,dataset,ratio,seed\n";
    for (std::size_t i = 0; i < cfg_.noop.seeds.size(); ++i) {
      const auto s = cfg_.noop.seeds[i];
      const auto m = denoiser(i, "spectra");
      auto cfg = noop_config(s);
      cfg.use_meta = false;
      auto state = optim::make_state<T>(ds.channels, ds.height, cfg);
      auto record = [&](std::size_t epoch) {
        const std::vector<double> e(state.eps.data().begin(), state.eps.data().end());
        csv += fmt(epoch) + "," + cfg_.data.generator + "," +
               fmt(spectral::high_freq_ratio(e, ds.channels, ds.height, ds.width, 0.3)) + "," + fmt(s) + "\n";
      };
      record(0);
      out.losses("noop-eps-only", s,
                 optim::train_noop<T>(m, sched_, ds, sp.train, state, cfg, [&](std::size_t epoch, double) { record(epoch + 1); }));
      const auto path = a_.ckpt("noop_eps", s);
      optim::save_state(path, state);
      out.artifact(path);
    }
    detail::write_text(a_.spectral(), csv);
    out.artifact(a_.spectral());
    out.param("cutoff", fmt(0.3));
    out.param("use_meta", "false");
  }

  void stats(StageOutput& out) {
    const auto& ds = dataset("stats");
    std::string csv = "kind,seed,mean,variance,log_pdf\n";
    auto row = [&](const std::string& kind, std::uint64_t seed, std::span<const T> v) {
      const std::vector<double> x(v.begin(), v.end());
      const auto st = spectral::noise_stats(x);
      csv += kind + "," + fmt(seed) + "," + fmt(st.mean) + "," + fmt(st.variance) + "," + fmt(st.log_pdf) + "\n";
    };
    for (auto s : cfg_.noop.seeds) {
      const auto trained = load_noop("noop", s, "stats", "train-noop");
      const auto initial = optim::make_state<T>(ds.channels, ds.height, noop_config(s));
      row("initial", s, initial.eps.data());
      row("trained", s, trained.eps.data());
    }
    nd::Rng rng(nd::mix_seed(cfg_.run.seed, 777));
    const nd::Shape shape{1, ds.channels, ds.height, ds.width};
    for (std::uint64_t k = 0; k < 100; ++k) row("fresh", k, rng.template normal_tensor<T>(shape).data());
    detail::write_text(a_.stats(), csv);
    out.artifact(a_.stats());
    out.param("fresh_draws", "100");
  }

  void probe(StageOutput& out) {
    const auto& ds = dataset("probe");
    const auto& sp = split("probe");
    detail::require_file(a_.pretrain(), "probe", "gen-data");
    const auto pre = data::load_dataset(a_.pretrain());
    ProbeClassifier<T> p(ds.channels, ds.height, ds.classes(), cfg_.run.seed);
    out.losses("probe", 0,
               train_probe(p, pre, data::all_indices(pre),
                           {.epochs = cfg_.probe.epochs, .batch = cfg_.probe.batch, .lr = cfg_.probe.lr, .seed = cfg_.run.seed}));
    const double clean = p.certify(ds, sp.test, cfg_.probe.min_clean_accuracy);
    nd::save_checkpoint<T>(a_.probe_ckpt(), p.params().items());
    out.artifact(a_.probe_ckpt());
    const auto x0 = data::to_tensor<T>(ds, sp.test);
    const auto labels = data::labels_of(ds, sp.test);
    auto add = [&](const std::string& method, std::uint64_t seed, std::size_t t, const ProbeOutput& r) {
      for (std::size_t i = 0; i < r.predicted.size(); ++i) {
        std::vector<double> d(r.logits[i].size());
        for (std::size_t k = 0; k < d.size(); ++k) d[k] = -r.logits[i][k];
        out.add({method, seed, t, sp.test[i], labels[i], r.predicted[i], std::move(d)});
      }
    };
    add("probe-clean", 0, 0, p.evaluate(x0));
    for (auto s : cfg_.noop.seeds) {
      const auto state = load_noop("noop", s, "probe", "train-noop");
      add("probe-random", s, cfg_.dc.t, destruction_probe(p, sched_, x0, eval_noise(s, 0, x0.shape()), cfg_.dc.t));
      add("probe-noop", s, cfg_.dc.t, destruction_probe(p, sched_, x0, optim::inference_noise(state, x0), cfg_.dc.t));
    }
    out.param("clean_accuracy", fmt(clean));
    out.param("t", fmt(cfg_.dc.t));
  }

  const RunConfig& cfg_;
  RunArtifacts a_;
  diffusion::NoiseSchedule sched_;
  std::optional<data::Dataset> ds_;
  std::optional<data::FewShotSplit> split_;
};

struct RunOptions {
  bool force = false;  // rerun the requested stages and everything after them
};

/// Runs `stages` in canonical order, skipping those whose .done marker
/// exists. Writes the resolved config, then reassembles the run-level CSVs
/// and manifest after every stage.
inline RunArtifacts run_experiment(const RunConfig& cfg, std::vector<std::string> stages, const RunOptions& opt = {}) {
  validate(cfg);
  for (const auto& s : stages) {
    if (std::find(all_stages().begin(), all_stages().end(), s) == all_stages().end()) {
      throw ConfigError("unknown stage '" + s + "'");
    }
  }
  RunArtifacts a{run_dir(cfg)};
  const std::string resolved = to_ini(cfg);
  if (fs::exists(a.config()) && read_file(a.config().string()) != resolved) {
    if (!opt.force) {
      throw ConfigError("run directory " + a.root.string() +
                        " was produced by a different configuration; use another run.name or --force");
    }
  }
  if (opt.force) {
    // Invalidate the earliest requested stage and everything downstream.
    std::size_t first = all_stages().size();
    for (const auto& s : stages) {
      first = std::min<std::size_t>(first, std::find(all_stages().begin(), all_stages().end(), s) - all_stages().begin());
    }
    for (std::size_t k = first; k < all_stages().size(); ++k) fs::remove(a.stage_file(all_stages()[k], "done"));
  }
  fs::create_directories(a.root);
  detail::write_text(a.config(), resolved);

  std::vector<std::string> ordered;
  for (const auto& s : all_stages())
    if (std::find(stages.begin(), stages.end(), s) != stages.end()) ordered.push_back(s);

  auto classes_of = [&]() -> std::size_t {
    return fs::exists(a.dataset()) ? data::load_dataset(a.dataset()).classes() : 0;
  };
  for (const auto& stage : ordered) {
    if (a.done(stage)) continue;
    if (cfg.run.precision == "f64") {
      Experiment<double>(cfg, a).run(stage);
    } else {
      Experiment<float>(cfg, a).run(stage);
    }
    assemble(cfg, a, classes_of());
  }
  assemble(cfg, a, classes_of());
  return a;
}

}  // namespace noop::harness
