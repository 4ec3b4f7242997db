#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "noop/harness/text.hpp"

namespace noop::harness {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& all_stages() {
  static const std::vector<std::string> stages{"gen-data",    "train-denoiser", "eval-dc", "eval-ensemble",
                                               "train-noop",  "eval-noop",      "train-prompt", "transfer",
                                               "instability", "spectra",        "stats",   "probe"};
  return stages;
}

inline const std::vector<std::string>& generators() {
  static const std::vector<std::string> g{"shapes", "shapes-shifted", "textures"};
  return g;
}

struct RunConfig {
  struct {
    std::string name = "default";
    std::uint64_t seed = 7;  // evaluation noise streams
    std::string precision = "f32";
    std::string out_dir = "runs";
    std::vector<std::string> stages = all_stages();
  } run;
  struct {
    std::string generator = "shapes";
    std::size_t n_per_class = 200;
    std::size_t size = 16;
    std::uint64_t seed = 7;
    std::size_t shots = 16;
    std::uint64_t split_seed = 0;
    std::size_t pretrain_per_class = 200;  // separate set the denoiser learns from
    std::uint64_t pretrain_seed = 1000;
  } data;
  struct {
    std::size_t T = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
  } schedule;
  struct {
    std::size_t epochs = 30;
    std::size_t batch = 32;
    double lr = 1e-3;
    std::size_t base = 16;
    std::size_t emb = 32;
    std::vector<std::uint64_t> seeds{0, 1, 2};
  } denoiser;
  struct {
    std::size_t t = 500;
    std::size_t ensemble_noises = 5;
    std::vector<std::uint64_t> ensemble_timesteps{300, 400, 500, 600, 700};
    std::size_t instability_seeds = 10;
  } dc;
  struct {
    std::size_t epochs = 20;
    std::size_t batch = 32;
    double lr_eps = 1e-2;
    double lr_meta = 1e-3;
    bool use_meta = true;
    std::vector<std::uint64_t> seeds{0, 1, 2};
  } noop;
  struct {
    std::size_t epochs = 20;
    std::size_t batch = 32;
    double lr = 1e-2;
  } prompt;
  struct {
    std::string generator = "shapes-shifted";
    std::size_t n_per_class = 50;
    std::uint64_t seed = 11;
  } transfer;
  struct {
    std::size_t epochs = 15;
    std::size_t batch = 32;
    double lr = 3e-3;
    double min_clean_accuracy = 0.9;
  } probe;
};

namespace detail {

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define NOOP_FIELD(key, member, parse, show)                                                   \
  {                                                                                            \
    key, Field {                                                                               \
      [](RunConfig& c, const std::string& v) { c.member = parse; }, [](const RunConfig& c) {   \
        return show;                                                                           \
      }                                                                                        \
    }                                                                                          \
  }
#define NOOP_SIZE(key, member) NOOP_FIELD(key, member, parse_number<std::size_t>(v, key), fmt(c.member))
#define NOOP_U64(key, member) NOOP_FIELD(key, member, parse_number<std::uint64_t>(v, key), fmt(c.member))
#define NOOP_REAL(key, member) NOOP_FIELD(key, member, parse_number<double>(v, key), fmt(c.member))
#define NOOP_TEXT(key, member) NOOP_FIELD(key, member, v, c.member)
#define NOOP_LIST(key, member) NOOP_FIELD(key, member, parse_list(v, key), join(c.member))

inline std::vector<std::uint64_t> parse_list(const std::string& v, const char* key) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split(v, ',')) out.push_back(parse_number<std::uint64_t>(item, key));
  return out;
}

/// Every accepted key, in the order the resolved snapshot lists them.
inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table{
      NOOP_TEXT("run.name", run.name),
      NOOP_U64("run.seed", run.seed),
      NOOP_TEXT("run.precision", run.precision),
      NOOP_TEXT("run.out_dir", run.out_dir),
      NOOP_FIELD("run.stages", run.stages, split(v, ','), join(c.run.stages)),
      NOOP_TEXT("data.generator", data.generator),
      NOOP_SIZE("data.n_per_class", data.n_per_class),
      NOOP_SIZE("data.size", data.size),
      NOOP_U64("data.seed", data.seed),
      NOOP_SIZE("data.shots", data.shots),
      NOOP_U64("data.split_seed", data.split_seed),
      NOOP_SIZE("data.pretrain_per_class", data.pretrain_per_class),
      NOOP_U64("data.pretrain_seed", data.pretrain_seed),
      NOOP_SIZE("schedule.T", schedule.T),
      NOOP_REAL("schedule.beta_start", schedule.beta_start),
      NOOP_REAL("schedule.beta_end", schedule.beta_end),
      NOOP_SIZE("denoiser.epochs", denoiser.epochs),
      NOOP_SIZE("denoiser.batch", denoiser.batch),
      NOOP_REAL("denoiser.lr", denoiser.lr),
      NOOP_SIZE("denoiser.base", denoiser.base),
      NOOP_SIZE("denoiser.emb", denoiser.emb),
      NOOP_LIST("denoiser.seeds", denoiser.seeds),
      NOOP_SIZE("dc.t", dc.t),
      NOOP_SIZE("dc.ensemble_noises", dc.ensemble_noises),
      NOOP_LIST("dc.ensemble_timesteps", dc.ensemble_timesteps),
      NOOP_SIZE("dc.instability_seeds", dc.instability_seeds),
      NOOP_SIZE("noop.epochs", noop.epochs),
      NOOP_SIZE("noop.batch", noop.batch),
      NOOP_REAL("noop.lr_eps", noop.lr_eps),
      NOOP_REAL("noop.lr_meta", noop.lr_meta),
      NOOP_FIELD("noop.use_meta", noop.use_meta, parse_bool(v), std::string(c.noop.use_meta ? "true" : "false")),
      NOOP_LIST("noop.seeds", noop.seeds),
      NOOP_SIZE("prompt.epochs", prompt.epochs),
      NOOP_SIZE("prompt.batch", prompt.batch),
      NOOP_REAL("prompt.lr", prompt.lr),
      NOOP_TEXT("transfer.generator", transfer.generator),
      NOOP_SIZE("transfer.n_per_class", transfer.n_per_class),
      NOOP_U64("transfer.seed", transfer.seed),
      NOOP_SIZE("probe.epochs", probe.epochs),
      NOOP_SIZE("probe.batch", probe.batch),
      NOOP_REAL("probe.lr", probe.lr),
      NOOP_REAL("probe.min_clean_accuracy", probe.min_clean_accuracy),
  };
  return table;
}

#undef NOOP_FIELD
#undef NOOP_SIZE
#undef NOOP_U64
#undef NOOP_REAL
#undef NOOP_TEXT
#undef NOOP_LIST

inline const Field* find_field(const std::string& key) {
  for (const auto& [name, f] : fields())
    if (name == key) return &f;
  return nullptr;
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace detail

/// Sets one "section.key" from text. Unknown keys and unparsable values are
/// ConfigErrors.
inline void set_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto* f = detail::find_field(key);
  if (f == nullptr) throw ConfigError("unknown config key '" + key + "'");
  try {
    f->set(c, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
}

/// Applies "section.key=value".
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override must look like section.key=value: '" + assignment + "'");
  set_value(c, std::string(trim(assignment.substr(0, eq))), std::string(trim(assignment.substr(eq + 1))));
}

/// Checks every value against the range its consumer accepts.
inline void validate(const RunConfig& c) {
  using detail::require;
  auto in = [](const std::string& v, const std::vector<std::string>& set) {
    return std::find(set.begin(), set.end(), v) != set.end();
  };
  require(!c.run.name.empty() && c.run.name.find('/') == std::string::npos && c.run.name != "." && c.run.name != "..",
          "run.name must be a plain directory name");
  require(c.run.precision == "f32" || c.run.precision == "f64", "run.precision must be f32 or f64");
  for (const auto& s : c.run.stages) require(in(s, all_stages()), "run.stages: unknown stage '" + s + "'");
  require(in(c.data.generator, generators()), "data.generator must be shapes, shapes-shifted or textures");
  require(in(c.transfer.generator, generators()), "transfer.generator must be shapes, shapes-shifted or textures");
  require(c.data.size >= 8 && c.data.size % 8 == 0, "data.size must be a multiple of 8, at least 8");
  require(c.data.n_per_class > c.data.shots, "data.n_per_class must exceed data.shots");
  require(c.data.shots >= 1, "data.shots must be at least 1");
  require(c.data.pretrain_per_class >= 1, "data.pretrain_per_class must be at least 1");
  require(c.schedule.T >= 1, "schedule.T must be at least 1");
  require(c.schedule.beta_start > 0 && c.schedule.beta_start <= c.schedule.beta_end && c.schedule.beta_end < 1,
          "schedule betas must satisfy 0 < beta_start <= beta_end < 1");
  require(c.denoiser.epochs >= 1 && c.denoiser.batch >= 1 && c.denoiser.lr > 0, "denoiser epochs, batch, lr must be positive");
  require(c.denoiser.base >= 1 && c.denoiser.emb >= 2 && c.denoiser.emb % 2 == 0, "denoiser.emb must be even");
  require(!c.denoiser.seeds.empty(), "denoiser.seeds must not be empty");
  require(c.dc.t >= 1 && c.dc.t <= c.schedule.T, "dc.t must lie in [1, schedule.T]");
  require(c.dc.ensemble_noises >= 1, "dc.ensemble_noises must be at least 1");
  require(!c.dc.ensemble_timesteps.empty(), "dc.ensemble_timesteps must not be empty");
  for (auto t : c.dc.ensemble_timesteps) require(t >= 1 && t <= c.schedule.T, "dc.ensemble_timesteps out of range");
  require(c.dc.instability_seeds >= 2, "dc.instability_seeds must be at least 2");
  require(c.noop.batch >= 1 && c.noop.lr_eps > 0 && c.noop.lr_meta > 0, "noop batch and lrs must be positive");
  require(!c.noop.seeds.empty(), "noop.seeds must not be empty");
  require(c.prompt.batch >= 1 && c.prompt.lr > 0, "prompt batch and lr must be positive");
  require(c.transfer.n_per_class >= 1, "transfer.n_per_class must be at least 1");
  require(c.probe.epochs >= 1 && c.probe.batch >= 1 && c.probe.lr > 0, "probe epochs, batch, lr must be positive");
  require(c.probe.min_clean_accuracy >= 0 && c.probe.min_clean_accuracy <= 1, "probe.min_clean_accuracy must be in [0,1]");
}

/// Parses INI text over the defaults. Sections and keys outside the schema
/// are rejected so a typo cannot silently fall back to a default.
inline RunConfig parse_config_text(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  RunConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' lies outside any section");
    for (const auto& [key, value] : body) set_value(c, section + "." + key, value.get_value<std::string>());
  }
  validate(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path.string());
  } catch (const std::runtime_error&) {
    throw ConfigError("cannot read config " + path.string());
  }
  return parse_config_text(text);
}

/// Every key with its effective value, as INI. Parsing this text yields the
/// same configuration.
inline std::string to_ini(const RunConfig& c) {
  std::string out, section;
  for (const auto& [key, f] : detail::fields()) {
    const auto dot = key.find('.');
    const auto sec = key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + f.get(c) + "\n";
  }
  return out;
}

inline std::map<std::string, std::string> flatten(const RunConfig& c) {
  std::map<std::string, std::string> out;
  for (const auto& [key, f] : detail::fields()) out[key] = f.get(c);
  return out;
}

}  // namespace noop::harness
