// Command-line driver for the experiment stages. Every subcommand reads the
// same INI config (plus --set overrides) and works in runs/<run.name>/.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "noop/harness/config.hpp"
#include "noop/harness/report.hpp"
#include "noop/harness/runner.hpp"

namespace {

namespace h = noop::harness;

int fail(const char* kind, const std::string& message, int code) {
  nlohmann::ordered_json e;
  e["error"] = kind;
  e["message"] = message;
  std::cerr << e.dump() << "\n";
  return code;
}

h::RunConfig resolve(const std::string& path, const std::vector<std::string>& overrides) {
  h::RunConfig c = path.empty() ? h::RunConfig{} : h::load_config(path);
  for (const auto& o : overrides) h::apply_override(c, o);
  h::validate(c);
  return c;
}

void print_report(const h::RunArtifacts& a) {
  h::write_report(a);
  std::cout << h::read_file(a.report_txt().string()) << "report: " << a.report_csv().string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion classifier and learnable dataset noise experiments"};
  app.require_subcommand(1);
  std::string config;
  std::vector<std::string> overrides;
  bool force = false;
  app.add_option("--config", config, "INI config file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override one key, e.g. --set noop.epochs=5")->take_all();
  app.add_flag("--force", force, "Rerun requested stages and everything after them");

  std::vector<std::string> chosen;
  std::vector<std::string> run_stages;
  bool want_report = false;
  for (const auto& stage : h::all_stages()) {
    app.add_subcommand(stage, "Run the " + stage + " stage")->callback([&chosen, stage] { chosen.push_back(stage); });
  }
  auto* run = app.add_subcommand("run", "Run the stages listed in run.stages, then the report");
  run->add_option("--stages", run_stages, "Comma-separated stage subset")->delimiter(',');
  app.add_subcommand("report", "Summarise metrics.csv and timing.csv into report.csv/report.txt")
      ->callback([&want_report] { want_report = true; });
  app.add_subcommand("show-config", "Print the resolved config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what(), 2);
  }

  try {
    const auto cfg = resolve(config, overrides);
    const h::RunArtifacts a{h::run_dir(cfg)};
    if (app.got_subcommand("show-config")) {
      std::cout << h::to_ini(cfg);
      return 0;
    }
    if (run->parsed()) {
      chosen = run_stages.empty() ? cfg.run.stages : run_stages;
      want_report = true;
    }
    if (!chosen.empty()) {
      h::run_experiment(cfg, chosen, {.force = force});
      std::cout << "run: " << a.root.string() << "\n";
    }
    if (want_report) print_report(a);
    return 0;
  } catch (const h::ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const h::MissingArtifact& e) {
    return fail("missing-artifact", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
}
