#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "isslab/harness.hpp"

namespace h = isslab::harness;

int main(int argc, char** argv) {
  CLI::App app{"isslab: ISS experiments for gradient flows and exact-line-search descent"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  for (const char* name : {"flow", "descent", "oracle", "gains", "verify"}) {
    auto* sub = app.add_subcommand(name, std::string("run the ") + name + " command");
    sub->add_option("-c,--config", config_path, "TOML experiment file")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out_dir, "output directory (defaults to the config's `output`)");
    sub->add_option("-s,--seed", seed, "override the configured seed");
    sub->add_option("-j,--jobs", jobs, "worker threads")->check(CLI::Range(1u, 256u));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const h::ExperimentConfig cfg = h::load_config(config_path);
    h::RunOptions opt;
    opt.out = out_dir.empty() ? std::filesystem::path(cfg.output) : std::filesystem::path(out_dir);
    opt.seed = seed;
    opt.jobs = jobs;
    const h::RunResult r = h::run_command(command, cfg, opt);
    std::cout << r.manifest.to_json().dump(2) << "\n";
    for (const auto& [name, ok] : r.manifest.verdicts)
      if (!ok) std::cerr << "FAILED: " << name << "\n";
    return r.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return h::exit_code_for(e);
  }
}
