#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "udiff/experiments.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Unbiased score estimation for partially observed diffusions"};
  app.set_version_flag("--version", std::string(udiff::kVersion));
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 1;
  int threads = 1;
  std::string out = ".";
  bool seed_set = false;

  for (const auto& kind : udiff::experiment_kinds()) {
    auto* sub = app.add_subcommand(kind, "run the " + kind + " experiment");
    sub->add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) { seed = s; seed_set = true; },
                                            "master seed (overrides the config)");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "output directory");
  }
  CLI11_PARSE(app, argc, argv);

  const std::string kind = app.get_subcommands().front()->get_name();
  try {
    udiff::RunContext ctx;
    ctx.config = udiff::json::object();
    if (!config_path.empty()) ctx.config = udiff::json::parse(std::ifstream(config_path));
    ctx.seed = seed_set ? seed : ctx.config.value("seed", std::uint64_t{1});
    ctx.config["seed"] = ctx.seed;
    ctx.threads = app.get_subcommands().front()->count("--threads") ? threads : ctx.config.value("threads", 1);
    ctx.out_dir = out;
    udiff::run_experiment(kind, ctx);
  } catch (const udiff::json::exception& e) {
    std::cerr << "udiff: bad configuration: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "udiff: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "udiff: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
