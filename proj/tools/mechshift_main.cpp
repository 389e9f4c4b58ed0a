#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mechshift/errors.hpp"
#include "mechshift/pipeline.hpp"

namespace {

using Command = void (*)(const mechshift::RunConfig&, std::ostream*);

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train toy ARM/MDM transformers and compare their circuits."};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string task;
  long long seed = -1;
  std::string out_dir;
  int posttrain_steps = -1;
  bool quiet = false;

  const std::pair<const char*, Command> commands[] = {
      {"train", mechshift::cmd_train},         {"discover", mechshift::cmd_discover},
      {"compare", mechshift::cmd_compare},     {"interpret", mechshift::cmd_interpret},
      {"report", mechshift::cmd_report},
  };
  for (const auto& [name, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key=value config file")->required();
    sub->add_option("--task", task, "restrict to one task")->check(CLI::IsMember({"ioi", "countdown"}));
    sub->add_option("--seed", seed, "run a single seed")->check(CLI::NonNegativeNumber);
    sub->add_option("--out", out_dir, "output directory");
    sub->add_flag("--quiet", quiet, "suppress progress messages");
    if (std::string(name) == "train") {
      sub->add_option("--posttrain-steps", posttrain_steps, "override MDM post-training steps")
          ->check(CLI::NonNegativeNumber);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : mechshift::kExitUsage;
  }

  try {
    mechshift::RunConfig config = mechshift::RunConfig::load(config_path);
    if (!task.empty()) config.tasks = {mechshift::parse_task(task)};
    if (seed >= 0) config.seeds = {static_cast<std::uint64_t>(seed)};
    if (!out_dir.empty()) config.out_dir = out_dir;
    if (posttrain_steps >= 0) config.ioi_budget.mdm_steps = config.countdown_budget.mdm_steps = posttrain_steps;
    config.validate();

    for (const auto& [name, fn] : commands) {
      if (app.got_subcommand(name)) fn(config, quiet ? nullptr : &std::cerr);
    }
  } catch (const std::exception& e) {
    std::cerr << "mechshift: " << e.what() << '\n';
    return mechshift::exit_code_for(e);
  }
  return mechshift::kExitOk;
}
