#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mechshift/discovery.hpp"
#include "mechshift/model.hpp"
#include "mechshift/tasks.hpp"
#include "mechshift/training.hpp"

namespace mechshift {

struct TaskBudget {
  int arm_steps = 0;
  int mdm_steps = 0;
};

/// Everything a pipeline run depends on besides checkpoint inputs.
struct RunConfig {
  std::vector<TaskId> tasks{TaskId::kIoi, TaskId::kCountdown};
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out_dir = "mechshift-out";

  ModelConfig model;
  TrainConfig arm_train;
  TrainConfig mdm_train;
  TaskBudget ioi_budget{800, 500};
  TaskBudget countdown_budget{10000, 3000};

  bool enforce_targets = true;
  double target_ioi_arm = 0.95;
  double target_ioi_mdm = 0.90;
  double target_countdown_valid = 0.70;
  int eval_samples = 256;

  DiscoveryConfig discovery;
  int discovery_pairs = 64;
  bool oracle = true;
  int sweep_points = 40;

  int top_k = 0;  // 0 picks the smallest well-connected K

  int lens_top_r = 10;
  int lens_prompts = 100;
  int lens_examples = 4;
  int neuron_prompts = 32;
  int neuron_top = 5;
  double explanation_coverage = 0.95;
  std::size_t neuron_memory_budget = std::size_t{1} << 20;

  RunConfig();

  TaskBudget budget(TaskId task) const { return task == TaskId::kIoi ? ioi_budget : countdown_budget; }

  /// key=value lines; '#' starts a comment. Unknown keys and bad values throw
  /// ConfigError.
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  /// Canonical key=value form; parse(serialize()) round-trips.
  std::string serialize() const;
  void validate() const;

  /// DIR/<task>/seed<N>
  std::filesystem::path stage_dir(TaskId task, std::uint64_t seed) const;
};

/// Exit codes of the mechshift command.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitConfig = 2,
  kExitFile = 3,
  kExitTrainingTarget = 4,
  kExitDegeneracy = 5,
};

int exit_code_for(const std::exception& e);

/// Each command runs every configured task for every configured seed and
/// writes its outputs under stage_dir(). Messages go to `log` when given.
void cmd_train(const RunConfig& config, std::ostream* log = nullptr);
void cmd_discover(const RunConfig& config, std::ostream* log = nullptr);
void cmd_compare(const RunConfig& config, std::ostream* log = nullptr);
void cmd_interpret(const RunConfig& config, std::ostream* log = nullptr);
/// Writes DIR/report.md. Throws FileError naming every missing artifact (the
/// report is still written, listing them).
void cmd_report(const RunConfig& config, std::ostream* log = nullptr);

/// Stage outputs the report reads, relative to stage_dir().
std::vector<std::string> report_inputs(TaskId task);

/// Rows of compare.csv.
inline constexpr std::string_view kCompareHeader =
    "task,model_pair,edge_jaccard,topk_overlap,stability,stability_all_pairs,k";
inline constexpr std::string_view kAlignmentHeader = "Task,Model,Component,Mean Logit,Top Tokens,Role";

}  // namespace mechshift
