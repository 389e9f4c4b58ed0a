#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mechshift/model.hpp"
#include "mechshift/tasks.hpp"

namespace mechshift {

struct TrainConfig {
  float learning_rate = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  float grad_clip = 1.0f;  // global-norm clip; <= 0 disables
  float weight_decay = 0.0f;  // decoupled, applied to matrices only
  int warmup_steps = 100;     // linear warmup, then cosine decay
  float min_lr_fraction = 0.1f;
  int batch_size = 32;
  int steps = 1000;
  // Per-sequence mask ratio r ~ U(mask_ratio_min, mask_ratio_max].
  float mask_ratio_min = 0.0f;
  float mask_ratio_max = 1.0f;
  std::uint64_t seed = 0;
  int log_every = 100;
  int eval_samples = 64;

  /// Throws ConfigError on an invalid setting.
  void validate() const;
};

/// Tokenised task corpus: equal-length sequences whose generation region is
/// [prompt_len, prompt_len + gen_len).
struct Corpus {
  TaskId task = TaskId::kIoi;
  std::vector<std::vector<int>> sequences;
  int prompt_len = 0;
  int gen_len = 0;
};

Corpus make_corpus(TaskId task, Split split);

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;          // mean loss over the steps since the previous row
  double heldout_acc = 0.0;   // answer accuracy on a fixed held-out sample
};

struct TrainResult {
  Weights weights;
  std::vector<double> step_losses;
  std::vector<TrainLogRow> log;
};

/// Next-token training under causal attention. Throws TrainingError naming the
/// step if the loss becomes non-finite.
TrainResult pretrain_ar(const TrainConfig& config, const Weights& init, const Corpus& corpus);

/// Masked-denoising training starting from `arm`, under full attention, with
/// loss on masked generation-region positions only. Zero steps returns `arm`
/// unchanged; otherwise the returned config has attention_mode = full.
TrainResult posttrain_mdm(const TrainConfig& config, const Weights& arm, const Corpus& corpus);

struct EvalMetrics {
  TaskId task = TaskId::kIoi;
  RunMode mode = RunMode::kAr;
  int n = 0;
  double exact_match = 0.0;                 // whole answer correct (greedy)
  std::vector<double> position_accuracy;    // per answer position
  double valid_rate = 0.0;                  // Countdown: decoded equation valid; IOI: equals exact_match
  double logit_diff_mean = 0.0;
  double logit_diff_std = 0.0;
};

/// AR mode decodes greedily; MDM mode runs decode_mdm with the task's steps.
/// MDM evaluation of weights trained only with causal attention is a usage
/// error.
EvalMetrics eval_task(const Weights& weights, TaskId task, RunMode mode, Split split, int n, std::uint64_t seed);

/// Single-pass answer accuracy with the whole generation region given (AR:
/// teacher forcing; MDM: everything masked). Used for training logs.
double quick_accuracy(const Weights& weights, const std::vector<PromptPair>& pairs, RunMode mode);

/// Smoothed monotonicity: block means over consecutive `window`-step blocks
/// must not increase by more than rel_tol * previous + abs_tol. Returns the
/// first offending block start, or -1.
int loss_window_violation(const std::vector<double>& step_losses, int window = 500, double rel_tol = 0.1,
                          double abs_tol = 0.02);

std::string training_log_csv(const std::vector<TrainLogRow>& log);

}  // namespace mechshift
