#include "mechshift/training.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mechshift/errors.hpp"
#include "mechshift/io.hpp"

namespace mechshift {

namespace {

struct Batch {
  std::vector<int> tokens;
  std::vector<int> targets;
  int seq_len = 0;
};

struct AdamState {
  std::vector<std::vector<float>> m, v;
  long t = 0;
};

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

void adam_update(const TrainConfig& c, float lr, AdamState& st, const std::vector<Tensor*>& params,
                 const std::vector<Var>& vars) {
  if (st.m.empty()) {
    for (const Tensor* p : params) {
      st.m.emplace_back(p->size(), 0.0f);
      st.v.emplace_back(p->size(), 0.0f);
    }
  }
  double norm_sq = 0.0;
  for (const Var& v : vars) {
    for (float g : v.grad().data()) norm_sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(norm_sq);
  const float clip = c.grad_clip > 0.0f && norm > c.grad_clip ? static_cast<float>(c.grad_clip / norm) : 1.0f;
  ++st.t;
  const float bc1 = 1.0f - std::pow(c.beta1, static_cast<float>(st.t));
  const float bc2 = 1.0f - std::pow(c.beta2, static_cast<float>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->data();
    auto g = vars[i].grad().data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    const float decay = params[i]->rank() == 2 ? c.weight_decay : 0.0f;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const float gj = g[j] * clip;
      m[j] = c.beta1 * m[j] + (1.0f - c.beta1) * gj;
      v[j] = c.beta2 * v[j] + (1.0f - c.beta2) * gj * gj;
      const float mhat = m[j] / bc1;
      const float vhat = v[j] / bc2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + c.epsilon) + decay * w[j]);
    }
  }
}

float scheduled_lr(const TrainConfig& c, float lr, int step) {
  if (step <= c.warmup_steps) return lr * static_cast<float>(step) / static_cast<float>(c.warmup_steps);
  const double span = std::max(1, c.steps - c.warmup_steps);
  const double progress = static_cast<double>(step - c.warmup_steps) / span;
  const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
  return static_cast<float>(lr * (c.min_lr_fraction + (1.0 - c.min_lr_fraction) * cosine));
}

template <typename MakeBatch>
TrainResult train_loop(const TrainConfig& c, Weights weights, float lr, AttentionMode mode, RunMode eval_mode,
                       TaskId task, MakeBatch make_batch) {
  TrainResult result;
  std::mt19937_64 rng(c.seed);
  AdamState adam;
  const int eval_n = std::min(c.eval_samples, task_capacity(task, Split::kHeldout));
  const auto eval_pairs = gen_task(task, eval_n, 0x5eedULL, Split::kHeldout);
  double window_loss = 0.0;
  int window_steps = 0;
  for (int step = 1; step <= c.steps; ++step) {
    const Batch batch = make_batch(rng);
    Tape tape;
    const ParamVars p = bind_params(tape, weights, true);
    const Var logits = run_batched(p, weights.config, batch.tokens, batch.seq_len, mode);
    const Var loss = cross_entropy(logits, batch.targets);
    const float value = loss.value().item();
    if (!std::isfinite(value)) {
      throw TrainingError("loss became non-finite at step " + std::to_string(step));
    }
    tape.backward(loss);
    std::vector<Tensor*> params;
    for (auto& [name, t] : weights.named_tensors()) params.push_back(t);
    adam_update(c, scheduled_lr(c, lr, step), adam, params, p.all());
    result.step_losses.push_back(value);
    window_loss += value;
    ++window_steps;
    if (step % c.log_every == 0 || step == c.steps) {
      TrainLogRow row;
      row.step = step;
      row.loss = window_loss / window_steps;
      row.heldout_acc = quick_accuracy(weights, eval_pairs, eval_mode);
      result.log.push_back(row);
      window_loss = 0.0;
      window_steps = 0;
    }
  }
  for (auto& [name, t] : weights.named_tensors()) {
    if (!t->all_finite()) throw TrainingError("parameter " + name + " became non-finite");
  }
  result.weights = std::move(weights);
  return result;
}

int argmax_content(std::span<const float> row, int pad_id, int mask_id) {
  int best = -1;
  for (int t = 0; t < static_cast<int>(row.size()); ++t) {
    if (t == pad_id || t == mask_id) continue;
    if (best < 0 || row[static_cast<std::size_t>(t)] > row[static_cast<std::size_t>(best)]) best = t;
  }
  return best;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0f)) throw ConfigError("learning rate must be > 0");
  if (steps < 0) throw ConfigError("step budget must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f)) throw ConfigError("Adam betas must lie in [0,1)");
  if (!(epsilon > 0.0f)) throw ConfigError("Adam epsilon must be > 0");
  if (weight_decay < 0.0f) throw ConfigError("weight decay must be >= 0");
  if (!(mask_ratio_min >= 0.0f && mask_ratio_min < mask_ratio_max && mask_ratio_max <= 1.0f)) {
    throw ConfigError("mask ratio range must satisfy 0 <= min < max <= 1");
  }
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (!(min_lr_fraction >= 0.0f && min_lr_fraction <= 1.0f)) throw ConfigError("min_lr_fraction must lie in [0,1]");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
}

Corpus make_corpus(TaskId task, Split split) {
  Corpus c;
  c.task = task;
  c.sequences = task_corpus(task, split);
  c.prompt_len = task_prompt_len(task);
  c.gen_len = task_gen_len(task);
  return c;
}

TrainResult pretrain_ar(const TrainConfig& config, const Weights& init, const Corpus& corpus) {
  config.validate();
  if (corpus.sequences.empty()) throw UsageError("empty training corpus");
  for (const auto& seq : corpus.sequences) {
    if (seq.size() != corpus.sequences.front().size()) throw UsageError("corpus sequences must share one length");
  }
  if (config.steps == 0) return {init, {}, {}};
  Weights w = init;
  w.config.attention_mode = AttentionMode::kCausal;
  const int len = static_cast<int>(corpus.sequences.front().size());
  auto make_batch = [&](std::mt19937_64& rng) {
    Batch b;
    b.seq_len = len - 1;
    for (int i = 0; i < config.batch_size; ++i) {
      const auto& seq = corpus.sequences[rng() % corpus.sequences.size()];
      b.tokens.insert(b.tokens.end(), seq.begin(), seq.end() - 1);
      for (int t = 1; t < len; ++t) {
        const int target = seq[static_cast<std::size_t>(t)];
        b.targets.push_back(target == w.config.pad_id ? -1 : target);
      }
    }
    return b;
  };
  return train_loop(config, std::move(w), config.learning_rate, AttentionMode::kCausal, RunMode::kAr, corpus.task,
                    make_batch);
}

TrainResult posttrain_mdm(const TrainConfig& config, const Weights& arm, const Corpus& corpus) {
  config.validate();
  if (corpus.sequences.empty()) throw UsageError("empty training corpus");
  for (const auto& seq : corpus.sequences) {
    if (seq.size() != corpus.sequences.front().size()) throw UsageError("corpus sequences must share one length");
  }
  if (config.steps == 0) return {arm, {}, {}};
  Weights w = arm;
  w.config.attention_mode = AttentionMode::kFull;
  const int len = static_cast<int>(corpus.sequences.front().size());
  const int mask_id = w.config.mask_id;
  auto make_batch = [&](std::mt19937_64& rng) {
    Batch b;
    b.seq_len = len;
    std::vector<int> region(static_cast<std::size_t>(corpus.gen_len));
    for (int i = 0; i < config.batch_size; ++i) {
      const auto& seq = corpus.sequences[rng() % corpus.sequences.size()];
      const double u = uniform01(rng);
      const double r = config.mask_ratio_max - u * (config.mask_ratio_max - config.mask_ratio_min);
      const int k = std::clamp(static_cast<int>(std::ceil(r * corpus.gen_len)), 1, corpus.gen_len);
      for (int j = 0; j < corpus.gen_len; ++j) region[static_cast<std::size_t>(j)] = corpus.prompt_len + j;
      for (int j = 0; j < k; ++j) {
        const auto pick = static_cast<std::size_t>(j) + static_cast<std::size_t>(rng() % (region.size() - j));
        std::swap(region[static_cast<std::size_t>(j)], region[pick]);
      }
      const std::size_t base = b.tokens.size();
      b.tokens.insert(b.tokens.end(), seq.begin(), seq.end());
      b.targets.insert(b.targets.end(), static_cast<std::size_t>(len), -1);
      for (int j = 0; j < k; ++j) {
        const std::size_t pos = base + static_cast<std::size_t>(region[static_cast<std::size_t>(j)]);
        b.targets[pos] = b.tokens[pos];
        b.tokens[pos] = mask_id;
      }
    }
    return b;
  };
  return train_loop(config, std::move(w), config.learning_rate, AttentionMode::kFull, RunMode::kMdm, corpus.task,
                    make_batch);
}

double quick_accuracy(const Weights& weights, const std::vector<PromptPair>& pairs, RunMode mode) {
  if (pairs.empty()) return 0.0;
  std::vector<int> tokens;
  int seq_len = 0;
  for (const PromptPair& pair : pairs) {
    const auto seq = analysis_tokens(pair, mode, false);
    seq_len = static_cast<int>(seq.size());
    tokens.insert(tokens.end(), seq.begin(), seq.end());
  }
  Tape tape;
  const ParamVars p = bind_params(tape, weights, false);
  const Var logits = run_batched(p, weights.config, tokens, seq_len,
                                 mode == RunMode::kAr ? AttentionMode::kCausal : AttentionMode::kFull);
  const Tensor& l = logits.value();
  int correct = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < pairs[i].answer_positions.size(); ++j) {
      const int row = static_cast<int>(i) * seq_len + readout_row(mode, pairs[i].answer_positions[j]);
      if (argmax_content(l.row(row), weights.config.pad_id, weights.config.mask_id) != pairs[i].answer[j]) ok = false;
    }
    correct += ok ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

EvalMetrics eval_task(const Weights& weights, TaskId task, RunMode mode, Split split, int n, std::uint64_t seed) {
  if (mode == RunMode::kMdm && weights.config.attention_mode != AttentionMode::kFull) {
    throw UsageError("MDM evaluation requires weights post-trained with full attention");
  }
  const auto pairs = gen_task(task, n, seed, split);
  EvalMetrics m;
  m.task = task;
  m.mode = mode;
  m.n = static_cast<int>(pairs.size());
  const int gen_len = task_gen_len(task);
  m.position_accuracy.assign(static_cast<std::size_t>(gen_len), 0.0);
  int exact = 0;
  int valid = 0;
  double diff_sum = 0.0;
  double diff_sq = 0.0;
  for (const PromptPair& pair : pairs) {
    const auto prompt = pair.clean_prompt();
    std::vector<int> generated;
    if (mode == RunMode::kAr) {
      const auto out = decode_ar(weights, prompt, pair.gen_len);
      generated.assign(out.begin() + pair.prompt_len, out.end());
    } else {
      const auto out = decode_mdm(weights, prompt, pair.gen_len, pair.steps);
      generated.assign(out.tokens.begin() + pair.prompt_len, out.tokens.end());
    }
    bool all = true;
    for (int j = 0; j < gen_len; ++j) {
      const bool ok = generated[static_cast<std::size_t>(j)] == pair.answer[static_cast<std::size_t>(j)];
      m.position_accuracy[static_cast<std::size_t>(j)] += ok ? 1.0 : 0.0;
      all = all && ok;
    }
    exact += all ? 1 : 0;
    const bool is_valid = task == TaskId::kCountdown ? countdown_valid(prompt, generated) : all;
    valid += is_valid ? 1 : 0;
    const auto tokens = analysis_tokens(pair, mode, false);
    const Tensor logits =
        forward(weights, tokens, mode == RunMode::kAr ? AttentionMode::kCausal : AttentionMode::kFull).logits;
    const double d = metric_logit_diff(logits, pair, mode);
    diff_sum += d;
    diff_sq += d * d;
  }
  const double N = static_cast<double>(m.n);
  m.exact_match = exact / N;
  m.valid_rate = valid / N;
  for (double& a : m.position_accuracy) a /= N;
  m.logit_diff_mean = diff_sum / N;
  m.logit_diff_std = std::sqrt(std::max(0.0, diff_sq / N - m.logit_diff_mean * m.logit_diff_mean));
  return m;
}

int loss_window_violation(const std::vector<double>& losses, int window, double rel_tol, double abs_tol) {
  if (window < 1) throw ParameterError("window must be >= 1");
  const int blocks = static_cast<int>(losses.size()) / window;
  double prev = 0.0;
  for (int b = 0; b < blocks; ++b) {
    double s = 0.0;
    for (int i = 0; i < window; ++i) s += losses[static_cast<std::size_t>(b * window + i)];
    const double mean = s / window;
    if (b > 0 && mean > prev + rel_tol * std::abs(prev) + abs_tol) return b * window;
    prev = mean;
  }
  return -1;
}

std::string training_log_csv(const std::vector<TrainLogRow>& log) {
  std::string out = "step,loss,heldout_acc\n";
  for (const TrainLogRow& r : log) {
    out += std::to_string(r.step) + "," + format_float(r.loss, 6) + "," + format_float(r.heldout_acc, 6) + "\n";
  }
  return out;
}

}  // namespace mechshift
