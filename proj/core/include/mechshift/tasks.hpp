#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mechshift/autodiff.hpp"
#include "mechshift/tensor.hpp"

namespace mechshift {

enum class TaskId { kIoi, kCountdown };
std::string_view to_string(TaskId task);
TaskId parse_task(std::string_view s);

/// How a model reads a prompt: left-to-right with teacher forcing, or with the
/// generation region masked.
enum class RunMode { kAr, kMdm };
std::string_view to_string(RunMode mode);
RunMode parse_run_mode(std::string_view s);

class Vocabulary {
 public:
  static const Vocabulary& standard();

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains(std::string_view token) const { return ids_.contains(std::string(token)); }

  int pad_id() const { return 0; }
  int mask_id() const { return 1; }
  int bos_id() const { return 2; }

  const std::vector<int>& names() const { return names_; }
  const std::vector<int>& places() const { return places_; }
  const std::vector<int>& objects() const { return objects_; }
  /// Every id except PAD and MASK.
  const std::vector<int>& content_ids() const { return content_; }

  int number_id(int value) const;
  bool is_number(int id) const;
  int number_value(int id) const;
  static constexpr int kMinNumber = -8;
  static constexpr int kMaxNumber = 81;

  std::string detokenize(std::span<const int> ids) const;

 private:
  Vocabulary();
  int add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::vector<int> names_, places_, objects_, content_;
  int first_number_ = 0;
};

enum class Split { kTrain, kHeldout, kAll };
std::string_view to_string(Split split);

struct PromptPair {
  TaskId task = TaskId::kIoi;
  /// Full sequences: prompt followed by the generation region filled with the
  /// respective correct answer.
  std::vector<int> clean;
  std::vector<int> corrupt;
  std::vector<int> answer;          // clean answer tokens, length gen_len
  std::vector<int> corrupt_answer;  // corrupt answer tokens, length gen_len
  std::vector<int> distractor;      // IOI: the subject; Countdown: corrupt tokens where they differ
  std::vector<int> answer_positions;
  std::vector<int> corruption_positions;
  int prompt_len = 0;
  int gen_len = 1;
  int steps = 1;

  std::vector<int> clean_prompt() const { return {clean.begin(), clean.begin() + prompt_len}; }
  std::vector<int> corrupt_prompt() const { return {corrupt.begin(), corrupt.begin() + prompt_len}; }
};

/// Throws CapacityError when n exceeds the number of distinct instances in
/// the split. Pure in (n, seed, split).
std::vector<PromptPair> gen_ioi(int n, std::uint64_t seed, Split split = Split::kAll);
std::vector<PromptPair> gen_countdown(int n, std::uint64_t seed, Split split = Split::kAll);
std::vector<PromptPair> gen_task(TaskId task, int n, std::uint64_t seed, Split split = Split::kAll);
int task_capacity(TaskId task, Split split);

/// Every distinct clean sequence of a split in canonical order (training corpus).
std::vector<std::vector<int>> task_corpus(TaskId task, Split split);
int task_prompt_len(TaskId task);
int task_gen_len(TaskId task);

/// Which logits the task metric reads and how.
struct MetricSpec {
  enum class Kind { kLogitDiff, kMargin };
  Kind kind = Kind::kLogitDiff;
  std::vector<int> rows;
  std::vector<int> targets;      // correct token per row
  std::vector<int> distractors;  // per row (kLogitDiff)
  std::vector<int> competitors;  // candidate incorrect tokens (kMargin)
};

/// Input tokens a model of the given mode sees for a pair: AR drops the last
/// token (teacher forcing), MDM masks the generation region.
std::vector<int> analysis_tokens(const PromptPair& pair, RunMode mode, bool corrupt);
/// Logit row that predicts absolute position `position`.
int readout_row(RunMode mode, int position);

/// Metric over the given answer positions (defaults to all of them).
MetricSpec metric_spec(const PromptPair& pair, RunMode mode, std::span<const int> positions = {});

float metric_value(const Tensor& logits, const MetricSpec& spec);
Var metric_var(Var logits, const MetricSpec& spec);

/// Task metric on logits laid out for `mode`. IOI: logit(answer) minus
/// logit(distractor). Countdown: mean over answer positions of the correct
/// token's logit minus the best incorrect content token's logit.
float metric_logit_diff(const Tensor& logits, const PromptPair& pair, RunMode mode = RunMode::kAr);

/// True when a decoded Countdown generation region is "a op b = t" with the
/// prompt's operands in order and a op b == t.
bool countdown_valid(std::span<const int> prompt, std::span<const int> generated);

/// One JSON object per pair: token-id arrays plus detokenised strings.
std::string dump_pairs(const std::vector<PromptPair>& pairs);

}  // namespace mechshift
