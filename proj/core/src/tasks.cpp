#include "mechshift/tasks.hpp"

#include <algorithm>
#include <limits>
#include <random>

#include "json.hpp"
#include "mechshift/errors.hpp"

namespace mechshift {

namespace {

constexpr const char* kNames[] = {"Mary", "John", "Alice", "Bob",  "Carol", "David", "Emma", "Frank",
                                  "Grace", "Henry", "Irene", "Jack", "Kate", "Leo",   "Nina", "Oscar"};
constexpr const char* kPlaces[] = {"store", "park", "school", "office", "garden", "beach", "library", "market"};
constexpr const char* kObjects[] = {"book", "ball", "apple", "pen", "cup", "key", "ring", "drink"};
constexpr const char* kOps[] = {"+", "-", "*"};

constexpr int kHeldoutModulus = 5;  // one in five instances is held out

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool in_split(std::uint64_t key, Split split) {
  if (split == Split::kAll) return true;
  const bool heldout = splitmix64(key) % kHeldoutModulus == 0;
  return heldout == (split == Split::kHeldout);
}

int apply_op(int a, int op, int b) {
  switch (op) {
    case 0:
      return a + b;
    case 1:
      return a - b;
    default:
      return a * b;
  }
}

struct IoiInstance {
  int a, b, place, object, order;  // order 0: subject is b; 1: subject is a
};

struct CountdownInstance {
  int a, b, op, alt;
};

std::vector<IoiInstance> ioi_instances(Split split) {
  std::vector<IoiInstance> out;
  const int n_names = static_cast<int>(std::size(kNames));
  for (int a = 0; a < n_names; ++a)
    for (int b = 0; b < n_names; ++b) {
      if (a == b) continue;
      for (int p = 0; p < 8; ++p)
        for (int o = 0; o < 8; ++o)
          for (int order = 0; order < 2; ++order) {
            const std::uint64_t key = ((((static_cast<std::uint64_t>(a) * 16 + b) * 8 + p) * 8 + o) * 2 + order);
            if (in_split(key, split)) out.push_back({a, b, p, o, order});
          }
    }
  return out;
}

bool countdown_pair_allowed(int a, int b) {
  // Every operator must give a distinct result so the answer is unique.
  return apply_op(a, 0, b) != apply_op(a, 1, b) && apply_op(a, 0, b) != apply_op(a, 2, b) &&
         apply_op(a, 1, b) != apply_op(a, 2, b);
}

std::vector<CountdownInstance> countdown_instances(Split split, bool with_alternatives) {
  std::vector<CountdownInstance> out;
  for (int a = 1; a <= 9; ++a)
    for (int b = 1; b <= 9; ++b) {
      if (!countdown_pair_allowed(a, b)) continue;
      for (int op = 0; op < 3; ++op) {
        const std::uint64_t key = 0x1000000ULL + static_cast<std::uint64_t>((a * 16 + b) * 4 + op);
        if (!in_split(key, split)) continue;
        for (int alt = 0; alt < 3; ++alt) {
          if (alt == op) continue;
          out.push_back({a, b, op, alt});
          if (!with_alternatives) break;
        }
      }
    }
  return out;
}

PromptPair make_ioi(const IoiInstance& in) {
  const Vocabulary& v = Vocabulary::standard();
  const int a = v.names()[static_cast<std::size_t>(in.a)];
  const int b = v.names()[static_cast<std::size_t>(in.b)];
  const int subject = in.order == 0 ? b : a;
  const int io = in.order == 0 ? a : b;
  auto seq = [&](int s, int answer) {
    return std::vector<int>{v.bos_id(), v.id("When"), a,          v.id("and"), b,
                            v.id("went"), v.id("to"), v.id("the"), v.places()[static_cast<std::size_t>(in.place)],
                            v.id(","),    s,          v.id("gave"), v.id("a"),
                            v.objects()[static_cast<std::size_t>(in.object)], v.id("to"), answer};
  };
  PromptPair p;
  p.task = TaskId::kIoi;
  p.clean = seq(subject, io);
  p.corrupt = seq(io, subject);
  p.answer = {io};
  p.corrupt_answer = {subject};
  p.distractor = {subject};
  p.prompt_len = static_cast<int>(p.clean.size()) - 1;
  p.answer_positions = {p.prompt_len};
  p.corruption_positions = {10, p.prompt_len};
  p.gen_len = 1;
  p.steps = 1;
  return p;
}

std::vector<int> countdown_sequence(int a, int b, int op, int target) {
  const Vocabulary& v = Vocabulary::standard();
  return {v.bos_id(),       v.id("nums"),     v.number_id(a),       v.number_id(b),
          v.id("target"),   v.number_id(target), v.id(":"),        v.number_id(a),
          v.id(kOps[op]),   v.number_id(b),   v.id("="),            v.number_id(target)};
}

PromptPair make_countdown(const CountdownInstance& in) {
  const int t = apply_op(in.a, in.op, in.b);
  const int t_alt = apply_op(in.a, in.alt, in.b);
  PromptPair p;
  p.task = TaskId::kCountdown;
  p.clean = countdown_sequence(in.a, in.b, in.op, t);
  p.corrupt = countdown_sequence(in.a, in.b, in.alt, t_alt);
  p.prompt_len = 7;
  p.gen_len = 5;
  p.steps = 5;
  for (int i = 0; i < p.gen_len; ++i) {
    const int pos = p.prompt_len + i;
    p.answer_positions.push_back(pos);
    p.answer.push_back(p.clean[static_cast<std::size_t>(pos)]);
    p.corrupt_answer.push_back(p.corrupt[static_cast<std::size_t>(pos)]);
  }
  for (int pos = 0; pos < static_cast<int>(p.clean.size()); ++pos) {
    if (p.clean[static_cast<std::size_t>(pos)] != p.corrupt[static_cast<std::size_t>(pos)]) {
      p.corruption_positions.push_back(pos);
      if (pos >= p.prompt_len) p.distractor.push_back(p.corrupt[static_cast<std::size_t>(pos)]);
    }
  }
  return p;
}

template <typename T>
std::vector<T> sample_without_replacement(std::vector<T> pool, int n, std::uint64_t seed, std::string_view what) {
  if (n < 1) throw ParameterError("n must be >= 1");
  if (n > static_cast<int>(pool.size())) {
    throw CapacityError("requested " + std::to_string(n) + " " + std::string(what) + " pairs but only " +
                        std::to_string(pool.size()) + " distinct instances exist in this split");
  }
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates with explicit modulo draws keeps the output
  // independent of the standard library's distribution implementations.
  for (int i = 0; i < n; ++i) {
    const std::uint64_t span = pool.size() - static_cast<std::size_t>(i);
    const auto j = static_cast<std::size_t>(i) + static_cast<std::size_t>(rng() % span);
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(n));
  return pool;
}

}  // namespace

std::string_view to_string(TaskId task) { return task == TaskId::kIoi ? "ioi" : "countdown"; }

TaskId parse_task(std::string_view s) {
  if (s == "ioi") return TaskId::kIoi;
  if (s == "countdown") return TaskId::kCountdown;
  throw ConfigError("unknown task '" + std::string(s) + "' (expected ioi or countdown)");
}

std::string_view to_string(RunMode mode) { return mode == RunMode::kAr ? "ar" : "mdm"; }

RunMode parse_run_mode(std::string_view s) {
  if (s == "ar") return RunMode::kAr;
  if (s == "mdm") return RunMode::kMdm;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected ar or mdm)");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kHeldout:
      return "heldout";
    case Split::kAll:
      break;
  }
  return "all";
}

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<mask>");
  add("<bos>");
  for (const char* w : {"When", "and", "went", "to", "the", ",", "gave", "a"}) add(w);
  for (const char* n : kNames) names_.push_back(add(n));
  for (const char* p : kPlaces) places_.push_back(add(p));
  for (const char* o : kObjects) objects_.push_back(add(o));
  for (const char* w : {"nums", "target", ":", "=", "+", "-", "*"}) add(w);
  first_number_ = size();
  for (int n = kMinNumber; n <= kMaxNumber; ++n) add(std::to_string(n));
  for (int i = 0; i < size(); ++i) {
    if (i != pad_id() && i != mask_id()) content_.push_back(i);
  }
}

int Vocabulary::add(std::string token) {
  const int id = size();
  ids_.emplace(token, id);
  tokens_.push_back(std::move(token));
  return id;
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab;
  return vocab;
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) throw UsageError("token '" + std::string(token) + "' is not in the vocabulary");
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::number_id(int value) const {
  if (value < kMinNumber || value > kMaxNumber) {
    throw IndexError("number " + std::to_string(value) + " has no token");
  }
  return first_number_ + value - kMinNumber;
}

bool Vocabulary::is_number(int id) const { return id >= first_number_ && id < first_number_ + (kMaxNumber - kMinNumber + 1); }

int Vocabulary::number_value(int id) const {
  if (!is_number(id)) throw UsageError("token '" + token(id) + "' is not a number");
  return id - first_number_ + kMinNumber;
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::vector<PromptPair> gen_ioi(int n, std::uint64_t seed, Split split) {
  std::vector<PromptPair> out;
  for (const IoiInstance& in : sample_without_replacement(ioi_instances(split), n, seed, "IOI")) {
    out.push_back(make_ioi(in));
  }
  return out;
}

std::vector<PromptPair> gen_countdown(int n, std::uint64_t seed, Split split) {
  std::vector<PromptPair> out;
  for (const CountdownInstance& in :
       sample_without_replacement(countdown_instances(split, true), n, seed, "Countdown")) {
    out.push_back(make_countdown(in));
  }
  return out;
}

std::vector<PromptPair> gen_task(TaskId task, int n, std::uint64_t seed, Split split) {
  return task == TaskId::kIoi ? gen_ioi(n, seed, split) : gen_countdown(n, seed, split);
}

int task_capacity(TaskId task, Split split) {
  return static_cast<int>(task == TaskId::kIoi ? ioi_instances(split).size()
                                                 : countdown_instances(split, true).size());
}

std::vector<std::vector<int>> task_corpus(TaskId task, Split split) {
  std::vector<std::vector<int>> out;
  if (task == TaskId::kIoi) {
    for (const IoiInstance& in : ioi_instances(split)) out.push_back(make_ioi(in).clean);
  } else {
    for (const CountdownInstance& in : countdown_instances(split, false)) out.push_back(make_countdown(in).clean);
    // Bare equations with a PAD prompt supply the arithmetic table itself.
    const Vocabulary& v = Vocabulary::standard();
    for (int a = 1; a <= 9; ++a)
      for (int b = 1; b <= 9; ++b)
        for (int op = 0; op < 3; ++op) {
          std::vector<int> seq = countdown_sequence(a, b, op, apply_op(a, op, b));
          std::fill(seq.begin(), seq.begin() + 7, v.pad_id());
          out.push_back(std::move(seq));
        }
  }
  return out;
}

int task_prompt_len(TaskId task) { return task == TaskId::kIoi ? 15 : 7; }
int task_gen_len(TaskId task) { return task == TaskId::kIoi ? 1 : 5; }

std::vector<int> analysis_tokens(const PromptPair& pair, RunMode mode, bool corrupt) {
  std::vector<int> seq = corrupt ? pair.corrupt : pair.clean;
  if (mode == RunMode::kAr) {
    seq.pop_back();
  } else {
    for (int pos : pair.answer_positions) seq[static_cast<std::size_t>(pos)] = Vocabulary::standard().mask_id();
  }
  return seq;
}

int readout_row(RunMode mode, int position) { return mode == RunMode::kAr ? position - 1 : position; }

MetricSpec metric_spec(const PromptPair& pair, RunMode mode, std::span<const int> positions) {
  std::vector<int> chosen(positions.begin(), positions.end());
  if (chosen.empty()) chosen = pair.answer_positions;
  MetricSpec spec;
  spec.kind = pair.task == TaskId::kIoi ? MetricSpec::Kind::kLogitDiff : MetricSpec::Kind::kMargin;
  for (int pos : chosen) {
    const auto it = std::find(pair.answer_positions.begin(), pair.answer_positions.end(), pos);
    if (it == pair.answer_positions.end()) {
      throw UsageError("position " + std::to_string(pos) + " is not an answer position");
    }
    const auto j = static_cast<std::size_t>(it - pair.answer_positions.begin());
    spec.rows.push_back(readout_row(mode, pos));
    spec.targets.push_back(pair.answer[j]);
    if (spec.kind == MetricSpec::Kind::kLogitDiff) spec.distractors.push_back(pair.distractor.at(j));
  }
  if (spec.kind == MetricSpec::Kind::kMargin) spec.competitors = Vocabulary::standard().content_ids();
  return spec;
}

namespace {

void check_rows(int n_rows, int n_cols, const MetricSpec& spec) {
  if (spec.rows.empty()) throw UsageError("metric has no answer position");
  for (std::size_t i = 0; i < spec.rows.size(); ++i) {
    if (spec.rows[i] < 0 || spec.rows[i] >= n_rows) {
      throw UsageError("logits do not cover answer readout row " + std::to_string(spec.rows[i]));
    }
    if (spec.targets[i] < 0 || spec.targets[i] >= n_cols) throw IndexError("metric target outside vocabulary");
  }
}

std::vector<int> competitors_without(const std::vector<int>& all, int target) {
  std::vector<int> out;
  out.reserve(all.size());
  for (int c : all) {
    if (c != target) out.push_back(c);
  }
  return out;
}

}  // namespace

float metric_value(const Tensor& logits, const MetricSpec& spec) {
  check_rows(logits.rows(), logits.cols(), spec);
  float total = 0.0f;
  for (std::size_t i = 0; i < spec.rows.size(); ++i) {
    const int r = spec.rows[i];
    float other;
    if (spec.kind == MetricSpec::Kind::kLogitDiff) {
      other = logits.at(r, spec.distractors[i]);
    } else {
      other = -std::numeric_limits<float>::infinity();
      for (int c : competitors_without(spec.competitors, spec.targets[i])) other = std::max(other, logits.at(r, c));
    }
    const float term = logits.at(r, spec.targets[i]) - other;
    total = i == 0 ? term : total + term;
  }
  return total * (1.0f / static_cast<float>(spec.rows.size()));
}

Var metric_var(Var logits, const MetricSpec& spec) {
  const Tensor& value = logits.value();
  check_rows(value.rows(), value.cols(), spec);
  std::vector<Var> terms;
  for (std::size_t i = 0; i < spec.rows.size(); ++i) {
    const int r = spec.rows[i];
    const Var target = element(logits, r, spec.targets[i]);
    if (spec.kind == MetricSpec::Kind::kLogitDiff) {
      terms.push_back(sub(target, element(logits, r, spec.distractors[i])));
    } else {
      const auto others = competitors_without(spec.competitors, spec.targets[i]);
      terms.push_back(sub(target, max_element(logits, r, others)));
    }
  }
  return scale(add_n(terms), 1.0f / static_cast<float>(terms.size()));
}

float metric_logit_diff(const Tensor& logits, const PromptPair& pair, RunMode mode) {
  return metric_value(logits, metric_spec(pair, mode));
}

bool countdown_valid(std::span<const int> prompt, std::span<const int> generated) {
  const Vocabulary& v = Vocabulary::standard();
  if (prompt.size() < 7 || generated.size() != 5) return false;
  const int a = prompt[2], b = prompt[3], t = prompt[5];
  if (generated[0] != a || generated[2] != b || generated[3] != v.id("=") || generated[4] != t) return false;
  if (!v.is_number(a) || !v.is_number(b) || !v.is_number(t)) return false;
  for (int op = 0; op < 3; ++op) {
    if (generated[1] == v.id(kOps[op])) {
      return apply_op(v.number_value(a), op, v.number_value(b)) == v.number_value(t);
    }
  }
  return false;
}

std::string dump_pairs(const std::vector<PromptPair>& pairs) {
  const Vocabulary& v = Vocabulary::standard();
  std::string out;
  for (const PromptPair& p : pairs) {
    nlohmann::ordered_json j;
    j["task"] = std::string(to_string(p.task));
    j["clean"] = p.clean;
    j["corrupt"] = p.corrupt;
    j["answer"] = p.answer;
    j["distractor"] = p.distractor;
    j["positions"] = p.answer_positions;
    j["corruption_positions"] = p.corruption_positions;
    j["gen_len"] = p.gen_len;
    j["steps"] = p.steps;
    j["clean_text"] = v.detokenize(p.clean);
    j["corrupt_text"] = v.detokenize(p.corrupt);
    j["answer_text"] = v.detokenize(p.answer);
    j["distractor_text"] = v.detokenize(p.distractor);
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace mechshift
