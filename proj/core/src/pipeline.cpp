#include "mechshift/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fmt/format.h>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "mechshift/checkpoint.hpp"
#include "mechshift/compare.hpp"
#include "mechshift/errors.hpp"
#include "mechshift/interpret.hpp"
#include "mechshift/io.hpp"

namespace mechshift {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(sep, start);
    out.push_back(trim(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start)));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(fmt::format("{}: '{}' is not a valid number", key, v));
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(fmt::format("{}: '{}' is not a boolean", key, v));
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field number_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<T>(k, v); },
          [member](const RunConfig& c) {
            return fmt::format("{}", c.*member);
          }};
}

template <typename S, typename T>
Field nested_field(S RunConfig::*outer, T S::*member) {
  return {[outer, member](RunConfig& c, const std::string& k, const std::string& v) {
            (c.*outer).*member = parse_number<T>(k, v);
          },
          [outer, member](const RunConfig& c) {
            return fmt::format("{}", (c.*outer).*member);
          }};
}

Field bool_field(bool RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_bool(k, v); },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

void add_train_fields(std::vector<std::pair<std::string, Field>>& f, const std::string& prefix,
                      TrainConfig RunConfig::*t) {
  f.emplace_back(prefix + ".learning_rate", nested_field(t, &TrainConfig::learning_rate));
  f.emplace_back(prefix + ".beta1", nested_field(t, &TrainConfig::beta1));
  f.emplace_back(prefix + ".beta2", nested_field(t, &TrainConfig::beta2));
  f.emplace_back(prefix + ".epsilon", nested_field(t, &TrainConfig::epsilon));
  f.emplace_back(prefix + ".grad_clip", nested_field(t, &TrainConfig::grad_clip));
  f.emplace_back(prefix + ".weight_decay", nested_field(t, &TrainConfig::weight_decay));
  f.emplace_back(prefix + ".warmup_steps", nested_field(t, &TrainConfig::warmup_steps));
  f.emplace_back(prefix + ".min_lr_fraction", nested_field(t, &TrainConfig::min_lr_fraction));
  f.emplace_back(prefix + ".batch_size", nested_field(t, &TrainConfig::batch_size));
  f.emplace_back(prefix + ".mask_ratio_min", nested_field(t, &TrainConfig::mask_ratio_min));
  f.emplace_back(prefix + ".mask_ratio_max", nested_field(t, &TrainConfig::mask_ratio_max));
  f.emplace_back(prefix + ".log_every", nested_field(t, &TrainConfig::log_every));
  f.emplace_back(prefix + ".eval_samples", nested_field(t, &TrainConfig::eval_samples));
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const auto table = [] {
    std::vector<std::pair<std::string, Field>> f;
    f.emplace_back("tasks", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                    c.tasks.clear();
                                    for (const auto& t : split(v, ',')) {
                                      try {
                                        c.tasks.push_back(parse_task(t));
                                      } catch (const Error&) {
                                        throw ConfigError(fmt::format("{}: unknown task '{}'", k, t));
                                      }
                                    }
                                  },
                                  [](const RunConfig& c) {
                                    std::string s;
                                    for (TaskId t : c.tasks) s += (s.empty() ? "" : ",") + std::string(to_string(t));
                                    return s;
                                  }});
    f.emplace_back("seeds", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                    c.seeds.clear();
                                    for (const auto& s : split(v, ',')) c.seeds.push_back(parse_number<std::uint64_t>(k, s));
                                  },
                                  [](const RunConfig& c) {
                                    std::string s;
                                    for (auto x : c.seeds) s += (s.empty() ? "" : ",") + std::to_string(x);
                                    return s;
                                  }});
    f.emplace_back("out", Field{[](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
                                [](const RunConfig& c) { return c.out_dir.string(); }});
    f.emplace_back("model.n_layers", nested_field(&RunConfig::model, &ModelConfig::n_layers));
    f.emplace_back("model.n_heads", nested_field(&RunConfig::model, &ModelConfig::n_heads));
    f.emplace_back("model.d_model", nested_field(&RunConfig::model, &ModelConfig::d_model));
    f.emplace_back("model.d_head", nested_field(&RunConfig::model, &ModelConfig::d_head));
    f.emplace_back("model.d_mlp", nested_field(&RunConfig::model, &ModelConfig::d_mlp));
    f.emplace_back("model.max_positions", nested_field(&RunConfig::model, &ModelConfig::max_positions));
    add_train_fields(f, "arm", &RunConfig::arm_train);
    add_train_fields(f, "mdm", &RunConfig::mdm_train);
    f.emplace_back("ioi.arm_steps", nested_field(&RunConfig::ioi_budget, &TaskBudget::arm_steps));
    f.emplace_back("ioi.mdm_steps", nested_field(&RunConfig::ioi_budget, &TaskBudget::mdm_steps));
    f.emplace_back("countdown.arm_steps", nested_field(&RunConfig::countdown_budget, &TaskBudget::arm_steps));
    f.emplace_back("countdown.mdm_steps", nested_field(&RunConfig::countdown_budget, &TaskBudget::mdm_steps));
    f.emplace_back("enforce_targets", bool_field(&RunConfig::enforce_targets));
    f.emplace_back("target.ioi_arm", number_field(&RunConfig::target_ioi_arm));
    f.emplace_back("target.ioi_mdm", number_field(&RunConfig::target_ioi_mdm));
    f.emplace_back("target.countdown_valid", number_field(&RunConfig::target_countdown_valid));
    f.emplace_back("eval_samples", number_field(&RunConfig::eval_samples));
    f.emplace_back("discovery.ig_steps", nested_field(&RunConfig::discovery, &DiscoveryConfig::ig_steps));
    f.emplace_back("discovery.top_n", nested_field(&RunConfig::discovery, &DiscoveryConfig::top_n));
    f.emplace_back("discovery.tau", nested_field(&RunConfig::discovery, &DiscoveryConfig::tau));
    f.emplace_back("discovery.pairs", number_field(&RunConfig::discovery_pairs));
    f.emplace_back("discovery.oracle", bool_field(&RunConfig::oracle));
    f.emplace_back("discovery.sweep_points", number_field(&RunConfig::sweep_points));
    f.emplace_back("compare.top_k", number_field(&RunConfig::top_k));
    f.emplace_back("interpret.lens_top_r", number_field(&RunConfig::lens_top_r));
    f.emplace_back("interpret.lens_prompts", number_field(&RunConfig::lens_prompts));
    f.emplace_back("interpret.lens_examples", number_field(&RunConfig::lens_examples));
    f.emplace_back("interpret.neuron_prompts", number_field(&RunConfig::neuron_prompts));
    f.emplace_back("interpret.neuron_top", number_field(&RunConfig::neuron_top));
    f.emplace_back("interpret.coverage", number_field(&RunConfig::explanation_coverage));
    f.emplace_back("interpret.neuron_memory_budget", number_field(&RunConfig::neuron_memory_budget));
    return f;
  }();
  return table;
}

}  // namespace

RunConfig::RunConfig() {
  model.vocab_size = Vocabulary::standard().size();
  model.pad_id = Vocabulary::standard().pad_id();
  model.mask_id = Vocabulary::standard().mask_id();
  arm_train.learning_rate = 1e-3f;
  arm_train.weight_decay = 1.0f;
  arm_train.batch_size = 16;
  arm_train.min_lr_fraction = 1.0f;
  arm_train.log_every = 250;
  mdm_train = arm_train;
  mdm_train.learning_rate = 1e-4f;
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  std::set<std::string> seen;
  int line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("line {}: expected key=value", line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& f = fields();
    auto it = std::find_if(f.begin(), f.end(), [&](const auto& p) { return p.first == key; });
    if (it == f.end()) throw ConfigError(fmt::format("line {}: unknown key '{}'", line_no, key));
    if (!seen.insert(key).second) throw ConfigError(fmt::format("line {}: duplicate key '{}'", line_no, key));
    it->second.set(c, key, value);
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw FileError("config not found: " + path.string());
  return parse(read_file(path));
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& [key, f] : fields()) out += key + "=" + f.get(*this) + "\n";
  return out;
}

void RunConfig::validate() const {
  if (tasks.empty()) throw ConfigError("tasks must not be empty");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  try {
    model.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (model.vocab_size != Vocabulary::standard().size()) throw ConfigError("model vocabulary must match the task vocabulary");
  for (const TaskBudget& b : {ioi_budget, countdown_budget}) {
    if (b.arm_steps < 0 || b.mdm_steps < 0) throw ConfigError("step budgets must be >= 0");
  }
  auto check_train = [](const TrainConfig& t, const char* name) {
    TrainConfig probe = t;
    probe.steps = std::max(probe.steps, 1);
    try {
      probe.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string(name) + ": " + e.what());
    }
  };
  check_train(arm_train, "arm");
  check_train(mdm_train, "mdm");
  try {
    discovery.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("discovery: ") + e.what());
  }
  if (eval_samples < 1 || discovery_pairs < 1 || sweep_points < 2) throw ConfigError("sample counts must be positive");
  if (top_k < 0) throw ConfigError("compare.top_k must be >= 0");
  if (lens_top_r < 1 || lens_prompts < 1 || lens_examples < 0 || neuron_prompts < 1 || neuron_top < 1) {
    throw ConfigError("interpretation counts must be positive");
  }
  if (!(explanation_coverage > 0.0 && explanation_coverage <= 1.0)) throw ConfigError("interpret.coverage must be in (0, 1]");
  if (neuron_memory_budget < 1) throw ConfigError("interpret.neuron_memory_budget must be >= 1");
  for (double t : {target_ioi_arm, target_ioi_mdm, target_countdown_valid}) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("targets must be in [0, 1]");
  }
}

fs::path RunConfig::stage_dir(TaskId task, std::uint64_t seed) const {
  return out_dir / std::string(to_string(task)) / fmt::format("seed{}", seed);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const FileError*>(&e)) return kExitFile;
  if (dynamic_cast<const TrainingTargetError*>(&e)) return kExitTrainingTarget;
  if (dynamic_cast<const DegeneracyError*>(&e)) return kExitDegeneracy;
  return kExitUsage;
}

// ---------------------------------------------------------------- helpers

namespace {

void say(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << '\n' << std::flush;
}

std::string fmt_num(double v) { return format_float(v, 6); }

std::string join_tokens(const std::vector<int>& ids) {
  const Vocabulary& v = Vocabulary::standard();
  std::string out;
  for (int id : ids) out += (out.empty() ? "" : " ") + v.token(id);
  return out;
}

std::string join_floats(const std::vector<float>& xs) {
  std::string out;
  for (float x : xs) out += (out.empty() ? "" : " ") + fmt_num(x);
  return out;
}

/// Analysis pairs are drawn from the held-out split.
std::vector<PromptPair> analysis_pairs(TaskId task, int n, std::uint64_t seed, std::uint64_t salt) {
  const int cap = task_capacity(task, Split::kHeldout);
  return gen_task(task, std::min(n, cap), seed * 0x9e3779b97f4a7c15ULL + salt, Split::kHeldout);
}

RunMode model_mode(const std::string& model) { return model == "arm" ? RunMode::kAr : RunMode::kMdm; }

fs::path ckpt_path(const fs::path& dir, const std::string& model) { return dir / (model + ".ckpt"); }

EdgeScoreTable read_table(const fs::path& path) {
  if (!fs::exists(path)) throw FileError("missing score table " + path.string());
  return parse_score_table(read_file(path));
}

Circuit read_circuit(const fs::path& path) {
  if (!fs::exists(path)) throw FileError("missing circuit " + path.string());
  return parse_circuit(read_file(path));
}

std::vector<EdgeScoreTable> read_step_tables(const fs::path& dir, TaskId task) {
  std::vector<EdgeScoreTable> out;
  for (int s = 0; s < task_gen_len(task); ++s) {
    out.push_back(read_table(dir / fmt::format("scores_mdm_step{}.tsv", s)));
  }
  return out;
}

CompGraph graph_of(const EdgeScoreTable& t) { return CompGraph(t.n_layers, t.n_heads); }

void check_schema(const CompGraph& g, const Circuit& c, const EdgeScoreTable& t) {
  if (c.n_layers != g.n_layers() || c.n_heads != g.n_heads() || !t.same_schema(g)) {
    throw UsageError("circuit and score files describe different graph schemas");
  }
}

struct TopKSets {
  Circuit arm, mdm;
  EdgeScoreTable arm_table, mdm_table;
  ComponentScore arm_scores, mdm_scores;
  TopK arm_top, mdm_top;
  int k = 0;
};

/// K is the smallest value whose Top-K set is an end-to-end connected
/// circuit that also reaches the faithfulness operating point tau, taken as
/// the larger of the two models' values so both sets have the same size.
TopKSets topk_sets(const RunConfig& config, TaskId task, std::uint64_t seed) {
  const fs::path dir = config.stage_dir(task, seed);
  TopKSets s;
  s.arm_table = read_table(dir / "scores_arm.tsv");
  s.mdm_table = read_table(dir / "scores_mdm_aggregated.tsv");
  s.arm = read_circuit(dir / "circuit_arm.txt");
  s.mdm = read_circuit(dir / "circuit_mdm.txt");
  const CompGraph g = graph_of(s.arm_table);
  check_schema(g, s.arm, s.arm_table);
  check_schema(g, s.mdm, s.mdm_table);
  s.arm_scores = node_scores(s.arm_table, g, s.arm.edges);
  s.mdm_scores = node_scores(s.mdm_table, g, s.mdm.edges);
  if (config.top_k > 0) {
    s.k = config.top_k;
  } else {
    const auto pairs = analysis_pairs(task, config.discovery_pairs, seed, 0xd15c);
    auto pick = [&](const std::string& model, const ComponentScore& sc) {
      const Weights w = load_checkpoint(ckpt_path(dir, model));
      const auto inputs = analysis_inputs(pairs, model_mode(model));
      return connected_top_k(sc, g, [&](const std::vector<Edge>& edges) {
        return faithfulness(w, g, edges, inputs).value >= config.discovery.tau;
      });
    };
    s.k = static_cast<int>(std::max(pick("arm", s.arm_scores).nodes.size(), pick("mdm", s.mdm_scores).nodes.size()));
    s.k = std::max(s.k, 1);
  }
  s.arm_top = top_k_components(s.arm_scores, s.k);
  s.mdm_top = top_k_components(s.mdm_scores, s.k);
  s.arm_scores.k = s.mdm_scores.k = s.k;
  return s;
}

// Minimal RFC 4180 reader for the files this pipeline writes.
std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    any = true;
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
    }
  }
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) out += (i ? "," : "") + csv_field(fields[i]);
  return out + "\n";
}

}  // namespace

// ---------------------------------------------------------------- train

void cmd_train(const RunConfig& config, std::ostream* log) {
  config.validate();
  std::vector<std::string> failures;
  for (std::uint64_t seed : config.seeds) {
    for (TaskId task : config.tasks) {
      const fs::path dir = config.stage_dir(task, seed);
      const std::string tname(to_string(task));
      const TaskBudget budget = config.budget(task);
      const Corpus corpus = make_corpus(task, Split::kTrain);

      TrainConfig arm_cfg = config.arm_train;
      arm_cfg.steps = budget.arm_steps;
      arm_cfg.seed = seed;
      say(log, fmt::format("[{} seed {}] pretraining ARM for {} steps", tname, seed, arm_cfg.steps));
      const TrainResult arm = pretrain_ar(arm_cfg, Weights::random(config.model, seed), corpus);

      TrainConfig mdm_cfg = config.mdm_train;
      mdm_cfg.steps = budget.mdm_steps;
      mdm_cfg.seed = seed + 0x51ed;
      say(log, fmt::format("[{} seed {}] post-training MDM for {} steps", tname, seed, mdm_cfg.steps));
      const TrainResult mdm = posttrain_mdm(mdm_cfg, arm.weights, corpus);

      save_checkpoint(arm.weights, ckpt_path(dir, "arm"));
      save_checkpoint(mdm.weights, ckpt_path(dir, "mdm"));
      write_file_atomic(dir / "arm_train_log.csv", training_log_csv(arm.log));
      write_file_atomic(dir / "mdm_train_log.csv", training_log_csv(mdm.log));

      std::string metrics = "model,mode,n,exact_match,valid_rate,logit_diff_mean,logit_diff_std\n";
      const std::uint64_t eval_seed = seed ^ 0xe7a1;
      auto record = [&](const std::string& model, const EvalMetrics& m) {
        metrics += csv_row({model, std::string(to_string(m.mode)), std::to_string(m.n), fmt_num(m.exact_match),
                            fmt_num(m.valid_rate), fmt_num(m.logit_diff_mean), fmt_num(m.logit_diff_std)});
      };
      const int n_eval = std::min(config.eval_samples, task_capacity(task, Split::kHeldout));
      const EvalMetrics arm_eval = eval_task(arm.weights, task, RunMode::kAr, Split::kHeldout, n_eval, eval_seed);
      record("arm", arm_eval);
      std::optional<EvalMetrics> mdm_eval;
      if (budget.mdm_steps > 0) {
        mdm_eval = eval_task(mdm.weights, task, RunMode::kMdm, Split::kHeldout, n_eval, eval_seed);
        record("mdm", *mdm_eval);
      }
      write_file_atomic(dir / "train_metrics.csv", metrics);
      say(log, fmt::format("[{} seed {}] held-out ARM exact {:.3f} valid {:.3f}{}", tname, seed, arm_eval.exact_match,
                           arm_eval.valid_rate,
                           mdm_eval ? fmt::format("; MDM exact {:.3f} valid {:.3f}", mdm_eval->exact_match,
                                                  mdm_eval->valid_rate)
                                    : std::string()));

      auto check = [&](const std::string& what, double value, double target) {
        if (value < target) failures.push_back(fmt::format("{} seed {}: {} {:.3f} < {:.3f}", tname, seed, what, value, target));
      };
      if (task == TaskId::kIoi) {
        check("ARM held-out accuracy", arm_eval.exact_match, config.target_ioi_arm);
        if (mdm_eval) check("MDM held-out accuracy", mdm_eval->exact_match, config.target_ioi_mdm);
      } else {
        check("ARM valid-equation rate", arm_eval.valid_rate, config.target_countdown_valid);
        if (mdm_eval) check("MDM valid-equation rate", mdm_eval->valid_rate, config.target_countdown_valid);
      }
    }
  }
  if (config.enforce_targets && !failures.empty()) {
    std::string msg = "training targets not met:";
    for (const auto& f : failures) msg += "\n  " + f;
    throw TrainingTargetError(msg);
  }
  for (const auto& f : failures) say(log, "warning: " + f);
}

// ---------------------------------------------------------------- discover

namespace {

std::string sweep_csv(const std::vector<SweepPoint>& sweep) {
  std::string out = "n,faithfulness\n";
  for (const auto& p : sweep) out += fmt::format("{},{}\n", p.n, format_float(p.faithfulness));
  return out;
}

std::vector<double> abs_values(const std::vector<double>& v) {
  std::vector<double> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [](double x) { return std::abs(x); });
  return out;
}

}  // namespace

void cmd_discover(const RunConfig& config, std::ostream* log) {
  config.validate();
  for (std::uint64_t seed : config.seeds) {
    for (TaskId task : config.tasks) {
      const fs::path dir = config.stage_dir(task, seed);
      const std::string tname(to_string(task));
      const Weights arm = load_checkpoint(ckpt_path(dir, "arm"));
      const Weights mdm = load_checkpoint(ckpt_path(dir, "mdm"));
      const CompGraph graph = build_graph(arm.config);
      if (!(build_graph(mdm.config) == graph)) throw UsageError("ARM and MDM checkpoints have different shapes");
      const auto pairs = analysis_pairs(task, config.discovery_pairs, seed, 0xd15c);
      const int n = config.discovery.resolved_top_n(graph);
      const auto sizes = sweep_sizes(graph, config.sweep_points);

      std::string summary = "task,model,n,faithfulness,operating_point,tau,used_pairs,excluded_pairs\n";
      std::string oracle = "task,model,spearman,n_pairs,n_edges\n";

      auto finish = [&](const std::string& model, EdgeScoreTable table, const Weights& w,
                        const std::vector<AnalysisInput>& inputs, const std::string& table_file) {
        table.task = tname;
        table.model = model;
        write_file_atomic(dir / table_file, format_score_table(table, graph));
        Circuit c = select_circuit(table, graph, n);
        const FaithfulnessResult f = faithfulness(w, graph, c.edges, inputs);
        c.faithfulness = f.value;
        c.tau = config.discovery.tau;
        c.source = table_file;
        c.task = tname;
        c.model = model;
        c.step = table.step;
        write_file_atomic(dir / ("circuit_" + model + ".txt"), format_circuit(c, table, graph));
        const auto sweep = faithfulness_sweep(w, graph, table, inputs, sizes);
        write_file_atomic(dir / ("faithfulness_" + model + ".csv"), sweep_csv(sweep));
        const int op = operating_point(sweep, config.discovery.tau);
        summary += csv_row({tname, model, std::to_string(n), format_float(f.value), std::to_string(op),
                            format_float(config.discovery.tau), std::to_string(f.used_pairs),
                            std::to_string(f.excluded_pairs)});
        say(log, fmt::format("[{} seed {}] {} circuit n={} faithfulness {:.3f}; tau reached at n={}", tname, seed,
                             model, n, f.value, op));
      };
      auto run_oracle = [&](const std::string& model, const Weights& w, const std::vector<AnalysisInput>& inputs,
                            const EdgeScoreTable& table) {
        if (!config.oracle) return;
        const auto exact = exact_patch_effects(w, graph, inputs);
        const double rho = spearman(abs_values(table.scores), abs_values(exact));
        oracle += csv_row({tname, model, format_float(rho), std::to_string(inputs.size()),
                           std::to_string(graph.edges().size())});
        say(log, fmt::format("[{} seed {}] {} oracle spearman {:.3f}", tname, seed, model, rho));
      };

      say(log, fmt::format("[{} seed {}] scoring ARM edges on {} pairs", tname, seed, pairs.size()));
      const auto arm_inputs = analysis_inputs(pairs, RunMode::kAr);
      EdgeScoreTable arm_table = eap_ig_scores(arm, graph, arm_inputs, config.discovery.ig_steps);
      arm_table.step = "ar";
      run_oracle("arm", arm, arm_inputs, arm_table);
      finish("arm", arm_table, arm, arm_inputs, "scores_arm.tsv");

      say(log, fmt::format("[{} seed {}] scoring MDM edges per diffusion step", tname, seed));
      auto steps = stepwise_circuits(mdm, graph, pairs, config.discovery);
      for (auto& t : steps) {
        t.model = "mdm";
        write_file_atomic(dir / fmt::format("scores_mdm_step{}.tsv", t.step), format_score_table(t, graph));
      }
      const auto mdm_inputs = analysis_inputs(pairs, RunMode::kMdm);
      if (config.oracle) {
        const EdgeScoreTable full = eap_ig_scores(mdm, graph, mdm_inputs, config.discovery.ig_steps);
        run_oracle("mdm", mdm, mdm_inputs, full);
      }
      finish("mdm", aggregate_steps(steps), mdm, mdm_inputs, "scores_mdm_aggregated.tsv");

      write_file_atomic(dir / "discovery_summary.csv", summary);
      write_file_atomic(dir / "oracle.csv", oracle);
    }
  }
}

// ---------------------------------------------------------------- compare

void cmd_compare(const RunConfig& config, std::ostream* log) {
  config.validate();
  for (std::uint64_t seed : config.seeds) {
    for (TaskId task : config.tasks) {
      const fs::path dir = config.stage_dir(task, seed);
      const std::string tname(to_string(task));
      const TopKSets s = topk_sets(config, task, seed);
      const CompGraph g = graph_of(s.arm_table);
      const auto steps = read_step_tables(dir, task);
      for (const auto& t : steps) {
        if (!t.same_schema(g)) throw UsageError("step score tables describe a different graph schema");
      }

      bool both_empty = false;
      const double jac = jaccard_edges(s.arm.edges, s.mdm.edges, &both_empty);
      const double overlap = topk_overlap(s.arm_top.nodes, s.mdm_top.nodes);
      const Stability st = step_component_stability(steps, g, s.mdm.n, s.k);
      std::string csv = std::string(kCompareHeader) + "\n";
      csv += csv_row({tname, "arm-mdm", format_float(jac), format_float(overlap), format_float(st.consecutive),
                      format_float(st.all_pairs), std::to_string(s.k)});
      write_file_atomic(dir / "compare.csv", csv);

      const LayerProfile pa = layer_profile(s.arm.edges, g);
      const LayerProfile pm = layer_profile(s.mdm.edges, g);
      const auto diff = profile_diff(pm, pa);
      std::string prof = "task,layer,arm,mdm,diff\n";
      std::vector<std::string> cols;
      std::vector<double> row;
      for (int l = 0; l < g.n_layers(); ++l) {
        prof += fmt::format("{},{},{},{},{}\n", tname, l, pa.counts[static_cast<std::size_t>(l)],
                            pm.counts[static_cast<std::size_t>(l)], diff[static_cast<std::size_t>(l)]);
        cols.push_back(fmt::format("L{}", l));
        row.push_back(diff[static_cast<std::size_t>(l)]);
      }
      write_file_atomic(dir / "layer_profile.csv", prof);
      write_file_atomic(dir / "layer_diff.svg",
                        heatmap_svg("Unique attention heads per layer, MDM minus ARM", {tname}, cols, {row}));

      std::string topk = "model,rank,node,score\n";
      auto emit = [&](const std::string& model, const ComponentScore& sc, const TopK& t) {
        std::vector<int> nodes = t.nodes;
        std::stable_sort(nodes.begin(), nodes.end(), [&](int a, int b) {
          return sc.s[static_cast<std::size_t>(a)] > sc.s[static_cast<std::size_t>(b)];
        });
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          topk += csv_row({model, std::to_string(i + 1), g.node_name(nodes[i]),
                           format_float(sc.s[static_cast<std::size_t>(nodes[i])])});
        }
      };
      emit("arm", s.arm_scores, s.arm_top);
      emit("mdm", s.mdm_scores, s.mdm_top);
      write_file_atomic(dir / "topk.csv", topk);

      write_file_atomic(dir / "circuit_arm.dot", circuit_dot(s.arm, g, tname + " ARM circuit"));
      write_file_atomic(dir / "circuit_mdm.dot", circuit_dot(s.mdm, g, tname + " MDM circuit"));
      write_file_atomic(dir / "divergence.dot", divergence_dot(s.arm, s.mdm, g, tname + " ARM vs MDM"));
      for (const auto& t : steps) {
        const Circuit c = select_circuit(t, g, s.mdm.n);
        write_file_atomic(dir / fmt::format("circuit_mdm_step{}.dot", t.step),
                          circuit_dot(c, g, fmt::format("{} MDM circuit, step {}", tname, t.step)));
      }
      say(log, fmt::format("[{} seed {}] edge jaccard {:.3f}, top-{} overlap {:.3f}, step stability {:.3f}{}", tname,
                           seed, jac, s.k, overlap, st.consecutive, st.flagged ? " (single step)" : ""));
    }
  }
}

// ---------------------------------------------------------------- interpret

namespace {

std::vector<LensPrompt> lens_prompts(const std::vector<PromptPair>& pairs, RunMode mode) {
  std::vector<LensPrompt> out;
  for (const auto& p : pairs) {
    LensPrompt lp;
    lp.tokens = analysis_tokens(p, mode, false);
    lp.answer_row = readout_row(mode, p.answer_positions.back());
    lp.attention = mode == RunMode::kAr ? AttentionMode::kCausal : AttentionMode::kFull;
    out.push_back(std::move(lp));
  }
  return out;
}

std::string lens_row(int prompt, const LensRecord& r) {
  return csv_row({std::to_string(prompt), r.component, std::to_string(r.position), r.step, join_tokens(r.top_tokens),
                  join_floats(r.top_logits), fmt_num(r.max_logit), fmt_num(r.entropy)});
}

constexpr std::string_view kLensHeader = "prompt,component,position,step,top_tokens,top_logits,max_logit,entropy\n";

std::vector<int> circuit_components(const Circuit& c, const CompGraph& g) {
  std::set<int> nodes;
  for (const Edge& e : c.edges) {
    for (int v : {e.source, e.target}) {
      const NodeKind k = g.node(v).kind;
      if (k == NodeKind::kHead || k == NodeKind::kMlp) nodes.insert(v);
    }
  }
  return {nodes.begin(), nodes.end()};
}

}  // namespace

void cmd_interpret(const RunConfig& config, std::ostream* log) {
  config.validate();
  for (std::uint64_t seed : config.seeds) {
    for (TaskId task : config.tasks) {
      const fs::path dir = config.stage_dir(task, seed);
      const std::string tname(to_string(task));
      const TopKSets s = topk_sets(config, task, seed);
      const CompGraph g = graph_of(s.arm_table);
      const auto pairs = analysis_pairs(task, config.lens_prompts, seed, 0x1e25);
      const int n_examples = std::min<int>(config.lens_examples, static_cast<int>(pairs.size()));
      std::string summary = "task,model,metric,value\n";

      for (const std::string model : {"arm", "mdm"}) {
        const Weights w = load_checkpoint(ckpt_path(dir, model));
        const RunMode mode = model_mode(model);
        const TopK& top = model == "arm" ? s.arm_top : s.mdm_top;
        const ComponentScore& sc = model == "arm" ? s.arm_scores : s.mdm_scores;
        const Circuit& circuit = model == "arm" ? s.arm : s.mdm;
        std::vector<std::string> comps;
        for (int v : top.nodes) {
          if (v != g.logits_node()) comps.push_back(g.node_name(v));
        }
        const auto prompts = lens_prompts(pairs, mode);

        // Alignment table.
        const auto rows = component_alignment_table(w, g, prompts, comps, tname, model);
        std::string align = std::string(kAlignmentHeader) + "\n";
        for (const auto& r : rows) {
          align += csv_row({r.task, r.model, r.component, fmt_num(r.mean_logit), join_tokens(r.top_tokens), r.role});
        }
        write_file_atomic(dir / ("alignment_" + model + ".csv"), align);

        // Lens tables.
        std::vector<std::string> lens_comps = comps;
        lens_comps.push_back("final");
        std::string lens(kLensHeader);
        for (int i = 0; i < n_examples; ++i) {
          const auto& p = prompts[static_cast<std::size_t>(i)];
          const ForwardTrace trace = forward(w, p.tokens, p.attention);
          for (const auto& c : lens_comps) lens += lens_row(i, logit_lens(w, trace, g, c, p.answer_row, config.lens_top_r));
        }
        write_file_atomic(dir / ("lens_" + model + ".csv"), lens);

        if (mode == RunMode::kMdm) {
          std::string steps_csv(kLensHeader);
          int before = 0, total = 0;
          for (std::size_t i = 0; i < pairs.size(); ++i) {
            const PromptPair& p = pairs[i];
            const MdmDecode dec = decode_mdm(w, p.clean_prompt(), p.gen_len, p.steps);
            if (static_cast<int>(i) < n_examples) {
              for (const auto& r : lens_over_steps(w, dec, g, lens_comps, p.answer_positions, config.lens_top_r)) {
                steps_csv += lens_row(static_cast<int>(i), r);
              }
            }
            // Does the final-residual lens settle on the committed token no
            // later than the step that commits it?
            const auto finals = lens_over_steps(w, dec, g, {"final"}, p.answer_positions, 1);
            for (std::size_t a = 0; a < p.answer_positions.size(); ++a) {
              const int pos = p.answer_positions[a];
              int unmask_step = -1;
              for (const auto& st : dec.trajectory)
                for (const auto& ev : st.unmasked)
                  if (ev.position == pos) unmask_step = st.step;
              int first = -1;
              for (std::size_t si = 0; si < dec.trajectory.size() && first < 0; ++si) {
                const auto& r = finals[si * p.answer_positions.size() + a];
                if (r.top_tokens.front() == dec.tokens[static_cast<std::size_t>(pos)]) first = dec.trajectory[si].step;
              }
              ++total;
              before += first >= 0 && first <= unmask_step ? 1 : 0;
            }
          }
          write_file_atomic(dir / "lens_mdm_steps.csv", steps_csv);
          summary += csv_row({tname, model, "lens_settles_by_unmask_rate",
                              fmt_num(static_cast<double>(before) / std::max(total, 1))});
        }

        // Pointer check: the highest-s(v) head in the upper half of the
        // network, read at the answer row.
        int pointer = -1;
        for (int v : top.nodes) {
          const NodeInfo& ni = g.node(v);
          if (ni.kind != NodeKind::kHead || ni.layer < g.n_layers() / 2) continue;
          if (pointer < 0 || sc.s[static_cast<std::size_t>(v)] > sc.s[static_cast<std::size_t>(pointer)]) pointer = v;
        }
        if (pointer >= 0) {
          int hits = 0;
          for (std::size_t i = 0; i < prompts.size(); ++i) {
            const ForwardTrace trace = forward(w, prompts[i].tokens, prompts[i].attention);
            const LensRecord r = logit_lens(w, trace, g, g.node_name(pointer), prompts[i].answer_row, 1);
            hits += r.top_tokens.front() == pairs[i].answer.back() ? 1 : 0;
          }
          summary += csv_row({tname, model, "pointer_head", g.node_name(pointer)});
          summary += csv_row({tname, model, "pointer_head_answer_rate",
                              fmt_num(static_cast<double>(hits) / static_cast<double>(prompts.size()))});
        }

        // Neuron records.
        std::vector<LensPrompt> nprompts(prompts.begin(),
                                         prompts.begin() + std::min<std::size_t>(prompts.size(),
                                                                                 static_cast<std::size_t>(config.neuron_prompts)));
        const NeuronStore store = record_neuron_activations(w, nprompts, config.neuron_memory_budget);
        std::string neurons =
            "# fields: layer neuron prompt position token activation context[-8..8] (-1 outside the sequence)\n"
            "# ordered by layer, neuron, descending |activation|\n";
        for (int l = 0; l < w.config.n_layers; ++l) {
          for (int nidx = 0; nidx < w.config.d_model; ++nidx) {
            for (const auto& r : top_activating_tokens(store, l, nidx, config.neuron_top)) {
              neurons += format_neuron_record(r) + "\n";
            }
          }
        }
        write_file_atomic(dir / ("neurons_" + model + ".txt"), neurons);
        summary += csv_row({tname, model, "numeric_share_top1pct_early_layers",
                            fmt_num(numeric_token_share(store, std::max(1, w.config.n_layers / 2), 0.01))});

        // Explanation statistics over the circuit's components.
        const auto comps_idx = circuit_components(circuit, g);
        const ExplanationStats es =
            explanation_stats(component_masses(w, g, prompts, comps_idx), config.explanation_coverage);
        summary += csv_row({tname, model, "circuit_components", std::to_string(comps_idx.size())});
        summary += csv_row({tname, model, "unique_components", std::to_string(es.unique_components)});
        summary += csv_row({tname, model, "dispersion", fmt_num(es.dispersion)});
        say(log, fmt::format("[{} seed {}] {}: {} components, explanation set {} (dispersion {})", tname, seed, model,
                             comps_idx.size(), es.unique_components, fmt_num(es.dispersion)));
      }
      write_file_atomic(dir / "interpret_summary.csv", summary);
    }
  }
}

// ---------------------------------------------------------------- report

std::vector<std::string> report_inputs(TaskId) {
  return {"train_metrics.csv",  "discovery_summary.csv", "oracle.csv",       "compare.csv",
          "layer_profile.csv",  "interpret_summary.csv", "alignment_arm.csv", "alignment_mdm.csv"};
}

namespace {

std::string markdown_table(const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return "(empty)\n";
  std::string out = "|";
  for (const auto& h : rows[0]) out += " " + h + " |";
  out += "\n|";
  for (std::size_t i = 0; i < rows[0].size(); ++i) out += " --- |";
  out += "\n";
  for (std::size_t r = 1; r < rows.size(); ++r) {
    out += "|";
    for (const auto& f : rows[r]) {
      std::string cell = f;
      std::string esc;
      for (char c : cell) esc += c == '|' ? std::string("\\|") : std::string(1, c);
      out += " " + esc + " |";
    }
    out += "\n";
  }
  return out;
}

std::optional<std::vector<std::vector<std::string>>> try_csv(const fs::path& p) {
  if (!fs::exists(p)) return std::nullopt;
  return parse_csv(read_file(p));
}

double to_double(const std::string& s) {
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw FileError("malformed number '" + s + "' in stage output");
  }
}

}  // namespace

void cmd_report(const RunConfig& config, std::ostream* log) {
  config.validate();
  std::vector<std::string> missing;
  std::string body;
  // seed -> task -> edge jaccard; seed -> early-layer mean diff (Countdown)
  std::map<std::uint64_t, std::map<TaskId, double>> jaccard;
  std::map<std::uint64_t, double> early_diff;

  for (std::uint64_t seed : config.seeds) {
    for (TaskId task : config.tasks) {
      const fs::path dir = config.stage_dir(task, seed);
      const std::string tname(to_string(task));
      for (const auto& f : report_inputs(task)) {
        if (!fs::exists(dir / f)) missing.push_back((fs::path(tname) / fmt::format("seed{}", seed) / f).string());
      }
      body += fmt::format("## {} / seed {}\n\n", tname, seed);
      auto section = [&](const std::string& title, const std::string& file) {
        body += "### " + title + "\n\n";
        if (auto rows = try_csv(dir / file)) {
          body += markdown_table(*rows) + "\n";
        } else {
          body += "missing: `" + file + "`\n\n";
        }
      };
      section("Training (held-out)", "train_metrics.csv");
      section("Discovery", "discovery_summary.csv");
      section("EAP-IG vs exact patching (Spearman of magnitudes)", "oracle.csv");
      section("Circuit similarity", "compare.csv");
      section("Layer profile (unique heads; diff = MDM minus ARM)", "layer_profile.csv");
      section("Interpretation summary", "interpret_summary.csv");
      section("Component alignment, ARM", "alignment_arm.csv");
      section("Component alignment, MDM", "alignment_mdm.csv");
      body += "Figures: `layer_diff.svg`, `circuit_arm.dot`, `circuit_mdm.dot`, `divergence.dot`.\n\n";

      if (auto rows = try_csv(dir / "compare.csv"); rows && rows->size() > 1) {
        jaccard[seed][task] = to_double((*rows)[1][2]);
      }
      if (auto rows = try_csv(dir / "layer_profile.csv"); rows && task == TaskId::kCountdown && rows->size() > 1) {
        const std::size_t layers = rows->size() - 1;
        const std::size_t half = std::max<std::size_t>(1, layers / 2);
        double sum = 0.0;
        for (std::size_t l = 0; l < half; ++l) sum += to_double((*rows)[l + 1][4]);
        early_diff[seed] = sum / static_cast<double>(half);
      }
    }
  }

  std::string out = "# mechshift report\n\n";
  // The output location is left out so reruns elsewhere compare equal.
  std::string cfg_text;
  for (const auto& line : split(config.serialize(), '\n')) {
    if (!line.empty() && !line.starts_with("out=")) cfg_text += line + "\n";
  }
  out += "Configuration:\n\n```\n" + cfg_text + "```\n\n";
  if (!missing.empty()) {
    out += "## Missing artifacts\n\n";
    for (const auto& m : missing) out += "- `" + m + "`\n";
    out += "\n";
  }
  out += "## Directional checks\n\n";
  out += "| seed | IOI edge Jaccard | Countdown edge Jaccard | IOI > Countdown | Countdown early-layer diff mean | >= 0 |\n";
  out += "| --- | --- | --- | --- | --- | --- |\n";
  for (std::uint64_t seed : config.seeds) {
    const auto& j = jaccard[seed];
    auto cell = [](const std::map<TaskId, double>& m, TaskId t) {
      auto it = m.find(t);
      return it == m.end() ? std::string("n/a") : fmt_num(it->second);
    };
    const bool has_both = j.contains(TaskId::kIoi) && j.contains(TaskId::kCountdown);
    const auto ed = early_diff.find(seed);
    out += fmt::format("| {} | {} | {} | {} | {} | {} |\n", seed, cell(j, TaskId::kIoi), cell(j, TaskId::kCountdown),
                       has_both ? (j.at(TaskId::kIoi) > j.at(TaskId::kCountdown) ? "yes" : "no") : "n/a",
                       ed == early_diff.end() ? "n/a" : fmt_num(ed->second),
                       ed == early_diff.end() ? "n/a" : (ed->second >= 0.0 ? "yes" : "no"));
  }
  out += "\n";
  out += "7B reference - not asserted: edge Jaccard ARM vs MDM, IOI 0.193 (Qwen2.5/Dream) and 0.088 (LLaMA-2/DiffuLLaMA); "
         "Countdown 0.008 and 0.032. Top-K overlap, IOI 0.105 and Countdown 0.093 (Qwen2.5/Dream). "
         "Step stability above 0.90.\n\n";
  out += "7B reference - not asserted: explanation statistics, ARM 266 unique components (variance 136738.5) vs MDM 426 "
         "(variance 41015.5). The toy dispersion is the population variance of per-component write magnitudes over "
         "the smallest set covering the configured share of circuit mass, a stand-in rather than the same unit.\n\n";
  out += "Top-K overlap is the Jaccard index of the two Top-K node sets. Node scores sum absolute edge attributions.\n\n";
  out += body;
  write_file_atomic(config.out_dir / "report.md", out);
  say(log, "wrote " + (config.out_dir / "report.md").string());
  if (!missing.empty()) {
    std::string msg = "report is missing stage outputs:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw FileError(msg);
  }
}

}  // namespace mechshift
