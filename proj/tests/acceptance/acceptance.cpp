// Acceptance suite: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_oracle.hpp"
#include "mechshift/checkpoint.hpp"
#include "mechshift/compare.hpp"
#include "mechshift/discovery.hpp"
#include "mechshift/interpret.hpp"
#include "mechshift/io.hpp"
#include "mechshift/pipeline.hpp"

using namespace mechshift;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

using CsvRows = std::vector<std::map<std::string, std::string>>;

CsvRows read_csv(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::vector<std::string> header;
  CsvRows rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string f;
    while (std::getline(ss, f, ',')) out.push_back(f);
    return out;
  };
  if (std::getline(in, line)) header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < f.size(); ++i) row[header[i]] = f[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

double num(const std::map<std::string, std::string>& row, const std::string& key) { return std::stod(row.at(key)); }

struct SeedRun {
  std::uint64_t seed = 0;
  RunConfig config;
  double seconds = 0.0;
};

RunConfig seed_config(std::uint64_t seed, const fs::path& out) {
  RunConfig c;
  c.seeds = {seed};
  c.out_dir = out;
  c.enforce_targets = false;
  return c;
}

double run_pipeline(const RunConfig& c) {
  const auto t0 = Clock::now();
  cmd_train(c, &std::cerr);
  cmd_discover(c, &std::cerr);
  cmd_compare(c, &std::cerr);
  cmd_interpret(c, &std::cerr);
  cmd_report(c, &std::cerr);
  return seconds_since(t0);
}

// 1
Verdict gradient_correctness() {
  const auto t0 = Clock::now();
  const auto cases = oracle::all_grad_cases();
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    double e = oracle::relative_error(c);
    if (std::isnan(e)) e = INFINITY;
    if (e > worst || worst_name.empty()) {
      worst = e;
      worst_name = c.name;
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = cases.size() >= 20 && worst <= 1e-4 && secs < 60.0;
  return {ok, std::to_string(cases.size()) + " cases, max rel err " + fmt_num(worst) + " (" + worst_name + "), " +
                  fmt_num(secs) + " s"};
}

Weights linear_probe_model(std::uint64_t seed) {
  ModelConfig c;
  c.vocab_size = Vocabulary::standard().size();
  c.norm = NormKind::kGainOnly;
  c.activation = Activation::kIdentity;
  Weights w = Weights::random(c, seed);
  for (LayerWeights& l : w.layers) {
    l.w_q.fill(0.0f);
    l.w_k.fill(0.0f);
  }
  return w;
}

// 2
Verdict oracle_agreement(const std::vector<SeedRun>& runs) {
  double min_rho = 1.0;
  std::string where;
  int tables = 0;
  for (const SeedRun& r : runs) {
    for (TaskId t : r.config.tasks) {
      for (const auto& row : read_csv(r.config.stage_dir(t, r.seed) / "oracle.csv")) {
        ++tables;
        const double rho = num(row, "spearman");
        if (rho < min_rho) {
          min_rho = rho;
          where = row.at("task") + "/" + row.at("model") + "/seed" + std::to_string(r.seed);
        }
      }
    }
  }
  const Weights w = linear_probe_model(17);
  const CompGraph g = build_graph(w.config);
  const auto inputs = analysis_inputs(gen_task(TaskId::kIoi, 8, 5, Split::kHeldout), RunMode::kAr);
  const auto exact = exact_patch_effects(w, g, inputs);
  double dev = 0.0, m_dev = 0.0;
  std::vector<double> first;
  for (int m : {1, 3, 8}) {
    const EdgeScoreTable s = eap_ig_scores(w, g, inputs, m);
    for (std::size_t i = 0; i < exact.size(); ++i) {
      dev = std::max(dev, std::abs(s.scores[i] - exact[i]));
      if (!first.empty()) m_dev = std::max(m_dev, std::abs(s.scores[i] - first[i]));
    }
    if (first.empty()) first = s.scores;
  }
  const bool ok = tables >= 4 && min_rho >= 0.8 && dev <= 1e-5 && m_dev <= 1e-5;
  return {ok, "min rho " + fmt_num(min_rho) + " (" + where + ") over " + std::to_string(tables) +
                  " trained models; linear model max dev " + fmt_num(dev) + ", m-spread " + fmt_num(m_dev)};
}

// 3
Verdict faithfulness_endpoints(const std::vector<SeedRun>& runs) {
  const SeedRun& r = runs.front();
  const fs::path dir = r.config.stage_dir(TaskId::kIoi, r.seed);
  double worst_full = 0.0, worst_empty = 0.0;
  for (const char* model : {"arm", "mdm"}) {
    const Weights w = load_checkpoint(dir / (std::string(model) + ".ckpt"));
    const CompGraph g = build_graph(w.config);
    const auto inputs = analysis_inputs(gen_task(TaskId::kIoi, 64, 99, Split::kHeldout),
                                        std::string(model) == "arm" ? RunMode::kAr : RunMode::kMdm);
    worst_full = std::max(worst_full, std::abs(faithfulness(w, g, g.edges(), inputs).value - 1.0));
    worst_empty = std::max(worst_empty, std::abs(faithfulness(w, g, {}, inputs).value));
  }
  bool sweep_ok = true;
  std::string sweep_detail;
  for (const SeedRun& s : runs) {
    for (const char* model : {"arm", "mdm"}) {
      const auto rows = read_csv(s.config.stage_dir(TaskId::kIoi, s.seed) / (std::string("faithfulness_") + model + ".csv"));
      const int n_edges = static_cast<int>(build_graph(s.config.model).edges().size());
      int reach = -1;
      double peak = -INFINITY, drop = 0.0, first = 0.0, last = 0.0;
      for (const auto& row : rows) {
        const double f = num(row, "faithfulness");
        if (peak == -INFINITY) first = f;
        last = f;
        peak = std::max(peak, f);
        drop = std::max(drop, peak - f);
        if (reach < 0 && f >= 0.6) reach = static_cast<int>(num(row, "n"));
      }
      const bool ok = reach > 0 && reach < 0.3 * n_edges && drop <= 0.1 && last > first;
      sweep_ok = sweep_ok && ok;
      sweep_detail += " " + std::string(model) + "/seed" + std::to_string(s.seed) + ":N=" + std::to_string(reach) +
                      ",drop=" + fmt_num(drop);
    }
  }
  const bool ok = worst_full <= 1e-6 && worst_empty <= 1e-6 && sweep_ok;
  return {ok, "|F(full)-1| " + fmt_num(worst_full) + ", |F(empty)| " + fmt_num(worst_empty) + ";" + sweep_detail};
}

// 4
Verdict metric_algebra() {
  const CompGraph g(4, 4);
  const auto& edges = g.edges();
  int failures = 0;
  const std::vector<Edge> a{edges[0], edges[1], edges[2]}, b{edges[1], edges[2], edges[3]};
  if (jaccard_edges(a, b) != 0.5) ++failures;
  if (topk_overlap({1, 2, 3}, {2, 3, 4}) != 0.5) ++failures;

  std::mt19937_64 rng(42);
  std::uniform_int_distribution<std::size_t> pick(0, edges.size() - 1);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::set<Edge> sa, sb;
    const std::size_t na = pick(rng) % 40, nb = pick(rng) % 40;
    while (sa.size() < na) sa.insert(edges[pick(rng)]);
    while (sb.size() < nb) sb.insert(edges[pick(rng)]);
    std::set<Edge> uni(sa), inter;
    uni.insert(sb.begin(), sb.end());
    for (const Edge& e : sa) {
      if (sb.contains(e)) inter.insert(e);
    }
    const double expect = uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    if (jaccard_edges({sa.begin(), sa.end()}, {sb.begin(), sb.end()}) != expect) ++failures;

    // node_scores is additive over disjoint edge sets.
    EdgeScoreTable t;
    t.n_layers = g.n_layers();
    t.n_heads = g.n_heads();
    for (std::size_t i = 0; i < edges.size(); ++i) t.scores.push_back(unit(rng));
    std::vector<Edge> only_a, only_b;
    for (const Edge& e : sa) {
      if (!sb.contains(e)) only_a.push_back(e);
    }
    only_b.assign(sb.begin(), sb.end());
    std::vector<Edge> both(only_a);
    both.insert(both.end(), only_b.begin(), only_b.end());
    const auto s1 = node_scores(t, g, only_a), s2 = node_scores(t, g, only_b), s12 = node_scores(t, g, both);
    for (int v = 0; v < g.node_count(); ++v) {
      const auto i = static_cast<std::size_t>(v);
      if (std::abs(s12.s[i] - (s1.s[i] + s2.s[i])) > 1e-12) ++failures;
    }

    // Top-K is invariant under positive rescaling.
    const double c = std::exp(unit(rng) * 3.0);
    ComponentScore scaled = s12;
    for (double& x : scaled.s) x *= c;
    for (int k : {1, 3, 8}) {
      if (top_k_components(s12, k).nodes != top_k_components(scaled, k).nodes) ++failures;
    }
  }
  return {failures == 0, "200 randomized cases, " + std::to_string(failures) + " violations"};
}

// 5
Verdict lens_identity(const SeedRun& r) {
  double prob_dev = 0.0, decomp_dev = 0.0, proj_dev = 0.0;
  int prompts = 0;
  for (const char* model : {"arm", "mdm"}) {
    const Weights w = load_checkpoint(r.config.stage_dir(TaskId::kIoi, r.seed) / (std::string(model) + ".ckpt"));
    const CompGraph g = build_graph(w.config);
    const RunMode mode = std::string(model) == "arm" ? RunMode::kAr : RunMode::kMdm;
    for (const PromptPair& p : gen_task(TaskId::kIoi, 100, 7, Split::kHeldout)) {
      ++prompts;
      const ForwardTrace t = forward(w, analysis_tokens(p, mode, false));
      const Tensor lens = row_softmax(lens_logits(w, lens_activation(t, g, "final")));
      const Tensor out = row_softmax(t.logits);
      for (std::size_t i = 0; i < out.size(); ++i) prob_dev = std::max(prob_dev, std::abs(static_cast<double>(lens[i]) - out[i]));

      std::vector<double> sum(t.final_resid.size(), 0.0);
      std::vector<double> proj_sum;
      for (int node = 0; node < g.logits_node(); ++node) {
        const Tensor& part = component_output(t, g, node);
        for (std::size_t i = 0; i < part.size(); ++i) sum[i] += part[i];
        const Tensor proj = raw_projection(w, part);
        if (proj_sum.empty()) proj_sum.assign(proj.size(), 0.0);
        for (std::size_t i = 0; i < proj.size(); ++i) proj_sum[i] += proj[i];
      }
      for (std::size_t i = 0; i < sum.size(); ++i) decomp_dev = std::max(decomp_dev, std::abs(sum[i] - t.final_resid[i]));
      const Tensor whole = raw_projection(w, t.final_resid);
      for (std::size_t i = 0; i < whole.size(); ++i) proj_dev = std::max(proj_dev, std::abs(proj_sum[i] - whole[i]));
    }
  }
  const bool ok = prob_dev <= 1e-5 && decomp_dev <= 1e-4 && proj_dev <= 1e-4;
  return {ok, std::to_string(prompts) + " prompts: lens vs output " + fmt_num(prob_dev) + ", residual sum " +
                  fmt_num(decomp_dev) + ", projection sum " + fmt_num(proj_dev)};
}

// 6
Verdict schedule_contracts(const SeedRun& r) {
  int instances = 0, violations = 0;
  for (TaskId task : {TaskId::kIoi, TaskId::kCountdown}) {
    const Weights w = load_checkpoint(r.config.stage_dir(task, r.seed) / "mdm.ckpt");
    const int mask = Vocabulary::standard().mask_id();
    const int n = std::min(100, task_capacity(task, Split::kHeldout));
    for (const PromptPair& p : gen_task(task, n, 11, Split::kHeldout)) {
      ++instances;
      if (task == TaskId::kIoi && (p.steps != 1 || p.gen_len != 1)) ++violations;
      const MdmDecode d = decode_mdm(w, p.clean_prompt(), p.gen_len, p.steps);
      bool ok = static_cast<int>(d.trajectory.size()) == p.steps;
      std::vector<int> committed(d.tokens.size(), -1);
      int prev_masked = p.gen_len + 1;
      for (const MaskState& s : d.trajectory) {
        if (p.steps == p.gen_len && s.unmasked.size() != 1) ok = false;
        if (s.masked_count() >= prev_masked) ok = false;
        prev_masked = s.masked_count();
        for (std::size_t i = 0; i < s.tokens.size(); ++i) {
          if (s.tokens[i] == mask) {
            if (committed[i] >= 0) ok = false;  // once committed, never re-masked
          } else if (committed[i] >= 0 && committed[i] != s.tokens[i]) {
            ok = false;
          } else {
            committed[i] = s.tokens[i];
          }
        }
      }
      for (std::size_t i = 0; i < d.tokens.size(); ++i) {
        if (d.tokens[i] == mask || (committed[i] >= 0 && committed[i] != d.tokens[i])) ok = false;
      }
      if (!ok) ++violations;
    }
  }
  return {violations == 0, std::to_string(instances) + " decodes, " + std::to_string(violations) + " violations"};
}

// 7
Verdict training_targets(const std::vector<SeedRun>& runs) {
  bool ok = true;
  std::string detail;
  for (const SeedRun& r : runs) {
    std::map<std::string, double> m;
    for (TaskId t : r.config.tasks) {
      for (const auto& row : read_csv(r.config.stage_dir(t, r.seed) / "train_metrics.csv")) {
        const std::string key = std::string(to_string(t)) + "/" + row.at("model");
        m[key] = t == TaskId::kIoi ? num(row, "exact_match") : num(row, "valid_rate");
      }
    }
    const bool seed_ok = m["ioi/arm"] >= r.config.target_ioi_arm && m["ioi/mdm"] >= r.config.target_ioi_mdm &&
                         m["countdown/arm"] >= r.config.target_countdown_valid &&
                         m["countdown/mdm"] >= r.config.target_countdown_valid && r.seconds < 1800.0;
    ok = ok && seed_ok;
    detail += " seed" + std::to_string(r.seed) + ": ioi " + fmt_num(m["ioi/arm"]) + "/" + fmt_num(m["ioi/mdm"]) +
              " countdown " + fmt_num(m["countdown/arm"]) + "/" + fmt_num(m["countdown/mdm"]) + " in " +
              fmt_num(r.seconds / 60.0) + " min;";
  }
  return {ok, detail.substr(1)};
}

// 8
Verdict directional(const std::vector<SeedRun>& runs) {
  int jaccard_wins = 0, early_wins = 0;
  std::string detail;
  for (const SeedRun& r : runs) {
    const double j_ioi = num(read_csv(r.config.stage_dir(TaskId::kIoi, r.seed) / "compare.csv").at(0), "edge_jaccard");
    const double j_cd =
        num(read_csv(r.config.stage_dir(TaskId::kCountdown, r.seed) / "compare.csv").at(0), "edge_jaccard");
    const auto profile = read_csv(r.config.stage_dir(TaskId::kCountdown, r.seed) / "layer_profile.csv");
    const std::size_t half = profile.size() / 2;
    double early = 0.0;
    for (std::size_t l = 0; l < half; ++l) early += num(profile[l], "diff");
    early /= static_cast<double>(std::max<std::size_t>(half, 1));
    jaccard_wins += j_ioi > j_cd;
    early_wins += early >= 0.0;
    detail += " seed" + std::to_string(r.seed) + ": J " + fmt_num(j_ioi) + " vs " + fmt_num(j_cd) + ", early diff " +
              fmt_num(early) + ";";
  }
  const int n = static_cast<int>(runs.size());
  const bool ok = n >= 3 && 2 * jaccard_wins > n && 2 * early_wins > n;
  return {ok, "Jaccard ordering " + std::to_string(jaccard_wins) + "/" + std::to_string(n) + ", early-layer diff " +
                  std::to_string(early_wins) + "/" + std::to_string(n) + ";" + detail};
}

std::vector<std::string> differing_files(const fs::path& a, const fs::path& b) {
  std::vector<std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    if (!fs::exists(b / rel) || read_file(entry.path()) != read_file(b / rel)) out.push_back(rel.string());
  }
  return out;
}

// 9
Verdict determinism(const SeedRun& first, const fs::path& out) {
  RunConfig again = first.config;
  again.out_dir = out;
  fs::remove_all(out);
  run_pipeline(again);
  const bool report_same = read_file(first.config.out_dir / "report.md") == read_file(out / "report.md");
  const auto diff = differing_files(first.config.out_dir, out);
  std::string detail = std::string("report.md ") + (report_same ? "identical" : "differs") + ", " +
                       std::to_string(diff.size()) + " differing artifacts";
  for (std::size_t i = 0; i < diff.size() && i < 5; ++i) detail += " " + diff[i];
  return {report_same && diff.empty(), detail};
}

void print(int id, const char* title, const Verdict& v) {
  std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << title << " - " << v.detail << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = "acceptance_out";
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool reuse = false;
  std::set<int> allowed;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else if (arg == "--seeds" && i + 1 < argc) {
      seeds.clear();
      std::stringstream ss(argv[++i]);
      std::string s;
      while (std::getline(ss, s, ',')) seeds.push_back(std::stoull(s));
    } else if (arg == "--allow-fail" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string s;
      while (std::getline(ss, s, ',')) allowed.insert(std::stoi(s));
    } else if (arg == "--reuse") {
      reuse = true;
    } else {
      std::cerr << "usage: mechshift_acceptance [--out DIR] [--seeds 0,1,2] [--allow-fail 2,8] [--reuse]\n";
      return 1;
    }
  }

  std::vector<std::pair<int, std::pair<const char*, Verdict>>> results;
  auto record = [&](int id, const char* title, auto&& fn) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    print(id, title, v);
    results.push_back({id, {title, v}});
  };

  record(1, "gradient correctness", [] { return gradient_correctness(); });
  record(4, "metric and overlap algebra", [] { return metric_algebra(); });

  std::vector<SeedRun> runs;
  try {
    for (std::uint64_t seed : seeds) {
      SeedRun r{seed, seed_config(seed, out / ("seed" + std::to_string(seed))), 0.0};
      if (reuse && fs::exists(r.config.out_dir / "report.md")) {
        std::cerr << "reusing " << r.config.out_dir << "\n";
      } else {
        fs::remove_all(r.config.out_dir);
        r.seconds = run_pipeline(r.config);
        std::cerr << "seed " << seed << " pipeline: " << fmt_num(r.seconds) << " s\n";
      }
      runs.push_back(std::move(r));
    }
  } catch (const std::exception& e) {
    std::cerr << "pipeline failed: " << e.what() << "\n";
  }

  if (runs.empty()) {
    const Verdict none{false, "pipeline did not produce any seed"};
    for (int id : {2, 3, 5, 6, 7, 8, 9}) print(id, "requires pipeline outputs", none);
    return 1;
  }
  record(2, "EAP-IG oracle agreement", [&] { return oracle_agreement(runs); });
  record(3, "faithfulness endpoints and sweep", [&] { return faithfulness_endpoints(runs); });
  record(5, "lens identity", [&] { return lens_identity(runs.front()); });
  record(6, "MDM schedule contracts", [&] { return schedule_contracts(runs.front()); });
  record(7, "training targets", [&] { return training_targets(runs); });
  record(8, "directional replication", [&] { return directional(runs); });
  record(9, "determinism", [&] { return determinism(runs.front(), out / "repeat"); });

  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::cout << "\nsummary\n";
  int blocking = 0;
  std::string tolerated;
  for (const auto& [id, tv] : results) {
    print(id, tv.first, tv.second);
    if (tv.second.pass) continue;
    if (allowed.contains(id)) {
      tolerated += " " + std::to_string(id);
    } else {
      ++blocking;
    }
  }
  if (!tolerated.empty()) std::cout << "documented gaps, not counted toward the exit status:" << tolerated << "\n";
  return blocking == 0 ? 0 : 1;
}
