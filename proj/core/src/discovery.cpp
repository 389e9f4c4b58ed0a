#include "mechshift/discovery.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "mechshift/errors.hpp"
#include "mechshift/io.hpp"
#include "mechshift/parallel.hpp"

namespace mechshift {

namespace {

struct RunActivations {
  std::vector<Tensor> writes;  // indexed by writer node (Input, heads, MLPs)
  Tensor logits;
};

RunActivations run_activations(const Weights& w, const CompGraph& g, std::span<const int> tokens,
                               AttentionMode mode) {
  const ForwardTrace t = forward(w, tokens, mode);
  RunActivations r;
  for (int node = 0; node < g.logits_node(); ++node) r.writes.push_back(component_output(t, g, node));
  r.logits = t.logits;
  return r;
}

void check_pairing(const AnalysisInput& in) {
  if (in.clean.size() != in.corrupt.size()) {
    throw PairingError("clean and corrupt inputs differ in length (" + std::to_string(in.clean.size()) + " vs " +
                       std::to_string(in.corrupt.size()) + ")");
  }
}

void check_inputs(const std::vector<AnalysisInput>& inputs) {
  if (inputs.empty()) throw UsageError("no prompt pairs");
  for (const auto& in : inputs) check_pairing(in);
}

double dot(const Tensor& a, std::span<const double> b) {
  double s = 0.0;
  const auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) s += static_cast<double>(av[i]) * b[i];
  return s;
}

// Per-pair EAP-IG contribution for every edge.
std::vector<double> eap_ig_pair(const Weights& w, const CompGraph& g, const AnalysisInput& in, int m) {
  const RunActivations clean = run_activations(w, g, in.clean, in.attention);
  const RunActivations corrupt = run_activations(w, g, in.corrupt, in.attention);
  const auto& edges = g.edges();
  std::vector<double> out(edges.size(), 0.0);

  std::vector<Tensor> delta;
  bool any = false;
  for (std::size_t u = 0; u < clean.writes.size(); ++u) {
    Tensor d = corrupt.writes[u];
    auto dv = d.data();
    const auto cv = clean.writes[u].data();
    for (std::size_t i = 0; i < dv.size(); ++i) {
      dv[i] -= cv[i];
      any = any || dv[i] != 0.0f;
    }
    delta.push_back(std::move(d));
  }
  if (!any) return out;

  std::map<SlotKey, std::vector<double>> grad_sum;
  const Tensor& x0 = clean.writes[0];
  const Tensor& x1 = corrupt.writes[0];
  for (int k = 1; k <= m; ++k) {
    const float alpha = static_cast<float>(k) / static_cast<float>(m);
    Tensor x(x0.shape());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = x0[i] + alpha * (x1[i] - x0[i]);
    Interventions iv;
    iv.input_activation = std::move(x);
    RunOptions opts;
    opts.interventions = &iv;
    opts.expose_slots = true;
    opts.input_requires_grad = true;
    Tape tape;
    const ParamVars p = bind_params(tape, w, false);
    const TapedForward f = run_components(tape, p, w, in.clean, in.attention, opts);
    const Var metric = metric_var(f.logits, in.metric);
    tape.backward(metric);
    for (const auto& [key, var] : f.slot_inputs) {
      auto& acc = grad_sum[key];
      const auto gv = var.grad().data();
      if (acc.empty()) acc.assign(gv.size(), 0.0);
      for (std::size_t i = 0; i < gv.size(); ++i) acc[i] += gv[i];
    }
  }
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& acc = grad_sum.at(SlotKey{edges[e].target, edges[e].slot});
    out[e] = dot(delta[static_cast<std::size_t>(edges[e].source)], acc) / m;
  }
  return out;
}

std::string table_header(const std::map<std::string, std::string>& meta) {
  std::string out;
  for (const auto& [k, v] : meta) out += (out.empty() ? "" : " ") + k + "=" + v;
  return out;
}

std::map<std::string, std::string> parse_header(std::string_view line) {
  std::map<std::string, std::string> out;
  std::istringstream in{std::string(line)};
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw UsageError("malformed metadata field '" + tok + "'");
    out[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return out;
}

std::vector<std::string> split_tabs(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  for (;;) {
    const std::size_t j = line.find('\t', i);
    out.emplace_back(line.substr(i, j == std::string_view::npos ? std::string_view::npos : j - i));
    if (j == std::string_view::npos) break;
    i = j + 1;
  }
  return out;
}

int meta_int(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw UsageError("missing metadata field '" + key + "'");
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw UsageError("metadata field '" + key + "' is not an integer");
  }
}

std::string meta_str(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw UsageError("missing metadata field '" + key + "'");
  return it->second;
}

constexpr std::string_view kColumns = "source\ttarget\tslot\tscore\tstep\ttask\tmodel";

struct ParsedRows {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<Edge, double>> rows;
};

ParsedRows parse_rows(std::string_view text, std::string_view magic) {
  ParsedRows out;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != magic) throw UsageError("expected '" + std::string(magic) + "' header");
  if (!std::getline(in, line) || !line.starts_with("# ")) throw UsageError("missing metadata line");
  out.meta = parse_header(std::string_view(line).substr(2));
  const CompGraph g(meta_int(out.meta, "n_layers"), meta_int(out.meta, "n_heads"));
  if (!std::getline(in, line) || line != kColumns) throw UsageError("unexpected column header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 7) throw UsageError("malformed record '" + line + "'");
    const auto src = g.parse_node(f[0]);
    const auto tgt = g.parse_node(f[1]);
    const auto slot = parse_slot(f[2]);
    if (!src || !tgt || !slot) throw UsageError("unknown edge in record '" + line + "'");
    const Edge e{*src, *tgt, *slot};
    if (!g.has_edge(e)) throw UsageError("edge " + g.edge_name(e) + " is not in the graph schema");
    double score = 0.0;
    try {
      score = std::stod(f[3]);
    } catch (const std::exception&) {
      throw UsageError("bad score in record '" + line + "'");
    }
    out.rows.emplace_back(e, score);
  }
  return out;
}

}  // namespace

void DiscoveryConfig::validate() const {
  if (ig_steps < 1) throw ConfigError("ig_steps must be >= 1");
  if (top_n < 0) throw ConfigError("top_n must be >= 0");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
  if (metric != "logit_diff") throw ConfigError("unknown metric '" + metric + "'");
}

int DiscoveryConfig::resolved_top_n(const CompGraph& graph) const {
  const int total = static_cast<int>(graph.edges().size());
  if (top_n > total) throw ParameterError("top_n exceeds the edge count " + std::to_string(total));
  return top_n > 0 ? top_n : std::max(1, static_cast<int>(std::lround(0.1 * total)));
}

std::vector<AnalysisInput> analysis_inputs(const std::vector<PromptPair>& pairs, RunMode mode) {
  std::vector<AnalysisInput> out;
  for (const PromptPair& p : pairs) {
    AnalysisInput in;
    in.clean = analysis_tokens(p, mode, false);
    in.corrupt = analysis_tokens(p, mode, true);
    in.metric = metric_spec(p, mode);
    in.attention = mode == RunMode::kAr ? AttentionMode::kCausal : AttentionMode::kFull;
    out.push_back(std::move(in));
  }
  return out;
}

double EdgeScoreTable::score(const CompGraph& graph, const Edge& e) const {
  const int i = graph.edge_index(e);
  if (i < 0 || !same_schema(graph)) throw UsageError("edge " + graph.edge_name(e) + " is not in this table");
  return scores[static_cast<std::size_t>(i)];
}

bool EdgeScoreTable::same_schema(const CompGraph& graph) const {
  return n_layers == graph.n_layers() && n_heads == graph.n_heads() && scores.size() == graph.edges().size();
}

EdgeScoreTable eap_ig_scores(const Weights& weights, const CompGraph& graph, const std::vector<AnalysisInput>& inputs,
                             int ig_steps) {
  if (ig_steps < 1) throw ParameterError("ig_steps must be >= 1");
  check_inputs(inputs);
  std::vector<std::vector<double>> per_pair(inputs.size());
  parallel_for(static_cast<int>(inputs.size()), [&](int i) {
    per_pair[static_cast<std::size_t>(i)] = eap_ig_pair(weights, graph, inputs[static_cast<std::size_t>(i)], ig_steps);
  });
  EdgeScoreTable t;
  t.n_layers = graph.n_layers();
  t.n_heads = graph.n_heads();
  t.scores.assign(graph.edges().size(), 0.0);
  for (const auto& contrib : per_pair) {
    for (std::size_t e = 0; e < contrib.size(); ++e) t.scores[e] += contrib[e];
  }
  for (double& s : t.scores) s /= static_cast<double>(inputs.size());
  t.n_pairs = static_cast<int>(inputs.size());
  t.ig_steps = ig_steps;
  return t;
}

namespace {

struct PairRuns {
  RunActivations clean;
  RunActivations corrupt;
  float clean_metric = 0.0f;
  float corrupt_metric = 0.0f;
};

std::vector<PairRuns> pair_runs(const Weights& w, const CompGraph& g, const std::vector<AnalysisInput>& inputs) {
  std::vector<PairRuns> runs(inputs.size());
  parallel_for(static_cast<int>(inputs.size()), [&](int i) {
    const AnalysisInput& in = inputs[static_cast<std::size_t>(i)];
    PairRuns& r = runs[static_cast<std::size_t>(i)];
    r.clean = run_activations(w, g, in.clean, in.attention);
    r.corrupt = run_activations(w, g, in.corrupt, in.attention);
    r.clean_metric = metric_value(r.clean.logits, in.metric);
    r.corrupt_metric = metric_value(r.corrupt.logits, in.metric);
  });
  return runs;
}

double patch_effect(const Weights& w, const Edge& e, const std::vector<AnalysisInput>& inputs,
                    const std::vector<PairRuns>& runs) {
  double total = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Interventions iv;
    iv.edge_sources.emplace(e, runs[i].corrupt.writes[static_cast<std::size_t>(e.source)]);
    const Tensor logits = intervene_forward(w, inputs[i].clean, inputs[i].attention, iv);
    total += static_cast<double>(metric_value(logits, inputs[i].metric)) - runs[i].clean_metric;
  }
  return total / static_cast<double>(inputs.size());
}

}  // namespace

double exact_patch_effect(const Weights& weights, const CompGraph& graph, const Edge& edge,
                          const std::vector<AnalysisInput>& inputs) {
  if (!graph.has_edge(edge)) throw GraphError("edge is not in the graph");
  check_inputs(inputs);
  return patch_effect(weights, edge, inputs, pair_runs(weights, graph, inputs));
}

std::vector<double> exact_patch_effects(const Weights& weights, const CompGraph& graph,
                                        const std::vector<AnalysisInput>& inputs) {
  check_inputs(inputs);
  const auto runs = pair_runs(weights, graph, inputs);
  const auto& edges = graph.edges();
  std::vector<double> out(edges.size());
  parallel_for(static_cast<int>(edges.size()), [&](int e) {
    out[static_cast<std::size_t>(e)] = patch_effect(weights, edges[static_cast<std::size_t>(e)], inputs, runs);
  });
  return out;
}

Circuit select_circuit(const EdgeScoreTable& table, const CompGraph& graph, int n) {
  if (!table.same_schema(graph)) throw UsageError("score table does not match the graph schema");
  const int total = static_cast<int>(graph.edges().size());
  if (n < 1 || n > total) {
    throw ParameterError("circuit size " + std::to_string(n) + " outside [1, " + std::to_string(total) + "]");
  }
  std::vector<int> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return std::abs(table.scores[static_cast<std::size_t>(a)]) > std::abs(table.scores[static_cast<std::size_t>(b)]);
  });
  order.resize(static_cast<std::size_t>(n));
  std::sort(order.begin(), order.end());
  Circuit c;
  c.n_layers = graph.n_layers();
  c.n_heads = graph.n_heads();
  for (int i : order) c.edges.push_back(graph.edges()[static_cast<std::size_t>(i)]);
  c.n = n;
  c.task = table.task;
  c.model = table.model;
  c.step = table.step;
  return c;
}

FaithfulnessResult faithfulness(const Weights& weights, const CompGraph& graph, const std::vector<Edge>& circuit,
                                const std::vector<AnalysisInput>& inputs) {
  check_inputs(inputs);
  std::vector<char> keep(graph.edges().size(), 0);
  for (const Edge& e : circuit) {
    const int i = graph.edge_index(e);
    if (i < 0) throw GraphError("circuit edge is not in the graph");
    keep[static_cast<std::size_t>(i)] = 1;
  }
  const auto runs = pair_runs(weights, graph, inputs);
  std::vector<double> circuit_metric(inputs.size(), 0.0);
  std::vector<char> used(inputs.size(), 0);
  parallel_for(static_cast<int>(inputs.size()), [&](int i) {
    const auto k = static_cast<std::size_t>(i);
    if (std::abs(static_cast<double>(runs[k].clean_metric) - runs[k].corrupt_metric) < 1e-8) return;
    used[k] = 1;
    Interventions iv;
    for (std::size_t e = 0; e < keep.size(); ++e) {
      if (keep[e]) continue;
      const Edge& edge = graph.edges()[e];
      iv.edge_sources.emplace(edge, runs[k].corrupt.writes[static_cast<std::size_t>(edge.source)]);
    }
    const Tensor logits = intervene_forward(weights, inputs[k].clean, inputs[k].attention, iv);
    circuit_metric[k] = metric_value(logits, inputs[k].metric);
  });
  FaithfulnessResult r;
  double l_clean = 0.0, l_corrupt = 0.0, l_circuit = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!used[k]) {
      ++r.excluded_pairs;
      continue;
    }
    ++r.used_pairs;
    l_clean += runs[k].clean_metric;
    l_corrupt += runs[k].corrupt_metric;
    l_circuit += circuit_metric[k];
  }
  if (r.used_pairs == 0) throw DegeneracyError("every pair has |L_clean - L_corrupt| < 1e-8");
  const double denom = l_clean - l_corrupt;
  if (std::abs(denom / r.used_pairs) < 1e-8) throw DegeneracyError("mean metric gap between clean and corrupt is < 1e-8");
  r.value = (l_circuit - l_corrupt) / denom;
  return r;
}

std::vector<int> sweep_sizes(const CompGraph& graph, int max_points) {
  const int total = static_cast<int>(graph.edges().size());
  std::vector<int> sizes;
  for (int i = 1; i <= max_points; ++i) {
    sizes.push_back(static_cast<int>((static_cast<long>(i) * total + max_points - 1) / max_points));
  }
  for (int n = 1; n <= std::min(10, total); ++n) sizes.push_back(n);
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  return sizes;
}

std::vector<SweepPoint> faithfulness_sweep(const Weights& weights, const CompGraph& graph, const EdgeScoreTable& table,
                                           const std::vector<AnalysisInput>& inputs, const std::vector<int>& sizes) {
  std::vector<SweepPoint> out;
  for (int n : sizes) {
    const Circuit c = select_circuit(table, graph, n);
    out.push_back({n, faithfulness(weights, graph, c.edges, inputs).value});
  }
  return out;
}

int operating_point(const std::vector<SweepPoint>& sweep, double tau) {
  for (const SweepPoint& p : sweep) {
    if (p.faithfulness >= tau) return p.n;
  }
  return -1;
}

std::vector<std::vector<AnalysisInput>> stepwise_inputs(const Weights& weights, const std::vector<PromptPair>& pairs) {
  if (pairs.empty()) throw UsageError("no prompt pairs");
  const int steps = pairs.front().steps;
  std::vector<std::vector<AnalysisInput>> out(static_cast<std::size_t>(steps), std::vector<AnalysisInput>(pairs.size()));
  for (const PromptPair& p : pairs) {
    if (p.steps != steps) throw PairingError("prompt pairs disagree on the number of diffusion steps");
  }
  parallel_for(static_cast<int>(pairs.size()), [&](int i) {
    const PromptPair& p = pairs[static_cast<std::size_t>(i)];
    if (p.clean.size() != p.corrupt.size()) throw PairingError("clean and corrupt sequences differ in length");
    const MdmDecode clean = decode_mdm(weights, p.clean_prompt(), p.gen_len, p.steps);
    std::vector<std::vector<int>> schedule;
    for (const MaskState& st : clean.trajectory) {
      std::vector<int> positions;
      for (const UnmaskEvent& ev : st.unmasked) positions.push_back(ev.position);
      schedule.push_back(std::move(positions));
    }
    const MdmDecode corrupt = decode_mdm(weights, p.corrupt_prompt(), p.gen_len, p.steps, &schedule);
    if (clean.trajectory.size() != corrupt.trajectory.size() ||
        static_cast<int>(clean.trajectory.size()) != steps) {
      throw PairingError("clean and corrupt trajectories differ in length");
    }
    for (int s = 0; s < steps; ++s) {
      AnalysisInput in;
      in.clean = clean.trajectory[static_cast<std::size_t>(s)].tokens;
      in.corrupt = corrupt.trajectory[static_cast<std::size_t>(s)].tokens;
      in.metric = metric_spec(p, RunMode::kMdm, schedule[static_cast<std::size_t>(s)]);
      in.attention = AttentionMode::kFull;
      out[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)] = std::move(in);
    }
  });
  return out;
}

std::vector<EdgeScoreTable> stepwise_circuits(const Weights& weights, const CompGraph& graph,
                                              const std::vector<PromptPair>& pairs, const DiscoveryConfig& config) {
  config.validate();
  std::vector<EdgeScoreTable> out;
  const auto per_step = stepwise_inputs(weights, pairs);
  for (std::size_t s = 0; s < per_step.size(); ++s) {
    EdgeScoreTable t = eap_ig_scores(weights, graph, per_step[s], config.ig_steps);
    t.step = std::to_string(s);
    t.task = std::string(to_string(pairs.front().task));
    out.push_back(std::move(t));
  }
  return out;
}

EdgeScoreTable aggregate_steps(const std::vector<EdgeScoreTable>& tables) {
  if (tables.empty()) throw UsageError("no step tables to aggregate");
  const EdgeScoreTable& first = tables.front();
  for (const auto& t : tables) {
    if (t.n_layers != first.n_layers || t.n_heads != first.n_heads || t.scores.size() != first.scores.size()) {
      throw UsageError("step tables come from different graphs");
    }
  }
  EdgeScoreTable out = first;
  out.step = "aggregated";
  std::vector<double> column(tables.size());
  for (std::size_t e = 0; e < first.scores.size(); ++e) {
    for (std::size_t s = 0; s < tables.size(); ++s) column[s] = std::abs(tables[s].scores[e]);
    std::sort(column.begin(), column.end());
    double sum = 0.0;
    for (double v : column) sum += v;
    out.scores[e] = sum;
  }
  return out;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw UsageError("spearman inputs differ in length");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::string format_score_table(const EdgeScoreTable& table, const CompGraph& graph) {
  if (!table.same_schema(graph)) throw UsageError("score table does not match the graph schema");
  std::string out = "# mechshift-scores v1\n# ";
  out += table_header({{"task", table.task},
                       {"model", table.model},
                       {"step", table.step},
                       {"pairs", std::to_string(table.n_pairs)},
                       {"ig_steps", std::to_string(table.ig_steps)},
                       {"n_layers", std::to_string(table.n_layers)},
                       {"n_heads", std::to_string(table.n_heads)}});
  out += "\n";
  out += kColumns;
  out += "\n";
  const auto& edges = graph.edges();
  for (std::size_t e = 0; e < edges.size(); ++e) {
    out += graph.node_name(edges[e].source) + "\t" + graph.node_name(edges[e].target) + "\t" +
           std::string(slot_name(edges[e].slot)) + "\t" + format_float(table.scores[e], 17) + "\t" + table.step + "\t" +
           table.task + "\t" + table.model + "\n";
  }
  return out;
}

EdgeScoreTable parse_score_table(std::string_view text) {
  ParsedRows parsed = parse_rows(text, "# mechshift-scores v1");
  EdgeScoreTable t;
  t.n_layers = meta_int(parsed.meta, "n_layers");
  t.n_heads = meta_int(parsed.meta, "n_heads");
  t.task = meta_str(parsed.meta, "task");
  t.model = meta_str(parsed.meta, "model");
  t.step = meta_str(parsed.meta, "step");
  t.n_pairs = meta_int(parsed.meta, "pairs");
  t.ig_steps = meta_int(parsed.meta, "ig_steps");
  const CompGraph g(t.n_layers, t.n_heads);
  t.scores.assign(g.edges().size(), 0.0);
  std::vector<char> seen(g.edges().size(), 0);
  for (const auto& [e, score] : parsed.rows) {
    const auto i = static_cast<std::size_t>(g.edge_index(e));
    if (seen[i]) throw UsageError("duplicate edge " + g.edge_name(e) + " in score table");
    seen[i] = 1;
    t.scores[i] = score;
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw UsageError("score table is missing edges");
  return t;
}

std::string format_circuit(const Circuit& c, const EdgeScoreTable& table, const CompGraph& graph) {
  if (!table.same_schema(graph) || c.n_layers != graph.n_layers() || c.n_heads != graph.n_heads()) {
    throw UsageError("circuit does not match the graph schema");
  }
  std::string out = "# mechshift-circuit v1\n# ";
  out += table_header({{"task", c.task},
                       {"model", c.model},
                       {"step", c.step},
                       {"n", std::to_string(c.n)},
                       {"faithfulness", format_float(c.faithfulness, 17)},
                       {"tau", format_float(c.tau, 17)},
                       {"source", c.source.empty() ? "-" : c.source},
                       {"n_layers", std::to_string(c.n_layers)},
                       {"n_heads", std::to_string(c.n_heads)}});
  out += "\n";
  out += kColumns;
  out += "\n";
  for (const Edge& e : c.edges) {
    out += graph.node_name(e.source) + "\t" + graph.node_name(e.target) + "\t" + std::string(slot_name(e.slot)) +
           "\t" + format_float(table.score(graph, e), 17) + "\t" + c.step + "\t" + c.task + "\t" + c.model + "\n";
  }
  return out;
}

Circuit parse_circuit(std::string_view text) {
  ParsedRows parsed = parse_rows(text, "# mechshift-circuit v1");
  Circuit c;
  c.n_layers = meta_int(parsed.meta, "n_layers");
  c.n_heads = meta_int(parsed.meta, "n_heads");
  c.task = meta_str(parsed.meta, "task");
  c.model = meta_str(parsed.meta, "model");
  c.step = meta_str(parsed.meta, "step");
  c.n = meta_int(parsed.meta, "n");
  c.source = meta_str(parsed.meta, "source");
  try {
    c.faithfulness = std::stod(meta_str(parsed.meta, "faithfulness"));
    c.tau = std::stod(meta_str(parsed.meta, "tau"));
  } catch (const std::invalid_argument&) {
    throw UsageError("bad faithfulness/tau metadata");
  }
  for (const auto& [e, score] : parsed.rows) c.edges.push_back(e);
  std::sort(c.edges.begin(), c.edges.end());
  if (std::adjacent_find(c.edges.begin(), c.edges.end()) != c.edges.end()) throw UsageError("duplicate circuit edge");
  if (static_cast<int>(c.edges.size()) != c.n) throw UsageError("circuit size metadata disagrees with its edges");
  return c;
}

}  // namespace mechshift
