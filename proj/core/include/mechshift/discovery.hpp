#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mechshift/graph.hpp"
#include "mechshift/model.hpp"
#include "mechshift/tasks.hpp"

namespace mechshift {

struct DiscoveryConfig {
  int ig_steps = 5;          // m
  int top_n = 0;             // 0 selects 10% of the edges
  double tau = 0.6;          // faithfulness operating point
  std::string metric = "logit_diff";

  void validate() const;
  int resolved_top_n(const CompGraph& graph) const;
};

/// One clean/corrupt input pair as the model sees it, with the metric that
/// scores its logits.
struct AnalysisInput {
  std::vector<int> clean;
  std::vector<int> corrupt;
  MetricSpec metric;
  AttentionMode attention = AttentionMode::kCausal;
};

std::vector<AnalysisInput> analysis_inputs(const std::vector<PromptPair>& pairs, RunMode mode);

struct EdgeScoreTable {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> scores;  // aligned with CompGraph::edges()
  std::string task;
  std::string model;
  std::string step = "ar";     // "ar", a step index, or "aggregated"
  int n_pairs = 0;
  int ig_steps = 0;

  double score(const CompGraph& graph, const Edge& e) const;
  bool same_schema(const CompGraph& graph) const;
};

struct Circuit {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<Edge> edges;  // sorted by (source, target, slot)
  int n = 0;
  double faithfulness = 0.0;
  double tau = 0.6;
  std::string source;       // provenance of the score table
  std::string task;
  std::string model;
  std::string step = "ar";
};

/// EAP-IG: for each edge u->(v, slot), the mean over pairs of
/// (a_u^corrupt - a_u^clean) . (1/m) sum_k dL/d(slot input of v), with the
/// gradient taken at the input embedding interpolated k/m of the way from
/// clean to corrupt. Deterministic for any worker count.
EdgeScoreTable eap_ig_scores(const Weights& weights, const CompGraph& graph, const std::vector<AnalysisInput>& inputs,
                             int ig_steps);

/// Mean over pairs of L(clean run with only `edge` fed the corrupt source
/// activation) - L(clean run).
double exact_patch_effect(const Weights& weights, const CompGraph& graph, const Edge& edge,
                          const std::vector<AnalysisInput>& inputs);
/// exact_patch_effect for every graph edge, aligned with graph.edges().
std::vector<double> exact_patch_effects(const Weights& weights, const CompGraph& graph,
                                        const std::vector<AnalysisInput>& inputs);

/// The N largest-|score| edges; ties broken by edge order.
Circuit select_circuit(const EdgeScoreTable& table, const CompGraph& graph, int n);

struct FaithfulnessResult {
  double value = 0.0;
  int used_pairs = 0;
  int excluded_pairs = 0;  // |L_clean - L_corrupt| < 1e-8
};

/// (L_circuit - L_corrupt) / (L_clean - L_corrupt) with each L averaged over
/// the non-degenerate pairs; non-circuit edges carry corrupt activations.
/// Throws DegeneracyError when every pair is degenerate.
FaithfulnessResult faithfulness(const Weights& weights, const CompGraph& graph, const std::vector<Edge>& circuit,
                                const std::vector<AnalysisInput>& inputs);

struct SweepPoint {
  int n = 0;
  double faithfulness = 0.0;
};

std::vector<int> sweep_sizes(const CompGraph& graph, int max_points = 60);
std::vector<SweepPoint> faithfulness_sweep(const Weights& weights, const CompGraph& graph, const EdgeScoreTable& table,
                                           const std::vector<AnalysisInput>& inputs, const std::vector<int>& sizes);
/// Smallest swept N with faithfulness >= tau, or -1.
int operating_point(const std::vector<SweepPoint>& sweep, double tau);

/// Per-step inputs along the model's own MDM decode of each clean prompt;
/// the corrupt prompt is decoded with the clean unmasking schedule. Step s
/// scores the positions committed at step s.
std::vector<std::vector<AnalysisInput>> stepwise_inputs(const Weights& weights, const std::vector<PromptPair>& pairs);

std::vector<EdgeScoreTable> stepwise_circuits(const Weights& weights, const CompGraph& graph,
                                              const std::vector<PromptPair>& pairs, const DiscoveryConfig& config);

/// Per-edge sum of |score| across tables (order-invariant).
EdgeScoreTable aggregate_steps(const std::vector<EdgeScoreTable>& tables);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

std::string format_score_table(const EdgeScoreTable& table, const CompGraph& graph);
EdgeScoreTable parse_score_table(std::string_view text);
std::string format_circuit(const Circuit& circuit, const EdgeScoreTable& table, const CompGraph& graph);
Circuit parse_circuit(std::string_view text);

}  // namespace mechshift
