#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mechshift/discovery.hpp"
#include "mechshift/graph.hpp"

namespace mechshift {

/// |E1 n E2| / |E1 u E2|; two empty sets give 1.0 and set *both_empty.
double jaccard_edges(const std::vector<Edge>& a, const std::vector<Edge>& b, bool* both_empty = nullptr);

struct ComponentScore {
  std::vector<double> s;     // per node, s(v) >= 0
  std::vector<Edge> e_top;   // provenance edge set
  int k = 0;                 // K used for the last selection, 0 if none
};

/// s(v) = sum of |score| over E_top edges incident to v (incoming + outgoing).
ComponentScore node_scores(const EdgeScoreTable& table, const CompGraph& graph, const std::vector<Edge>& e_top);

struct TopK {
  std::vector<int> nodes;  // ascending node order
  bool flagged = false;    // fewer than K scored nodes were available
};

/// K largest s(v) among scored nodes; ties go to the earlier node in
/// (layer, kind, head) order.
TopK top_k_components(const ComponentScore& scores, int k);

/// Jaccard over node sets.
double topk_overlap(const std::vector<int>& a, const std::vector<int>& b);

/// E_top edges with both endpoints in `nodes`.
std::vector<Edge> induced_edges(const std::vector<Edge>& e_top, const std::vector<int>& nodes);

/// Smallest K >= 2 whose Top-K nodes, joined by E_top edges, form a weakly
/// connected subgraph containing a directed Input -> Logits path and whose
/// induced edge set satisfies `accept` (when given). Falls back to all
/// scored nodes (flagged) when no such K exists.
TopK connected_top_k(const ComponentScore& scores, const CompGraph& graph,
                     const std::function<bool(const std::vector<Edge>&)>& accept = {});

struct LayerProfile {
  std::vector<int> counts;  // distinct heads per layer
  std::string model;
  std::string task;
};

LayerProfile layer_profile(const std::vector<Edge>& circuit, const CompGraph& graph);
std::vector<int> profile_diff(const LayerProfile& mdm, const LayerProfile& arm);

struct Stability {
  double consecutive = 1.0;
  double all_pairs = 1.0;
  bool flagged = false;  // fewer than two steps
};

/// Mean Top-K node-set overlap between consecutive steps (and over all step
/// pairs), each step's circuit being its top-n edges.
Stability step_component_stability(const std::vector<EdgeScoreTable>& step_tables, const CompGraph& graph, int n,
                                   int k);

std::string circuit_dot(const Circuit& circuit, const CompGraph& graph, const std::string& title);
/// Edges present in both circuits are black, ARM-only blue, MDM-only orange.
std::string divergence_dot(const Circuit& arm, const Circuit& mdm, const CompGraph& graph, const std::string& title);

/// Diverging heatmap: positive cells green, negative red, zero white.
std::string heatmap_svg(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels, const std::vector<std::vector<double>>& values);

}  // namespace mechshift
