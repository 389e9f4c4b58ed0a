#include "mechshift/compare.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>
#include <set>

#include "mechshift/errors.hpp"

namespace mechshift {

double jaccard_edges(const std::vector<Edge>& a, const std::vector<Edge>& b, bool* both_empty) {
  const std::set<Edge> sa(a.begin(), a.end());
  const std::set<Edge> sb(b.begin(), b.end());
  if (both_empty) *both_empty = sa.empty() && sb.empty();
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (const Edge& e : sa) inter += sb.count(e);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

ComponentScore node_scores(const EdgeScoreTable& table, const CompGraph& graph, const std::vector<Edge>& e_top) {
  if (!table.same_schema(graph)) throw UsageError("score table does not match the graph schema");
  ComponentScore out;
  out.s.assign(static_cast<std::size_t>(graph.node_count()), 0.0);
  for (const Edge& e : e_top) {
    const int i = graph.edge_index(e);
    if (i < 0) throw UsageError("edge is not in the score table");
    const double w = std::abs(table.scores[static_cast<std::size_t>(i)]);
    out.s[static_cast<std::size_t>(e.source)] += w;
    out.s[static_cast<std::size_t>(e.target)] += w;
  }
  out.e_top = e_top;
  return out;
}

TopK top_k_components(const ComponentScore& scores, int k) {
  if (k < 1) throw ParameterError("K must be >= 1");
  std::vector<int> scored;
  for (int v = 0; v < static_cast<int>(scores.s.size()); ++v) {
    if (scores.s[static_cast<std::size_t>(v)] > 0.0) scored.push_back(v);
  }
  TopK out;
  if (static_cast<int>(scored.size()) <= k) {
    out.nodes = scored;
    out.flagged = static_cast<int>(scored.size()) < k;
    return out;
  }
  std::stable_sort(scored.begin(), scored.end(), [&](int a, int b) {
    return scores.s[static_cast<std::size_t>(a)] > scores.s[static_cast<std::size_t>(b)];
  });
  scored.resize(static_cast<std::size_t>(k));
  std::sort(scored.begin(), scored.end());
  out.nodes = scored;
  return out;
}

double topk_overlap(const std::vector<int>& a, const std::vector<int>& b) {
  const std::set<int> sa(a.begin(), a.end());
  const std::set<int> sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (int v : sa) inter += sb.count(v);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

namespace {

bool well_connected(const std::vector<int>& nodes, const std::vector<Edge>& edges, const CompGraph& graph) {
  const std::set<int> in(nodes.begin(), nodes.end());
  if (!in.contains(graph.input_node()) || !in.contains(graph.logits_node())) return false;
  std::vector<int> parent(static_cast<std::size_t>(graph.node_count()));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    return x;
  };
  std::vector<std::vector<int>> out(static_cast<std::size_t>(graph.node_count()));
  for (const Edge& e : edges) {
    if (!in.contains(e.source) || !in.contains(e.target)) continue;
    parent[static_cast<std::size_t>(find(e.source))] = find(e.target);
    out[static_cast<std::size_t>(e.source)].push_back(e.target);
  }
  const int root = find(nodes.front());
  for (int v : nodes) {
    if (find(v) != root) return false;
  }
  // Directed reachability Input -> Logits (edges always point forward).
  std::vector<char> reach(static_cast<std::size_t>(graph.node_count()), 0);
  reach[static_cast<std::size_t>(graph.input_node())] = 1;
  for (int v = 0; v < graph.node_count(); ++v) {
    if (!reach[static_cast<std::size_t>(v)]) continue;
    for (int t : out[static_cast<std::size_t>(v)]) reach[static_cast<std::size_t>(t)] = 1;
  }
  return reach[static_cast<std::size_t>(graph.logits_node())] != 0;
}

}  // namespace

std::vector<Edge> induced_edges(const std::vector<Edge>& e_top, const std::vector<int>& nodes) {
  const std::set<int> in(nodes.begin(), nodes.end());
  std::vector<Edge> out;
  for (const Edge& e : e_top) {
    if (in.contains(e.source) && in.contains(e.target)) out.push_back(e);
  }
  std::sort(out.begin(), out.end());
  return out;
}

TopK connected_top_k(const ComponentScore& scores, const CompGraph& graph,
                     const std::function<bool(const std::vector<Edge>&)>& accept) {
  int scored = 0;
  for (double s : scores.s) scored += s > 0.0 ? 1 : 0;
  for (int k = 2; k <= scored; ++k) {
    TopK t = top_k_components(scores, k);
    if (!well_connected(t.nodes, scores.e_top, graph)) continue;
    if (!accept || accept(induced_edges(scores.e_top, t.nodes))) return t;
  }
  TopK all = top_k_components(scores, std::max(1, scored));
  all.flagged = true;
  return all;
}

LayerProfile layer_profile(const std::vector<Edge>& circuit, const CompGraph& graph) {
  LayerProfile p;
  p.counts.assign(static_cast<std::size_t>(graph.n_layers()), 0);
  std::set<int> heads;
  for (const Edge& e : circuit) {
    for (int v : {e.source, e.target}) {
      if (graph.node(v).kind == NodeKind::kHead) heads.insert(v);
    }
  }
  for (int v : heads) ++p.counts[static_cast<std::size_t>(graph.node(v).layer)];
  return p;
}

std::vector<int> profile_diff(const LayerProfile& mdm, const LayerProfile& arm) {
  if (mdm.counts.size() != arm.counts.size()) throw UsageError("layer profiles have different lengths");
  std::vector<int> out(mdm.counts.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mdm.counts[i] - arm.counts[i];
  return out;
}

Stability step_component_stability(const std::vector<EdgeScoreTable>& step_tables, const CompGraph& graph, int n,
                                   int k) {
  Stability st;
  if (step_tables.size() < 2) {
    st.flagged = true;
    return st;
  }
  std::vector<std::vector<int>> sets;
  for (const auto& t : step_tables) {
    const Circuit c = select_circuit(t, graph, n);
    sets.push_back(top_k_components(node_scores(t, graph, c.edges), k).nodes);
  }
  double consecutive = 0.0;
  for (std::size_t i = 1; i < sets.size(); ++i) consecutive += topk_overlap(sets[i - 1], sets[i]);
  st.consecutive = consecutive / static_cast<double>(sets.size() - 1);
  double all = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < sets.size(); ++i)
    for (std::size_t j = i + 1; j < sets.size(); ++j) {
      all += topk_overlap(sets[i], sets[j]);
      ++pairs;
    }
  st.all_pairs = all / pairs;
  return st;
}

namespace {

std::string dot_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

std::string dot_node_lines(const std::set<int>& nodes, const CompGraph& graph) {
  std::string out;
  for (int v : nodes) {
    const NodeInfo& n = graph.node(v);
    const char* shape = n.kind == NodeKind::kHead ? "ellipse" : n.kind == NodeKind::kMlp ? "box" : "diamond";
    out += fmt::format("  \"{}\" [shape={}];\n", graph.node_name(v), shape);
  }
  return out;
}

std::string dot_edge(const CompGraph& graph, const Edge& e, const char* color) {
  std::string attrs = fmt::format("color=\"{}\"", color);
  if (e.slot != Slot::kIn) attrs += fmt::format(", label=\"{}\"", slot_name(e.slot));
  return fmt::format("  \"{}\" -> \"{}\" [{}];\n", graph.node_name(e.source), graph.node_name(e.target), attrs);
}

}  // namespace

std::string circuit_dot(const Circuit& circuit, const CompGraph& graph, const std::string& title) {
  std::set<int> nodes;
  for (const Edge& e : circuit.edges) nodes.insert({e.source, e.target});
  std::string out = fmt::format("digraph circuit {{\n  label=\"{}\";\n  rankdir=BT;\n", dot_escape(title));
  out += dot_node_lines(nodes, graph);
  for (const Edge& e : circuit.edges) out += dot_edge(graph, e, "black");
  out += "}\n";
  return out;
}

std::string divergence_dot(const Circuit& arm, const Circuit& mdm, const CompGraph& graph, const std::string& title) {
  const std::set<Edge> a(arm.edges.begin(), arm.edges.end());
  const std::set<Edge> m(mdm.edges.begin(), mdm.edges.end());
  std::set<Edge> all(a);
  all.insert(m.begin(), m.end());
  std::set<int> nodes;
  for (const Edge& e : all) nodes.insert({e.source, e.target});
  std::string out = fmt::format(
      "digraph divergence {{\n  label=\"{} (black: both, blue: ARM only, orange: MDM only)\";\n  rankdir=BT;\n",
      dot_escape(title));
  out += dot_node_lines(nodes, graph);
  for (const Edge& e : all) {
    const bool in_a = a.contains(e), in_m = m.contains(e);
    out += dot_edge(graph, e, in_a && in_m ? "black" : in_a ? "blue" : "orange");
  }
  out += "}\n";
  return out;
}

std::string heatmap_svg(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels, const std::vector<std::vector<double>>& values) {
  if (values.size() != row_labels.size()) throw UsageError("heatmap rows and labels disagree");
  double scale = 0.0;
  for (const auto& row : values) {
    if (row.size() != col_labels.size()) throw UsageError("heatmap columns and labels disagree");
    for (double v : row) scale = std::max(scale, std::abs(v));
  }
  if (scale == 0.0) scale = 1.0;
  const int cell = 48, left = 140, top = 50;
  const int width = left + cell * static_cast<int>(col_labels.size()) + 20;
  const int height = top + cell * static_cast<int>(row_labels.size()) + 30;
  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" "
      "font-size=\"12\">\n",
      width, height);
  out += fmt::format("  <text x=\"10\" y=\"20\" font-size=\"14\">{}</text>\n", title);
  for (std::size_t c = 0; c < col_labels.size(); ++c) {
    out += fmt::format("  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                       left + cell * static_cast<int>(c) + cell / 2, top - 8, col_labels[c]);
  }
  for (std::size_t r = 0; r < values.size(); ++r) {
    const int y = top + cell * static_cast<int>(r);
    out += fmt::format("  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n", left - 8, y + cell / 2 + 4,
                       row_labels[r]);
    for (std::size_t c = 0; c < values[r].size(); ++c) {
      const double v = values[r][c];
      const double t = std::min(1.0, std::abs(v) / scale);
      const int fade = static_cast<int>(std::lround(255.0 * (1.0 - t)));
      const std::string fill = v > 0 ? fmt::format("rgb({},255,{})", fade, fade)
                               : v < 0 ? fmt::format("rgb(255,{},{})", fade, fade)
                                       : std::string("rgb(255,255,255)");
      const int x = left + cell * static_cast<int>(c);
      out += fmt::format("  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\" stroke=\"#888\"/>\n", x, y,
                         cell, cell, fill);
      out += fmt::format("  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:g}</text>\n", x + cell / 2,
                         y + cell / 2 + 4, v);
    }
  }
  out += "</svg>\n";
  return out;
}

}  // namespace mechshift
