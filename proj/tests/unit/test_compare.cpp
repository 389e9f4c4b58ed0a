#include <gtest/gtest.h>

#include "mechshift/compare.hpp"
#include "mechshift/errors.hpp"

using namespace mechshift;

namespace {

// Nodes of a 2x2 graph: 0 input, 1 a0.h0, 2 a0.h1, 3 m0, 4 a1.h0, 5 a1.h1, 6 m1, 7 logits.
EdgeScoreTable table_with(const CompGraph& g, const std::vector<std::pair<Edge, double>>& scores) {
  EdgeScoreTable t;
  t.n_layers = g.n_layers();
  t.n_heads = g.n_heads();
  t.scores.assign(g.edges().size(), 0.0);
  for (const auto& [e, s] : scores) t.scores[static_cast<std::size_t>(g.edge_index(e))] = s;
  return t;
}

const Edge kInToH0{0, 1, Slot::kV};
const Edge kH0ToLogits{1, 7, Slot::kIn};
const Edge kInToM1{0, 6, Slot::kIn};

}  // namespace

TEST(Jaccard, HandComputed) {
  const std::vector<Edge> a{kInToH0, kH0ToLogits, kInToM1};
  const std::vector<Edge> b{kH0ToLogits, kInToM1, Edge{3, 7, Slot::kIn}};
  EXPECT_DOUBLE_EQ(jaccard_edges(a, b), 2.0 / 4.0);
  EXPECT_DOUBLE_EQ(jaccard_edges(a, a), 1.0);
  EXPECT_DOUBLE_EQ(jaccard_edges(a, {}), 0.0);
  bool both = false;
  EXPECT_DOUBLE_EQ(jaccard_edges({}, {}, &both), 1.0);
  EXPECT_TRUE(both);
  // Slots distinguish edges.
  EXPECT_DOUBLE_EQ(jaccard_edges({kInToH0}, {Edge{0, 1, Slot::kQ}}), 0.0);
}

TEST(NodeScores, SumOfIncidentMagnitudes) {
  const CompGraph g(2, 2);
  const auto t = table_with(g, {{kInToH0, -5.0}, {kH0ToLogits, 4.0}, {kInToM1, 0.1}, {Edge{3, 7, Slot::kIn}, 9.0}});
  const ComponentScore s = node_scores(t, g, {kInToH0, kH0ToLogits, kInToM1});
  ASSERT_EQ(s.s.size(), 8u);
  EXPECT_DOUBLE_EQ(s.s[0], 5.1);
  EXPECT_DOUBLE_EQ(s.s[1], 9.0);
  EXPECT_DOUBLE_EQ(s.s[6], 0.1);
  EXPECT_DOUBLE_EQ(s.s[7], 4.0);
  EXPECT_DOUBLE_EQ(s.s[3], 0.0);  // edge outside E_top is ignored
  EXPECT_THROW(node_scores(t, g, {Edge{7, 0, Slot::kIn}}), UsageError);
  EXPECT_THROW(node_scores(t, CompGraph(3, 2), {kInToH0}), UsageError);
}

TEST(TopK, TiesGoToEarlierNodes) {
  ComponentScore s;
  s.s = {1.0, 3.0, 2.0, 3.0, 0.0, 2.0, 0.0, 0.0};
  EXPECT_EQ(top_k_components(s, 2).nodes, (std::vector<int>{1, 3}));
  EXPECT_EQ(top_k_components(s, 3).nodes, (std::vector<int>{1, 2, 3}));
  const TopK all = top_k_components(s, 7);
  EXPECT_TRUE(all.flagged);
  EXPECT_EQ(all.nodes, (std::vector<int>{0, 1, 2, 3, 5}));
  EXPECT_FALSE(top_k_components(s, 5).flagged);
}

TEST(TopK, OverlapAndInducedEdges) {
  EXPECT_DOUBLE_EQ(topk_overlap({1, 2, 3}, {2, 3, 4, 5}), 2.0 / 5.0);
  EXPECT_DOUBLE_EQ(topk_overlap({}, {}), 1.0);
  const auto induced = induced_edges({kInToH0, kH0ToLogits, kInToM1}, {0, 1, 6});
  EXPECT_EQ(induced, (std::vector<Edge>{kInToH0, kInToM1}));
}

TEST(ConnectedTopK, SmallestConnectedSet) {
  const CompGraph g(2, 2);
  const auto t = table_with(g, {{kInToH0, 5.0}, {kH0ToLogits, 4.0}, {kInToM1, 0.1}});
  const ComponentScore s = node_scores(t, g, {kInToH0, kH0ToLogits, kInToM1});
  const TopK plain = connected_top_k(s, g);
  EXPECT_FALSE(plain.flagged);
  EXPECT_EQ(plain.nodes, (std::vector<int>{0, 1, 7}));
  const TopK strict = connected_top_k(s, g, [](const std::vector<Edge>& e) { return e.size() >= 3; });
  EXPECT_EQ(strict.nodes, (std::vector<int>{0, 1, 6, 7}));
  const TopK never = connected_top_k(s, g, [](const std::vector<Edge>&) { return false; });
  EXPECT_TRUE(never.flagged);
  EXPECT_EQ(never.nodes, (std::vector<int>{0, 1, 6, 7}));
}

TEST(ConnectedTopK, RequiresInputToLogitsPath) {
  const CompGraph g(2, 2);
  // Input feeds a0.h0 and m1 feeds logits, but nothing links the two halves.
  const Edge m1_logits{6, 7, Slot::kIn};
  const auto t = table_with(g, {{kInToH0, 5.0}, {m1_logits, 4.0}});
  const TopK k = connected_top_k(node_scores(t, g, {kInToH0, m1_logits}), g);
  EXPECT_TRUE(k.flagged);
}

TEST(LayerProfile, DistinctHeadsPerLayer) {
  const CompGraph g(2, 2);
  const std::vector<Edge> c{kInToH0, kH0ToLogits, Edge{1, 4, Slot::kQ}, Edge{2, 5, Slot::kK}, Edge{3, 7, Slot::kIn}};
  const LayerProfile p = layer_profile(c, g);
  EXPECT_EQ(p.counts, (std::vector<int>{2, 2}));
  const LayerProfile q = layer_profile({kInToH0}, g);
  EXPECT_EQ(q.counts, (std::vector<int>{1, 0}));
  EXPECT_EQ(profile_diff(p, q), (std::vector<int>{1, 2}));
  EXPECT_THROW(profile_diff(p, layer_profile({}, CompGraph(3, 2))), UsageError);
}

TEST(Stability, IdenticalStepsAreStable) {
  const CompGraph g(2, 2);
  const auto t = table_with(g, {{kInToH0, 5.0}, {kH0ToLogits, 4.0}, {kInToM1, 0.1}});
  const Stability same = step_component_stability({t, t, t}, g, 3, 3);
  EXPECT_DOUBLE_EQ(same.consecutive, 1.0);
  EXPECT_DOUBLE_EQ(same.all_pairs, 1.0);
  EXPECT_FALSE(same.flagged);
  const Stability single = step_component_stability({t}, g, 3, 3);
  EXPECT_TRUE(single.flagged);
  EXPECT_DOUBLE_EQ(single.consecutive, 1.0);
}

TEST(Stability, DisjointStepsScoreZero) {
  const CompGraph g(2, 2);
  const auto a = table_with(g, {{kInToH0, 1.0}});
  const auto b = table_with(g, {{Edge{5, 7, Slot::kIn}, 1.0}});
  const Stability s = step_component_stability({a, b, a}, g, 1, 2);
  EXPECT_DOUBLE_EQ(s.consecutive, 0.0);
  // Pairs (0,1), (0,2), (1,2): only steps 0 and 2 agree.
  EXPECT_DOUBLE_EQ(s.all_pairs, 1.0 / 3.0);
}

TEST(Rendering, DotAndSvg) {
  const CompGraph g(2, 2);
  Circuit arm;
  arm.n_layers = arm.n_heads = 2;
  arm.edges = {kInToH0, kH0ToLogits};
  Circuit mdm = arm;
  mdm.edges = {kH0ToLogits, kInToM1};
  const std::string dot = circuit_dot(arm, g, "arm");
  EXPECT_EQ(dot.rfind("digraph", 0), 0u);
  EXPECT_NE(dot.find("a0.h0"), std::string::npos);
  const std::string div = divergence_dot(arm, mdm, g, "div");
  EXPECT_NE(div.find("black"), std::string::npos);
  EXPECT_NE(div.find("blue"), std::string::npos);
  EXPECT_NE(div.find("orange"), std::string::npos);
  const std::string svg = heatmap_svg("diff", {"ioi"}, {"L0", "L1", "L2"}, {{1.0, -1.0, 0.0}});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}
