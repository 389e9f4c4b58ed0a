#include <gtest/gtest.h>

#include <random>
#include <set>

#include "grad_oracle.hpp"
#include "mechshift/checkpoint.hpp"
#include "mechshift/errors.hpp"
#include "mechshift/graph.hpp"
#include "mechshift/model.hpp"

using namespace mechshift;

namespace {

std::vector<int> random_tokens(std::mt19937_64& rng, int n, int vocab) {
  std::uniform_int_distribution<int> d(2, vocab - 1);
  std::vector<int> t;
  for (int i = 0; i < n; ++i) t.push_back(d(rng));
  return t;
}

}  // namespace

TEST(Graph, EdgeCounts) {
  EXPECT_EQ(CompGraph(2, 2).edges().size(), 46u);
  EXPECT_EQ(CompGraph(4, 4).edges().size(), 479u);
  EXPECT_EQ(CompGraph(2, 2).node_count(), 8);
}

TEST(Graph, EdgesSortedAndIndexed) {
  const CompGraph g(3, 2);
  const auto& e = g.edges();
  EXPECT_TRUE(std::is_sorted(e.begin(), e.end()));
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(g.edge_index(e[i]), static_cast<int>(i));
  EXPECT_EQ(g.edge_index({g.mlp_node(2), g.head_node(0, 0), Slot::kQ}), -1);
}

TEST(Graph, HeadsReadQkvFromEarlierLayersOnly) {
  const CompGraph g(2, 2);
  EXPECT_TRUE(g.has_edge({g.head_node(0, 1), g.head_node(1, 0), Slot::kK}));
  EXPECT_FALSE(g.has_edge({g.head_node(1, 1), g.head_node(1, 0), Slot::kQ}));
  EXPECT_TRUE(g.has_edge({g.head_node(1, 1), g.mlp_node(1), Slot::kIn}));
  EXPECT_FALSE(g.has_edge({g.input_node(), g.head_node(0, 0), Slot::kIn}));
  EXPECT_TRUE(g.has_edge({g.mlp_node(1), g.logits_node(), Slot::kIn}));
}

TEST(Graph, NamesRoundTrip) {
  const CompGraph g(4, 4);
  for (int v = 0; v < g.node_count(); ++v) EXPECT_EQ(g.parse_node(g.node_name(v)), v);
  EXPECT_EQ(g.node_name(g.head_node(1, 2)), "a1.h2");
  EXPECT_EQ(g.edge_name({g.head_node(1, 0), g.head_node(3, 2), Slot::kQ}), "a1.h0->a3.h2<q>");
  EXPECT_FALSE(g.parse_node("a4.h0"));
  EXPECT_FALSE(g.parse_node("m9"));
  EXPECT_THROW(g.head_node(0, 4), GraphError);
}

TEST(Model, ConfigValidation) {
  ModelConfig c = oracle::tiny_config(AttentionMode::kCausal);
  c.d_head = 3;
  EXPECT_THROW(c.validate(), ParameterError);
  c = oracle::tiny_config(AttentionMode::kCausal);
  c.vocab_size = 1;
  EXPECT_THROW(c.validate(), ParameterError);
}

TEST(Model, RejectsBadTokens) {
  const Weights w = Weights::random(oracle::tiny_config(AttentionMode::kCausal), 1);
  EXPECT_THROW(forward(w, std::vector<int>{1, 99}), IndexError);
  EXPECT_THROW(forward(w, std::vector<int>(9, 3)), LengthError);
  EXPECT_THROW(forward(w, std::vector<int>{}), LengthError);
}

TEST(Model, ComponentForwardMatchesBatchedForward) {
  for (AttentionMode mode : {AttentionMode::kCausal, AttentionMode::kFull}) {
    const ModelConfig cfg = oracle::tiny_config(mode);
    const Weights w = Weights::random(cfg, 3);
    std::mt19937_64 rng(4);
    auto tokens = random_tokens(rng, 7, cfg.vocab_size);
    tokens[2] = cfg.pad_id;
    const ForwardTrace t = forward(w, tokens, mode);
    Tape tape;
    const Tensor batched = run_batched(bind_params(tape, w, false), cfg, tokens, 7, mode).value();
    EXPECT_LE(max_abs_diff(t.logits, batched), 1e-5f);
  }
}

TEST(Model, ResidualDecomposition) {
  const ModelConfig cfg = oracle::tiny_config(AttentionMode::kCausal);
  const Weights w = Weights::random(cfg, 5);
  std::mt19937_64 rng(6);
  const ForwardTrace t = forward(w, random_tokens(rng, 6, cfg.vocab_size));
  const CompGraph g = build_graph(cfg);
  Tensor sum = t.input;
  for (int v : g.upstream_of(g.logits_node())) {
    if (v == g.input_node()) continue;
    const Tensor& c = component_output(t, g, v);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += c[i];
  }
  EXPECT_LE(max_abs_diff(sum, t.final_resid), 1e-5f);
}

TEST(Model, CausalLogitsIgnoreFutureTokens) {
  const ModelConfig cfg = oracle::tiny_config(AttentionMode::kCausal);
  const Weights w = Weights::random(cfg, 7);
  std::mt19937_64 rng(8);
  auto a = random_tokens(rng, 6, cfg.vocab_size);
  auto b = a;
  b[5] = a[5] == 3 ? 4 : 3;
  const ForwardTrace ta = forward(w, a), tb = forward(w, b);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < cfg.vocab_size; ++c) EXPECT_EQ(ta.logits.at(r, c), tb.logits.at(r, c));
  const ForwardTrace fa = forward(w, a, AttentionMode::kFull), fb = forward(w, b, AttentionMode::kFull);
  EXPECT_GT(std::abs(fa.logits.at(0, 0) - fb.logits.at(0, 0)), 0.0f);
}

TEST(Model, AttentionRowsAreDistributionsAndPadIsHidden) {
  const ModelConfig cfg = oracle::tiny_config(AttentionMode::kFull);
  const Weights w = Weights::random(cfg, 9);
  std::vector<int> tokens{3, 4, cfg.pad_id, 5, 6};
  const ForwardTrace t = forward(w, tokens);
  for (const auto& layer : t.attention)
    for (const Tensor& a : layer)
      for (int i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (float p : a.row(i)) s += p;
        EXPECT_NEAR(s, 1.0, 1e-5);
        if (i != 2) {
          EXPECT_EQ(a.at(i, 2), 0.0f);
        }
      }
}

TEST(Model, CleanEdgeSourcesAreANoOp) {
  const ModelConfig cfg = oracle::tiny_config(AttentionMode::kCausal);
  const Weights w = Weights::random(cfg, 10);
  const CompGraph g = build_graph(cfg);
  std::mt19937_64 rng(11);
  const auto tokens = random_tokens(rng, 6, cfg.vocab_size);
  const ForwardTrace t = forward(w, tokens);
  Interventions iv;
  for (const Edge& e : g.edges()) iv.edge_sources[e] = component_output(t, g, e.source);
  EXPECT_EQ(intervene_forward(w, tokens, AttentionMode::kCausal, iv), t.logits);
}

TEST(Model, InterventionShapeIsChecked) {
  const ModelConfig cfg = oracle::tiny_config(AttentionMode::kCausal);
  const Weights w = Weights::random(cfg, 10);
  const CompGraph g = build_graph(cfg);
  Interventions iv;
  iv.edge_sources[g.edges().front()] = Tensor({2, 3});
  EXPECT_THROW(intervene_forward(w, std::vector<int>{3, 4, 5}, AttentionMode::kCausal, iv), Error);
}

TEST(Model, ArgmaxTiesToLowestId) {
  const std::vector<float> l{1.0f, 3.0f, 3.0f, 2.0f};
  EXPECT_EQ(argmax_token(l), 1);
}

TEST(Model, DecodeArAppendsTokens) {
  const ModelConfig cfg = oracle::tiny_config(AttentionMode::kCausal);
  const Weights w = Weights::random(cfg, 12);
  const std::vector<int> prompt{3, 4, 5};
  const auto out = decode_ar(w, prompt, 3);
  ASSERT_EQ(out.size(), 6u);
  EXPECT_TRUE(std::equal(prompt.begin(), prompt.end(), out.begin()));
}

TEST(Model, MdmScheduleContracts) {
  const ModelConfig cfg = oracle::tiny_config(AttentionMode::kFull);
  const Weights w = Weights::random(cfg, 13);
  const std::vector<int> prompt{3, 4, 5};
  for (int steps : {1, 2, 4}) {
    const MdmDecode d = decode_mdm(w, prompt, 4, steps);
    ASSERT_EQ(d.trajectory.size(), static_cast<std::size_t>(steps));
    std::set<int> committed;
    for (std::size_t s = 0; s < d.trajectory.size(); ++s) {
      const MaskState& st = d.trajectory[s];
      EXPECT_EQ(st.step, static_cast<int>(s));
      EXPECT_EQ(st.masked_count(), 4 - static_cast<int>(committed.size()));
      // Committed positions keep their tokens in later states.
      for (int p : committed) EXPECT_EQ(st.tokens[static_cast<std::size_t>(p)], d.tokens[static_cast<std::size_t>(p)]);
      for (const auto& ev : st.unmasked) {
        EXPECT_TRUE(committed.insert(ev.position).second);
        EXPECT_NE(ev.token, cfg.mask_id);
        EXPECT_NE(ev.token, cfg.pad_id);
        EXPECT_EQ(d.tokens[static_cast<std::size_t>(ev.position)], ev.token);
      }
      if (steps == 4) {
        EXPECT_EQ(st.unmasked.size(), 1u);
      }
    }
    EXPECT_EQ(committed.size(), 4u);
    for (int i = 3; i < 7; ++i) EXPECT_NE(d.tokens[static_cast<std::size_t>(i)], cfg.mask_id);
  }
  EXPECT_THROW(decode_mdm(w, prompt, 2, 3), Error);
}

TEST(Model, MdmForcedScheduleReplays) {
  const ModelConfig cfg = oracle::tiny_config(AttentionMode::kFull);
  const Weights w = Weights::random(cfg, 14);
  const std::vector<int> a{3, 4, 5}, b{3, 6, 5};
  const MdmDecode da = decode_mdm(w, a, 3, 3);
  std::vector<std::vector<int>> schedule;
  for (const auto& st : da.trajectory) {
    std::vector<int> pos;
    for (const auto& ev : st.unmasked) pos.push_back(ev.position);
    schedule.push_back(pos);
  }
  const MdmDecode db = decode_mdm(w, b, 3, 3, &schedule);
  for (std::size_t s = 0; s < schedule.size(); ++s) {
    ASSERT_EQ(db.trajectory[s].unmasked.size(), schedule[s].size());
    for (std::size_t i = 0; i < schedule[s].size(); ++i) EXPECT_EQ(db.trajectory[s].unmasked[i].position, schedule[s][i]);
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  const Weights w = Weights::random(oracle::tiny_config(AttentionMode::kFull), 15);
  const std::string bytes = serialize_checkpoint(w);
  const Weights r = parse_checkpoint(bytes);
  EXPECT_TRUE(r == w);
  EXPECT_EQ(serialize_checkpoint(r), bytes);
}

TEST(Checkpoint, CorruptionIsAFileError) {
  const std::string bytes = serialize_checkpoint(Weights::random(oracle::tiny_config(AttentionMode::kFull), 16));
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 4)), FileError);
  EXPECT_THROW(parse_checkpoint("not a checkpoint"), FileError);
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), FileError);
}

TEST(Weights, RandomIsSeedDeterministic) {
  const ModelConfig cfg = oracle::tiny_config(AttentionMode::kCausal);
  EXPECT_TRUE(Weights::random(cfg, 1) == Weights::random(cfg, 1));
  EXPECT_FALSE(Weights::random(cfg, 1) == Weights::random(cfg, 2));
}
