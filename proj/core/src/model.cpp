#include "mechshift/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mechshift/errors.hpp"

namespace mechshift {

namespace {

constexpr float kMaskedScore = -1e9f;

Var apply_norm(const ModelConfig& cfg, Var x, Var gain) {
  return cfg.norm == NormKind::kRms ? rmsnorm(x, gain) : scale_by_gain(x, gain);
}

Var apply_activation(const ModelConfig& cfg, Var x) { return cfg.activation == Activation::kGelu ? gelu(x) : x; }

// Node index arithmetic mirrors CompGraph without materialising edges.
int head_index(const ModelConfig& cfg, int l, int h) { return 1 + l * (cfg.n_heads + 1) + h; }
int mlp_index(const ModelConfig& cfg, int l) { return 1 + l * (cfg.n_heads + 1) + cfg.n_heads; }
int logits_index(const ModelConfig& cfg) { return 1 + cfg.n_layers * (cfg.n_heads + 1); }

void validate_interventions(const ModelConfig& cfg, const Interventions& iv, int T) {
  if (iv.empty()) return;
  const CompGraph graph(cfg.n_layers, cfg.n_heads);
  const Shape act_shape{T, cfg.d_model};
  if (iv.input_activation && iv.input_activation->shape() != act_shape) {
    throw DimensionError("input activation override has shape " + shape_string(iv.input_activation->shape()) +
                         ", expected " + shape_string(act_shape));
  }
  for (const auto& [edge, value] : iv.edge_sources) {
    if (edge.source < 0 || edge.source >= graph.node_count() || edge.target < 0 ||
        edge.target >= graph.node_count() || !graph.has_edge(edge)) {
      throw GraphError("intervention names a non-existent edge (" + std::to_string(edge.source) + " -> " +
                       std::to_string(edge.target) + " <" + std::string(slot_name(edge.slot)) + ">)");
    }
    if (value.shape() != act_shape) {
      throw DimensionError("edge source value for " + graph.edge_name(edge) + " has shape " +
                           shape_string(value.shape()) + ", expected " + shape_string(act_shape));
    }
  }
  for (const auto& [key, value] : iv.slot_overrides) {
    if (key.node < 0 || key.node >= graph.node_count()) {
      throw GraphError("intervention names unknown node " + std::to_string(key.node));
    }
    const auto slots = graph.slots_of(key.node);
    if (std::find(slots.begin(), slots.end(), key.slot) == slots.end()) {
      throw GraphError("node " + graph.node_name(key.node) + " has no input slot '" +
                       std::string(slot_name(key.slot)) + "'");
    }
    if (key.position < 0 || key.position >= T) {
      throw IndexError("intervention position " + std::to_string(key.position) + " outside sequence of length " +
                       std::to_string(T));
    }
    if (static_cast<int>(value.size()) != cfg.d_model) {
      throw DimensionError("intervention on " + graph.node_name(key.node) + " has width " +
                           std::to_string(value.size()) + ", expected " + std::to_string(cfg.d_model));
    }
  }
}

Tensor masked_scores(std::span<const int> tokens, AttentionMode mode, int pad_id) {
  const int T = static_cast<int>(tokens.size());
  const auto allowed = attention_allowed(tokens, mode, pad_id);
  Tensor m(Shape{T, T});
  for (std::size_t i = 0; i < allowed.size(); ++i) m[i] = allowed[i] ? 0.0f : kMaskedScore;
  return m;
}

std::vector<float> normal_values(std::mt19937_64& rng, std::size_t n, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> v(n);
  for (float& x : v) x = dist(rng);
  return v;
}

Tensor normal_tensor(std::mt19937_64& rng, Shape shape, float stddev) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), normal_values(rng, n, stddev));
}

}  // namespace

std::string_view to_string(AttentionMode mode) { return mode == AttentionMode::kCausal ? "causal" : "full"; }

AttentionMode parse_attention_mode(std::string_view s) {
  if (s == "causal") return AttentionMode::kCausal;
  if (s == "full") return AttentionMode::kFull;
  throw ParameterError("unknown attention mode '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1 || vocab_size < 1 || max_positions < 1) {
    throw ParameterError("model config counts must all be >= 1");
  }
  if (d_model != n_heads * d_head) {
    throw ParameterError("d_model (" + std::to_string(d_model) + ") must equal n_heads * d_head (" +
                         std::to_string(n_heads * d_head) + ")");
  }
  if (mask_id < 0 || mask_id >= vocab_size || pad_id < 0 || pad_id >= vocab_size || mask_id == pad_id) {
    throw ParameterError("MASK/PAD ids must be distinct and inside the vocabulary");
  }
}

Weights Weights::zeros(const ModelConfig& c) {
  c.validate();
  Weights w;
  w.config = c;
  const int d = c.d_model;
  w.token_embedding = Tensor::zeros({c.vocab_size, d});
  w.position_embedding = Tensor::zeros({c.max_positions, d});
  for (int l = 0; l < c.n_layers; ++l) {
    LayerWeights lw;
    lw.attn_gain = Tensor::zeros({d});
    lw.w_q = Tensor::zeros({d, d});
    lw.w_k = Tensor::zeros({d, d});
    lw.w_v = Tensor::zeros({d, d});
    lw.w_o = Tensor::zeros({d, d});
    lw.mlp_gain = Tensor::zeros({d});
    lw.w_in = Tensor::zeros({d, c.d_mlp});
    lw.w_out = Tensor::zeros({c.d_mlp, d});
    w.layers.push_back(std::move(lw));
  }
  w.final_gain = Tensor::zeros({d});
  w.unembedding = Tensor::zeros({d, c.vocab_size});
  return w;
}

Weights Weights::random(const ModelConfig& c, std::uint64_t seed) {
  Weights w = zeros(c);
  std::mt19937_64 rng(seed);
  const int d = c.d_model;
  const float proj = 1.0f / std::sqrt(static_cast<float>(d));
  const float out_scale = proj / std::sqrt(2.0f * static_cast<float>(c.n_layers));
  w.token_embedding = normal_tensor(rng, {c.vocab_size, d}, 0.5f);
  w.position_embedding = normal_tensor(rng, {c.max_positions, d}, 0.5f);
  for (auto& lw : w.layers) {
    lw.attn_gain.fill(1.0f);
    lw.w_q = normal_tensor(rng, {d, d}, proj);
    lw.w_k = normal_tensor(rng, {d, d}, proj);
    lw.w_v = normal_tensor(rng, {d, d}, proj);
    lw.w_o = normal_tensor(rng, {d, d}, out_scale);
    lw.mlp_gain.fill(1.0f);
    lw.w_in = normal_tensor(rng, {d, c.d_mlp}, proj);
    lw.w_out = normal_tensor(rng, {c.d_mlp, d}, 1.0f / std::sqrt(static_cast<float>(c.d_mlp)) /
                                                    std::sqrt(2.0f * static_cast<float>(c.n_layers)));
  }
  w.final_gain.fill(1.0f);
  w.unembedding = normal_tensor(rng, {d, c.vocab_size}, proj);
  return w;
}

std::vector<std::pair<std::string, const Tensor*>> Weights::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.emplace_back("tok_emb", &token_embedding);
  out.emplace_back("pos_emb", &position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const LayerWeights& lw = layers[l];
    out.emplace_back(p + "attn_gain", &lw.attn_gain);
    out.emplace_back(p + "w_q", &lw.w_q);
    out.emplace_back(p + "w_k", &lw.w_k);
    out.emplace_back(p + "w_v", &lw.w_v);
    out.emplace_back(p + "w_o", &lw.w_o);
    out.emplace_back(p + "mlp_gain", &lw.mlp_gain);
    out.emplace_back(p + "w_in", &lw.w_in);
    out.emplace_back(p + "w_out", &lw.w_out);
  }
  out.emplace_back("final_gain", &final_gain);
  out.emplace_back("unembed", &unembedding);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Weights::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : std::as_const(*this).named_tensors()) out.emplace_back(name, const_cast<Tensor*>(t));
  return out;
}

bool operator==(const Weights& a, const Weights& b) {
  if (!(a.config == b.config)) return false;
  const auto ta = a.named_tensors();
  const auto tb = b.named_tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (!(*ta[i].second == *tb[i].second)) return false;
  }
  return true;
}

std::vector<Var> ParamVars::all() const {
  std::vector<Var> out{token_embedding, position_embedding};
  for (const Layer& l : layers) {
    out.insert(out.end(), {l.attn_gain, l.w_q, l.w_k, l.w_v, l.w_o, l.mlp_gain, l.w_in, l.w_out});
  }
  out.push_back(final_gain);
  out.push_back(unembedding);
  return out;
}

ParamVars bind_params(Tape& tape, const Weights& w, bool requires_grad) {
  ParamVars p;
  p.token_embedding = tape.param(w.token_embedding, requires_grad);
  p.position_embedding = tape.param(w.position_embedding, requires_grad);
  for (const LayerWeights& lw : w.layers) {
    ParamVars::Layer l;
    l.attn_gain = tape.param(lw.attn_gain, requires_grad);
    l.w_q = tape.param(lw.w_q, requires_grad);
    l.w_k = tape.param(lw.w_k, requires_grad);
    l.w_v = tape.param(lw.w_v, requires_grad);
    l.w_o = tape.param(lw.w_o, requires_grad);
    l.mlp_gain = tape.param(lw.mlp_gain, requires_grad);
    l.w_in = tape.param(lw.w_in, requires_grad);
    l.w_out = tape.param(lw.w_out, requires_grad);
    p.layers.push_back(l);
  }
  p.final_gain = tape.param(w.final_gain, requires_grad);
  p.unembedding = tape.param(w.unembedding, requires_grad);
  return p;
}

std::vector<std::uint8_t> attention_allowed(std::span<const int> tokens, AttentionMode mode, int pad_id) {
  const int T = static_cast<int>(tokens.size());
  std::vector<std::uint8_t> allowed(static_cast<std::size_t>(T) * T, 0);
  for (int i = 0; i < T; ++i) {
    for (int j = 0; j < T; ++j) {
      const bool visible = mode == AttentionMode::kFull || j <= i;
      const bool not_pad = tokens[static_cast<std::size_t>(j)] != pad_id || j == i;
      allowed[static_cast<std::size_t>(i * T + j)] = visible && not_pad ? 1 : 0;
    }
  }
  return allowed;
}

void check_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw LengthError("empty token sequence");
  if (static_cast<int>(tokens.size()) > config.max_positions) {
    throw LengthError("sequence length " + std::to_string(tokens.size()) + " exceeds max_positions " +
                      std::to_string(config.max_positions));
  }
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab_size) {
      throw IndexError("token id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(config.vocab_size));
    }
  }
}

TapedForward run_components(Tape& tape, const ParamVars& p, const Weights& w, std::span<const int> tokens,
                            AttentionMode mode, const RunOptions& options) {
  const ModelConfig& cfg = w.config;
  check_tokens(cfg, tokens);
  const int T = static_cast<int>(tokens.size());
  const int H = cfg.n_heads;
  const int dh = cfg.d_head;
  static const Interventions kNone;
  const Interventions& iv = options.interventions ? *options.interventions : kNone;
  validate_interventions(cfg, iv, T);

  TapedForward out;
  std::vector<int> positions(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) positions[static_cast<std::size_t>(i)] = i;
  if (iv.input_activation) {
    out.input = tape.input(*iv.input_activation, options.input_requires_grad);
  } else {
    out.input = add(gather_rows(p.token_embedding, tokens), gather_rows(p.position_embedding, positions));
  }

  // writers[node] is the node's residual write; only upstream entries are read.
  std::vector<Var> writers(static_cast<std::size_t>(logits_index(cfg)) + 1);
  writers[0] = out.input;
  Var running = out.input;

  auto slot_input = [&](int node, Slot slot) -> Var {
    Var x = running;
    bool patched = false;
    for (const auto& entry : iv.edge_sources) {
      if (entry.first.target == node && entry.first.slot == slot) {
        patched = true;
        break;
      }
    }
    if (patched) {
      // Ordered sum over upstream writers; same fold order as `running`.
      std::vector<Var> terms;
      for (int u = 0; u < node; ++u) {
        if (!writers[static_cast<std::size_t>(u)].valid()) continue;
        auto found = iv.edge_sources.find(Edge{u, node, slot});
        terms.push_back(found != iv.edge_sources.end() ? tape.input(found->second)
                                                        : writers[static_cast<std::size_t>(u)]);
      }
      x = add_n(terms);
    } else if (options.expose_slots) {
      const Var t[] = {running};
      x = add_n(t);
    }
    if (!iv.slot_overrides.empty()) {
      std::vector<int> rows;
      std::vector<float> values;
      for (auto it = iv.slot_overrides.lower_bound(SlotPosition{node, slot, 0});
           it != iv.slot_overrides.end() && it->first.node == node && it->first.slot == slot; ++it) {
        rows.push_back(it->first.position);
        values.insert(values.end(), it->second.begin(), it->second.end());
      }
      if (!rows.empty()) {
        x = replace_rows(x, rows, Tensor(Shape{static_cast<int>(rows.size()), cfg.d_model}, std::move(values)));
      }
    }
    if (options.expose_slots) out.slot_inputs[SlotKey{node, slot}] = x;
    return x;
  };

  const Var mask = tape.input(masked_scores(tokens, mode, cfg.pad_id));
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  out.head_out.resize(static_cast<std::size_t>(cfg.n_layers));
  out.attention.resize(static_cast<std::size_t>(cfg.n_layers));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const ParamVars::Layer& lp = p.layers[static_cast<std::size_t>(l)];
    out.resid_pre.push_back(running);
    Var shared_norm;
    auto normed = [&](Var x) {
      if (x.index == running.index) {
        if (!shared_norm.valid()) shared_norm = apply_norm(cfg, running, lp.attn_gain);
        return shared_norm;
      }
      return apply_norm(cfg, x, lp.attn_gain);
    };
    std::vector<Var> heads;
    for (int h = 0; h < H; ++h) {
      const int node = head_index(cfg, l, h);
      const Var xq = normed(slot_input(node, Slot::kQ));
      const Var xk = normed(slot_input(node, Slot::kK));
      const Var xv = normed(slot_input(node, Slot::kV));
      const Var q = matmul(xq, slice_cols(lp.w_q, h * dh, (h + 1) * dh));
      const Var k = matmul(xk, slice_cols(lp.w_k, h * dh, (h + 1) * dh));
      const Var v = matmul(xv, slice_cols(lp.w_v, h * dh, (h + 1) * dh));
      const Var scores = add(scale(matmul(q, k, Transpose::kYes), inv_sqrt), mask);
      const Var pattern = softmax(scores, -1);
      const Var o = matmul(matmul(pattern, v), slice_rows(lp.w_o, h * dh, (h + 1) * dh));
      out.attention[static_cast<std::size_t>(l)].push_back(pattern);
      heads.push_back(o);
    }
    for (int h = 0; h < H; ++h) {
      writers[static_cast<std::size_t>(head_index(cfg, l, h))] = heads[static_cast<std::size_t>(h)];
      running = add(running, heads[static_cast<std::size_t>(h)]);
    }
    out.head_out[static_cast<std::size_t>(l)] = heads;
    out.resid_mid.push_back(running);

    const int mnode = mlp_index(cfg, l);
    const Var xm = slot_input(mnode, Slot::kIn);
    const Var hidden = apply_activation(cfg, matmul(apply_norm(cfg, xm, lp.mlp_gain), lp.w_in));
    const Var m = matmul(hidden, lp.w_out);
    out.mlp_out.push_back(m);
    writers[static_cast<std::size_t>(mnode)] = m;
    running = add(running, m);
    out.resid_post.push_back(running);
  }
  out.final_resid = running;
  const Var xf = slot_input(logits_index(cfg), Slot::kIn);
  out.logits = matmul(apply_norm(cfg, xf, p.final_gain), p.unembedding);
  return out;
}

Var run_batched(const ParamVars& p, const ModelConfig& cfg, std::span<const int> tokens, int seq_len,
                AttentionMode mode) {
  if (seq_len < 1 || tokens.size() % static_cast<std::size_t>(seq_len) != 0) {
    throw DimensionError("batched tokens are not a multiple of the sequence length");
  }
  if (seq_len > cfg.max_positions) {
    throw LengthError("sequence length " + std::to_string(seq_len) + " exceeds max_positions");
  }
  const int batch = static_cast<int>(tokens.size()) / seq_len;
  std::vector<int> positions(tokens.size());
  std::vector<std::vector<std::uint8_t>> masks;
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < seq_len; ++i) positions[static_cast<std::size_t>(b * seq_len + i)] = i;
    masks.push_back(attention_allowed(tokens.subspan(static_cast<std::size_t>(b * seq_len), static_cast<std::size_t>(seq_len)),
                                      mode, cfg.pad_id));
  }
  Var x = add(gather_rows(p.token_embedding, tokens), gather_rows(p.position_embedding, positions));
  for (const ParamVars::Layer& lp : p.layers) {
    const Var xn = apply_norm(cfg, x, lp.attn_gain);
    const Var z = multihead_attention(matmul(xn, lp.w_q), matmul(xn, lp.w_k), matmul(xn, lp.w_v), cfg.n_heads, seq_len,
                                      masks);
    x = add(x, matmul(z, lp.w_o));
    const Var hidden = apply_activation(cfg, matmul(apply_norm(cfg, x, lp.mlp_gain), lp.w_in));
    x = add(x, matmul(hidden, lp.w_out));
  }
  return matmul(apply_norm(cfg, x, p.final_gain), p.unembedding);
}

namespace {

ForwardTrace collect_trace(const TapedForward& f, std::span<const int> tokens, AttentionMode mode) {
  ForwardTrace t;
  t.tokens.assign(tokens.begin(), tokens.end());
  t.mode = mode;
  t.input = f.input.value();
  for (std::size_t l = 0; l < f.head_out.size(); ++l) {
    std::vector<Tensor> outs, pats;
    for (std::size_t h = 0; h < f.head_out[l].size(); ++h) {
      outs.push_back(f.head_out[l][h].value());
      pats.push_back(f.attention[l][h].value());
    }
    t.head_out.push_back(std::move(outs));
    t.attention.push_back(std::move(pats));
    t.mlp_out.push_back(f.mlp_out[l].value());
    t.resid_pre.push_back(f.resid_pre[l].value());
    t.resid_mid.push_back(f.resid_mid[l].value());
    t.resid_post.push_back(f.resid_post[l].value());
  }
  t.final_resid = f.final_resid.value();
  t.logits = f.logits.value();
  return t;
}

}  // namespace

ForwardTrace forward(const Weights& weights, std::span<const int> tokens, AttentionMode mode) {
  Tape tape;
  const ParamVars p = bind_params(tape, weights, false);
  return collect_trace(run_components(tape, p, weights, tokens, mode), tokens, mode);
}

ForwardTrace forward(const Weights& weights, std::span<const int> tokens) {
  return forward(weights, tokens, weights.config.attention_mode);
}

Tensor intervene_forward(const Weights& weights, std::span<const int> tokens, AttentionMode mode,
                         const Interventions& interventions) {
  Tape tape;
  const ParamVars p = bind_params(tape, weights, false);
  RunOptions opts;
  opts.interventions = &interventions;
  return run_components(tape, p, weights, tokens, mode, opts).logits.value();
}

const Tensor& component_output(const ForwardTrace& trace, const CompGraph& graph, int node) {
  const NodeInfo& n = graph.node(node);
  switch (n.kind) {
    case NodeKind::kInput:
      return trace.input;
    case NodeKind::kHead:
      return trace.head_out.at(static_cast<std::size_t>(n.layer)).at(static_cast<std::size_t>(n.head));
    case NodeKind::kMlp:
      return trace.mlp_out.at(static_cast<std::size_t>(n.layer));
    case NodeKind::kLogits:
      break;
  }
  throw GraphError("node " + graph.node_name(node) + " does not write to the residual stream");
}

std::vector<float> component_output(const ForwardTrace& trace, const CompGraph& graph, int node, int position) {
  const NodeInfo& n = graph.node(node);
  if (n.kind != NodeKind::kHead && n.kind != NodeKind::kMlp) {
    throw GraphError("component_output expects an attention head or MLP, got " + graph.node_name(node));
  }
  const Tensor& t = component_output(trace, graph, node);
  if (position < 0 || position >= t.rows()) {
    throw IndexError("position " + std::to_string(position) + " outside trace of length " + std::to_string(t.rows()));
  }
  auto row = t.row(position);
  return {row.begin(), row.end()};
}

int argmax_token(std::span<const float> logits) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.size()); ++i) {
    if (logits[static_cast<std::size_t>(i)] > logits[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

namespace {

Tensor logits_only(const Weights& weights, std::span<const int> tokens, AttentionMode mode) {
  Tape tape;
  const ParamVars p = bind_params(tape, weights, false);
  return run_components(tape, p, weights, tokens, mode).logits.value();
}

}  // namespace

std::vector<int> decode_ar(const Weights& weights, std::span<const int> prompt, int n_new) {
  if (prompt.empty()) throw UsageError("decode_ar needs a nonempty prompt");
  if (n_new < 0) throw ParameterError("n_new must be >= 0");
  if (static_cast<int>(prompt.size()) + n_new > weights.config.max_positions) {
    throw LengthError("prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(n_new) +
                      " new tokens exceeds max_positions " + std::to_string(weights.config.max_positions));
  }
  std::vector<int> tokens(prompt.begin(), prompt.end());
  for (int i = 0; i < n_new; ++i) {
    const Tensor logits = logits_only(weights, tokens, AttentionMode::kCausal);
    tokens.push_back(argmax_token(logits.row(logits.rows() - 1)));
  }
  return tokens;
}

int MaskState::masked_count() const {
  return static_cast<int>(std::count(observed.begin(), observed.end(), std::uint8_t{0}));
}

MdmDecode decode_mdm(const Weights& weights, std::span<const int> prompt, int gen_len, int steps,
                     const std::vector<std::vector<int>>* forced_positions) {
  const ModelConfig& cfg = weights.config;
  if (gen_len < 1) throw ParameterError("gen_len must be >= 1");
  if (steps < 1 || steps > gen_len) {
    throw ParameterError("steps must lie in [1, gen_len]; got " + std::to_string(steps) + " for gen_len " +
                         std::to_string(gen_len));
  }
  if (static_cast<int>(prompt.size()) + gen_len > cfg.max_positions) {
    throw LengthError("prompt plus generation region exceeds max_positions");
  }
  if (forced_positions && static_cast<int>(forced_positions->size()) != steps) {
    throw PairingError("forced unmask schedule has " + std::to_string(forced_positions->size()) +
                       " steps, expected " + std::to_string(steps));
  }
  MdmDecode out;
  std::vector<int> tokens(prompt.begin(), prompt.end());
  std::vector<std::uint8_t> observed(prompt.size(), 1);
  tokens.insert(tokens.end(), static_cast<std::size_t>(gen_len), cfg.mask_id);
  observed.insert(observed.end(), static_cast<std::size_t>(gen_len), 0);

  for (int s = 0; s < steps; ++s) {
    MaskState state{tokens, observed, s, {}};
    const int remaining = state.masked_count();
    const int k = (remaining + (steps - s) - 1) / (steps - s);
    const Tensor logits = logits_only(weights, tokens, AttentionMode::kFull);

    struct Candidate {
      int position;
      int token;
      float confidence;
    };
    std::vector<Candidate> cands;
    for (int pos = 0; pos < static_cast<int>(tokens.size()); ++pos) {
      if (observed[static_cast<std::size_t>(pos)]) continue;
      auto row = logits.row(pos);
      const float mx = *std::max_element(row.begin(), row.end());
      double total = 0.0;
      for (float v : row) total += std::exp(static_cast<double>(v - mx));
      int best = -1;
      for (int t = 0; t < static_cast<int>(row.size()); ++t) {
        if (t == cfg.mask_id || t == cfg.pad_id) continue;
        if (best < 0 || row[static_cast<std::size_t>(t)] > row[static_cast<std::size_t>(best)]) best = t;
      }
      const auto conf = static_cast<float>(std::exp(static_cast<double>(row[static_cast<std::size_t>(best)] - mx)) / total);
      cands.push_back({pos, best, conf});
    }
    std::vector<Candidate> chosen;
    if (forced_positions) {
      for (int pos : (*forced_positions)[static_cast<std::size_t>(s)]) {
        auto it = std::find_if(cands.begin(), cands.end(), [pos](const Candidate& c) { return c.position == pos; });
        if (it == cands.end()) throw PairingError("forced position " + std::to_string(pos) + " is not masked");
        chosen.push_back(*it);
      }
    } else {
      std::stable_sort(cands.begin(), cands.end(),
                       [](const Candidate& a, const Candidate& b) { return a.confidence > b.confidence; });
      chosen.assign(cands.begin(), cands.begin() + std::min<std::ptrdiff_t>(k, static_cast<std::ptrdiff_t>(cands.size())));
      std::sort(chosen.begin(), chosen.end(), [](const Candidate& a, const Candidate& b) { return a.position < b.position; });
    }
    for (const Candidate& c : chosen) {
      tokens[static_cast<std::size_t>(c.position)] = c.token;
      observed[static_cast<std::size_t>(c.position)] = 1;
      state.unmasked.push_back({c.position, c.token, c.confidence});
    }
    out.trajectory.push_back(std::move(state));
  }
  out.tokens = tokens;
  return out;
}

}  // namespace mechshift
