#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mechshift/autodiff.hpp"
#include "mechshift/graph.hpp"
#include "mechshift/tensor.hpp"

namespace mechshift {

enum class AttentionMode { kCausal, kFull };

// kGainOnly and kIdentity exist to build globally linear probe models.
enum class NormKind { kRms, kGainOnly };
enum class Activation { kGelu, kIdentity };

std::string_view to_string(AttentionMode mode);
AttentionMode parse_attention_mode(std::string_view s);

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int d_mlp = 256;
  int vocab_size = 0;
  int max_positions = 32;
  AttentionMode attention_mode = AttentionMode::kCausal;
  int pad_id = 0;
  int mask_id = 1;
  NormKind norm = NormKind::kRms;
  Activation activation = Activation::kGelu;

  /// Throws ParameterError on any violated invariant.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Tensor attn_gain;  // [d]
  Tensor w_q;        // [d, heads*d_head]; head h owns columns h*d_head..
  Tensor w_k;
  Tensor w_v;
  Tensor w_o;        // [heads*d_head, d]; head h owns rows h*d_head..
  Tensor mlp_gain;   // [d]
  Tensor w_in;       // [d, d_mlp]
  Tensor w_out;      // [d_mlp, d]
};

struct Weights {
  ModelConfig config;
  Tensor token_embedding;     // [vocab, d]
  Tensor position_embedding;  // [max_positions, d]
  std::vector<LayerWeights> layers;
  Tensor final_gain;          // [d]
  Tensor unembedding;         // [d, vocab]  (W_U)

  static Weights zeros(const ModelConfig& config);
  static Weights random(const ModelConfig& config, std::uint64_t seed);

  /// Named tensors in canonical (checkpoint) order.
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<std::pair<std::string, Tensor*>> named_tensors();

  friend bool operator==(const Weights&, const Weights&);
};

/// Per-component activations of one forward pass over a single sequence.
/// Residual snapshots are the running (unpatched) residual stream.
struct ForwardTrace {
  std::vector<int> tokens;
  AttentionMode mode = AttentionMode::kCausal;
  Tensor input;                                // Input node write: token + position embedding
  std::vector<std::vector<Tensor>> head_out;   // [layer][head] -> [T, d]
  std::vector<std::vector<Tensor>> attention;  // [layer][head] -> [T, T]
  std::vector<Tensor> mlp_out;                 // [layer] -> [T, d]
  std::vector<Tensor> resid_pre;               // read by layer-l heads
  std::vector<Tensor> resid_mid;               // read by MLP l
  std::vector<Tensor> resid_post;              // after MLP l
  Tensor final_resid;                          // pre-norm residual read by Logits
  Tensor logits;                               // [T, vocab]
};

/// Consumer slot input at one position.
struct SlotPosition {
  int node = 0;
  Slot slot = Slot::kIn;
  int position = 0;

  auto operator<=>(const SlotPosition&) const = default;
};

struct Interventions {
  /// Replaces the Input node write (used to interpolate embeddings).
  std::optional<Tensor> input_activation;
  /// For edge u->(v,slot): the value of u's write as seen by that consumer
  /// only. The consumer's slot input is the ordered sum of its upstream
  /// writes with these substitutions.
  std::map<Edge, Tensor> edge_sources;
  /// Overwrites an entire slot input row before the consumer computes.
  std::map<SlotPosition, std::vector<float>> slot_overrides;

  bool empty() const { return !input_activation && edge_sources.empty() && slot_overrides.empty(); }
};

/// Parameter handles on a tape.
struct ParamVars {
  struct Layer {
    Var attn_gain, w_q, w_k, w_v, w_o, mlp_gain, w_in, w_out;
  };
  Var token_embedding, position_embedding;
  std::vector<Layer> layers;
  Var final_gain, unembedding;

  /// Parameter Vars in Weights::named_tensors() order.
  std::vector<Var> all() const;
};

ParamVars bind_params(Tape& tape, const Weights& weights, bool requires_grad);

/// Tape handles for one component-resolved forward pass.
struct TapedForward {
  Var input;
  std::vector<std::vector<Var>> head_out;
  std::vector<std::vector<Var>> attention;
  std::vector<Var> mlp_out;
  std::vector<Var> resid_pre, resid_mid, resid_post;
  Var final_resid;
  Var logits;
  /// Per-consumer slot inputs; only populated when slots are exposed.
  std::map<SlotKey, Var> slot_inputs;
};

struct RunOptions {
  const Interventions* interventions = nullptr;
  /// Give every consumer slot its own tape node so d(metric)/d(slot input)
  /// can be read per slot.
  bool expose_slots = false;
  /// Record the input_activation override as a gradient-carrying leaf.
  bool input_requires_grad = false;
};

/// Component-resolved forward on a tape. `mode` overrides the config's mode.
TapedForward run_components(Tape& tape, const ParamVars& params, const Weights& weights,
                            std::span<const int> tokens, AttentionMode mode, const RunOptions& options = {});

/// Batched training forward over `batch` rows of equal length `seq_len`
/// (tokens row-major). Returns logits of shape [batch*seq_len, vocab].
Var run_batched(const ParamVars& params, const ModelConfig& config, std::span<const int> tokens,
                int seq_len, AttentionMode mode);

/// Allowed[i*T+j] = 1 when query i may attend to key j.
std::vector<std::uint8_t> attention_allowed(std::span<const int> tokens, AttentionMode mode, int pad_id);

void check_tokens(const ModelConfig& config, std::span<const int> tokens);

ForwardTrace forward(const Weights& weights, std::span<const int> tokens, AttentionMode mode);
ForwardTrace forward(const Weights& weights, std::span<const int> tokens);

/// Logits of a forward pass with the given interventions applied.
Tensor intervene_forward(const Weights& weights, std::span<const int> tokens, AttentionMode mode,
                         const Interventions& interventions);

/// Residual-stream write of a head or MLP node at one position.
std::vector<float> component_output(const ForwardTrace& trace, const CompGraph& graph, int node, int position);
/// Whole [T, d] write of any writer node (Input, head or MLP).
const Tensor& component_output(const ForwardTrace& trace, const CompGraph& graph, int node);

/// Greedy argmax, ties to the lowest token id.
int argmax_token(std::span<const float> logits);

std::vector<int> decode_ar(const Weights& weights, std::span<const int> prompt, int n_new);

struct UnmaskEvent {
  int position = 0;
  int token = 0;
  float confidence = 0.0f;
};

/// Decoder state entering one diffusion step.
struct MaskState {
  std::vector<int> tokens;
  std::vector<std::uint8_t> observed;
  int step = 0;
  /// Positions committed during this step.
  std::vector<UnmaskEvent> unmasked;

  int masked_count() const;
};

struct MdmDecode {
  std::vector<int> tokens;
  std::vector<MaskState> trajectory;  // one entry per step
};

/// Confidence-ordered iterative unmasking of `gen_len` MASK slots appended to
/// the prompt. `forced_positions`, when given, fixes which positions each
/// step commits (used to replay a schedule on a paired input).
MdmDecode decode_mdm(const Weights& weights, std::span<const int> prompt, int gen_len, int steps,
                     const std::vector<std::vector<int>>* forced_positions = nullptr);

}  // namespace mechshift
