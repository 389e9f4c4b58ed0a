#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mechshift/graph.hpp"
#include "mechshift/model.hpp"

namespace mechshift {

inline constexpr int kLensTopR = 10;
inline constexpr int kNeuronContext = 8;

struct LensRecord {
  std::string component;  // node name, "residual@L", or "final"
  int position = 0;
  std::string step = "ar";
  std::vector<int> top_tokens;    // descending logit, ties to lower id
  std::vector<float> top_logits;
  float max_logit = 0.0f;
  double entropy = 0.0;           // nats
};

/// softmax(W_U . final_norm(h)) logits for each row of h.
Tensor lens_logits(const Weights& weights, const Tensor& h);
/// Un-normed projection h . W_U.
Tensor raw_projection(const Weights& weights, const Tensor& h);
Tensor row_softmax(const Tensor& logits);

/// Activation addressed by a lens component name: a writer node ("input",
/// "a1.h2", "m0"), "residual@L" (stream entering layer L; L = n_layers is the
/// final pre-norm residual) or "final".
const Tensor& lens_activation(const ForwardTrace& trace, const CompGraph& graph, const std::string& component);

LensRecord logit_lens(const Weights& weights, const ForwardTrace& trace, const CompGraph& graph,
                      const std::string& component, int position, int top_r = kLensTopR);

/// One LensRecord per (step, component, position), step-major, where step s
/// is the forward pass on the decoder state entering step s.
std::vector<LensRecord> lens_over_steps(const Weights& weights, const MdmDecode& decode, const CompGraph& graph,
                                        const std::vector<std::string>& components, const std::vector<int>& positions,
                                        int top_r = kLensTopR);

/// A prompt as the analysis sees it: model input and the row read for the
/// answer.
struct LensPrompt {
  std::vector<int> tokens;
  int answer_row = 0;
  AttentionMode attention = AttentionMode::kCausal;
};

struct AlignmentRow {
  std::string task;
  std::string model;
  std::string component;
  double mean_logit = 0.0;         // mean over prompts of the max lens logit
  std::vector<int> top_tokens;     // modal top-1 tokens, most frequent first
  std::string role;                // free text, may be empty
};

/// Rows sorted by mean_logit descending (ties by component order given).
std::vector<AlignmentRow> component_alignment_table(const Weights& weights, const CompGraph& graph,
                                                    const std::vector<LensPrompt>& prompts,
                                                    const std::vector<std::string>& components,
                                                    const std::string& task, const std::string& model,
                                                    int modal_tokens = 3);

/// One residual-stream coordinate after a block, at one position of one
/// prompt. Context holds token ids at position-8..position+8, -1 outside the
/// sequence.
struct NeuronRecord {
  int layer = 0;
  int neuron = 0;
  int prompt = 0;
  int position = 0;
  int token = 0;
  std::array<int, 2 * kNeuronContext + 1> context{};
  float activation = 0.0f;

  friend bool operator==(const NeuronRecord&, const NeuronRecord&) = default;
};

/// Text line: layer neuron prompt position token activation ctx[17], space
/// separated.
std::string format_neuron_record(const NeuronRecord& r);
NeuronRecord parse_neuron_record(std::string_view line);

/// Append-only record store. Records beyond the in-memory budget are spilled
/// to a text file; iteration always follows insertion order.
class NeuronStore {
 public:
  explicit NeuronStore(std::size_t memory_budget = std::size_t{1} << 20, std::filesystem::path spill_path = {});
  NeuronStore(NeuronStore&&) noexcept = default;
  NeuronStore& operator=(NeuronStore&&) noexcept = default;
  ~NeuronStore();

  void add(const NeuronRecord& r);
  std::size_t size() const { return spilled_ + memory_.size(); }
  bool has_spilled() const { return spilled_ > 0; }
  void for_each(const std::function<void(const NeuronRecord&)>& fn) const;

 private:
  void flush();

  std::size_t budget_;
  std::filesystem::path spill_path_;
  bool owns_spill_ = false;
  std::size_t spilled_ = 0;
  std::vector<NeuronRecord> memory_;
};

/// Every (layer, coordinate, position) of the post-block residual for every
/// prompt, in (prompt, layer, position, neuron) order.
NeuronStore record_neuron_activations(const Weights& weights, const std::vector<LensPrompt>& prompts,
                                      std::size_t memory_budget = std::size_t{1} << 20,
                                      const std::filesystem::path& spill_path = {});

/// The k largest-|activation| records of one neuron, descending; ties keep
/// dataset order.
std::vector<NeuronRecord> top_activating_tokens(const NeuronStore& store, int layer, int neuron, int k);

/// Share of the top `fraction` of |activation| records over layers < max_layer
/// whose eliciting token is a number.
double numeric_token_share(const NeuronStore& store, int max_layer, double fraction = 0.01);

/// Mean L1 norm of each component's residual write over prompts and positions.
std::vector<double> component_masses(const Weights& weights, const CompGraph& graph,
                                     const std::vector<LensPrompt>& prompts, const std::vector<int>& components);

struct ExplanationStats {
  int unique_components = 0;  // smallest set covering `coverage` of the mass
  double dispersion = 0.0;    // population variance of masses in that set
};

ExplanationStats explanation_stats(const std::vector<double>& masses, double coverage = 0.95);

}  // namespace mechshift
