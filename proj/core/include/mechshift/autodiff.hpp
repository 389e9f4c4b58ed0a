#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mechshift/tensor.hpp"

namespace mechshift {

class Tape;

/// Handle to a tensor recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int index = -1;

  bool valid() const { return tape != nullptr && index >= 0; }
  const Tensor& value() const;
  const Tensor& grad() const;
};

/// Reverse-mode workspace. A tape owns the values and gradients of every
/// recorded op; it is single-owner and must not be shared across threads.
class Tape {
 public:
  using ForwardFn = std::function<Tensor(std::span<const Tensor* const>)>;
  // grad_inputs[i] is null when input i does not need a gradient.
  using BackwardFn = std::function<void(std::span<const Tensor* const> inputs, const Tensor& output,
                                        const Tensor& grad_output, std::span<Tensor* const> grad_inputs)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that owns its value.
  Var input(Tensor value, bool requires_grad = false);
  /// Leaf that borrows `value`; the tensor must outlive the tape.
  Var param(const Tensor& value, bool requires_grad);

  Var record(std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Accumulates d(root)/d(node) into every gradient-carrying node. The root
  /// must be a single-element tensor recorded on this tape. A second call
  /// without reset_gradients() is a usage error.
  void backward(Var root);
  bool has_gradients() const { return backward_done_; }
  const Tensor& grad(Var v) const;
  void reset_gradients();

  /// Re-executes every recorded op from its inputs and reports whether the
  /// outputs reproduce the recorded values bit-exactly.
  bool replay_matches() const;

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    std::vector<int> inputs;
    ForwardFn forward;
    BackwardFn backward;
    bool requires_grad = false;
    Tensor grad;

    const Tensor& value() const { return borrowed ? *borrowed : owned; }
  };

  const Node& node(Var v) const;
  void check_owned(Var v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  Tensor empty_grad_;
};

enum class Transpose { kNo, kYes };

inline constexpr float kRmsNormEps = 1e-6f;

// Primitive ops. All inputs must live on the same tape.
Var matmul(Var a, Var b, Transpose transpose_b = Transpose::kNo);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Left fold a[0] + a[1] + ... in the given order.
Var add_n(std::span<const Var> terms);
Var scale(Var a, float factor);
Var gelu(Var x);
/// Normalises over the last dimension: x / sqrt(mean(x^2) + eps) * gain.
Var rmsnorm(Var x, Var gain, float eps = kRmsNormEps);
/// Multiplies each row by gain without normalising (linear stand-in for rmsnorm).
Var scale_by_gain(Var x, Var gain);
Var softmax(Var x, int axis = -1);
Var gather_rows(Var table, std::span<const int> ids);
Var slice_rows(Var x, int begin, int end);
Var slice_cols(Var x, int begin, int end);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// Copies x, replacing row r with the matching row of `values` for each listed row.
Var replace_rows(Var x, std::span<const int> rows, const Tensor& values);
/// Mean over rows with target >= 0 of -log softmax(logits[row])[target].
Var cross_entropy(Var logits, std::span<const int> targets);
Var cross_entropy(Var logits, int target);
Var sum(Var x);
Var mean(Var x);
Var element(Var x, int row, int col);
/// max over x[row, c] for c in cols; gradient flows to the first maximiser.
Var max_element(Var x, int row, std::span<const int> cols);

/// Fused scaled-dot-product attention over `segments` equal-length sequences
/// of q/k/v rows. `allowed[s][i*len + j]` gates key j for query i of segment s.
Var multihead_attention(Var q, Var k, Var v, int n_heads, int segment_len,
                        std::span<const std::vector<std::uint8_t>> allowed);

}  // namespace mechshift
