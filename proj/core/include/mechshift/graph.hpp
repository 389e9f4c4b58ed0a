#pragma once

#include <compare>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mechshift {

struct ModelConfig;

enum class NodeKind { kInput, kHead, kMlp, kLogits };

/// Input slot on a consumer node: q/k/v for attention heads, `in` otherwise.
enum class Slot { kQ, kK, kV, kIn };

std::string_view slot_name(Slot slot);
std::optional<Slot> parse_slot(std::string_view name);

struct NodeInfo {
  NodeKind kind = NodeKind::kInput;
  int layer = -1;  // -1 for Input, n_layers for Logits
  int head = -1;   // head index for kHead, else -1
};

/// Directed dependency from a component's residual write to a consumer slot.
/// Node fields are node indices in CompGraph order.
struct Edge {
  int source = 0;
  int target = 0;
  Slot slot = Slot::kIn;

  auto operator<=>(const Edge&) const = default;
};

struct SlotKey {
  int node = 0;
  Slot slot = Slot::kIn;

  auto operator<=>(const SlotKey&) const = default;
};

/// Component-level computational graph of the toy transformer.
///
/// Node order is the residual write order: Input, then per layer the heads
/// followed by the MLP, then Logits. Index order doubles as the deterministic
/// tie-break order (layer, kind, head) used throughout the discovery code.
class CompGraph {
 public:
  CompGraph() = default;
  CompGraph(int n_layers, int n_heads);

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  const std::vector<NodeInfo>& nodes() const { return nodes_; }
  const NodeInfo& node(int index) const;
  const std::vector<Edge>& edges() const { return edges_; }

  int input_node() const { return 0; }
  int logits_node() const { return node_count() - 1; }
  int head_node(int layer, int head) const;
  int mlp_node(int layer) const;

  /// Slots read by a node (empty for Input).
  std::vector<Slot> slots_of(int node) const;
  /// Upstream writers visible to a node, in residual order.
  std::vector<int> upstream_of(int node) const;
  bool has_edge(const Edge& e) const;
  /// Position of e in edges(), or -1.
  int edge_index(const Edge& e) const;

  std::string node_name(int index) const;
  std::optional<int> parse_node(std::string_view name) const;
  /// e.g. "a1.h0->a3.h2<q>", "m0->logits".
  std::string edge_name(const Edge& e) const;

  friend bool operator==(const CompGraph& a, const CompGraph& b) {
    return a.n_layers_ == b.n_layers_ && a.n_heads_ == b.n_heads_;
  }

 private:
  int n_layers_ = 0;
  int n_heads_ = 0;
  std::vector<NodeInfo> nodes_;
  std::vector<Edge> edges_;
};

CompGraph build_graph(const ModelConfig& config);

}  // namespace mechshift
