#include "mechshift/graph.hpp"

#include <algorithm>
#include <charconv>

#include "mechshift/errors.hpp"
#include "mechshift/model.hpp"

namespace mechshift {

std::string_view slot_name(Slot slot) {
  switch (slot) {
    case Slot::kQ:
      return "q";
    case Slot::kK:
      return "k";
    case Slot::kV:
      return "v";
    case Slot::kIn:
      return "in";
  }
  return "in";
}

std::optional<Slot> parse_slot(std::string_view name) {
  if (name == "q") return Slot::kQ;
  if (name == "k") return Slot::kK;
  if (name == "v") return Slot::kV;
  if (name == "in") return Slot::kIn;
  return std::nullopt;
}

CompGraph::CompGraph(int n_layers, int n_heads) : n_layers_(n_layers), n_heads_(n_heads) {
  if (n_layers < 1 || n_heads < 1) throw ParameterError("graph needs at least one layer and one head");
  nodes_.push_back({NodeKind::kInput, -1, -1});
  for (int l = 0; l < n_layers; ++l) {
    for (int h = 0; h < n_heads; ++h) nodes_.push_back({NodeKind::kHead, l, h});
    nodes_.push_back({NodeKind::kMlp, l, -1});
  }
  nodes_.push_back({NodeKind::kLogits, n_layers, -1});

  for (int target = 0; target < node_count(); ++target) {
    for (int source : upstream_of(target)) {
      for (Slot s : slots_of(target)) edges_.push_back({source, target, s});
    }
  }
  std::sort(edges_.begin(), edges_.end());
}

const NodeInfo& CompGraph::node(int index) const {
  if (index < 0 || index >= node_count()) throw GraphError("node index " + std::to_string(index) + " out of range");
  return nodes_[static_cast<std::size_t>(index)];
}

int CompGraph::head_node(int layer, int head) const {
  if (layer < 0 || layer >= n_layers_ || head < 0 || head >= n_heads_) {
    throw GraphError("no attention head a" + std::to_string(layer) + ".h" + std::to_string(head));
  }
  return 1 + layer * (n_heads_ + 1) + head;
}

int CompGraph::mlp_node(int layer) const {
  if (layer < 0 || layer >= n_layers_) throw GraphError("no MLP m" + std::to_string(layer));
  return 1 + layer * (n_heads_ + 1) + n_heads_;
}

std::vector<Slot> CompGraph::slots_of(int index) const {
  switch (node(index).kind) {
    case NodeKind::kInput:
      return {};
    case NodeKind::kHead:
      return {Slot::kQ, Slot::kK, Slot::kV};
    case NodeKind::kMlp:
    case NodeKind::kLogits:
      return {Slot::kIn};
  }
  return {};
}

std::vector<int> CompGraph::upstream_of(int index) const {
  const NodeInfo& n = node(index);
  std::vector<int> out;
  if (n.kind == NodeKind::kInput) return out;
  out.push_back(input_node());
  for (int l = 0; l < std::min(n.layer, n_layers_); ++l) {
    for (int h = 0; h < n_heads_; ++h) out.push_back(head_node(l, h));
    out.push_back(mlp_node(l));
  }
  if (n.kind == NodeKind::kMlp) {
    for (int h = 0; h < n_heads_; ++h) out.push_back(head_node(n.layer, h));
  }
  return out;
}

int CompGraph::edge_index(const Edge& e) const {
  auto it = std::lower_bound(edges_.begin(), edges_.end(), e);
  if (it == edges_.end() || *it != e) return -1;
  return static_cast<int>(it - edges_.begin());
}

bool CompGraph::has_edge(const Edge& e) const { return edge_index(e) >= 0; }

std::string CompGraph::node_name(int index) const {
  const NodeInfo& n = node(index);
  switch (n.kind) {
    case NodeKind::kInput:
      return "input";
    case NodeKind::kHead:
      return "a" + std::to_string(n.layer) + ".h" + std::to_string(n.head);
    case NodeKind::kMlp:
      return "m" + std::to_string(n.layer);
    case NodeKind::kLogits:
      return "logits";
  }
  return "?";
}

namespace {

std::optional<int> parse_int(std::string_view s) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace

std::optional<int> CompGraph::parse_node(std::string_view name) const {
  if (name == "input") return input_node();
  if (name == "logits") return logits_node();
  if (name.size() > 1 && name[0] == 'm') {
    auto l = parse_int(name.substr(1));
    if (l && *l >= 0 && *l < n_layers_) return mlp_node(*l);
    return std::nullopt;
  }
  if (name.size() > 1 && name[0] == 'a') {
    const auto dot = name.find(".h");
    if (dot == std::string_view::npos) return std::nullopt;
    auto l = parse_int(name.substr(1, dot - 1));
    auto h = parse_int(name.substr(dot + 2));
    if (l && h && *l >= 0 && *l < n_layers_ && *h >= 0 && *h < n_heads_) return head_node(*l, *h);
  }
  return std::nullopt;
}

std::string CompGraph::edge_name(const Edge& e) const {
  std::string out = node_name(e.source) + "->" + node_name(e.target);
  if (e.slot != Slot::kIn) out += "<" + std::string(slot_name(e.slot)) + ">";
  return out;
}

CompGraph build_graph(const ModelConfig& config) {
  config.validate();
  return CompGraph(config.n_layers, config.n_heads);
}

}  // namespace mechshift
