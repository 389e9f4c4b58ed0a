#include "mechshift/interpret.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <atomic>
#include <map>
#include <numeric>

#include "mechshift/errors.hpp"
#include "mechshift/parallel.hpp"
#include "mechshift/tasks.hpp"

namespace mechshift {

Tensor lens_logits(const Weights& weights, const Tensor& h) {
  const ModelConfig& cfg = weights.config;
  if (h.cols() != cfg.d_model) throw DimensionError("lens input width " + std::to_string(h.cols()) + " != d_model");
  Tape tape;
  const Var x = tape.input(h.reshaped({h.rows(), h.cols()}));
  const Var gain = tape.param(weights.final_gain, false);
  const Var normed = cfg.norm == NormKind::kRms ? rmsnorm(x, gain) : scale_by_gain(x, gain);
  return matmul(normed, tape.param(weights.unembedding, false)).value();
}

Tensor raw_projection(const Weights& weights, const Tensor& h) {
  Tape tape;
  const Var x = tape.input(h.reshaped({h.rows(), h.cols()}));
  return matmul(x, tape.param(weights.unembedding, false)).value();
}

Tensor row_softmax(const Tensor& logits) {
  Tape tape;
  return softmax(tape.input(logits)).value();
}

const Tensor& lens_activation(const ForwardTrace& trace, const CompGraph& graph, const std::string& component) {
  if (component == "final") return trace.final_resid;
  constexpr std::string_view kResid = "residual@";
  if (component.starts_with(kResid)) {
    int layer = -1;
    const char* b = component.data() + kResid.size();
    const char* e = component.data() + component.size();
    auto [ptr, ec] = std::from_chars(b, e, layer);
    if (ec != std::errc() || ptr != e || layer < 0 || layer > graph.n_layers()) {
      throw GraphError("invalid lens component '" + component + "'");
    }
    if (layer == graph.n_layers()) return trace.final_resid;
    return trace.resid_pre.at(static_cast<std::size_t>(layer));
  }
  const auto node = graph.parse_node(component);
  if (!node || *node == graph.logits_node()) throw GraphError("invalid lens component '" + component + "'");
  return component_output(trace, graph, *node);
}

namespace {

LensRecord make_record(const Tensor& logits, int row, int top_r) {
  LensRecord r;
  const auto l = logits.row(row);
  const int v = static_cast<int>(l.size());
  std::vector<int> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  const int r_eff = std::min(top_r, v);
  std::partial_sort(order.begin(), order.begin() + r_eff, order.end(), [&](int a, int b) {
    return l[static_cast<std::size_t>(a)] > l[static_cast<std::size_t>(b)] ||
           (l[static_cast<std::size_t>(a)] == l[static_cast<std::size_t>(b)] && a < b);
  });
  for (int i = 0; i < r_eff; ++i) {
    r.top_tokens.push_back(order[static_cast<std::size_t>(i)]);
    r.top_logits.push_back(l[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
  }
  r.max_logit = r.top_logits.front();
  double z = 0.0;
  for (float x : l) z += std::exp(static_cast<double>(x) - r.max_logit);
  double h = 0.0;
  for (float x : l) {
    const double p = std::exp(static_cast<double>(x) - r.max_logit) / z;
    if (p > 0.0) h -= p * std::log(p);
  }
  r.entropy = h;
  return r;
}

}  // namespace

LensRecord logit_lens(const Weights& weights, const ForwardTrace& trace, const CompGraph& graph,
                      const std::string& component, int position, int top_r) {
  if (top_r < 1) throw ParameterError("top_r must be >= 1");
  const Tensor& h = lens_activation(trace, graph, component);
  if (position < 0 || position >= h.rows()) {
    throw IndexError("position " + std::to_string(position) + " outside trace of length " + std::to_string(h.rows()));
  }
  LensRecord r = make_record(lens_logits(weights, h), position, top_r);
  r.component = component;
  r.position = position;
  return r;
}

std::vector<LensRecord> lens_over_steps(const Weights& weights, const MdmDecode& decode, const CompGraph& graph,
                                        const std::vector<std::string>& components, const std::vector<int>& positions,
                                        int top_r) {
  if (decode.trajectory.empty()) throw UsageError("lens_over_steps needs a non-empty trajectory");
  std::vector<LensRecord> out;
  for (const MaskState& state : decode.trajectory) {
    const ForwardTrace trace = forward(weights, state.tokens, AttentionMode::kFull);
    for (const auto& c : components) {
      for (int p : positions) {
        LensRecord r = logit_lens(weights, trace, graph, c, p, top_r);
        r.step = std::to_string(state.step);
        out.push_back(std::move(r));
      }
    }
  }
  return out;
}

std::vector<AlignmentRow> component_alignment_table(const Weights& weights, const CompGraph& graph,
                                                    const std::vector<LensPrompt>& prompts,
                                                    const std::vector<std::string>& components,
                                                    const std::string& task, const std::string& model,
                                                    int modal_tokens) {
  if (prompts.empty()) throw UsageError("alignment table needs at least one prompt");
  std::vector<ForwardTrace> traces(prompts.size());
  parallel_for(static_cast<int>(prompts.size()), [&](int i) {
    const auto& p = prompts[static_cast<std::size_t>(i)];
    traces[static_cast<std::size_t>(i)] = forward(weights, p.tokens, p.attention);
  });
  std::vector<AlignmentRow> rows;
  for (const auto& c : components) {
    double total = 0.0;
    std::map<int, int> counts;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const LensRecord r = logit_lens(weights, traces[i], graph, c, prompts[i].answer_row, 1);
      total += r.max_logit;
      ++counts[r.top_tokens.front()];
    }
    std::vector<std::pair<int, int>> modal(counts.begin(), counts.end());
    std::stable_sort(modal.begin(), modal.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    AlignmentRow row{task, model, c, total / static_cast<double>(prompts.size()), {}, ""};
    for (std::size_t i = 0; i < modal.size() && static_cast<int>(i) < modal_tokens; ++i) {
      row.top_tokens.push_back(modal[i].first);
    }
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const AlignmentRow& a, const AlignmentRow& b) { return a.mean_logit > b.mean_logit; });
  return rows;
}

std::string format_neuron_record(const NeuronRecord& r) {
  std::string out = fmt::format("{} {} {} {} {} {:.9g}", r.layer, r.neuron, r.prompt, r.position, r.token,
                                static_cast<double>(r.activation));
  for (int t : r.context) out += fmt::format(" {}", t);
  return out;
}

NeuronRecord parse_neuron_record(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (start <= line.size()) {
    const std::size_t sp = line.find(' ', start);
    const std::size_t end = sp == std::string_view::npos ? line.size() : sp;
    if (end > start) fields.push_back(line.substr(start, end - start));
    if (sp == std::string_view::npos) break;
    start = sp + 1;
  }
  NeuronRecord r;
  if (fields.size() != 6 + r.context.size()) throw FileError("malformed neuron record: " + std::string(line));
  auto to_int = [&](std::string_view s) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw FileError("malformed neuron record field: " + std::string(s));
    return v;
  };
  r.layer = to_int(fields[0]);
  r.neuron = to_int(fields[1]);
  r.prompt = to_int(fields[2]);
  r.position = to_int(fields[3]);
  r.token = to_int(fields[4]);
  try {
    r.activation = std::stof(std::string(fields[5]));
  } catch (const std::exception&) {
    throw FileError("malformed neuron activation: " + std::string(fields[5]));
  }
  for (std::size_t i = 0; i < r.context.size(); ++i) r.context[i] = to_int(fields[6 + i]);
  return r;
}

NeuronStore::NeuronStore(std::size_t memory_budget, std::filesystem::path spill_path)
    : budget_(std::max<std::size_t>(memory_budget, 1)), spill_path_(std::move(spill_path)) {
  if (spill_path_.empty()) {
    static std::atomic<int> counter{0};
    spill_path_ = std::filesystem::temp_directory_path() /
                  fmt::format("mechshift-neurons-{}-{}.txt", static_cast<const void*>(this), counter++);
    owns_spill_ = true;
  }
}

NeuronStore::~NeuronStore() {
  if (owns_spill_ && spilled_ > 0) {
    std::error_code ec;
    std::filesystem::remove(spill_path_, ec);
  }
}

void NeuronStore::add(const NeuronRecord& r) {
  if (!std::isfinite(r.activation)) throw UsageError("non-finite neuron activation");
  memory_.push_back(r);
  if (memory_.size() >= budget_) flush();
}

void NeuronStore::flush() {
  std::ofstream f(spill_path_, spilled_ == 0 ? std::ios::trunc : std::ios::app);
  if (!f) throw FileError("cannot open neuron spill file " + spill_path_.string());
  for (const auto& r : memory_) f << format_neuron_record(r) << '\n';
  if (!f) throw FileError("cannot write neuron spill file " + spill_path_.string());
  spilled_ += memory_.size();
  memory_.clear();
}

void NeuronStore::for_each(const std::function<void(const NeuronRecord&)>& fn) const {
  if (spilled_ > 0) {
    std::ifstream f(spill_path_);
    if (!f) throw FileError("cannot read neuron spill file " + spill_path_.string());
    std::string line;
    while (std::getline(f, line)) fn(parse_neuron_record(line));
  }
  for (const auto& r : memory_) fn(r);
}

NeuronStore record_neuron_activations(const Weights& weights, const std::vector<LensPrompt>& prompts,
                                      std::size_t memory_budget, const std::filesystem::path& spill_path) {
  if (prompts.empty()) throw UsageError("neuron recording needs at least one prompt");
  std::vector<std::vector<Tensor>> resid(prompts.size());
  parallel_for(static_cast<int>(prompts.size()), [&](int i) {
    const auto& p = prompts[static_cast<std::size_t>(i)];
    resid[static_cast<std::size_t>(i)] = forward(weights, p.tokens, p.attention).resid_post;
  });
  NeuronStore store(memory_budget, spill_path);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& tokens = prompts[i].tokens;
    const int t_len = static_cast<int>(tokens.size());
    for (std::size_t l = 0; l < resid[i].size(); ++l) {
      const Tensor& h = resid[i][l];
      for (int t = 0; t < t_len; ++t) {
        NeuronRecord r;
        r.layer = static_cast<int>(l);
        r.prompt = static_cast<int>(i);
        r.position = t;
        r.token = tokens[static_cast<std::size_t>(t)];
        for (int c = -kNeuronContext; c <= kNeuronContext; ++c) {
          const int p = t + c;
          r.context[static_cast<std::size_t>(c + kNeuronContext)] =
              p >= 0 && p < t_len ? tokens[static_cast<std::size_t>(p)] : -1;
        }
        for (int n = 0; n < h.cols(); ++n) {
          r.neuron = n;
          r.activation = h.at(t, n);
          store.add(r);
        }
      }
    }
  }
  return store;
}

std::vector<NeuronRecord> top_activating_tokens(const NeuronStore& store, int layer, int neuron, int k) {
  if (k < 1) throw ParameterError("k must be >= 1");
  std::vector<NeuronRecord> out;
  store.for_each([&](const NeuronRecord& r) {
    if (r.layer != layer || r.neuron != neuron) return;
    // Insert after every record of equal magnitude so earlier records win ties.
    auto it = std::upper_bound(out.begin(), out.end(), std::abs(r.activation),
                               [](float a, const NeuronRecord& x) { return a > std::abs(x.activation); });
    if (static_cast<int>(out.size()) < k || it != out.end()) {
      out.insert(it, r);
      if (static_cast<int>(out.size()) > k) out.pop_back();
    }
  });
  return out;
}

double numeric_token_share(const NeuronStore& store, int max_layer, double fraction) {
  const Vocabulary& vocab = Vocabulary::standard();
  std::vector<std::pair<float, bool>> acts;
  store.for_each([&](const NeuronRecord& r) {
    if (r.layer < max_layer) acts.emplace_back(std::abs(r.activation), vocab.is_number(r.token));
  });
  if (acts.empty()) return 0.0;
  const std::size_t top =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(acts.size()))));
  std::stable_sort(acts.begin(), acts.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::size_t numeric = 0;
  for (std::size_t i = 0; i < top; ++i) numeric += acts[i].second ? 1 : 0;
  return static_cast<double>(numeric) / static_cast<double>(top);
}

std::vector<double> component_masses(const Weights& weights, const CompGraph& graph,
                                     const std::vector<LensPrompt>& prompts, const std::vector<int>& components) {
  for (int c : components) {
    const NodeKind k = graph.node(c).kind;
    if (k != NodeKind::kHead && k != NodeKind::kMlp) {
      throw GraphError("component mass needs a head or MLP, got " + graph.node_name(c));
    }
  }
  std::vector<std::vector<double>> per(prompts.size());
  parallel_for(static_cast<int>(prompts.size()), [&](int i) {
    const auto& p = prompts[static_cast<std::size_t>(i)];
    const ForwardTrace trace = forward(weights, p.tokens, p.attention);
    auto& out = per[static_cast<std::size_t>(i)];
    for (int c : components) {
      const Tensor& w = component_output(trace, graph, c);
      double s = 0.0;
      for (float x : w.data()) s += std::abs(static_cast<double>(x));
      out.push_back(s / w.rows());
    }
  });
  std::vector<double> masses(components.size(), 0.0);
  for (const auto& p : per)
    for (std::size_t c = 0; c < masses.size(); ++c) masses[c] += p[c];
  if (!prompts.empty()) {
    for (double& m : masses) m /= static_cast<double>(prompts.size());
  }
  return masses;
}

ExplanationStats explanation_stats(const std::vector<double>& masses, double coverage) {
  if (!(coverage > 0.0 && coverage <= 1.0)) throw ParameterError("coverage must be in (0, 1]");
  std::vector<double> sorted;
  for (double m : masses) {
    if (m < 0.0 || !std::isfinite(m)) throw ParameterError("component mass must be finite and nonnegative");
    if (m > 0.0) sorted.push_back(m);
  }
  ExplanationStats st;
  if (sorted.empty()) return st;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  double run = 0.0;
  std::size_t n = 0;
  while (n < sorted.size()) {
    run += sorted[n++];
    if (run >= coverage * total * (1.0 - 1e-12)) break;
  }
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += sorted[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (sorted[i] - mean) * (sorted[i] - mean);
  st.unique_components = static_cast<int>(n);
  st.dispersion = var / static_cast<double>(n);
  return st;
}

}  // namespace mechshift
