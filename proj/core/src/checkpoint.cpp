#include "mechshift/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <map>
#include <sstream>

#include "mechshift/errors.hpp"
#include "mechshift/io.hpp"

namespace mechshift {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

constexpr std::string_view kMagic = "mechshift-checkpoint 1";

std::string_view norm_name(NormKind n) { return n == NormKind::kRms ? "rms" : "gain_only"; }
std::string_view activation_name(Activation a) { return a == Activation::kGelu ? "gelu" : "identity"; }

int to_int(std::string_view s, std::string_view what) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FileError("checkpoint: bad integer '" + std::string(s) + "' for " + std::string(what));
  }
  return v;
}

std::size_t to_size(std::string_view s, std::string_view what) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FileError("checkpoint: bad size '" + std::string(s) + "' for " + std::string(what));
  }
  return v;
}

std::map<std::string, std::string, std::less<>> split_fields(std::string_view line) {
  std::map<std::string, std::string, std::less<>> out;
  std::size_t i = 0;
  while (i < line.size()) {
    std::size_t j = line.find(' ', i);
    if (j == std::string_view::npos) j = line.size();
    const std::string_view tok = line.substr(i, j - i);
    const auto eq = tok.find('=');
    if (eq == std::string_view::npos) throw FileError("checkpoint: malformed field '" + std::string(tok) + "'");
    out.emplace(std::string(tok.substr(0, eq)), std::string(tok.substr(eq + 1)));
    i = j + 1;
  }
  return out;
}

Shape parse_shape(std::string_view s) {
  Shape shape;
  std::size_t i = 0;
  while (i <= s.size()) {
    std::size_t j = s.find(',', i);
    if (j == std::string_view::npos) j = s.size();
    shape.push_back(to_int(s.substr(i, j - i), "shape"));
    i = j + 1;
  }
  return shape;
}

}  // namespace

std::string serialize_checkpoint(const Weights& w) {
  const ModelConfig& c = w.config;
  std::ostringstream head;
  head << kMagic << '\n';
  head << "n_layers=" << c.n_layers << '\n'
       << "n_heads=" << c.n_heads << '\n'
       << "d_model=" << c.d_model << '\n'
       << "d_head=" << c.d_head << '\n'
       << "d_mlp=" << c.d_mlp << '\n'
       << "vocab_size=" << c.vocab_size << '\n'
       << "max_positions=" << c.max_positions << '\n'
       << "attention_mode=" << to_string(c.attention_mode) << '\n'
       << "pad_id=" << c.pad_id << '\n'
       << "mask_id=" << c.mask_id << '\n'
       << "norm=" << norm_name(c.norm) << '\n'
       << "activation=" << activation_name(c.activation) << '\n';
  std::string blob;
  for (const auto& [name, t] : w.named_tensors()) {
    std::string shape;
    for (std::size_t i = 0; i < t->shape().size(); ++i) {
      if (i) shape += ',';
      shape += std::to_string(t->shape()[i]);
    }
    const std::size_t bytes = t->size() * sizeof(float);
    head << "tensor=" << name << " shape=" << shape << " offset=" << blob.size() << " bytes=" << bytes << '\n';
    blob.append(reinterpret_cast<const char*>(t->ptr()), bytes);
  }
  head << "end\n";
  return std::move(head).str() + blob;
}

Weights parse_checkpoint(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string_view {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw FileError("checkpoint: truncated manifest");
    std::string_view line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != kMagic) throw FileError("checkpoint: bad magic line");

  std::map<std::string, std::string, std::less<>> cfg;
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
    std::size_t bytes;
  };
  std::vector<Entry> entries;
  for (;;) {
    const std::string_view line = next_line();
    if (line == "end") break;
    if (line.starts_with("tensor=")) {
      auto f = split_fields(line);
      for (const char* key : {"tensor", "shape", "offset", "bytes"}) {
        if (!f.contains(key)) throw FileError("checkpoint: tensor line missing '" + std::string(key) + "'");
      }
      entries.push_back({f["tensor"], parse_shape(f["shape"]), to_size(f["offset"], "offset"),
                         to_size(f["bytes"], "bytes")});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw FileError("checkpoint: malformed line '" + std::string(line) + "'");
    cfg.emplace(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
  }
  auto get = [&](std::string_view key) -> const std::string& {
    auto it = cfg.find(key);
    if (it == cfg.end()) throw FileError("checkpoint: missing config key '" + std::string(key) + "'");
    return it->second;
  };

  ModelConfig c;
  c.n_layers = to_int(get("n_layers"), "n_layers");
  c.n_heads = to_int(get("n_heads"), "n_heads");
  c.d_model = to_int(get("d_model"), "d_model");
  c.d_head = to_int(get("d_head"), "d_head");
  c.d_mlp = to_int(get("d_mlp"), "d_mlp");
  c.vocab_size = to_int(get("vocab_size"), "vocab_size");
  c.max_positions = to_int(get("max_positions"), "max_positions");
  c.pad_id = to_int(get("pad_id"), "pad_id");
  c.mask_id = to_int(get("mask_id"), "mask_id");
  try {
    c.attention_mode = parse_attention_mode(get("attention_mode"));
  } catch (const ParameterError& e) {
    throw FileError(std::string("checkpoint: ") + e.what());
  }
  const std::string& norm = get("norm");
  if (norm != "rms" && norm != "gain_only") throw FileError("checkpoint: unknown norm '" + norm + "'");
  c.norm = norm == "rms" ? NormKind::kRms : NormKind::kGainOnly;
  const std::string& act = get("activation");
  if (act != "gelu" && act != "identity") throw FileError("checkpoint: unknown activation '" + act + "'");
  c.activation = act == "gelu" ? Activation::kGelu : Activation::kIdentity;
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw FileError(std::string("checkpoint: invalid config: ") + e.what());
  }

  Weights w = Weights::zeros(c);
  auto named = w.named_tensors();
  if (named.size() != entries.size()) {
    throw FileError("checkpoint: expected " + std::to_string(named.size()) + " tensors, found " +
                    std::to_string(entries.size()));
  }
  const std::string_view blob = bytes.substr(pos);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Entry& e = entries[i];
    Tensor& t = *named[i].second;
    if (e.name != named[i].first) throw FileError("checkpoint: expected tensor '" + named[i].first + "', found '" + e.name + "'");
    if (e.shape != t.shape()) {
      throw FileError("checkpoint: tensor '" + e.name + "' has shape " + shape_string(e.shape) + ", expected " +
                      shape_string(t.shape()));
    }
    if (e.bytes != t.size() * sizeof(float) || e.offset > blob.size() || e.bytes > blob.size() - e.offset) {
      throw FileError("checkpoint: tensor '" + e.name + "' blob out of bounds");
    }
    std::memcpy(t.ptr(), blob.data() + e.offset, e.bytes);
    if (!t.all_finite()) throw FileError("checkpoint: tensor '" + e.name + "' contains non-finite values");
  }
  return w;
}

void save_checkpoint(const Weights& weights, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(weights));
}

Weights load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileError("checkpoint not found: " + path.string());
  return parse_checkpoint(read_file(path));
}

}  // namespace mechshift
