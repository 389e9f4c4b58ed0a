#include "mechshift/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "mechshift/errors.hpp"

namespace mechshift {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.ptr(), t.rows(), t.cols()); }
MutMap as_matrix(Tensor& t) { return MutMap(t.ptr(), t.rows(), t.cols()); }

Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* tape = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw UsageError("operation on an invalid Var");
    if (tape && tape != v.tape) throw UsageError("operation mixes Vars from different tapes");
    tape = v.tape;
  }
  return *tape;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got shape " + shape_string(t.shape()));
  }
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace

const Tensor& Var::value() const {
  if (!valid()) throw UsageError("value() of an invalid Var");
  return tape->value(*this);
}

const Tensor& Var::grad() const {
  if (!valid()) throw UsageError("grad() of an invalid Var");
  return tape->grad(*this);
}

Tape::Tape() = default;

Var Tape::input(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(const Tensor& value, bool requires_grad) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::check_owned(Var v) const {
  if (v.tape != this || v.index < 0 || static_cast<std::size_t>(v.index) >= nodes_.size()) {
    throw UsageError("Var was not recorded on this tape");
  }
}

const Tape::Node& Tape::node(Var v) const {
  check_owned(v);
  return nodes_[static_cast<std::size_t>(v.index)];
}

const Tensor& Tape::value(Var v) const { return node(v).value(); }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Var Tape::record(std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
  Node n;
  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  for (const Var& v : inputs) {
    check_owned(v);
    n.inputs.push_back(v.index);
    n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.index)].requires_grad;
    in.push_back(&nodes_[static_cast<std::size_t>(v.index)].value());
  }
  n.owned = forward(in);
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::backward(Var root) {
  check_owned(root);
  if (backward_done_) throw UsageError("backward called twice without reset_gradients()");
  const Node& r = nodes_[static_cast<std::size_t>(root.index)];
  if (r.value().size() != 1) {
    throw UsageError("backward root must be a scalar, got shape " + shape_string(r.value().shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor::zeros(n.value().shape());
  backward_done_ = true;
  if (!r.requires_grad) return;
  nodes_[static_cast<std::size_t>(root.index)].grad.fill(1.0f);

  std::vector<const Tensor*> in;
  std::vector<Tensor*> gin;
  for (int i = root.index; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.backward) continue;
    in.clear();
    gin.clear();
    for (int j : n.inputs) {
      Node& src = nodes_[static_cast<std::size_t>(j)];
      in.push_back(&src.value());
      gin.push_back(src.requires_grad ? &src.grad : nullptr);
    }
    n.backward(in, n.value(), n.grad, gin);
  }
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!backward_done_) throw UsageError("gradients requested before backward()");
  if (n.grad.shape() != n.value().shape()) throw UsageError("Var was recorded after backward()");
  return n.grad;
}

void Tape::reset_gradients() {
  for (Node& n : nodes_) n.grad = Tensor();
  backward_done_ = false;
}

bool Tape::replay_matches() const {
  std::vector<const Tensor*> in;
  for (const Node& n : nodes_) {
    if (!n.forward) continue;
    in.clear();
    for (int j : n.inputs) in.push_back(&nodes_[static_cast<std::size_t>(j)].value());
    if (!(n.forward(in) == n.value())) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Primitive ops

Var matmul(Var a, Var b, Transpose transpose_b) {
  Tape& tape = same_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  const bool tb = transpose_b == Transpose::kYes;
  const int inner_b = tb ? bv.dim(1) : bv.dim(0);
  if (av.dim(1) != inner_b) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()) + (tb ? "^T" : ""));
  }
  return tape.record(
      {a, b},
      [tb](std::span<const Tensor* const> in) {
        const Tensor& x = *in[0];
        const Tensor& y = *in[1];
        Tensor out(Shape{x.dim(0), tb ? y.dim(0) : y.dim(1)});
        if (tb) {
          as_matrix(out).noalias() = as_matrix(x) * as_matrix(y).transpose();
        } else {
          as_matrix(out).noalias() = as_matrix(x) * as_matrix(y);
        }
        return out;
      },
      [tb](std::span<const Tensor* const> in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const auto x = as_matrix(*in[0]);
        const auto y = as_matrix(*in[1]);
        const auto gm = as_matrix(g);
        if (gin[0]) {
          if (tb) {
            as_matrix(*gin[0]).noalias() += gm * y;
          } else {
            as_matrix(*gin[0]).noalias() += gm * y.transpose();
          }
        }
        if (gin[1]) {
          if (tb) {
            as_matrix(*gin[1]).noalias() += gm.transpose() * x;
          } else {
            as_matrix(*gin[1]).noalias() += x.transpose() * gm;
          }
        }
      });
}

Var add(Var a, Var b) {
  const Var terms[] = {a, b};
  return add_n(terms);
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  if (a.value().shape() != b.value().shape()) {
    throw DimensionError("sub shape mismatch " + shape_string(a.value().shape()) + " vs " +
                         shape_string(b.value().shape()));
  }
  return tape.record(
      {a, b},
      [](std::span<const Tensor* const> in) {
        Tensor out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= (*in[1])[i];
        return out;
      },
      [](std::span<const Tensor* const>, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        accumulate(gin[0], g);
        if (gin[1]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
        }
      });
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw UsageError("add_n needs at least one term");
  Tape& tape = same_tape({terms[0]});
  for (const Var& t : terms) {
    same_tape({terms[0], t});
    if (t.value().shape() != terms[0].value().shape()) {
      throw DimensionError("add shape mismatch " + shape_string(terms[0].value().shape()) + " vs " +
                           shape_string(t.value().shape()));
    }
  }
  return tape.record(
      std::vector<Var>(terms.begin(), terms.end()),
      [](std::span<const Tensor* const> in) {
        Tensor out = *in[0];
        for (std::size_t k = 1; k < in.size(); ++k) {
          const Tensor& t = *in[k];
          for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
        }
        return out;
      },
      [](std::span<const Tensor* const>, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        for (Tensor* dst : gin) accumulate(dst, g);
      });
}

Var scale(Var a, float factor) {
  Tape& tape = same_tape({a});
  return tape.record(
      {a},
      [factor](std::span<const Tensor* const> in) {
        Tensor out = *in[0];
        for (float& v : out.data()) v *= factor;
        return out;
      },
      [factor](std::span<const Tensor* const>, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += factor * g[i];
      });
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Var gelu(Var x) {
  Tape& tape = same_tape({x});
  return tape.record(
      {x},
      [](std::span<const Tensor* const> in) {
        Tensor out = *in[0];
        for (float& v : out.data()) {
          const float u = kGeluC * (v + kGeluA * v * v * v);
          v = 0.5f * v * (1.0f + std::tanh(u));
        }
        return out;
      },
      [](std::span<const Tensor* const> in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const Tensor& xv = *in[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          const float v = xv[i];
          const float u = kGeluC * (v + kGeluA * v * v * v);
          const float t = std::tanh(u);
          const float du = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
          const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
          (*gin[0])[i] += d * g[i];
        }
      });
}

Var rmsnorm(Var x, Var gain, float eps) {
  Tape& tape = same_tape({x, gain});
  const int d = x.value().cols();
  if (gain.value().size() != static_cast<std::size_t>(d)) {
    throw DimensionError("rmsnorm gain " + shape_string(gain.value().shape()) + " does not match last dim of " +
                         shape_string(x.value().shape()));
  }
  return tape.record(
      {x, gain},
      [eps](std::span<const Tensor* const> in) {
        const Tensor& xv = *in[0];
        const Tensor& gv = *in[1];
        Tensor out(xv.shape());
        const int cols = xv.cols();
        for (int r = 0; r < xv.rows(); ++r) {
          auto xr = xv.row(r);
          double ss = 0.0;
          for (float v : xr) ss += static_cast<double>(v) * v;
          const float inv = 1.0f / std::sqrt(static_cast<float>(ss / cols) + eps);
          auto orow = out.row(r);
          for (int c = 0; c < cols; ++c) orow[c] = xr[c] * inv * gv[c];
        }
        return out;
      },
      [eps](std::span<const Tensor* const> in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& xv = *in[0];
        const Tensor& gv = *in[1];
        const int cols = xv.cols();
        for (int r = 0; r < xv.rows(); ++r) {
          auto xr = xv.row(r);
          auto gr = g.row(r);
          double ss = 0.0;
          for (float v : xr) ss += static_cast<double>(v) * v;
          const float inv = 1.0f / std::sqrt(static_cast<float>(ss / cols) + eps);
          if (gin[1]) {
            for (int c = 0; c < cols; ++c) (*gin[1])[c] += gr[c] * xr[c] * inv;
          }
          if (gin[0]) {
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += static_cast<double>(gr[c]) * gv[c] * xr[c];
            const float k = static_cast<float>(dot / cols) * inv * inv * inv;
            auto dr = gin[0]->row(r);
            for (int c = 0; c < cols; ++c) dr[c] += inv * gv[c] * gr[c] - k * xr[c];
          }
        }
      });
}

Var scale_by_gain(Var x, Var gain) {
  Tape& tape = same_tape({x, gain});
  const int d = x.value().cols();
  if (gain.value().size() != static_cast<std::size_t>(d)) {
    throw DimensionError("gain " + shape_string(gain.value().shape()) + " does not match last dim of " +
                         shape_string(x.value().shape()));
  }
  return tape.record(
      {x, gain},
      [](std::span<const Tensor* const> in) {
        Tensor out = *in[0];
        const Tensor& gv = *in[1];
        for (int r = 0; r < out.rows(); ++r) {
          auto row = out.row(r);
          for (std::size_t c = 0; c < row.size(); ++c) row[c] *= gv[c];
        }
        return out;
      },
      [](std::span<const Tensor* const> in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& xv = *in[0];
        const Tensor& gv = *in[1];
        for (int r = 0; r < xv.rows(); ++r) {
          auto xr = xv.row(r);
          auto gr = g.row(r);
          for (std::size_t c = 0; c < xr.size(); ++c) {
            if (gin[0]) gin[0]->row(r)[c] += gr[c] * gv[c];
            if (gin[1]) (*gin[1])[c] += gr[c] * xr[c];
          }
        }
      });
}

namespace {

struct AxisLayout {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisLayout axis_layout(const Shape& shape, int axis) {
  AxisLayout l;
  for (int i = 0; i < axis; ++i) l.outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
  l.n = static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
    l.inner *= static_cast<std::size_t>(shape[i]);
  }
  return l;
}

}  // namespace

Var softmax(Var x, int axis) {
  Tape& tape = same_tape({x});
  const int rank = x.value().rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("softmax axis out of range for shape " + shape_string(x.value().shape()));
  }
  const AxisLayout lay = axis_layout(x.value().shape(), axis);
  return tape.record(
      {x},
      [lay](std::span<const Tensor* const> in) {
        const Tensor& xv = *in[0];
        Tensor out(xv.shape());
        for (std::size_t o = 0; o < lay.outer; ++o) {
          for (std::size_t i = 0; i < lay.inner; ++i) {
            const std::size_t base = o * lay.n * lay.inner + i;
            float mx = -std::numeric_limits<float>::infinity();
            for (std::size_t j = 0; j < lay.n; ++j) mx = std::max(mx, xv[base + j * lay.inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < lay.n; ++j) {
              const float e = std::exp(xv[base + j * lay.inner] - mx);
              out[base + j * lay.inner] = e;
              total += e;
            }
            const float inv = static_cast<float>(1.0 / total);
            for (std::size_t j = 0; j < lay.n; ++j) out[base + j * lay.inner] *= inv;
          }
        }
        return out;
      },
      [lay](std::span<const Tensor* const>, const Tensor& p, const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        for (std::size_t o = 0; o < lay.outer; ++o) {
          for (std::size_t i = 0; i < lay.inner; ++i) {
            const std::size_t base = o * lay.n * lay.inner + i;
            double dot = 0.0;
            for (std::size_t j = 0; j < lay.n; ++j) {
              const std::size_t idx = base + j * lay.inner;
              dot += static_cast<double>(p[idx]) * g[idx];
            }
            const float d = static_cast<float>(dot);
            for (std::size_t j = 0; j < lay.n; ++j) {
              const std::size_t idx = base + j * lay.inner;
              (*gin[0])[idx] += p[idx] * (g[idx] - d);
            }
          }
        }
      });
}

Var gather_rows(Var table, std::span<const int> ids) {
  Tape& tape = same_tape({table});
  const Tensor& tv = table.value();
  require_rank2(tv, "gather_rows");
  for (int id : ids) {
    if (id < 0 || id >= tv.dim(0)) {
      throw IndexError("row id " + std::to_string(id) + " out of range for table " + shape_string(tv.shape()));
    }
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return tape.record(
      {table},
      [idx](std::span<const Tensor* const> in) {
        const Tensor& t = *in[0];
        Tensor out(Shape{static_cast<int>(idx.size()), t.cols()});
        for (std::size_t r = 0; r < idx.size(); ++r) {
          auto src = t.row(idx[r]);
          std::copy(src.begin(), src.end(), out.row(static_cast<int>(r)).begin());
        }
        return out;
      },
      [idx](std::span<const Tensor* const>, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        for (std::size_t r = 0; r < idx.size(); ++r) {
          auto src = g.row(static_cast<int>(r));
          auto dst = gin[0]->row(idx[r]);
          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
      });
}

Var slice_rows(Var x, int begin, int end) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_rows");
  if (begin < 0 || end > xv.dim(0) || begin >= end) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         shape_string(xv.shape()));
  }
  return tape.record(
      {x},
      [begin, end](std::span<const Tensor* const> in) {
        const Tensor& t = *in[0];
        const auto c = static_cast<std::size_t>(t.cols());
        std::vector<float> data(t.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                                t.data().begin() + static_cast<std::ptrdiff_t>(end * c));
        return Tensor(Shape{end - begin, t.cols()}, std::move(data));
      },
      [begin](std::span<const Tensor* const>, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const auto c = static_cast<std::size_t>(g.cols());
        float* dst = gin[0]->ptr() + static_cast<std::size_t>(begin) * c;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      });
}

Var slice_cols(Var x, int begin, int end) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_cols");
  if (begin < 0 || end > xv.dim(1) || begin >= end) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         shape_string(xv.shape()));
  }
  return tape.record(
      {x},
      [begin, end](std::span<const Tensor* const> in) {
        const Tensor& t = *in[0];
        Tensor out(Shape{t.dim(0), end - begin});
        for (int r = 0; r < t.dim(0); ++r) {
          auto src = t.row(r);
          std::copy(src.begin() + begin, src.begin() + end, out.row(r).begin());
        }
        return out;
      },
      [begin](std::span<const Tensor* const>, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        for (int r = 0; r < g.dim(0); ++r) {
          auto src = g.row(r);
          auto dst = gin[0]->row(r);
          for (std::size_t c = 0; c < src.size(); ++c) dst[static_cast<std::size_t>(begin) + c] += src[c];
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_rows needs at least one part");
  Tape& tape = same_tape({parts[0]});
  const int cols = parts[0].value().cols();
  int rows = 0;
  for (const Var& p : parts) {
    same_tape({parts[0], p});
    require_rank2(p.value(), "concat_rows");
    if (p.value().cols() != cols) throw DimensionError("concat_rows column mismatch");
    rows += p.value().rows();
  }
  return tape.record(
      std::vector<Var>(parts.begin(), parts.end()),
      [rows, cols](std::span<const Tensor* const> in) {
        Tensor out(Shape{rows, cols});
        std::size_t off = 0;
        for (const Tensor* t : in) {
          std::copy(t->data().begin(), t->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
          off += t->size();
        }
        return out;
      },
      [](std::span<const Tensor* const> in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (gin[k]) {
            for (std::size_t i = 0; i < in[k]->size(); ++i) (*gin[k])[i] += g[off + i];
          }
          off += in[k]->size();
        }
      });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_cols needs at least one part");
  Tape& tape = same_tape({parts[0]});
  const int rows = parts[0].value().rows();
  int cols = 0;
  for (const Var& p : parts) {
    same_tape({parts[0], p});
    require_rank2(p.value(), "concat_cols");
    if (p.value().rows() != rows) throw DimensionError("concat_cols row mismatch");
    cols += p.value().cols();
  }
  return tape.record(
      std::vector<Var>(parts.begin(), parts.end()),
      [rows, cols](std::span<const Tensor* const> in) {
        Tensor out(Shape{rows, cols});
        for (int r = 0; r < rows; ++r) {
          auto dst = out.row(r).begin();
          for (const Tensor* t : in) {
            auto src = t->row(r);
            dst = std::copy(src.begin(), src.end(), dst);
          }
        }
        return out;
      },
      [rows](std::span<const Tensor* const> in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        for (int r = 0; r < rows; ++r) {
          auto src = g.row(r);
          std::size_t off = 0;
          for (std::size_t k = 0; k < in.size(); ++k) {
            const auto c = static_cast<std::size_t>(in[k]->cols());
            if (gin[k]) {
              auto dst = gin[k]->row(r);
              for (std::size_t j = 0; j < c; ++j) dst[j] += src[off + j];
            }
            off += c;
          }
        }
      });
}

Var replace_rows(Var x, std::span<const int> rows, const Tensor& values) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  require_rank2(xv, "replace_rows");
  if (values.rank() != 2 || values.dim(0) != static_cast<int>(rows.size()) || values.dim(1) != xv.dim(1)) {
    throw DimensionError("replace_rows values " + shape_string(values.shape()) + " incompatible with " +
                         shape_string(xv.shape()));
  }
  for (int r : rows) {
    if (r < 0 || r >= xv.dim(0)) throw IndexError("replace_rows row " + std::to_string(r) + " out of range");
  }
  std::vector<int> idx(rows.begin(), rows.end());
  auto vals = std::make_shared<const Tensor>(values);
  return tape.record(
      {x},
      [idx, vals](std::span<const Tensor* const> in) {
        Tensor out = *in[0];
        for (std::size_t k = 0; k < idx.size(); ++k) {
          auto src = vals->row(static_cast<int>(k));
          std::copy(src.begin(), src.end(), out.row(idx[k]).begin());
        }
        return out;
      },
      [idx](std::span<const Tensor* const>, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        std::vector<std::uint8_t> replaced(static_cast<std::size_t>(g.rows()), 0);
        for (int r : idx) replaced[static_cast<std::size_t>(r)] = 1;
        for (int r = 0; r < g.rows(); ++r) {
          if (replaced[static_cast<std::size_t>(r)]) continue;
          auto src = g.row(r);
          auto dst = gin[0]->row(r);
          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
      });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  Tape& tape = same_tape({logits});
  const Tensor& lv = logits.value();
  const int vocab = lv.cols();
  if (static_cast<int>(targets.size()) != lv.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(lv.shape()));
  }
  int counted = 0;
  for (int t : targets) {
    if (t >= vocab) {
      throw IndexError("cross_entropy target " + std::to_string(t) + " >= vocabulary size " + std::to_string(vocab));
    }
    if (t >= 0) ++counted;
  }
  if (counted == 0) throw UsageError("cross_entropy with no counted targets");
  std::vector<int> tg(targets.begin(), targets.end());
  return tape.record(
      {logits},
      [tg, counted](std::span<const Tensor* const> in) {
        const Tensor& l = *in[0];
        double total = 0.0;
        for (int r = 0; r < l.rows(); ++r) {
          if (tg[static_cast<std::size_t>(r)] < 0) continue;
          auto row = l.row(r);
          const float mx = *std::max_element(row.begin(), row.end());
          double s = 0.0;
          for (float v : row) s += std::exp(static_cast<double>(v - mx));
          total += std::log(s) + mx - row[static_cast<std::size_t>(tg[static_cast<std::size_t>(r)])];
        }
        return Tensor::scalar(static_cast<float>(total / counted));
      },
      [tg, counted](std::span<const Tensor* const> in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        const Tensor& l = *in[0];
        const float scale_by = g[0] / static_cast<float>(counted);
        for (int r = 0; r < l.rows(); ++r) {
          const int t = tg[static_cast<std::size_t>(r)];
          if (t < 0) continue;
          auto row = l.row(r);
          const float mx = *std::max_element(row.begin(), row.end());
          double s = 0.0;
          for (float v : row) s += std::exp(static_cast<double>(v - mx));
          auto dst = gin[0]->row(r);
          for (std::size_t c = 0; c < row.size(); ++c) {
            const float p = static_cast<float>(std::exp(static_cast<double>(row[c] - mx)) / s);
            dst[c] += scale_by * (p - (static_cast<int>(c) == t ? 1.0f : 0.0f));
          }
        }
      });
}

Var cross_entropy(Var logits, int target) {
  const Tensor& lv = logits.value();
  if (lv.rows() != 1) throw DimensionError("single-target cross_entropy expects one row of logits");
  const int t[] = {target};
  if (target < 0) throw IndexError("cross_entropy target " + std::to_string(target) + " is negative");
  return cross_entropy(logits, std::span<const int>(t));
}

Var sum(Var x) {
  Tape& tape = same_tape({x});
  return tape.record(
      {x},
      [](std::span<const Tensor* const> in) {
        double s = 0.0;
        for (float v : in[0]->data()) s += v;
        return Tensor::scalar(static_cast<float>(s));
      },
      [](std::span<const Tensor* const>, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (!gin[0]) return;
        for (float& v : gin[0]->data()) v += g[0];
      });
}

Var mean(Var x) {
  const auto n = static_cast<float>(x.value().size());
  return scale(sum(x), 1.0f / n);
}

Var element(Var x, int row, int col) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  if (row < 0 || row >= xv.rows() || col < 0 || col >= xv.cols()) {
    throw IndexError("element (" + std::to_string(row) + "," + std::to_string(col) + ") out of range for " +
                     shape_string(xv.shape()));
  }
  return tape.record(
      {x}, [row, col](std::span<const Tensor* const> in) { return Tensor::scalar(in[0]->at(row, col)); },
      [row, col](std::span<const Tensor* const>, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (gin[0]) gin[0]->at(row, col) += g[0];
      });
}

Var max_element(Var x, int row, std::span<const int> cols) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  if (cols.empty()) throw UsageError("max_element over an empty column set");
  if (row < 0 || row >= xv.rows()) throw IndexError("max_element row out of range");
  for (int c : cols) {
    if (c < 0 || c >= xv.cols()) throw IndexError("max_element column " + std::to_string(c) + " out of range");
  }
  std::vector<int> cs(cols.begin(), cols.end());
  auto argmax = [row, cs](const Tensor& t) {
    int best = cs.front();
    for (int c : cs) {
      if (t.at(row, c) > t.at(row, best)) best = c;
    }
    return best;
  };
  return tape.record(
      {x}, [row, argmax](std::span<const Tensor* const> in) { return Tensor::scalar(in[0]->at(row, argmax(*in[0]))); },
      [row, argmax](std::span<const Tensor* const> in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (gin[0]) gin[0]->at(row, argmax(*in[0])) += g[0];
      });
}

Var multihead_attention(Var q, Var k, Var v, int n_heads, int segment_len,
                        std::span<const std::vector<std::uint8_t>> allowed) {
  Tape& tape = same_tape({q, k, v});
  const Tensor& qv = q.value();
  if (qv.shape() != k.value().shape() || qv.shape() != v.value().shape() || qv.rank() != 2) {
    throw DimensionError("attention q/k/v shapes disagree");
  }
  const int d = qv.dim(1);
  if (n_heads < 1 || d % n_heads != 0) throw DimensionError("attention width not divisible by head count");
  if (segment_len < 1 || qv.dim(0) % segment_len != 0) throw DimensionError("attention rows not a multiple of segment length");
  const int segments = qv.dim(0) / segment_len;
  if (static_cast<int>(allowed.size()) != segments) throw DimensionError("attention mask count mismatch");
  for (const auto& m : allowed) {
    if (m.size() != static_cast<std::size_t>(segment_len) * static_cast<std::size_t>(segment_len)) {
      throw DimensionError("attention mask size mismatch");
    }
  }
  const int dh = d / n_heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  auto masks = std::make_shared<std::vector<std::vector<std::uint8_t>>>(allowed.begin(), allowed.end());
  // Probabilities are cached per record for the backward pass.
  auto probs = std::make_shared<std::vector<float>>();
  const int len = segment_len;
  return tape.record(
      {q, k, v},
      [=](std::span<const Tensor* const> in) {
        const Tensor& Q = *in[0];
        const Tensor& K = *in[1];
        const Tensor& V = *in[2];
        Tensor out(Q.shape());
        probs->assign(static_cast<std::size_t>(segments) * n_heads * len * len, 0.0f);
        std::vector<float> row(static_cast<std::size_t>(len));
        for (int s = 0; s < segments; ++s) {
          const auto& m = (*masks)[static_cast<std::size_t>(s)];
          for (int h = 0; h < n_heads; ++h) {
            float* P = probs->data() + (static_cast<std::size_t>(s) * n_heads + h) * len * len;
            for (int i = 0; i < len; ++i) {
              const float* qi = Q.ptr() + static_cast<std::size_t>(s * len + i) * d + h * dh;
              float mx = -std::numeric_limits<float>::infinity();
              for (int j = 0; j < len; ++j) {
                if (!m[static_cast<std::size_t>(i * len + j)]) continue;
                const float* kj = K.ptr() + static_cast<std::size_t>(s * len + j) * d + h * dh;
                float dot = 0.0f;
                for (int c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                row[static_cast<std::size_t>(j)] = dot * inv_sqrt;
                mx = std::max(mx, row[static_cast<std::size_t>(j)]);
              }
              double total = 0.0;
              for (int j = 0; j < len; ++j) {
                if (!m[static_cast<std::size_t>(i * len + j)]) continue;
                const float e = std::exp(row[static_cast<std::size_t>(j)] - mx);
                P[i * len + j] = e;
                total += e;
              }
              if (total == 0.0) continue;
              const float inv = static_cast<float>(1.0 / total);
              float* oi = out.ptr() + static_cast<std::size_t>(s * len + i) * d + h * dh;
              for (int j = 0; j < len; ++j) {
                float& p = P[i * len + j];
                if (p == 0.0f) continue;
                p *= inv;
                const float* vj = V.ptr() + static_cast<std::size_t>(s * len + j) * d + h * dh;
                for (int c = 0; c < dh; ++c) oi[c] += p * vj[c];
              }
            }
          }
        }
        return out;
      },
      [=](std::span<const Tensor* const> in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& Q = *in[0];
        const Tensor& K = *in[1];
        const Tensor& V = *in[2];
        std::vector<float> dp(static_cast<std::size_t>(len));
        for (int s = 0; s < segments; ++s) {
          for (int h = 0; h < n_heads; ++h) {
            const float* P = probs->data() + (static_cast<std::size_t>(s) * n_heads + h) * len * len;
            for (int i = 0; i < len; ++i) {
              const std::size_t qoff = static_cast<std::size_t>(s * len + i) * d + h * dh;
              const float* gi = g.ptr() + qoff;
              double dsum = 0.0;
              for (int j = 0; j < len; ++j) {
                const float p = P[i * len + j];
                dp[static_cast<std::size_t>(j)] = 0.0f;
                if (p == 0.0f) continue;
                const std::size_t koff = static_cast<std::size_t>(s * len + j) * d + h * dh;
                float dot = 0.0f;
                for (int c = 0; c < dh; ++c) dot += gi[c] * V[koff + c];
                dp[static_cast<std::size_t>(j)] = dot;
                dsum += static_cast<double>(p) * dot;
                if (gin[2]) {
                  float* dv = gin[2]->ptr() + koff;
                  for (int c = 0; c < dh; ++c) dv[c] += p * gi[c];
                }
              }
              for (int j = 0; j < len; ++j) {
                const float p = P[i * len + j];
                if (p == 0.0f) continue;
                const float ds = p * (dp[static_cast<std::size_t>(j)] - static_cast<float>(dsum)) * inv_sqrt;
                const std::size_t koff = static_cast<std::size_t>(s * len + j) * d + h * dh;
                if (gin[0]) {
                  float* dq = gin[0]->ptr() + qoff;
                  for (int c = 0; c < dh; ++c) dq[c] += ds * K[koff + c];
                }
                if (gin[1]) {
                  float* dk = gin[1]->ptr() + koff;
                  for (int c = 0; c < dh; ++c) dk[c] += ds * Q[qoff + c];
                }
              }
            }
          }
        }
      });
}

}  // namespace mechshift
