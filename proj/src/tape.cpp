#include "vppo/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vppo/kernels.hpp"

namespace vppo::ad {

namespace {

std::string shape_str(const std::vector<int>& s) {
  std::string out = "{";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "}";
}

void require_matrix(const Tensor& t, const char* op_name) {
  if (t.rank() != 2) throw TapeError(std::string(op_name) + ": expected a 2-D tensor, got rank " + std::to_string(t.rank()));
}

}  // namespace

Tape::NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Tape::Node& Tape::node(NodeId id) const {
  check_id(id);
  return nodes_[id];
}

void Tape::check_id(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
    throw TapeError("invalid node id " + std::to_string(id));
}

void Tape::check_finite(const Tensor& t, const char* op_name) const {
  if (!t.all_finite())
    throw TapeError("non-finite intermediate at op index " + std::to_string(nodes_.size()) +
                    " (" + op_name + ")");
}

Tape::NodeId Tape::input(Tensor value) {
  check_finite(value, "input");
  Node n{Op::kInput, -1, -1, {}, {}, 0, 0, std::move(value)};
  NodeId id = push(std::move(n));
  input_ids_.push_back(id);
  return id;
}

Tape::NodeId Tape::constant(Tensor value) {
  // Constants may carry -inf style attention masks as long as they stay
  // finite; we still forbid NaN by checking the extremes explicitly.
  for (double v : value.data())
    if (std::isnan(v)) throw TapeError("NaN in constant at op index " + std::to_string(nodes_.size()));
  return push(Node{Op::kConstant, -1, -1, {}, {}, 0, 0, std::move(value)});
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& ta = node(a).value;
  const Tensor& tb = node(b).value;
  if (!ta.same_shape(tb))
    throw TapeError("add: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  Tensor out = ta;
  kernels::add_inplace(out.mutable_data(), tb.data().data(), static_cast<int>(out.size()));
  check_finite(out, "add");
  return push(Node{Op::kAdd, a, b, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
  const Tensor& ta = node(a).value;
  const Tensor& tb = node(b).value;
  if (!ta.same_shape(tb))
    throw TapeError("sub: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  Tensor out = ta;
  double* o = out.mutable_data();
  auto bd = tb.data();
  for (int64_t i = 0; i < out.size(); ++i) o[i] -= bd[i];
  check_finite(out, "sub");
  return push(Node{Op::kSub, a, b, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& ta = node(a).value;
  const Tensor& tb = node(b).value;
  if (!ta.same_shape(tb))
    throw TapeError("mul: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  Tensor out = ta;
  double* o = out.mutable_data();
  auto bd = tb.data();
  for (int64_t i = 0; i < out.size(); ++i) o[i] *= bd[i];
  check_finite(out, "mul");
  return push(Node{Op::kMul, a, b, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::minimum(NodeId a, NodeId b) {
  const Tensor& ta = node(a).value;
  const Tensor& tb = node(b).value;
  if (!ta.same_shape(tb))
    throw TapeError("minimum: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
  Tensor out = ta;
  double* o = out.mutable_data();
  auto bd = tb.data();
  for (int64_t i = 0; i < out.size(); ++i) o[i] = std::min(o[i], bd[i]);
  check_finite(out, "minimum");
  return push(Node{Op::kMinimum, a, b, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::scale(NodeId a, double c) {
  Tensor out = node(a).value;
  double* o = out.mutable_data();
  for (int64_t i = 0; i < out.size(); ++i) o[i] *= c;
  check_finite(out, "scale");
  return push(Node{Op::kScale, a, -1, {}, {}, c, 0, std::move(out)});
}

Tape::NodeId Tape::clamp(NodeId a, double lo, double hi) {
  if (!(lo <= hi)) throw TapeError("clamp: lo must be <= hi");
  Tensor out = node(a).value;
  double* o = out.mutable_data();
  for (int64_t i = 0; i < out.size(); ++i) o[i] = std::min(std::max(o[i], lo), hi);
  check_finite(out, "clamp");
  return push(Node{Op::kClamp, a, -1, {}, {}, lo, hi, std::move(out)});
}

Tape::NodeId Tape::tanh(NodeId a) {
  Tensor out = node(a).value;
  double* o = out.mutable_data();
  for (int64_t i = 0; i < out.size(); ++i) o[i] = std::tanh(o[i]);
  check_finite(out, "tanh");
  return push(Node{Op::kTanh, a, -1, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::exp(NodeId a) {
  Tensor out = node(a).value;
  double* o = out.mutable_data();
  for (int64_t i = 0; i < out.size(); ++i) o[i] = std::exp(o[i]);
  check_finite(out, "exp");
  return push(Node{Op::kExp, a, -1, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::log(NodeId a) {
  Tensor out = node(a).value;
  double* o = out.mutable_data();
  for (int64_t i = 0; i < out.size(); ++i) o[i] = std::log(o[i]);
  check_finite(out, "log");
  return push(Node{Op::kLog, a, -1, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::bias_add(NodeId mat, NodeId vec) {
  const Tensor& tm = node(mat).value;
  const Tensor& tv = node(vec).value;
  require_matrix(tm, "bias_add");
  if (tv.rank() != 1 || tv.extent(0) != tm.extent(1))
    throw TapeError("bias_add: bias shape " + shape_str(tv.shape()) + " does not match columns of " + shape_str(tm.shape()));
  Tensor out = tm;
  double* o = out.mutable_data();
  auto b = tv.data();
  const int rows = tm.extent(0), cols = tm.extent(1);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) o[static_cast<int64_t>(r) * cols + c] += b[c];
  check_finite(out, "bias_add");
  return push(Node{Op::kBiasAdd, mat, vec, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& ta = node(a).value;
  const Tensor& tb = node(b).value;
  require_matrix(ta, "matmul");
  require_matrix(tb, "matmul");
  if (ta.extent(1) != tb.extent(0))
    throw TapeError("matmul: inner extents mismatch " + shape_str(ta.shape()) + " x " + shape_str(tb.shape()));
  Tensor out = Tensor::zeros({ta.extent(0), tb.extent(1)});
  kernels::matmul(ta.data().data(), tb.data().data(), out.mutable_data(),
                  ta.extent(0), ta.extent(1), tb.extent(1));
  check_finite(out, "matmul");
  return push(Node{Op::kMatMul, a, b, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::transpose(NodeId a) {
  const Tensor& ta = node(a).value;
  require_matrix(ta, "transpose");
  const int rows = ta.extent(0), cols = ta.extent(1);
  Tensor out = Tensor::zeros({cols, rows});
  double* o = out.mutable_data();
  auto d = ta.data();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) o[static_cast<int64_t>(c) * rows + r] = d[static_cast<int64_t>(r) * cols + c];
  return push(Node{Op::kTranspose, a, -1, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::softmax_rows(NodeId a) {
  const Tensor& ta = node(a).value;
  require_matrix(ta, "softmax_rows");
  Tensor out = ta;
  double* o = out.mutable_data();
  const int rows = ta.extent(0), cols = ta.extent(1);
  for (int r = 0; r < rows; ++r) kernels::softmax_row(o + static_cast<int64_t>(r) * cols, cols);
  check_finite(out, "softmax_rows");
  return push(Node{Op::kSoftmaxRows, a, -1, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::log_softmax_rows(NodeId a) {
  const Tensor& ta = node(a).value;
  require_matrix(ta, "log_softmax_rows");
  Tensor out = ta;
  double* o = out.mutable_data();
  const int rows = ta.extent(0), cols = ta.extent(1);
  for (int r = 0; r < rows; ++r) kernels::log_softmax_row(o + static_cast<int64_t>(r) * cols, cols);
  check_finite(out, "log_softmax_rows");
  return push(Node{Op::kLogSoftmaxRows, a, -1, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::rmsnorm_rows(NodeId a) {
  const Tensor& ta = node(a).value;
  require_matrix(ta, "rmsnorm_rows");
  Tensor out = ta;
  double* o = out.mutable_data();
  const int rows = ta.extent(0), cols = ta.extent(1);
  for (int r = 0; r < rows; ++r) kernels::rmsnorm_row(o + static_cast<int64_t>(r) * cols, cols);
  check_finite(out, "rmsnorm_rows");
  return push(Node{Op::kRmsNormRows, a, -1, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::gather_rows(NodeId a, std::vector<int> indices) {
  const Tensor& ta = node(a).value;
  require_matrix(ta, "gather_rows");
  if (indices.empty()) throw TapeError("gather_rows: empty index list");
  const int rows = ta.extent(0), cols = ta.extent(1);
  for (int idx : indices)
    if (idx < 0 || idx >= rows) throw TapeError("gather_rows: index " + std::to_string(idx) + " out of range [0," + std::to_string(rows) + ")");
  Tensor out = Tensor::zeros({static_cast<int>(indices.size()), cols});
  double* o = out.mutable_data();
  auto d = ta.data();
  for (size_t r = 0; r < indices.size(); ++r)
    std::copy_n(d.data() + static_cast<int64_t>(indices[r]) * cols, cols, o + static_cast<int64_t>(r) * cols);
  return push(Node{Op::kGatherRows, a, -1, {}, std::move(indices), 0, 0, std::move(out)});
}

Tape::NodeId Tape::gather_cols(NodeId a, std::vector<int> indices) {
  const Tensor& ta = node(a).value;
  require_matrix(ta, "gather_cols");
  const int rows = ta.extent(0), cols = ta.extent(1);
  if (static_cast<int>(indices.size()) != rows)
    throw TapeError("gather_cols: need one index per row");
  for (int idx : indices)
    if (idx < 0 || idx >= cols) throw TapeError("gather_cols: index " + std::to_string(idx) + " out of range [0," + std::to_string(cols) + ")");
  Tensor out = Tensor::zeros({rows});
  double* o = out.mutable_data();
  auto d = ta.data();
  for (int r = 0; r < rows; ++r) o[r] = d[static_cast<int64_t>(r) * cols + indices[r]];
  return push(Node{Op::kGatherCols, a, -1, {}, std::move(indices), 0, 0, std::move(out)});
}

Tape::NodeId Tape::concat_rows(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw TapeError("concat_rows: no parts");
  int cols = -1, rows = 0;
  for (NodeId p : parts) {
    const Tensor& t = node(p).value;
    require_matrix(t, "concat_rows");
    if (cols < 0) cols = t.extent(1);
    if (t.extent(1) != cols) throw TapeError("concat_rows: column mismatch");
    rows += t.extent(0);
  }
  Tensor out = Tensor::zeros({rows, cols});
  double* o = out.mutable_data();
  int64_t off = 0;
  for (NodeId p : parts) {
    const Tensor& t = node(p).value;
    std::copy_n(t.data().data(), t.size(), o + off);
    off += t.size();
  }
  Node n{Op::kConcatRows, -1, -1, parts, {}, 0, 0, std::move(out)};
  return push(std::move(n));
}

Tape::NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw TapeError("concat_cols: no parts");
  int rows = -1, cols = 0;
  for (NodeId p : parts) {
    const Tensor& t = node(p).value;
    require_matrix(t, "concat_cols");
    if (rows < 0) rows = t.extent(0);
    if (t.extent(0) != rows) throw TapeError("concat_cols: row mismatch");
    cols += t.extent(1);
  }
  Tensor out = Tensor::zeros({rows, cols});
  double* o = out.mutable_data();
  int coff = 0;
  for (NodeId p : parts) {
    const Tensor& t = node(p).value;
    const int pc = t.extent(1);
    auto d = t.data();
    for (int r = 0; r < rows; ++r)
      std::copy_n(d.data() + static_cast<int64_t>(r) * pc, pc, o + static_cast<int64_t>(r) * cols + coff);
    coff += pc;
  }
  Node n{Op::kConcatCols, -1, -1, parts, {}, 0, 0, std::move(out)};
  return push(std::move(n));
}

Tape::NodeId Tape::reduce_sum(NodeId a) {
  const Tensor& ta = node(a).value;
  double s = 0.0;
  for (double v : ta.data()) s += v;
  Tensor out = Tensor::scalar(s);
  check_finite(out, "reduce_sum");
  return push(Node{Op::kReduceSum, a, -1, {}, {}, 0, 0, std::move(out)});
}

Tape::NodeId Tape::reduce_mean(NodeId a) {
  const Tensor& ta = node(a).value;
  double s = 0.0;
  for (double v : ta.data()) s += v;
  Tensor out = Tensor::scalar(s / static_cast<double>(ta.size()));
  check_finite(out, "reduce_mean");
  return push(Node{Op::kReduceMean, a, -1, {}, {}, 0, 0, std::move(out)});
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

namespace {

void accumulate(Tensor& slot, const Tensor& g) {
  if (slot.empty()) {
    slot = g;
    return;
  }
  kernels::add_inplace(slot.mutable_data(), g.data().data(), static_cast<int>(g.size()));
}

}  // namespace

std::vector<Tensor> Tape::backward(NodeId output, const Tensor& seed) {
  if (consumed_) throw TapeError("tape already consumed by a previous backward");
  check_id(output);
  if (!seed.same_shape(node(output).value))
    throw TapeError("backward: seed shape " + shape_str(seed.shape()) +
                    " does not match output shape " + shape_str(node(output).value.shape()));
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size());
  grads[output] = seed;

  for (NodeId id = output; id >= 0; --id) {
    if (grads[id].empty()) continue;
    const Node& n = nodes_[id];
    const Tensor& g = grads[id];
    switch (n.op) {
      case Op::kInput:
      case Op::kConstant:
        break;
      case Op::kAdd:
        accumulate(grads[n.a], g);
        accumulate(grads[n.b], g);
        break;
      case Op::kSub: {
        accumulate(grads[n.a], g);
        Tensor ng = g;
        double* d = ng.mutable_data();
        for (int64_t i = 0; i < ng.size(); ++i) d[i] = -d[i];
        accumulate(grads[n.b], ng);
        break;
      }
      case Op::kMul: {
        Tensor ga = g;
        double* da = ga.mutable_data();
        auto vb = nodes_[n.b].value.data();
        for (int64_t i = 0; i < ga.size(); ++i) da[i] *= vb[i];
        accumulate(grads[n.a], ga);
        Tensor gb = g;
        double* db = gb.mutable_data();
        auto va = nodes_[n.a].value.data();
        for (int64_t i = 0; i < gb.size(); ++i) db[i] *= va[i];
        accumulate(grads[n.b], gb);
        break;
      }
      case Op::kMinimum: {
        // Ties route the gradient to the first argument.
        Tensor ga = g, gb = g;
        double* da = ga.mutable_data();
        double* db = gb.mutable_data();
        auto va = nodes_[n.a].value.data();
        auto vb = nodes_[n.b].value.data();
        for (int64_t i = 0; i < g.size(); ++i) {
          if (va[i] <= vb[i]) db[i] = 0.0;
          else da[i] = 0.0;
        }
        accumulate(grads[n.a], ga);
        accumulate(grads[n.b], gb);
        break;
      }
      case Op::kScale: {
        Tensor ga = g;
        double* d = ga.mutable_data();
        for (int64_t i = 0; i < ga.size(); ++i) d[i] *= n.c0;
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kClamp: {
        Tensor ga = g;
        double* d = ga.mutable_data();
        auto va = nodes_[n.a].value.data();
        for (int64_t i = 0; i < ga.size(); ++i)
          if (va[i] < n.c0 || va[i] > n.c1) d[i] = 0.0;
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kTanh: {
        Tensor ga = g;
        double* d = ga.mutable_data();
        auto y = n.value.data();
        for (int64_t i = 0; i < ga.size(); ++i) d[i] *= 1.0 - y[i] * y[i];
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kExp: {
        Tensor ga = g;
        double* d = ga.mutable_data();
        auto y = n.value.data();
        for (int64_t i = 0; i < ga.size(); ++i) d[i] *= y[i];
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kLog: {
        Tensor ga = g;
        double* d = ga.mutable_data();
        auto x = nodes_[n.a].value.data();
        for (int64_t i = 0; i < ga.size(); ++i) d[i] /= x[i];
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kBiasAdd: {
        accumulate(grads[n.a], g);
        const int rows = n.value.extent(0), cols = n.value.extent(1);
        Tensor gb = Tensor::zeros({cols});
        double* d = gb.mutable_data();
        auto gd = g.data();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) d[c] += gd[static_cast<int64_t>(r) * cols + c];
        accumulate(grads[n.b], gb);
        break;
      }
      case Op::kMatMul: {
        const Tensor& va = nodes_[n.a].value;
        const Tensor& vb = nodes_[n.b].value;
        const int m = va.extent(0), k = va.extent(1), c = vb.extent(1);
        // dA = g * B^T
        Tensor bt = Tensor::zeros({c, k});
        {
          double* d = bt.mutable_data();
          auto bd = vb.data();
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < c; ++j) d[static_cast<int64_t>(j) * k + i] = bd[static_cast<int64_t>(i) * c + j];
        }
        Tensor ga = Tensor::zeros({m, k});
        kernels::matmul(g.data().data(), bt.data().data(), ga.mutable_data(), m, c, k);
        accumulate(grads[n.a], ga);
        // dB = A^T * g
        Tensor at = Tensor::zeros({k, m});
        {
          double* d = at.mutable_data();
          auto ad = va.data();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < k; ++j) d[static_cast<int64_t>(j) * m + i] = ad[static_cast<int64_t>(i) * k + j];
        }
        Tensor gb = Tensor::zeros({k, c});
        kernels::matmul(at.data().data(), g.data().data(), gb.mutable_data(), k, m, c);
        accumulate(grads[n.b], gb);
        break;
      }
      case Op::kTranspose: {
        const int rows = n.value.extent(0), cols = n.value.extent(1);
        Tensor ga = Tensor::zeros({cols, rows});
        double* d = ga.mutable_data();
        auto gd = g.data();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) d[static_cast<int64_t>(c) * rows + r] = gd[static_cast<int64_t>(r) * cols + c];
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kSoftmaxRows: {
        const int rows = n.value.extent(0), cols = n.value.extent(1);
        Tensor ga = Tensor::zeros({rows, cols});
        double* d = ga.mutable_data();
        auto y = n.value.data();
        auto gd = g.data();
        for (int r = 0; r < rows; ++r) {
          const int64_t off = static_cast<int64_t>(r) * cols;
          double dotv = 0.0;
          for (int c = 0; c < cols; ++c) dotv += gd[off + c] * y[off + c];
          for (int c = 0; c < cols; ++c) d[off + c] = y[off + c] * (gd[off + c] - dotv);
        }
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kLogSoftmaxRows: {
        const int rows = n.value.extent(0), cols = n.value.extent(1);
        Tensor ga = Tensor::zeros({rows, cols});
        double* d = ga.mutable_data();
        auto y = n.value.data();  // log-probs
        auto gd = g.data();
        for (int r = 0; r < rows; ++r) {
          const int64_t off = static_cast<int64_t>(r) * cols;
          double gsum = 0.0;
          for (int c = 0; c < cols; ++c) gsum += gd[off + c];
          for (int c = 0; c < cols; ++c) d[off + c] = gd[off + c] - std::exp(y[off + c]) * gsum;
        }
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kRmsNormRows: {
        const Tensor& x = nodes_[n.a].value;
        const int rows = x.extent(0), cols = x.extent(1);
        Tensor ga = Tensor::zeros({rows, cols});
        double* d = ga.mutable_data();
        auto xd = x.data();
        auto gd = g.data();
        for (int r = 0; r < rows; ++r) {
          const int64_t off = static_cast<int64_t>(r) * cols;
          double ms = 0.0, gx = 0.0;
          for (int c = 0; c < cols; ++c) {
            ms += xd[off + c] * xd[off + c];
            gx += gd[off + c] * xd[off + c];
          }
          ms = ms / cols + 1e-8;
          const double inv = 1.0 / std::sqrt(ms);
          const double scale3 = inv * inv * inv / cols;
          for (int c = 0; c < cols; ++c)
            d[off + c] = inv * gd[off + c] - scale3 * xd[off + c] * gx;
        }
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kGatherRows: {
        const Tensor& va = nodes_[n.a].value;
        const int cols = va.extent(1);
        Tensor ga = Tensor::zeros(va.shape());
        double* d = ga.mutable_data();
        auto gd = g.data();
        for (size_t r = 0; r < n.indices.size(); ++r)
          kernels::add_inplace(d + static_cast<int64_t>(n.indices[r]) * cols,
                               gd.data() + static_cast<int64_t>(r) * cols, cols);
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kGatherCols: {
        const Tensor& va = nodes_[n.a].value;
        const int cols = va.extent(1);
        Tensor ga = Tensor::zeros(va.shape());
        double* d = ga.mutable_data();
        auto gd = g.data();
        for (size_t r = 0; r < n.indices.size(); ++r)
          d[static_cast<int64_t>(r) * cols + n.indices[r]] += gd[r];
        accumulate(grads[n.a], ga);
        break;
      }
      case Op::kConcatRows: {
        auto gd = g.data();
        int64_t off = 0;
        for (NodeId p : n.list) {
          const Tensor& vp = nodes_[p].value;
          Tensor gp = Tensor::zeros(vp.shape());
          std::copy_n(gd.data() + off, vp.size(), gp.mutable_data());
          off += vp.size();
          accumulate(grads[p], gp);
        }
        break;
      }
      case Op::kConcatCols: {
        const int rows = n.value.extent(0), cols = n.value.extent(1);
        auto gd = g.data();
        int coff = 0;
        for (NodeId p : n.list) {
          const Tensor& vp = nodes_[p].value;
          const int pc = vp.extent(1);
          Tensor gp = Tensor::zeros(vp.shape());
          double* d = gp.mutable_data();
          for (int r = 0; r < rows; ++r)
            std::copy_n(gd.data() + static_cast<int64_t>(r) * cols + coff, pc,
                        d + static_cast<int64_t>(r) * pc);
          coff += pc;
          accumulate(grads[p], gp);
        }
        break;
      }
      case Op::kReduceSum: {
        const Tensor& va = nodes_[n.a].value;
        accumulate(grads[n.a], Tensor::filled(va.shape(), g[0]));
        break;
      }
      case Op::kReduceMean: {
        const Tensor& va = nodes_[n.a].value;
        accumulate(grads[n.a], Tensor::filled(va.shape(), g[0] / static_cast<double>(va.size())));
        break;
      }
    }
  }

  std::vector<Tensor> out;
  out.reserve(input_ids_.size());
  for (NodeId id : input_ids_) {
    if (grads[id].empty()) grads[id] = Tensor::zeros(nodes_[id].value.shape());
    out.push_back(std::move(grads[id]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// grad_check
// ---------------------------------------------------------------------------

GradCheckResult grad_check(const Program& program, const std::vector<Tensor>& point, double step) {
  if (!(step >= 1e-6 && step <= 1e-3))
    throw TapeError("grad_check: step must lie in [1e-6, 1e-3]");

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Tape::NodeId> ids;
    ids.reserve(xs.size());
    for (const Tensor& x : xs) ids.push_back(tape.input(x));
    Tape::NodeId out = program(tape, ids);
    const Tensor& v = tape.value(out);
    if (v.size() != 1) throw TapeError("grad_check: program output must be a scalar");
    return v[0];
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Tape::NodeId> ids;
    for (const Tensor& x : point) ids.push_back(tape.input(x));
    Tape::NodeId out = program(tape, ids);
    if (tape.value(out).size() != 1) throw TapeError("grad_check: program output must be a scalar");
    analytic = tape.backward(out, Tensor::scalar(1.0));
  }

  // A probe point may leave the program's domain (the op then rejects the
  // non-finite intermediate); that is exactly the ill-conditioned case.
  auto eval_or_nan = [&](const std::vector<Tensor>& xs) {
    try {
      return eval(xs);
    } catch (const TapeError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  GradCheckResult result;
  std::vector<Tensor> probe = point;
  for (size_t t = 0; t < point.size(); ++t) {
    const int64_t n = point[t].size();
    for (int64_t i = 0; i < n; ++i) {
      const double orig = point[t][i];
      probe[t].mutable_data()[i] = orig + step;
      const double fp = eval_or_nan(probe);
      probe[t].mutable_data()[i] = orig - step;
      const double fm = eval_or_nan(probe);
      probe[t].mutable_data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      if (!std::isfinite(numeric)) {
        result.ill_conditioned = true;
        result.max_rel_error = std::numeric_limits<double>::infinity();
        continue;
      }
      const double a = analytic[t][i];
      const double err = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-3);
      result.max_rel_error = std::max(result.max_rel_error, err);
    }
  }
  return result;
}

}  // namespace vppo::ad
