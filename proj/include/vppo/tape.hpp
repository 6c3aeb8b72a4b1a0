#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vppo/tensor.hpp"

namespace vppo::ad {

class TapeError : public std::runtime_error {
 public:
  explicit TapeError(const std::string& what) : std::runtime_error(what) {}
};

// Reverse-mode tape over dense tensors. Ops are recorded in topological order
// as they are built; backward replays the record once, newest to oldest, with
// a fixed accumulation order so gradients are deterministic.
//
// A tape is single-owner and consumed by its first backward() call. Tensors
// handed in or out are immutable snapshots.
class Tape {
 public:
  using NodeId = int32_t;

  // Leaves. input() leaves receive gradients from backward(); constants do not.
  NodeId input(Tensor value);
  NodeId constant(Tensor value);

  // Elementwise, same shape.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId minimum(NodeId a, NodeId b);

  NodeId scale(NodeId a, double c);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId tanh(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);

  // mat (r x c) + vec (c), broadcast over rows. The only broadcast we allow.
  NodeId bias_add(NodeId mat, NodeId vec);

  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);

  // Row-wise softmax / log-softmax over the last axis of a 2-D tensor.
  NodeId softmax_rows(NodeId a);
  NodeId log_softmax_rows(NodeId a);

  // Row-wise RMS normalization: row / sqrt(mean(row^2) + 1e-8).
  NodeId rmsnorm_rows(NodeId a);

  // out row r = a[indices[r]]; backward scatter-adds.
  NodeId gather_rows(NodeId a, std::vector<int> indices);
  // out[r] = a[r][indices[r]], shape {rows}.
  NodeId gather_cols(NodeId a, std::vector<int> indices);

  NodeId concat_rows(const std::vector<NodeId>& parts);
  NodeId concat_cols(const std::vector<NodeId>& parts);

  NodeId reduce_sum(NodeId a);   // -> {1}
  NodeId reduce_mean(NodeId a);  // -> {1}

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  bool consumed() const { return consumed_; }

  // Gradients of `output` w.r.t. every input() leaf, in input creation order.
  // Seed must match the output shape. Consumes the tape.
  std::vector<Tensor> backward(NodeId output, const Tensor& seed);

 private:
  enum class Op : uint8_t {
    kInput, kConstant, kAdd, kSub, kMul, kMinimum, kScale, kClamp, kTanh,
    kExp, kLog, kBiasAdd, kMatMul, kTranspose, kSoftmaxRows, kLogSoftmaxRows,
    kRmsNormRows, kGatherRows, kGatherCols, kConcatRows, kConcatCols,
    kReduceSum, kReduceMean,
  };

  struct Node {
    Op op;
    NodeId a = -1;
    NodeId b = -1;
    std::vector<NodeId> list;  // concat inputs
    std::vector<int> indices;  // gather indices
    double c0 = 0.0, c1 = 0.0; // scale factor / clamp bounds
    Tensor value;
  };

  NodeId push(Node node);
  const Node& node(NodeId id) const;
  void check_id(NodeId id) const;
  void check_finite(const Tensor& t, const char* op_name) const;

  std::vector<Node> nodes_;
  std::vector<NodeId> input_ids_;
  bool consumed_ = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  bool ill_conditioned = false;  // a finite-difference estimate was non-finite
};

// A program builds a scalar output node from one tape node per input tensor.
using Program = std::function<Tape::NodeId(Tape&, const std::vector<Tape::NodeId>&)>;

// Compares analytic gradients against central finite differences at `point`.
// Per-coordinate error is |a - n| / max(|a| + |n|, 1e-3): relative above 1e-3
// magnitude, absolute (scaled) below it. step must lie in [1e-6, 1e-3].
GradCheckResult grad_check(const Program& program, const std::vector<Tensor>& point, double step);

}  // namespace vppo::ad
