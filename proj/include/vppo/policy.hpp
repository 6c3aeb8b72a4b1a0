#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vppo/env.hpp"
#include "vppo/tape.hpp"
#include "vppo/tensor.hpp"
#include "vppo/tokens.hpp"

namespace vppo::policy {

class PolicyError : public std::runtime_error {
 public:
  explicit PolicyError(const std::string& what) : std::runtime_error(what) {}
};

struct PolicyConfig {
  int vocab = tokens::kVocabSize;
  int d_model = 32;
  int n_heads = 2;
  int n_blocks = 2;
  int mlp_hidden = 64;
  int grid_n = 4;
  int context_max = 64;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

// Next-token distribution at one step. Probabilities are softmax outputs
// (strictly positive, sum to 1); log-probs come from the stable log-softmax.
struct StepDistribution {
  std::vector<double> probs;
  std::vector<double> log_probs;
};

double dist_entropy(const StepDistribution& dist);  // nats, in [0, log V]

struct AttentionBlock {
  std::vector<ad::Tensor> wq, wk, wv;  // one (d x head_dim) matrix per head
  ad::Tensor wo, bo;                   // d x d, d
  ad::Tensor w1, b1, w2, b2;           // d x mlp, mlp, mlp x d, d
};

// Immutable parameter snapshot. Updates produce a new copy; rollout workers
// read a frozen snapshot.
struct PolicyParams {
  PolicyConfig cfg;
  ad::Tensor tok_embed;   // vocab x d
  ad::Tensor cell_embed;  // cell symbols x d
  ad::Tensor row_pos;     // grid_n x d
  ad::Tensor col_pos;     // grid_n x d
  ad::Tensor txt_pos;     // context_max x d
  std::vector<AttentionBlock> blocks;
  ad::Tensor out_w;  // d x vocab
  ad::Tensor out_b;  // vocab

  // Canonical parameter enumeration order: used for gradients, the optimizer
  // state and the checkpoint format.
  void for_each(const std::function<void(const std::string&, const ad::Tensor&)>& fn) const;
  void for_each_mut(const std::function<void(const std::string&, ad::Tensor&)>& fn);
  int64_t total_size() const;
};

PolicyParams init_policy(const PolicyConfig& config, uint64_t seed);

// --- raw evaluation path (no gradients) -----------------------------------

// Builds the flat context for one prompt and feeds tokens one row at a time,
// caching per-block keys/values so each appended token costs one row of work.
// Produces bit-identical distributions to the tape forward pass: both run on
// the shared kernels with the same accumulation order.
class IncrementalEval {
 public:
  IncrementalEval(const PolicyParams& params, const env::Image& image, std::span<const int> query);

  // Distribution for the next token, read at the current last row.
  StepDistribution dist() const;

  void push_token(int token);

  int rows() const { return rows_; }
  int response_len() const { return response_len_; }

 private:
  void push_row(std::vector<double> x);

  const PolicyParams& params_;
  int rows_ = 0;
  int response_len_ = 0;
  int text_pos_ = 0;
  // Per block: cached K/V rows per head, and the block's output rows are the
  // next block's input; only the final block's last row is kept for logits.
  struct BlockCache {
    std::vector<std::vector<double>> k, v;  // [head] -> rows * head_dim
  };
  std::vector<BlockCache> cache_;
  std::vector<std::pair<int, int>> coord_list_;  // (axis, coordinate) from the query
  std::vector<double> last_row_;                 // final block output at the last pushed row
};

// Convenience wrappers over IncrementalEval.
StepDistribution next_token_dist(const PolicyParams& params, const env::Image& image,
                                 std::span<const int> query, std::span<const int> prefix);

// Log-prob of each realized token under teacher forcing; entry t equals
// log next_token_dist(prefix = tokens[0..t))[tokens[t]].
std::vector<double> sequence_log_prob(const PolicyParams& params, const env::Image& image,
                                      std::span<const int> query, std::span<const int> tokens);

// --- tape (differentiable) path --------------------------------------------

struct ParamNodes {
  std::vector<ad::Tape::NodeId> ids;  // in for_each order
};

ParamNodes add_params_as_inputs(ad::Tape& tape, const PolicyParams& params);

struct ResponseForward {
  ad::Tape::NodeId token_log_probs;  // {T}: log pi(o_t | ...) at each step
  ad::Tape::NodeId probs_rows;       // {T, V}
  ad::Tape::NodeId logp_rows;        // {T, V}
};

// Teacher-forced causal pass over [image, SEP, query, BOS, response[0..T-2]],
// reading the T response-emitting rows.
ResponseForward build_response_forward(ad::Tape& tape, const ParamNodes& nodes,
                                       const PolicyParams& params, const env::Image& image,
                                       std::span<const int> query, std::span<const int> response);

// Flattens per-parameter gradients (in for_each order) into one vector.
std::vector<double> flatten_grads(const std::vector<ad::Tensor>& grads);

}  // namespace vppo::policy
