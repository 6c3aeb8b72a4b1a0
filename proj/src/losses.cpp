#include "vppo/losses.hpp"

#include <algorithm>
#include <cmath>

namespace vppo::losses {

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::kGrpo: return "grpo";
    case Objective::kDapo: return "dapo";
    case Objective::kVppo: return "vppo";
  }
  return "?";
}

const char* averaging_name(AveragingMode m) {
  return m == AveragingMode::kPerTrajectory ? "per_trajectory" : "token_level";
}

void LossConfig::validate() const {
  if (!(eps_low > 0.0 && eps_low <= eps_high && eps_high < 1.0))
    throw LossError("clip ratios must satisfy 0 < eps_low <= eps_high < 1");
  if (entropy_coef < 0.0) throw LossError("entropy_coef must be >= 0");
}

double clipped_term(double ratio, double advantage, double eps_low, double eps_high) {
  if (!(ratio > 0.0)) throw LossError("clipped_term: ratio must be positive");
  const double clipped = std::clamp(ratio, 1.0 - eps_low, 1.0 + eps_high);
  return std::min(ratio * advantage, clipped * advantage);
}

namespace {
using NodeId = ad::Tape::NodeId;
}

TrajectoryObjective trajectory_objective(ad::Tape& tape, const TrajectoryTerms& terms,
                                         const std::vector<double>& old_log_probs,
                                         double advantage, const std::vector<uint8_t>* mask,
                                         const BatchNormalizers& norms, const LossConfig& config) {
  config.validate();
  const int t_len = static_cast<int>(tape.value(terms.new_log_probs).size());
  if (static_cast<int>(old_log_probs.size()) != t_len)
    throw LossError("old log-prob length mismatch");
  if (mask && static_cast<int>(mask->size()) != t_len)
    throw LossError("missing or misaligned gradient mask");
  if (norms.n_trajectories < 1 || norms.total_tokens < 1)
    throw LossError("batch normalizers not set");

  NodeId old_lp = tape.constant(ad::Tensor::from({t_len}, old_log_probs));
  NodeId ratio = tape.exp(tape.sub(terms.new_log_probs, old_lp));
  NodeId adv = tape.constant(ad::Tensor::filled({t_len}, advantage));
  NodeId unclipped = tape.mul(ratio, adv);
  NodeId clipped = tape.mul(tape.clamp(ratio, 1.0 - config.eps_low, 1.0 + config.eps_high), adv);
  NodeId term = tape.minimum(unclipped, clipped);
  if (mask) {
    std::vector<double> m(mask->begin(), mask->end());
    term = tape.mul(term, tape.constant(ad::Tensor::from({t_len}, std::move(m))));
  }

  TrajectoryObjective out;
  {
    auto vals = tape.value(term).data();
    out.per_token_terms.assign(vals.begin(), vals.end());
  }

  NodeId surr = tape.reduce_sum(term);
  if (config.averaging == AveragingMode::kPerTrajectory) {
    surr = tape.scale(surr, 1.0 / static_cast<double>(t_len) / static_cast<double>(norms.n_trajectories));
  } else {
    surr = tape.scale(surr, 1.0 / static_cast<double>(std::max<int64_t>(1, norms.token_denominator)));
  }

  // Sum of p*log p is the negative entropy contribution; averaging over all
  // tokens in the batch and adding with +coef drives entropy down.
  NodeId plogp = tape.reduce_sum(tape.mul(terms.probs_rows, terms.logp_rows));
  NodeId ent_part = tape.scale(plogp, -config.entropy_coef / static_cast<double>(norms.total_tokens));

  out.partial_loss = tape.add(tape.scale(surr, -1.0), ent_part);
  return out;
}

namespace {

LossBuild build_batch(ad::Tape& tape, const std::vector<TrajectoryTerms>& trajectories,
                      const std::vector<std::vector<double>>& old_log_probs,
                      const std::vector<double>& advantages,
                      const std::vector<const std::vector<uint8_t>*>& masks,
                      int64_t token_denominator, const LossConfig& config) {
  const size_t n = trajectories.size();
  if (n == 0) throw LossError("empty batch");
  if (old_log_probs.size() != n || advantages.size() != n)
    throw LossError("batch arrays must have one entry per trajectory");

  BatchNormalizers norms;
  norms.n_trajectories = static_cast<int64_t>(n);
  norms.token_denominator = token_denominator;
  norms.total_tokens = 0;
  for (const TrajectoryTerms& tt : trajectories) norms.total_tokens += tape.value(tt.new_log_probs).size();

  LossBuild build;
  build.per_token_terms.reserve(n);
  NodeId loss = -1;
  double surrogate = 0.0;
  double neg_ent_sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    TrajectoryObjective part =
        trajectory_objective(tape, trajectories[i], old_log_probs[i], advantages[i], masks[i], norms, config);
    loss = (loss < 0) ? part.partial_loss : tape.add(loss, part.partial_loss);
    build.per_token_terms.push_back(std::move(part.per_token_terms));
    // Reporting values, recomputed flat so they do not depend on tape layout.
    double tsum = 0.0;
    for (double v : build.per_token_terms.back()) tsum += v;
    if (config.averaging == AveragingMode::kPerTrajectory)
      surrogate += tsum / static_cast<double>(build.per_token_terms.back().size()) / static_cast<double>(n);
    else
      surrogate += tsum / static_cast<double>(std::max<int64_t>(1, token_denominator));
    auto probs = tape.value(trajectories[i].probs_rows).data();
    auto logps = tape.value(trajectories[i].logp_rows).data();
    for (size_t j = 0; j < probs.size(); ++j) neg_ent_sum += probs[j] * logps[j];
  }

  build.loss = loss;
  build.loss_value = tape.value(loss)[0];
  build.surrogate_value = surrogate;
  build.entropy_value = -neg_ent_sum / static_cast<double>(norms.total_tokens);
  return build;
}

}  // namespace

LossBuild grpo_objective(ad::Tape& tape, const std::vector<TrajectoryTerms>& trajectories,
                         const std::vector<std::vector<double>>& old_log_probs,
                         const std::vector<double>& advantages, const LossConfig& config) {
  int64_t total_tokens = 0;
  for (const TrajectoryTerms& tt : trajectories) total_tokens += tape.value(tt.new_log_probs).size();
  std::vector<const std::vector<uint8_t>*> masks(trajectories.size(), nullptr);
  return build_batch(tape, trajectories, old_log_probs, advantages, masks, total_tokens, config);
}

LossBuild vppo_objective(ad::Tape& tape, const std::vector<TrajectoryTerms>& trajectories,
                         const std::vector<std::vector<double>>& old_log_probs,
                         const signal::ShapedBatch& shaped, const LossConfig& config) {
  if (shaped.per_trajectory.size() != trajectories.size())
    throw LossError("missing masks: shaped signal does not cover the batch");
  std::vector<double> advantages;
  std::vector<const std::vector<uint8_t>*> masks;
  int64_t selected = 0;
  for (const signal::ShapedSignal& s : shaped.per_trajectory) {
    advantages.push_back(s.shaped_advantage);
    masks.push_back(&s.mask);
    for (uint8_t b : s.mask) selected += b;
  }
  return build_batch(tape, trajectories, old_log_probs, advantages, masks, selected, config);
}

bool group_is_degenerate(std::span<const double> rewards) {
  for (size_t i = 1; i < rewards.size(); ++i)
    if (rewards[i] != rewards[0]) return false;
  return true;
}

std::vector<int> dynamic_filter(const std::vector<std::vector<double>>& group_rewards) {
  std::vector<int> retained;
  for (size_t i = 0; i < group_rewards.size(); ++i)
    if (!group_is_degenerate(group_rewards[i])) retained.push_back(static_cast<int>(i));
  return retained;
}

}  // namespace vppo::losses
