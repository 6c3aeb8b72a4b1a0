#include "vppo/trainer.hpp"

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "vppo/kernels.hpp"
#include "vppo/losses.hpp"
#include "vppo/parallel.hpp"
#include "vppo/tokens.hpp"

namespace vppo::train {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(splitmix64(a) ^ (b + 0x517cc1b727220a95ULL)); }
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) { return mix_seed(mix_seed(a, b, c), d); }

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

namespace {

int pick_token(const policy::StepDistribution& dist, const SampleSettings& settings,
               std::mt19937_64& rng) {
  const int v = static_cast<int>(dist.probs.size());
  if (settings.greedy) {
    int best = 0;
    for (int i = 1; i < v; ++i)
      if (dist.probs[i] > dist.probs[best]) best = i;
    return best;
  }

  std::vector<double> weights(dist.probs);
  if (settings.temperature != 1.0) {
    for (int i = 0; i < v; ++i) weights[i] = dist.log_probs[i] / settings.temperature;
    kernels::softmax_row(weights.data(), v);
  }

  std::vector<int> order(v);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (weights[a] != weights[b]) return weights[a] > weights[b];
    return a < b;
  });

  double mass = 0.0;
  int cut = v;
  for (int i = 0; i < v; ++i) {
    mass += weights[order[i]];
    if (mass >= settings.top_p) {
      cut = i + 1;
      break;
    }
  }
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * mass;
  for (int i = 0; i < cut; ++i) {
    u -= weights[order[i]];
    if (u <= 0.0) return order[i];
  }
  return order[cut - 1];
}

}  // namespace

Trajectory sample_trajectory(const policy::PolicyParams& params_old, const env::Instance& instance,
                             const SampleSettings& settings, uint64_t seed) {
  std::mt19937_64 rng(seed);
  policy::IncrementalEval eval(params_old, instance.image, instance.query);

  Trajectory traj;
  traj.instance = instance;
  for (int t = 0; t < settings.max_len; ++t) {
    policy::StepDistribution dist = eval.dist();
    const int tok = pick_token(dist, settings, rng);
    traj.tokens.push_back(tok);
    traj.old_log_probs.push_back(dist.log_probs[tok]);
    traj.original_dists.push_back(std::move(dist));
    if (tok == tokens::kEos) break;
    if (t + 1 < settings.max_len) eval.push_token(tok);
  }
  traj.reward = env::verify_answer(traj.tokens, instance);
  return traj;
}

std::vector<Trajectory> rollout_group(const policy::PolicyParams& params_old,
                                      const env::Instance& instance,
                                      const harness::TrainConfig& config, uint64_t group_seed) {
  SampleSettings settings;
  settings.temperature = config.temperature;
  settings.top_p = config.top_p;
  settings.max_len = config.max_response_len;

  std::vector<Trajectory> group;
  group.reserve(config.group_size);
  for (int i = 0; i < config.group_size; ++i)
    group.push_back(sample_trajectory(params_old, instance, settings, mix_seed(group_seed, i)));
  return group;
}

void masked_pass(const policy::PolicyParams& params_old, Trajectory& trajectory,
                 env::PerturbStrategy strategy, uint64_t seed) {
  const env::Image masked = env::perturb_image(trajectory.instance.image, strategy, seed);
  trajectory.perturb_seed = seed;
  trajectory.masked_dists.clear();
  trajectory.masked_dists.reserve(trajectory.tokens.size());

  policy::IncrementalEval eval(params_old, masked, trajectory.instance.query);
  for (size_t t = 0; t < trajectory.tokens.size(); ++t) {
    trajectory.masked_dists.push_back(eval.dist());
    if (t + 1 < trajectory.tokens.size()) eval.push_token(trajectory.tokens[t]);
  }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

AdamState make_adam(const policy::PolicyParams& params) {
  AdamState adam;
  params.for_each([&](const std::string&, const ad::Tensor& t) {
    adam.m.push_back(ad::Tensor::zeros(t.shape()));
    adam.v.push_back(ad::Tensor::zeros(t.shape()));
  });
  return adam;
}

void adam_update(policy::PolicyParams& params, AdamState& adam, const std::vector<ad::Tensor>& grads,
                 double lr) {
  ++adam.t;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(adam.t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(adam.t));
  size_t i = 0;
  params.for_each_mut([&](const std::string&, ad::Tensor& t) {
    const ad::Tensor& g = grads[i];
    double* m = adam.m[i].mutable_data();
    double* v = adam.v[i].mutable_data();
    double* p = t.mutable_data();
    auto gd = g.data();
    for (int64_t j = 0; j < t.size(); ++j) {
      m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * gd[j];
      v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * gd[j] * gd[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p[j] -= lr * mh / (std::sqrt(vh) + kAdamEps);
    }
    ++i;
  });
}

}  // namespace

TrainState init_state(const harness::TrainConfig& config) {
  config.validate();
  TrainState state;
  state.params = policy::init_policy(config.policy(), mix_seed(config.seed, 0x1217));
  state.adam = make_adam(state.params);
  state.step = 0;
  return state;
}

env::Instance draw_instance(const harness::TrainConfig& config, uint64_t seed) {
  // 50% lookup, 5% row-sum, 45% row-max. Row-sum stays in the mix for its
  // multi-digit answers but is downweighted: exact digit arithmetic saturates
  // well below the other tasks at this model size.
  std::mt19937_64 rng(mix_seed(seed, 0x7a5c));
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  env::TaskKind kind = env::TaskKind::kCellLookup;
  if (u >= 0.5 && u < 0.55) kind = env::TaskKind::kRowSum;
  else if (u >= 0.55) kind = env::TaskKind::kRowMax;
  return env::generate_instance(mix_seed(seed, 0x11CE), config.grid_n, kind);
}

// ---------------------------------------------------------------------------
// training step
// ---------------------------------------------------------------------------

StepMetrics train_step(TrainState& state, const harness::TrainConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate();
  const losses::LossConfig loss_cfg = config.loss();
  const bool filter = config.objective != losses::Objective::kGrpo;
  const bool vppo = config.objective == losses::Objective::kVppo;

  StepMetrics metrics;
  metrics.step = state.step;
  metrics.objective = losses::objective_name(config.objective);

  // Phase 1: rollouts under the frozen snapshot, oversampling degenerate
  // groups away when dynamic sampling is on.
  const policy::PolicyParams& params_old = state.params;
  std::vector<std::vector<Trajectory>> groups;
  const int want = config.rollout_batch;
  const int max_attempts = filter ? config.max_attempts_factor * want : want;
  int attempt = 0;
  while (static_cast<int>(groups.size()) < want && attempt < max_attempts) {
    const int chunk = std::min(want - static_cast<int>(groups.size()), max_attempts - attempt);
    std::vector<std::vector<Trajectory>> chunk_groups(chunk);
    parallel_for(chunk, config.threads, [&](int i) {
      const uint64_t inst_seed = mix_seed(config.seed, state.step, 0xA0, attempt + i);
      const env::Instance inst = draw_instance(config, inst_seed);
      chunk_groups[i] = rollout_group(params_old, inst,
                                      config, mix_seed(config.seed, state.step, 0xB0, attempt + i));
    });
    attempt += chunk;
    for (auto& g : chunk_groups) {
      std::vector<double> rewards;
      for (const Trajectory& t : g) rewards.push_back(t.reward);
      if (filter && losses::group_is_degenerate(rewards)) {
        ++metrics.degenerate_groups;
        continue;
      }
      groups.push_back(std::move(g));
    }
  }

  if (groups.empty()) {
    metrics.skipped = true;
    ++state.step;
    metrics.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return metrics;
  }

  std::vector<Trajectory*> flat;
  std::vector<std::vector<double>> group_rewards;
  for (auto& g : groups) {
    group_rewards.emplace_back();
    for (Trajectory& t : g) {
      flat.push_back(&t);
      group_rewards.back().push_back(t.reward);
    }
  }
  const int n_traj = static_cast<int>(flat.size());

  double reward_sum = 0.0;
  int64_t token_total = 0;
  double neg_ent = 0.0;
  for (const Trajectory* t : flat) {
    reward_sum += t->reward;
    token_total += static_cast<int64_t>(t->tokens.size());
    for (const policy::StepDistribution& d : t->original_dists) neg_ent -= policy::dist_entropy(d);
  }
  metrics.mean_reward = reward_sum / n_traj;
  metrics.entropy = -neg_ent / static_cast<double>(token_total);
  if (!filter) {
    for (const auto& rewards : group_rewards)
      if (losses::group_is_degenerate(rewards)) ++metrics.degenerate_groups;
  }

  // Phase 2: dependency scoring against one perturbed image per trajectory.
  if (vppo) {
    parallel_for(n_traj, config.threads, [&](int i) {
      Trajectory& t = *flat[i];
      masked_pass(params_old, t, config.perturb,
                  mix_seed(config.seed, state.step, 0xC0, i));
      t.profile = dep::score_trajectory(t.original_dists, t.masked_dists, t.tokens, config.metric);
    });
  }

  // Phase 3: hierarchical signal modulation.
  std::vector<double> advantages(n_traj);
  std::vector<const std::vector<uint8_t>*> masks(n_traj, nullptr);
  int64_t token_denominator = token_total;
  signal::ShapedBatch shaped;
  if (vppo) {
    std::vector<double> deps;
    std::vector<std::vector<double>> scores;
    for (const Trajectory* t : flat) {
      deps.push_back(t->profile.trajectory_mean);
      scores.push_back(t->profile.token_scores);
    }
    shaped = signal::shape(group_rewards, deps, scores, config.shaping());
    int64_t selected = 0;
    double alpha_sum = 0.0;
    for (int i = 0; i < n_traj; ++i) {
      advantages[i] = shaped.per_trajectory[i].shaped_advantage;
      masks[i] = &shaped.per_trajectory[i].mask;
      for (uint8_t b : shaped.per_trajectory[i].mask) selected += b;
      alpha_sum += shaped.per_trajectory[i].alpha;
    }
    token_denominator = selected;
    metrics.mean_alpha = alpha_sum / n_traj;
    metrics.masked_fraction = static_cast<double>(selected) / static_cast<double>(token_total);
  } else {
    int idx = 0;
    for (const auto& rewards : group_rewards) {
      const signal::GroupAdvantages adv = signal::group_advantages(rewards);
      for (double a : adv.advantages) advantages[idx++] = a;
    }
  }

  // Phase 4: one optimizer update against the frozen rollout snapshot.
  losses::BatchNormalizers norms;
  norms.n_trajectories = n_traj;
  norms.token_denominator = token_denominator;
  norms.total_tokens = token_total;

  std::vector<ad::Tensor> grad_accum;
  state.params.for_each([&](const std::string&, const ad::Tensor& t) {
    grad_accum.push_back(ad::Tensor::zeros(t.shape()));
  });
  double loss_sum = 0.0;
  double max_ratio_dev = 0.0;

  const int chunk_size = 32;
  std::vector<std::vector<ad::Tensor>> chunk_grads(chunk_size);
  std::vector<double> chunk_loss(chunk_size);
  std::vector<double> chunk_ratio_dev(chunk_size);
  for (int base = 0; base < n_traj; base += chunk_size) {
    const int cnt = std::min(chunk_size, n_traj - base);
    parallel_for(cnt, config.threads, [&](int ci) {
      const Trajectory& t = *flat[base + ci];
      ad::Tape tape;
      policy::ParamNodes nodes = policy::add_params_as_inputs(tape, state.params);
      policy::ResponseForward fwd = policy::build_response_forward(
          tape, nodes, state.params, t.instance.image, t.instance.query, t.tokens);
      losses::TrajectoryTerms terms{fwd.token_log_probs, fwd.probs_rows, fwd.logp_rows};
      losses::TrajectoryObjective obj = losses::trajectory_objective(
          tape, terms, t.old_log_probs, advantages[base + ci], masks[base + ci], norms, loss_cfg);
      chunk_loss[ci] = tape.value(obj.partial_loss)[0];
      double dev = 0.0;
      auto new_lp = tape.value(fwd.token_log_probs).data();
      for (size_t j = 0; j < new_lp.size(); ++j)
        dev = std::max(dev, std::abs(std::exp(new_lp[j] - t.old_log_probs[j]) - 1.0));
      chunk_ratio_dev[ci] = dev;
      chunk_grads[ci] = tape.backward(obj.partial_loss, ad::Tensor::scalar(1.0));
    });
    for (int ci = 0; ci < cnt; ++ci) {
      loss_sum += chunk_loss[ci];
      max_ratio_dev = std::max(max_ratio_dev, chunk_ratio_dev[ci]);
      for (size_t g = 0; g < grad_accum.size(); ++g)
        kernels::add_inplace(grad_accum[g].mutable_data(), chunk_grads[ci][g].data().data(),
                             static_cast<int>(grad_accum[g].size()));
    }
  }

  adam_update(state.params, state.adam, grad_accum, config.lr);
  metrics.loss = loss_sum;
  metrics.max_ratio_deviation = max_ratio_dev;
  ++state.step;
  metrics.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return metrics;
}

double evaluate(const policy::PolicyParams& params, const harness::TrainConfig& config, int n,
                uint64_t seed) {
  if (n < 1) throw TrainerError("evaluate: n must be >= 1");
  SampleSettings settings;
  settings.greedy = true;
  settings.max_len = config.max_response_len;
  std::vector<double> rewards(n);
  parallel_for(n, config.threads, [&](int i) {
    const env::Instance inst = draw_instance(config, mix_seed(seed, 0xE7A1, i));
    Trajectory traj = sample_trajectory(params, inst, settings, mix_seed(seed, 0xE7A2, i));
    rewards[i] = traj.reward;
  });
  double sum = 0.0;
  for (double r : rewards) sum += r;
  return sum / n;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[] = "VPPO1\n";

void put_u32(std::string& out, uint32_t v) {
  char b[4];
  b[0] = static_cast<char>(v & 0xff);
  b[1] = static_cast<char>((v >> 8) & 0xff);
  b[2] = static_cast<char>((v >> 16) & 0xff);
  b[3] = static_cast<char>((v >> 24) & 0xff);
  out.append(b, 4);
}

void put_tensor(std::string& out, const std::string& name, const ad::Tensor& t) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<uint32_t>(t.rank()));
  for (int e : t.shape()) put_u32(out, static_cast<uint32_t>(e));
  const size_t bytes = static_cast<size_t>(t.size()) * sizeof(double);
  const size_t off = out.size();
  out.resize(off + bytes);
  std::memcpy(out.data() + off, t.data().data(), bytes);
}

class Reader {
 public:
  Reader(const std::string& buf, size_t pos) : buf_(buf), pos_(pos) {}

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(buf_[pos_ + i]);
    pos_ += 4;
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  ad::Tensor tensor_body() {
    const uint32_t rank = u32();
    if (rank == 0 || rank > 8) throw TrainerError("checkpoint: bad tensor rank");
    std::vector<int> shape;
    for (uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(u32()));
    ad::Tensor t = ad::Tensor::zeros(shape);
    const size_t bytes = static_cast<size_t>(t.size()) * sizeof(double);
    need(bytes);
    std::memcpy(t.mutable_data(), buf_.data() + pos_, bytes);
    pos_ += bytes;
    return t;
  }
  size_t pos() const { return pos_; }

 private:
  void need(size_t n) const {
    if (pos_ + n > buf_.size()) throw TrainerError("checkpoint: truncated file");
  }
  const std::string& buf_;
  size_t pos_;
};

}  // namespace

void save_checkpoint(const TrainState& state, const harness::TrainConfig& config,
                     const std::string& path) {
  std::string out(kMagic, sizeof(kMagic) - 1);
  out += harness::serialize_config(config);
  out += "adam_t=" + std::to_string(state.adam.t) + "\n";
  out += "checkpoint_step=" + std::to_string(state.step) + "\n";
  out += "\n";

  state.params.for_each([&](const std::string& name, const ad::Tensor& t) { put_tensor(out, name, t); });
  size_t i = 0;
  state.params.for_each([&](const std::string& name, const ad::Tensor&) {
    put_tensor(out, "adam_m." + name, state.adam.m[i]);
    put_tensor(out, "adam_v." + name, state.adam.v[i]);
    ++i;
  });

  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
  put_u32(out, crc);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw TrainerError("cannot open checkpoint path '" + path + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw TrainerError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TrainerError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();

  const size_t magic_len = sizeof(kMagic) - 1;
  if (buf.size() < magic_len + 4 || buf.compare(0, magic_len, kMagic) != 0)
    throw TrainerError("checkpoint: wrong magic (version mismatch)");

  // Checksum covers everything before the trailing 4 bytes.
  const uint32_t stored = [&] {
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(buf[buf.size() - 4 + i]);
    return v;
  }();
  const uint32_t actual = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
  if (stored != actual) throw TrainerError("checkpoint: checksum failure");

  const size_t header_end = buf.find("\n\n", magic_len);
  if (header_end == std::string::npos) throw TrainerError("checkpoint: unterminated config block");

  Checkpoint ckpt;
  int64_t adam_t = 0, step = 0;
  {
    std::istringstream lines(buf.substr(magic_len, header_end - magic_len));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      const size_t eq = line.find('=');
      if (eq == std::string::npos) throw TrainerError("checkpoint: malformed config line");
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "adam_t") adam_t = std::stoll(value);
      else if (key == "checkpoint_step") step = std::stoll(value);
      else harness::apply_override(ckpt.config, key, value);
    }
  }

  ckpt.state.params = policy::init_policy(ckpt.config.policy(), 0);
  ckpt.state.adam = make_adam(ckpt.state.params);
  ckpt.state.adam.t = adam_t;
  ckpt.state.step = step;

  Reader r(buf, header_end + 2);
  auto read_named = [&](const std::string& want, ad::Tensor& dst) {
    const uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    if (name != want) throw TrainerError("checkpoint: expected tensor '" + want + "', found '" + name + "'");
    ad::Tensor t = r.tensor_body();
    if (!t.same_shape(dst)) throw TrainerError("checkpoint: shape mismatch for '" + name + "'");
    dst = std::move(t);
  };
  ckpt.state.params.for_each_mut([&](const std::string& name, ad::Tensor& t) { read_named(name, t); });
  size_t i = 0;
  ckpt.state.params.for_each([&](const std::string& name, const ad::Tensor&) {
    read_named("adam_m." + name, ckpt.state.adam.m[i]);
    read_named("adam_v." + name, ckpt.state.adam.v[i]);
    ++i;
  });
  if (r.pos() != buf.size() - 4) throw TrainerError("checkpoint: trailing bytes");
  return ckpt;
}

}  // namespace vppo::train
