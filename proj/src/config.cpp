#include "vppo/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace vppo::harness {

policy::PolicyConfig TrainConfig::policy() const {
  policy::PolicyConfig cfg;
  cfg.d_model = d_model;
  cfg.n_heads = n_heads;
  cfg.n_blocks = n_blocks;
  cfg.mlp_hidden = mlp_hidden;
  cfg.grid_n = grid_n;
  cfg.context_max = context_max;
  return cfg;
}

losses::LossConfig TrainConfig::loss() const {
  losses::LossConfig cfg;
  cfg.eps_low = eps_low;
  cfg.eps_high = eps_high;
  cfg.entropy_coef = entropy_coef;
  cfg.averaging = averaging;
  cfg.objective = objective;
  return cfg;
}

signal::ShapingConfig TrainConfig::shaping() const {
  signal::ShapingConfig cfg;
  cfg.k = k;
  cfg.beta_min = beta_min;
  cfg.beta_max_mode = beta_max_mode;
  cfg.beta_max_fixed = beta_max;
  return cfg;
}

namespace {

[[noreturn]] void out_of_range(const std::string& key, const std::string& bound) {
  throw ConfigError("value for '" + key + "' out of range: must be " + bound);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size() || !std::isfinite(v)) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ConfigError("value for '" + key + "' is not a number: '" + value + "'");
  }
}

int64_t parse_int(const std::string& key, const std::string& value) {
  int64_t v = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size())
    throw ConfigError("value for '" + key + "' is not an integer: '" + value + "'");
  return v;
}

struct Entry {
  std::function<void(TrainConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const TrainConfig&)> get;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

const std::map<std::string, Entry>& registry() {
  static const std::map<std::string, Entry> reg = [] {
    std::map<std::string, Entry> r;
    auto add_int = [&](const std::string& key, int TrainConfig::* field, int lo, int hi) {
      r[key] = Entry{
          [field, lo, hi](TrainConfig& c, const std::string& k, const std::string& v) {
            const int64_t x = parse_int(k, v);
            if (x < lo || x > hi)
              out_of_range(k, "an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
            c.*field = static_cast<int>(x);
          },
          [field](const TrainConfig& c) { return std::to_string(c.*field); }};
    };
    auto add_double = [&](const std::string& key, double TrainConfig::* field, double lo, double hi,
                          bool lo_open) {
      r[key] = Entry{
          [field, lo, hi, lo_open](TrainConfig& c, const std::string& k, const std::string& v) {
            const double x = parse_double(k, v);
            const bool ok = lo_open ? (x > lo && x <= hi) : (x >= lo && x <= hi);
            if (!ok)
              out_of_range(k, std::string("in ") + (lo_open ? "(" : "[") + fmt(lo) + ", " + fmt(hi) + "]");
            c.*field = x;
          },
          [field](const TrainConfig& c) { return fmt(c.*field); }};
    };

    r["objective"] = Entry{
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "grpo") c.objective = losses::Objective::kGrpo;
          else if (v == "dapo") c.objective = losses::Objective::kDapo;
          else if (v == "vppo") c.objective = losses::Objective::kVppo;
          else out_of_range(k, "one of grpo|dapo|vppo");
        },
        [](const TrainConfig& c) { return losses::objective_name(c.objective); }};
    r["metric"] = Entry{
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "kl_exact") c.metric = dep::MetricKind::kKlExact;
          else if (v == "kl_k3") c.metric = dep::MetricKind::kKlK3;
          else if (v == "jsd") c.metric = dep::MetricKind::kJsd;
          else if (v == "top1_drop") c.metric = dep::MetricKind::kTop1Drop;
          else out_of_range(k, "one of kl_exact|kl_k3|jsd|top1_drop");
        },
        [](const TrainConfig& c) { return dep::metric_name(c.metric); }};
    r["perturb"] = Entry{
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "patch_blacken") c.perturb = env::PerturbStrategy::kPatchBlacken;
          else if (v == "complete_mask") c.perturb = env::PerturbStrategy::kCompleteMask;
          else if (v == "cell_noise") c.perturb = env::PerturbStrategy::kCellNoise;
          else if (v == "identity") c.perturb = env::PerturbStrategy::kIdentity;
          else out_of_range(k, "one of patch_blacken|complete_mask|cell_noise|identity");
        },
        [](const TrainConfig& c) { return env::strategy_name(c.perturb); }};
    r["beta_max_mode"] = Entry{
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "dynamic") c.beta_max_mode = signal::BetaMaxMode::kDynamic;
          else if (v == "fixed") c.beta_max_mode = signal::BetaMaxMode::kFixed;
          else out_of_range(k, "one of dynamic|fixed");
        },
        [](const TrainConfig& c) {
          return c.beta_max_mode == signal::BetaMaxMode::kDynamic ? "dynamic" : "fixed";
        }};
    r["averaging"] = Entry{
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "token_level") c.averaging = losses::AveragingMode::kTokenLevel;
          else if (v == "per_trajectory") c.averaging = losses::AveragingMode::kPerTrajectory;
          else out_of_range(k, "one of token_level|per_trajectory");
        },
        [](const TrainConfig& c) { return losses::averaging_name(c.averaging); }};
    r["seed"] = Entry{
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          const int64_t x = parse_int(k, v);
          if (x < 0) out_of_range(k, "a nonnegative integer");
          c.seed = static_cast<uint64_t>(x);
        },
        [](const TrainConfig& c) { return std::to_string(c.seed); }};

    add_int("group_size", &TrainConfig::group_size, 2, 64);
    add_int("rollout_batch", &TrainConfig::rollout_batch, 1, 4096);
    add_double("k", &TrainConfig::k, 0.0, 1.0, /*lo_open=*/true);
    add_double("beta_min", &TrainConfig::beta_min, 0.0, 1.0, true);
    add_double("beta_max", &TrainConfig::beta_max, 1.0, 4.0, false);
    add_double("eps_low", &TrainConfig::eps_low, 0.0, 0.99, true);
    add_double("eps_high", &TrainConfig::eps_high, 0.0, 0.99, true);
    add_double("entropy_coef", &TrainConfig::entropy_coef, 0.0, 10.0, false);
    add_double("lr", &TrainConfig::lr, 0.0, 1.0, true);
    add_int("steps", &TrainConfig::steps, 0, 1000000);
    add_int("max_response_len", &TrainConfig::max_response_len, 1, 4096);
    add_double("temperature", &TrainConfig::temperature, 0.0, 100.0, true);
    add_double("top_p", &TrainConfig::top_p, 0.0, 1.0, true);
    add_int("grid_n", &TrainConfig::grid_n, 2, 10);
    add_int("d_model", &TrainConfig::d_model, 2, 1024);
    add_int("n_heads", &TrainConfig::n_heads, 1, 16);
    add_int("n_blocks", &TrainConfig::n_blocks, 1, 4);
    add_int("mlp_hidden", &TrainConfig::mlp_hidden, 1, 4096);
    add_int("context_max", &TrainConfig::context_max, 8, 4096);
    add_int("eval_every", &TrainConfig::eval_every, 1, 100000);
    add_int("eval_n", &TrainConfig::eval_n, 1, 100000);
    add_int("checkpoint_every", &TrainConfig::checkpoint_every, 1, 1000000);
    add_int("threads", &TrainConfig::threads, 0, 256);
    add_int("max_attempts_factor", &TrainConfig::max_attempts_factor, 1, 64);
    return r;
  }();
  return reg;
}

}  // namespace

void TrainConfig::validate() const {
  if (eps_low > eps_high) throw ConfigError("value for 'eps_low' out of range: must be <= eps_high");
  if (beta_max_mode == signal::BetaMaxMode::kFixed && beta_max < 1.0)
    throw ConfigError("value for 'beta_max' out of range: must be >= 1 (beta_min <= 1 <= beta_max)");
  policy().validate();
  loss().validate();
  if (max_response_len + grid_n * grid_n + 10 > context_max)
    throw ConfigError("value for 'max_response_len' out of range: response plus prompt must fit context_max");
}

void apply_override(TrainConfig& config, const std::string& key, const std::string& value) {
  const auto& reg = registry();
  auto it = reg.find(key);
  if (it == reg.end()) throw ConfigError("unknown key '" + key + "'");
  it->second.set(config, key, value);
}

TrainConfig parse_config_text(const std::string& text) {
  TrainConfig config;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    auto strip = [](std::string s) {
      const auto sb = s.find_first_not_of(" \t");
      if (sb == std::string::npos) return std::string();
      const auto se = s.find_last_not_of(" \t");
      return s.substr(sb, se - sb + 1);
    };
    apply_override(config, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
  return config;
}

TrainConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::map<std::string, std::string> config_to_map(const TrainConfig& config) {
  std::map<std::string, std::string> out;
  for (const auto& [key, entry] : registry()) out[key] = entry.get(config);
  return out;
}

std::string serialize_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [key, value] : config_to_map(config)) out += key + "=" + value + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, _] : registry()) keys.push_back(key);
  return keys;
}

}  // namespace vppo::harness
