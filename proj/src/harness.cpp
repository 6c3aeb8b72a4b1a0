#include "vppo/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "vppo/analysis.hpp"
#include "vppo/trainer.hpp"
#include "vppo/variance.hpp"

namespace vppo::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw ConfigError("failed writing '" + path + "'");
}

}  // namespace

std::string default_out_root() {
  if (const char* env = std::getenv("VPPO_LAB_OUT"); env && *env) return env;
  return "runs";
}

void write_manifest(const TrainConfig& config, const std::string& out_dir,
                    const std::vector<std::string>& output_paths) {
  json manifest;
  manifest["code_version"] = kCodeVersion;
  manifest["master_seed"] = config.seed;
  manifest["start_timestamp"] = timestamp_utc();
  manifest["config"] = config_to_map(config);
  manifest["output_paths"] = output_paths;
  write_text((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

TrainOutcome run_train(const TrainConfig& config, const std::string& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  const std::string metrics_path = (dir / "metrics.jsonl").string();
  const std::string final_ckpt = (dir / "checkpoint_final.vppo").string();

  write_manifest(config, out_dir, {metrics_path, final_ckpt});

  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw ConfigError("cannot open '" + metrics_path + "'");

  train::TrainState state = train::init_state(config);

  TrainOutcome outcome;
  outcome.metrics_path = metrics_path;
  outcome.final_checkpoint_path = final_ckpt;
  outcome.init_eval_acc =
      train::evaluate(state.params, config, config.eval_n, train::mix_seed(config.seed, 0xEA11, 0));

  double last_eval = outcome.init_eval_acc;
  for (int s = 0; s < config.steps; ++s) {
    train::StepMetrics m = train::train_step(state, config);
    if (m.skipped) ++outcome.skipped_steps;
    if (s % config.eval_every == 0 || s == config.steps - 1) {
      // Step 0 reports the pre-update accuracy so streams start at baseline.
      const policy::PolicyParams& p = state.params;
      last_eval = (s == 0) ? outcome.init_eval_acc
                           : train::evaluate(p, config, config.eval_n,
                                             train::mix_seed(config.seed, 0xEA11, s));
    }
    json line;
    line["step"] = m.step;
    line["objective"] = m.objective;
    line["mean_reward"] = m.mean_reward;
    line["eval_acc"] = last_eval;
    line["loss"] = m.loss;
    line["entropy"] = m.entropy;
    line["mean_alpha"] = m.mean_alpha;
    line["masked_fraction"] = m.masked_fraction;
    line["degenerate_groups"] = m.degenerate_groups;
    line["wall_ms"] = m.wall_ms;
    metrics << line.dump() << "\n";
    metrics.flush();

    if ((s + 1) % config.checkpoint_every == 0) {
      std::ostringstream name;
      name << "checkpoint_" << std::setw(6) << std::setfill('0') << (s + 1) << ".vppo";
      train::save_checkpoint(state, config, (dir / name.str()).string());
    }
  }
  if (!metrics) throw ConfigError("failed writing metrics stream");

  train::save_checkpoint(state, config, final_ckpt);
  outcome.final_eval_acc =
      train::evaluate(state.params, config, config.eval_n, train::mix_seed(config.seed, 0xF1A1, 0));

  json summary;
  summary["init_eval_acc"] = outcome.init_eval_acc;
  summary["final_eval_acc"] = outcome.final_eval_acc;
  summary["steps"] = config.steps;
  summary["skipped_steps"] = outcome.skipped_steps;
  write_text((dir / "summary.json").string(), summary.dump(2) + "\n");

  json completed;
  completed["end_timestamp"] = timestamp_utc();
  write_text((dir / "completed.json").string(), completed.dump(2) + "\n");
  return outcome;
}

int cmd_train(const TrainConfig& config, const std::string& out_dir) {
  const TrainOutcome outcome = run_train(config, out_dir);
  std::cout << "train: wrote " << outcome.metrics_path << "\n"
            << "train: init accuracy " << outcome.init_eval_acc << ", final accuracy "
            << outcome.final_eval_acc << " (" << outcome.skipped_steps << " skipped steps)\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, int n, uint64_t seed) {
  const train::Checkpoint ckpt = train::load_checkpoint(checkpoint_path);
  const double acc = train::evaluate(ckpt.state.params, ckpt.config, n, seed);
  std::cout << "eval: accuracy " << acc << " over " << n << " instances\n";
  return 0;
}

int cmd_analyze(const std::string& checkpoint_path, int n, const std::string& out_dir,
                uint64_t seed) {
  const train::Checkpoint ckpt = train::load_checkpoint(checkpoint_path);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);

  const analysis::AnalysisResult result = analysis::analyze_policy(ckpt.state.params, ckpt.config, n, seed);
  analysis::write_histogram_csv((dir / "dependency_histogram.csv").string(), result.token_hist,
                                result.trajectory_hist);
  analysis::write_annotated_report((dir / "annotated_trajectories.txt").string(), result);

  json j;
  j["n_trajectories"] = result.n_trajectories;
  j["token_skewness"] = result.token_hist.skewness;
  j["trajectory_skewness"] = result.trajectory_hist.skewness;
  j["trajectory_mean"] = result.trajectory_hist.mean;
  j["trajectory_mode_bin_lo"] = result.trajectory_hist.bin_lo(result.trajectory_hist.mode_bin);
  j["trajectory_mode_bin_hi"] = result.trajectory_hist.bin_hi(result.trajectory_hist.mode_bin);
  j["traj_mean_right_of_mode"] = result.traj_mean_right_of_mode;
  j["answer_mean_dep"] = result.answer_mean_dep;
  j["template_mean_dep"] = result.template_mean_dep;
  j["n_answer_tokens"] = result.n_answer_tokens;
  j["n_template_tokens"] = result.n_template_tokens;
  write_text((dir / "analysis.json").string(), j.dump(2) + "\n");

  std::cout << "analyze: token skewness " << result.token_hist.skewness << ", trajectory skewness "
            << result.trajectory_hist.skewness << "\n"
            << "analyze: answer mean dependency " << result.answer_mean_dep
            << ", scaffold mean dependency " << result.template_mean_dep << "\n";
  return 0;
}

int cmd_variance(const TrainConfig& config, const std::string& out_dir, int live_n,
                 const std::string& checkpoint_path) {
  fs::create_directories(out_dir);
  const std::string csv_path = (fs::path(out_dir) / "variance_ratio.csv").string();
  std::ofstream f(csv_path, std::ios::trunc);
  if (!f) throw ConfigError("cannot open '" + csv_path + "'");
  f << std::setprecision(10);
  f << "source,k,alpha_mode,n,empirical_ratio,predicted,ci_lo,ci_hi,cross_step_corr,"
       "corr_alpha_adv,mean_frac_grpo,mean_frac_vppo,mean_masked_fraction,groups_discarded\n";

  const int sandbox_n = 20000, T = 50, dim = 16;
  const std::vector<double> ks = {0.2, 0.4, 0.8};
  const std::vector<variance::AlphaDist> alphas = {variance::AlphaDist::constant(1.0),
                                                   variance::AlphaDist::uniform(0.9, 1.1)};
  for (double k : ks) {
    for (const variance::AlphaDist& a : alphas) {
      const variance::RatioResult r = variance::sandbox_ratio(
          k, a, T, dim, sandbox_n, train::mix_seed(config.seed, 0x5B, static_cast<uint64_t>(k * 100)));
      f << "sandbox," << k << "," << a.mode_name() << "," << sandbox_n << "," << r.empirical_ratio
        << "," << r.predicted << "," << r.ci_lo << "," << r.ci_hi << ",,,,,,\n";
    }
  }

  if (live_n > 0) {
    policy::PolicyParams params =
        checkpoint_path.empty()
            ? policy::init_policy(config.policy(), train::mix_seed(config.seed, 0x1217))
            : train::load_checkpoint(checkpoint_path).state.params;
    const variance::LiveResult live =
        variance::live_ratio(params, config, live_n, train::mix_seed(config.seed, 0x11FE));
    f << "live," << config.k << ",batch," << live.diag.trajectories_used << ","
      << live.ratio.empirical_ratio << "," << live.ratio.predicted << "," << live.ratio.ci_lo << ","
      << live.ratio.ci_hi << "," << live.diag.cross_step_corr << "," << live.diag.corr_alpha_adv
      << "," << live.diag.mean_frac_grpo << "," << live.diag.mean_frac_vppo << ","
      << live.diag.mean_masked_fraction << "," << live.diag.groups_discarded << "\n";
    std::cout << "variance: live ratio " << live.ratio.empirical_ratio << " (predicted "
              << live.ratio.predicted << ", ci [" << live.ratio.ci_lo << ", " << live.ratio.ci_hi
              << "])\n";
  }
  if (!f) throw ConfigError("failed writing '" + csv_path + "'");
  std::cout << "variance: wrote " << csv_path << "\n";
  return 0;
}

CompareReport compare_runs(const std::vector<std::string>& metrics_paths, double threshold) {
  if (metrics_paths.size() < 2)
    throw ConfigError("compare_runs: need at least 2 metrics streams");

  CompareReport report;
  report.threshold = threshold;

  std::vector<std::vector<int64_t>> step_grids;
  for (const std::string& path : metrics_paths) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open metrics stream '" + path + "'");
    CompareRow row;
    row.path = path;
    std::vector<int64_t> steps;
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      const int64_t step = j.at("step").get<int64_t>();
      const double acc = j.at("eval_acc").get<double>();
      steps.push_back(step);
      if (row.objective.empty()) row.objective = j.at("objective").get<std::string>();
      if (!row.steps_to_threshold && acc >= threshold) row.steps_to_threshold = step;
      row.final_eval_acc = acc;
    }
    if (steps.empty()) throw ConfigError("empty metrics stream '" + path + "'");
    step_grids.push_back(std::move(steps));
    report.rows.push_back(std::move(row));
  }
  for (size_t i = 1; i < step_grids.size(); ++i)
    if (step_grids[i] != step_grids[0])
      throw ConfigError("mismatched step grids between '" + metrics_paths[0] + "' and '" +
                        metrics_paths[i] + "'");

  // Medians per objective; an unreached run sorts after every reached one.
  std::vector<std::string> objectives;
  for (const CompareRow& r : report.rows)
    if (std::find(objectives.begin(), objectives.end(), r.objective) == objectives.end())
      objectives.push_back(r.objective);
  for (const std::string& obj : objectives) {
    std::vector<const CompareRow*> rows;
    for (const CompareRow& r : report.rows)
      if (r.objective == obj) rows.push_back(&r);
    std::vector<std::optional<int64_t>> steps;
    std::vector<double> accs;
    for (const CompareRow* r : rows) {
      steps.push_back(r->steps_to_threshold);
      accs.push_back(r->final_eval_acc);
    }
    std::sort(steps.begin(), steps.end(), [](const auto& a, const auto& b) {
      if (a.has_value() != b.has_value()) return a.has_value();
      if (!a.has_value()) return false;
      return *a < *b;
    });
    std::sort(accs.begin(), accs.end());
    CompareMedian median;
    median.objective = obj;
    median.median_steps = steps[steps.size() / 2];
    median.median_final_acc = accs[accs.size() / 2];
    report.medians.push_back(std::move(median));
  }
  return report;
}

int cmd_compare(const std::vector<std::string>& metrics_paths, double threshold,
                const std::string& out_csv) {
  const CompareReport report = compare_runs(metrics_paths, threshold);
  std::ostringstream csv;
  csv << "kind,objective,stream,steps_to_threshold,final_eval_acc\n";
  for (const CompareRow& r : report.rows)
    csv << "run," << r.objective << "," << r.path << ","
        << (r.steps_to_threshold ? std::to_string(*r.steps_to_threshold) : "unreached") << ","
        << r.final_eval_acc << "\n";
  for (const CompareMedian& m : report.medians)
    csv << "median," << m.objective << ",,"
        << (m.median_steps ? std::to_string(*m.median_steps) : "unreached") << ","
        << m.median_final_acc << "\n";
  if (!out_csv.empty()) {
    write_text(out_csv, csv.str());
    std::cout << "compare: wrote " << out_csv << "\n";
  }
  std::cout << csv.str();
  return 0;
}

}  // namespace vppo::harness
