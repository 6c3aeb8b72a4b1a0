#include "vppo/analysis.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "vppo/parallel.hpp"
#include "vppo/signal.hpp"
#include "vppo/tokens.hpp"

namespace vppo::analysis {

void classify_positions(const train::Trajectory& trajectory, std::vector<TokenTag>& tags) {
  const std::vector<int>& toks = trajectory.tokens;
  // Scored span: digits between the first ANS and the following EOS.
  int span_lo = -1, span_hi = -1;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (toks[i] == tokens::kAns) {
      span_lo = static_cast<int>(i) + 1;
      break;
    }
  }
  if (span_lo >= 0) {
    for (size_t i = span_lo; i < toks.size(); ++i) {
      if (toks[i] == tokens::kEos) {
        span_hi = static_cast<int>(i);
        break;
      }
    }
  }
  for (size_t i = 0; i < toks.size(); ++i) {
    TokenTag& tag = tags[i];
    const int tok = toks[i];
    const bool in_span = span_lo >= 0 && span_hi >= 0 && static_cast<int>(i) >= span_lo &&
                         static_cast<int>(i) < span_hi;
    tag.is_answer = in_span && tokens::is_digit(tok);
    // Scaffold: fillers and markers. Digits outside the span stay unclassified.
    tag.is_template = tokens::is_template(tok) || tok == tokens::kAns || tok == tokens::kEos;
  }
}

AnalysisResult analyze_policy(const policy::PolicyParams& params, const harness::TrainConfig& config,
                              int n, uint64_t seed, int bin_count, int annotate_first) {
  if (n < 1) throw dep::DependencyError("analyze_policy: n must be >= 1");

  train::SampleSettings settings;
  settings.temperature = config.temperature;
  settings.top_p = config.top_p;
  settings.max_len = config.max_response_len;

  std::vector<train::Trajectory> trajs(n);
  parallel_for(n, config.threads, [&](int i) {
    const env::Instance inst = train::draw_instance(config, train::mix_seed(seed, 0xAA, i));
    trajs[i] = train::sample_trajectory(params, inst, settings, train::mix_seed(seed, 0xAB, i));
    train::masked_pass(params, trajs[i], config.perturb, train::mix_seed(seed, 0xAC, i));
    trajs[i].profile =
        dep::score_trajectory(trajs[i].original_dists, trajs[i].masked_dists, trajs[i].tokens, config.metric);
  });

  AnalysisResult result;
  result.n_trajectories = n;

  std::vector<dep::DependencyProfile> profiles;
  profiles.reserve(n);
  for (const train::Trajectory& t : trajs) profiles.push_back(t.profile);
  const dep::HistogramPair pair = dep::dependency_histogram(profiles, bin_count);
  result.token_hist = pair.token_level;
  result.trajectory_hist = pair.trajectory_level;

  double answer_sum = 0.0, template_sum = 0.0, traj_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const train::Trajectory& t = trajs[i];
    traj_sum += t.profile.trajectory_mean;
    std::vector<TokenTag> tags(t.tokens.size());
    const std::vector<uint8_t> mask = signal::topk_mask(t.profile.token_scores, config.k);
    for (size_t j = 0; j < t.tokens.size(); ++j) {
      tags[j].token = t.tokens[j];
      tags[j].score = t.profile.token_scores[j];
      tags[j].selected = mask[j] != 0;
    }
    classify_positions(t, tags);
    for (const TokenTag& tag : tags) {
      if (tag.is_answer) {
        answer_sum += tag.score;
        ++result.n_answer_tokens;
      } else if (tag.is_template) {
        template_sum += tag.score;
        ++result.n_template_tokens;
      }
    }
    if (i < annotate_first) {
      AnnotatedTrajectory ann;
      ann.instance_line = env::dump_instance(t.instance);
      ann.reward = t.reward;
      ann.trajectory_mean = t.profile.trajectory_mean;
      ann.tags = std::move(tags);
      result.annotated.push_back(std::move(ann));
    }
  }
  result.answer_mean_dep = result.n_answer_tokens ? answer_sum / result.n_answer_tokens : 0.0;
  result.template_mean_dep = result.n_template_tokens ? template_sum / result.n_template_tokens : 0.0;
  result.mean_traj_dep = traj_sum / n;
  result.traj_mean_right_of_mode =
      result.trajectory_hist.mean > result.trajectory_hist.bin_hi(result.trajectory_hist.mode_bin);
  return result;
}

void write_histogram_csv(const std::string& path, const dep::Histogram& token_level,
                         const dep::Histogram& trajectory_level) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw dep::DependencyError("cannot open '" + path + "'");
  f << "bin_lo,bin_hi,count,level\n";
  f << std::setprecision(12);
  auto emit = [&](const dep::Histogram& h, const char* level) {
    for (size_t i = 0; i < h.counts.size(); ++i)
      f << h.bin_lo(static_cast<int>(i)) << "," << h.bin_hi(static_cast<int>(i)) << ","
        << h.counts[i] << "," << level << "\n";
  };
  emit(token_level, "token");
  emit(trajectory_level, "trajectory");
}

void write_annotated_report(const std::string& path, const AnalysisResult& result) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw dep::DependencyError("cannot open '" + path + "'");
  f << std::setprecision(4);
  f << "Per-token visual dependency. Tokens in the top share of their trajectory\n"
       "are marked with '*'; answer digits with 'A', scaffold tokens with 't'.\n\n";
  for (size_t i = 0; i < result.annotated.size(); ++i) {
    const AnnotatedTrajectory& ann = result.annotated[i];
    f << "--- trajectory " << i << " (reward " << ann.reward << ", mean dependency "
      << ann.trajectory_mean << ")\n";
    f << "    " << ann.instance_line << "\n";
    for (const TokenTag& tag : ann.tags) {
      f << "    " << tokens::name(tag.token) << "\t" << tag.score << (tag.selected ? "\t*" : "\t")
        << (tag.is_answer ? "A" : (tag.is_template ? "t" : "")) << "\n";
    }
  }
  f << "\nanswer positions: " << result.n_answer_tokens << ", mean dependency "
    << result.answer_mean_dep << "\n";
  f << "scaffold positions: " << result.n_template_tokens << ", mean dependency "
    << result.template_mean_dep << "\n";
}

}  // namespace vppo::analysis
