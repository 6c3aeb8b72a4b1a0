#include "vppo/env.hpp"

#include <algorithm>
#include <random>

#include "vppo/tokens.hpp"

namespace vppo::env {

const char* task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCellLookup: return "cell_lookup";
    case TaskKind::kRowSum: return "row_sum";
    case TaskKind::kRowMax: return "row_max";
  }
  return "?";
}

const char* strategy_name(PerturbStrategy s) {
  switch (s) {
    case PerturbStrategy::kPatchBlacken: return "patch_blacken";
    case PerturbStrategy::kCompleteMask: return "complete_mask";
    case PerturbStrategy::kCellNoise: return "cell_noise";
    case PerturbStrategy::kIdentity: return "identity";
  }
  return "?";
}

std::vector<int> digits_of(int value) {
  if (value < 0) throw EnvError("digits_of: negative value");
  std::vector<int> out;
  do {
    out.push_back(value % 10);
    value /= 10;
  } while (value > 0);
  std::reverse(out.begin(), out.end());
  return out;
}

Instance generate_instance(uint64_t seed, int n, TaskKind kind) {
  if (n < 2 || n > 10)
    throw EnvError("grid side must be in [2, 10], got " + std::to_string(n));
  if (kind != TaskKind::kCellLookup && kind != TaskKind::kRowSum && kind != TaskKind::kRowMax)
    throw EnvError("invalid task kind");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> digit(0, 9);
  std::uniform_int_distribution<int> coord(0, n - 1);

  Instance inst;
  inst.seed = seed;
  inst.kind = kind;
  inst.image.n = n;
  inst.image.cells.resize(static_cast<size_t>(n) * n);
  for (int& c : inst.image.cells) c = digit(rng);

  switch (kind) {
    case TaskKind::kCellLookup: {
      const int r = coord(rng), c = coord(rng);
      inst.query = {tokens::kTaskLookup, r, c};
      inst.answer = {inst.image.sym(r, c)};
      break;
    }
    case TaskKind::kRowSum: {
      const int r = coord(rng);
      int sum = 0;
      for (int c = 0; c < n; ++c) sum += inst.image.sym(r, c);
      inst.query = {tokens::kTaskRowSum, r};
      inst.answer = digits_of(sum);
      break;
    }
    case TaskKind::kRowMax: {
      const int r = coord(rng);
      int mx = 0;
      for (int c = 0; c < n; ++c) mx = std::max(mx, inst.image.sym(r, c));
      inst.query = {tokens::kTaskRowMax, r};
      inst.answer = {mx};
      break;
    }
  }
  if (inst.answer.size() > 3) throw EnvError("answer longer than 3 digits");
  return inst;
}

int verify_answer(std::span<const int> response, const Instance& instance) {
  size_t i = 0;
  while (i < response.size() && response[i] != tokens::kAns) ++i;
  if (i == response.size()) return 0;  // no answer marker
  ++i;
  std::vector<int> got;
  bool closed = false;
  for (; i < response.size(); ++i) {
    if (response[i] == tokens::kEos) {
      closed = true;
      break;
    }
    if (tokens::is_digit(response[i])) got.push_back(response[i]);
  }
  if (!closed) return 0;  // truncated / malformed
  return got == instance.answer ? 1 : 0;
}

Image perturb_image(const Image& image, PerturbStrategy strategy, uint64_t seed) {
  Image out = image;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> digit(0, 9);
  switch (strategy) {
    case PerturbStrategy::kPatchBlacken:
      for (int& c : out.cells)
        if (unit(rng) < 0.5) c = tokens::kMaskSym;
      break;
    case PerturbStrategy::kCompleteMask:
      std::fill(out.cells.begin(), out.cells.end(), tokens::kMaskSym);
      break;
    case PerturbStrategy::kCellNoise:
      for (int& c : out.cells) {
        const bool flip = unit(rng) < 0.5;
        const int d = digit(rng);  // drawn unconditionally to keep streams aligned
        if (flip) c = d;
      }
      break;
    case PerturbStrategy::kIdentity:
      break;
    default:
      throw EnvError("unknown perturbation strategy");
  }
  return out;
}

std::string dump_instance(const Instance& instance) {
  std::string grid;
  for (int c : instance.image.cells) grid += (c == tokens::kMaskSym) ? 'M' : static_cast<char>('0' + c);
  auto join = [](const std::vector<int>& toks) {
    std::string s;
    for (size_t i = 0; i < toks.size(); ++i) {
      if (i) s += ' ';
      s += std::string(tokens::name(toks[i]));
    }
    return s;
  };
  // Query coordinates are stored as raw ints (they share the digit ids).
  return std::to_string(instance.seed) + "\t" + task_name(instance.kind) + "\t" + grid + "\t" +
         join(instance.query) + "\t" + join(instance.answer);
}

}  // namespace vppo::env
