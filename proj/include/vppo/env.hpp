#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vppo::env {

class EnvError : public std::runtime_error {
 public:
  explicit EnvError(const std::string& what) : std::runtime_error(what) {}
};

enum class TaskKind { kCellLookup, kRowSum, kRowMax };

const char* task_name(TaskKind kind);

// Square grid of symbol tokens: digits 0..9 or the MASK symbol.
struct Image {
  int n = 0;
  std::vector<int> cells;  // row-major, n*n entries

  int sym(int r, int c) const { return cells[static_cast<size_t>(r) * n + c]; }
};

// One synthetic multimodal problem. The query is a token sequence encoding
// the task kind and coordinates; the answer is the digit sequence (most
// significant first) that the task yields on this grid.
struct Instance {
  Image image;
  std::vector<int> query;
  std::vector<int> answer;
  TaskKind kind = TaskKind::kCellLookup;
  uint64_t seed = 0;
};

Instance generate_instance(uint64_t seed, int n, TaskKind kind);

// 1 iff the digit subsequence between the first ANS marker and the next EOS
// exactly equals instance.answer. Malformed responses score 0.
int verify_answer(std::span<const int> response, const Instance& instance);

enum class PerturbStrategy { kPatchBlacken, kCompleteMask, kCellNoise, kIdentity };

const char* strategy_name(PerturbStrategy s);

Image perturb_image(const Image& image, PerturbStrategy strategy, uint64_t seed);

// Debug dump: seed, task kind, flattened grid, query, answer; tab-separated.
std::string dump_instance(const Instance& instance);

// Digits of a nonnegative value, most significant first.
std::vector<int> digits_of(int value);

}  // namespace vppo::env
