#pragma once

#include <array>
#include <string_view>

// Shared token vocabulary. Ids 0-9 are the digits, which also double as the
// grid cell symbols (with kMaskSym for a blacked-out cell).
namespace vppo::tokens {

inline constexpr int kDigit0 = 0;  // ids 0..9 are digits
inline constexpr int kMask = 10;
inline constexpr int kBos = 11;
inline constexpr int kEos = 12;
inline constexpr int kAns = 13;  // answer-begin marker
inline constexpr int kSep = 14;  // grid/query boundary
inline constexpr int kTaskLookup = 15;
inline constexpr int kTaskRowSum = 16;
inline constexpr int kTaskRowMax = 17;
inline constexpr int kTpl0 = 18;  // filler "template" tokens
inline constexpr int kTpl1 = 19;
inline constexpr int kTpl2 = 20;
inline constexpr int kTpl3 = 21;
inline constexpr int kGrid = 22;
inline constexpr int kPad = 23;

inline constexpr int kVocabSize = 24;

// Grid cell symbols: digits 0..9 plus MASK.
inline constexpr int kMaskSym = kMask;
inline constexpr int kNumCellSymbols = 11;

inline constexpr bool is_digit(int id) { return id >= 0 && id <= 9; }
inline constexpr bool is_template(int id) { return id >= kTpl0 && id <= kTpl3; }

inline constexpr std::array<std::string_view, kVocabSize> kNames = {
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "MASK", "BOS", "EOS", "ANS", "SEP", "LOOK", "RSUM", "RMAX",
    "TPL0", "TPL1", "TPL2", "TPL3", "GRID", "PAD",
};

inline std::string_view name(int id) {
  return (id >= 0 && id < kVocabSize) ? kNames[static_cast<size_t>(id)] : "?";
}

}  // namespace vppo::tokens
