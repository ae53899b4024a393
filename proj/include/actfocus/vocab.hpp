#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace actfocus {

/// Index into the closed vocabulary.
using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// Fixed ids. The order below must match kVocabStrings in vocab.cpp.
namespace tok {
inline constexpr Token kThinkOpen = 0;
inline constexpr Token kThinkClose = 1;
inline constexpr Token kAnswerOpen = 2;
inline constexpr Token kAnswerClose = 3;
inline constexpr Token kSeparator = 4;  // "||"
inline constexpr Token kSokoban = 5;
inline constexpr Token kFrozenLake = 6;
inline constexpr Token kSudoku = 7;
inline constexpr Token kUser = 8;
inline constexpr Token kNewline = 9;
inline constexpr Token kUp = 10;
inline constexpr Token kDown = 11;
inline constexpr Token kLeft = 12;
inline constexpr Token kRight = 13;
inline constexpr Token kDigit0 = 14;  // digits 0..9 are contiguous
inline constexpr Token kComma = 24;
inline constexpr Token kFirstFiller = 44;
}  // namespace tok

/// The whole-word/symbol vocabulary shared by every environment.
class Vocabulary {
 public:
  static const Vocabulary& instance();

  int size() const noexcept { return static_cast<int>(words_.size()); }
  std::string_view word(Token t) const { return words_.at(static_cast<std::size_t>(t)); }
  std::optional<Token> find(std::string_view word) const;

  bool is_tag(Token t) const noexcept {
    return t == tok::kThinkOpen || t == tok::kThinkClose || t == tok::kAnswerOpen || t == tok::kAnswerClose;
  }
  bool is_digit(Token t) const noexcept { return t >= tok::kDigit0 && t < tok::kDigit0 + 10; }
  int digit_value(Token t) const noexcept { return t - tok::kDigit0; }
  static constexpr Token digit(int d) noexcept { return tok::kDigit0 + d; }

  /// Free-form "reasoning" words used inside think spans.
  std::span<const Token> filler() const noexcept { return filler_; }

  /// Splits text on whitespace and newlines, then greedily takes the longest
  /// vocabulary word at each point. Throws FormatError on unknown text.
  TokenSeq tokenize(std::string_view text) const;

  /// Words joined by single spaces; newline tokens become line breaks.
  std::string detokenize(std::span<const Token> tokens) const;

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::vector<Token> filler_;
};

inline const Vocabulary& vocab() { return Vocabulary::instance(); }

}  // namespace actfocus
