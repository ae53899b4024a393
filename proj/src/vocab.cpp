#include "actfocus/vocab.hpp"

#include "actfocus/errors.hpp"

namespace actfocus {
namespace {

constexpr std::array<std::string_view, 62> kVocabStrings = {
    "<think>", "</think>", "<answer>", "</answer>", "||",
    "<sokoban>", "<frozenlake>", "<sudoku>", "<user>", "\n",
    "Up", "Down", "Left", "Right",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    ",",
    "#", "_", "O", "√", "X", "P", "S", "G", ".", "|", "---",
    "[1]", "[2]", "[3]", "[4]",
    "You", "have", "actions", "left",
    // filler
    "plan", "box", "goal", "target", "move", "hole", "wall", "player", "path",
    "next", "then", "so", "check", "cell", "row", "col", "safe", "push",
};

static_assert(kVocabStrings.size() - tok::kFirstFiller == 18);

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r'; }

}  // namespace

Vocabulary::Vocabulary() {
  words_.assign(kVocabStrings.begin(), kVocabStrings.end());
  for (Token t = tok::kFirstFiller; t < size(); ++t) filler_.push_back(t);
}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary v;
  return v;
}

std::optional<Token> Vocabulary::find(std::string_view word) const {
  for (std::size_t i = 0; i < words_.size(); ++i)
    if (words_[i] == word) return static_cast<Token>(i);
  return std::nullopt;
}

TokenSeq Vocabulary::tokenize(std::string_view text) const {
  TokenSeq out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (is_space(text[i])) {
      ++i;
      continue;
    }
    if (text[i] == '\n') {
      out.push_back(tok::kNewline);
      ++i;
      continue;
    }
    std::size_t best_len = 0;
    Token best = -1;
    for (std::size_t w = 0; w < words_.size(); ++w) {
      const auto& s = words_[w];
      if (s.size() > best_len && text.substr(i, s.size()) == s) {
        best_len = s.size();
        best = static_cast<Token>(w);
      }
    }
    if (best < 0) throw FormatError("untokenizable text at offset " + std::to_string(i) + ": '" + std::string(text.substr(i, 8)) + "'");
    out.push_back(best);
    i += best_len;
  }
  return out;
}

std::string Vocabulary::detokenize(std::span<const Token> tokens) const {
  std::string out;
  bool line_start = true;
  for (Token t : tokens) {
    if (t == tok::kNewline) {
      out += '\n';
      line_start = true;
      continue;
    }
    if (!line_start) out += ' ';
    out += word(t);
    line_start = false;
  }
  return out;
}

}  // namespace actfocus
