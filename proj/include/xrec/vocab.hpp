#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace xrec {

/// Word-level vocabulary with five reserved ids at the front.  The reserved
/// literals are lexed case-insensitively as single tokens; everything else
/// is lowercased words and single punctuation characters.
struct Vocab {
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kUnk = 2;
  static constexpr int kUserEmbed = 3;
  static constexpr int kItemEmbed = 4;
  static constexpr int kNumReserved = 5;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  static const std::vector<std::string>& reserved_names();

  /// Reserved ids first, then the corpus tokens in sorted order.
  static Vocab build(const std::vector<std::string>& corpus);

  /// Rebuilds the lookup map from id_to_token (used after deserialization).
  static Vocab from_tokens(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(id_to_token.size()); }
  int id_of(const std::string& token) const;  // <UNK> for unknown tokens
  const std::string& token_of(int id) const;
};

/// Lexer shared by tokenize and the overlap metrics: lowercased words,
/// single punctuation marks, reserved literals kept whole and canonical.
std::vector<std::string> word_split(const std::string& text);

std::vector<int> tokenize(const std::string& text, const Vocab& vocab);

/// Joins tokens with single spaces; inverse of tokenize up to casing and
/// whitespace normalization for in-vocabulary text.
std::string detokenize(const std::vector<int>& ids, const Vocab& vocab);

}  // namespace xrec
