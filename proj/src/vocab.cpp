#include "xrec/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>

namespace xrec {

const std::vector<std::string>& Vocab::reserved_names() {
  static const std::vector<std::string> names = {"<BOS>", "<EOS>", "<UNK>", "<USER_EMBED>",
                                                 "<ITEM_EMBED>"};
  return names;
}

namespace {

bool word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '\'' || c == '_';
}

/// Case-insensitive match of a reserved literal at position i; returns its
/// index or -1.
int match_reserved(const std::string& text, std::size_t i) {
  const auto& names = Vocab::reserved_names();
  for (std::size_t r = 0; r < names.size(); ++r) {
    const std::string& name = names[r];
    if (i + name.size() > text.size()) continue;
    bool ok = true;
    for (std::size_t j = 0; j < name.size(); ++j) {
      if (std::tolower(static_cast<unsigned char>(text[i + j])) !=
          std::tolower(static_cast<unsigned char>(name[j]))) {
        ok = false;
        break;
      }
    }
    if (ok) return static_cast<int>(r);
  }
  return -1;
}

}  // namespace

std::vector<std::string> word_split(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (c == '<') {
      int r = match_reserved(text, i);
      if (r >= 0) {
        out.push_back(Vocab::reserved_names()[static_cast<std::size_t>(r)]);
        i += Vocab::reserved_names()[static_cast<std::size_t>(r)].size();
        continue;
      }
    }
    if (word_char(c)) {
      std::size_t j = i;
      std::string word;
      while (j < text.size() && word_char(text[j])) {
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[j]))));
        ++j;
      }
      out.push_back(std::move(word));
      i = j;
      continue;
    }
    out.push_back(std::string(1, c));
    ++i;
  }
  return out;
}

Vocab Vocab::build(const std::vector<std::string>& corpus) {
  std::set<std::string> words;
  for (const std::string& text : corpus)
    for (std::string& tok : word_split(text)) words.insert(std::move(tok));
  for (const std::string& name : reserved_names()) words.erase(name);

  std::vector<std::string> tokens = reserved_names();
  tokens.insert(tokens.end(), words.begin(), words.end());
  return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kNumReserved)
    throw std::invalid_argument("vocab: token list is missing the reserved entries");
  for (int r = 0; r < kNumReserved; ++r)
    if (tokens[static_cast<std::size_t>(r)] != reserved_names()[static_cast<std::size_t>(r)])
      throw std::invalid_argument("vocab: reserved token order is corrupt");

  Vocab v;
  v.id_to_token = std::move(tokens);
  for (std::size_t i = 0; i < v.id_to_token.size(); ++i) {
    auto [it, inserted] = v.token_to_id.emplace(v.id_to_token[i], static_cast<int>(i));
    if (!inserted) throw std::invalid_argument("vocab: duplicate token " + v.id_to_token[i]);
  }
  return v;
}

int Vocab::id_of(const std::string& token) const {
  auto it = token_to_id.find(token);
  return it == token_to_id.end() ? kUnk : it->second;
}

const std::string& Vocab::token_of(int id) const {
  if (id < 0 || id >= size())
    throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
  return id_to_token[static_cast<std::size_t>(id)];
}

std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const std::string& tok : word_split(text)) ids.push_back(vocab.id_of(tok));
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.token_of(id);
  }
  return out;
}

}  // namespace xrec
