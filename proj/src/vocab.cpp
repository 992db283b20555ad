// SPDX-License-Identifier: Apache-2.0

#include "aquila/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_map>

#include "aquila/error.hpp"

namespace aquila {

namespace {

bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '-' || c == '_' || c >= 0x80; }

// Length of a special token starting at text[i], or 0.
std::size_t match_special(std::string_view text, std::size_t i) {
  for (std::string_view tok : special::kTokens) {
    if (text.size() - i < tok.size()) continue;
    bool same = true;
    for (std::size_t k = 0; k < tok.size() && same; ++k) {
      same = std::tolower(static_cast<unsigned char>(text[i + k])) == tok[k];
    }
    if (same) return tok.size();
  }
  return 0;
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (c == '<' && match_special(text, i) > 0) {
      const std::size_t n = match_special(text, i);
      std::string tok(text.substr(i, n));
      for (char& ch : tok) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      out.push_back(std::move(tok));
      i += n;
    } else if (is_word_char(c)) {
      std::string word;
      while (i < text.size() && is_word_char(static_cast<unsigned char>(text[i]))) {
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i]))));
        ++i;
      }
      out.push_back(std::move(word));
    } else {
      out.emplace_back(1, static_cast<char>(c));
      ++i;
    }
  }
  return out;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const std::string& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Vocab::Vocab() {
  for (std::string_view tok : special::kTokens) add(std::string(tok));
}

void Vocab::add(std::string token) {
  if (ids_.count(token)) throw FormatError("duplicate vocabulary token: " + token);
  ids_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocab Vocab::build(std::span<const std::string> corpus) {
  std::unordered_map<std::string, std::size_t> freq;
  Vocab v;
  for (const std::string& doc : corpus) {
    for (std::string& w : split_words(doc)) {
      if (v.ids_.count(w)) continue;
      ++freq[std::move(w)];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> words(freq.begin(), freq.end());
  std::sort(words.begin(), words.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  for (auto& [w, n] : words) v.add(std::move(w));
  return v;
}

Vocab Vocab::from_text(std::string_view text) {
  Vocab v;
  v.tokens_.clear();
  v.ids_.clear();
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    v.add(std::string(text.substr(start, end - start)));
    start = end + 1;
  }
  if (v.tokens_.size() < std::size_t(special::kCount)) throw FormatError("vocabulary is missing special tokens");
  for (std::int32_t i = 0; i < special::kCount; ++i) {
    if (v.tokens_[i] != special::kTokens[i]) {
      throw FormatError("vocabulary line " + std::to_string(i) + " must be " + std::string(special::kTokens[i]));
    }
  }
  return v;
}

std::string Vocab::to_text() const {
  std::string out;
  for (const std::string& t : tokens_) {
    out += t;
    out.push_back('\n');
  }
  return out;
}

bool Vocab::contains(std::string_view token) const { return ids_.find(token) != ids_.end(); }

std::int32_t Vocab::id(std::string_view token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? special::kUnk : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || std::size_t(id) >= tokens_.size()) throw Error("token id out of range: " + std::to_string(id));
  return tokens_[id];
}

std::vector<std::int32_t> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<std::int32_t> ids;
  for (const std::string& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string detokenize(std::span<const std::int32_t> ids, const Vocab& vocab) {
  std::string out;
  for (std::int32_t id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

}  // namespace aquila
