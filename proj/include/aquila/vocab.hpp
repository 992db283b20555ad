// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace aquila {

namespace special {
inline constexpr std::int32_t kBos = 0;
inline constexpr std::int32_t kEos = 1;
inline constexpr std::int32_t kPad = 2;
inline constexpr std::int32_t kUnk = 3;
inline constexpr std::int32_t kImage = 4;
inline constexpr std::int32_t kRegion = 5;
inline constexpr std::int32_t kMask = 6;
inline constexpr std::int32_t kPosition = 7;
inline constexpr std::int32_t kUser = 8;
inline constexpr std::int32_t kAssistant = 9;
inline constexpr std::int32_t kCount = 10;

inline constexpr std::array<std::string_view, kCount> kTokens{
    "<bos>", "<eos>", "<pad>", "<unk>", "<image>", "<region>", "<mask>", "<position>", "<user>", "<assistant>"};
}  // namespace special

// Lower-cases, splits on whitespace and detaches punctuation. Special tokens
// such as "<region>" survive as single words. Hyphens and underscores inside
// a word are kept ("top-left").
std::vector<std::string> split_words(std::string_view text);

// The words of split_words joined by single spaces.
std::string normalize_text(std::string_view text);

// Closed word-level vocabulary. Ids are dense; 0-9 are the specials in the
// order of special::kTokens, followed by corpus words sorted by descending
// frequency, ties broken lexicographically.
class Vocab {
 public:
  Vocab();

  static Vocab build(std::span<const std::string> corpus);

  // One token per line, line number = id.
  static Vocab from_text(std::string_view text);
  std::string to_text() const;

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const;
  // Unknown words map to <unk>.
  std::int32_t id(std::string_view token) const;
  const std::string& token(std::int32_t id) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::map<std::string, std::int32_t, std::less<>> ids_;
};

std::vector<std::int32_t> tokenize(std::string_view text, const Vocab& vocab);
std::string detokenize(std::span<const std::int32_t> ids, const Vocab& vocab);

}  // namespace aquila
