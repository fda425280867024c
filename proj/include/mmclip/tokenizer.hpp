#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mmclip {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kBosId = 1;
inline constexpr std::size_t kEosId = 2;
inline constexpr std::size_t kUnkId = 3;
inline constexpr std::size_t kMaskId = 4;

/// Token ids plus a per-position validity flag (0 marks padding).
struct TokenSeq {
  std::vector<std::size_t> ids;
  std::vector<unsigned char> pad_mask;

  std::size_t size() const { return ids.size(); }
  std::size_t valid_count() const;
  /// Copy without trailing padding.
  TokenSeq trimmed() const;
  /// Copy padded with [PAD] up to `length`.
  TokenSeq padded(std::size_t length) const;
};

/// Lowercases and splits into words: runs of [a-z0-9-] form a word, any other
/// non-space character is a token of its own.
std::vector<std::string> split_words(std::string_view text);

/// Word-level vocabulary. Ids 0..4 are [PAD] [BOS] [EOS] [UNK] [MASK].
class Vocabulary {
 public:
  /// Specials first, then the distinct words in sorted order.
  static Vocabulary from_words(const std::vector<std::string>& words);
  /// One token per line, line number = id.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return words_.size(); }
  std::size_t id(const std::string& word) const;
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  const std::string& word(std::size_t id) const { return words_.at(id); }

  /// [BOS] words [EOS], truncated to max_len (keeping [EOS] last).
  TokenSeq encode(std::string_view text, std::size_t max_len) const;
  std::string decode(const TokenSeq& seq) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mmclip
