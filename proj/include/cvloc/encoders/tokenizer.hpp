#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cvloc::encoders {

// Lowercased alphanumeric runs; everything else separates words.
std::vector<std::string> split_words(std::string_view text);

// Corpus-built word vocabulary. Ids 0..3 are reserved for the special markers.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnknown = 1;
  static constexpr std::size_t kBegin = 2;
  static constexpr std::size_t kEnd = 3;

  Vocabulary();
  // Words sorted lexicographically after the reserved markers, so the result
  // depends only on the set of words seen.
  static Vocabulary build(std::span<const std::string> texts);

  std::size_t size() const { return tokens_.size(); }
  std::size_t id(std::string_view word) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // One token per line, line number = id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  explicit Vocabulary(std::vector<std::string> tokens);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct TokenSequence {
  std::vector<std::size_t> ids;
  // Count of non-padding ids, including the begin and end markers.
  std::size_t length = 0;

  std::size_t end_position() const { return length - 1; }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// Words beyond context - 2 are dropped; the result is [BEGIN, words..., END].
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, std::size_t context);

// Appends padding ids up to `size` (no-op if already that long).
TokenSequence pad_to(TokenSequence seq, std::size_t size);

}  // namespace cvloc::encoders
