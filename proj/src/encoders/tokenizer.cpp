#include "cvloc/encoders/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "cvloc/errors.hpp"

namespace cvloc::encoders {

namespace {

const std::vector<std::string>& reserved() {
  static const std::vector<std::string> kReserved = {"<pad>", "<unk>", "<bos>", "<eos>"};
  return kReserved;
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

Vocabulary::Vocabulary() : Vocabulary(reserved()) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  std::set<std::string> words;
  for (const auto& text : texts) {
    for (auto& w : split_words(text)) words.insert(std::move(w));
  }
  std::vector<std::string> tokens = reserved();
  tokens.insert(tokens.end(), words.begin(), words.end());
  return Vocabulary(std::move(tokens));
}

std::size_t Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnknown : it->second;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  if (tokens.size() < reserved().size() ||
      !std::equal(reserved().begin(), reserved().end(), tokens.begin())) {
    throw FormatError("vocabulary " + path.string() + " lacks the reserved marker lines");
  }
  return Vocabulary(std::move(tokens));
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, std::size_t context) {
  if (context < 2) throw ParameterError("tokenize: context must hold the two markers");
  const auto words = split_words(text);
  const std::size_t kept = std::min(words.size(), context - 2);
  TokenSequence seq;
  seq.ids.reserve(kept + 2);
  seq.ids.push_back(Vocabulary::kBegin);
  for (std::size_t i = 0; i < kept; ++i) seq.ids.push_back(vocab.id(words[i]));
  seq.ids.push_back(Vocabulary::kEnd);
  seq.length = seq.ids.size();
  return seq;
}

TokenSequence pad_to(TokenSequence seq, std::size_t size) {
  if (seq.ids.size() < size) seq.ids.resize(size, Vocabulary::kPad);
  return seq;
}

}  // namespace cvloc::encoders
