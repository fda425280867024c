#include "mmclip/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "mmclip/tensor.hpp"

namespace mmclip {

std::size_t TokenSeq::valid_count() const {
  return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), 1));
}

TokenSeq TokenSeq::trimmed() const {
  TokenSeq out = *this;
  while (!out.pad_mask.empty() && !out.pad_mask.back()) {
    out.pad_mask.pop_back();
    out.ids.pop_back();
  }
  return out;
}

TokenSeq TokenSeq::padded(std::size_t length) const {
  TokenSeq out = *this;
  while (out.ids.size() < length) {
    out.ids.push_back(kPadId);
    out.pad_mask.push_back(0);
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c) || c == '-') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

namespace {

const std::vector<std::string>& specials() {
  static const std::vector<std::string> s{"[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]"};
  return s;
}

}  // namespace

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  v.words_ = specials();
  std::set<std::string> uniq(words.begin(), words.end());
  for (const auto& s : specials()) uniq.erase(s);
  v.words_.insert(v.words_.end(), uniq.begin(), uniq.end());
  for (std::size_t i = 0; i < v.words_.size(); ++i) v.index_[v.words_[i]] = i;
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open vocabulary file: " + path.string());
  Vocabulary v;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (v.index_.count(line)) throw Error("duplicate vocabulary entry '" + line + "' in " + path.string());
    v.index_[line] = v.words_.size();
    v.words_.push_back(line);
  }
  if (v.words_.size() < specials().size() ||
      !std::equal(specials().begin(), specials().end(), v.words_.begin())) {
    throw Error("vocabulary file must start with the special tokens: " + path.string());
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write vocabulary file: " + path.string());
  for (const auto& w : words_) os << w << '\n';
}

std::size_t Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnkId : it->second;
}

TokenSeq Vocabulary::encode(std::string_view text, std::size_t max_len) const {
  if (max_len < 2) throw Error("max_len must leave room for [BOS] and [EOS]");
  TokenSeq seq;
  seq.ids.push_back(kBosId);
  for (const auto& w : split_words(text)) {
    if (seq.ids.size() + 1 >= max_len) break;
    seq.ids.push_back(id(w));
  }
  seq.ids.push_back(kEosId);
  seq.pad_mask.assign(seq.ids.size(), 1);
  return seq;
}

std::string Vocabulary::decode(const TokenSeq& seq) const {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (!seq.pad_mask[i]) continue;
    const auto id = seq.ids[i];
    if (id == kBosId || id == kEosId || id == kPadId) continue;
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

}  // namespace mmclip
