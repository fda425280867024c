#include "mmclip/entmlm.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace mmclip {

std::string_view builtin_lexicon_tsv() {
  static constexpr std::string_view kTsv =
      "fracture\tfracture\n"
      "rib fracture\tfracture\n"
      "edema\tedema\n"
      "pulmonary edema\tedema\n"
      "consolidation\tconsolidation\n"
      "enlarged cardiomediastinum\tenlarged_cardiomediastinum\n"
      "widened mediastinum\tenlarged_cardiomediastinum\n"
      "cardiomegaly\tcardiomegaly\n"
      "enlarged heart\tcardiomegaly\n"
      "lung lesion\tlung_lesion\n"
      "nodule\tlung_lesion\n"
      "lung opacity\tlung_opacity\n"
      "opacity\tlung_opacity\n"
      "pneumonia\tpneumonia\n"
      "atelectasis\tatelectasis\n"
      "pneumothorax\tpneumothorax\n"
      "pleural effusion\tpleural_effusion\n"
      "effusion\tpleural_effusion\n"
      "pleural other\tpleural_other\n"
      "pleural thickening\tpleural_other\n"
      "support devices\tsupport_devices\n"
      "tube\tsupport_devices\n";
  return kTsv;
}

EntityLexicon EntityLexicon::parse(std::string_view tsv) {
  EntityLexicon lex;
  std::set<std::string> seen;
  std::istringstream is{std::string(tsv)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
      throw Error("lexicon line " + std::to_string(line_no) + ": expected surface<TAB>class");
    }
    const std::string surface = line.substr(0, tab);
    auto words = split_words(surface);
    std::string joined;
    for (const auto& w : words) joined += (joined.empty() ? "" : " ") + w;
    if (!seen.insert(joined).second) {
      throw Error("lexicon line " + std::to_string(line_no) + ": duplicate term '" + joined + "'");
    }
    lex.entries_.push_back(LexiconEntry{std::move(words), line.substr(tab + 1)});
  }
  if (lex.entries_.empty()) throw Error("lexicon is empty");
  return lex;
}

EntityLexicon EntityLexicon::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open lexicon file: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

EntityLexicon EntityLexicon::builtin() { return parse(builtin_lexicon_tsv()); }

std::string EntityLexicon::to_tsv() const {
  std::string out;
  for (const auto& e : entries_) {
    std::string joined;
    for (const auto& w : e.words) joined += (joined.empty() ? "" : " ") + w;
    out += joined + '\t' + e.entity_class + '\n';
  }
  return out;
}

std::vector<std::string> EntityLexicon::surface_forms(const std::string& entity_class) const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (e.entity_class != entity_class) continue;
    std::string joined;
    for (const auto& w : e.words) joined += (joined.empty() ? "" : " ") + w;
    out.push_back(joined);
  }
  return out;
}

std::vector<std::string> EntityLexicon::words() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.insert(out.end(), e.words.begin(), e.words.end());
  return out;
}

std::vector<EntitySpan> find_entity_spans(const TokenSeq& tokens, const EntityLexicon& lexicon,
                                          const Vocabulary& vocab) {
  // Compile terms to id sequences; terms with out-of-vocabulary words can
  // never match.
  struct Term {
    std::vector<std::size_t> ids;
    const std::string* cls;
  };
  std::vector<Term> terms;
  for (const auto& e : lexicon.entries()) {
    Term t{{}, &e.entity_class};
    bool ok = !e.words.empty();
    for (const auto& w : e.words) {
      if (!vocab.contains(w)) {
        ok = false;
        break;
      }
      t.ids.push_back(vocab.id(w));
    }
    if (ok) terms.push_back(std::move(t));
  }
  std::stable_sort(terms.begin(), terms.end(),
                   [](const Term& a, const Term& b) { return a.ids.size() > b.ids.size(); });

  std::vector<EntitySpan> spans;
  const std::size_t n = tokens.size();
  std::size_t i = 0;
  while (i < n) {
    const Term* hit = nullptr;
    if (tokens.pad_mask[i]) {
      for (const auto& t : terms) {
        if (i + t.ids.size() > n) continue;
        bool match = true;
        for (std::size_t k = 0; k < t.ids.size() && match; ++k)
          match = tokens.pad_mask[i + k] && tokens.ids[i + k] == t.ids[k];
        if (match) {
          hit = &t;
          break;
        }
      }
    }
    if (hit) {
      spans.push_back(EntitySpan{i, hit->ids.size(), *hit->cls});
      i += hit->ids.size();
    } else {
      ++i;
    }
  }
  return spans;
}

std::vector<std::size_t> recognize_entities(const TokenSeq& tokens, const EntityLexicon& lexicon,
                                            const Vocabulary& vocab) {
  std::vector<std::size_t> out;
  for (const auto& s : find_entity_spans(tokens, lexicon, vocab))
    for (std::size_t k = 0; k < s.length; ++k) out.push_back(s.start + k);
  return out;
}

TokenMask entity_mask(std::span<const std::size_t> entity_indices, std::size_t n_tokens,
                      double lambda3, RngStream& rng) {
  if (!(lambda3 >= 0.0 && lambda3 <= 1.0)) throw Error("lambda3 must lie in [0, 1]");
  const std::size_t k = proportion_count(lambda3, entity_indices.size());
  return TokenMask::from_indices(n_tokens, sample_without_replacement(rng, entity_indices, k),
                                 MaskProvenance::kEntity);
}

std::size_t AttnMatrix::count() const {
  return static_cast<std::size_t>(std::count(allowed.begin(), allowed.end(), 1));
}

AttnMatrix causal_mask(std::size_t n) {
  if (n == 0) throw Error("causal_mask needs n >= 1");
  AttnMatrix m{n, std::vector<unsigned char>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
  return m;
}

AttnMatrix combine_masks(const AttnMatrix& causal, const TokenMask& ent) {
  if (causal.n != ent.n_tokens) {
    throw ShapeError("combine_masks length mismatch: " + std::to_string(causal.n) + " vs " +
                     std::to_string(ent.n_tokens));
  }
  AttnMatrix out = causal;
  const auto hidden = ent.flags();
  for (std::size_t i = 0; i < out.n; ++i)
    for (std::size_t j = 0; j < out.n; ++j)
      if (hidden[j] && j != i) out.allowed[i * out.n + j] = 0;
  return out;
}

Var apply_text_mask(Var e_report, const TokenMask& ent, Var mask_embedding, Var positions) {
  return apply_token_mask(e_report, ent, mask_embedding, positions);
}

}  // namespace mmclip
