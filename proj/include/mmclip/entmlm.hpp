#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mmclip/attmim.hpp"
#include "mmclip/tokenizer.hpp"

namespace mmclip {

struct LexiconEntry {
  std::vector<std::string> words;  // lowercase surface form, tokenised
  std::string entity_class;
};

/// Medical surface forms mapped to entity classes.
class EntityLexicon {
 public:
  /// Parses "surface_form<TAB>entity_class" lines.
  static EntityLexicon parse(std::string_view tsv);
  static EntityLexicon load(const std::filesystem::path& path);
  /// Built-in lexicon covering the chest conditions and common synonyms.
  static EntityLexicon builtin();

  std::string to_tsv() const;
  const std::vector<LexiconEntry>& entries() const { return entries_; }
  /// Surface forms (joined with spaces) registered for a class.
  std::vector<std::string> surface_forms(const std::string& entity_class) const;
  std::vector<std::string> words() const;

 private:
  std::vector<LexiconEntry> entries_;
};

/// Tab-separated source of EntityLexicon::builtin().
std::string_view builtin_lexicon_tsv();

struct EntitySpan {
  std::size_t start = 0;
  std::size_t length = 0;
  std::string entity_class;
};

/// Longest match first, scanning left to right, no overlaps; padding is
/// never matched.
std::vector<EntitySpan> find_entity_spans(const TokenSeq& tokens, const EntityLexicon& lexicon,
                                          const Vocabulary& vocab);
/// Positions of every token inside a lexicon match.
std::vector<std::size_t> recognize_entities(const TokenSeq& tokens, const EntityLexicon& lexicon,
                                            const Vocabulary& vocab);

/// Samples round(lambda3 * |entity_indices|) of the entity positions.
TokenMask entity_mask(std::span<const std::size_t> entity_indices, std::size_t n_tokens,
                      double lambda3, RngStream& rng);

/// allowed[i][j]: position i may attend to position j.
struct AttnMatrix {
  std::size_t n = 0;
  std::vector<unsigned char> allowed;

  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * n + j] != 0; }
  std::size_t count() const;
};

/// allowed[i][j] = (j <= i)
AttnMatrix causal_mask(std::size_t n);

/// Causal permission AND (j not masked OR j == i): masked entity slots are
/// hidden from every other position but remain visible to themselves.
AttnMatrix combine_masks(const AttnMatrix& causal, const TokenMask& ent);

/// Replaces masked entity rows with the text mask embedding plus position.
Var apply_text_mask(Var e_report, const TokenMask& ent, Var mask_embedding, Var positions);

}  // namespace mmclip
