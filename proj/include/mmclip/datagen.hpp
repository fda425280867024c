#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmclip/entmlm.hpp"
#include "mmclip/rng.hpp"
#include "mmclip/tensor.hpp"
#include "mmclip/tokenizer.hpp"

namespace mmclip {

/// The fourteen chest conditions, in the fixed prompt order. The last entry,
/// "no finding", is never planted by the generator.
const std::vector<std::string>& condition_names();

/// "a chest x-ray with {condition}" for every condition, in order.
std::vector<std::string> disease_prompt_texts();
std::vector<TokenSeq> disease_prompts(const Vocabulary& vocab, std::size_t max_len);

/// Planted pattern of one class: a hard-edged ellipse centred at (cx, cy) in
/// pixels of a 32 x 32 reference frame, scaled to the image size.
struct ClassTemplate {
  std::string name;
  double cx = 0.0, cy = 0.0;
  double rx = 1.0, ry = 1.0;
};

/// Default templates for the first 13 conditions.
std::vector<ClassTemplate> default_class_templates();

struct CorpusSpec {
  std::size_t n_paired = 200;
  std::size_t n_unpaired = 100;
  std::size_t image_size = 32;
  std::size_t n_classes = 8;
  double prevalence = 0.15;
  double background = 0.0;
  double amplitude = 1.0;
  double noise_std = 0.05;
  double jitter = 1.0;            // max centre shift in reference pixels
  double distractor_prob = 0.0;   // chance of one unlabelled blob per image
  double synonym_prob = 0.3;      // chance a report uses a synonym
  double filler_prob = 0.5;       // chance a report opens with a filler sentence
  std::size_t max_text_len = 32;
  std::uint64_t seed = 0;
  std::vector<ClassTemplate> classes;  // empty: the first n_classes defaults

  void validate() const;
  /// Templates in effect: `classes` or the defaults.
  std::vector<ClassTemplate> templates() const;
  /// Pixel mask of the template region of class c (no jitter).
  std::vector<unsigned char> region(std::size_t c) const;
};

CorpusSpec corpus_spec_from_json(const std::string& text);
std::string corpus_spec_to_json(const CorpusSpec& spec);

struct SampleRecord {
  std::string id;
  Tensor image;
  std::optional<std::string> report_text;
  std::optional<TokenSeq> report;
  std::vector<int> labels;
  bool paired = false;
};

/// Every word the generator can emit plus the lexicon and prompt words.
std::vector<std::string> corpus_words(const EntityLexicon& lexicon);
Vocabulary corpus_vocabulary(const EntityLexicon& lexicon);

/// Draws labels, renders the image and (when paired) composes the report.
/// `force_paired` overrides the caller's choice of modality; default paired.
SampleRecord gen_sample(const CorpusSpec& spec, RngStream& rng, const Vocabulary& vocab,
                        const EntityLexicon& lexicon, std::optional<bool> force_paired = {});

struct Corpus {
  std::vector<SampleRecord> records;
  Vocabulary vocab;
  EntityLexicon lexicon;
  std::size_t n_classes = 0;

  std::size_t n_paired() const;
};

/// Generates the corpus in memory: paired samples first, then unpaired.
Corpus generate_corpus(const CorpusSpec& spec);

/// Writes manifest.jsonl, images/*.f32, vocab.txt, lexicon.tsv and spec.json.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir,
                  const std::optional<CorpusSpec>& spec = {});
void write_corpus(const CorpusSpec& spec, const std::filesystem::path& dir);
/// Reads a corpus directory written by write_corpus.
Corpus load_corpus(const std::filesystem::path& dir);

/// Raw image file: u32 height, u32 width, then float32 pixels, little-endian.
void write_image(const std::filesystem::path& path, const Tensor& image);
Tensor read_image(const std::filesystem::path& path);

}  // namespace mmclip
