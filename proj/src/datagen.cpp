#include "mmclip/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mmclip {

using nlohmann::json;

const std::vector<std::string>& condition_names() {
  static const std::vector<std::string> names{
      "fracture",     "edema",         "consolidation",    "enlarged cardiomediastinum",
      "cardiomegaly", "lung lesion",   "lung opacity",     "pneumonia",
      "atelectasis",  "pneumothorax",  "pleural effusion", "pleural other",
      "support devices", "no finding"};
  return names;
}

std::vector<std::string> disease_prompt_texts() {
  std::vector<std::string> out;
  for (const auto& c : condition_names()) out.push_back("a chest x-ray with " + c);
  return out;
}

std::vector<TokenSeq> disease_prompts(const Vocabulary& vocab, std::size_t max_len) {
  std::vector<TokenSeq> out;
  for (const auto& t : disease_prompt_texts()) out.push_back(vocab.encode(t, max_len));
  return out;
}

std::vector<ClassTemplate> default_class_templates() {
  const auto& n = condition_names();
  return {
      {n[0], 6, 6, 3, 2},      {n[1], 16, 6, 2, 3},     {n[2], 26, 6, 3, 3},
      {n[3], 6, 16, 2, 4},     {n[4], 16, 16, 4, 3},    {n[5], 26, 16, 2, 2},
      {n[6], 6, 26, 3, 2},     {n[7], 16, 26, 4, 2},    {n[8], 26, 26, 2, 3},
      {n[9], 11, 11, 1.5, 1.5}, {n[10], 21, 11, 1.5, 1.5}, {n[11], 11, 21, 1.5, 1.5},
      {n[12], 21, 21, 1.5, 1.5},
  };
}

void CorpusSpec::validate() const {
  if (image_size == 0) throw Error("image_size must be positive");
  if (n_classes == 0) throw Error("n_classes must be at least 1");
  if (classes.empty() && n_classes > default_class_templates().size()) {
    throw Error("only " + std::to_string(default_class_templates().size()) +
                " default class templates exist, asked for " + std::to_string(n_classes));
  }
  if (!classes.empty() && classes.size() != n_classes)
    throw Error("classes list has " + std::to_string(classes.size()) + " entries, n_classes is " +
                std::to_string(n_classes));
  for (double p : {prevalence, distractor_prob, synonym_prob, filler_prob})
    if (!(p >= 0.0 && p <= 1.0)) throw Error("probabilities must lie in [0, 1]");
  if (!(noise_std >= 0.0)) throw Error("noise_std must be non-negative");
  if (!(jitter >= 0.0)) throw Error("jitter must be non-negative");
  if (max_text_len < 2) throw Error("max_text_len must be at least 2");
}

std::vector<ClassTemplate> CorpusSpec::templates() const {
  if (!classes.empty()) return classes;
  auto all = default_class_templates();
  all.resize(n_classes);
  return all;
}

namespace {

bool inside(const ClassTemplate& t, double cx, double cy, double scale, double px, double py) {
  const double dx = (px - cx) / (t.rx * scale), dy = (py - cy) / (t.ry * scale);
  return dx * dx + dy * dy <= 1.0;
}

void stamp(Tensor& img, const ClassTemplate& t, double cx, double cy, double scale, double amp) {
  const std::size_t s = img.rows();
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      if (inside(t, cx, cy, scale, x + 0.5, y + 0.5)) img(y, x) += amp;
}

}  // namespace

std::vector<unsigned char> CorpusSpec::region(std::size_t c) const {
  const auto t = templates().at(c);
  const double scale = static_cast<double>(image_size) / 32.0;
  std::vector<unsigned char> m(image_size * image_size, 0);
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x)
      m[y * image_size + x] = inside(t, t.cx * scale, t.cy * scale, scale, x + 0.5, y + 0.5);
  return m;
}

CorpusSpec corpus_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("corpus spec: ") + e.what());
  }
  CorpusSpec s;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("n_paired", s.n_paired);
    get("n_unpaired", s.n_unpaired);
    get("image_size", s.image_size);
    get("n_classes", s.n_classes);
    get("prevalence", s.prevalence);
    get("background", s.background);
    get("amplitude", s.amplitude);
    get("noise_std", s.noise_std);
    get("jitter", s.jitter);
    get("distractor_prob", s.distractor_prob);
    get("synonym_prob", s.synonym_prob);
    get("filler_prob", s.filler_prob);
    get("max_text_len", s.max_text_len);
    get("seed", s.seed);
    if (j.contains("classes")) {
      for (const auto& c : j.at("classes")) {
        s.classes.push_back({c.at("name").get<std::string>(), c.at("cx").get<double>(),
                             c.at("cy").get<double>(), c.at("rx").get<double>(),
                             c.at("ry").get<double>()});
      }
    }
  } catch (const json::exception& e) {
    throw Error(std::string("corpus spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::string corpus_spec_to_json(const CorpusSpec& s) {
  json j = {{"n_paired", s.n_paired},     {"n_unpaired", s.n_unpaired},
            {"image_size", s.image_size}, {"n_classes", s.n_classes},
            {"prevalence", s.prevalence}, {"background", s.background},
            {"amplitude", s.amplitude},   {"noise_std", s.noise_std},
            {"jitter", s.jitter},         {"distractor_prob", s.distractor_prob},
            {"synonym_prob", s.synonym_prob}, {"filler_prob", s.filler_prob},
            {"max_text_len", s.max_text_len},
            {"seed", s.seed}};
  if (!s.classes.empty()) {
    j["classes"] = json::array();
    for (const auto& c : s.classes)
      j["classes"].push_back({{"name", c.name}, {"cx", c.cx}, {"cy", c.cy}, {"rx", c.rx}, {"ry", c.ry}});
  }
  return j.dump(2);
}

namespace {

const std::vector<std::string>& sentence_templates() {
  static const std::vector<std::string> t{"there is {}", "{} is seen", "{}", "findings of {}",
                                          "a chest x-ray with {}"};
  return t;
}

const std::vector<std::string>& filler_sentences() {
  static const std::vector<std::string> f{"pa and lateral views of the chest",
                                          "comparison with the prior study", "portable view"};
  return f;
}

// Sentences are joined with " . " so a one-sentence report has no period.
const char* kNoFindingReport = "no finding";

std::string fill(const std::string& tmpl, const std::string& term) {
  const auto at = tmpl.find("{}");
  return tmpl.substr(0, at) + term + tmpl.substr(at + 2);
}

}  // namespace

std::vector<std::string> corpus_words(const EntityLexicon& lexicon) {
  std::vector<std::string> words = lexicon.words();
  auto add = [&](const std::string& text) {
    for (auto& w : split_words(text)) words.push_back(std::move(w));
  };
  for (const auto& t : sentence_templates()) add(fill(t, ""));
  for (const auto& f : filler_sentences()) add(f);
  add(kNoFindingReport);
  add(".");
  for (const auto& p : disease_prompt_texts()) add(p);
  return words;
}

Vocabulary corpus_vocabulary(const EntityLexicon& lexicon) {
  return Vocabulary::from_words(corpus_words(lexicon));
}

SampleRecord gen_sample(const CorpusSpec& spec, RngStream& rng, const Vocabulary& vocab,
                        const EntityLexicon& lexicon, std::optional<bool> force_paired) {
  spec.validate();
  const auto templates = spec.templates();
  const std::size_t s = spec.image_size;
  const double scale = static_cast<double>(s) / 32.0;
  SampleRecord rec;
  rec.paired = force_paired.value_or(true);

  // Fixed draw order: labels, jitters, distractor, noise, report.
  rec.labels.assign(spec.n_classes, 0);
  for (auto& l : rec.labels) l = rng.bernoulli(spec.prevalence) ? 1 : 0;

  Tensor img(Shape{s, s}, spec.background);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    const double jx = rng.uniform(-spec.jitter, spec.jitter);
    const double jy = rng.uniform(-spec.jitter, spec.jitter);
    if (!rec.labels[c]) continue;
    const auto& t = templates[c];
    stamp(img, t, (t.cx + jx) * scale, (t.cy + jy) * scale, scale, spec.amplitude);
  }
  if (rng.bernoulli(spec.distractor_prob)) {
    const ClassTemplate d{"", 0, 0, rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.0)};
    stamp(img, d, rng.uniform(0.0, 32.0) * scale, rng.uniform(0.0, 32.0) * scale, scale,
          spec.amplitude);
  }
  for (double& v : img.data()) {
    const double noise = spec.noise_std > 0.0 ? spec.noise_std * rng.normal() : 0.0;
    // Stored as float32 on disk, so round here to keep the round trip exact.
    v = static_cast<double>(static_cast<float>(std::clamp(v + noise, 0.0, 1.0)));
  }
  rec.image = std::move(img);

  if (rec.paired) {
    std::vector<std::string> sentences;
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      if (!rec.labels[c]) continue;
      const auto& name = templates[c].name;
      std::string term = name;
      std::string tag = name;
      std::replace(tag.begin(), tag.end(), ' ', '_');
      auto forms = lexicon.surface_forms(tag);
      forms.erase(std::remove(forms.begin(), forms.end(), name), forms.end());
      if (!forms.empty() && rng.bernoulli(spec.synonym_prob)) term = forms[rng.below(forms.size())];
      const auto& tmpls = sentence_templates();
      sentences.push_back(fill(tmpls[rng.below(tmpls.size())], term));
    }
    // Shuffle sentence order so position does not encode the class.
    for (std::size_t i = sentences.size(); i > 1; --i) std::swap(sentences[i - 1], sentences[rng.below(i)]);
    if (sentences.empty()) sentences.push_back(kNoFindingReport);
    if (rng.bernoulli(spec.filler_prob)) {
      const auto& f = filler_sentences();
      sentences.insert(sentences.begin(), f[rng.below(f.size())]);
    }
    std::string text;
    for (const auto& snt : sentences) text += (text.empty() ? "" : " . ") + snt;
    rec.report = vocab.encode(text, spec.max_text_len);
    rec.report_text = std::move(text);
  }
  return rec;
}

std::size_t Corpus::n_paired() const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const SampleRecord& r) { return r.paired; }));
}

namespace {

std::string sample_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%06zu", i);
  return buf;
}

}  // namespace

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus c{{}, corpus_vocabulary(EntityLexicon::builtin()), EntityLexicon::builtin(),
           spec.n_classes};
  const RngStream root(spec.seed);
  const std::size_t n = spec.n_paired + spec.n_unpaired;
  c.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    RngStream rng = root.derive(Purpose::kData, i);
    auto rec = gen_sample(spec, rng, c.vocab, c.lexicon, i < spec.n_paired);
    rec.id = sample_id(i);
    c.records.push_back(std::move(rec));
  }
  return c;
}

static_assert(std::endian::native == std::endian::little,
              "image I/O assumes a little-endian host");

void write_image(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 2) throw ShapeError("write_image expects H x W, got " + shape_str(image.shape()));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write image file: " + path.string());
  const std::uint32_t hw[2] = {static_cast<std::uint32_t>(image.rows()),
                               static_cast<std::uint32_t>(image.cols())};
  os.write(reinterpret_cast<const char*>(hw), sizeof hw);
  std::vector<float> px(image.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(image[i]);
  os.write(reinterpret_cast<const char*>(px.data()),
           static_cast<std::streamsize>(px.size() * sizeof(float)));
  if (!os) throw Error("failed writing image file: " + path.string());
}

Tensor read_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("missing image file: " + path.string());
  std::uint32_t hw[2];
  if (!is.read(reinterpret_cast<char*>(hw), sizeof hw)) throw Error("truncated image header: " + path.string());
  if (hw[0] == 0 || hw[1] == 0) throw Error("empty image: " + path.string());
  std::vector<float> px(static_cast<std::size_t>(hw[0]) * hw[1]);
  if (!is.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size() * sizeof(float))))
    throw Error("truncated image file: " + path.string());
  Tensor t(Shape{hw[0], hw[1]});
  for (std::size_t i = 0; i < px.size(); ++i) t[i] = px[i];
  return t;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir,
                  const std::optional<CorpusSpec>& spec) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw Error("cannot create corpus directory " + dir.string() + ": " + ec.message());
  std::ofstream man(dir / "manifest.jsonl", std::ios::trunc);
  if (!man) throw Error("cannot write " + (dir / "manifest.jsonl").string());
  for (const auto& r : corpus.records) {
    const std::string file = "images/" + r.id + ".f32";
    write_image(dir / file, r.image);
    json j = {{"id", r.id}, {"image_file", file}};
    if (r.paired) j["report"] = r.report_text.value_or(r.report ? corpus.vocab.decode(*r.report) : "");
    j["labels"] = r.labels;
    j["paired"] = r.paired;
    man << j.dump() << '\n';
  }
  corpus.vocab.save(dir / "vocab.txt");
  std::ofstream lex(dir / "lexicon.tsv", std::ios::trunc);
  lex << corpus.lexicon.to_tsv();
  if (spec) {
    std::ofstream sp(dir / "spec.json", std::ios::trunc);
    sp << corpus_spec_to_json(*spec) << '\n';
  }
}

void write_corpus(const CorpusSpec& spec, const std::filesystem::path& dir) {
  write_corpus(generate_corpus(spec), dir, spec);
}

Corpus load_corpus(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto manifest = dir / "manifest.jsonl";
  std::ifstream is(manifest);
  if (!is) throw Error("cannot open manifest: " + manifest.string());
  EntityLexicon lexicon = fs::exists(dir / "lexicon.tsv") ? EntityLexicon::load(dir / "lexicon.tsv")
                                                          : EntityLexicon::builtin();
  Vocabulary vocab = fs::exists(dir / "vocab.txt") ? Vocabulary::load(dir / "vocab.txt")
                                                   : corpus_vocabulary(lexicon);
  std::size_t max_len = 32;
  if (fs::exists(dir / "spec.json")) {
    std::ifstream sp(dir / "spec.json");
    std::stringstream ss;
    ss << sp.rdbuf();
    max_len = corpus_spec_from_json(ss.str()).max_text_len;
  }
  Corpus c{{}, std::move(vocab), std::move(lexicon), 0};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = manifest.string() + ":" + std::to_string(line_no);
    SampleRecord r;
    std::string file;
    try {
      const json j = json::parse(line);
      r.id = j.at("id").get<std::string>();
      file = j.at("image_file").get<std::string>();
      r.labels = j.at("labels").get<std::vector<int>>();
      r.paired = j.at("paired").get<bool>();
      if (j.contains("report")) r.report_text = j.at("report").get<std::string>();
    } catch (const json::exception& e) {
      throw Error("malformed manifest line " + where + ": " + e.what());
    }
    if (r.paired != r.report_text.has_value())
      throw Error("manifest line " + where + ": paired flag disagrees with report presence");
    if (c.records.empty()) c.n_classes = r.labels.size();
    if (r.labels.size() != c.n_classes || c.n_classes == 0)
      throw Error("manifest line " + where + ": expected " + std::to_string(c.n_classes) + " labels");
    for (int l : r.labels)
      if (l != 0 && l != 1) throw Error("manifest line " + where + ": labels must be 0 or 1");
    r.image = read_image(dir / file);
    if (r.report_text) r.report = c.vocab.encode(*r.report_text, max_len);
    c.records.push_back(std::move(r));
  }
  return c;
}

}  // namespace mmclip
