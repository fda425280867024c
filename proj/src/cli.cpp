#include "mmclip/cli.hpp"

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmclip/evalkit.hpp"

namespace mmclip::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Error tagged with the pipeline stage that raised it.
struct StageError : Error {
  StageError(const std::string& stage, const std::string& what) : Error(stage + ": " + what) {}
};

template <typename F>
auto stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw Error("cannot open " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
  if (!os) throw Error("failed writing " + p.string());
}

void ensure_dir(const fs::path& d) {
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec) throw Error("cannot create " + d.string() + ": " + ec.message());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::vector<std::string> class_names(std::size_t k) {
  const auto& all = condition_names();
  return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(std::min(k, all.size()))};
}

struct Globals {
  std::optional<std::uint64_t> seed;
  bool verbose = false;
};

// Zero-shot evaluation of one or more checkpoints; scores are averaged.
EvalReport zeroshot_report(const std::vector<std::string>& ckpts, const Corpus& corpus,
                           double threshold, Tensor* scores_out) {
  if (ckpts.empty()) throw Error("no checkpoint given");
  std::vector<Tensor> members;
  for (const auto& c : ckpts) {
    auto model = stage("load checkpoint", [&] { return Model::load(c); });
    members.push_back(stage("zero-shot scoring", [&] {
      return zero_shot_scores(*model, corpus.records, corpus.vocab, corpus.n_classes);
    }));
  }
  Tensor scores = ensemble_scores(members);
  auto report = evaluate(scores, label_matrix(corpus.records), threshold, class_names(corpus.n_classes));
  for (const auto& c : ckpts) report.checkpoints.push_back(fs::path(c).filename().string());
  if (scores_out) *scores_out = std::move(scores);
  return report;
}

std::string scores_csv(const Tensor& scores, const Corpus& corpus) {
  std::string out = "id";
  for (const auto& n : class_names(corpus.n_classes)) out += "," + n;
  out += '\n';
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    out += corpus.records[i].id;
    for (std::size_t k = 0; k < scores.cols(); ++k) out += "," + num(scores(i, k));
    out += '\n';
  }
  return out;
}

int cmd_gen_data(const Globals& g, const std::string& spec_path, const fs::path& out_dir,
                 std::ostream& out) {
  CorpusSpec spec = stage("read spec", [&] {
    return spec_path.empty() ? CorpusSpec{} : corpus_spec_from_json(read_text(spec_path));
  });
  if (g.seed) spec.seed = *g.seed;
  stage("generate corpus", [&] {
    ensure_dir(out_dir);
    write_corpus(spec, out_dir);
    return 0;
  });
  std::vector<fs::path> files{out_dir / "manifest.jsonl", out_dir / "vocab.txt",
                              out_dir / "lexicon.tsv", out_dir / "spec.json"};
  write_manifest(out_dir, "gen-data", files);
  if (g.verbose) out << "wrote " << spec.n_paired + spec.n_unpaired << " samples to " << out_dir << '\n';
  return 0;
}

int cmd_pretrain(const Globals& g, const std::string& config_path, const fs::path& corpus_dir,
                 const fs::path& out_dir, const std::string& resume, std::ostream& out) {
  TrainConfig cfg = stage("read config", [&] {
    return config_path.empty() ? TrainConfig{} : train_config_from_json(read_text(config_path));
  });
  if (g.seed) cfg.seed = *g.seed;
  const Corpus corpus = stage("load corpus", [&] { return load_corpus(corpus_dir); });
  ensure_dir(out_dir);
  write_text(out_dir / "config.json", train_config_to_json(cfg) + "\n");
  auto on_step = [&](const StepLog& l) {
    if (g.verbose) out << csv_row(l) << '\n';
  };
  std::optional<fs::path> res;
  if (!resume.empty()) res = resume;
  RunResult r = stage("pretrain", [&] { return mmclip::run(cfg, corpus, out_dir, res, on_step); });
  std::vector<fs::path> files{out_dir / "config.json"};
  files.insert(files.end(), r.files.begin(), r.files.end());
  write_manifest(out_dir, "pretrain", files);
  return 0;
}

int cmd_zeroshot(const std::string& ckpts, const fs::path& corpus_dir, const fs::path& out_dir,
                 double threshold, std::ostream& out, const Globals& g) {
  const Corpus corpus = stage("load corpus", [&] { return load_corpus(corpus_dir); });
  Tensor scores;
  const EvalReport rep = zeroshot_report(split_list(ckpts), corpus, threshold, &scores);
  ensure_dir(out_dir);
  write_text(out_dir / "report.json", rep.to_json() + "\n");
  write_text(out_dir / "scores.csv", scores_csv(scores, corpus));
  write_manifest(out_dir, "zeroshot", {out_dir / "report.json", out_dir / "scores.csv"});
  if (g.verbose) out << "macro AUC " << num(rep.macro_auc) << '\n';
  return 0;
}

int cmd_finetune(const Globals& g, const std::string& ckpt, const fs::path& corpus_dir,
                 const fs::path& out_dir, double fraction, ProbeConfig probe, std::ostream& out) {
  if (g.seed) probe.seed = *g.seed;
  const Corpus corpus = stage("load corpus", [&] { return load_corpus(corpus_dir); });
  auto model = stage("load checkpoint", [&] { return Model::load(ckpt); });
  EvalReport rep = stage("linear probe", [&] {
    const Tensor feats = image_features(*model, corpus.records);
    return linear_probe(feats, label_matrix(corpus.records), fraction, probe,
                        class_names(corpus.n_classes));
  });
  rep.checkpoints.push_back(fs::path(ckpt).filename().string());
  ensure_dir(out_dir);
  write_text(out_dir / "report.json", rep.to_json() + "\n");
  write_manifest(out_dir, "finetune", {out_dir / "report.json"});
  if (g.verbose) out << "probe macro ACC " << num(rep.macro_acc) << '\n';
  return 0;
}

int cmd_maskdump(const Globals& g, const std::string& ckpt, const fs::path& corpus_dir,
                 const fs::path& out_dir, std::size_t n, const MaskConfig& mc) {
  if (n == 0) throw StageError("maskdump", "n must be at least 1");
  const Corpus corpus = stage("load corpus", [&] { return load_corpus(corpus_dir); });
  auto model = stage("load checkpoint", [&] { return Model::load(ckpt); });
  const Tensor e_prompt = prompt_features(*model, corpus.vocab);
  const RngStream root(g.seed.value_or(0));
  std::string lines;
  stage("maskdump", [&] {
    for (std::size_t i = 0; i < std::min(n, corpus.records.size()); ++i) {
      const auto& rec = corpus.records[i];
      Tape tape;
      const Binding b = bind(tape, model->params, false);
      const Tensor e_img = model->image_encoder.encode(b, rec.image).value();
      std::optional<Tensor> e_rep;
      if (rec.paired && rec.report) e_rep = model->text_encoder.encode(b, *rec.report).value();
      RngStream rng = root.derive(Purpose::kMask, i);
      const auto masks = attention_masks(e_img, e_rep ? &*e_rep : nullptr, e_prompt, mc, rng);
      lines += mask_record_json(rec.id, masks) + "\n";
    }
    return 0;
  });
  ensure_dir(out_dir);
  write_text(out_dir / "masks.jsonl", lines);
  write_manifest(out_dir, "maskdump", {out_dir / "masks.jsonl"});
  return 0;
}

int cmd_sweep(const Globals& g, const std::string& param, const std::string& values,
              const std::string& config_path, const fs::path& corpus_dir,
              const std::string& eval_dir, const fs::path& out_dir, std::ostream& out) {
  if (param != "lambda1" && param != "lambda2" && param != "lambda3")
    throw StageError("sweep", "param must be lambda1, lambda2 or lambda3, got '" + param + "'");
  TrainConfig base = stage("read config", [&] {
    return config_path.empty() ? TrainConfig{} : train_config_from_json(read_text(config_path));
  });
  if (g.seed) base.seed = *g.seed;
  std::vector<double> vals;
  for (const auto& v : split_list(values)) {
    double x = 0.0;
    try {
      x = std::stod(v);
    } catch (const std::exception&) {
      throw StageError("sweep", "not a number: '" + v + "'");
    }
    if (!(x >= 0.0 && x <= 1.0)) throw StageError("sweep", "value " + v + " outside [0, 1]");
    vals.push_back(x);
  }
  const Corpus corpus = stage("load corpus", [&] { return load_corpus(corpus_dir); });
  const Corpus eval = eval_dir.empty() ? Corpus{} : stage("load eval corpus", [&] { return load_corpus(eval_dir); });
  const Corpus& ev = eval_dir.empty() ? corpus : eval;
  ensure_dir(out_dir);
  std::string csv = "value,auc,f1\n";
  std::vector<fs::path> files;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    TrainConfig cfg = base;
    (param == "lambda1" ? cfg.mask_config.lambda1
     : param == "lambda2" ? cfg.mask_config.lambda2
                          : cfg.mask_config.lambda3) = vals[i];
    const fs::path run_dir = out_dir / ("run_" + std::to_string(i));
    const std::string tag = "sweep " + param + "=" + num(vals[i]);
    RunResult r = stage(tag, [&] { return mmclip::run(cfg, corpus, run_dir); });
    const EvalReport rep = stage(tag, [&] {
      return zeroshot_report({r.checkpoint.string()}, ev, 0.0, nullptr);
    });
    csv += num(vals[i]) + "," + num(rep.macro_auc) + "," + num(rep.macro_f1) + "\n";
    files.insert(files.end(), r.files.begin(), r.files.end());
    if (g.verbose) out << tag << " auc " << num(rep.macro_auc) << '\n';
  }
  write_text(out_dir / "sweep.csv", csv);
  files.insert(files.begin(), out_dir / "sweep.csv");
  write_manifest(out_dir, "sweep", files);
  return 0;
}

}  // namespace

void write_manifest(const fs::path& dir, const std::string& command,
                    const std::vector<fs::path>& files) {
  json j = {{"command", command}, {"files", json::array()}};
  for (const auto& f : files) j["files"].push_back(fs::relative(f, dir).generic_string());
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

std::string mask_record_json(const std::string& sample_id, const AttentionMaskSet& m) {
  json j = {{"sample_id", sample_id}};
  if (m.report) j["mask_report"] = m.report->masked;
  j["mask_prompt"] = m.prompt.masked;
  j["mask_self"] = m.self.masked;
  j["mask_blended"] = m.blended.masked;
  j["mask_final"] = m.final.masked;
  j["n_tokens"] = m.final.n_tokens;
  return j.dump();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked medical contrastive language-image pretraining at desk scale", "mmclip"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Seed override");
  app.add_flag("-v,--verbose", g.verbose, "Print progress");

  std::string out_dir, spec, config, corpus, eval_corpus, ckpt, resume, param, values;
  double threshold = 0.0, fraction = 0.1;
  std::size_t n = 1;
  ProbeConfig probe;
  MaskConfig mc;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  gen->add_option("--spec", spec, "Corpus spec JSON");
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Pretrain a model");
  pre->add_option("--config", config, "Train config JSON");
  pre->add_option("--corpus", corpus, "Corpus directory")->required();
  pre->add_option("--out", out_dir, "Output directory")->required();
  pre->add_option("--resume", resume, "Checkpoint to resume from");

  auto* zs = app.add_subcommand("zeroshot", "Zero-shot classification report");
  zs->add_option("--ckpt", ckpt, "Checkpoint(s), comma separated")->required();
  zs->add_option("--corpus", corpus, "Corpus directory")->required();
  zs->add_option("--out", out_dir, "Output directory")->required();
  zs->add_option("--threshold", threshold, "Score threshold for F1/ACC");

  auto* ft = app.add_subcommand("finetune", "Linear probe on frozen image features");
  ft->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ft->add_option("--corpus", corpus, "Corpus directory")->required();
  ft->add_option("--out", out_dir, "Output directory")->required();
  ft->add_option("--fraction", fraction, "Fraction of the training split");
  ft->add_option("--lr", probe.lr, "Probe learning rate");
  ft->add_option("--epochs", probe.epochs, "Probe full-batch updates");

  auto* md = app.add_subcommand("maskdump", "Dump attention masks as JSON lines");
  md->add_option("--ckpt", ckpt, "Checkpoint")->required();
  md->add_option("--corpus", corpus, "Corpus directory")->required();
  md->add_option("--out", out_dir, "Output directory")->required();
  md->add_option("--n", n, "Number of samples");
  md->add_option("--lambda1", mc.lambda1, "Per-strategy mask proportion");
  md->add_option("--lambda2", mc.lambda2, "Final mask proportion");

  auto* sw = app.add_subcommand("sweep", "Pretrain and evaluate over mask ratios");
  sw->add_option("--param", param, "lambda1, lambda2 or lambda3")->required();
  sw->add_option("--values", values, "Comma separated values");
  sw->add_option("--config", config, "Base train config JSON");
  sw->add_option("--corpus", corpus, "Corpus directory")->required();
  sw->add_option("--eval-corpus", eval_corpus, "Evaluation corpus (default: --corpus)");
  sw->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*gen) return cmd_gen_data(g, spec, out_dir, out);
    if (*pre) return cmd_pretrain(g, config, corpus, out_dir, resume, out);
    if (*zs) return cmd_zeroshot(ckpt, corpus, out_dir, threshold, out, g);
    if (*ft) return cmd_finetune(g, ckpt, corpus, out_dir, fraction, probe, out);
    if (*md) return cmd_maskdump(g, ckpt, corpus, out_dir, n, mc);
    if (*sw) return cmd_sweep(g, param, values, config, corpus, eval_corpus, out_dir, out);
  } catch (const StageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << app.get_subcommands().front()->get_name() << ": " << e.what() << '\n';
    return 1;
  }
  return 1;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace mmclip::cli
