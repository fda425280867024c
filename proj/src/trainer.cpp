#include "mmclip/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace mmclip {

using nlohmann::json;

std::string to_string(Phase p) { return p == Phase::kWarmup ? "warmup" : "joint"; }

std::string to_string(MimMode m) {
  switch (m) {
    case MimMode::kAttention: return "attention";
    case MimMode::kRandom: return "random";
    case MimMode::kNone: return "none";
  }
  return "unknown";
}

std::string to_string(MlmMode m) {
  switch (m) {
    case MlmMode::kEntity: return "entity";
    case MlmMode::kFull: return "full";
    case MlmMode::kNone: return "none";
  }
  return "unknown";
}

MimMode mim_mode_from_string(const std::string& s) {
  if (s == "attention") return MimMode::kAttention;
  if (s == "random") return MimMode::kRandom;
  if (s == "none") return MimMode::kNone;
  throw Error("unknown mim_mode '" + s + "' (attention, random, none)");
}

MlmMode mlm_mode_from_string(const std::string& s) {
  if (s == "entity") return MlmMode::kEntity;
  if (s == "full") return MlmMode::kFull;
  if (s == "none") return MlmMode::kNone;
  throw Error("unknown mlm_mode '" + s + "' (entity, full, none)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw Error("batch_size must be at least 1");
  if (warmup_iters > total_iters) throw Error("warmup_iters exceeds total_iters");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("lr must be finite and non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("momentum must lie in [0, 1)");
  if (!(unpaired_fraction >= 0.0 && unpaired_fraction <= 1.0))
    throw Error("unpaired_fraction must lie in [0, 1]");
  mask_config.validate();
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    auto get = [](const json& o, const char* key, auto& field) {
      if (o.contains(key)) field = o.at(key).get<std::decay_t<decltype(field)>>();
    };
    get(j, "lr", c.lr);
    get(j, "momentum", c.momentum);
    get(j, "batch_size", c.batch_size);
    get(j, "warmup_iters", c.warmup_iters);
    get(j, "total_iters", c.total_iters);
    get(j, "seed", c.seed);
    get(j, "unpaired_fraction", c.unpaired_fraction);
    get(j, "warmup_mlm", c.warmup_mlm);
    get(j, "use_align", c.use_align);
    get(j, "checkpoint_every", c.checkpoint_every);
    if (j.contains("mim_mode")) c.mim_mode = mim_mode_from_string(j.at("mim_mode").get<std::string>());
    if (j.contains("mlm_mode")) c.mlm_mode = mlm_mode_from_string(j.at("mlm_mode").get<std::string>());
    if (j.contains("mask_config")) {
      const auto& m = j.at("mask_config");
      get(m, "lambda1", c.mask_config.lambda1);
      get(m, "lambda2", c.mask_config.lambda2);
      get(m, "lambda3", c.mask_config.lambda3);
    }
    if (j.contains("model")) c.model = model_config_from_json(j.at("model").dump());
  } catch (const json::exception& e) {
    throw Error(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string train_config_to_json(const TrainConfig& c) {
  json j = {{"lr", c.lr},
            {"momentum", c.momentum},
            {"batch_size", c.batch_size},
            {"warmup_iters", c.warmup_iters},
            {"total_iters", c.total_iters},
            {"mask_config",
             {{"lambda1", c.mask_config.lambda1},
              {"lambda2", c.mask_config.lambda2},
              {"lambda3", c.mask_config.lambda3}}},
            {"seed", c.seed},
            {"unpaired_fraction", c.unpaired_fraction},
            {"warmup_mlm", c.warmup_mlm},
            {"use_align", c.use_align},
            {"mim_mode", to_string(c.mim_mode)},
            {"mlm_mode", to_string(c.mlm_mode)},
            {"checkpoint_every", c.checkpoint_every},
            {"model", json::parse(model_config_to_json(c.model))}};
  return j.dump(2);
}

std::vector<std::size_t> build_batch(const Corpus& corpus, std::size_t batch_size,
                                     double unpaired_fraction, RngStream& rng) {
  if (corpus.records.empty()) throw Error("build_batch: empty corpus");
  std::vector<std::size_t> paired, unpaired;
  for (std::size_t i = 0; i < corpus.records.size(); ++i)
    (corpus.records[i].paired ? paired : unpaired).push_back(i);
  const std::size_t n_un = proportion_count(unpaired_fraction, batch_size);
  const std::size_t n_pa = batch_size - n_un;
  if (n_un > unpaired.size() || n_pa > paired.size()) {
    throw Error("build_batch: batch needs " + std::to_string(n_pa) + " paired and " +
                std::to_string(n_un) + " unpaired samples, corpus has " +
                std::to_string(paired.size()) + " and " + std::to_string(unpaired.size()));
  }
  auto out = sample_without_replacement(rng, unpaired, n_un);
  const auto p = sample_without_replacement(rng, paired, n_pa);
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

Tensor prompt_features(const Model& model, const Vocabulary& vocab) {
  Tape tape;
  const Binding b = bind(tape, model.params, false);
  std::vector<Var> parts;
  std::size_t rows = 0;
  for (const auto& p : disease_prompts(vocab, model.config().encoder.max_text_len)) {
    parts.push_back(model.text_encoder.encode(b, p));
    rows += parts.back().value().rows();
  }
  const std::size_t c = model.config().encoder.embed_dim;
  Tensor out(Shape{rows, c});
  std::size_t r = 0;
  for (const auto& v : parts)
    for (std::size_t i = 0; i < v.value().rows(); ++i, ++r)
      std::copy(v.value().row(i).begin(), v.value().row(i).end(), out.row(r).begin());
  return out;
}

BatchObjective batch_objective(const Model& model, const Binding& b, const Corpus& corpus,
                               std::span<const SampleInput> batch, const ObjectiveOptions& opt,
                               const Tensor* e_prompt, const RngStream& mask_root) {
  if (batch.empty()) throw Error("batch_objective: empty batch");
  Tape& tape = *b.at(0).tape;
  const auto& enc = model.config().encoder;
  const bool want_mim = opt.mim_mode != MimMode::kNone;
  const bool want_mlm =
      opt.mlm_mode != MlmMode::kNone && (opt.phase == Phase::kJoint || opt.warmup_mlm);
  const bool want_align = opt.use_align && opt.phase == Phase::kJoint;
  if (want_mim && opt.mim_mode == MimMode::kAttention && !e_prompt)
    throw Error("attention masking needs prompt features");

  BatchObjective out;
  out.image_masks.resize(batch.size());
  out.entity_masks.resize(batch.size());
  std::vector<Var> paired_terms, unpaired_terms, x_pool, y_pool;
  std::vector<double> mims(batch.size(), 0.0), mlms(batch.size(), 0.0);
  std::vector<bool> has_mlm(batch.size(), false);

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SampleRecord& rec = *batch[i].record;
    const bool paired = rec.paired && rec.report.has_value();
    RngStream img_rng = mask_root.derive(Purpose::kMask, batch[i].mask_key, 0);
    RngStream ent_rng = mask_root.derive(Purpose::kMask, batch[i].mask_key, 1);

    Var e_img = model.image_encoder.encode(b, rec.image);
    std::optional<Var> e_rep;
    const bool need_rep = paired && (want_align || (want_mim && opt.mim_mode == MimMode::kAttention) ||
                                     (want_mlm && opt.mlm_mode == MlmMode::kFull));
    if (need_rep) e_rep = model.text_encoder.encode(b, *rec.report);

    std::vector<Var> terms;
    if (want_mim) {
      TokenMask mask;
      if (batch[i].image_mask) {
        mask = *batch[i].image_mask;
      } else if (opt.mim_mode == MimMode::kAttention) {
        mask = attention_masks(e_img.value(), paired ? &e_rep->value() : nullptr, *e_prompt,
                               opt.masks, img_rng)
                   .final;
      } else {
        mask = random_mask(enc.n_patches(), opt.masks.lambda2, img_rng);
      }
      const Tensor target = mim_targets(rec.image, enc.patch_size, model.config().normalize_targets);
      Var y = model.image_decoder.decode(b, model.image_decoder.mask_input(b, e_img, mask));
      auto ml = loss_mim(y, target, mask);
      out.degenerate_mim += ml.degenerate;
      mims[i] = ml.loss.value().item();
      terms.push_back(ml.loss);
      out.image_masks[i] = std::move(mask);
    }
    if (want_mlm && paired) {
      const TokenSeq& report = *rec.report;
      const std::size_t n = report.size();
      MaskedLoss ml;
      if (opt.mlm_mode == MlmMode::kEntity) {
        TokenMask ent;
        if (batch[i].entity_mask) {
          ent = *batch[i].entity_mask;
        } else {
          const auto ents = recognize_entities(report, corpus.lexicon, corpus.vocab);
          ent = entity_mask(ents, n, opt.masks.lambda3, ent_rng);
        }
        if (ent.empty()) {
          ml = {tape.constant(Tensor::scalar(0.0)), true};
        } else {
          // The encoder input hides the masked entities too, otherwise the
          // bidirectional encoder would leak them into the other positions.
          TokenSeq hidden = report;
          for (auto j : ent.masked) hidden.ids[j] = kMaskId;
          Var e_hidden = model.text_encoder.encode(b, hidden);
          Var input = model.text_decoder.mask_input(b, e_hidden, ent);
          Var logits = model.text_decoder.decode(b, input, combine_masks(causal_mask(n), ent), e_img);
          ml = loss_mlm(logits, report, ent.masked);
        }
        out.entity_masks[i] = std::move(ent);
      } else {
        TokenSeq next = report;
        std::vector<std::size_t> positions;
        for (std::size_t t = 0; t + 1 < n; ++t) {
          next.ids[t] = report.ids[t + 1];
          if (report.pad_mask[t + 1]) positions.push_back(t);
        }
        next.ids[n - 1] = kPadId;
        Var logits = model.text_decoder.decode(b, *e_rep, causal_mask(n), e_img);
        ml = loss_mlm(logits, next, positions);
      }
      out.degenerate_mlm += ml.degenerate;
      mlms[i] = ml.loss.value().item();
      has_mlm[i] = true;
      terms.push_back(ml.loss);
    }
    if (want_align && paired) {
      x_pool.push_back(pool_global(e_img));
      y_pool.push_back(pool_global(*e_rep, rec.report->pad_mask));
    }
    if (!terms.empty()) {
      Var s = terms[0];
      for (std::size_t t = 1; t < terms.size(); ++t) s = ops::add(s, terms[t]);
      (paired ? paired_terms : unpaired_terms).push_back(s);
    }
  }

  std::optional<Var> align;
  if (!x_pool.empty()) {
    align = model.align_loss(b, ops::stack_rows(x_pool), ops::stack_rows(y_pool));
    out.align = align->value().item();
  }

  auto mean_of = [&](const std::vector<Var>& v) {
    Var s = v[0];
    for (std::size_t t = 1; t < v.size(); ++t) s = ops::add(s, v[t]);
    return v.size() == 1 ? s : ops::scale(s, 1.0 / static_cast<double>(v.size()));
  };
  std::vector<Var> parts;
  if (align) parts.push_back(*align);
  if (!paired_terms.empty()) parts.push_back(mean_of(paired_terms));
  if (!unpaired_terms.empty()) parts.push_back(mean_of(unpaired_terms));
  if (parts.empty()) {
    out.total = tape.constant(Tensor::scalar(0.0));
  } else {
    out.total = parts[0];
    for (std::size_t t = 1; t < parts.size(); ++t) out.total = ops::add(out.total, parts[t]);
  }

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SampleRecord& rec = *batch[i].record;
    const bool paired = rec.paired && rec.report.has_value();
    if (paired && out.align && has_mlm[i] && want_mim) {
      out.bundles.push_back(compose_losses(out.align, mims[i], mlms[i], true));
    } else if (!paired) {
      out.bundles.push_back(compose_losses(std::nullopt, mims[i], std::nullopt, false));
    } else {
      // Warm-up or an ablation with some objectives switched off.
      LossBundle lb;
      lb.paired = true;
      lb.align = out.align;
      lb.mim = mims[i];
      if (has_mlm[i]) lb.mlm = mlms[i];
      lb.total = lb.align.value_or(0.0) + lb.mim + lb.mlm.value_or(0.0);
      out.bundles.push_back(lb);
    }
  }
  return out;
}

std::string csv_header() { return "step,phase,loss_align,loss_mim,loss_mlm,loss_total,lr"; }

std::string csv_row(const StepLog& l) {
  auto num = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", *v);
    return std::string(buf);
  };
  return std::to_string(l.step) + "," + to_string(l.phase) + "," + num(l.align) + "," +
         num(l.mim) + "," + num(l.mlm) + "," + num(l.total) + "," + num(l.lr);
}

namespace {

ModelConfig resolved_model(const TrainConfig& cfg, const Corpus& corpus) {
  ModelConfig m = cfg.model;
  m.encoder.vocab_size = corpus.vocab.size();
  m.init_seed = cfg.seed;
  return m;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, const Corpus& corpus) : cfg_(std::move(cfg)), corpus_(corpus) {
  cfg_.validate();
  model_ = std::make_unique<Model>(resolved_model(cfg_, corpus_));
  for (const auto& p : model_->params.values()) velocity_.emplace_back(p.shape());
}

Trainer::Trainer(TrainConfig cfg, const Corpus& corpus, const std::filesystem::path& checkpoint)
    : cfg_(std::move(cfg)), corpus_(corpus) {
  cfg_.validate();
  NamedTensors extra;
  model_ = Model::load(checkpoint, &extra);
  if (model_->config().encoder.vocab_size != corpus_.vocab.size())
    throw Error("checkpoint vocabulary size does not match the corpus: " + checkpoint.string());
  for (const auto& p : model_->params.values()) velocity_.emplace_back(p.shape());
  for (auto& [name, t] : extra) {
    if (name == "meta/step") {
      step_ = static_cast<std::size_t>(t.item());
    } else if (name.rfind("optim/velocity/", 0) == 0) {
      const auto idx = model_->params.find(name.substr(15));
      if (!idx || velocity_[*idx].shape() != t.shape())
        throw Error("checkpoint velocity entry '" + name + "' does not match the model");
      velocity_[*idx] = std::move(t);
    }
  }
}

Phase Trainer::phase_of(std::size_t step) const {
  return step < cfg_.warmup_iters ? Phase::kWarmup : Phase::kJoint;
}

StepLog Trainer::step() {
  if (finished()) throw Error("training already finished");
  const Phase phase = phase_of(step_);
  const RngStream root(cfg_.seed);
  RngStream batch_rng = root.derive(Purpose::kBatch, step_);
  const auto idx = build_batch(corpus_, cfg_.batch_size, cfg_.unpaired_fraction, batch_rng);

  std::vector<SampleInput> batch(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    batch[i].record = &corpus_.records[idx[i]];
    batch[i].mask_key = step_ * 1024 + i;
  }
  ObjectiveOptions opt{phase, cfg_.mim_mode, cfg_.mlm_mode, cfg_.use_align, cfg_.warmup_mlm,
                       cfg_.mask_config};
  std::optional<Tensor> e_prompt;
  if (cfg_.mim_mode == MimMode::kAttention) e_prompt = prompt_features(*model_, corpus_.vocab);

  Tape tape;
  const Binding b = bind(tape, model_->params);
  auto obj = batch_objective(*model_, b, corpus_, batch, opt, e_prompt ? &*e_prompt : nullptr, root);
  if (!obj.total.value().all_finite()) {
    throw Error("non-finite loss at step " + std::to_string(step_ + 1));
  }
  tape.backward(obj.total);
  std::vector<Tensor> grads;
  grads.reserve(b.size());
  for (const auto& v : b) grads.push_back(tape.grad(v));
  if (phase == Phase::kWarmup || !model_->config().learn_temperature) {
    grads[model_->log_temperature] = Tensor(grads[model_->log_temperature].shape());
  }
  sgd_step(model_->params.values(), grads, cfg_.lr, cfg_.momentum, velocity_);
  ++step_;

  StepLog log;
  log.step = step_;
  log.phase = phase;
  log.align = obj.align;
  double mim = 0.0, mlm = 0.0;
  std::size_t n_mlm = 0;
  for (const auto& bd : obj.bundles) {
    mim += bd.mim;
    if (bd.mlm) {
      mlm += *bd.mlm;
      ++n_mlm;
    }
  }
  if (cfg_.mim_mode != MimMode::kNone) log.mim = mim / static_cast<double>(obj.bundles.size());
  if (n_mlm) log.mlm = mlm / static_cast<double>(n_mlm);
  log.total = obj.total.value().item();
  log.lr = cfg_.lr;
  return log;
}

void Trainer::save(const std::filesystem::path& path) const {
  NamedTensors extra;
  for (std::size_t i = 0; i < velocity_.size(); ++i)
    extra.emplace_back("optim/velocity/" + model_->params.name(i), velocity_[i]);
  extra.emplace_back("meta/step", Tensor::scalar(static_cast<double>(step_)));
  model_->save(path, extra);
}

RunResult run(const TrainConfig& cfg, const Corpus& corpus, const std::filesystem::path& out_dir,
              const std::optional<std::filesystem::path>& resume,
              const std::function<void(const StepLog&)>& on_step) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create output directory " + out_dir.string() + ": " + ec.message());
  auto trainer = resume ? std::make_unique<Trainer>(cfg, corpus, *resume)
                        : std::make_unique<Trainer>(cfg, corpus);
  RunResult res;
  res.metrics_csv = out_dir / "metrics.csv";
  std::ofstream csv(res.metrics_csv, std::ios::trunc);
  if (!csv) throw Error("cannot write " + res.metrics_csv.string());
  csv << csv_header() << '\n';
  res.files.push_back(res.metrics_csv);
  while (!trainer->finished()) {
    StepLog log = trainer->step();
    csv << csv_row(log) << '\n';
    if (on_step) on_step(log);
    res.log.push_back(log);
    if (cfg.checkpoint_every && log.step % cfg.checkpoint_every == 0 && !trainer->finished()) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06zu.mmck", log.step);
      trainer->save(out_dir / name);
      res.files.push_back(out_dir / name);
      res.files.push_back(out_dir / (std::string(name) + ".json"));
    }
  }
  csv.flush();
  if (!csv) throw Error("failed writing " + res.metrics_csv.string());
  res.checkpoint = out_dir / "model.mmck";
  trainer->save(res.checkpoint);
  res.files.push_back(res.checkpoint);
  res.files.push_back(out_dir / "model.mmck.json");
  return res;
}

}  // namespace mmclip
