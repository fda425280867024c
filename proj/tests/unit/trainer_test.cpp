#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mmclip/trainer.hpp"

using namespace mmclip;

namespace fs = std::filesystem;

namespace {

const Corpus& small_corpus() {
  static const Corpus c = [] {
    CorpusSpec s;
    s.n_paired = 24;
    s.n_unpaired = 8;
    s.seed = 3;
    s.prevalence = 0.3;
    return generate_corpus(s);
  }();
  return c;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.model.encoder.embed_dim = 16;
  cfg.model.encoder.n_layers = 1;
  cfg.model.encoder.n_heads = 2;
  cfg.model.decoder.decoder_dim = 16;
  cfg.model.decoder.image_decoder_layers = 1;
  cfg.model.decoder.text_decoder_layers = 1;
  cfg.model.decoder.n_heads = 2;
  cfg.batch_size = 4;
  cfg.warmup_iters = 2;
  cfg.total_iters = 6;
  cfg.seed = 11;
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "mmclip_trainer_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> trace(const std::vector<StepLog>& log) {
  std::vector<std::string> out;
  for (const auto& l : log) out.push_back(csv_row(l));
  return out;
}

}  // namespace

TEST(BuildBatch, MixFollowsRounding) {
  const auto& c = small_corpus();
  RngStream rng(1);
  auto all_paired = build_batch(c, 8, 0.0, rng);
  for (auto i : all_paired) EXPECT_TRUE(c.records[i].paired);
  auto all_unpaired = build_batch(c, 8, 1.0, rng);
  for (auto i : all_unpaired) EXPECT_FALSE(c.records[i].paired);
  const auto mixed = build_batch(c, 8, 0.25, rng);
  ASSERT_EQ(mixed.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(c.records[mixed[i]].paired, i >= 2);
  std::vector<std::size_t> sorted = mixed;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
}

TEST(BuildBatch, DeterministicAndGuarded) {
  const auto& c = small_corpus();
  RngStream a(9), b(9);
  EXPECT_EQ(build_batch(c, 6, 0.5, a), build_batch(c, 6, 0.5, b));
  RngStream r(1);
  EXPECT_THROW(build_batch(c, 12, 1.0, r), Error);
  EXPECT_THROW(build_batch(Corpus{}, 4, 0.0, r), Error);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig cfg = small_config();
  cfg.mim_mode = MimMode::kRandom;
  cfg.mlm_mode = MlmMode::kNone;
  cfg.mask_config.lambda3 = 0.4;
  const auto back = train_config_from_json(train_config_to_json(cfg));
  EXPECT_EQ(train_config_to_json(back), train_config_to_json(cfg));
  EXPECT_THROW(train_config_from_json("{\"warmup_iters\": 10, \"total_iters\": 5}"), Error);
  EXPECT_THROW(train_config_from_json("{\"batch_size\": 0}"), Error);
  EXPECT_THROW(train_config_from_json("{\"mim_mode\": \"sometimes\"}"), Error);
  EXPECT_THROW(train_config_from_json("[1,"), Error);
}

TEST(Modes, StringsRoundTrip) {
  for (auto m : {MimMode::kAttention, MimMode::kRandom, MimMode::kNone})
    EXPECT_EQ(mim_mode_from_string(to_string(m)), m);
  for (auto m : {MlmMode::kEntity, MlmMode::kFull, MlmMode::kNone})
    EXPECT_EQ(mlm_mode_from_string(to_string(m)), m);
}

TEST(Trainer, WarmupHasNoAlignAndKeepsTemperature) {
  TrainConfig cfg = small_config();
  cfg.model.learn_temperature = true;
  Trainer tr(cfg, small_corpus());
  const double t0 = tr.model().temperature();
  for (std::size_t s = 0; s < cfg.warmup_iters; ++s) {
    const auto l = tr.step();
    EXPECT_EQ(l.phase, Phase::kWarmup);
    EXPECT_FALSE(l.align.has_value());
    EXPECT_TRUE(l.mim.has_value());
    EXPECT_EQ(tr.model().temperature(), t0);
  }
  const auto l = tr.step();
  EXPECT_EQ(l.phase, Phase::kJoint);
  ASSERT_TRUE(l.align.has_value());
  EXPECT_NE(tr.model().temperature(), t0);
}

TEST(Trainer, FixedTemperatureNeverMoves) {
  TrainConfig cfg = small_config();
  Trainer tr(cfg, small_corpus());
  const double lt = tr.model().params.value(tr.model().log_temperature).item();
  while (!tr.finished()) tr.step();
  EXPECT_EQ(tr.model().params.value(tr.model().log_temperature).item(), lt);
  EXPECT_THROW(tr.step(), Error);
}

TEST(BatchObjective, UnpairedOnlyBatchIsolatesTextSide) {
  TrainConfig cfg = small_config();
  cfg.model.learn_temperature = true;
  Trainer tr(cfg, small_corpus());
  const Model& m = tr.model();
  const auto& c = small_corpus();
  std::vector<SampleInput> batch;
  for (std::size_t i = 0; i < c.records.size(); ++i)
    if (!c.records[i].paired && batch.size() < 3) batch.push_back({&c.records[i], {}, {}, i});
  ASSERT_EQ(batch.size(), 3u);
  const Tensor e_prompt = prompt_features(m, c.vocab);
  ObjectiveOptions opt;
  Tape tape;
  const Binding b = bind(tape, m.params);
  auto obj = batch_objective(m, b, c, batch, opt, &e_prompt, RngStream(5));
  EXPECT_FALSE(obj.align.has_value());
  double mean_mim = 0.0;
  for (const auto& bd : obj.bundles) {
    EXPECT_FALSE(bd.paired);
    EXPECT_FALSE(bd.align.has_value());
    EXPECT_FALSE(bd.mlm.has_value());
    EXPECT_EQ(bd.total, bd.mim);
    mean_mim += bd.mim / 3.0;
  }
  EXPECT_NEAR(obj.total.value().item(), mean_mim, 1e-12);
  tape.backward(obj.total);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& name = m.params.name(i);
    if (name.rfind("text_decoder", 0) == 0 || name == "log_temperature") {
      const Tensor g = tape.grad(b[i]);
      EXPECT_EQ(g, Tensor(g.shape())) << name;
    }
  }
}

TEST(BatchObjective, PairedSampleCarriesAllThreeTerms) {
  TrainConfig cfg = small_config();
  Trainer tr(cfg, small_corpus());
  const Model& m = tr.model();
  const auto& c = small_corpus();
  std::vector<SampleInput> batch{{&c.records[0], {}, {}, 0}, {&c.records[1], {}, {}, 1}};
  const Tensor e_prompt = prompt_features(m, c.vocab);
  Tape tape;
  const Binding b = bind(tape, m.params);
  auto obj = batch_objective(m, b, c, batch, ObjectiveOptions{}, &e_prompt, RngStream(5));
  ASSERT_TRUE(obj.align.has_value());
  double mean_pair = 0.0;
  for (const auto& bd : obj.bundles) {
    ASSERT_TRUE(bd.align && bd.mlm);
    mean_pair += (bd.mim + *bd.mlm) / 2.0;
    EXPECT_EQ(obj.image_masks.size(), 2u);
  }
  EXPECT_NEAR(obj.total.value().item(), *obj.align + mean_pair, 1e-12);
}

TEST(Trainer, SameSeedSameTrace) {
  const auto& c = small_corpus();
  const TrainConfig cfg = small_config();
  const auto a = run(cfg, c, fresh_dir("trace_a")).log;
  const auto b = run(cfg, c, fresh_dir("trace_b")).log;
  ASSERT_EQ(a.size(), cfg.total_iters);
  EXPECT_EQ(trace(a), trace(b));
  TrainConfig other = cfg;
  other.seed = 12;
  EXPECT_NE(trace(run(other, c, fresh_dir("trace_c")).log), trace(a));
}

TEST(Run, ZeroIterationsWritesInitialCheckpoint) {
  TrainConfig cfg = small_config();
  cfg.warmup_iters = 0;
  cfg.total_iters = 0;
  const auto dir = fresh_dir("zero");
  const auto r = run(cfg, small_corpus(), dir);
  EXPECT_TRUE(r.log.empty());
  ASSERT_TRUE(fs::exists(r.checkpoint));
  const auto fresh = Model(Trainer(cfg, small_corpus()).model().config());
  const auto loaded = Model::load(r.checkpoint);
  for (std::size_t i = 0; i < fresh.params.size(); ++i)
    EXPECT_EQ(loaded->params.value(i), fresh.params.value(i)) << fresh.params.name(i);
  std::ifstream csv(r.metrics_csv);
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, csv_header());
  EXPECT_FALSE(static_cast<bool>(std::getline(csv, line)));
}

TEST(Run, ShortRunLowersTheLoss) {
  TrainConfig cfg = small_config();
  cfg.model.encoder.embed_dim = 32;
  cfg.model.decoder.decoder_dim = 32;
  cfg.warmup_iters = 0;
  cfg.total_iters = 50;
  cfg.mim_mode = MimMode::kRandom;
  cfg.mlm_mode = MlmMode::kNone;
  cfg.lr = 1e-3;
  const auto r = run(cfg, small_corpus(), fresh_dir("short"));
  ASSERT_EQ(r.log.size(), 50u);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += r.log[i].total / 10.0;
    last += r.log[40 + i].total / 10.0;
  }
  EXPECT_LT(last, first);
}

TEST(Run, ResumeReproducesTheTrace) {
  TrainConfig cfg = small_config();
  cfg.total_iters = 8;
  cfg.checkpoint_every = 4;
  const auto& c = small_corpus();
  const auto dir = fresh_dir("resume");
  const auto full = run(cfg, c, dir);
  const auto ckpt = dir / "ckpt_000004.mmck";
  ASSERT_TRUE(fs::exists(ckpt));
  const auto resumed = run(cfg, c, fresh_dir("resume_b"), ckpt);
  ASSERT_EQ(resumed.log.size(), 4u);
  const auto tail = std::vector<StepLog>(full.log.begin() + 4, full.log.end());
  EXPECT_EQ(trace(resumed.log), trace(tail));
  const auto a = Model::load(full.checkpoint);
  const auto b = Model::load(resumed.checkpoint);
  for (std::size_t i = 0; i < a->params.size(); ++i) EXPECT_EQ(a->params.value(i), b->params.value(i));
}

TEST(Run, ResumeRejectsForeignVocabulary) {
  TrainConfig cfg = small_config();
  cfg.total_iters = 0;
  cfg.warmup_iters = 0;
  const auto r = run(cfg, small_corpus(), fresh_dir("foreign"));
  Corpus other = small_corpus();
  other.vocab = Vocabulary::from_words({"edema"});
  EXPECT_THROW(Trainer(cfg, other, r.checkpoint), Error);
}

TEST(Csv, RowLeavesAbsentLossesEmpty) {
  StepLog l;
  l.step = 3;
  l.phase = Phase::kWarmup;
  l.mim = 0.5;
  l.total = 0.5;
  l.lr = 5e-5;
  EXPECT_EQ(csv_row(l), "3,warmup,,0.5,,0.5,5e-05");
}
