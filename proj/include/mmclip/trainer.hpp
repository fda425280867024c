#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmclip/datagen.hpp"
#include "mmclip/model.hpp"

namespace mmclip {

enum class Phase { kWarmup, kJoint };
enum class MimMode { kAttention, kRandom, kNone };
enum class MlmMode { kEntity, kFull, kNone };

std::string to_string(Phase p);
std::string to_string(MimMode m);
std::string to_string(MlmMode m);
MimMode mim_mode_from_string(const std::string& s);
MlmMode mlm_mode_from_string(const std::string& s);

struct TrainConfig {
  double lr = 5e-5;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::size_t warmup_iters = 300;
  std::size_t total_iters = 1500;  // warmup included
  MaskConfig mask_config;
  std::uint64_t seed = 0;
  double unpaired_fraction = 0.25;
  bool warmup_mlm = true;
  bool use_align = true;
  MimMode mim_mode = MimMode::kAttention;
  MlmMode mlm_mode = MlmMode::kEntity;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  ModelConfig model;                 // vocab_size and init_seed are filled by run()

  void validate() const;
};

TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);

/// Indices of one batch: round(f * B) unpaired and the rest paired, each group
/// drawn without replacement from its pool, unpaired first.
std::vector<std::size_t> build_batch(const Corpus& corpus, std::size_t batch_size,
                                     double unpaired_fraction, RngStream& rng);

/// Token features of every disease prompt stacked by rows; detached.
Tensor prompt_features(const Model& model, const Vocabulary& vocab);

struct ObjectiveOptions {
  Phase phase = Phase::kJoint;
  MimMode mim_mode = MimMode::kAttention;
  MlmMode mlm_mode = MlmMode::kEntity;
  bool use_align = true;
  bool warmup_mlm = true;
  MaskConfig masks;
};

/// One sample of a batch. Masks left empty are generated from detached
/// features with the sample's sub-streams of `mask_root`.
struct SampleInput {
  const SampleRecord* record = nullptr;
  std::optional<TokenMask> image_mask;
  std::optional<TokenMask> entity_mask;
  std::uint64_t mask_key = 0;
};

struct BatchObjective {
  Var total;
  std::vector<LossBundle> bundles;
  std::optional<double> align;
  std::vector<TokenMask> image_masks;           // per sample (empty when MIM is off)
  std::vector<std::optional<TokenMask>> entity_masks;
  std::size_t degenerate_mim = 0;
  std::size_t degenerate_mlm = 0;
};

/// Records align + mean over paired (mim + mlm) + mean over unpaired mim on
/// the tape of `b`, honouring the phase and the enabled objectives.
BatchObjective batch_objective(const Model& model, const Binding& b, const Corpus& corpus,
                               std::span<const SampleInput> batch, const ObjectiveOptions& opt,
                               const Tensor* e_prompt, const RngStream& mask_root);

struct StepLog {
  std::size_t step = 0;  // 1-based, after the update
  Phase phase = Phase::kJoint;
  std::optional<double> align;
  std::optional<double> mim;
  std::optional<double> mlm;
  double total = 0.0;
  double lr = 0.0;
};

std::string csv_header();
std::string csv_row(const StepLog& log);

/// Optimiser state over a model.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const Corpus& corpus);
  /// Resumes from a checkpoint written by save().
  Trainer(TrainConfig cfg, const Corpus& corpus, const std::filesystem::path& checkpoint);

  Phase phase_of(std::size_t step) const;
  /// One SGD update; returns the step's losses.
  StepLog step();
  std::size_t steps_done() const { return step_; }
  bool finished() const { return step_ >= cfg_.total_iters; }

  Model& model() { return *model_; }
  const Model& model() const { return *model_; }
  const TrainConfig& config() const { return cfg_; }
  /// Model parameters plus optimiser velocity and step count.
  void save(const std::filesystem::path& path) const;

 private:
  TrainConfig cfg_;
  const Corpus& corpus_;
  std::unique_ptr<Model> model_;
  std::vector<Tensor> velocity_;
  std::size_t step_ = 0;
};

struct RunResult {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics_csv;
  std::vector<std::filesystem::path> files;  // everything written, in order
  std::vector<StepLog> log;
};

/// Runs the remaining steps, writes metrics.csv, periodic checkpoints and
/// model.mmck under `out_dir`.
RunResult run(const TrainConfig& cfg, const Corpus& corpus, const std::filesystem::path& out_dir,
              const std::optional<std::filesystem::path>& resume = {},
              const std::function<void(const StepLog&)>& on_step = {});

}  // namespace mmclip
