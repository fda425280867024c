#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "mmclip/encoders.hpp"
#include "mmclip/objectives.hpp"

namespace mmclip {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  double temperature = 0.07;
  bool learn_temperature = false;
  bool normalize_targets = true;
  std::uint64_t init_seed = 0;

  void validate() const;
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

/// Every trainable component over one ParamStore. Parameters are created in a
/// fixed order from the init sub-stream of `cfg.init_seed`.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }

  /// Alignment loss with the fixed or learned temperature.
  Var align_loss(const Binding& b, Var x, Var y) const;
  double temperature() const;

  /// Pooled, unit-norm feature of an image or a text; no gradients recorded.
  Tensor image_feature(const Tensor& image) const;
  Tensor text_feature(const TokenSeq& tokens) const;

  /// Writes the parameters (plus `extra` entries) to `path` and the config to
  /// `path` + ".json".
  void save(const std::filesystem::path& path, const NamedTensors& extra = {}) const;
  /// Loads a model saved by save(). Entries that are not parameters are
  /// returned through `extra` when given.
  static std::unique_ptr<Model> load(const std::filesystem::path& path, NamedTensors* extra = nullptr);

 private:
  ModelConfig cfg_;
  RngStream init_rng_;

 public:
  ParamStore params;
  ImageEncoder image_encoder;
  TextEncoder text_encoder;
  ImageDecoder image_decoder;
  TextDecoder text_decoder;
  std::size_t log_temperature = 0;
};

}  // namespace mmclip
