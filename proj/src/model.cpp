#include "mmclip/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mmclip {

using nlohmann::json;

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw Error("temperature must be positive");
}

std::string model_config_to_json(const ModelConfig& c) {
  const json j = {
      {"image_size", c.encoder.image_size},
      {"patch_size", c.encoder.patch_size},
      {"embed_dim", c.encoder.embed_dim},
      {"n_layers", c.encoder.n_layers},
      {"n_heads", c.encoder.n_heads},
      {"vocab_size", c.encoder.vocab_size},
      {"max_text_len", c.encoder.max_text_len},
      {"image_decoder_layers", c.decoder.image_decoder_layers},
      {"text_decoder_layers", c.decoder.text_decoder_layers},
      {"decoder_dim", c.decoder.decoder_dim},
      {"decoder_heads", c.decoder.n_heads},
      {"temperature", c.temperature},
      {"learn_temperature", c.learn_temperature},
      {"normalize_targets", c.normalize_targets},
      {"init_seed", c.init_seed},
  };
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("image_size", c.encoder.image_size);
    get("patch_size", c.encoder.patch_size);
    get("embed_dim", c.encoder.embed_dim);
    get("n_layers", c.encoder.n_layers);
    get("n_heads", c.encoder.n_heads);
    get("vocab_size", c.encoder.vocab_size);
    get("max_text_len", c.encoder.max_text_len);
    get("image_decoder_layers", c.decoder.image_decoder_layers);
    get("text_decoder_layers", c.decoder.text_decoder_layers);
    get("decoder_dim", c.decoder.decoder_dim);
    get("decoder_heads", c.decoder.n_heads);
    get("temperature", c.temperature);
    get("learn_temperature", c.learn_temperature);
    get("normalize_targets", c.normalize_targets);
    get("init_seed", c.init_seed);
  } catch (const json::exception& e) {
    throw Error(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

const ModelConfig& checked(const ModelConfig& cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

Model::Model(const ModelConfig& cfg)
    : cfg_(checked(cfg)),
      init_rng_(RngStream(cfg.init_seed).derive(Purpose::kInit)),
      params(),
      image_encoder(cfg_.encoder, params, init_rng_),
      text_encoder(cfg_.encoder, params, init_rng_),
      image_decoder(cfg_.encoder, cfg_.decoder, params, init_rng_),
      text_decoder(cfg_.encoder, cfg_.decoder, params, init_rng_) {
  log_temperature = params.add("log_temperature", Tensor::scalar(std::log(cfg_.temperature)));
}

Var Model::align_loss(const Binding& b, Var x, Var y) const {
  if (cfg_.learn_temperature) return loss_align(x, y, b[log_temperature]);
  return loss_align(x, y, cfg_.temperature);
}

double Model::temperature() const {
  return cfg_.learn_temperature ? std::exp(params.value(log_temperature).item()) : cfg_.temperature;
}

Tensor Model::image_feature(const Tensor& image) const {
  Tape tape;
  const Binding b = bind(tape, params, false);
  return pool_global(image_encoder.encode(b, image)).value();
}

Tensor Model::text_feature(const TokenSeq& tokens) const {
  Tape tape;
  const Binding b = bind(tape, params, false);
  return pool_global(text_encoder.encode(b, tokens), tokens.pad_mask).value();
}

void Model::save(const std::filesystem::path& path, const NamedTensors& extra) const {
  NamedTensors entries;
  entries.reserve(params.size() + extra.size());
  for (std::size_t i = 0; i < params.size(); ++i) entries.emplace_back(params.name(i), params.value(i));
  entries.insert(entries.end(), extra.begin(), extra.end());
  write_checkpoint(path, entries);
  const auto side = path.string() + ".json";
  std::ofstream os(side, std::ios::trunc);
  if (!os) throw Error("cannot write model config: " + side);
  os << model_config_to_json(cfg_) << '\n';
}

std::unique_ptr<Model> Model::load(const std::filesystem::path& path, NamedTensors* extra) {
  const auto side = path.string() + ".json";
  std::ifstream is(side);
  if (!is) throw Error("missing model config next to checkpoint: " + side);
  std::stringstream ss;
  ss << is.rdbuf();
  auto model = std::make_unique<Model>(model_config_from_json(ss.str()));
  std::vector<bool> seen(model->params.size(), false);
  for (auto& [name, t] : read_checkpoint(path)) {
    const auto idx = model->params.find(name);
    if (!idx) {
      if (extra) extra->emplace_back(name, std::move(t));
      continue;
    }
    Tensor& dst = model->params.value(*idx);
    if (dst.shape() != t.shape()) {
      throw ShapeError("checkpoint entry '" + name + "' has shape " + shape_str(t.shape()) +
                       ", model expects " + shape_str(dst.shape()));
    }
    std::copy(t.data().begin(), t.data().end(), dst.data().begin());
    seen[*idx] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw Error("checkpoint " + path.string() + " lacks parameter '" + model->params.name(i) + "'");
  return model;
}

}  // namespace mmclip
