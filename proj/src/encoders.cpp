#include "mmclip/encoders.hpp"

#include <algorithm>

namespace mmclip {

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw Error("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                std::to_string(patch_size));
  }
  if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0) {
    throw Error("embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                std::to_string(n_heads));
  }
  if (max_text_len < 2) throw Error("max_text_len must be at least 2");
}

Tensor patchify(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 2) throw ShapeError("patchify expects an H x W image, got " + shape_str(image.shape()));
  const std::size_t h = image.rows(), w = image.cols();
  if (patch_size == 0 || h % patch_size != 0 || w % patch_size != 0) {
    throw ShapeError("image " + shape_str(image.shape()) + " is not divisible into " +
                     std::to_string(patch_size) + "-pixel patches");
  }
  const std::size_t gh = h / patch_size, gw = w / patch_size;
  Tensor out(Shape{gh * gw, patch_size * patch_size});
  for (std::size_t pr = 0; pr < gh; ++pr)
    for (std::size_t pc = 0; pc < gw; ++pc) {
      auto row = out.row(pr * gw + pc);
      for (std::size_t y = 0; y < patch_size; ++y)
        for (std::size_t x = 0; x < patch_size; ++x)
          row[y * patch_size + x] = image(pr * patch_size + y, pc * patch_size + x);
    }
  return out;
}

Tensor unpatchify(const Tensor& patches, std::size_t height, std::size_t width,
                  std::size_t patch_size) {
  const std::size_t gw = width / patch_size;
  if (patches.rows() != (height / patch_size) * gw || patches.cols() != patch_size * patch_size) {
    throw ShapeError("unpatchify: " + shape_str(patches.shape()) + " does not tile " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  Tensor img(Shape{height, width});
  for (std::size_t i = 0; i < patches.rows(); ++i) {
    const std::size_t pr = i / gw, pc = i % gw;
    const auto row = patches.row(i);
    for (std::size_t y = 0; y < patch_size; ++y)
      for (std::size_t x = 0; x < patch_size; ++x)
        img(pr * patch_size + y, pc * patch_size + x) = row[y * patch_size + x];
  }
  return img;
}

namespace {

Tensor init_table(Shape shape, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.truncated_normal(kInitStd);
  return t;
}

}  // namespace

ImageEncoder::ImageEncoder(const EncoderConfig& cfg, ParamStore& params, RngStream& rng,
                           const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  const std::size_t c = cfg_.embed_dim;
  patch_embed = Linear::create(params, prefix + ".patch_embed", cfg_.patch_dim(), c, rng);
  pos_embed = params.add(prefix + ".pos_embed", init_table({cfg_.n_patches(), c}, rng));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l)
    blocks.push_back(EncoderBlock::create(params, prefix + ".blocks." + std::to_string(l), c,
                                          cfg_.n_heads, rng));
  ln_final = LayerNorm::create(params, prefix + ".ln_final", c);
  proj = Linear::create(params, prefix + ".proj", c, c, rng);
}

Var ImageEncoder::encode(const Binding& b, const Tensor& image) const {
  if (image.rank() != 2 || image.rows() != cfg_.image_size || image.cols() != cfg_.image_size) {
    throw ShapeError("image " + shape_str(image.shape()) + " does not match configured size " +
                     std::to_string(cfg_.image_size));
  }
  Tape& tape = *b.at(pos_embed).tape;
  Var x = tape.constant(patchify(image, cfg_.patch_size));
  x = ops::add(patch_embed.forward(b, x), b[pos_embed]);
  for (const auto& blk : blocks) x = blk.forward(b, x);
  return proj.forward(b, ln_final.forward(b, x));
}

TextEncoder::TextEncoder(const EncoderConfig& cfg, ParamStore& params, RngStream& rng,
                         const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.vocab_size == 0) throw Error("text encoder needs a vocabulary size");
  const std::size_t c = cfg_.embed_dim;
  token_embed = params.add(prefix + ".token_embed", init_table({cfg_.vocab_size, c}, rng));
  pos_embed = params.add(prefix + ".pos_embed", init_table({cfg_.max_text_len, c}, rng));
  for (std::size_t l = 0; l < cfg_.n_layers; ++l)
    blocks.push_back(EncoderBlock::create(params, prefix + ".blocks." + std::to_string(l), c,
                                          cfg_.n_heads, rng));
  ln_final = LayerNorm::create(params, prefix + ".ln_final", c);
  proj = Linear::create(params, prefix + ".proj", c, c, rng);
}

Var TextEncoder::encode(const Binding& b, const TokenSeq& tokens) const {
  const std::size_t n = tokens.size();
  if (n == 0 || tokens.pad_mask.size() != n) throw ShapeError("malformed token sequence");
  if (n > cfg_.max_text_len) {
    throw ShapeError("token sequence of length " + std::to_string(n) + " exceeds max_text_len " +
                     std::to_string(cfg_.max_text_len));
  }
  for (auto id : tokens.ids) {
    if (id >= cfg_.vocab_size) {
      throw Error("token id " + std::to_string(id) + " is outside the vocabulary of size " +
                  std::to_string(cfg_.vocab_size));
    }
  }
  if (tokens.valid_count() == 0) throw Error("token sequence has no valid positions");
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  Var x = ops::add(ops::gather_rows(b[token_embed], tokens.ids),
                   ops::gather_rows(b[pos_embed], positions));
  std::vector<unsigned char> allowed;
  if (tokens.valid_count() != n) {
    allowed.resize(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) allowed[i * n + j] = tokens.pad_mask[j];
  }
  for (const auto& blk : blocks) x = blk.forward(b, x, allowed);
  return proj.forward(b, ln_final.forward(b, x));
}

Var pool_global(Var features, const std::vector<unsigned char>& valid) {
  if (std::none_of(valid.begin(), valid.end(), [](unsigned char v) { return v != 0; })) {
    throw Error("pool_global: every position is padding");
  }
  return ops::l2_normalize(ops::mean_rows(features, valid));
}

Var pool_global(Var features) {
  return pool_global(features, std::vector<unsigned char>(features.value().rows(), 1));
}

Tensor pool_global(const Tensor& features, const std::vector<unsigned char>& valid) {
  Tape tape;
  return pool_global(tape.constant_ref(features), valid).value();
}

}  // namespace mmclip
