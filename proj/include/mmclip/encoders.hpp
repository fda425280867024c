#pragma once

#include <string>
#include <vector>

#include "mmclip/layers.hpp"
#include "mmclip/tokenizer.hpp"

namespace mmclip {

struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 0;
  std::size_t max_text_len = 32;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t n_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size; }
  void validate() const;
};

/// Splits an H x W image into non-overlapping patches in raster order. Row i
/// is the row-major flattening of patch i.
Tensor patchify(const Tensor& image, std::size_t patch_size);
/// Inverse of patchify.
Tensor unpatchify(const Tensor& patches, std::size_t height, std::size_t width,
                  std::size_t patch_size);

/// Patch embedding + learned positions -> pre-norm blocks -> final norm ->
/// linear projection.
class ImageEncoder {
 public:
  ImageEncoder(const EncoderConfig& cfg, ParamStore& params, RngStream& rng,
               const std::string& prefix = "image_encoder");

  /// E_img, n_patches x embed_dim.
  Var encode(const Binding& b, const Tensor& image) const;
  const EncoderConfig& config() const { return cfg_; }

  Linear patch_embed;
  std::size_t pos_embed = 0;
  std::vector<EncoderBlock> blocks;
  LayerNorm ln_final;
  Linear proj;

 private:
  EncoderConfig cfg_;
};

/// Token + position embedding -> bidirectional blocks (padding masked out as
/// keys) -> final norm -> linear projection.
class TextEncoder {
 public:
  TextEncoder(const EncoderConfig& cfg, ParamStore& params, RngStream& rng,
              const std::string& prefix = "text_encoder");

  /// n_tokens x embed_dim.
  Var encode(const Binding& b, const TokenSeq& tokens) const;
  const EncoderConfig& config() const { return cfg_; }

  std::size_t token_embed = 0;
  std::size_t pos_embed = 0;
  std::vector<EncoderBlock> blocks;
  LayerNorm ln_final;
  Linear proj;

 private:
  EncoderConfig cfg_;
};

/// Mean over valid rows, then L2-normalised. Throws on all-padding input.
Var pool_global(Var features, const std::vector<unsigned char>& valid);
Var pool_global(Var features);
Tensor pool_global(const Tensor& features, const std::vector<unsigned char>& valid);

}  // namespace mmclip
