#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmclip/attmim.hpp"
#include "mmclip/encoders.hpp"
#include "mmclip/entmlm.hpp"

namespace mmclip {

struct DecoderConfig {
  std::size_t image_decoder_layers = 2;
  std::size_t text_decoder_layers = 2;
  std::size_t decoder_dim = 64;
  std::size_t n_heads = 4;

  void validate() const;
};

/// Scalar losses of one sample. Paired samples carry all three terms, unpaired
/// samples only the reconstruction term.
struct LossBundle {
  std::optional<double> align;
  double mim = 0.0;
  std::optional<double> mlm;
  double total = 0.0;
  bool paired = false;
};

/// Builds a bundle and checks that the present terms match `paired`.
LossBundle compose_losses(std::optional<double> align, double mim, std::optional<double> mlm,
                          bool paired);

/// Mean total over paired bundles plus mean total over unpaired bundles.
double batch_total(std::span<const LossBundle> bundles);

/// Symmetric InfoNCE over unit-norm rows of x and y with logits x y^T / sigma.
Var loss_align(Var x, Var y, double sigma);
/// Same with a learnable temperature stored as log(sigma).
Var loss_align(Var x, Var y, Var log_sigma);

/// Differentiable reconstruction loss plus a flag set when the mask was empty
/// (the loss is then a constant 0).
struct MaskedLoss {
  Var loss;
  bool degenerate = false;
};

/// MSE over masked rows only, averaged over masked rows x patch_dim.
MaskedLoss loss_mim(Var y_mim, const Tensor& target_patches, const TokenMask& mask);

/// Mean NLL over `positions` of the target ids.
MaskedLoss loss_mlm(Var logits, const TokenSeq& targets, std::span<const std::size_t> positions);

/// Patchified image, each patch standardised to mean 0 and variance 1 when
/// `normalize` is set.
Tensor mim_targets(const Tensor& image, std::size_t patch_size, bool normalize = true);

/// Mask embedding and positions in encoder space, then an input projection,
/// pre-norm blocks, a final norm and a head to patch pixels.
class ImageDecoder {
 public:
  ImageDecoder(const EncoderConfig& enc, const DecoderConfig& cfg, ParamStore& params,
               RngStream& rng, const std::string& prefix = "image_decoder");

  Var mask_input(const Binding& b, Var e_img, const TokenMask& mask) const;
  /// n_patches x patch_dim.
  Var decode(const Binding& b, Var mim_input) const;

  std::size_t mask_embedding = 0;
  std::size_t pos_embed = 0;
  Linear input_proj;
  std::vector<EncoderBlock> blocks;
  LayerNorm ln_final;
  Linear head;

 private:
  std::size_t n_patches_;
};

/// Causal decoder with cross-attention over E_img and a vocabulary head.
class TextDecoder {
 public:
  TextDecoder(const EncoderConfig& enc, const DecoderConfig& cfg, ParamStore& params,
              RngStream& rng, const std::string& prefix = "text_decoder");

  Var mask_input(const Binding& b, Var e_report, const TokenMask& ent) const;
  /// n_tokens x vocab logits; `attn` gives the self-attention permissions.
  Var decode(const Binding& b, Var mlm_input, const AttnMatrix& attn, Var e_img) const;

  std::size_t mask_embedding = 0;
  std::size_t pos_embed = 0;
  Linear input_proj;
  std::vector<DecoderBlock> blocks;
  LayerNorm ln_final;
  Linear head;

 private:
  std::size_t max_len_;
};

}  // namespace mmclip
