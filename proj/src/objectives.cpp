#include "mmclip/objectives.hpp"

#include <cmath>

namespace mmclip {

void DecoderConfig::validate() const {
  if (image_decoder_layers == 0 || text_decoder_layers == 0 || decoder_dim == 0 || n_heads == 0)
    throw Error("decoder sizes must be positive");
  if (decoder_dim % n_heads != 0) {
    throw Error("decoder_dim " + std::to_string(decoder_dim) + " is not divisible by n_heads " +
                std::to_string(n_heads));
  }
}

LossBundle compose_losses(std::optional<double> align, double mim, std::optional<double> mlm,
                          bool paired) {
  LossBundle b;
  b.paired = paired;
  b.mim = mim;
  if (paired) {
    if (!align || !mlm) throw Error("paired loss needs align, mim and mlm terms");
    b.align = align;
    b.mlm = mlm;
    b.total = *align + mim + *mlm;
  } else {
    if (align || mlm) throw Error("unpaired loss takes the reconstruction term only");
    b.total = mim;
  }
  return b;
}

double batch_total(std::span<const LossBundle> bundles) {
  double paired = 0.0, unpaired = 0.0;
  std::size_t np = 0, nu = 0;
  for (const auto& b : bundles) {
    if (b.paired) {
      paired += b.total;
      ++np;
    } else {
      unpaired += b.total;
      ++nu;
    }
  }
  double total = 0.0;
  if (np) total += paired / static_cast<double>(np);
  if (nu) total += unpaired / static_cast<double>(nu);
  return total;
}

namespace {

void check_align_inputs(Var x, Var y) {
  const Tensor& xv = x.value();
  const Tensor& yv = y.value();
  if (xv.rank() != 2 || yv.rank() != 2 || xv.shape() != yv.shape() || xv.rows() == 0) {
    throw ShapeError("loss_align expects two B x C matrices, got " + shape_str(xv.shape()) +
                     " and " + shape_str(yv.shape()));
  }
  if (!xv.all_finite() || !yv.all_finite()) throw Error("loss_align: non-finite features");
}

Var symmetric_ce(Var logits) {
  return ops::add(ops::diag_cross_entropy(logits),
                  ops::diag_cross_entropy(ops::transpose(logits)));
}

}  // namespace

Var loss_align(Var x, Var y, double sigma) {
  check_align_inputs(x, y);
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw Error("temperature must be positive");
  return symmetric_ce(ops::scale(ops::matmul_nt(x, y), 1.0 / sigma));
}

Var loss_align(Var x, Var y, Var log_sigma) {
  check_align_inputs(x, y);
  if (log_sigma.value().size() != 1 || !log_sigma.value().all_finite())
    throw Error("log temperature must be a finite scalar");
  Var inv_sigma = ops::exp(ops::scale(log_sigma, -1.0));
  return symmetric_ce(ops::mul_scalar(ops::matmul_nt(x, y), inv_sigma));
}

MaskedLoss loss_mim(Var y_mim, const Tensor& target_patches, const TokenMask& mask) {
  if (mask.n_tokens != y_mim.value().rows()) {
    throw ShapeError("mask over " + std::to_string(mask.n_tokens) + " patches applied to " +
                     shape_str(y_mim.shape()));
  }
  return {ops::masked_mse(y_mim, target_patches, mask.masked), mask.empty()};
}

MaskedLoss loss_mlm(Var logits, const TokenSeq& targets, std::span<const std::size_t> positions) {
  return {ops::nll_rows(logits, targets.ids, positions), positions.empty()};
}

Tensor mim_targets(const Tensor& image, std::size_t patch_size, bool normalize) {
  Tensor p = patchify(image, patch_size);
  if (!normalize) return p;
  const double n = static_cast<double>(p.cols());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto r = p.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + 1e-6);
    for (double& v : r) v = (v - mean) * inv;
  }
  return p;
}

namespace {

Tensor init_table(Shape shape, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.truncated_normal(kInitStd);
  return t;
}

}  // namespace

ImageDecoder::ImageDecoder(const EncoderConfig& enc, const DecoderConfig& cfg,
                           ParamStore& params, RngStream& rng, const std::string& prefix)
    : n_patches_(enc.n_patches()) {
  cfg.validate();
  const std::size_t c = enc.embed_dim, d = cfg.decoder_dim;
  mask_embedding = params.add(prefix + ".mask_embedding", init_table({c}, rng));
  pos_embed = params.add(prefix + ".pos_embed", init_table({n_patches_, c}, rng));
  input_proj = Linear::create(params, prefix + ".input_proj", c, d, rng);
  for (std::size_t l = 0; l < cfg.image_decoder_layers; ++l)
    blocks.push_back(EncoderBlock::create(params, prefix + ".blocks." + std::to_string(l), d,
                                          cfg.n_heads, rng));
  ln_final = LayerNorm::create(params, prefix + ".ln_final", d);
  head = Linear::create(params, prefix + ".head", d, enc.patch_dim(), rng);
}

Var ImageDecoder::mask_input(const Binding& b, Var e_img, const TokenMask& mask) const {
  return apply_image_mask(e_img, mask, b[mask_embedding], b[pos_embed]);
}

Var ImageDecoder::decode(const Binding& b, Var mim_input) const {
  if (mim_input.value().rank() != 2 || mim_input.value().rows() != n_patches_) {
    throw ShapeError("image decoder expects " + std::to_string(n_patches_) + " rows, got " +
                     shape_str(mim_input.shape()));
  }
  Var x = input_proj.forward(b, mim_input);
  for (const auto& blk : blocks) x = blk.forward(b, x);
  return head.forward(b, ln_final.forward(b, x));
}

TextDecoder::TextDecoder(const EncoderConfig& enc, const DecoderConfig& cfg, ParamStore& params,
                         RngStream& rng, const std::string& prefix)
    : max_len_(enc.max_text_len) {
  cfg.validate();
  if (enc.vocab_size == 0) throw Error("text decoder needs a vocabulary size");
  const std::size_t c = enc.embed_dim, d = cfg.decoder_dim;
  mask_embedding = params.add(prefix + ".mask_embedding", init_table({c}, rng));
  pos_embed = params.add(prefix + ".pos_embed", init_table({max_len_, c}, rng));
  input_proj = Linear::create(params, prefix + ".input_proj", c, d, rng);
  for (std::size_t l = 0; l < cfg.text_decoder_layers; ++l)
    blocks.push_back(DecoderBlock::create(params, prefix + ".blocks." + std::to_string(l), d, c,
                                          cfg.n_heads, rng));
  ln_final = LayerNorm::create(params, prefix + ".ln_final", d);
  head = Linear::create(params, prefix + ".head", d, enc.vocab_size, rng);
}

Var TextDecoder::mask_input(const Binding& b, Var e_report, const TokenMask& ent) const {
  return apply_text_mask(e_report, ent, b[mask_embedding], b[pos_embed]);
}

Var TextDecoder::decode(const Binding& b, Var mlm_input, const AttnMatrix& attn,
                        Var e_img) const {
  const std::size_t n = mlm_input.value().rows();
  if (mlm_input.value().rank() != 2 || n > max_len_) {
    throw ShapeError("text decoder input " + shape_str(mlm_input.shape()) +
                     " exceeds max_text_len " + std::to_string(max_len_));
  }
  if (attn.n != n) {
    throw ShapeError("attention matrix of size " + std::to_string(attn.n) + " for " +
                     std::to_string(n) + " tokens");
  }
  Var x = input_proj.forward(b, mlm_input);
  for (const auto& blk : blocks) x = blk.forward(b, x, attn.allowed, e_img);
  return head.forward(b, ln_final.forward(b, x));
}

}  // namespace mmclip
