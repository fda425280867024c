#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmclip/autograd.hpp"
#include "mmclip/rng.hpp"

namespace mmclip {

struct MaskConfig {
  double lambda1 = 0.7;   // per-strategy image mask proportion
  double lambda2 = 0.75;  // final image mask proportion
  double lambda3 = 0.2;   // proportion of entity tokens masked in reports

  void validate() const;
};

enum class MaskProvenance { kReport, kPrompt, kSelf, kBlended, kRandom, kEntity };

std::string to_string(MaskProvenance p);

/// Sorted set of distinct masked positions over a sequence of n_tokens.
struct TokenMask {
  std::size_t n_tokens = 0;
  std::vector<std::size_t> masked;
  MaskProvenance provenance = MaskProvenance::kRandom;

  /// Sorts, deduplicates and range-checks `indices`.
  static TokenMask from_indices(std::size_t n_tokens, std::vector<std::size_t> indices,
                                MaskProvenance provenance);

  std::size_t size() const { return masked.size(); }
  bool empty() const { return masked.empty(); }
  bool contains(std::size_t i) const;
  std::vector<unsigned char> flags() const;
};

/// Number of positions a proportion selects: round(lambda * n), half away
/// from zero.
std::size_t proportion_count(double lambda, std::size_t n);

/// softmax(q kv^T / sqrt(C)) kv over plain tensors; nothing is recorded for
/// differentiation.
Tensor cross_attention(const Tensor& q_feats, const Tensor& kv_feats);
Tensor self_attention_feats(const Tensor& e_img);

/// Per-token score: L2 norm of each row.
std::vector<double> token_scores(const Tensor& a);

/// Indices of the round(lambda1 * N) largest token scores, ties to the lower
/// index.
TokenMask topk_mask(const Tensor& a, double lambda1,
                    MaskProvenance provenance = MaskProvenance::kSelf);
TokenMask topk_from_scores(std::span<const double> scores, double lambda1,
                           MaskProvenance provenance);

/// Set union of masks over the same sequence.
TokenMask blend_masks(std::span<const TokenMask> masks);
TokenMask blend_masks(const TokenMask& m_r, const TokenMask& m_p, const TokenMask& m_i);

/// Exactly round(lambda2 * n) positions: a random subset of m_b, or all of
/// m_b topped up uniformly from the unmasked positions when m_b is too small.
TokenMask final_mask(const TokenMask& m_b, double lambda2, RngStream& rng);

/// Uniform random mask of round(lambda * n) positions.
TokenMask random_mask(std::size_t n_tokens, double lambda, RngStream& rng);

/// Masks of every stage of the attention-guided pipeline for one image.
struct AttentionMaskSet {
  std::optional<TokenMask> report;
  TokenMask prompt;
  TokenMask self;
  TokenMask blended;
  TokenMask final;
};

/// Runs attention extraction, top-k, blending and subsetting. `e_report` is
/// null for unpaired samples, which blend prompt and self masks only.
AttentionMaskSet attention_masks(const Tensor& e_img, const Tensor* e_report,
                                 const Tensor& e_prompt, const MaskConfig& cfg, RngStream& rng);

/// Rows at masked positions become mask_embedding + positions[row]; other
/// rows pass through. Shared by the image and text paths.
Var apply_token_mask(Var features, const TokenMask& mask, Var mask_embedding, Var positions);
Var apply_image_mask(Var e_img, const TokenMask& mask, Var mask_embedding, Var positions);

}  // namespace mmclip
