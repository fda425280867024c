#include "mmclip/attmim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mmclip {

void MaskConfig::validate() const {
  for (double v : {lambda1, lambda2, lambda3}) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("mask proportions must lie in [0, 1]");
  }
}

std::string to_string(MaskProvenance p) {
  switch (p) {
    case MaskProvenance::kReport: return "report";
    case MaskProvenance::kPrompt: return "prompt";
    case MaskProvenance::kSelf: return "self";
    case MaskProvenance::kBlended: return "blended";
    case MaskProvenance::kRandom: return "random";
    case MaskProvenance::kEntity: return "entity";
  }
  return "unknown";
}

TokenMask TokenMask::from_indices(std::size_t n_tokens, std::vector<std::size_t> indices,
                                  MaskProvenance provenance) {
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  if (!indices.empty() && indices.back() >= n_tokens) {
    throw Error("mask index " + std::to_string(indices.back()) + " out of range for " +
                std::to_string(n_tokens) + " tokens");
  }
  return TokenMask{n_tokens, std::move(indices), provenance};
}

bool TokenMask::contains(std::size_t i) const {
  return std::binary_search(masked.begin(), masked.end(), i);
}

std::vector<unsigned char> TokenMask::flags() const {
  std::vector<unsigned char> f(n_tokens, 0);
  for (auto i : masked) f[i] = 1;
  return f;
}

std::size_t proportion_count(double lambda, std::size_t n) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("proportion " + std::to_string(lambda) + " outside [0, 1]");
  return static_cast<std::size_t>(std::llround(lambda * static_cast<double>(n)));
}

Tensor cross_attention(const Tensor& q_feats, const Tensor& kv_feats) {
  if (q_feats.rank() != 2 || kv_feats.rank() != 2 || q_feats.cols() != kv_feats.cols()) {
    throw ShapeError("cross_attention channel mismatch: " + shape_str(q_feats.shape()) + " vs " +
                     shape_str(kv_feats.shape()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(kv_feats.cols()));
  return matmul(softmax_rows(matmul_nt(q_feats, kv_feats), scale), kv_feats);
}

Tensor self_attention_feats(const Tensor& e_img) { return cross_attention(e_img, e_img); }

std::vector<double> token_scores(const Tensor& a) {
  std::vector<double> s(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double acc = 0.0;
    for (double v : a.row(i)) acc += v * v;
    s[i] = std::sqrt(acc);
  }
  return s;
}

TokenMask topk_from_scores(std::span<const double> scores, double lambda1,
                           MaskProvenance provenance) {
  if (!(lambda1 >= 0.0 && lambda1 <= 1.0)) throw Error("lambda1 must lie in [0, 1]");
  const std::size_t n = scores.size();
  const std::size_t k = proportion_count(lambda1, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                    });
  order.resize(k);
  return TokenMask::from_indices(n, std::move(order), provenance);
}

TokenMask topk_mask(const Tensor& a, double lambda1, MaskProvenance provenance) {
  const auto scores = token_scores(a);
  return topk_from_scores(scores, lambda1, provenance);
}

TokenMask blend_masks(std::span<const TokenMask> masks) {
  if (masks.empty()) throw Error("blend_masks needs at least one mask");
  const std::size_t n = masks[0].n_tokens;
  std::vector<std::size_t> all;
  for (const auto& m : masks) {
    if (m.n_tokens != n) {
      throw ShapeError("blend_masks length mismatch: " + std::to_string(m.n_tokens) + " vs " +
                       std::to_string(n));
    }
    all.insert(all.end(), m.masked.begin(), m.masked.end());
  }
  return TokenMask::from_indices(n, std::move(all), MaskProvenance::kBlended);
}

TokenMask blend_masks(const TokenMask& m_r, const TokenMask& m_p, const TokenMask& m_i) {
  const TokenMask all[] = {m_r, m_p, m_i};
  return blend_masks(all);
}

TokenMask final_mask(const TokenMask& m_b, double lambda2, RngStream& rng) {
  if (!(lambda2 >= 0.0 && lambda2 <= 1.0)) throw Error("lambda2 must lie in [0, 1]");
  const std::size_t n = m_b.n_tokens;
  const std::size_t k = proportion_count(lambda2, n);
  std::vector<std::size_t> chosen;
  if (m_b.size() >= k) {
    chosen = sample_without_replacement(rng, m_b.masked, k);
  } else {
    chosen = m_b.masked;
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i)
      if (!m_b.contains(i)) rest.push_back(i);
    const auto extra = sample_without_replacement(rng, rest, k - m_b.size());
    chosen.insert(chosen.end(), extra.begin(), extra.end());
  }
  return TokenMask::from_indices(n, std::move(chosen), MaskProvenance::kBlended);
}

TokenMask random_mask(std::size_t n_tokens, double lambda, RngStream& rng) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("mask proportion must lie in [0, 1]");
  std::vector<std::size_t> all(n_tokens);
  std::iota(all.begin(), all.end(), 0);
  auto picked = sample_without_replacement(rng, all, proportion_count(lambda, n_tokens));
  return TokenMask::from_indices(n_tokens, std::move(picked), MaskProvenance::kRandom);
}

AttentionMaskSet attention_masks(const Tensor& e_img, const Tensor* e_report,
                                 const Tensor& e_prompt, const MaskConfig& cfg, RngStream& rng) {
  cfg.validate();
  AttentionMaskSet out;
  std::vector<TokenMask> parts;
  if (e_report) {
    out.report = topk_mask(cross_attention(e_img, *e_report), cfg.lambda1, MaskProvenance::kReport);
    parts.push_back(*out.report);
  }
  out.prompt = topk_mask(cross_attention(e_img, e_prompt), cfg.lambda1, MaskProvenance::kPrompt);
  out.self = topk_mask(self_attention_feats(e_img), cfg.lambda1, MaskProvenance::kSelf);
  parts.push_back(out.prompt);
  parts.push_back(out.self);
  out.blended = blend_masks(parts);
  out.final = final_mask(out.blended, cfg.lambda2, rng);
  return out;
}

Var apply_token_mask(Var features, const TokenMask& mask, Var mask_embedding, Var positions) {
  const Tensor& f = features.value();
  if (f.rank() != 2 || mask.n_tokens != f.rows()) {
    throw ShapeError("mask over " + std::to_string(mask.n_tokens) + " tokens applied to " +
                     shape_str(f.shape()));
  }
  if (mask.empty()) return features;
  const std::size_t n = f.rows();
  if (positions.value().rows() < n || positions.value().cols() != f.cols()) {
    throw ShapeError("positional table " + shape_str(positions.shape()) + " does not cover " +
                     shape_str(f.shape()));
  }
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  Var pos = positions.value().rows() == n ? positions : ops::gather_rows(positions, rows);
  Var replacement = ops::add_bias(pos, mask_embedding);
  return ops::select_rows(features, replacement, mask.flags());
}

Var apply_image_mask(Var e_img, const TokenMask& mask, Var mask_embedding, Var positions) {
  return apply_token_mask(e_img, mask, mask_embedding, positions);
}

}  // namespace mmclip
