#pragma once

#include <string>
#include <vector>

#include "mmclip/numerics.hpp"

namespace mmclip {

inline constexpr double kInitStd = 0.02;

/// y = x W + b with W stored in x out. Without a bias, y = x W.
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;
  bool has_bias = true;

  static Linear create(ParamStore& params, const std::string& name, std::size_t in,
                       std::size_t out, RngStream& rng, bool with_bias = true);
  Var forward(const Binding& b, Var x) const;
};

struct LayerNorm {
  std::size_t gamma = 0;
  std::size_t beta = 0;

  static LayerNorm create(ParamStore& params, const std::string& name, std::size_t width);
  Var forward(const Binding& b, Var x) const;
};

/// Multi-head scaled dot-product attention with learned projections. The key
/// projection has no bias: it would shift every logit of a query row equally.
struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t n_heads = 1;

  static MultiHeadAttention create(ParamStore& params, const std::string& name,
                                   std::size_t dim, std::size_t kv_dim, std::size_t n_heads,
                                   RngStream& rng);
  /// `allowed` is an optional n_q x n_kv permission mask (row-major).
  Var forward(const Binding& b, Var queries, Var keys_values,
              const std::vector<unsigned char>& allowed = {}) const;
};

/// Linear(4x) -> GELU -> Linear.
struct Mlp {
  Linear fc1, fc2;

  static Mlp create(ParamStore& params, const std::string& name, std::size_t dim,
                    RngStream& rng);
  Var forward(const Binding& b, Var x) const;
};

/// Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x)).
struct EncoderBlock {
  LayerNorm ln_attn, ln_mlp;
  MultiHeadAttention attn;
  Mlp mlp;

  static EncoderBlock create(ParamStore& params, const std::string& name, std::size_t dim,
                             std::size_t n_heads, RngStream& rng);
  Var forward(const Binding& b, Var x, const std::vector<unsigned char>& allowed = {}) const;
};

/// Pre-norm block with masked self-attention, cross-attention over a memory
/// sequence (not normalised), then the MLP.
struct DecoderBlock {
  LayerNorm ln_self, ln_cross, ln_mlp;
  MultiHeadAttention self_attn, cross_attn;
  Mlp mlp;

  static DecoderBlock create(ParamStore& params, const std::string& name, std::size_t dim,
                             std::size_t memory_dim, std::size_t n_heads, RngStream& rng);
  Var forward(const Binding& b, Var x, const std::vector<unsigned char>& self_allowed,
              Var memory) const;
};

}  // namespace mmclip
