#include "mmclip/layers.hpp"

#include <cmath>

namespace mmclip {
namespace {

Tensor trunc_normal(Shape shape, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.truncated_normal(kInitStd);
  return t;
}

}  // namespace

Linear Linear::create(ParamStore& params, const std::string& name, std::size_t in,
                      std::size_t out, RngStream& rng, bool with_bias) {
  Linear l;
  l.weight = params.add(name + ".weight", trunc_normal({in, out}, rng));
  l.has_bias = with_bias;
  if (with_bias) l.bias = params.add(name + ".bias", Tensor(Shape{out}));
  return l;
}

Var Linear::forward(const Binding& b, Var x) const {
  Var y = ops::matmul(x, b[weight]);
  return has_bias ? ops::add_bias(y, b[bias]) : y;
}

LayerNorm LayerNorm::create(ParamStore& params, const std::string& name, std::size_t width) {
  LayerNorm ln;
  ln.gamma = params.add(name + ".gamma", Tensor(Shape{width}, 1.0));
  ln.beta = params.add(name + ".beta", Tensor(Shape{width}));
  return ln;
}

Var LayerNorm::forward(const Binding& b, Var x) const {
  return ops::layer_norm(x, b[gamma], b[beta]);
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& params, const std::string& name,
                                              std::size_t dim, std::size_t kv_dim,
                                              std::size_t n_heads, RngStream& rng) {
  if (n_heads == 0 || dim % n_heads != 0) {
    throw Error(name + ": width " + std::to_string(dim) + " not divisible by " +
                std::to_string(n_heads) + " heads");
  }
  MultiHeadAttention a;
  a.q = Linear::create(params, name + ".q", dim, dim, rng);
  a.k = Linear::create(params, name + ".k", kv_dim, dim, rng, false);
  a.v = Linear::create(params, name + ".v", kv_dim, dim, rng);
  a.o = Linear::create(params, name + ".o", dim, dim, rng);
  a.n_heads = n_heads;
  return a;
}

Var MultiHeadAttention::forward(const Binding& b, Var queries, Var keys_values,
                                const std::vector<unsigned char>& allowed) const {
  Var qp = q.forward(b, queries);
  Var kp = k.forward(b, keys_values);
  Var vp = v.forward(b, keys_values);
  const std::size_t dim = qp.value().cols();
  const std::size_t head_dim = dim / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  if (n_heads == 1) {
    Var p = ops::softmax_rows(ops::matmul_nt(qp, kp), scale, allowed);
    return o.forward(b, ops::matmul(p, vp));
  }
  std::vector<Var> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Var qh = ops::slice_cols(qp, h * head_dim, head_dim);
    Var kh = ops::slice_cols(kp, h * head_dim, head_dim);
    Var vh = ops::slice_cols(vp, h * head_dim, head_dim);
    Var p = ops::softmax_rows(ops::matmul_nt(qh, kh), scale, allowed);
    heads.push_back(ops::matmul(p, vh));
  }
  return o.forward(b, ops::concat_cols(heads));
}

Mlp Mlp::create(ParamStore& params, const std::string& name, std::size_t dim,
                RngStream& rng) {
  Mlp m;
  m.fc1 = Linear::create(params, name + ".fc1", dim, 4 * dim, rng);
  m.fc2 = Linear::create(params, name + ".fc2", 4 * dim, dim, rng);
  return m;
}

Var Mlp::forward(const Binding& b, Var x) const {
  return fc2.forward(b, ops::gelu(fc1.forward(b, x)));
}

EncoderBlock EncoderBlock::create(ParamStore& params, const std::string& name, std::size_t dim,
                                  std::size_t n_heads, RngStream& rng) {
  EncoderBlock blk;
  blk.ln_attn = LayerNorm::create(params, name + ".ln_attn", dim);
  blk.attn = MultiHeadAttention::create(params, name + ".attn", dim, dim, n_heads, rng);
  blk.ln_mlp = LayerNorm::create(params, name + ".ln_mlp", dim);
  blk.mlp = Mlp::create(params, name + ".mlp", dim, rng);
  return blk;
}

Var EncoderBlock::forward(const Binding& b, Var x,
                          const std::vector<unsigned char>& allowed) const {
  Var h = ln_attn.forward(b, x);
  x = ops::add(x, attn.forward(b, h, h, allowed));
  return ops::add(x, mlp.forward(b, ln_mlp.forward(b, x)));
}

DecoderBlock DecoderBlock::create(ParamStore& params, const std::string& name, std::size_t dim,
                                  std::size_t memory_dim, std::size_t n_heads, RngStream& rng) {
  DecoderBlock blk;
  blk.ln_self = LayerNorm::create(params, name + ".ln_self", dim);
  blk.self_attn = MultiHeadAttention::create(params, name + ".self_attn", dim, dim, n_heads, rng);
  blk.ln_cross = LayerNorm::create(params, name + ".ln_cross", dim);
  blk.cross_attn =
      MultiHeadAttention::create(params, name + ".cross_attn", dim, memory_dim, n_heads, rng);
  blk.ln_mlp = LayerNorm::create(params, name + ".ln_mlp", dim);
  blk.mlp = Mlp::create(params, name + ".mlp", dim, rng);
  return blk;
}

Var DecoderBlock::forward(const Binding& b, Var x, const std::vector<unsigned char>& self_allowed,
                          Var memory) const {
  Var h = ln_self.forward(b, x);
  x = ops::add(x, self_attn.forward(b, h, h, self_allowed));
  x = ops::add(x, cross_attn.forward(b, ln_cross.forward(b, x), memory));
  return ops::add(x, mlp.forward(b, ln_mlp.forward(b, x)));
}

}  // namespace mmclip
