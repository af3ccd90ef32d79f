#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adapt/embedding.hpp"
#include "adapt/tensor.hpp"

namespace adapt {

// Per-batch token embeddings plus a boolean keep-mask per token (true = alive).
// Batch elements may have different token counts once pruned, so each element
// carries its own (N x D) tensor. The mask must never be all-false.
template <typename T>
struct TokenBatch {
  std::vector<Tensor<T>> tokens;            // B tensors, each (N_b x D)
  std::vector<std::vector<uint8_t>> keep;   // B masks, length N_b

  size_t size() const { return tokens.size(); }
};

// Pre-norm transformer block: LN -> MHA -> residual, LN -> MLP(GELU) -> residual.
template <typename T>
struct BlockParams {
  Tensor<T> ln1_scale, ln1_shift;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_scale, ln2_shift;
  Tensor<T> w1, b1, w2, b2;
  size_t d_model = 0, n_heads = 0, hidden = 0;

  void init(RandomSource& rng, size_t d, size_t heads, size_t mlp_ratio) {
    if (heads == 0 || d % heads != 0)
      throw config_error("block: d_model " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
    d_model = d;
    n_heads = heads;
    hidden = mlp_ratio * d;
    ln1_scale = detail::ones_param<T>({d});
    ln1_shift = detail::zeros_param<T>({d});
    wq = detail::linear_init<T>(rng, d, d);
    bq = detail::zeros_param<T>({d});
    wk = detail::linear_init<T>(rng, d, d);
    bk = detail::zeros_param<T>({d});
    wv = detail::linear_init<T>(rng, d, d);
    bv = detail::zeros_param<T>({d});
    wo = detail::linear_init<T>(rng, d, d);
    bo = detail::zeros_param<T>({d});
    ln2_scale = detail::ones_param<T>({d});
    ln2_shift = detail::zeros_param<T>({d});
    w1 = detail::linear_init<T>(rng, d, hidden);
    b1 = detail::zeros_param<T>({hidden});
    w2 = detail::linear_init<T>(rng, hidden, d);
    b2 = detail::zeros_param<T>({d});
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.emplace_back(prefix + ".ln1_scale", &ln1_scale);
    reg.emplace_back(prefix + ".ln1_shift", &ln1_shift);
    reg.emplace_back(prefix + ".wq", &wq);
    reg.emplace_back(prefix + ".bq", &bq);
    reg.emplace_back(prefix + ".wk", &wk);
    reg.emplace_back(prefix + ".bk", &bk);
    reg.emplace_back(prefix + ".wv", &wv);
    reg.emplace_back(prefix + ".bv", &bv);
    reg.emplace_back(prefix + ".wo", &wo);
    reg.emplace_back(prefix + ".bo", &bo);
    reg.emplace_back(prefix + ".ln2_scale", &ln2_scale);
    reg.emplace_back(prefix + ".ln2_shift", &ln2_shift);
    reg.emplace_back(prefix + ".w1", &w1);
    reg.emplace_back(prefix + ".b1", &b1);
    reg.emplace_back(prefix + ".w2", &w2);
    reg.emplace_back(prefix + ".b2", &b2);
  }
};

// Two linear layers with GELU; pooled token representation to class logits.
template <typename T>
struct HeadParams {
  Tensor<T> w1, b1, w2, b2;
  size_t d_model = 0, num_classes = 0;

  void init(RandomSource& rng, size_t d, size_t classes) {
    d_model = d;
    num_classes = classes;
    w1 = detail::linear_init<T>(rng, d, d);
    b1 = detail::zeros_param<T>({d});
    w2 = detail::linear_init<T>(rng, d, classes);
    b2 = detail::zeros_param<T>({classes});
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.emplace_back(prefix + ".w1", &w1);
    reg.emplace_back(prefix + ".b1", &b1);
    reg.emplace_back(prefix + ".w2", &w2);
    reg.emplace_back(prefix + ".b2", &b2);
  }
};

namespace detail {
template <typename T>
Tensor<T> apply_layer_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  return add(mul(layer_norm(x), scale), shift);
}
}  // namespace detail

// One block on a single cloud's tokens (N x D). An empty mask means all tokens
// are alive (the physically-pruned path). Attention logits to masked keys get
// -1e9 before the softmax, so dead tokens contribute nothing as keys/values;
// the mask itself is unchanged by the block.
template <typename T>
Tensor<T> block_forward_single(const Tensor<T>& tokens, const std::vector<uint8_t>& keep,
                               const BlockParams<T>& p) {
  const size_t n = tokens.dim(0), d = tokens.dim(1);
  if (d != p.d_model)
    throw std::invalid_argument("block_forward: token width " + std::to_string(d) +
                                " does not match d_model " + std::to_string(p.d_model));
  const bool masked = !keep.empty();
  if (masked) {
    if (keep.size() != n)
      throw std::invalid_argument("block_forward: mask length " + std::to_string(keep.size()) +
                                  " does not match " + std::to_string(n) + " tokens");
    bool any = false;
    for (uint8_t m : keep) any = any || m;
    if (!any) throw std::invalid_argument("block_forward: all keys masked");
  }

  Tensor<T> x = detail::apply_layer_norm(tokens, p.ln1_scale, p.ln1_shift);
  Tensor<T> q = add(matmul(x, p.wq), p.bq);
  Tensor<T> k = add(matmul(x, p.wk), p.bk);
  Tensor<T> v = add(matmul(x, p.wv), p.bv);

  Tensor<T> key_bias;
  if (masked) {
    std::vector<T> bias(n);
    for (size_t j = 0; j < n; ++j) bias[j] = keep[j] ? T(0) : T(-1e9);
    key_bias = Tensor<T>::from_values({n}, std::move(bias));
  }

  const size_t dh = p.d_model / p.n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> heads;
  heads.reserve(p.n_heads);
  for (size_t h = 0; h < p.n_heads; ++h) {
    Tensor<T> qh = slice_last(q, h * dh, (h + 1) * dh);
    Tensor<T> kh = slice_last(k, h * dh, (h + 1) * dh);
    Tensor<T> vh = slice_last(v, h * dh, (h + 1) * dh);
    Tensor<T> scores = scalar_mul(matmul(qh, transpose(kh)), scale);  // (n, n)
    if (masked) scores = add(scores, key_bias);
    heads.push_back(matmul(softmax(scores), vh));
  }
  Tensor<T> ctx = p.n_heads == 1 ? heads[0] : concat<T>(heads, 1);
  Tensor<T> attn_out = add(matmul(ctx, p.wo), p.bo);
  Tensor<T> res = add(tokens, attn_out);

  Tensor<T> y = detail::apply_layer_norm(res, p.ln2_scale, p.ln2_shift);
  y = add(matmul(y, p.w1), p.b1);
  y = gelu(y);
  y = add(matmul(y, p.w2), p.b2);
  return add(res, y);
}

// Masked mean over kept tokens, then the two-layer GELU head.
template <typename T>
Tensor<T> classify_single(const Tensor<T>& tokens, const std::vector<uint8_t>& keep,
                          const HeadParams<T>& p) {
  const size_t n = tokens.dim(0);
  std::vector<uint8_t> mask = keep.empty() ? std::vector<uint8_t>(n, 1) : keep;
  Tensor<T> pooled = masked_mean(tokens, mask, 0);  // (D); throws on empty mask
  Tensor<T> h = reshape(pooled, {size_t(1), p.d_model});
  h = gelu(add(matmul(h, p.w1), p.b1));
  h = add(matmul(h, p.w2), p.b2);
  return reshape(h, {p.num_classes});
}

template <typename T>
TokenBatch<T> block_forward(const TokenBatch<T>& tb, const BlockParams<T>& p) {
  TokenBatch<T> out;
  out.keep = tb.keep;
  out.tokens.reserve(tb.size());
  for (size_t i = 0; i < tb.size(); ++i)
    out.tokens.push_back(block_forward_single(tb.tokens[i], tb.keep[i], p));
  return out;
}

template <typename T>
std::vector<Tensor<T>> classify(const TokenBatch<T>& tb, const HeadParams<T>& p) {
  std::vector<Tensor<T>> out;
  out.reserve(tb.size());
  for (size_t i = 0; i < tb.size(); ++i)
    out.push_back(classify_single(tb.tokens[i], tb.keep[i], p));
  return out;
}

}  // namespace adapt
