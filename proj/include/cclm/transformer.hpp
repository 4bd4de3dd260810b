#pragma once

#include <cstdint>
#include <vector>

#include "cclm/tensor.hpp"

namespace cclm {

template <class S>
struct AttnWeightsT {
  TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class S>
struct LayerNormWeightsT {
  TensorT<S> gamma, beta;
};

template <class S>
struct FfnWeightsT {
  TensorT<S> w1, b1, w2, b2;
};

// Pre-norm residual layer. The cross-attention sublayer only exists in
// fusion layers; its weights stay undefined elsewhere.
template <class S>
struct EncoderLayerWeightsT {
  LayerNormWeightsT<S> ln1;
  AttnWeightsT<S> self_attn;
  LayerNormWeightsT<S> ln_cross;
  AttnWeightsT<S> cross_attn;
  LayerNormWeightsT<S> ln2;
  FfnWeightsT<S> ffn;
  bool has_cross() const { return cross_attn.wq.defined(); }
};

template <class S>
struct PatchEmbedWeightsT {
  TensorT<S> proj;  // [channels*patch*patch, d]
  TensorT<S> bias;  // [d]
  TensorT<S> cls;   // [1, d]
  TensorT<S> pos;   // [1 + num_patches, d]
};

template <class S>
struct TextEmbedWeightsT {
  TensorT<S> tok;  // [vocab, d]
  TensorT<S> pos;  // [max_len, d]
};

template <class S>
TensorT<S> linear(TapeT<S>& tape, const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
  return tape.add_bias(tape.matmul(x, w), b);
}

// Scaled dot-product attention over one sequence. q_in is [Tq, d], kv_in is
// [Tk, d]. key_padding marks keys (length Tk) that no query may attend to.
// When attn_probs_out is given, the per-head probability matrices [Tq, Tk]
// are appended to it in head order.
template <class S>
TensorT<S> multi_head_attention(TapeT<S>& tape, const TensorT<S>& q_in, const TensorT<S>& kv_in,
                                const AttnWeightsT<S>& w, int n_heads,
                                const std::vector<uint8_t>* key_padding = nullptr,
                                std::vector<TensorT<S>>* attn_probs_out = nullptr);

// x + self_attn(ln1(x)), optionally x + cross_attn(ln_cross(x), cross_kv),
// then x + ffn(ln2(x)). cross_kv is the (already normalized) output of the
// other view's encoder.
template <class S>
TensorT<S> encoder_layer(TapeT<S>& tape, const TensorT<S>& x, const EncoderLayerWeightsT<S>& w,
                         int n_heads, S ln_eps, const TensorT<S>* cross_kv = nullptr,
                         const std::vector<uint8_t>* self_key_padding = nullptr,
                         const std::vector<uint8_t>* cross_key_padding = nullptr);

// Host-side picture cutting: [channels, height, width] row-major pixels to
// [num_patches, channels*patch*patch] rows, patches ordered row-major.
template <class S>
std::vector<S> extract_patches(const std::vector<S>& image, int channels, int height, int width,
                               int patch);

// Projected patches with a class token in row 0 and positions added.
template <class S>
TensorT<S> patch_embed(TapeT<S>& tape, const std::vector<S>& image, const PatchEmbedWeightsT<S>& w,
                       int channels, int image_size, int patch_size);

// Token rows plus positions for the first T slots.
template <class S>
TensorT<S> text_embed(TapeT<S>& tape, const std::vector<int>& ids, const TextEmbedWeightsT<S>& w);

// Resizes the patch-grid part of a positional table from g_old x g_old to
// g_new x g_new with corner-aligned bilinear interpolation; row 0 (the class
// token slot) passes through untouched. g_old == g_new returns the input
// bit for bit.
template <class S>
std::vector<S> interpolate_pos_embed(const std::vector<S>& pos, int d, int g_old, int g_new);

}  // namespace cclm
