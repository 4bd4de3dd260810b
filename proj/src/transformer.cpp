#include "cclm/transformer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cclm {

template <class S>
TensorT<S> multi_head_attention(TapeT<S>& tape, const TensorT<S>& q_in, const TensorT<S>& kv_in,
                                const AttnWeightsT<S>& w, int n_heads,
                                const std::vector<uint8_t>* key_padding,
                                std::vector<TensorT<S>>* attn_probs_out) {
  if (q_in.shape.size() != 2 || kv_in.shape.size() != 2 || q_in.shape[1] != kv_in.shape[1]) {
    throw std::runtime_error("multi_head_attention: bad inputs " + shape_str(q_in.shape) + " vs " +
                             shape_str(kv_in.shape));
  }
  const int d = q_in.shape[1];
  if (n_heads <= 0 || d % n_heads != 0) {
    throw std::runtime_error("multi_head_attention: " + std::to_string(n_heads) +
                             " heads do not divide width " + std::to_string(d));
  }
  const int tq = q_in.shape[0];
  const int tk = kv_in.shape[0];
  if (key_padding && static_cast<int>(key_padding->size()) != tk) {
    throw std::runtime_error("multi_head_attention: key padding has " +
                             std::to_string(key_padding->size()) + " entries for " +
                             std::to_string(tk) + " keys");
  }
  const int dh = d / n_heads;
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  auto q = linear(tape, q_in, w.wq, w.bq);
  auto k = linear(tape, kv_in, w.wk, w.bk);
  auto v = linear(tape, kv_in, w.wv, w.bv);

  typename TapeT<S>::Mask score_mask;
  if (key_padding) {
    score_mask.resize(static_cast<size_t>(tq) * tk);
    for (int i = 0; i < tq; ++i) {
      for (int j = 0; j < tk; ++j) score_mask[static_cast<size_t>(i) * tk + j] = (*key_padding)[j];
    }
  }

  std::vector<TensorT<S>> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    auto qh = tape.slice(q, 1, h * dh, dh);
    auto kh = tape.slice(k, 1, h * dh, dh);
    auto vh = tape.slice(v, 1, h * dh, dh);
    auto scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh);
    if (key_padding) scores = tape.masked_fill(scores, score_mask, static_cast<S>(-1e9));
    auto probs = tape.softmax(scores, 1);
    if (attn_probs_out) attn_probs_out->push_back(probs);
    heads.push_back(tape.matmul(probs, vh));
  }
  auto merged = n_heads == 1 ? heads[0] : tape.concat(heads, 1);
  return linear(tape, merged, w.wo, w.bo);
}

template <class S>
TensorT<S> encoder_layer(TapeT<S>& tape, const TensorT<S>& x, const EncoderLayerWeightsT<S>& w,
                         int n_heads, S ln_eps, const TensorT<S>* cross_kv,
                         const std::vector<uint8_t>* self_key_padding,
                         const std::vector<uint8_t>* cross_key_padding) {
  auto h = x;
  {
    auto normed = tape.layer_norm(h, 1, ln_eps, w.ln1.gamma, w.ln1.beta);
    h = tape.add(h, multi_head_attention(tape, normed, normed, w.self_attn, n_heads,
                                         self_key_padding));
  }
  if (cross_kv) {
    if (!w.has_cross()) {
      throw std::runtime_error("encoder_layer: cross input given but layer has no cross weights");
    }
    auto normed = tape.layer_norm(h, 1, ln_eps, w.ln_cross.gamma, w.ln_cross.beta);
    h = tape.add(h, multi_head_attention(tape, normed, *cross_kv, w.cross_attn, n_heads,
                                         cross_key_padding));
  }
  {
    auto normed = tape.layer_norm(h, 1, ln_eps, w.ln2.gamma, w.ln2.beta);
    auto mid = tape.gelu(linear(tape, normed, w.ffn.w1, w.ffn.b1));
    h = tape.add(h, linear(tape, mid, w.ffn.w2, w.ffn.b2));
  }
  return h;
}

template <class S>
std::vector<S> extract_patches(const std::vector<S>& image, int channels, int height, int width,
                               int patch) {
  if (patch <= 0 || height % patch != 0 || width % patch != 0) {
    throw std::runtime_error("extract_patches: patch " + std::to_string(patch) +
                             " does not tile " + std::to_string(height) + "x" + std::to_string(width));
  }
  if (static_cast<int64_t>(image.size()) != static_cast<int64_t>(channels) * height * width) {
    throw std::runtime_error("extract_patches: image has " + std::to_string(image.size()) +
                             " values, expected " + std::to_string(channels * height * width));
  }
  const int gy = height / patch, gx = width / patch;
  const int feat = channels * patch * patch;
  std::vector<S> out(static_cast<size_t>(gy) * gx * feat);
  for (int py = 0; py < gy; ++py) {
    for (int px = 0; px < gx; ++px) {
      const int64_t row = (static_cast<int64_t>(py) * gx + px) * feat;
      for (int c = 0; c < channels; ++c) {
        for (int dy = 0; dy < patch; ++dy) {
          for (int dx = 0; dx < patch; ++dx) {
            const int64_t src = (static_cast<int64_t>(c) * height + py * patch + dy) * width +
                                px * patch + dx;
            out[static_cast<size_t>(row + (static_cast<int64_t>(c) * patch + dy) * patch + dx)] =
                image[static_cast<size_t>(src)];
          }
        }
      }
    }
  }
  return out;
}

template <class S>
TensorT<S> patch_embed(TapeT<S>& tape, const std::vector<S>& image, const PatchEmbedWeightsT<S>& w,
                       int channels, int image_size, int patch_size) {
  auto patches = extract_patches(image, channels, image_size, image_size, patch_size);
  const int n = (image_size / patch_size) * (image_size / patch_size);
  const int feat = channels * patch_size * patch_size;
  if (w.proj.shape.size() != 2 || w.proj.shape[0] != feat) {
    throw std::runtime_error("patch_embed: projection " + shape_str(w.proj.shape) +
                             " does not accept " + std::to_string(feat) + " patch features");
  }
  if (w.pos.shape[0] != n + 1) {
    throw std::runtime_error("patch_embed: positional table covers " +
                             std::to_string(w.pos.shape[0]) + " slots, sequence has " +
                             std::to_string(n + 1));
  }
  auto patch_rows = TensorT<S>::from({n, feat}, std::move(patches));
  auto projected = linear(tape, patch_rows, w.proj, w.bias);
  auto seq = tape.concat({w.cls, projected}, 0);
  return tape.add(seq, w.pos);
}

template <class S>
TensorT<S> text_embed(TapeT<S>& tape, const std::vector<int>& ids, const TextEmbedWeightsT<S>& w) {
  const int t = static_cast<int>(ids.size());
  if (t == 0) throw std::runtime_error("text_embed: empty token sequence");
  if (t > w.pos.shape[0]) {
    throw std::runtime_error("text_embed: sequence of " + std::to_string(t) +
                             " exceeds positional table of " + std::to_string(w.pos.shape[0]));
  }
  auto rows = tape.embedding_gather(w.tok, ids);
  auto pos = tape.slice(w.pos, 0, 0, t);
  return tape.add(rows, pos);
}

template <class S>
std::vector<S> interpolate_pos_embed(const std::vector<S>& pos, int d, int g_old, int g_new) {
  if (g_old <= 0 || g_new <= 0 || d <= 0) {
    throw std::runtime_error("interpolate_pos_embed: nonpositive grid or width");
  }
  const int64_t expect = (1 + static_cast<int64_t>(g_old) * g_old) * d;
  if (static_cast<int64_t>(pos.size()) != expect) {
    throw std::runtime_error("interpolate_pos_embed: table has " + std::to_string(pos.size()) +
                             " values, expected " + std::to_string(expect));
  }
  if (g_new == g_old) return pos;
  std::vector<S> out((1 + static_cast<int64_t>(g_new) * g_new) * static_cast<int64_t>(d));
  std::copy(pos.begin(), pos.begin() + d, out.begin());  // class token slot
  const S* grid = pos.data() + d;
  S* dst = out.data() + d;
  for (int i = 0; i < g_new; ++i) {
    const double y = g_new == 1 ? 0.0
                                : static_cast<double>(i) * (g_old - 1) / static_cast<double>(g_new - 1);
    const int y0 = std::min(static_cast<int>(y), g_old - 1);
    const int y1 = std::min(y0 + 1, g_old - 1);
    const double fy = y - y0;
    for (int j = 0; j < g_new; ++j) {
      const double x = g_new == 1 ? 0.0
                                  : static_cast<double>(j) * (g_old - 1) / static_cast<double>(g_new - 1);
      const int x0 = std::min(static_cast<int>(x), g_old - 1);
      const int x1 = std::min(x0 + 1, g_old - 1);
      const double fx = x - x0;
      const S* p00 = grid + (static_cast<int64_t>(y0) * g_old + x0) * d;
      const S* p01 = grid + (static_cast<int64_t>(y0) * g_old + x1) * d;
      const S* p10 = grid + (static_cast<int64_t>(y1) * g_old + x0) * d;
      const S* p11 = grid + (static_cast<int64_t>(y1) * g_old + x1) * d;
      S* cell = dst + (static_cast<int64_t>(i) * g_new + j) * d;
      for (int c = 0; c < d; ++c) {
        const double top = static_cast<double>(p00[c]) * (1.0 - fx) + static_cast<double>(p01[c]) * fx;
        const double bot = static_cast<double>(p10[c]) * (1.0 - fx) + static_cast<double>(p11[c]) * fx;
        cell[c] = static_cast<S>(top * (1.0 - fy) + bot * fy);
      }
    }
  }
  return out;
}

#define CCLM_INSTANTIATE(S)                                                                       \
  template TensorT<S> multi_head_attention<S>(TapeT<S>&, const TensorT<S>&, const TensorT<S>&,   \
                                              const AttnWeightsT<S>&, int,                       \
                                              const std::vector<uint8_t>*,                       \
                                              std::vector<TensorT<S>>*);                         \
  template TensorT<S> encoder_layer<S>(TapeT<S>&, const TensorT<S>&,                             \
                                       const EncoderLayerWeightsT<S>&, int, S,                   \
                                       const TensorT<S>*, const std::vector<uint8_t>*,           \
                                       const std::vector<uint8_t>*);                             \
  template std::vector<S> extract_patches<S>(const std::vector<S>&, int, int, int, int);         \
  template TensorT<S> patch_embed<S>(TapeT<S>&, const std::vector<S>&,                           \
                                     const PatchEmbedWeightsT<S>&, int, int, int);               \
  template TensorT<S> text_embed<S>(TapeT<S>&, const std::vector<int>&,                          \
                                    const TextEmbedWeightsT<S>&);                                \
  template std::vector<S> interpolate_pos_embed<S>(const std::vector<S>&, int, int, int);

CCLM_INSTANTIATE(float)
CCLM_INSTANTIATE(double)
#undef CCLM_INSTANTIATE

}  // namespace cclm
