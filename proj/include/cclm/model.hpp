#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cclm/rng.hpp"
#include "cclm/tensor.hpp"
#include "cclm/transformer.hpp"

namespace cclm {

struct CclmConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int d_model = 64;
  int n_heads = 4;
  int img_layers = 3;
  int txt_layers = 3;
  int fusion_layers = 2;
  int ffn_dim = 256;
  int vocab_size = 64;
  int max_text_len = 30;
  int max_pair_len = 64;  // [CLS] a [SEP] b sequences for translation inputs
  int proj_dim = 32;
  float ln_eps = 1e-5f;
  bool share_cross_attn = true;
  bool share_ffn = true;
  std::string pooling = "cls";  // "cls" | "mean"
  float tau_init = 0.07f;
  float tau_min = 0.001f;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  void validate() const;
};

enum class ViewKind { cross_modal, cross_lingual };

const char* view_kind_name(ViewKind kind);

struct ParamSpec {
  std::string name;
  Shape shape;
  enum Init { normal02, zeros, ones, log_tau_init } init = normal02;
};

// Canonical parameter list; order fixes initialization draws, optimizer
// slots and the checkpoint layout.
std::vector<ParamSpec> param_specs(const CclmConfig& cfg);

int64_t count_parameters(const CclmConfig& cfg);

template <class S>
struct ParamStoreT {
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::shared_ptr<std::vector<S>>> values;

  int index_of(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  void add(const std::string& name, Shape shape, std::vector<S> data);
  int64_t total_size() const;

 private:
  std::map<std::string, int> index_;
};

template <class S>
struct CclmModelT {
  CclmConfig cfg;
  ParamStoreT<S> params;
};

using CclmModel = CclmModelT<float>;

// Deterministic initialization: every weight drawn from the "init" stream of
// the pool in param_specs order.
template <class S>
CclmModelT<S> init_model(const CclmConfig& cfg, uint64_t seed);

// Fusion layer weights. Cross attention and the feed-forward block each come
// either as one shared set or as one set per view kind.
template <class S>
struct FusionLayerWeightsT {
  LayerNormWeightsT<S> ln1;
  AttnWeightsT<S> self_attn;
  LayerNormWeightsT<S> ln_cross;
  AttnWeightsT<S> cross[2];  // indexed by ViewKind; same tensors when shared
  LayerNormWeightsT<S> ln2;
  FfnWeightsT<S> ffn[2];
};

template <class S>
struct CclmWeightsT {
  PatchEmbedWeightsT<S> img_embed;
  std::vector<EncoderLayerWeightsT<S>> img_layers;
  LayerNormWeightsT<S> img_final_ln;
  TextEmbedWeightsT<S> txt_embed;
  std::vector<EncoderLayerWeightsT<S>> txt_layers;
  LayerNormWeightsT<S> txt_final_ln;
  std::vector<FusionLayerWeightsT<S>> fusion;
  LayerNormWeightsT<S> fusion_final_ln;
  TensorT<S> proj_v_w, proj_v_b;
  TensorT<S> proj_w_w, proj_w_b;
  TensorT<S> match_w1, match_b1, match_w2, match_b2;
  TensorT<S> mlm_bias;
  TensorT<S> log_tau;
};

// All parameters registered as leaves on one tape, in store order, plus the
// structured view the forward functions consume.
template <class S>
struct CclmBindT {
  const CclmConfig* cfg = nullptr;
  std::vector<TensorT<S>> leaves;
  CclmWeightsT<S> w;

  int leaf_index(const std::string& name) const;

  std::map<std::string, int> index;
};

template <class S>
CclmBindT<S> bind_model(TapeT<S>& tape, const CclmModelT<S>& model);

// Builds the structured view over leaves that are already registered on some
// tape (one per param_specs entry, store order). cfg must outlive the bind.
template <class S>
CclmBindT<S> bind_from_leaves(const CclmConfig& cfg, const std::vector<std::string>& names,
                              std::vector<TensorT<S>> leaves);

// ---- forward pieces (single sequence / single image) ----

template <class S>
TensorT<S> encode_image(TapeT<S>& tape, const CclmBindT<S>& b, const std::vector<S>& image);

template <class S>
TensorT<S> encode_text(TapeT<S>& tape, const CclmBindT<S>& b, const std::vector<int>& ids);

// Text states attend to the other view (all slots, class token included).
template <class S>
TensorT<S> fuse(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& text_states,
                const TensorT<S>& other_states, ViewKind kind);

// [T, d] -> [1, d]: class-token slot or mean over slots, per config.
template <class S>
TensorT<S> pool(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& states);

// Unit-norm projections used by the contrastive objective.
template <class S>
TensorT<S> project_v(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& pooled);

template <class S>
TensorT<S> project_w(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& pooled);

// Scalar match logit per row of fused class-token states [N, d] -> [N, 1].
template <class S>
TensorT<S> match_score(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& fused_cls);

// Token logits tied to the embedding table: [T, d] -> [T, vocab].
template <class S>
TensorT<S> mlm_logits(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& fused_states);

// 1/tau as a differentiable [1] tensor; constant 1/tau_min once the
// temperature hits the floor.
template <class S>
TensorT<S> inv_tau(TapeT<S>& tape, const CclmBindT<S>& b);

// Current clamped temperature value (host side, for logging).
template <class S>
S tau_value(const CclmModelT<S>& model);

// ---- checkpoints ----

// Writes <stem>.json (config + tensor manifest: name, shape, byte offset)
// and <stem>.bin (little-endian float32, manifest order).
void save_checkpoint(const std::string& stem, const CclmModel& model);
CclmModel load_checkpoint(const std::string& stem);

// Re-grids img.pos for a new input resolution (corner-aligned bilinear).
void resize_image_grid(CclmModel& model, int new_image_size);

uint64_t checkpoint_digest(const CclmModel& model);

}  // namespace cclm
