#include "cclm/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace cclm {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are not supported");

void CclmConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    throw std::runtime_error("config: patch size " + std::to_string(patch_size) +
                             " does not tile image size " + std::to_string(image_size));
  }
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw std::runtime_error("config: " + std::to_string(n_heads) + " heads do not divide width " +
                             std::to_string(d_model));
  }
  if (img_layers < 1 || txt_layers < 1 || fusion_layers < 1) {
    throw std::runtime_error("config: all encoder depths must be at least 1");
  }
  if (vocab_size < 5) throw std::runtime_error("config: vocab must cover the special tokens");
  if (max_text_len < 2 || max_pair_len < max_text_len) {
    throw std::runtime_error("config: text length limits are inconsistent");
  }
  if (proj_dim <= 0 || ffn_dim <= 0) throw std::runtime_error("config: nonpositive layer width");
  if (pooling != "cls" && pooling != "mean") {
    throw std::runtime_error("config: unknown pooling '" + pooling + "'");
  }
  if (!(tau_init > 0) || !(tau_min > 0)) throw std::runtime_error("config: temperature must be positive");
}

const char* view_kind_name(ViewKind kind) {
  return kind == ViewKind::cross_modal ? "cross_modal" : "cross_lingual";
}

// ---------------------------------------------------------------- params

namespace {

void add_ln(std::vector<ParamSpec>& out, const std::string& prefix, int d) {
  out.push_back({prefix + ".g", {d}, ParamSpec::ones});
  out.push_back({prefix + ".b", {d}, ParamSpec::zeros});
}

void add_attn(std::vector<ParamSpec>& out, const std::string& prefix, int d) {
  for (const char* m : {"wq", "wk", "wv", "wo"}) {
    out.push_back({prefix + "." + m, {d, d}, ParamSpec::normal02});
  }
  for (const char* v : {"bq", "bk", "bv", "bo"}) {
    out.push_back({prefix + "." + v, {d}, ParamSpec::zeros});
  }
}

void add_ffn(std::vector<ParamSpec>& out, const std::string& prefix, int d, int ffn) {
  out.push_back({prefix + ".w1", {d, ffn}, ParamSpec::normal02});
  out.push_back({prefix + ".b1", {ffn}, ParamSpec::zeros});
  out.push_back({prefix + ".w2", {ffn, d}, ParamSpec::normal02});
  out.push_back({prefix + ".b2", {d}, ParamSpec::zeros});
}

void add_encoder_layer(std::vector<ParamSpec>& out, const std::string& prefix, int d, int ffn) {
  add_ln(out, prefix + ".ln1", d);
  add_attn(out, prefix + ".attn", d);
  add_ln(out, prefix + ".ln2", d);
  add_ffn(out, prefix + ".ffn", d, ffn);
}

}  // namespace

std::vector<ParamSpec> param_specs(const CclmConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  std::vector<ParamSpec> out;
  out.push_back({"img.patch.proj", {cfg.channels * cfg.patch_size * cfg.patch_size, d},
                 ParamSpec::normal02});
  out.push_back({"img.patch.bias", {d}, ParamSpec::zeros});
  out.push_back({"img.cls", {1, d}, ParamSpec::normal02});
  out.push_back({"img.pos", {cfg.num_patches() + 1, d}, ParamSpec::normal02});
  for (int i = 0; i < cfg.img_layers; ++i) {
    add_encoder_layer(out, "img.l" + std::to_string(i), d, cfg.ffn_dim);
  }
  add_ln(out, "img.ln", d);

  out.push_back({"txt.tok", {cfg.vocab_size, d}, ParamSpec::normal02});
  out.push_back({"txt.pos", {cfg.max_pair_len, d}, ParamSpec::normal02});
  for (int i = 0; i < cfg.txt_layers; ++i) {
    add_encoder_layer(out, "txt.l" + std::to_string(i), d, cfg.ffn_dim);
  }
  add_ln(out, "txt.ln", d);

  for (int i = 0; i < cfg.fusion_layers; ++i) {
    const std::string p = "fus.l" + std::to_string(i);
    add_ln(out, p + ".ln1", d);
    add_attn(out, p + ".attn", d);
    add_ln(out, p + ".lnx", d);
    if (cfg.share_cross_attn) {
      add_attn(out, p + ".cross", d);
    } else {
      add_attn(out, p + ".cross.cm", d);
      add_attn(out, p + ".cross.cl", d);
    }
    add_ln(out, p + ".ln2", d);
    if (cfg.share_ffn) {
      add_ffn(out, p + ".ffn", d, cfg.ffn_dim);
    } else {
      add_ffn(out, p + ".ffn.cm", d, cfg.ffn_dim);
      add_ffn(out, p + ".ffn.cl", d, cfg.ffn_dim);
    }
  }
  add_ln(out, "fus.ln", d);

  out.push_back({"proj.v.w", {d, cfg.proj_dim}, ParamSpec::normal02});
  out.push_back({"proj.v.b", {cfg.proj_dim}, ParamSpec::zeros});
  out.push_back({"proj.w.w", {d, cfg.proj_dim}, ParamSpec::normal02});
  out.push_back({"proj.w.b", {cfg.proj_dim}, ParamSpec::zeros});
  out.push_back({"match.w1", {d, d}, ParamSpec::normal02});
  out.push_back({"match.b1", {d}, ParamSpec::zeros});
  out.push_back({"match.w2", {d, 1}, ParamSpec::normal02});
  out.push_back({"match.b2", {1}, ParamSpec::zeros});
  out.push_back({"mlm.bias", {cfg.vocab_size}, ParamSpec::zeros});
  out.push_back({"tau.log", {1}, ParamSpec::log_tau_init});
  return out;
}

int64_t count_parameters(const CclmConfig& cfg) {
  int64_t total = 0;
  for (const auto& spec : param_specs(cfg)) total += shape_numel(spec.shape);
  return total;
}

template <class S>
int ParamStoreT<S>::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::runtime_error("params: unknown tensor '" + name + "'");
  return it->second;
}

template <class S>
void ParamStoreT<S>::add(const std::string& name, Shape shape, std::vector<S> data) {
  if (index_.count(name)) throw std::runtime_error("params: duplicate tensor '" + name + "'");
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw std::runtime_error("params: '" + name + "' has " + std::to_string(data.size()) +
                             " values for shape " + shape_str(shape));
  }
  index_[name] = static_cast<int>(names.size());
  names.push_back(name);
  shapes.push_back(std::move(shape));
  values.push_back(std::make_shared<std::vector<S>>(std::move(data)));
}

template <class S>
int64_t ParamStoreT<S>::total_size() const {
  int64_t total = 0;
  for (const auto& v : values) total += static_cast<int64_t>(v->size());
  return total;
}

template <class S>
CclmModelT<S> init_model(const CclmConfig& cfg, uint64_t seed) {
  CclmModelT<S> model;
  model.cfg = cfg;
  RngPool pool(seed);
  Rng& rng = pool.stream("init");
  for (const auto& spec : param_specs(cfg)) {
    const int64_t n = shape_numel(spec.shape);
    std::vector<S> data(static_cast<size_t>(n));
    switch (spec.init) {
      case ParamSpec::normal02:
        for (auto& v : data) v = static_cast<S>(rng.normal() * 0.02);
        break;
      case ParamSpec::zeros:
        break;
      case ParamSpec::ones:
        for (auto& v : data) v = S(1);
        break;
      case ParamSpec::log_tau_init:
        data[0] = static_cast<S>(std::log(static_cast<double>(cfg.tau_init)));
        break;
    }
    model.params.add(spec.name, spec.shape, std::move(data));
  }
  return model;
}

// ------------------------------------------------------------------ bind

template <class S>
int CclmBindT<S>::leaf_index(const std::string& name) const {
  auto it = index.find(name);
  if (it == index.end()) throw std::runtime_error("bind: unknown tensor '" + name + "'");
  return it->second;
}

template <class S>
CclmBindT<S> bind_model(TapeT<S>& tape, const CclmModelT<S>& model) {
  std::vector<TensorT<S>> leaves;
  leaves.reserve(model.params.names.size());
  for (size_t i = 0; i < model.params.names.size(); ++i) {
    leaves.push_back(tape.leaf(model.params.shapes[i], model.params.values[i]));
  }
  return bind_from_leaves(model.cfg, model.params.names, std::move(leaves));
}

template <class S>
CclmBindT<S> bind_from_leaves(const CclmConfig& cfg, const std::vector<std::string>& names,
                              std::vector<TensorT<S>> leaves) {
  if (names.size() != leaves.size()) {
    throw std::runtime_error("bind: " + std::to_string(leaves.size()) + " leaves for " +
                             std::to_string(names.size()) + " parameter names");
  }
  CclmBindT<S> b;
  b.cfg = &cfg;
  b.leaves = std::move(leaves);
  for (size_t i = 0; i < names.size(); ++i) b.index[names[i]] = static_cast<int>(i);
  auto at = [&b](const std::string& name) -> const TensorT<S>& {
    return b.leaves[static_cast<size_t>(b.leaf_index(name))];
  };
  auto ln = [&](const std::string& p) { return LayerNormWeightsT<S>{at(p + ".g"), at(p + ".b")}; };
  auto attn = [&](const std::string& p) {
    return AttnWeightsT<S>{at(p + ".wq"), at(p + ".bq"), at(p + ".wk"), at(p + ".bk"),
                           at(p + ".wv"), at(p + ".bv"), at(p + ".wo"), at(p + ".bo")};
  };
  auto ffn = [&](const std::string& p) {
    return FfnWeightsT<S>{at(p + ".w1"), at(p + ".b1"), at(p + ".w2"), at(p + ".b2")};
  };
  auto enc = [&](const std::string& p) {
    EncoderLayerWeightsT<S> e;
    e.ln1 = ln(p + ".ln1");
    e.self_attn = attn(p + ".attn");
    e.ln2 = ln(p + ".ln2");
    e.ffn = ffn(p + ".ffn");
    return e;
  };

  b.w.img_embed = {at("img.patch.proj"), at("img.patch.bias"), at("img.cls"), at("img.pos")};
  for (int i = 0; i < cfg.img_layers; ++i) b.w.img_layers.push_back(enc("img.l" + std::to_string(i)));
  b.w.img_final_ln = ln("img.ln");
  b.w.txt_embed = {at("txt.tok"), at("txt.pos")};
  for (int i = 0; i < cfg.txt_layers; ++i) b.w.txt_layers.push_back(enc("txt.l" + std::to_string(i)));
  b.w.txt_final_ln = ln("txt.ln");
  for (int i = 0; i < cfg.fusion_layers; ++i) {
    const std::string p = "fus.l" + std::to_string(i);
    FusionLayerWeightsT<S> f;
    f.ln1 = ln(p + ".ln1");
    f.self_attn = attn(p + ".attn");
    f.ln_cross = ln(p + ".lnx");
    if (cfg.share_cross_attn) {
      f.cross[0] = attn(p + ".cross");
      f.cross[1] = f.cross[0];
    } else {
      f.cross[0] = attn(p + ".cross.cm");
      f.cross[1] = attn(p + ".cross.cl");
    }
    f.ln2 = ln(p + ".ln2");
    if (cfg.share_ffn) {
      f.ffn[0] = ffn(p + ".ffn");
      f.ffn[1] = f.ffn[0];
    } else {
      f.ffn[0] = ffn(p + ".ffn.cm");
      f.ffn[1] = ffn(p + ".ffn.cl");
    }
    b.w.fusion.push_back(std::move(f));
  }
  b.w.fusion_final_ln = ln("fus.ln");
  b.w.proj_v_w = at("proj.v.w");
  b.w.proj_v_b = at("proj.v.b");
  b.w.proj_w_w = at("proj.w.w");
  b.w.proj_w_b = at("proj.w.b");
  b.w.match_w1 = at("match.w1");
  b.w.match_b1 = at("match.b1");
  b.w.match_w2 = at("match.w2");
  b.w.match_b2 = at("match.b2");
  b.w.mlm_bias = at("mlm.bias");
  b.w.log_tau = at("tau.log");
  return b;
}

// --------------------------------------------------------------- forward

template <class S>
TensorT<S> encode_image(TapeT<S>& tape, const CclmBindT<S>& b, const std::vector<S>& image) {
  const CclmConfig& cfg = *b.cfg;
  auto h = patch_embed(tape, image, b.w.img_embed, cfg.channels, cfg.image_size, cfg.patch_size);
  for (const auto& layer : b.w.img_layers) {
    h = encoder_layer(tape, h, layer, cfg.n_heads, static_cast<S>(cfg.ln_eps));
  }
  return tape.layer_norm(h, 1, static_cast<S>(cfg.ln_eps), b.w.img_final_ln.gamma,
                         b.w.img_final_ln.beta);
}

template <class S>
TensorT<S> encode_text(TapeT<S>& tape, const CclmBindT<S>& b, const std::vector<int>& ids) {
  const CclmConfig& cfg = *b.cfg;
  auto h = text_embed(tape, ids, b.w.txt_embed);
  for (const auto& layer : b.w.txt_layers) {
    h = encoder_layer(tape, h, layer, cfg.n_heads, static_cast<S>(cfg.ln_eps));
  }
  return tape.layer_norm(h, 1, static_cast<S>(cfg.ln_eps), b.w.txt_final_ln.gamma,
                         b.w.txt_final_ln.beta);
}

template <class S>
TensorT<S> fuse(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& text_states,
                const TensorT<S>& other_states, ViewKind kind) {
  const CclmConfig& cfg = *b.cfg;
  const int ki = kind == ViewKind::cross_modal ? 0 : 1;
  const S eps = static_cast<S>(cfg.ln_eps);
  auto h = text_states;
  for (const auto& layer : b.w.fusion) {
    {
      auto n = tape.layer_norm(h, 1, eps, layer.ln1.gamma, layer.ln1.beta);
      h = tape.add(h, multi_head_attention(tape, n, n, layer.self_attn, cfg.n_heads));
    }
    {
      auto n = tape.layer_norm(h, 1, eps, layer.ln_cross.gamma, layer.ln_cross.beta);
      h = tape.add(h, multi_head_attention(tape, n, other_states, layer.cross[ki], cfg.n_heads));
    }
    {
      auto n = tape.layer_norm(h, 1, eps, layer.ln2.gamma, layer.ln2.beta);
      auto mid = tape.gelu(linear(tape, n, layer.ffn[ki].w1, layer.ffn[ki].b1));
      h = tape.add(h, linear(tape, mid, layer.ffn[ki].w2, layer.ffn[ki].b2));
    }
  }
  return tape.layer_norm(h, 1, eps, b.w.fusion_final_ln.gamma, b.w.fusion_final_ln.beta);
}

template <class S>
TensorT<S> pool(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& states) {
  if (b.cfg->pooling == "cls") return tape.slice(states, 0, 0, 1);
  const int t = states.shape[0];
  auto ones = TensorT<S>::full({1, t}, S(1));
  return tape.scale(tape.matmul(ones, states), static_cast<S>(1.0 / t));
}

template <class S>
TensorT<S> project_v(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& pooled) {
  return tape.l2_normalize(linear(tape, pooled, b.w.proj_v_w, b.w.proj_v_b), 1);
}

template <class S>
TensorT<S> project_w(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& pooled) {
  return tape.l2_normalize(linear(tape, pooled, b.w.proj_w_w, b.w.proj_w_b), 1);
}

template <class S>
TensorT<S> match_score(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& fused_cls) {
  auto h = tape.gelu(linear(tape, fused_cls, b.w.match_w1, b.w.match_b1));
  return linear(tape, h, b.w.match_w2, b.w.match_b2);
}

template <class S>
TensorT<S> mlm_logits(TapeT<S>& tape, const CclmBindT<S>& b, const TensorT<S>& fused_states) {
  return tape.add_bias(tape.matmul(fused_states, tape.transpose(b.w.txt_embed.tok)), b.w.mlm_bias);
}

template <class S>
TensorT<S> inv_tau(TapeT<S>& tape, const CclmBindT<S>& b) {
  const double lt = static_cast<double>(b.w.log_tau.value());
  if (std::exp(lt) < static_cast<double>(b.cfg->tau_min)) {
    return TensorT<S>::scalar(static_cast<S>(1.0 / b.cfg->tau_min));  // clamped: constant
  }
  return tape.exp(tape.scale(b.w.log_tau, S(-1)));
}

template <class S>
S tau_value(const CclmModelT<S>& model) {
  const int i = model.params.index_of("tau.log");
  const double t = std::exp(static_cast<double>((*model.params.values[i])[0]));
  return static_cast<S>(std::max(t, static_cast<double>(model.cfg.tau_min)));
}

// ------------------------------------------------------------ checkpoint

namespace {

json config_to_json(const CclmConfig& c) {
  return json{{"image_size", c.image_size},
              {"patch_size", c.patch_size},
              {"channels", c.channels},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"img_layers", c.img_layers},
              {"txt_layers", c.txt_layers},
              {"fusion_layers", c.fusion_layers},
              {"ffn_dim", c.ffn_dim},
              {"vocab_size", c.vocab_size},
              {"max_text_len", c.max_text_len},
              {"max_pair_len", c.max_pair_len},
              {"proj_dim", c.proj_dim},
              {"ln_eps", c.ln_eps},
              {"share_cross_attn", c.share_cross_attn},
              {"share_ffn", c.share_ffn},
              {"pooling", c.pooling},
              {"tau_init", c.tau_init},
              {"tau_min", c.tau_min}};
}

CclmConfig config_from_json(const json& j) {
  CclmConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.img_layers = j.at("img_layers").get<int>();
  c.txt_layers = j.at("txt_layers").get<int>();
  c.fusion_layers = j.at("fusion_layers").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_text_len = j.at("max_text_len").get<int>();
  c.max_pair_len = j.at("max_pair_len").get<int>();
  c.proj_dim = j.at("proj_dim").get<int>();
  c.ln_eps = j.at("ln_eps").get<float>();
  c.share_cross_attn = j.at("share_cross_attn").get<bool>();
  c.share_ffn = j.at("share_ffn").get<bool>();
  c.pooling = j.at("pooling").get<std::string>();
  c.tau_init = j.at("tau_init").get<float>();
  c.tau_min = j.at("tau_min").get<float>();
  c.validate();
  return c;
}

uint64_t fnv1a_bytes(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void save_checkpoint(const std::string& stem, const CclmModel& model) {
  json manifest;
  manifest["format"] = "cclm-ckpt-v1";
  manifest["config"] = config_to_json(model.cfg);
  json tensors = json::array();
  int64_t offset = 0;
  for (size_t i = 0; i < model.params.names.size(); ++i) {
    const int64_t bytes = static_cast<int64_t>(model.params.values[i]->size() * sizeof(float));
    tensors.push_back(json{{"name", model.params.names[i]},
                           {"shape", model.params.shapes[i]},
                           {"offset", offset},
                           {"bytes", bytes}});
    offset += bytes;
  }
  manifest["tensors"] = std::move(tensors);
  manifest["total_bytes"] = offset;

  std::ofstream mf(stem + ".json");
  if (!mf) throw std::runtime_error("checkpoint: cannot write " + stem + ".json");
  mf << manifest.dump(2) << "\n";
  mf.close();

  std::ofstream bf(stem + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("checkpoint: cannot write " + stem + ".bin");
  for (const auto& v : model.params.values) {
    bf.write(reinterpret_cast<const char*>(v->data()),
             static_cast<std::streamsize>(v->size() * sizeof(float)));
  }
  bf.close();
  if (!bf) throw std::runtime_error("checkpoint: short write to " + stem + ".bin");
}

CclmModel load_checkpoint(const std::string& stem) {
  std::ifstream mf(stem + ".json");
  if (!mf) throw std::runtime_error("checkpoint: cannot read " + stem + ".json");
  json manifest = json::parse(mf);
  if (manifest.value("format", "") != "cclm-ckpt-v1") {
    throw std::runtime_error("checkpoint: unrecognized format in " + stem + ".json");
  }
  CclmModel model;
  model.cfg = config_from_json(manifest.at("config"));

  std::ifstream bf(stem + ".bin", std::ios::binary | std::ios::ate);
  if (!bf) throw std::runtime_error("checkpoint: cannot read " + stem + ".bin");
  const int64_t file_bytes = static_cast<int64_t>(bf.tellg());
  const int64_t expect_bytes = manifest.at("total_bytes").get<int64_t>();
  if (file_bytes != expect_bytes) {
    throw std::runtime_error("checkpoint: " + stem + ".bin has " + std::to_string(file_bytes) +
                             " bytes, manifest expects " + std::to_string(expect_bytes));
  }
  bf.seekg(0);
  std::vector<char> blob(static_cast<size_t>(file_bytes));
  bf.read(blob.data(), file_bytes);
  if (!bf) throw std::runtime_error("checkpoint: short read from " + stem + ".bin");

  std::map<std::string, std::pair<Shape, std::pair<int64_t, int64_t>>> entries;
  for (const auto& t : manifest.at("tensors")) {
    Shape shape = t.at("shape").get<Shape>();
    entries[t.at("name").get<std::string>()] = {std::move(shape),
                                                {t.at("offset").get<int64_t>(),
                                                 t.at("bytes").get<int64_t>()}};
  }
  for (const auto& spec : param_specs(model.cfg)) {
    auto it = entries.find(spec.name);
    if (it == entries.end()) {
      throw std::runtime_error("checkpoint: missing tensor '" + spec.name + "'");
    }
    Shape shape = it->second.first;
    // img.pos is allowed to carry a different grid; everything else must match.
    if (spec.name != "img.pos" && shape != spec.shape) {
      throw std::runtime_error("checkpoint: tensor '" + spec.name + "' has shape " +
                               shape_str(shape) + ", expected " + shape_str(spec.shape));
    }
    const auto [offset, bytes] = it->second.second;
    const int64_t numel = shape_numel(shape);
    if (bytes != numel * static_cast<int64_t>(sizeof(float)) || offset < 0 ||
        offset + bytes > file_bytes) {
      throw std::runtime_error("checkpoint: tensor '" + spec.name + "' byte range is invalid");
    }
    std::vector<float> data(static_cast<size_t>(numel));
    std::memcpy(data.data(), blob.data() + offset, static_cast<size_t>(bytes));
    model.params.add(spec.name, std::move(shape), std::move(data));
    entries.erase(it);
  }
  if (!entries.empty()) {
    throw std::runtime_error("checkpoint: unexpected tensor '" + entries.begin()->first + "'");
  }
  return model;
}

void resize_image_grid(CclmModel& model, int new_image_size) {
  const CclmConfig& cfg = model.cfg;
  if (new_image_size <= 0 || new_image_size % cfg.patch_size != 0) {
    throw std::runtime_error("resize_image_grid: patch size " + std::to_string(cfg.patch_size) +
                             " does not tile " + std::to_string(new_image_size));
  }
  const int i = model.params.index_of("img.pos");
  const int g_old = static_cast<int>(std::lround(
      std::sqrt(static_cast<double>(model.params.shapes[static_cast<size_t>(i)][0] - 1))));
  const int g_new = new_image_size / cfg.patch_size;
  auto resized = interpolate_pos_embed(*model.params.values[static_cast<size_t>(i)], cfg.d_model,
                                       g_old, g_new);
  model.params.values[static_cast<size_t>(i)] =
      std::make_shared<std::vector<float>>(std::move(resized));
  model.params.shapes[static_cast<size_t>(i)] = {g_new * g_new + 1, cfg.d_model};
  model.cfg.image_size = new_image_size;
}

uint64_t checkpoint_digest(const CclmModel& model) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < model.params.names.size(); ++i) {
    h = fnv1a_bytes(model.params.names[i].data(), model.params.names[i].size(), h);
    h = fnv1a_bytes(model.params.values[i]->data(), model.params.values[i]->size() * sizeof(float), h);
  }
  return h;
}

// ---------------------------------------------------------- instantiation

#define CCLM_INSTANTIATE(S)                                                                      \
  template struct ParamStoreT<S>;                                                                \
  template struct CclmBindT<S>;                                                                  \
  template CclmModelT<S> init_model<S>(const CclmConfig&, uint64_t);                             \
  template CclmBindT<S> bind_model<S>(TapeT<S>&, const CclmModelT<S>&);                          \
  template CclmBindT<S> bind_from_leaves<S>(const CclmConfig&, const std::vector<std::string>&,  \
                                            std::vector<TensorT<S>>);                            \
  template TensorT<S> encode_image<S>(TapeT<S>&, const CclmBindT<S>&, const std::vector<S>&);    \
  template TensorT<S> encode_text<S>(TapeT<S>&, const CclmBindT<S>&, const std::vector<int>&);   \
  template TensorT<S> fuse<S>(TapeT<S>&, const CclmBindT<S>&, const TensorT<S>&,                 \
                              const TensorT<S>&, ViewKind);                                      \
  template TensorT<S> pool<S>(TapeT<S>&, const CclmBindT<S>&, const TensorT<S>&);                \
  template TensorT<S> project_v<S>(TapeT<S>&, const CclmBindT<S>&, const TensorT<S>&);           \
  template TensorT<S> project_w<S>(TapeT<S>&, const CclmBindT<S>&, const TensorT<S>&);           \
  template TensorT<S> match_score<S>(TapeT<S>&, const CclmBindT<S>&, const TensorT<S>&);         \
  template TensorT<S> mlm_logits<S>(TapeT<S>&, const CclmBindT<S>&, const TensorT<S>&);          \
  template TensorT<S> inv_tau<S>(TapeT<S>&, const CclmBindT<S>&);                                \
  template S tau_value<S>(const CclmModelT<S>&);

CCLM_INSTANTIATE(float)
CCLM_INSTANTIATE(double)
#undef CCLM_INSTANTIATE

}  // namespace cclm
