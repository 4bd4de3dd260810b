#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "cclm/gradcheck.hpp"
#include "cclm/model.hpp"
#include "doctest.h"
#include "test_util.hpp"

using cclm::CclmConfig;
using cclm::Shape;
using cclm::TapeD;
using cclm::TensorD;
using cclm::ViewKind;

namespace {

CclmConfig tiny_config() {
  CclmConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.img_layers = 1;
  cfg.txt_layers = 1;
  cfg.fusion_layers = 1;
  cfg.ffn_dim = 16;
  cfg.vocab_size = 12;
  cfg.max_text_len = 8;
  cfg.max_pair_len = 16;
  cfg.proj_dim = 6;
  return cfg;
}

std::vector<float> gray_image(const CclmConfig& cfg, float v) {
  return std::vector<float>(static_cast<size_t>(cfg.channels) * cfg.image_size * cfg.image_size, v);
}

}  // namespace

TEST_CASE("parameter count deltas for unsharing match the closed forms") {
  CclmConfig cfg = tiny_config();
  const int64_t base = cclm::count_parameters(cfg);

  CclmConfig no_ffn_share = cfg;
  no_ffn_share.share_ffn = false;
  const int64_t d = cfg.d_model, f = cfg.ffn_dim, L = cfg.fusion_layers;
  CHECK(cclm::count_parameters(no_ffn_share) - base == L * (2 * d * f + f + d));

  CclmConfig no_cross_share = cfg;
  no_cross_share.share_cross_attn = false;
  CHECK(cclm::count_parameters(no_cross_share) - base == L * (4 * d * d + 4 * d));

  auto model = cclm::init_model<float>(cfg, 1);
  CHECK(model.params.total_size() == base);
}

TEST_CASE("initialization is seed-deterministic") {
  CclmConfig cfg = tiny_config();
  auto a = cclm::init_model<float>(cfg, 7);
  auto b = cclm::init_model<float>(cfg, 7);
  auto c = cclm::init_model<float>(cfg, 8);
  CHECK(cclm::checkpoint_digest(a) == cclm::checkpoint_digest(b));
  CHECK(cclm::checkpoint_digest(a) != cclm::checkpoint_digest(c));
  const int i = a.params.index_of("tau.log");
  CHECK((*a.params.values[i])[0] == doctest::Approx(std::log(0.07)).epsilon(1e-6));
}

TEST_CASE("forward pieces produce the documented shapes") {
  CclmConfig cfg = tiny_config();
  auto model = cclm::init_model<float>(cfg, 3);
  cclm::Tape tape;
  auto bind = cclm::bind_model(tape, model);

  auto img_states = cclm::encode_image(tape, bind, gray_image(cfg, 0.25f));
  CHECK(img_states.shape == Shape{cfg.num_patches() + 1, cfg.d_model});

  std::vector<int> ids = {1, 6, 7, 8, 2};
  auto txt_states = cclm::encode_text(tape, bind, ids);
  CHECK(txt_states.shape == Shape{5, cfg.d_model});

  auto fused = cclm::fuse(tape, bind, txt_states, img_states, ViewKind::cross_modal);
  CHECK(fused.shape == Shape{5, cfg.d_model});

  auto pooled = cclm::pool(tape, bind, txt_states);
  CHECK(pooled.shape == Shape{1, cfg.d_model});

  auto gw = cclm::project_w(tape, bind, pooled);
  CHECK(gw.shape == Shape{1, cfg.proj_dim});
  double norm = 0;
  for (int i = 0; i < cfg.proj_dim; ++i) norm += static_cast<double>(gw.ptr()[i]) * gw.ptr()[i];
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-6));

  auto gv = cclm::project_v(tape, bind, cclm::pool(tape, bind, img_states));
  CHECK(gv.shape == Shape{1, cfg.proj_dim});

  auto cls = tape.slice(fused, 0, 0, 1);
  auto score = cclm::match_score(tape, bind, cls);
  CHECK(score.shape == Shape{1, 1});

  auto logits = cclm::mlm_logits(tape, bind, fused);
  CHECK(logits.shape == Shape{5, cfg.vocab_size});
}

TEST_CASE("mean pooling averages the slots") {
  CclmConfig cfg = tiny_config();
  cfg.pooling = "mean";
  auto model = cclm::init_model<float>(cfg, 3);
  cclm::Tape tape;
  auto bind = cclm::bind_model(tape, model);
  auto x = tape.leaf(cclm::Tensor::from({2, 8}, {1, 2, 3, 4, 5, 6, 7, 8,
                                                 3, 4, 5, 6, 7, 8, 9, 10}));
  auto pooled = cclm::pool(tape, bind, x);
  CHECK(pooled.shape == Shape{1, 8});
  CHECK(pooled.ptr()[0] == doctest::Approx(2.0));
  CHECK(pooled.ptr()[7] == doctest::Approx(9.0));
}

TEST_CASE("temperature is differentiable until it hits the floor") {
  CclmConfig cfg = tiny_config();
  auto model = cclm::init_model<float>(cfg, 5);
  {
    cclm::Tape tape;
    auto bind = cclm::bind_model(tape, model);
    auto it = cclm::inv_tau(tape, bind);
    CHECK(it.value() == doctest::Approx(1.0 / 0.07).epsilon(1e-5));
    CHECK(it.node >= 0);
    CHECK(cclm::tau_value(model) == doctest::Approx(0.07).epsilon(1e-5));
  }
  (*model.params.values[model.params.index_of("tau.log")])[0] = std::log(1e-5f);
  {
    cclm::Tape tape;
    auto bind = cclm::bind_model(tape, model);
    auto it = cclm::inv_tau(tape, bind);
    CHECK(it.value() == doctest::Approx(1.0 / cfg.tau_min));
    CHECK(it.node == -1);  // clamped: constant, no gradient into log tau
    CHECK(cclm::tau_value(model) == doctest::Approx(cfg.tau_min));
  }
}

TEST_CASE("shared fusion weights accumulate gradients from both view kinds") {
  CclmConfig cfg = tiny_config();
  auto model = cclm::init_model<double>(cfg, 11);
  cclm::Rng rng(12);

  auto run = [&](bool cm, bool cl, const std::string& wname) {
    TapeD tape;
    auto bind = cclm::bind_model(tape, model);
    auto img = cclm::encode_image(tape, bind, std::vector<double>(
        static_cast<size_t>(cfg.channels) * cfg.image_size * cfg.image_size, 0.3));
    auto txt_a = cclm::encode_text(tape, bind, {1, 5, 6, 2});
    auto txt_b = cclm::encode_text(tape, bind, {1, 7, 8, 2});
    std::vector<TensorD> losses;
    if (cm) {
      auto fused = cclm::fuse(tape, bind, txt_a, img, ViewKind::cross_modal);
      losses.push_back(tape.sum(tape.mul(fused, fused)));
    }
    if (cl) {
      auto fused = cclm::fuse(tape, bind, txt_a, txt_b, ViewKind::cross_lingual);
      losses.push_back(tape.sum(tape.mul(fused, fused)));
    }
    auto loss = losses.size() == 1 ? losses[0] : tape.add(losses[0], losses[1]);
    auto grads = tape.backward(loss);
    const auto& leaf = bind.leaves[static_cast<size_t>(bind.leaf_index(wname))];
    REQUIRE(grads.contains(leaf.node));
    return *grads.at(leaf.node).data;
  };

  const std::string wname = "fus.l0.cross.wq";
  auto g_cm = run(true, false, wname);
  auto g_cl = run(false, true, wname);
  auto g_both = run(true, true, wname);
  REQUIRE(g_cm.size() == g_both.size());
  for (size_t i = 0; i < g_both.size(); ++i) {
    CHECK(g_both[i] == doctest::Approx(g_cm[i] + g_cl[i]).epsilon(1e-9));
  }
}

TEST_CASE("unshared fusion weights keep the two view kinds apart") {
  CclmConfig cfg = tiny_config();
  cfg.share_cross_attn = false;
  cfg.share_ffn = false;
  auto model = cclm::init_model<float>(cfg, 13);
  cclm::Tape tape;
  auto bind = cclm::bind_model(tape, model);
  auto txt_a = cclm::encode_text(tape, bind, {1, 5, 6, 2});
  auto txt_b = cclm::encode_text(tape, bind, {1, 7, 8, 2});
  auto fused = cclm::fuse(tape, bind, txt_a, txt_b, ViewKind::cross_lingual);
  auto grads = tape.backward(tape.sum(tape.mul(fused, fused)));
  const auto& cl_leaf = bind.leaves[static_cast<size_t>(bind.leaf_index("fus.l0.cross.cl.wq"))];
  const auto& cm_leaf = bind.leaves[static_cast<size_t>(bind.leaf_index("fus.l0.cross.cm.wq"))];
  CHECK(grads.contains(cl_leaf.node));
  CHECK(!grads.contains(cm_leaf.node));  // cross-modal branch untouched
}

TEST_CASE("model gradients pass a sampled finite-difference check") {
  CclmConfig cfg = tiny_config();
  auto model = cclm::init_model<double>(cfg, 17);
  std::vector<TensorD> inputs;
  for (size_t i = 0; i < model.params.names.size(); ++i) {
    inputs.push_back(TensorD::from(model.params.shapes[i], *model.params.values[i]));
  }
  const std::vector<double> image(static_cast<size_t>(cfg.channels) * cfg.image_size * cfg.image_size, 0.4);
  const std::vector<int> ids = {1, 5, 9, 6, 2};
  auto build = [&](TapeD& t, const std::vector<TensorD>& in) {
    auto bind = cclm::bind_from_leaves(cfg, model.params.names, in);
    auto img = cclm::encode_image(t, bind, image);
    auto txt = cclm::encode_text(t, bind, ids);
    auto fused = cclm::fuse(t, bind, txt, img, ViewKind::cross_modal);
    auto cls = t.slice(fused, 0, 0, 1);
    auto score = cclm::match_score(t, bind, cls);
    auto gv = cclm::project_v(t, bind, cclm::pool(t, bind, img));
    auto gw = cclm::project_w(t, bind, cclm::pool(t, bind, txt));
    auto sim = t.mul_scalar(t.matmul(gv, t.transpose(gw)), cclm::inv_tau(t, bind));
    auto logits = cclm::mlm_logits(t, bind, fused);
    auto mlm = t.cross_entropy_from_logits(logits, {-1, 9, -1, 5, -1}, -1);
    return t.add(t.add(t.sum(score), t.sum(sim)), mlm);
  };
  cclm::Rng sampler(99);
  auto report = cclm::finite_diff_check<double>(build, inputs, 1e-4, 1e-3, &sampler, 0.02);
  CHECK(report.ok);
  CHECK(report.max_rel_err < 1e-3);
  CHECK(report.coords_checked > 50);
}

TEST_CASE("checkpoints round-trip bit for bit") {
  namespace fs = std::filesystem;
  CclmConfig cfg = tiny_config();
  auto model = cclm::init_model<float>(cfg, 23);
  const std::string stem = (fs::temp_directory_path() / "cclm_test_ckpt").string();
  cclm::save_checkpoint(stem, model);
  auto loaded = cclm::load_checkpoint(stem);
  CHECK(loaded.cfg.d_model == cfg.d_model);
  CHECK(loaded.cfg.pooling == cfg.pooling);
  CHECK(cclm::checkpoint_digest(loaded) == cclm::checkpoint_digest(model));

  // truncated blob must be rejected
  {
    std::ifstream in(stem + ".bin", std::ios::binary | std::ios::ate);
    const auto bytes = static_cast<int64_t>(in.tellg());
    in.seekg(0);
    std::vector<char> blob(static_cast<size_t>(bytes - 4));
    in.read(blob.data(), bytes - 4);
    std::ofstream out(stem + ".bin", std::ios::binary | std::ios::trunc);
    out.write(blob.data(), bytes - 4);
  }
  CHECK_THROWS_WITH_AS(cclm::load_checkpoint(stem), doctest::Contains("bytes"), std::runtime_error);
  fs::remove(stem + ".json");
  fs::remove(stem + ".bin");
  CHECK_THROWS_AS(cclm::load_checkpoint(stem), std::runtime_error);
}

TEST_CASE("positional grid resizing keeps checkpoints usable at larger inputs") {
  CclmConfig cfg = tiny_config();  // 8 px, patch 4, grid 2
  auto model = cclm::init_model<float>(cfg, 29);
  const auto before = *model.params.values[model.params.index_of("img.pos")];

  cclm::resize_image_grid(model, 8);  // same grid: bitwise no-op
  const auto& same = *model.params.values[model.params.index_of("img.pos")];
  REQUIRE(same.size() == before.size());
  for (size_t i = 0; i < before.size(); ++i) CHECK(same[i] == before[i]);

  cclm::resize_image_grid(model, 16);  // grid 2 -> 4
  CHECK(model.cfg.image_size == 16);
  CHECK(model.params.shapes[model.params.index_of("img.pos")] == Shape{17, cfg.d_model});
  // corners of the new grid coincide with corners of the old one
  const auto& grown = *model.params.values[model.params.index_of("img.pos")];
  const int d = cfg.d_model;
  for (int c = 0; c < d; ++c) {
    CHECK(grown[static_cast<size_t>((1 + 0) * d + c)] == doctest::Approx(before[static_cast<size_t>((1 + 0) * d + c)]));
    CHECK(grown[static_cast<size_t>((1 + 3) * d + c)] ==
          doctest::Approx(before[static_cast<size_t>((1 + 1) * d + c)]));
    CHECK(grown[static_cast<size_t>((1 + 12) * d + c)] ==
          doctest::Approx(before[static_cast<size_t>((1 + 2) * d + c)]));
    CHECK(grown[static_cast<size_t>((1 + 15) * d + c)] ==
          doctest::Approx(before[static_cast<size_t>((1 + 3) * d + c)]));
  }

  cclm::Tape tape;
  auto bind = cclm::bind_model(tape, model);
  auto states = cclm::encode_image(tape, bind, gray_image(model.cfg, 0.1f));
  CHECK(states.shape == Shape{17, cfg.d_model});

  CHECK_THROWS_WITH_AS(cclm::resize_image_grid(model, 10), doctest::Contains("tile"),
                       std::runtime_error);
}
