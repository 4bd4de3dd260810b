#include "cclm/gradcheck_suite.hpp"

#include <cmath>

#include "cclm/objectives.hpp"

namespace cclm {

namespace {

constexpr double kEps = 1e-3;
constexpr double kTol = 1e-3;

TensorD normal(Rng& rng, Shape shape, double scale = 1.0) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.normal() * scale;
  return TensorD::from(std::move(shape), std::move(v));
}

TensorD uniform(Rng& rng, Shape shape, double lo, double hi) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD::from(std::move(shape), std::move(v));
}

// Fixed pseudo-random weights keep the upstream gradient non-degenerate for
// ops whose plain sum has structurally zero directions (softmax, layer_norm).
TensorD weighted_sum(TapeD& tape, const TensorD& t, uint64_t salt) {
  Rng wrng(0x5eed0000 + salt);
  std::vector<double> w(static_cast<size_t>(t.numel()));
  for (auto& v : w) v = wrng.uniform(-1.0, 1.0);
  auto weights = TensorD::from(t.shape, std::move(w));
  return tape.sum(tape.mul(t, weights));
}

GradCheckResult run(const std::string& name, const FdBuild<double>& build,
                    const std::vector<TensorD>& inputs) {
  return {name, finite_diff_check<double>(build, inputs, kEps, kTol)};
}

}  // namespace

std::vector<GradCheckResult> primitive_grad_checks() {
  Rng rng(0xc0ffee);
  auto a = normal(rng, {3, 4});
  auto b = normal(rng, {3, 4});
  auto pos = uniform(rng, {3, 4}, 0.3, 3.0);
  auto s1 = uniform(rng, {1}, 0.5, 2.0);
  auto bias = normal(rng, {4});
  auto m1 = normal(rng, {3, 5});
  auto m2 = normal(rng, {5, 4});
  auto gamma = uniform(rng, {4}, 0.5, 1.5);
  auto beta = normal(rng, {4}, 0.3);
  auto table = normal(rng, {6, 4});
  const std::vector<int> ids = {0, 3, 5, 3, 1};
  const std::vector<int> targets = {1, -1, 3};
  TapeD::Mask mask = {0, 1, 0, 0, 1, 1, 0, 0, 1, 0, 1, 0};

  std::vector<GradCheckResult> out;
  out.push_back(run("add",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.add(in[0], in[1]), 1);
                    },
                    {a, b}));
  out.push_back(run("sub",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.sub(in[0], in[1]), 2);
                    },
                    {a, b}));
  out.push_back(run("mul",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.mul(in[0], in[1]), 3);
                    },
                    {a, b}));
  out.push_back(run("scale",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.scale(in[0], 1.75), 4);
                    },
                    {a}));
  out.push_back(run("mul_scalar",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.mul_scalar(in[0], in[1]), 5);
                    },
                    {a, s1}));
  out.push_back(run("add_bias",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.add_bias(in[0], in[1]), 6);
                    },
                    {a, bias}));
  out.push_back(run("exp",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.exp(in[0]), 7);
                    },
                    {a}));
  out.push_back(run("log",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.log(in[0]), 8);
                    },
                    {pos}));
  out.push_back(run("gelu",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.gelu(in[0]), 9);
                    },
                    {a}));
  out.push_back(run("reshape",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.reshape(in[0], {4, 3}), 10);
                    },
                    {a}));
  out.push_back(run("transpose",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.transpose(in[0]), 11);
                    },
                    {a}));
  out.push_back(run("concat",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.concat({in[0], in[1]}, 0), 12);
                    },
                    {a, b}));
  out.push_back(run("slice",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.slice(in[0], 1, 1, 2), 13);
                    },
                    {a}));
  out.push_back(run("matmul",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.matmul(in[0], in[1]), 14);
                    },
                    {m1, m2}));
  out.push_back(run("sum",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return t.sum(t.mul(in[0], in[0]));
                    },
                    {a}));
  out.push_back(run("mean",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return t.mean(t.gelu(in[0]));
                    },
                    {a}));
  out.push_back(run("softmax",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.softmax(in[0], 1), 15);
                    },
                    {a}));
  out.push_back(run("layer_norm",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.layer_norm(in[0], 1, 1e-5, in[1], in[2]), 16);
                    },
                    {a, gamma, beta}));
  out.push_back(run("l2_normalize",
                    [](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.l2_normalize(in[0], 1), 17);
                    },
                    {a}));
  out.push_back(run("embedding_gather",
                    [ids](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.embedding_gather(in[0], ids), 18);
                    },
                    {table}));
  out.push_back(run("masked_fill",
                    [mask](TapeD& t, const std::vector<TensorD>& in) {
                      return weighted_sum(t, t.masked_fill(in[0], mask, -50.0), 19);
                    },
                    {a}));
  out.push_back(run("cross_entropy_from_logits",
                    [targets](TapeD& t, const std::vector<TensorD>& in) {
                      return t.cross_entropy_from_logits(in[0], targets, -1);
                    },
                    {a}));
  return out;
}

GradCheckResult total_loss_grad_check(const CclmConfig& cfg, double sample_fraction,
                                      uint64_t seed) {
  cfg.validate();
  Rng rng(seed);

  auto caption = [&](int len) {
    std::vector<int> ids = {1};
    for (int i = 0; i < len - 2; ++i) {
      ids.push_back(5 + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.vocab_size - 5))));
    }
    ids.push_back(2);
    return ids;
  };
  auto mask_one = [&](const std::vector<int>& ids) {
    MaskedSeq m;
    m.ids = ids;
    m.targets.assign(ids.size(), -1);
    const size_t pos = 1 + rng.below(ids.size() - 2);
    m.targets[pos] = m.ids[pos];
    m.ids[pos] = 3;
    return m;
  };

  const int cap_len = std::min(6, cfg.max_text_len);
  Batch cm;
  cm.kind = ViewKind::cross_modal;
  for (int i = 0; i < 2; ++i) {
    CrossModalItem item;
    item.image.resize(static_cast<size_t>(cfg.channels * cfg.image_size * cfg.image_size));
    for (auto& px : item.image) px = static_cast<float>(rng.uniform(0.0, 1.0));
    item.caption = caption(cap_len);
    item.masked_caption = mask_one(item.caption);
    cm.cm.push_back(std::move(item));
  }
  Batch cl;
  cl.kind = ViewKind::cross_lingual;
  for (int i = 0; i < 2; ++i) {
    CrossLingualItem item;
    item.text_a = caption(cap_len);
    item.text_b = caption(cap_len);
    item.masked_a = mask_one(item.text_a);
    cl.cl.push_back(std::move(item));
  }

  auto model = init_model<double>(cfg, seed);
  std::vector<TensorD> inputs;
  inputs.reserve(model.params.values.size());
  for (size_t i = 0; i < model.params.values.size(); ++i) {
    inputs.push_back(TensorD::from(model.params.shapes[i], *model.params.values[i]));
  }
  const std::vector<std::string> names = model.params.names;
  const std::vector<int> neg = {1, 0};

  FdBuild<double> build = [&, names](TapeD& tape, const std::vector<TensorD>& leaves) {
    auto bind = bind_from_leaves<double>(cfg, names, leaves);
    LossOptions opt;
    opt.fixed_neg_b = &neg;
    opt.fixed_neg_a = &neg;
    Rng unused(1);
    auto lm = total_loss<double>(tape, bind, cm, unused, opt);
    auto ll = total_loss<double>(tape, bind, cl, unused, opt);
    return tape.add(lm.total, ll.total);
  };

  Rng sampler(seed ^ 0x9e3779b97f4a7c15ull);
  GradCheckResult out;
  out.name = "total_loss";
  out.report =
      finite_diff_check<double>(build, inputs, 1e-4, kTol, &sampler, sample_fraction);
  return out;
}

}  // namespace cclm
