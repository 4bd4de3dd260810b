#include "cclm/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

using nlohmann::json;

namespace cclm {

OptimState init_optim(const ParamStoreT<float>& params, const AdamwParams& hp) {
  OptimState st;
  st.hp = hp;
  st.m.reserve(params.values.size());
  st.v.reserve(params.values.size());
  for (const auto& value : params.values) {
    st.m.emplace_back(value->size(), 0.0f);
    st.v.emplace_back(value->size(), 0.0f);
  }
  return st;
}

void adamw_step(ParamStoreT<float>& params, const std::vector<std::vector<float>>& grads,
                OptimState& state, double lr) {
  if (grads.size() != params.values.size() || state.m.size() != params.values.size()) {
    throw std::runtime_error("adamw: gradient list does not match the parameter store");
  }
  state.step++;
  const double b1 = state.hp.beta1, b2 = state.hp.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double decay = lr * state.hp.weight_decay;
  for (size_t i = 0; i < params.values.size(); ++i) {
    auto& w = *params.values[i];
    const auto& g = grads[i];
    if (g.size() != w.size()) {
      throw std::runtime_error("adamw: gradient shape mismatch for " + params.names[i]);
    }
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      const double mk = b1 * m[k] + (1.0 - b1) * gk;
      const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      double wk = w[k];
      wk -= decay * wk;  // decoupled decay, not folded into the gradient
      wk -= lr * mhat / (std::sqrt(vhat) + state.hp.eps);
      w[k] = static_cast<float>(wk);
    }
  }
}

double lr_schedule(int64_t step, int64_t warmup_steps, int64_t total_steps, double peak) {
  if (total_steps <= 0 || warmup_steps < 0 || warmup_steps >= total_steps) {
    throw std::runtime_error("lr_schedule: need 0 <= warmup < total");
  }
  if (step < 0) throw std::runtime_error("lr_schedule: negative step");
  if (step > total_steps) return 0.0;
  if (step <= warmup_steps) {
    return warmup_steps == 0 ? peak
                             : peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  return peak * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"full",     "no_shared_cross_attn",
                                                 "no_shared_ffn", "with_tlm",
                                                 "with_tlm_cl",   "no_parallel"};
  return names;
}

std::string format_log_line(const StepRecord& r) {
  auto term = [](bool has, double v) {
    if (!has) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6e", v);
    return std::string(buf);
  };
  char head[64], tail[80];
  std::snprintf(head, sizeof(head), "%lld\t%s", static_cast<long long>(r.step),
                r.kind == ViewKind::cross_modal ? "cross_modal" : "cross_lingual");
  std::snprintf(tail, sizeof(tail), "%.6e\t%.6e", r.total, r.lr);
  return std::string(head) + "\t" + term(r.has_cl, r.l_cl) + "\t" + term(r.has_match, r.l_match) +
         "\t" + term(r.has_mlm, r.l_mlm) + "\t" + tail;
}

namespace {

double effective_mix(const TrainConfig& cfg, TrainPhase phase) {
  if (phase == TrainPhase::finetune) return 0.0;
  if (cfg.ablation == "no_parallel") return 0.0;
  return cfg.mix_ratio;
}

MaskedSeq tlm_pair(const CrossLingualItem& item) {
  MaskedSeq out;
  out.ids = concat_pair(item.masked_a.ids, item.text_b);
  out.targets = item.masked_a.targets;
  out.targets.resize(out.ids.size(), -1);
  return out;
}

}  // namespace

Trainer::Trainer(CclmModel& model, const SyntheticCorpus& corpus, const TrainConfig& cfg,
                 TrainPhase phase)
    : model_(&model),
      corpus_(&corpus),
      cfg_(cfg),
      phase_(phase),
      optim_(init_optim(model.params, cfg.adamw)),
      stream_(corpus, cfg.batch_size, effective_mix(cfg, phase), cfg.seed),
      pool_(cfg.seed) {
  const auto& names = ablation_names();
  if (std::find(names.begin(), names.end(), cfg.ablation) == names.end()) {
    throw std::runtime_error("trainer: unknown ablation '" + cfg.ablation + "'");
  }
  if (cfg.steps < 1) throw std::runtime_error("trainer: step budget must be positive");
  negatives_ = &pool_.stream("negatives");
}

StepRecord Trainer::step() {
  StepRecord rec;
  rec.step = step_ + 1;
  rec.lr = lr_schedule(rec.step, cfg_.warmup_steps, cfg_.steps, cfg_.peak_lr);
  Batch batch = stream_.next();
  rec.kind = batch.kind;

  Tape tape;
  auto bind = bind_model(tape, *model_);
  Tensor total;

  const bool tlm_variant = cfg_.ablation == "with_tlm" || cfg_.ablation == "with_tlm_cl";
  if (batch.kind == ViewKind::cross_lingual && tlm_variant) {
    std::vector<MaskedSeq> pairs;
    pairs.reserve(batch.cl.size());
    for (const auto& item : batch.cl) pairs.push_back(tlm_pair(item));
    auto tlm = tlm_loss(tape, bind, pairs);
    rec.has_mlm = true;
    rec.l_mlm = tlm.value();
    total = tlm;
    if (cfg_.ablation == "with_tlm_cl") {
      LossOptions only_cl;
      only_cl.with_matching = false;
      only_cl.with_mlm = false;
      auto out = total_loss(tape, bind, batch, *negatives_, only_cl);
      rec.has_cl = true;
      rec.l_cl = out.contrastive.value();
      total = tape.add(total, out.contrastive);
    }
  } else {
    LossOptions opt;
    opt.hard_negatives = cfg_.hard_negatives;
    opt.with_mlm = phase_ == TrainPhase::pretrain;
    auto out = total_loss(tape, bind, batch, *negatives_, opt);
    rec.has_cl = rec.has_match = true;
    rec.l_cl = out.contrastive.value();
    rec.l_match = out.matching.value();
    if (opt.with_mlm) {
      rec.has_mlm = true;
      rec.l_mlm = out.mlm.value();
    }
    total = out.total;
  }
  rec.total = total.value();

  // abort on the first NaN term so divergence surfaces with a name
  const char* nan_term = nullptr;
  if (rec.has_cl && std::isnan(rec.l_cl)) nan_term = "contrastive loss";
  else if (rec.has_match && std::isnan(rec.l_match)) nan_term = "matching loss";
  else if (rec.has_mlm && std::isnan(rec.l_mlm)) nan_term = "masked-prediction loss";
  else if (std::isnan(rec.total)) nan_term = "total loss";
  if (nan_term) {
    throw std::runtime_error("step " + std::to_string(rec.step) + ": " + nan_term + " is NaN");
  }

  auto grads = tape.backward(total);
  std::vector<std::vector<float>> dense(model_->params.values.size());
  for (size_t i = 0; i < dense.size(); ++i) {
    const int node = bind.leaves[i].node;
    if (grads.contains(node)) {
      const auto& g = grads.at(node);
      dense[i].assign(g.ptr(), g.ptr() + g.numel());
    } else {
      dense[i].assign(model_->params.values[i]->size(), 0.0f);
    }
  }
  if (cfg_.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& g : dense) {
      for (float x : g) sq += static_cast<double>(x) * x;
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip) {
      const float scale = static_cast<float>(cfg_.grad_clip / norm);
      for (auto& g : dense) {
        for (float& x : g) x *= scale;
      }
    }
  }
  adamw_step(model_->params, dense, optim_, rec.lr);
  step_++;
  return rec;
}

void Trainer::save_state(const std::string& stem) const {
  json j;
  j["format"] = "cclm-train-v1";
  j["step"] = step_;
  j["phase"] = phase_ == TrainPhase::pretrain ? "pretrain" : "finetune";
  j["optim_step"] = optim_.step;
  j["adamw"] = {{"beta1", optim_.hp.beta1},
                {"beta2", optim_.hp.beta2},
                {"eps", optim_.hp.eps},
                {"weight_decay", optim_.hp.weight_decay}};
  const auto st = stream_.state();
  j["stream"] = {{"rng", st.rng},      {"cm_order", st.cm_order}, {"cl_order", st.cl_order},
                 {"cm_cursor", st.cm_cursor}, {"cl_cursor", st.cl_cursor},
                 {"cm_batches", st.cm_batches}, {"cl_batches", st.cl_batches}};
  j["negatives_rng"] = negatives_->state();
  int64_t floats = 0;
  for (const auto& m : optim_.m) floats += static_cast<int64_t>(m.size()) * 2;
  j["moment_floats"] = floats;

  std::ofstream jf(stem + ".json", std::ios::binary);
  if (!jf) throw std::runtime_error("cannot write " + stem + ".json");
  jf << j.dump(2) << "\n";
  std::ofstream bf(stem + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot write " + stem + ".bin");
  for (const auto* moments : {&optim_.m, &optim_.v}) {
    for (const auto& arr : *moments) {
      bf.write(reinterpret_cast<const char*>(arr.data()),
               static_cast<std::streamsize>(arr.size() * sizeof(float)));
    }
  }
}

void Trainer::load_state(const std::string& stem) {
  std::ifstream jf(stem + ".json", std::ios::binary);
  if (!jf) throw std::runtime_error("cannot read " + stem + ".json");
  json j = json::parse(jf);
  if (j.value("format", "") != "cclm-train-v1") {
    throw std::runtime_error("train state: unknown format tag");
  }
  step_ = j.at("step").get<int64_t>();
  optim_.step = j.at("optim_step").get<int64_t>();
  BatchStreamState st;
  const auto& js = j.at("stream");
  st.rng = js.at("rng").get<RngPool::StateMap>();
  st.cm_order = js.at("cm_order").get<std::vector<int>>();
  st.cl_order = js.at("cl_order").get<std::vector<int>>();
  st.cm_cursor = js.at("cm_cursor").get<uint64_t>();
  st.cl_cursor = js.at("cl_cursor").get<uint64_t>();
  st.cm_batches = js.at("cm_batches").get<int64_t>();
  st.cl_batches = js.at("cl_batches").get<int64_t>();
  stream_.restore(st);
  negatives_->restore(j.at("negatives_rng").get<std::vector<uint64_t>>());

  int64_t floats = 0;
  for (const auto& m : optim_.m) floats += static_cast<int64_t>(m.size()) * 2;
  if (j.at("moment_floats").get<int64_t>() != floats) {
    throw std::runtime_error("train state: optimizer moments do not match the model");
  }
  std::ifstream bf(stem + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot read " + stem + ".bin");
  for (auto* moments : {&optim_.m, &optim_.v}) {
    for (auto& arr : *moments) {
      bf.read(reinterpret_cast<char*>(arr.data()),
              static_cast<std::streamsize>(arr.size() * sizeof(float)));
      if (!bf) throw std::runtime_error("train state: moment blob truncated");
    }
  }
}

TrainSummary run_training(CclmModel& model, const SyntheticCorpus& corpus, const TrainConfig& cfg,
                          TrainPhase phase, std::vector<std::string>* log) {
  Trainer trainer(model, corpus, cfg, phase);
  TrainSummary summary;
  for (int64_t s = 0; s < cfg.steps; ++s) {
    StepRecord rec = trainer.step();
    if (s == 0) summary.initial_total = rec.total;
    summary.final_total = rec.total;
    if (log) log->push_back(format_log_line(rec));
    summary.records.push_back(rec);
  }
  return summary;
}

// ------------------------------------------------------------ ablations

std::vector<TrainConfig> default_ablation_variants(const TrainConfig& base) {
  std::vector<TrainConfig> out;
  for (const auto& name : ablation_names()) {
    TrainConfig cfg = base;
    cfg.ablation = name;
    out.push_back(cfg);
  }
  return out;
}

namespace {

double mean_of(const std::vector<double>& xs) {
  double acc = 0.0;
  for (double x : xs) acc += x;
  return acc / static_cast<double>(xs.size());
}

double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double mu = mean_of(xs);
  double acc = 0.0;
  for (double x : xs) acc += (x - mu) * (x - mu);
  return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

}  // namespace

std::vector<AblationRow> run_ablation_suite(const CclmConfig& model_cfg,
                                            const SyntheticCorpus& corpus,
                                            const AblationSpec& spec) {
  if (spec.seeds.size() < 3) {
    throw std::runtime_error("ablation suite: need at least 3 seeds for averaging");
  }
  auto variants = spec.variants.empty() ? default_ablation_variants(spec.pretrain) : spec.variants;
  if (variants.size() != ablation_names().size()) {
    throw std::runtime_error("ablation suite: variant set must be exactly the six known variants");
  }
  for (size_t i = 0; i < variants.size(); ++i) {
    if (variants[i].ablation != ablation_names()[i]) {
      throw std::runtime_error("ablation suite: variant set must be exactly the six known variants");
    }
    if (variants[i].steps != spec.pretrain.steps ||
        variants[i].batch_size != spec.pretrain.batch_size) {
      throw std::runtime_error("ablation suite: variants must share one training budget, but '" +
                               variants[i].ablation + "' differs");
    }
  }

  std::vector<AblationRow> rows;
  for (const auto& variant : variants) {
    AblationRow row;
    row.name = variant.ablation;
    std::vector<double> avg, transfer, gaps;
    for (uint64_t seed : spec.seeds) {
      CclmConfig mc = model_cfg;
      if (variant.ablation == "no_shared_cross_attn") mc.share_cross_attn = false;
      if (variant.ablation == "no_shared_ffn") mc.share_ffn = false;
      auto model = init_model<float>(mc, seed);

      TrainConfig pt = variant;
      pt.seed = seed;
      Trainer trainer(model, corpus, pt, TrainPhase::pretrain);
      for (int64_t s = 0; s < pt.steps; ++s) trainer.step();
      row.cross_lingual_batches += trainer.cross_lingual_batches();
      if (variant.ablation == "no_parallel" && trainer.cross_lingual_batches() != 0) {
        throw std::runtime_error("ablation suite: no_parallel variant consumed parallel batches");
      }

      TrainConfig ft = spec.finetune;
      ft.seed = seed;
      ft.ablation = "full";
      Trainer fine(model, corpus, ft, TrainPhase::finetune);
      for (int64_t s = 0; s < ft.steps; ++s) fine.step();

      auto report = retrieval_eval(model, corpus, corpus.test, spec.top_k);
      std::vector<double> lang_avgs;
      for (const auto& [lang, lr] : report.languages) lang_avgs.push_back(lr.average_recall);
      avg.push_back(mean_of(lang_avgs));
      transfer.push_back(transfer_average_recall(report));
      const auto ratios = transfer_gap(report);
      std::vector<double> non_pivot;
      for (const auto& [lang, ratio] : ratios) {
        if (lang != report.pivot_lang) non_pivot.push_back(ratio);
      }
      gaps.push_back(non_pivot.empty() ? 1.0 : mean_of(non_pivot));
    }
    row.mean_avg_recall = mean_of(avg);
    row.std_avg_recall = sample_std(avg);
    row.mean_transfer_recall = mean_of(transfer);
    row.std_transfer_recall = sample_std(transfer);
    row.mean_transfer_gap = mean_of(gaps);
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-22s %-18s %-18s %-14s %s\n", "variant", "avg_recall",
                "transfer_recall", "transfer_gap", "cl_batches");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-22s %.4f +/- %.4f  %.4f +/- %.4f  %.4f         %lld\n",
                  r.name.c_str(), r.mean_avg_recall, r.std_avg_recall, r.mean_transfer_recall,
                  r.std_transfer_recall, r.mean_transfer_gap,
                  static_cast<long long>(r.cross_lingual_batches));
    out << line;
  }
  return out.str();
}

}  // namespace cclm
