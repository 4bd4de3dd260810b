// Command-line front end: corpus synthesis, training, retrieval evaluation,
// gradient auditing and embedding export, all driven by one flat JSON config.
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cclm/data.hpp"
#include "cclm/eval.hpp"
#include "cclm/gradcheck_suite.hpp"
#include "cclm/model.hpp"
#include "cclm/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

// Flat dotted-key configuration. Every key has a default; anything else in
// the file is rejected by name.
struct RunConfig {
  std::map<std::string, json> kv;

  const json& at(const std::string& key) const {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("config: unknown key '" + key + "'");
    return it->second;
  }
  int geti(const std::string& key) const { return at(key).get<int>(); }
  int64_t geti64(const std::string& key) const { return at(key).get<int64_t>(); }
  uint64_t getu(const std::string& key) const { return at(key).get<uint64_t>(); }
  double getd(const std::string& key) const { return at(key).get<double>(); }
  bool getb(const std::string& key) const { return at(key).get<bool>(); }
  std::string gets(const std::string& key) const { return at(key).get<std::string>(); }
};

RunConfig default_run_config() {
  const cclm::CclmConfig m;
  const cclm::CorpusSpec d;
  const cclm::TrainConfig t;
  RunConfig rc;
  rc.kv["seed"] = uint64_t{1};

  rc.kv["model.image_size"] = m.image_size;
  rc.kv["model.patch_size"] = m.patch_size;
  rc.kv["model.channels"] = m.channels;
  rc.kv["model.d_model"] = m.d_model;
  rc.kv["model.n_heads"] = m.n_heads;
  rc.kv["model.img_layers"] = m.img_layers;
  rc.kv["model.txt_layers"] = m.txt_layers;
  rc.kv["model.fusion_layers"] = m.fusion_layers;
  rc.kv["model.ffn_dim"] = m.ffn_dim;
  rc.kv["model.vocab_size"] = m.vocab_size;
  rc.kv["model.max_text_len"] = m.max_text_len;
  rc.kv["model.max_pair_len"] = m.max_pair_len;
  rc.kv["model.proj_dim"] = m.proj_dim;
  rc.kv["model.ln_eps"] = static_cast<double>(m.ln_eps);
  rc.kv["model.share_cross_attn"] = m.share_cross_attn;
  rc.kv["model.share_ffn"] = m.share_ffn;
  rc.kv["model.pooling"] = m.pooling;
  rc.kv["model.tau_init"] = static_cast<double>(m.tau_init);
  rc.kv["model.tau_min"] = static_cast<double>(m.tau_min);

  rc.kv["data.n_train"] = d.n_train;
  rc.kv["data.n_dev"] = d.n_dev;
  rc.kv["data.n_test"] = d.n_test;
  rc.kv["data.n_parallel"] = d.n_parallel;
  rc.kv["data.n_languages"] = d.n_languages;
  rc.kv["data.image_size"] = d.image_size;
  rc.kv["data.max_caption_len"] = d.max_caption_len;
  rc.kv["data.max_pair_len"] = d.max_pair_len;
  rc.kv["data.mask_rate"] = d.mask_rate;
  rc.kv["data.inline_images"] = false;
  rc.kv["data.expected_digest"] = std::string();

  rc.kv["train.phase"] = std::string("pretrain");
  rc.kv["train.steps"] = t.steps;
  rc.kv["train.batch_size"] = t.batch_size;
  rc.kv["train.mix_ratio"] = t.mix_ratio;
  rc.kv["train.peak_lr"] = t.peak_lr;
  rc.kv["train.warmup_steps"] = t.warmup_steps;
  rc.kv["train.ablation"] = t.ablation;
  rc.kv["train.hard_negatives"] = t.hard_negatives;
  rc.kv["train.grad_clip"] = t.grad_clip;
  rc.kv["train.weight_decay"] = t.adamw.weight_decay;
  rc.kv["train.init"] = std::string();
  rc.kv["train.checkpoint_every"] = int64_t{0};

  rc.kv["eval.top_k"] = 8;
  rc.kv["gradcheck.sample_fraction"] = 0.002;
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  RunConfig rc = default_run_config();
  if (path.empty()) return rc;
  std::ifstream in(path);
  if (!in.good()) throw std::runtime_error("config: cannot open '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config " + path + ": " + e.what());
  }
  if (!doc.is_object()) {
    throw std::runtime_error("config " + path + ": top level must be an object of dotted keys");
  }
  for (const auto& [key, value] : doc.items()) {
    auto it = rc.kv.find(key);
    if (it == rc.kv.end()) {
      throw std::runtime_error("config " + path + ": unknown key '" + key + "'");
    }
    const json& def = it->second;
    const char* want = nullptr;
    if (def.is_boolean() && !value.is_boolean()) want = "a boolean";
    if (def.is_string() && !value.is_string()) want = "a string";
    if ((def.is_number_integer() || def.is_number_unsigned()) &&
        !(value.is_number_integer() || value.is_number_unsigned())) {
      want = "an integer";
    }
    if (def.is_number_float() && !value.is_number()) want = "a number";
    if (want) {
      throw std::runtime_error("config " + path + ": key '" + key + "' expects " + want);
    }
    it->second = value;
  }
  return rc;
}

void write_resolved_config(const RunConfig& rc, const fs::path& dir) {
  json doc(json::value_t::object);
  for (const auto& [key, value] : rc.kv) doc[key] = value;
  std::ofstream out(dir / "resolved.json");
  out << doc.dump(2) << "\n";
}

cclm::CclmConfig model_config_from(const RunConfig& rc) {
  cclm::CclmConfig cfg;
  cfg.image_size = rc.geti("model.image_size");
  cfg.patch_size = rc.geti("model.patch_size");
  cfg.channels = rc.geti("model.channels");
  cfg.d_model = rc.geti("model.d_model");
  cfg.n_heads = rc.geti("model.n_heads");
  cfg.img_layers = rc.geti("model.img_layers");
  cfg.txt_layers = rc.geti("model.txt_layers");
  cfg.fusion_layers = rc.geti("model.fusion_layers");
  cfg.ffn_dim = rc.geti("model.ffn_dim");
  cfg.vocab_size = rc.geti("model.vocab_size");
  cfg.max_text_len = rc.geti("model.max_text_len");
  cfg.max_pair_len = rc.geti("model.max_pair_len");
  cfg.proj_dim = rc.geti("model.proj_dim");
  cfg.ln_eps = static_cast<float>(rc.getd("model.ln_eps"));
  cfg.share_cross_attn = rc.getb("model.share_cross_attn");
  cfg.share_ffn = rc.getb("model.share_ffn");
  cfg.pooling = rc.gets("model.pooling");
  cfg.tau_init = static_cast<float>(rc.getd("model.tau_init"));
  cfg.tau_min = static_cast<float>(rc.getd("model.tau_min"));
  return cfg;
}

void sync_model_keys(RunConfig& rc, const cclm::CclmConfig& cfg) {
  rc.kv["model.image_size"] = cfg.image_size;
  rc.kv["model.patch_size"] = cfg.patch_size;
  rc.kv["model.channels"] = cfg.channels;
  rc.kv["model.d_model"] = cfg.d_model;
  rc.kv["model.n_heads"] = cfg.n_heads;
  rc.kv["model.img_layers"] = cfg.img_layers;
  rc.kv["model.txt_layers"] = cfg.txt_layers;
  rc.kv["model.fusion_layers"] = cfg.fusion_layers;
  rc.kv["model.ffn_dim"] = cfg.ffn_dim;
  rc.kv["model.vocab_size"] = cfg.vocab_size;
  rc.kv["model.max_text_len"] = cfg.max_text_len;
  rc.kv["model.max_pair_len"] = cfg.max_pair_len;
  rc.kv["model.proj_dim"] = cfg.proj_dim;
  rc.kv["model.share_cross_attn"] = cfg.share_cross_attn;
  rc.kv["model.share_ffn"] = cfg.share_ffn;
  rc.kv["model.pooling"] = cfg.pooling;
}

cclm::CorpusSpec corpus_spec_from(const RunConfig& rc) {
  cclm::CorpusSpec spec;
  spec.n_train = rc.geti("data.n_train");
  spec.n_dev = rc.geti("data.n_dev");
  spec.n_test = rc.geti("data.n_test");
  spec.n_parallel = rc.geti("data.n_parallel");
  spec.n_languages = rc.geti("data.n_languages");
  spec.image_size = rc.geti("data.image_size");
  spec.max_caption_len = rc.geti("data.max_caption_len");
  spec.max_pair_len = rc.geti("data.max_pair_len");
  spec.mask_rate = rc.getd("data.mask_rate");
  spec.seed = rc.getu("seed");
  return spec;
}

cclm::TrainConfig train_config_from(const RunConfig& rc) {
  cclm::TrainConfig cfg;
  cfg.steps = rc.geti64("train.steps");
  cfg.batch_size = rc.geti("train.batch_size");
  cfg.mix_ratio = rc.getd("train.mix_ratio");
  cfg.peak_lr = rc.getd("train.peak_lr");
  cfg.warmup_steps = rc.geti64("train.warmup_steps");
  cfg.seed = rc.getu("seed");
  cfg.ablation = rc.gets("train.ablation");
  cfg.hard_negatives = rc.getb("train.hard_negatives");
  cfg.grad_clip = rc.getd("train.grad_clip");
  cfg.adamw.weight_decay = rc.getd("train.weight_decay");
  return cfg;
}

// Corpus directory plus its manifest; refuses to serve files whose content
// no longer hashes to the digest recorded at generation time.
cclm::SyntheticCorpus load_verified_corpus(const std::string& dir, const RunConfig& rc) {
  auto corpus = cclm::load_corpus(dir);
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in.good()) {
    throw std::runtime_error("corpus manifest missing: " + manifest_path.string());
  }
  json manifest = json::parse(in);
  const std::string recorded = manifest.at("digest").get<std::string>();
  const std::string computed = hex64(cclm::corpus_digest(corpus));
  if (recorded != computed) {
    throw std::runtime_error("corpus digest mismatch: manifest records " + recorded +
                             " but the files hash to " + computed);
  }
  const std::string expected = rc.gets("data.expected_digest");
  if (!expected.empty() && expected != computed) {
    throw std::runtime_error("corpus digest mismatch: config expects " + expected +
                             " but the corpus hashes to " + computed);
  }
  return corpus;
}

void check_model_corpus(const cclm::CclmConfig& cfg, const cclm::SyntheticCorpus& corpus) {
  if (cfg.vocab_size != corpus.vocab.size()) {
    throw std::runtime_error("checkpoint/corpus mismatch: txt.tok has " +
                             std::to_string(cfg.vocab_size) + " rows but the vocabulary holds " +
                             std::to_string(corpus.vocab.size()) + " tokens");
  }
  if (cfg.max_text_len < corpus.spec.max_caption_len || cfg.max_pair_len < corpus.spec.max_pair_len) {
    throw std::runtime_error("model sequence limits are shorter than the corpus captions");
  }
}

const cclm::CorpusSplit& pick_split(const cclm::SyntheticCorpus& corpus, const std::string& name) {
  if (name == "train") return corpus.train;
  if (name == "dev") return corpus.dev;
  if (name == "test") return corpus.test;
  throw std::runtime_error("unknown split '" + name + "' (expected train, dev or test)");
}

int cmd_gen_data(RunConfig rc, const std::string& out) {
  const auto spec = corpus_spec_from(rc);
  auto corpus = cclm::build_corpus(spec);
  fs::create_directories(out);
  cclm::save_corpus(out, corpus, rc.getb("data.inline_images"));
  const std::string digest = hex64(cclm::corpus_digest(corpus));

  json manifest;
  manifest["format"] = "cclm-manifest-v1";
  manifest["seed"] = spec.seed;
  manifest["digest"] = digest;
  manifest["languages"] = corpus.languages.size();
  manifest["examples"] = {{"train_multimodal", corpus.train.multimodal.size()},
                          {"train_parallel", corpus.train.parallel.size()},
                          {"dev_multimodal", corpus.dev.multimodal.size()},
                          {"test_multimodal", corpus.test.multimodal.size()}};
  std::ofstream mf(fs::path(out) / "manifest.json");
  mf << manifest.dump(2) << "\n";
  write_resolved_config(rc, out);

  std::printf("corpus: %s\n", out.c_str());
  std::printf("digest: %s\n", digest.c_str());
  std::printf("scenes: train=%zu dev=%zu test=%zu  parallel=%zu  languages=%zu\n",
              corpus.train.scene_ids.size(), corpus.dev.scene_ids.size(),
              corpus.test.scene_ids.size(), corpus.train.parallel.size(),
              corpus.languages.size());
  return 0;
}

int cmd_train(RunConfig rc, const std::string& corpus_dir, const std::string& out, bool resume,
              const std::string& ablation_override, int64_t stop_after) {
  if (!ablation_override.empty()) rc.kv["train.ablation"] = ablation_override;
  auto corpus = load_verified_corpus(corpus_dir, rc);
  auto tc = train_config_from(rc);
  const std::string phase_name = rc.gets("train.phase");
  cclm::TrainPhase phase;
  if (phase_name == "pretrain") {
    phase = cclm::TrainPhase::pretrain;
  } else if (phase_name == "finetune") {
    phase = cclm::TrainPhase::finetune;
  } else {
    throw std::runtime_error("train.phase must be 'pretrain' or 'finetune', got '" + phase_name +
                             "'");
  }

  fs::create_directories(out);
  const std::string ckpt_stem = (fs::path(out) / "checkpoint").string();
  const std::string state_stem = (fs::path(out) / "train_state").string();
  const std::string init_stem = rc.gets("train.init");

  cclm::CclmModel model;
  if (resume) {
    model = cclm::load_checkpoint(ckpt_stem);
  } else if (!init_stem.empty()) {
    model = cclm::load_checkpoint(init_stem);
  } else {
    auto cfg = model_config_from(rc);
    cfg.vocab_size = corpus.vocab.size();
    if (cfg.image_size != corpus.spec.image_size) {
      throw std::runtime_error("model.image_size " + std::to_string(cfg.image_size) +
                               " does not match the corpus image size " +
                               std::to_string(corpus.spec.image_size));
    }
    model = cclm::init_model<float>(cfg, rc.getu("seed"));
  }
  check_model_corpus(model.cfg, corpus);
  sync_model_keys(rc, model.cfg);

  cclm::Trainer trainer(model, corpus, tc, phase);
  if (resume) trainer.load_state(state_stem);

  std::ofstream log(fs::path(out) / "loss_log.tsv",
                    resume ? std::ios::app : std::ios::trunc);
  if (!resume) log << "step\tview_kind\tL_cl\tL_match\tL_mlm\ttotal\tlr\n";

  const int64_t ckpt_every = rc.geti64("train.checkpoint_every");
  while (trainer.steps_done() < tc.steps &&
         (stop_after <= 0 || trainer.steps_done() < stop_after)) {
    const auto rec = trainer.step();
    const std::string line = cclm::format_log_line(rec);
    log << line << "\n";
    log.flush();
    std::printf("%s\n", line.c_str());
    if (ckpt_every > 0 && trainer.steps_done() % ckpt_every == 0 &&
        trainer.steps_done() < tc.steps) {
      cclm::save_checkpoint(ckpt_stem, model);
      trainer.save_state(state_stem);
    }
  }
  cclm::save_checkpoint(ckpt_stem, model);
  trainer.save_state(state_stem);
  write_resolved_config(rc, out);

  if (trainer.steps_done() < tc.steps) {
    std::printf("paused at step %" PRId64 " of %" PRId64 "; continue with --resume\n",
                trainer.steps_done(), tc.steps);
  }
  std::printf("trained %" PRId64 " steps (%s, %s), tau=%.4f\n", trainer.steps_done(),
              phase_name.c_str(), tc.ablation.c_str(),
              static_cast<double>(cclm::tau_value(model)));
  std::printf("checkpoint: %s  digest: %s\n", ckpt_stem.c_str(),
              hex64(cclm::checkpoint_digest(model)).c_str());
  return 0;
}

// Loads a checkpoint for inference against a corpus, re-gridding the image
// positions when the corpus resolution differs from training.
cclm::CclmModel load_model_for(const cclm::SyntheticCorpus& corpus, const std::string& stem) {
  auto model = cclm::load_checkpoint(stem);
  check_model_corpus(model.cfg, corpus);
  if (model.cfg.image_size != corpus.spec.image_size) {
    std::printf("re-gridding image positions: %d -> %d\n", model.cfg.image_size,
                corpus.spec.image_size);
    cclm::resize_image_grid(model, corpus.spec.image_size);
  }
  return model;
}

int cmd_eval(const RunConfig& rc, const std::string& checkpoint, const std::string& corpus_dir,
             const std::string& split_name, const std::string& out) {
  auto corpus = load_verified_corpus(corpus_dir, rc);
  auto model = load_model_for(corpus, checkpoint);
  const auto& split = pick_split(corpus, split_name);
  const auto report = cclm::retrieval_eval(model, corpus, split, rc.geti("eval.top_k"));
  cclm::save_eval_report(out, report);

  std::printf("split=%s  items=%d  top_k=%d\n", split_name.c_str(), report.items, report.top_k);
  std::printf("%-8s %-12s %23s %23s\n", "lang", "avg_recall", "image->text r1/r5/r10",
              "text->image r1/r5/r10");
  for (const auto& [lang, lr] : report.languages) {
    std::printf("%-8s %-12.4f %7.3f %7.3f %7.3f %7.3f %7.3f %7.3f\n",
                corpus.languages[static_cast<size_t>(lang)].name.c_str(), lr.average_recall,
                lr.image_to_text.r1, lr.image_to_text.r5, lr.image_to_text.r10,
                lr.text_to_image.r1, lr.text_to_image.r5, lr.text_to_image.r10);
  }
  if (report.languages.size() > 1) {
    std::printf("transfer average recall: %.4f\n", cclm::transfer_average_recall(report));
    for (const auto& [lang, gap] : cclm::transfer_gap(report)) {
      if (lang == report.pivot_lang) continue;
      std::printf("transfer gap %s: %.4f\n",
                  corpus.languages[static_cast<size_t>(lang)].name.c_str(), gap);
    }
  }
  std::printf("report: %s\n", out.c_str());
  return 0;
}

int cmd_export(const RunConfig& rc, const std::string& checkpoint, const std::string& corpus_dir,
               const std::string& split_name, const std::string& out) {
  auto corpus = load_verified_corpus(corpus_dir, rc);
  auto model = load_model_for(corpus, checkpoint);
  const auto& split = pick_split(corpus, split_name);
  cclm::export_embeddings(model, corpus, split, out);
  const size_t rows = split.scene_ids.size() * (1 + corpus.languages.size());
  std::printf("embeddings: %s (%zu rows + header)\n", out.c_str(), rows);
  return 0;
}

int cmd_gradcheck(const RunConfig& rc, const std::string& corrupt) {
  if (!corrupt.empty()) cclm::set_backward_fault(corrupt);
  auto checks = cclm::primitive_grad_checks();
  checks.push_back(cclm::total_loss_grad_check(model_config_from(rc),
                                               rc.getd("gradcheck.sample_fraction"),
                                               rc.getu("seed")));
  cclm::clear_backward_fault();

  int failed = 0;
  for (const auto& check : checks) {
    const bool ok = check.report.ok;
    failed += ok ? 0 : 1;
    std::printf("%s %-26s max_rel_err %.3e  coords %" PRId64 "\n", ok ? "PASS" : "FAIL",
                check.name.c_str(), check.report.max_rel_err, check.report.coords_checked);
    if (!check.report.note.empty()) std::printf("     note: %s\n", check.report.note.c_str());
    for (const auto& issue : check.report.worst) {
      std::printf("     input %d coord %" PRId64 ": analytic %.6e numeric %.6e rel %.3e\n",
                  issue.input, issue.coord, issue.analytic, issue.numeric, issue.rel_err);
    }
  }
  std::printf("gradcheck: %zu checks, %d failed\n", checks.size(), failed);
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal/multilingual retrieval: synthetic corpora, training, evaluation"};
  app.require_subcommand(1);

  std::string config_path, out_path, corpus_dir, checkpoint, split = "test";
  std::string ablation_override, corrupt_op;
  bool resume = false;
  int64_t stop_after = 0;

  auto* gen = app.add_subcommand("gen-data", "synthesize a corpus and write it with a manifest");
  gen->add_option("--config", config_path, "flat dotted-key JSON configuration");
  gen->add_option("--out", out_path, "output directory")->required();

  auto* train = app.add_subcommand("train", "optimize a model on a generated corpus");
  train->add_option("--config", config_path, "flat dotted-key JSON configuration");
  train->add_option("--corpus", corpus_dir, "corpus directory from gen-data")->required();
  train->add_option("--out", out_path, "run directory for checkpoint, state and logs")->required();
  train->add_flag("--resume", resume, "continue from checkpoint + optimizer state in --out");
  train->add_option("--ablation", ablation_override, "override train.ablation for this run");
  train->add_option("--stop-after", stop_after,
                    "pause after this many steps; the schedule keeps spanning train.steps");

  auto* ev = app.add_subcommand("eval", "two-stage retrieval metrics for a checkpoint");
  ev->add_option("--config", config_path, "flat dotted-key JSON configuration");
  ev->add_option("--checkpoint", checkpoint, "checkpoint stem (no extension)")->required();
  ev->add_option("--corpus", corpus_dir, "corpus directory")->required();
  ev->add_option("--split", split, "train, dev or test (default test)");
  ev->add_option("--out", out_path, "report JSON path")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of every backward rule");
  gc->add_option("--config", config_path, "flat dotted-key JSON configuration");
  gc->add_option("--corrupt-backward", corrupt_op, "")->group("");  // fault-injection hook

  auto* ex = app.add_subcommand("export-embeddings", "pooled encoder embeddings as TSV");
  ex->add_option("--config", config_path, "flat dotted-key JSON configuration");
  ex->add_option("--checkpoint", checkpoint, "checkpoint stem (no extension)")->required();
  ex->add_option("--corpus", corpus_dir, "corpus directory")->required();
  ex->add_option("--split", split, "train, dev or test (default test)");
  ex->add_option("--out", out_path, "TSV output path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig rc = load_run_config(config_path);
    if (gen->parsed()) return cmd_gen_data(std::move(rc), out_path);
    if (train->parsed()) {
      return cmd_train(std::move(rc), corpus_dir, out_path, resume, ablation_override,
                       stop_after);
    }
    if (ev->parsed()) return cmd_eval(rc, checkpoint, corpus_dir, split, out_path);
    if (gc->parsed()) return cmd_gradcheck(rc, corrupt_op);
    if (ex->parsed()) return cmd_export(rc, checkpoint, corpus_dir, split, out_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
