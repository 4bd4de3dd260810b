#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

const fs::path& work_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "cclm_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

CliResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path so = work_dir() / ("out" + std::to_string(counter) + ".txt");
  const fs::path se = work_dir() / ("err" + std::to_string(counter) + ".txt");
  ++counter;
  const std::string cmd =
      std::string(CCLM_BIN) + " " + args + " >" + so.string() + " 2>" + se.string();
  const int raw = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(so);
  r.err = slurp(se);
  return r;
}

// Small-everything configuration: d=8 model, 8-scene corpus, 2 languages.
json base_config() {
  json cfg;
  cfg["seed"] = 7;
  cfg["model.d_model"] = 8;
  cfg["model.n_heads"] = 2;
  cfg["model.img_layers"] = 1;
  cfg["model.txt_layers"] = 1;
  cfg["model.fusion_layers"] = 1;
  cfg["model.ffn_dim"] = 16;
  cfg["model.proj_dim"] = 6;
  cfg["data.n_train"] = 8;
  cfg["data.n_dev"] = 2;
  cfg["data.n_test"] = 4;
  cfg["data.n_parallel"] = 8;
  cfg["data.n_languages"] = 2;
  cfg["train.steps"] = 6;
  cfg["train.batch_size"] = 2;
  cfg["train.warmup_steps"] = 2;
  cfg["train.peak_lr"] = 1e-3;
  return cfg;
}

fs::path write_config(const std::string& name, const json& cfg) {
  const fs::path path = work_dir() / name;
  spit(path, cfg.dump(2) + "\n");
  return path;
}

// One corpus shared by the suite, generated on first use.
const fs::path& shared_corpus() {
  static fs::path dir = [] {
    const fs::path d = work_dir() / "corpus";
    const auto cfg = write_config("corpus_cfg.json", base_config());
    const auto r = run_cli("gen-data --config " + cfg.string() + " --out " + d.string());
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("gen-data writes a reproducible corpus with manifest and digest") {
  const auto cfg = write_config("gen_cfg.json", base_config());
  const fs::path a = work_dir() / "gen_a" / "nested";  // missing parents get created
  const fs::path b = work_dir() / "gen_b";
  auto ra = run_cli("gen-data --config " + cfg.string() + " --out " + a.string());
  auto rb = run_cli("gen-data --config " + cfg.string() + " --out " + b.string());
  REQUIRE(ra.code == 0);
  REQUIRE(rb.code == 0);

  const json ma = json::parse(slurp(a / "manifest.json"));
  const json mb = json::parse(slurp(b / "manifest.json"));
  CHECK(ma.at("digest") == mb.at("digest"));
  CHECK(ma.at("seed") == 7);
  CHECK(slurp(a / "train.json") == slurp(b / "train.json"));
  CHECK(ra.out.find(ma.at("digest").get<std::string>()) != std::string::npos);

  // the resolved config echoes defaults and overrides together
  const json resolved = json::parse(slurp(a / "resolved.json"));
  CHECK(resolved.at("model.d_model") == 8);
  CHECK(resolved.at("train.mix_ratio") == 0.5);

  // different seed, different content digest
  json other = base_config();
  other["seed"] = 8;
  const auto cfg2 = write_config("gen_cfg2.json", other);
  const fs::path c = work_dir() / "gen_c";
  REQUIRE(run_cli("gen-data --config " + cfg2.string() + " --out " + c.string()).code == 0);
  CHECK(json::parse(slurp(c / "manifest.json")).at("digest") != ma.at("digest"));
}

TEST_CASE("config errors name the offending line or key") {
  const fs::path broken = work_dir() / "broken.json";
  spit(broken, "{\n  \"seed\": 1,\n  oops\n}\n");
  auto r = run_cli("gen-data --config " + broken.string() + " --out " + (work_dir() / "x").string());
  CHECK(r.code != 0);
  CHECK(r.err.find("line 3") != std::string::npos);

  json unknown = base_config();
  unknown["train.stpes"] = 5;
  const auto cfg = write_config("unknown.json", unknown);
  r = run_cli("gen-data --config " + cfg.string() + " --out " + (work_dir() / "x").string());
  CHECK(r.code != 0);
  CHECK(r.err.find("unknown key 'train.stpes'") != std::string::npos);

  json badtype = base_config();
  badtype["train.steps"] = "six";
  const auto cfg2 = write_config("badtype.json", badtype);
  r = run_cli("gen-data --config " + cfg2.string() + " --out " + (work_dir() / "x").string());
  CHECK(r.code != 0);
  CHECK(r.err.find("'train.steps' expects an integer") != std::string::npos);
}

TEST_CASE("training is deterministic and --resume reproduces the straight run") {
  json twelve = base_config();
  twelve["train.steps"] = 12;
  const auto cfg12 = write_config("train12.json", twelve);
  const std::string corpus = shared_corpus().string();

  const fs::path run_a = work_dir() / "run_a";
  const fs::path run_b = work_dir() / "run_b";
  const fs::path run_c = work_dir() / "run_c";
  REQUIRE(run_cli("train --config " + cfg12.string() + " --corpus " + corpus + " --out " +
                  run_a.string())
              .code == 0);
  REQUIRE(run_cli("train --config " + cfg12.string() + " --corpus " + corpus + " --out " +
                  run_b.string())
              .code == 0);
  CHECK(slurp(run_a / "loss_log.tsv") == slurp(run_b / "loss_log.tsv"));
  CHECK(slurp(run_a / "checkpoint.bin") == slurp(run_b / "checkpoint.bin"));
  CHECK(slurp(run_a / "checkpoint.json") == slurp(run_b / "checkpoint.json"));

  // interrupt the 12-step budget at step 6, then resume: same log, same weights
  auto paused = run_cli("train --config " + cfg12.string() + " --corpus " + corpus + " --out " +
                        run_c.string() + " --stop-after 6");
  REQUIRE(paused.code == 0);
  CHECK(paused.out.find("paused at step 6 of 12") != std::string::npos);
  REQUIRE(run_cli("train --config " + cfg12.string() + " --corpus " + corpus + " --out " +
                  run_c.string() + " --resume")
              .code == 0);
  CHECK(slurp(run_c / "loss_log.tsv") == slurp(run_a / "loss_log.tsv"));
  CHECK(slurp(run_c / "checkpoint.bin") == slurp(run_a / "checkpoint.bin"));

  // log layout: header plus one line per step
  std::istringstream log(slurp(run_a / "loss_log.tsv"));
  std::string line;
  int lines = 0;
  bool header_ok = false;
  while (std::getline(log, line)) {
    if (lines == 0) header_ok = line == "step\tview_kind\tL_cl\tL_match\tL_mlm\ttotal\tlr";
    ++lines;
  }
  CHECK(header_ok);
  CHECK(lines == 13);
}

TEST_CASE("the ablation flag switches the batch mix") {
  const auto cfg = write_config("abl_cfg.json", base_config());
  const fs::path run = work_dir() / "run_noparallel";
  auto r = run_cli("train --config " + cfg.string() + " --corpus " + shared_corpus().string() +
                   " --out " + run.string() + " --ablation no_parallel");
  REQUIRE(r.code == 0);
  const std::string log = slurp(run / "loss_log.tsv");
  CHECK(log.find("cross_modal") != std::string::npos);
  CHECK(log.find("cross_lingual") == std::string::npos);
  CHECK(json::parse(slurp(run / "resolved.json")).at("train.ablation") == "no_parallel");

  CHECK(run_cli("train --config " + cfg.string() + " --corpus " + shared_corpus().string() +
                " --out " + (work_dir() / "run_bad").string() + " --ablation nonsense")
            .code != 0);
}

TEST_CASE("a tampered corpus or stale digest expectation refuses to train") {
  const auto cfg = write_config("tamper_cfg.json", base_config());
  const fs::path tampered = work_dir() / "corpus_tampered";
  fs::copy(shared_corpus(), tampered, fs::copy_options::recursive);
  std::string text = slurp(tampered / "train.json");
  const auto pos = text.find("\"lang\": 0");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 9, "\"lang\": 1");
  spit(tampered / "train.json", text);

  auto r = run_cli("train --config " + cfg.string() + " --corpus " + tampered.string() +
                   " --out " + (work_dir() / "run_tampered").string());
  CHECK(r.code != 0);
  CHECK(r.err.find("digest mismatch") != std::string::npos);

  json pinned = base_config();
  pinned["data.expected_digest"] = "0000000000000000";
  const auto cfg2 = write_config("pinned.json", pinned);
  r = run_cli("train --config " + cfg2.string() + " --corpus " + shared_corpus().string() +
              " --out " + (work_dir() / "run_pinned").string());
  CHECK(r.code != 0);
  CHECK(r.err.find("digest mismatch") != std::string::npos);
}

TEST_CASE("eval writes a stable report with sane recalls") {
  const auto cfg = write_config("eval_cfg.json", base_config());
  const std::string corpus = shared_corpus().string();
  const fs::path run = work_dir() / "run_eval";
  REQUIRE(run_cli("train --config " + cfg.string() + " --corpus " + corpus + " --out " +
                  run.string())
              .code == 0);

  const fs::path rep1 = work_dir() / "report1.json";
  const fs::path rep2 = work_dir() / "report2.json";
  const std::string ckpt = (run / "checkpoint").string();
  auto r1 = run_cli("eval --config " + cfg.string() + " --checkpoint " + ckpt + " --corpus " +
                    corpus + " --split test --out " + rep1.string());
  auto r2 = run_cli("eval --config " + cfg.string() + " --checkpoint " + ckpt + " --corpus " +
                    corpus + " --split test --out " + rep2.string());
  REQUIRE(r1.code == 0);
  REQUIRE(r2.code == 0);
  CHECK(slurp(rep1) == slurp(rep2));
  CHECK(r1.out.find("transfer average recall") != std::string::npos);

  const json report = json::parse(slurp(rep1));
  CHECK(report.at("items") == 4);
  REQUIRE(report.at("languages").size() == 2);
  for (const auto& [name, lang] : report.at("languages").items()) {
    for (const char* dir : {"image_to_text", "text_to_image"}) {
      const auto& d = lang.at(dir);
      CHECK(d.at("r1").get<double>() <= d.at("r5").get<double>());
      CHECK(d.at("r5").get<double>() <= d.at("r10").get<double>());
      CHECK(d.at("r10").get<double>() <= 1.0);
    }
  }

  CHECK(run_cli("eval --config " + cfg.string() + " --checkpoint " + (run / "nope").string() +
                " --corpus " + corpus + " --split test --out " + rep2.string())
            .code != 0);
  CHECK(run_cli("eval --config " + cfg.string() + " --checkpoint " + ckpt + " --corpus " +
                corpus + " --split nope --out " + rep2.string())
            .code != 0);
}

TEST_CASE("export-embeddings emits one row per view") {
  const auto cfg = write_config("exp_cfg.json", base_config());
  const std::string corpus = shared_corpus().string();
  const fs::path run = work_dir() / "run_export";
  REQUIRE(run_cli("train --config " + cfg.string() + " --corpus " + corpus + " --out " +
                  run.string())
              .code == 0);
  const std::string ckpt = (run / "checkpoint").string();

  const fs::path tsv1 = work_dir() / "emb1.tsv";
  const fs::path tsv2 = work_dir() / "emb2.tsv";
  REQUIRE(run_cli("export-embeddings --config " + cfg.string() + " --checkpoint " + ckpt +
                  " --corpus " + corpus + " --split test --out " + tsv1.string())
              .code == 0);
  REQUIRE(run_cli("export-embeddings --config " + cfg.string() + " --checkpoint " + ckpt +
                  " --corpus " + corpus + " --split test --out " + tsv2.string())
              .code == 0);
  CHECK(slurp(tsv1) == slurp(tsv2));

  std::istringstream in(slurp(tsv1));
  std::string line;
  int rows = 0;
  bool header_ok = false;
  while (std::getline(in, line)) {
    if (rows == 0) header_ok = line.rfind("id\tmodality\tlanguage\texample", 0) == 0;
    ++rows;
  }
  CHECK(header_ok);
  CHECK(rows == 1 + 4 * (1 + 2));  // header + test scenes x (image + 2 languages)
}

TEST_CASE("gradcheck lists every primitive and honors fault injection") {
  json cfg = base_config();
  cfg["model.vocab_size"] = 16;
  cfg["gradcheck.sample_fraction"] = 0.05;
  const auto path = write_config("gc_cfg.json", cfg);

  auto clean = run_cli("gradcheck --config " + path.string());
  CHECK(clean.code == 0);
  for (const char* op :
       {"add", "sub", "mul", "scale", "mul_scalar", "add_bias", "exp", "log", "gelu", "reshape",
        "transpose", "concat", "slice", "matmul", "sum", "mean", "softmax", "layer_norm",
        "l2_normalize", "embedding_gather", "masked_fill", "cross_entropy_from_logits",
        "total_loss"}) {
    CHECK_MESSAGE(clean.out.find(op) != std::string::npos, "missing op: " << op);
  }
  CHECK(clean.out.find("0 failed") != std::string::npos);
  CHECK(clean.out.find("FAIL") == std::string::npos);

  auto faulty = run_cli("gradcheck --config " + path.string() + " --corrupt-backward softmax");
  CHECK(faulty.code != 0);
  CHECK(faulty.out.find("FAIL") != std::string::npos);
}
