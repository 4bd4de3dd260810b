#include "cclm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

using nlohmann::json;

namespace cclm {

namespace {

const char* kShapeNames[kNumShapes] = {"circle", "square", "triangle", "cross"};

int concept_color(int c) { return c; }
int concept_shape(ShapeKind s) { return kNumColors + static_cast<int>(s); }
int concept_cell(int cell) { return kNumColors + kNumShapes + cell; }

void validate_scene(const ConceptScene& scene) {
  if (scene.objects.empty() || scene.objects.size() > 3) {
    throw std::runtime_error("scene: needs 1..3 objects, got " +
                             std::to_string(scene.objects.size()));
  }
  std::set<int> cells;
  int prev = -1;
  for (const auto& o : scene.objects) {
    if (o.color < 0 || o.color >= kNumColors) throw std::runtime_error("scene: bad color");
    if (o.cell < 0 || o.cell >= kGridCells) throw std::runtime_error("scene: bad cell");
    if (!cells.insert(o.cell).second) throw std::runtime_error("scene: duplicate cell");
    if (o.cell < prev) throw std::runtime_error("scene: objects not in row-major order");
    prev = o.cell;
  }
}

}  // namespace

std::vector<int> concept_caption(const ConceptScene& scene) {
  validate_scene(scene);
  std::vector<int> out;
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    if (i > 0) out.push_back(kConceptConj);
    const auto& o = scene.objects[i];
    out.push_back(concept_color(o.color));
    out.push_back(concept_shape(o.shape));
    out.push_back(kConceptAt);
    out.push_back(concept_cell(o.cell));
  }
  return out;
}

ConceptScene parse_concept_caption(const std::vector<int>& concepts) {
  ConceptScene scene;
  size_t i = 0;
  while (i < concepts.size()) {
    if (!scene.objects.empty()) {
      if (concepts[i] != kConceptConj) throw std::runtime_error("parse: expected conjunction");
      ++i;
    }
    if (i + 4 > concepts.size()) throw std::runtime_error("parse: truncated object phrase");
    SceneObject o;
    const int c = concepts[i], s = concepts[i + 1], at = concepts[i + 2], p = concepts[i + 3];
    if (c < 0 || c >= kNumColors) throw std::runtime_error("parse: expected color");
    if (s < kNumColors || s >= kNumColors + kNumShapes) throw std::runtime_error("parse: expected shape");
    if (at != kConceptAt) throw std::runtime_error("parse: expected 'at'");
    if (p < kNumColors + kNumShapes || p >= kConceptAt) throw std::runtime_error("parse: expected cell");
    o.color = c;
    o.shape = static_cast<ShapeKind>(s - kNumColors);
    o.cell = p - kNumColors - kNumShapes;
    scene.objects.push_back(o);
    i += 4;
  }
  validate_scene(scene);
  return scene;
}

namespace {

const SyntheticLanguage& get_lang(const SyntheticCorpus& corpus, int lang) {
  if (lang < 0 || lang >= static_cast<int>(corpus.languages.size())) {
    throw std::runtime_error("language " + std::to_string(lang) + " is not registered");
  }
  return corpus.languages[static_cast<size_t>(lang)];
}

int surface_id(const SyntheticLanguage& L, int concept_id) {
  return kNumSpecials + L.id * kConceptTokens + L.perm[static_cast<size_t>(concept_id)];
}

std::vector<int> surface_body(const SyntheticCorpus& corpus, const std::vector<int>& concepts,
                              int lang) {
  const auto& L = get_lang(corpus, lang);
  std::vector<int> body;
  body.reserve(concepts.size());
  for (int c : concepts) body.push_back(surface_id(L, c));
  if (L.reverse_order) std::reverse(body.begin(), body.end());
  return body;
}

std::vector<int> wrap(std::vector<int> body) {
  body.insert(body.begin(), kClsId);
  body.push_back(kSepId);
  return body;
}

}  // namespace

std::vector<int> caption(const SyntheticCorpus& corpus, const ConceptScene& scene, int lang) {
  auto ids = wrap(surface_body(corpus, concept_caption(scene), lang));
  if (static_cast<int>(ids.size()) > corpus.spec.max_caption_len) {
    throw std::runtime_error("caption: " + std::to_string(ids.size()) + " tokens exceeds limit " +
                             std::to_string(corpus.spec.max_caption_len));
  }
  return ids;
}

ConceptScene parse_caption(const SyntheticCorpus& corpus, const std::vector<int>& ids) {
  std::vector<int> body;
  for (int id : ids) {
    if (id == kClsId || id == kSepId) continue;
    if (id < kNumSpecials) throw std::runtime_error("parse: unexpected special token");
    body.push_back(id);
  }
  if (body.empty()) throw std::runtime_error("parse: empty caption");
  const int lang = (body[0] - kNumSpecials) / kConceptTokens;
  const auto& L = get_lang(corpus, lang);
  if (L.reverse_order) std::reverse(body.begin(), body.end());
  std::vector<int> inverse(static_cast<size_t>(kConceptTokens));
  for (int c = 0; c < kConceptTokens; ++c) inverse[static_cast<size_t>(L.perm[static_cast<size_t>(c)])] = c;
  std::vector<int> concepts;
  for (int id : body) {
    const int off = id - kNumSpecials - lang * kConceptTokens;
    if (off < 0 || off >= kConceptTokens) {
      throw std::runtime_error("parse: caption mixes languages");
    }
    concepts.push_back(inverse[static_cast<size_t>(off)]);
  }
  return parse_concept_caption(concepts);
}

ParallelExample make_parallel_pair(const SyntheticCorpus& corpus, const std::vector<int>& concepts,
                                   int lang_a, int lang_b) {
  if (lang_a == lang_b) throw std::runtime_error("parallel pair: languages must differ");
  ParallelExample ex;
  ex.lang_a = lang_a;
  ex.lang_b = lang_b;
  ex.ids_a = wrap(surface_body(corpus, concepts, lang_a));
  ex.ids_b = wrap(surface_body(corpus, concepts, lang_b));
  const int combined = static_cast<int>(ex.ids_a.size() + ex.ids_b.size()) - 1;
  if (combined > corpus.spec.max_pair_len) {
    throw std::runtime_error("parallel pair: " + std::to_string(combined) +
                             " combined tokens exceeds limit " +
                             std::to_string(corpus.spec.max_pair_len));
  }
  return ex;
}

std::vector<int> concat_pair(const std::vector<int>& ids_a, const std::vector<int>& ids_b) {
  if (ids_a.empty() || ids_b.empty() || ids_a[0] != kClsId || ids_b[0] != kClsId) {
    throw std::runtime_error("concat_pair: sides must start with [CLS]");
  }
  std::vector<int> out = ids_a;
  out.insert(out.end(), ids_b.begin() + 1, ids_b.end());
  return out;
}

// ------------------------------------------------------------- rendering

float palette_intensity(int color) {
  if (color < 0 || color >= kNumColors) throw std::runtime_error("palette: bad color index");
  return 0.3f + static_cast<float>(color) * (0.7f / (kNumColors - 1));
}

namespace {

bool inside_shape(ShapeKind shape, double u, double v) {
  const double du = u - 0.5, dv = v - 0.5;
  switch (shape) {
    case ShapeKind::circle:
      return du * du + dv * dv <= 0.35 * 0.35;
    case ShapeKind::square:
      return std::abs(du) <= 0.35 && std::abs(dv) <= 0.35;
    case ShapeKind::triangle:
      return v >= 0.15 && v <= 0.85 && std::abs(du) <= 0.38 * (v - 0.15) / 0.7;
    case ShapeKind::cross:
      return (std::abs(du) <= 0.14 && std::abs(dv) <= 0.38) ||
             (std::abs(dv) <= 0.14 && std::abs(du) <= 0.38);
  }
  return false;
}

}  // namespace

std::vector<float> render_scene(const ConceptScene& scene, int size) {
  validate_scene(scene);
  if (size < kGridSide || size % kGridSide != 0) {
    throw std::runtime_error("render: size must be a positive multiple of " +
                             std::to_string(kGridSide));
  }
  const int cell_px = size / kGridSide;
  std::vector<float> image(static_cast<size_t>(3) * size * size, 0.0f);
  for (const auto& o : scene.objects) {
    const int row = o.cell / kGridSide, col = o.cell % kGridSide;
    const float value = palette_intensity(o.color);
    for (int y = 0; y < cell_px; ++y) {
      for (int x = 0; x < cell_px; ++x) {
        const double u = (x + 0.5) / cell_px, v = (y + 0.5) / cell_px;
        if (!inside_shape(o.shape, u, v)) continue;
        const size_t px = static_cast<size_t>(row * cell_px + y) * size + (col * cell_px + x);
        for (int c = 0; c < 3; ++c) {
          image[static_cast<size_t>(c) * size * size + px] = value;
        }
      }
    }
  }
  return image;
}

// --------------------------------------------------------------- masking

MaskedSeq mask_tokens(const std::vector<int>& ids, double rate, Rng& rng, const Vocab& vocab) {
  if (!(rate > 0.0 && rate < 1.0)) throw std::runtime_error("mask_tokens: rate must be in (0,1)");
  MaskedSeq out;
  out.ids = ids;
  out.targets.assign(ids.size(), -1);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < kNumSpecials) continue;  // specials are never masked
    if (!rng.bernoulli(rate)) continue;
    out.targets[i] = ids[i];
    const double u = rng.uniform();
    if (u < 0.8) {
      out.ids[i] = kMaskId;
    } else if (u < 0.9) {
      out.ids[i] = kNumSpecials + static_cast<int>(rng.below(static_cast<uint64_t>(vocab.surface_count())));
    }  // else keep the original token
  }
  return out;
}

// ---------------------------------------------------------------- corpus

namespace {

std::string scene_signature(const ConceptScene& s) {
  std::string sig;
  for (const auto& o : s.objects) {
    sig += std::to_string(static_cast<int>(o.shape)) + "," + std::to_string(o.color) + "," +
           std::to_string(o.cell) + ";";
  }
  return sig;
}

ConceptScene random_scene(Rng& rng) {
  ConceptScene s;
  const int k = 1 + static_cast<int>(rng.below(3));
  std::set<int> cells;
  while (static_cast<int>(cells.size()) < k) cells.insert(static_cast<int>(rng.below(kGridCells)));
  for (int cell : cells) {  // std::set iterates in row-major (ascending) order
    SceneObject o;
    o.shape = static_cast<ShapeKind>(rng.below(kNumShapes));
    o.color = static_cast<int>(rng.below(kNumColors));
    o.cell = cell;
    s.objects.push_back(o);
  }
  return s;
}

void check_disjoint(const SyntheticCorpus& c) {
  std::set<int> seen;
  for (const auto* split : {&c.train, &c.dev, &c.test}) {
    for (int id : split->scene_ids) {
      if (!seen.insert(id).second) {
        throw std::runtime_error("corpus: scene " + std::to_string(id) +
                                 " appears in more than one split");
      }
    }
  }
}

}  // namespace

SyntheticCorpus build_corpus(const CorpusSpec& spec) {
  if (spec.n_train < 1 || spec.n_dev < 0 || spec.n_test < 1) {
    throw std::runtime_error("corpus: split sizes must be positive");
  }
  if (spec.n_languages < 1 || spec.n_languages > 20) {
    throw std::runtime_error("corpus: need 1..20 languages");
  }
  if (spec.n_parallel > 0 && spec.n_languages < 2) {
    throw std::runtime_error("corpus: parallel pairs need at least 2 languages");
  }
  SyntheticCorpus corpus;
  corpus.spec = spec;
  RngPool pool(spec.seed);
  Rng& rng = pool.stream("corpus");

  // languages: 0 is the pivot; transfer languages alternate word order
  for (int l = 0; l < spec.n_languages; ++l) {
    SyntheticLanguage L;
    L.id = l;
    L.name = std::string(1, static_cast<char>('a' + l));
    L.perm.resize(static_cast<size_t>(kConceptTokens));
    for (int i = 0; i < kConceptTokens; ++i) L.perm[static_cast<size_t>(i)] = i;
    for (int i = kConceptTokens - 1; i > 0; --i) {
      std::swap(L.perm[static_cast<size_t>(i)], L.perm[rng.below(static_cast<uint64_t>(i) + 1)]);
    }
    L.reverse_order = l > 0 && l % 2 == 1;
    corpus.languages.push_back(std::move(L));
  }

  // vocab: specials, then one dense block of 28 surface tokens per language
  corpus.vocab.tokens = {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};
  for (const auto& L : corpus.languages) {
    for (int j = 0; j < kConceptTokens; ++j) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%s%02d", L.name.c_str(), j);
      corpus.vocab.tokens.push_back(buf);
    }
  }
  for (int i = 0; i < corpus.vocab.size(); ++i) {
    corpus.vocab.ids[corpus.vocab.tokens[static_cast<size_t>(i)]] = i;
  }

  // distinct scenes, then contiguous id ranges per split
  const int total = spec.n_train + spec.n_dev + spec.n_test;
  std::set<std::string> signatures;
  while (static_cast<int>(corpus.scenes.size()) < total) {
    ConceptScene s = random_scene(rng);
    if (!signatures.insert(scene_signature(s)).second) continue;
    s.id = static_cast<int>(corpus.scenes.size());
    corpus.scenes.push_back(std::move(s));
  }
  for (int i = 0; i < spec.n_train; ++i) corpus.train.scene_ids.push_back(i);
  for (int i = 0; i < spec.n_dev; ++i) corpus.dev.scene_ids.push_back(spec.n_train + i);
  for (int i = 0; i < spec.n_test; ++i) corpus.test.scene_ids.push_back(spec.n_train + spec.n_dev + i);

  // multimodal examples: pivot-only in train/dev, every language in test
  auto add_mm = [&](CorpusSplit& split, int scene_id, int lang) {
    MultimodalExample ex;
    ex.scene_id = scene_id;
    ex.lang = lang;
    ex.caption = caption(corpus, corpus.scenes[static_cast<size_t>(scene_id)], lang);
    split.multimodal.push_back(std::move(ex));
  };
  for (int id : corpus.train.scene_ids) add_mm(corpus.train, id, 0);
  for (int id : corpus.dev.scene_ids) add_mm(corpus.dev, id, 0);
  for (int id : corpus.test.scene_ids) {
    for (int l = 0; l < spec.n_languages; ++l) add_mm(corpus.test, id, l);
  }

  // parallel pairs: pivot paired with each transfer language in turn,
  // concept sentences cycling over train scenes
  for (int k = 0; k < spec.n_parallel; ++k) {
    const int scene_id = corpus.train.scene_ids[static_cast<size_t>(k) % corpus.train.scene_ids.size()];
    const int lang_b = 1 + k % (spec.n_languages - 1);
    auto ex = make_parallel_pair(
        corpus, concept_caption(corpus.scenes[static_cast<size_t>(scene_id)]), 0, lang_b);
    ex.scene_id = scene_id;
    corpus.train.parallel.push_back(std::move(ex));
  }

  check_disjoint(corpus);
  return corpus;
}

// ----------------------------------------------------------- persistence

namespace {

json scene_to_json(const ConceptScene& s, int image_size, bool inline_image) {
  json jo = json::array();
  for (const auto& o : s.objects) {
    jo.push_back({{"shape", kShapeNames[static_cast<int>(o.shape)]},
                  {"color", o.color},
                  {"cell", o.cell}});
  }
  json out{{"id", s.id}, {"objects", jo}};
  if (inline_image) {
    const auto img = render_scene(s, image_size);
    std::string hex;
    hex.reserve(img.size() * 8);
    for (float v : img) {
      uint32_t bits;
      static_assert(sizeof(bits) == sizeof(v));
      std::memcpy(&bits, &v, sizeof(bits));
      char buf[9];
      std::snprintf(buf, sizeof(buf), "%08x", bits);
      hex += buf;
    }
    out["image"] = hex;
  }
  return out;
}

ConceptScene scene_from_json(const json& j) {
  ConceptScene s;
  s.id = j.at("id").get<int>();
  for (const auto& jo : j.at("objects")) {
    SceneObject o;
    const std::string name = jo.at("shape").get<std::string>();
    int shape = -1;
    for (int k = 0; k < kNumShapes; ++k) {
      if (name == kShapeNames[k]) shape = k;
    }
    if (shape < 0) throw std::runtime_error("corpus file: unknown shape '" + name + "'");
    o.shape = static_cast<ShapeKind>(shape);
    o.color = jo.at("color").get<int>();
    o.cell = jo.at("cell").get<int>();
    s.objects.push_back(o);
  }
  validate_scene(s);
  return s;
}

json split_to_json(const SyntheticCorpus& corpus, const CorpusSplit& split, bool inline_images) {
  json scenes = json::array();
  for (int id : split.scene_ids) {
    scenes.push_back(scene_to_json(corpus.scenes[static_cast<size_t>(id)], corpus.spec.image_size,
                                   inline_images));
  }
  json mm = json::array();
  for (const auto& ex : split.multimodal) {
    mm.push_back({{"scene", ex.scene_id}, {"lang", ex.lang}, {"caption", ex.caption}});
  }
  json pp = json::array();
  for (const auto& ex : split.parallel) {
    pp.push_back({{"scene", ex.scene_id},
                  {"lang_a", ex.lang_a},
                  {"lang_b", ex.lang_b},
                  {"ids_a", ex.ids_a},
                  {"ids_b", ex.ids_b}});
  }
  return json{{"scenes", scenes}, {"multimodal", mm}, {"parallel", pp}};
}

void split_from_json(const json& j, SyntheticCorpus& corpus, CorpusSplit& split) {
  for (const auto& js : j.at("scenes")) {
    ConceptScene s = scene_from_json(js);
    split.scene_ids.push_back(s.id);
    if (s.id < 0) throw std::runtime_error("corpus file: negative scene id");
    if (static_cast<size_t>(s.id) >= corpus.scenes.size()) {
      corpus.scenes.resize(static_cast<size_t>(s.id) + 1);
    }
    corpus.scenes[static_cast<size_t>(s.id)] = std::move(s);
  }
  for (const auto& jm : j.at("multimodal")) {
    MultimodalExample ex;
    ex.scene_id = jm.at("scene").get<int>();
    ex.lang = jm.at("lang").get<int>();
    ex.caption = jm.at("caption").get<std::vector<int>>();
    split.multimodal.push_back(std::move(ex));
  }
  for (const auto& jp : j.at("parallel")) {
    ParallelExample ex;
    ex.scene_id = jp.at("scene").get<int>();
    ex.lang_a = jp.at("lang_a").get<int>();
    ex.lang_b = jp.at("lang_b").get<int>();
    ex.ids_a = jp.at("ids_a").get<std::vector<int>>();
    ex.ids_b = jp.at("ids_b").get<std::vector<int>>();
    split.parallel.push_back(std::move(ex));
  }
}

json spec_to_json(const CorpusSpec& s) {
  return json{{"n_train", s.n_train},
              {"n_dev", s.n_dev},
              {"n_test", s.n_test},
              {"n_parallel", s.n_parallel},
              {"n_languages", s.n_languages},
              {"image_size", s.image_size},
              {"max_caption_len", s.max_caption_len},
              {"max_pair_len", s.max_pair_len},
              {"mask_rate", s.mask_rate},
              {"seed", s.seed}};
}

CorpusSpec spec_from_json(const json& j) {
  CorpusSpec s;
  s.n_train = j.at("n_train").get<int>();
  s.n_dev = j.at("n_dev").get<int>();
  s.n_test = j.at("n_test").get<int>();
  s.n_parallel = j.at("n_parallel").get<int>();
  s.n_languages = j.at("n_languages").get<int>();
  s.image_size = j.at("image_size").get<int>();
  s.max_caption_len = j.at("max_caption_len").get<int>();
  s.max_pair_len = j.at("max_pair_len").get<int>();
  s.mask_rate = j.at("mask_rate").get<double>();
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return json::parse(in);
}

}  // namespace

void save_corpus(const std::string& dir, const SyntheticCorpus& corpus, bool inline_images) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json root{{"format", "cclm-corpus-v1"}, {"spec", spec_to_json(corpus.spec)}};
  json langs = json::array();
  for (const auto& L : corpus.languages) {
    langs.push_back({{"id", L.id},
                     {"name", L.name},
                     {"perm", L.perm},
                     {"reverse_order", L.reverse_order}});
  }
  root["languages"] = langs;
  root["vocab"] = corpus.vocab.tokens;
  write_file((fs::path(dir) / "corpus.json").string(), root.dump(2) + "\n");
  const char* names[3] = {"train.json", "dev.json", "test.json"};
  const CorpusSplit* splits[3] = {&corpus.train, &corpus.dev, &corpus.test};
  for (int i = 0; i < 3; ++i) {
    write_file((fs::path(dir) / names[i]).string(),
               split_to_json(corpus, *splits[i], inline_images).dump(2) + "\n");
  }
}

SyntheticCorpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  json root = read_json((fs::path(dir) / "corpus.json").string());
  if (root.value("format", "") != "cclm-corpus-v1") {
    throw std::runtime_error("corpus file: unknown format tag");
  }
  SyntheticCorpus corpus;
  corpus.spec = spec_from_json(root.at("spec"));
  for (const auto& jl : root.at("languages")) {
    SyntheticLanguage L;
    L.id = jl.at("id").get<int>();
    L.name = jl.at("name").get<std::string>();
    L.perm = jl.at("perm").get<std::vector<int>>();
    L.reverse_order = jl.at("reverse_order").get<bool>();
    corpus.languages.push_back(std::move(L));
  }
  corpus.vocab.tokens = root.at("vocab").get<std::vector<std::string>>();
  for (int i = 0; i < corpus.vocab.size(); ++i) {
    corpus.vocab.ids[corpus.vocab.tokens[static_cast<size_t>(i)]] = i;
  }
  const char* names[3] = {"train.json", "dev.json", "test.json"};
  CorpusSplit* splits[3] = {&corpus.train, &corpus.dev, &corpus.test};
  for (int i = 0; i < 3; ++i) {
    split_from_json(read_json((fs::path(dir) / names[i]).string()), corpus, *splits[i]);
  }
  check_disjoint(corpus);
  return corpus;
}

uint64_t corpus_digest(const SyntheticCorpus& corpus) {
  json root{{"spec", spec_to_json(corpus.spec)}, {"vocab", corpus.vocab.tokens}};
  json langs = json::array();
  for (const auto& L : corpus.languages) {
    langs.push_back({{"id", L.id}, {"name", L.name}, {"perm", L.perm},
                     {"reverse_order", L.reverse_order}});
  }
  root["languages"] = langs;
  const CorpusSplit* splits[3] = {&corpus.train, &corpus.dev, &corpus.test};
  json js = json::array();
  for (const auto* s : splits) js.push_back(split_to_json(corpus, *s, false));
  root["splits"] = js;
  return RngPool::fnv1a(root.dump());
}

// ---------------------------------------------------------------- batches

BatchStream::BatchStream(const SyntheticCorpus& corpus, int batch_size, double mix_ratio,
                         uint64_t seed)
    : corpus_(&corpus), batch_size_(batch_size), mix_ratio_(mix_ratio), pool_(seed) {
  if (batch_size < 1) throw std::runtime_error("batch stream: batch size must be positive");
  if (!(mix_ratio >= 0.0 && mix_ratio <= 1.0)) {
    throw std::runtime_error("batch stream: mix ratio must lie in [0,1]");
  }
  if (mix_ratio < 1.0 && corpus.train.multimodal.empty()) {
    throw std::runtime_error("batch stream: multimodal train split is empty");
  }
  if (mix_ratio > 0.0 && corpus.train.parallel.empty()) {
    throw std::runtime_error("batch stream: parallel train split is empty");
  }
  batching_ = &pool_.stream("batching");
  masking_ = &pool_.stream("masking");
  cm_order_.resize(corpus.train.multimodal.size());
  for (size_t i = 0; i < cm_order_.size(); ++i) cm_order_[i] = static_cast<int>(i);
  cl_order_.resize(corpus.train.parallel.size());
  for (size_t i = 0; i < cl_order_.size(); ++i) cl_order_[i] = static_cast<int>(i);
}

int BatchStream::draw_index(ViewKind kind) {
  auto& order = kind == ViewKind::cross_modal ? cm_order_ : cl_order_;
  auto& cursor = kind == ViewKind::cross_modal ? cm_cursor_ : cl_cursor_;
  if (cursor >= order.size()) cursor = 0;
  if (cursor == 0) {  // new epoch: reshuffle
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[batching_->below(i)]);
    }
  }
  return order[cursor++];
}

Batch BatchStream::next() {
  Batch batch;
  batch.kind = batching_->bernoulli(mix_ratio_) ? ViewKind::cross_lingual : ViewKind::cross_modal;
  const auto& spec = corpus_->spec;
  if (batch.kind == ViewKind::cross_modal) {
    for (int k = 0; k < batch_size_; ++k) {
      const auto& ex = corpus_->train.multimodal[static_cast<size_t>(draw_index(batch.kind))];
      CrossModalItem item;
      auto it = image_cache_.find(ex.scene_id);
      if (it == image_cache_.end()) {
        it = image_cache_
                 .emplace(ex.scene_id,
                          render_scene(corpus_->scenes[static_cast<size_t>(ex.scene_id)],
                                       spec.image_size))
                 .first;
      }
      item.image = it->second;
      item.caption = ex.caption;
      item.masked_caption = mask_tokens(ex.caption, spec.mask_rate, *masking_, corpus_->vocab);
      batch.cm.push_back(std::move(item));
    }
    cm_batches_++;
  } else {
    for (int k = 0; k < batch_size_; ++k) {
      const auto& ex = corpus_->train.parallel[static_cast<size_t>(draw_index(batch.kind))];
      CrossLingualItem item;
      // the masked (query) side is chosen uniformly per example
      const bool mask_a = masking_->bernoulli(0.5);
      item.text_a = mask_a ? ex.ids_a : ex.ids_b;
      item.text_b = mask_a ? ex.ids_b : ex.ids_a;
      item.masked_a = mask_tokens(item.text_a, spec.mask_rate, *masking_, corpus_->vocab);
      batch.cl.push_back(std::move(item));
    }
    cl_batches_++;
  }
  return batch;
}

BatchStreamState BatchStream::state() const {
  BatchStreamState st;
  st.rng = pool_.states();
  st.cm_order = cm_order_;
  st.cl_order = cl_order_;
  st.cm_cursor = cm_cursor_;
  st.cl_cursor = cl_cursor_;
  st.cm_batches = cm_batches_;
  st.cl_batches = cl_batches_;
  return st;
}

void BatchStream::restore(const BatchStreamState& st) {
  if (st.cm_order.size() != cm_order_.size() || st.cl_order.size() != cl_order_.size()) {
    throw std::runtime_error("batch stream: saved state does not match the corpus");
  }
  pool_.restore(st.rng);
  cm_order_ = st.cm_order;
  cl_order_ = st.cl_order;
  cm_cursor_ = static_cast<size_t>(st.cm_cursor);
  cl_cursor_ = static_cast<size_t>(st.cl_cursor);
  cm_batches_ = st.cm_batches;
  cl_batches_ = st.cl_batches;
}

}  // namespace cclm
