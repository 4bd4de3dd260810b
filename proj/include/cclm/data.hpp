#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cclm/objectives.hpp"
#include "cclm/rng.hpp"

namespace cclm {

// ---- token space ----
// Specials occupy ids 0..4; every language then owns a contiguous block of
// surface ids, so surface vocabularies never overlap across languages.
constexpr int kPadId = 0;
constexpr int kClsId = 1;
constexpr int kSepId = 2;
constexpr int kMaskId = 3;
constexpr int kUnkId = 4;
constexpr int kNumSpecials = 5;

// Concept tokens (language-independent): 6 colors, 4 shapes, 16 grid cells,
// "at", and the conjunction that joins object phrases.
constexpr int kNumColors = 6;
constexpr int kNumShapes = 4;
constexpr int kGridSide = 4;
constexpr int kGridCells = kGridSide * kGridSide;
constexpr int kConceptAt = kNumColors + kNumShapes + kGridCells;
constexpr int kConceptConj = kConceptAt + 1;
constexpr int kConceptTokens = kConceptConj + 1;

enum class ShapeKind { circle = 0, square = 1, triangle = 2, cross = 3 };

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  int color = 0;  // palette index, 0..5
  int cell = 0;   // row-major cell on the 4x4 grid
};

struct ConceptScene {
  int id = -1;
  std::vector<SceneObject> objects;  // 1..3, canonical row-major order, unique cells
};

struct SyntheticLanguage {
  int id = 0;
  std::string name;        // also the surface-token prefix
  std::vector<int> perm;   // concept index -> surface index within the block
  bool reverse_order = false;
};

struct Vocab {
  std::vector<std::string> tokens;       // id -> surface string
  std::map<std::string, int> ids;        // surface string -> id
  int size() const { return static_cast<int>(tokens.size()); }
  int surface_count() const { return size() - kNumSpecials; }
};

struct MultimodalExample {
  int scene_id = -1;
  int lang = 0;
  std::vector<int> caption;  // [CLS] body [SEP]
};

struct ParallelExample {
  int scene_id = -1;
  int lang_a = 0, lang_b = 0;
  std::vector<int> ids_a, ids_b;  // each [CLS] body [SEP]
};

struct CorpusSplit {
  std::vector<int> scene_ids;
  std::vector<MultimodalExample> multimodal;
  std::vector<ParallelExample> parallel;
};

struct CorpusSpec {
  int n_train = 64;
  int n_dev = 16;
  int n_test = 16;
  int n_parallel = 128;
  int n_languages = 3;  // language 0 is the pivot
  int image_size = 32;
  int max_caption_len = 16;
  int max_pair_len = 32;
  double mask_rate = 0.15;
  uint64_t seed = 1;
};

struct SyntheticCorpus {
  CorpusSpec spec;
  std::vector<ConceptScene> scenes;  // indexed by scene id
  std::vector<SyntheticLanguage> languages;
  Vocab vocab;
  CorpusSplit train, dev, test;
};

// ---- scene language ----

// Per object: color, shape, "at", cell; objects joined by the conjunction.
std::vector<int> concept_caption(const ConceptScene& scene);
ConceptScene parse_concept_caption(const std::vector<int>& concepts);

// Concept sequence mapped through the language bijection and word-order
// rule, wrapped in [CLS] ... [SEP].
std::vector<int> caption(const SyntheticCorpus& corpus, const ConceptScene& scene, int lang);
// Inverts a caption; the language is recovered from the surface ids.
ConceptScene parse_caption(const SyntheticCorpus& corpus, const std::vector<int>& ids);

// Exact translations of one concept sentence into two languages.
ParallelExample make_parallel_pair(const SyntheticCorpus& corpus,
                                   const std::vector<int>& concepts, int lang_a, int lang_b);

// [CLS] a-body [SEP] b-body [SEP] for translation-masking batches.
std::vector<int> concat_pair(const std::vector<int>& ids_a, const std::vector<int>& ids_b);

// ---- rendering ----

// Grayscale palette replicated over 3 channels, [3*size*size], row-major per
// channel. Background is zero; objects fill their grid cell.
std::vector<float> render_scene(const ConceptScene& scene, int size = 32);
float palette_intensity(int color);

// ---- masking ----

// Independent Bernoulli(rate) over non-special positions; of the chosen
// positions 80% become [MASK], 10% a random surface token, 10% stay put.
MaskedSeq mask_tokens(const std::vector<int>& ids, double rate, Rng& rng, const Vocab& vocab);

// ---- corpus ----

SyntheticCorpus build_corpus(const CorpusSpec& spec);
uint64_t corpus_digest(const SyntheticCorpus& corpus);

void save_corpus(const std::string& dir, const SyntheticCorpus& corpus,
                 bool inline_images = false);
SyntheticCorpus load_corpus(const std::string& dir);

// ---- batches ----

// Everything needed to resume a batch stream mid-epoch exactly.
struct BatchStreamState {
  RngPool::StateMap rng;
  std::vector<int> cm_order, cl_order;
  uint64_t cm_cursor = 0, cl_cursor = 0;
  int64_t cm_batches = 0, cl_batches = 0;
};

// Draws homogeneous batches: each step is cross-lingual with probability
// mix_ratio, cross-modal otherwise. Within a kind, examples are visited in
// shuffled order without replacement, reshuffling at epoch boundaries.
class BatchStream {
 public:
  BatchStream(const SyntheticCorpus& corpus, int batch_size, double mix_ratio, uint64_t seed);
  Batch next();

  int64_t cross_modal_batches() const { return cm_batches_; }
  int64_t cross_lingual_batches() const { return cl_batches_; }

  BatchStreamState state() const;
  void restore(const BatchStreamState& st);

 private:
  int draw_index(ViewKind kind);

  const SyntheticCorpus* corpus_;
  int batch_size_;
  double mix_ratio_;
  RngPool pool_;
  Rng* batching_;
  Rng* masking_;
  std::vector<int> cm_order_, cl_order_;
  size_t cm_cursor_ = 0, cl_cursor_ = 0;
  int64_t cm_batches_ = 0, cl_batches_ = 0;
  std::map<int, std::vector<float>> image_cache_;
};

}  // namespace cclm
