#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cclm/data.hpp"
#include "cclm/model.hpp"

namespace cclm {

struct DirectionRecall {
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;
};

struct LangReport {
  DirectionRecall image_to_text, text_to_image;
  double average_recall = 0.0;  // mean of R@{1,5,10} over both directions
};

struct EvalReport {
  std::map<int, LangReport> languages;
  int pivot_lang = 0;
  int top_k = 0;
  int items = 0;  // M images (and M texts per language)
  std::vector<double> loss_samples;  // optional training-curve context
};

// Full candidate ordering for one query: the top_k stage-1 candidates are
// re-ranked by match score and placed above the rest; ties break by index.
std::vector<int> rerank_candidates(const std::vector<double>& sim_row, int top_k,
                                   const std::function<double(int)>& match_score_fn);

// rankings[q] is the candidate ordering for query q; the true match is
// candidate q itself.
DirectionRecall recall_at_k(const std::vector<std::vector<int>>& rankings);

// Two-stage retrieval per language: projection similarity, then fusion
// re-ranking of the top_k candidates in both directions.
EvalReport retrieval_eval(const CclmModel& model, const SyntheticCorpus& corpus,
                          const CorpusSplit& split, int top_k);

// avg-recall(lang) / avg-recall(pivot) for every language in the report.
std::map<int, double> transfer_gap(const EvalReport& report);

// Mean average-recall over the non-pivot languages.
double transfer_average_recall(const EvalReport& report);

std::string eval_report_json(const EvalReport& report);
void save_eval_report(const std::string& path, const EvalReport& report);

// One row per item: id, modality, language, example id, then the pooled
// encoder embedding. M images + M texts per language.
void export_embeddings(const CclmModel& model, const SyntheticCorpus& corpus,
                       const CorpusSplit& split, const std::string& path);

}  // namespace cclm
