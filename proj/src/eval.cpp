#include "cclm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

using nlohmann::json;

namespace cclm {

std::vector<int> rerank_candidates(const std::vector<double>& sim_row, int top_k,
                                   const std::function<double(int)>& match_score_fn) {
  const int m = static_cast<int>(sim_row.size());
  if (m == 0) throw std::runtime_error("rerank: empty candidate set");
  if (top_k < 1) throw std::runtime_error("rerank: top_k must be positive");
  const int k = std::min(top_k, m);  // top_k beyond M clamps to exhaustive

  std::vector<int> order(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (sim_row[static_cast<size_t>(a)] != sim_row[static_cast<size_t>(b)]) {
      return sim_row[static_cast<size_t>(a)] > sim_row[static_cast<size_t>(b)];
    }
    return a < b;
  });

  std::vector<std::pair<double, int>> scored;
  scored.reserve(static_cast<size_t>(k));
  for (int r = 0; r < k; ++r) {
    const int cand = order[static_cast<size_t>(r)];
    scored.emplace_back(match_score_fn(cand), cand);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  std::vector<int> out;
  out.reserve(static_cast<size_t>(m));
  for (const auto& [score, cand] : scored) out.push_back(cand);
  for (int r = k; r < m; ++r) out.push_back(order[static_cast<size_t>(r)]);
  return out;
}

DirectionRecall recall_at_k(const std::vector<std::vector<int>>& rankings) {
  if (rankings.empty()) throw std::runtime_error("recall: no queries");
  DirectionRecall rec;
  for (size_t q = 0; q < rankings.size(); ++q) {
    const auto& order = rankings[q];
    const auto it = std::find(order.begin(), order.end(), static_cast<int>(q));
    if (it == order.end()) {
      throw std::runtime_error("recall: query " + std::to_string(q) + " missing from its ranking");
    }
    const auto rank = static_cast<size_t>(it - order.begin());
    if (rank < 1) rec.r1 += 1.0;
    if (rank < 5) rec.r5 += 1.0;
    if (rank < 10) rec.r10 += 1.0;
  }
  const double n = static_cast<double>(rankings.size());
  rec.r1 /= n;
  rec.r5 /= n;
  rec.r10 /= n;
  return rec;
}

EvalReport retrieval_eval(const CclmModel& model, const SyntheticCorpus& corpus,
                          const CorpusSplit& split, int top_k) {
  if (split.multimodal.empty()) {
    throw std::runtime_error("retrieval eval: split has no image-caption pairs");
  }
  std::map<int, std::vector<const MultimodalExample*>> by_lang;
  for (const auto& ex : split.multimodal) by_lang[ex.lang].push_back(&ex);
  for (auto& [lang, list] : by_lang) {
    std::sort(list.begin(), list.end(),
              [](const MultimodalExample* a, const MultimodalExample* b) {
                return a->scene_id < b->scene_id;
              });
  }

  EvalReport report;
  report.pivot_lang = 0;
  report.top_k = top_k;

  Tape tape;
  auto bind = bind_model(tape, model);
  const double it_value = inv_tau(tape, bind).value();

  // images are shared across languages; encode each scene once
  std::map<int, Tensor> img_states;
  std::map<int, std::vector<double>> img_proj;
  for (const auto& [lang, list] : by_lang) {
    for (const auto* ex : list) {
      if (img_states.count(ex->scene_id)) continue;
      auto states = encode_image(tape, bind,
                                 render_scene(corpus.scenes[static_cast<size_t>(ex->scene_id)],
                                              model.cfg.image_size));
      auto gv = project_v(tape, bind, pool(tape, bind, states));
      img_states.emplace(ex->scene_id, states);
      img_proj.emplace(ex->scene_id, std::vector<double>(gv.ptr(), gv.ptr() + gv.numel()));
    }
  }

  for (const auto& [lang, list] : by_lang) {
    const int m = static_cast<int>(list.size());
    std::vector<Tensor> txt_states;
    std::vector<std::vector<double>> txt_proj;
    for (const auto* ex : list) {
      auto states = encode_text(tape, bind, ex->caption);
      auto gw = project_w(tape, bind, pool(tape, bind, states));
      txt_states.push_back(states);
      txt_proj.emplace_back(gw.ptr(), gw.ptr() + gw.numel());
    }

    std::vector<std::vector<double>> sim(static_cast<size_t>(m),
                                         std::vector<double>(static_cast<size_t>(m)));
    for (int i = 0; i < m; ++i) {
      const auto& gv = img_proj.at(list[static_cast<size_t>(i)]->scene_id);
      for (int j = 0; j < m; ++j) {
        double dot = 0.0;
        for (size_t d = 0; d < gv.size(); ++d) dot += gv[d] * txt_proj[static_cast<size_t>(j)][d];
        sim[static_cast<size_t>(i)][static_cast<size_t>(j)] = it_value * dot;
      }
    }

    // fused pair score, cached across the two directions
    std::map<std::pair<int, int>, double> pair_score;
    auto score = [&](int img, int txt) {
      const auto key = std::make_pair(img, txt);
      auto it = pair_score.find(key);
      if (it != pair_score.end()) return it->second;
      auto fused = fuse(tape, bind, txt_states[static_cast<size_t>(txt)],
                        img_states.at(list[static_cast<size_t>(img)]->scene_id),
                        ViewKind::cross_modal);
      const double s = match_score(tape, bind, tape.slice(fused, 0, 0, 1)).value();
      pair_score.emplace(key, s);
      return s;
    };

    std::vector<std::vector<int>> i2t, t2i;
    for (int i = 0; i < m; ++i) {
      i2t.push_back(rerank_candidates(sim[static_cast<size_t>(i)], top_k,
                                      [&](int j) { return score(i, j); }));
    }
    for (int j = 0; j < m; ++j) {
      std::vector<double> col(static_cast<size_t>(m));
      for (int i = 0; i < m; ++i) col[static_cast<size_t>(i)] = sim[static_cast<size_t>(i)][static_cast<size_t>(j)];
      t2i.push_back(rerank_candidates(col, top_k, [&](int i) { return score(i, j); }));
    }

    LangReport lr;
    lr.image_to_text = recall_at_k(i2t);
    lr.text_to_image = recall_at_k(t2i);
    lr.average_recall = (lr.image_to_text.r1 + lr.image_to_text.r5 + lr.image_to_text.r10 +
                         lr.text_to_image.r1 + lr.text_to_image.r5 + lr.text_to_image.r10) /
                        6.0;
    report.languages[lang] = lr;
    report.items = m;
  }
  return report;
}

std::map<int, double> transfer_gap(const EvalReport& report) {
  const auto it = report.languages.find(report.pivot_lang);
  if (it == report.languages.end()) {
    throw std::runtime_error("transfer gap: report lacks the pivot language");
  }
  const double pivot = it->second.average_recall;
  if (pivot <= 0.0) throw std::runtime_error("transfer gap: zero pivot performance");
  std::map<int, double> out;
  for (const auto& [lang, lr] : report.languages) out[lang] = lr.average_recall / pivot;
  return out;
}

double transfer_average_recall(const EvalReport& report) {
  double acc = 0.0;
  int n = 0;
  for (const auto& [lang, lr] : report.languages) {
    if (lang == report.pivot_lang) continue;
    acc += lr.average_recall;
    n++;
  }
  if (n == 0) throw std::runtime_error("transfer recall: no transfer languages in the report");
  return acc / n;
}

std::string eval_report_json(const EvalReport& report) {
  json j;
  j["items"] = report.items;
  j["top_k"] = report.top_k;
  j["pivot_lang"] = report.pivot_lang;
  json langs;
  for (const auto& [lang, lr] : report.languages) {
    langs[std::to_string(lang)] = {
        {"image_to_text", {{"r1", lr.image_to_text.r1}, {"r5", lr.image_to_text.r5}, {"r10", lr.image_to_text.r10}}},
        {"text_to_image", {{"r1", lr.text_to_image.r1}, {"r5", lr.text_to_image.r5}, {"r10", lr.text_to_image.r10}}},
        {"average_recall", lr.average_recall}};
  }
  j["languages"] = langs;
  const auto pivot_it = report.languages.find(report.pivot_lang);
  if (pivot_it != report.languages.end() && pivot_it->second.average_recall > 0.0) {
    json gaps;
    for (const auto& [lang, ratio] : transfer_gap(report)) gaps[std::to_string(lang)] = ratio;
    j["transfer_gap"] = gaps;
  }
  if (!report.loss_samples.empty()) j["loss_samples"] = report.loss_samples;
  return j.dump(2) + "\n";
}

void save_eval_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << eval_report_json(report);
}

void export_embeddings(const CclmModel& model, const SyntheticCorpus& corpus,
                       const CorpusSplit& split, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);

  out << "id\tmodality\tlanguage\texample";
  for (int d = 0; d < model.cfg.d_model; ++d) out << "\te" << d;
  out << "\n";

  Tape tape;
  auto bind = bind_model(tape, model);
  char buf[32];
  int row = 0;
  auto write_vec = [&](const Tensor& pooled) {
    for (int64_t d = 0; d < pooled.numel(); ++d) {
      std::snprintf(buf, sizeof(buf), "%.8e", static_cast<double>(pooled.ptr()[d]));
      out << "\t" << buf;
    }
    out << "\n";
  };

  std::vector<int> scene_ids = split.scene_ids;
  std::sort(scene_ids.begin(), scene_ids.end());
  for (int id : scene_ids) {
    auto pooled = pool(tape, bind,
                       encode_image(tape, bind,
                                    render_scene(corpus.scenes[static_cast<size_t>(id)],
                                                 model.cfg.image_size)));
    out << row++ << "\timage\t-\t" << id;
    write_vec(pooled);
  }
  std::vector<const MultimodalExample*> texts;
  for (const auto& ex : split.multimodal) texts.push_back(&ex);
  std::sort(texts.begin(), texts.end(), [](const MultimodalExample* a, const MultimodalExample* b) {
    if (a->lang != b->lang) return a->lang < b->lang;
    return a->scene_id < b->scene_id;
  });
  for (const auto* ex : texts) {
    auto pooled = pool(tape, bind, encode_text(tape, bind, ex->caption));
    out << row++ << "\ttext\t" << corpus.languages[static_cast<size_t>(ex->lang)].name << "\t"
        << ex->scene_id;
    write_vec(pooled);
  }
}

}  // namespace cclm
