#include "cclm/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cclm {

template <class S>
TensorT<S> info_nce(TapeT<S>& tape, const TensorT<S>& scores, int positive) {
  const int64_t k = scores.numel();
  if (k < 1) throw std::runtime_error("info_nce: empty score row");
  if (scores.shape.size() > 2 || (scores.shape.size() == 2 && scores.shape[0] != 1)) {
    throw std::runtime_error("info_nce: expected one score row, got " + shape_str(scores.shape));
  }
  if (positive < 0 || positive >= k) {
    throw std::runtime_error("info_nce: positive index " + std::to_string(positive) +
                             " out of range [0," + std::to_string(k) + ")");
  }
  auto row = scores.shape.size() == 2 ? scores : tape.reshape(scores, {1, static_cast<int>(k)});
  return tape.cross_entropy_from_logits(row, {positive});
}

template <class S>
TensorT<S> contrastive_loss(TapeT<S>& tape, const TensorT<S>& sim) {
  if (sim.shape.size() != 2 || sim.shape[0] != sim.shape[1]) {
    throw std::runtime_error("contrastive_loss: similarity must be square, got " +
                             shape_str(sim.shape));
  }
  const int n = sim.shape[0];
  std::vector<int> diag(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) diag[static_cast<size_t>(i)] = i;
  auto rows = tape.cross_entropy_from_logits(sim, diag);
  auto cols = tape.cross_entropy_from_logits(tape.transpose(sim), diag);
  return tape.scale(tape.add(rows, cols), static_cast<S>(0.5));
}

HardNegatives sample_hard_negatives(const std::vector<double>& sim, int n, Rng& rng,
                                    bool proportional) {
  if (n < 2) throw std::runtime_error("sample_hard_negatives: need at least 2 items");
  if (static_cast<int64_t>(sim.size()) != static_cast<int64_t>(n) * n) {
    throw std::runtime_error("sample_hard_negatives: matrix has " + std::to_string(sim.size()) +
                             " entries for n=" + std::to_string(n));
  }
  auto draw = [&](auto score_at, int skip) {
    std::vector<int> cand;
    std::vector<double> w;
    cand.reserve(static_cast<size_t>(n) - 1);
    w.reserve(static_cast<size_t>(n) - 1);
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j != skip) mx = std::max(mx, score_at(j));
    }
    for (int j = 0; j < n; ++j) {
      if (j == skip) continue;
      cand.push_back(j);
      w.push_back(proportional ? std::exp(score_at(j) - mx) : 1.0);
    }
    return cand[rng.categorical(w)];
  };
  HardNegatives out;
  out.b_for_row.resize(static_cast<size_t>(n));
  out.a_for_col.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.b_for_row[static_cast<size_t>(i)] =
        draw([&](int j) { return sim[static_cast<size_t>(i) * n + j]; }, i);
  }
  for (int j = 0; j < n; ++j) {
    out.a_for_col[static_cast<size_t>(j)] =
        draw([&](int i) { return sim[static_cast<size_t>(i) * n + j]; }, j);
  }
  return out;
}

template <class S>
TensorT<S> matching_loss(TapeT<S>& tape, const TensorT<S>& pos_scores,
                         const TensorT<S>& neg_scores_b, const TensorT<S>& neg_scores_a) {
  if (pos_scores.shape != neg_scores_b.shape || pos_scores.shape != neg_scores_a.shape ||
      pos_scores.shape.size() != 2 || pos_scores.shape[1] != 1) {
    throw std::runtime_error("matching_loss: expected matching [N,1] score columns, got " +
                             shape_str(pos_scores.shape) + ", " + shape_str(neg_scores_b.shape) +
                             ", " + shape_str(neg_scores_a.shape));
  }
  const int n = pos_scores.shape[0];
  std::vector<int> zeros(static_cast<size_t>(n), 0);
  auto vs_b = tape.cross_entropy_from_logits(tape.concat({pos_scores, neg_scores_b}, 1), zeros);
  auto vs_a = tape.cross_entropy_from_logits(tape.concat({pos_scores, neg_scores_a}, 1), zeros);
  return tape.scale(tape.add(vs_b, vs_a), static_cast<S>(0.5));
}

template <class S>
TensorT<S> conditional_mlm_loss(TapeT<S>& tape, const TensorT<S>& logits,
                                const std::vector<int>& targets, bool* no_masks) {
  bool any = false;
  for (int t : targets) {
    if (t >= 0) {
      any = true;
      break;
    }
  }
  if (no_masks) *no_masks = !any;
  return tape.cross_entropy_from_logits(logits, targets, -1);
}

namespace {

template <class S>
std::vector<S> image_as(const std::vector<float>& image) {
  return std::vector<S>(image.begin(), image.end());
}

}  // namespace

template <class S>
LossBreakdownT<S> total_loss(TapeT<S>& tape, const CclmBindT<S>& bind, const Batch& batch,
                             Rng& neg_rng, const LossOptions& opt) {
  const int n = static_cast<int>(batch.size());
  if (n == 0) throw std::runtime_error("total_loss: empty batch");
  const bool is_cm = batch.kind == ViewKind::cross_modal;

  // Encode each side once; every later term reuses these states.
  std::vector<TensorT<S>> row_states, col_states;
  row_states.reserve(static_cast<size_t>(n));
  col_states.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (is_cm) {
      const auto& item = batch.cm[static_cast<size_t>(i)];
      row_states.push_back(encode_image(tape, bind, image_as<S>(item.image)));
      col_states.push_back(encode_text(tape, bind, item.caption));
    } else {
      const auto& item = batch.cl[static_cast<size_t>(i)];
      row_states.push_back(encode_text(tape, bind, item.text_a));
      col_states.push_back(encode_text(tape, bind, item.text_b));
    }
  }

  // Fused pair (row i, col j): text is the query, the other view the keys.
  auto fused_pair = [&](int i, int j) {
    return is_cm ? fuse(tape, bind, col_states[static_cast<size_t>(j)],
                        row_states[static_cast<size_t>(i)], ViewKind::cross_modal)
                 : fuse(tape, bind, row_states[static_cast<size_t>(i)],
                        col_states[static_cast<size_t>(j)], ViewKind::cross_lingual);
  };

  LossBreakdownT<S> out;
  std::vector<TensorT<S>> terms;

  TensorT<S> sim;
  const bool need_sim =
      opt.with_contrastive || (opt.with_matching && !(opt.fixed_neg_b && opt.fixed_neg_a));
  if (need_sim) {
    std::vector<TensorT<S>> ga, gb;
    for (int i = 0; i < n; ++i) {
      auto pooled_row = pool(tape, bind, row_states[static_cast<size_t>(i)]);
      ga.push_back(is_cm ? project_v(tape, bind, pooled_row) : project_w(tape, bind, pooled_row));
      gb.push_back(project_w(tape, bind, pool(tape, bind, col_states[static_cast<size_t>(i)])));
    }
    auto ga_rows = tape.concat(ga, 0);
    auto gb_rows = tape.concat(gb, 0);
    sim = tape.mul_scalar(tape.matmul(ga_rows, tape.transpose(gb_rows)), inv_tau(tape, bind));
  }
  if (opt.with_contrastive) {
    out.contrastive = contrastive_loss(tape, sim);
    terms.push_back(out.contrastive);
  }

  if (opt.with_matching) {
    if (opt.fixed_neg_b && opt.fixed_neg_a) {
      out.neg_b = *opt.fixed_neg_b;
      out.neg_a = *opt.fixed_neg_a;
    } else {
      if (n < 2) throw std::runtime_error("total_loss: matching needs at least 2 pairs in a batch");
      std::vector<double> host_sim(sim.ptr(), sim.ptr() + sim.numel());
      auto picks = sample_hard_negatives(host_sim, n, neg_rng, opt.hard_negatives);
      out.neg_b = std::move(picks.b_for_row);
      out.neg_a = std::move(picks.a_for_col);
    }
    if (static_cast<int>(out.neg_b.size()) != n || static_cast<int>(out.neg_a.size()) != n) {
      throw std::runtime_error("total_loss: negative index lists must cover the batch");
    }
    std::vector<TensorT<S>> pos_cls, negb_cls, nega_cls;
    for (int i = 0; i < n; ++i) {
      pos_cls.push_back(tape.slice(fused_pair(i, i), 0, 0, 1));
      negb_cls.push_back(tape.slice(fused_pair(i, out.neg_b[static_cast<size_t>(i)]), 0, 0, 1));
      nega_cls.push_back(tape.slice(fused_pair(out.neg_a[static_cast<size_t>(i)], i), 0, 0, 1));
    }
    auto pos = match_score(tape, bind, tape.concat(pos_cls, 0));
    auto negb = match_score(tape, bind, tape.concat(negb_cls, 0));
    auto nega = match_score(tape, bind, tape.concat(nega_cls, 0));
    out.matching = matching_loss(tape, pos, negb, nega);
    terms.push_back(out.matching);
  }

  if (opt.with_mlm) {
    std::vector<TensorT<S>> logit_blocks;
    std::vector<int> targets;
    for (int i = 0; i < n; ++i) {
      const MaskedSeq& masked =
          is_cm ? batch.cm[static_cast<size_t>(i)].masked_caption : batch.cl[static_cast<size_t>(i)].masked_a;
      if (masked.ids.size() != masked.targets.size()) {
        throw std::runtime_error("total_loss: masked sequence and target lengths differ");
      }
      auto query = encode_text(tape, bind, masked.ids);
      const auto& kv = is_cm ? row_states[static_cast<size_t>(i)] : col_states[static_cast<size_t>(i)];
      auto fused = fuse(tape, bind, query, kv,
                        is_cm ? ViewKind::cross_modal : ViewKind::cross_lingual);
      logit_blocks.push_back(mlm_logits(tape, bind, fused));
      targets.insert(targets.end(), masked.targets.begin(), masked.targets.end());
    }
    auto logits = logit_blocks.size() == 1 ? logit_blocks[0] : tape.concat(logit_blocks, 0);
    out.mlm = conditional_mlm_loss(tape, logits, targets, &out.mlm_no_masks);
    terms.push_back(out.mlm);
  }

  if (terms.empty()) throw std::runtime_error("total_loss: no loss terms enabled");
  auto total = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) total = tape.add(total, terms[i]);
  out.total = total;
  return out;
}

template <class S>
TensorT<S> tlm_loss(TapeT<S>& tape, const CclmBindT<S>& bind, const std::vector<MaskedSeq>& pairs,
                    bool* no_masks) {
  if (pairs.empty()) throw std::runtime_error("tlm_loss: empty batch");
  std::vector<TensorT<S>> logit_blocks;
  std::vector<int> targets;
  for (const auto& seq : pairs) {
    if (static_cast<int>(seq.ids.size()) > bind.cfg->max_pair_len) {
      throw std::runtime_error("tlm_loss: pair sequence of " + std::to_string(seq.ids.size()) +
                               " tokens exceeds limit " + std::to_string(bind.cfg->max_pair_len));
    }
    if (seq.ids.size() != seq.targets.size()) {
      throw std::runtime_error("tlm_loss: sequence and target lengths differ");
    }
    logit_blocks.push_back(mlm_logits(tape, bind, encode_text(tape, bind, seq.ids)));
    targets.insert(targets.end(), seq.targets.begin(), seq.targets.end());
  }
  auto logits = logit_blocks.size() == 1 ? logit_blocks[0] : tape.concat(logit_blocks, 0);
  return conditional_mlm_loss(tape, logits, targets, no_masks);
}

// ---------------------------------------------------- mutual information

double exact_mi_nats(const MiJoint& joint) {
  if (joint.nx <= 0 || joint.ny <= 0 ||
      static_cast<int64_t>(joint.p.size()) != static_cast<int64_t>(joint.nx) * joint.ny) {
    throw std::runtime_error("mi: joint table shape is inconsistent");
  }
  double total = 0.0;
  for (double v : joint.p) {
    if (v < 0.0) throw std::runtime_error("mi: negative probability in joint");
    total += v;
  }
  if (!(total > 0.0)) throw std::runtime_error("mi: joint has zero mass");
  std::vector<double> px(static_cast<size_t>(joint.nx), 0.0);
  std::vector<double> py(static_cast<size_t>(joint.ny), 0.0);
  for (int x = 0; x < joint.nx; ++x) {
    for (int y = 0; y < joint.ny; ++y) {
      const double v = joint.p[static_cast<size_t>(x) * joint.ny + y] / total;
      px[static_cast<size_t>(x)] += v;
      py[static_cast<size_t>(y)] += v;
    }
  }
  double mi = 0.0;
  for (int x = 0; x < joint.nx; ++x) {
    for (int y = 0; y < joint.ny; ++y) {
      const double v = joint.p[static_cast<size_t>(x) * joint.ny + y] / total;
      if (v > 0.0) mi += v * std::log(v / (px[static_cast<size_t>(x)] * py[static_cast<size_t>(y)]));
    }
  }
  return mi;
}

MiEstimate mi_lower_bound_estimate(const MiJoint& joint, const std::vector<double>& critic,
                                   int batch_size, int n_batches, Rng& rng) {
  exact_mi_nats(joint);  // shares the validity checks
  if (static_cast<int64_t>(critic.size()) != static_cast<int64_t>(joint.nx) * joint.ny) {
    throw std::runtime_error("mi: critic table does not match the joint alphabet");
  }
  if (batch_size < 1 || n_batches < 1) {
    throw std::runtime_error("mi: batch size and batch count must be positive");
  }
  double total = 0.0;
  for (double v : joint.p) total += v;
  std::vector<double> cumulative(joint.p.size());
  double acc = 0.0;
  for (size_t i = 0; i < joint.p.size(); ++i) {
    acc += joint.p[i] / total;
    cumulative[i] = acc;
  }

  std::vector<double> per_batch;
  per_batch.reserve(static_cast<size_t>(n_batches));
  std::vector<int> xs(static_cast<size_t>(batch_size)), ys(static_cast<size_t>(batch_size));
  for (int b = 0; b < n_batches; ++b) {
    for (int i = 0; i < batch_size; ++i) {
      const double u = rng.uniform();
      const size_t cell = static_cast<size_t>(
          std::lower_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
      const size_t clamped = std::min(cell, joint.p.size() - 1);
      xs[static_cast<size_t>(i)] = static_cast<int>(clamped) / joint.ny;
      ys[static_cast<size_t>(i)] = static_cast<int>(clamped) % joint.ny;
    }
    std::vector<double> scores(static_cast<size_t>(batch_size) * batch_size);
    for (int i = 0; i < batch_size; ++i) {
      for (int j = 0; j < batch_size; ++j) {
        scores[static_cast<size_t>(i) * batch_size + j] =
            critic[static_cast<size_t>(xs[static_cast<size_t>(i)]) * joint.ny +
                   ys[static_cast<size_t>(j)]];
      }
    }
    TapeD tape;
    auto sim = TensorD::from({batch_size, batch_size}, scores);
    std::vector<int> diag(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) diag[static_cast<size_t>(i)] = i;
    const double mean_loss = tape.cross_entropy_from_logits(sim, diag).value();
    per_batch.push_back(std::log(static_cast<double>(batch_size)) - mean_loss);
  }
  MiEstimate est;
  est.batch_size = batch_size;
  est.n_batches = n_batches;
  double mean = 0.0;
  for (double v : per_batch) mean += v;
  mean /= static_cast<double>(n_batches);
  est.estimate = mean;
  if (n_batches > 1) {
    double var = 0.0;
    for (double v : per_batch) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n_batches - 1);
    est.std_err = std::sqrt(var / static_cast<double>(n_batches));
  }
  return est;
}

// ---------------------------------------------------------- instantiation

#define CCLM_INSTANTIATE(S)                                                                      \
  template TensorT<S> info_nce<S>(TapeT<S>&, const TensorT<S>&, int);                            \
  template TensorT<S> contrastive_loss<S>(TapeT<S>&, const TensorT<S>&);                         \
  template TensorT<S> matching_loss<S>(TapeT<S>&, const TensorT<S>&, const TensorT<S>&,          \
                                       const TensorT<S>&);                                       \
  template TensorT<S> conditional_mlm_loss<S>(TapeT<S>&, const TensorT<S>&,                      \
                                              const std::vector<int>&, bool*);                   \
  template LossBreakdownT<S> total_loss<S>(TapeT<S>&, const CclmBindT<S>&, const Batch&, Rng&,   \
                                           const LossOptions&);                                  \
  template TensorT<S> tlm_loss<S>(TapeT<S>&, const CclmBindT<S>&, const std::vector<MaskedSeq>&, \
                                  bool*);

CCLM_INSTANTIATE(float)
CCLM_INSTANTIATE(double)
#undef CCLM_INSTANTIATE

}  // namespace cclm
