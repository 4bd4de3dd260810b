#pragma once

#include <cstdint>
#include <vector>

#include "cclm/model.hpp"
#include "cclm/rng.hpp"
#include "cclm/tensor.hpp"

namespace cclm {

// Token sequence with mask supervision: targets hold the original id at
// supervised positions and -1 everywhere else.
struct MaskedSeq {
  std::vector<int> ids;
  std::vector<int> targets;
  bool has_targets() const {
    for (int t : targets) {
      if (t >= 0) return true;
    }
    return false;
  }
};

struct CrossModalItem {
  std::vector<float> image;        // [channels * H * W]
  std::vector<int> caption;        // unmasked: contrastive + matching
  MaskedSeq masked_caption;        // masked copy: conditional MLM only
};

struct CrossLingualItem {
  std::vector<int> text_a;         // query side (also the masked side)
  std::vector<int> text_b;         // other view
  MaskedSeq masked_a;
};

struct Batch {
  ViewKind kind = ViewKind::cross_modal;
  std::vector<CrossModalItem> cm;
  std::vector<CrossLingualItem> cl;
  size_t size() const { return kind == ViewKind::cross_modal ? cm.size() : cl.size(); }
};

// -log softmax(scores)[positive], log-sum-exp stabilized. scores holds K
// entries (rank 1 or 1xK).
template <class S>
TensorT<S> info_nce(TapeT<S>& tape, const TensorT<S>& scores, int positive);

// Symmetric in-batch loss over an NxN similarity matrix with diagonal
// positives: half row-wise, half column-wise.
template <class S>
TensorT<S> contrastive_loss(TapeT<S>& tape, const TensorT<S>& sim);

struct HardNegatives {
  std::vector<int> b_for_row;  // for each row i: column j != i
  std::vector<int> a_for_col;  // for each column j: row i != j
};

// Negative picks proportional to softmax of the (detached) similarity with
// the positive excluded; uniform draw when proportional=false. Rows are
// drawn first, then columns.
HardNegatives sample_hard_negatives(const std::vector<double>& sim, int n, Rng& rng,
                                    bool proportional = true);

// Half pairwise pos-vs-wrong-b plus half pairwise pos-vs-wrong-a. Inputs are
// [N,1] match logits.
template <class S>
TensorT<S> matching_loss(TapeT<S>& tape, const TensorT<S>& pos_scores,
                         const TensorT<S>& neg_scores_b, const TensorT<S>& neg_scores_a);

// Mean cross entropy over supervised positions; no_masks reports an empty
// target set (loss is then a constant zero).
template <class S>
TensorT<S> conditional_mlm_loss(TapeT<S>& tape, const TensorT<S>& logits,
                                const std::vector<int>& targets, bool* no_masks = nullptr);

template <class S>
struct LossBreakdownT {
  TensorT<S> total;
  TensorT<S> contrastive;  // undefined when the term was not requested
  TensorT<S> matching;
  TensorT<S> mlm;
  bool mlm_no_masks = false;
  std::vector<int> neg_b, neg_a;  // negatives actually used
};

struct LossOptions {
  bool with_contrastive = true;
  bool with_matching = true;
  bool with_mlm = true;
  bool hard_negatives = true;               // false: uniform negatives
  const std::vector<int>* fixed_neg_b = nullptr;  // bypass sampling (tests)
  const std::vector<int>* fixed_neg_a = nullptr;
};

// The full objective over one batch. Both view kinds run the same code; the
// kind only selects which sequences act as rows, columns, queries and keys.
template <class S>
LossBreakdownT<S> total_loss(TapeT<S>& tape, const CclmBindT<S>& bind, const Batch& batch,
                             Rng& neg_rng, const LossOptions& opt = {});

// Ablation objective: masked pair sequences through the text encoder alone
// (no fusion), scored by the tied vocabulary head.
template <class S>
TensorT<S> tlm_loss(TapeT<S>& tape, const CclmBindT<S>& bind, const std::vector<MaskedSeq>& pairs,
                    bool* no_masks = nullptr);

// ---- mutual-information harness ----

struct MiJoint {
  int nx = 0, ny = 0;
  std::vector<double> p;  // row-major joint probabilities
};

double exact_mi_nats(const MiJoint& joint);

struct MiEstimate {
  double estimate = 0.0;  // log N - mean in-batch loss
  double std_err = 0.0;
  int batch_size = 0;
  int n_batches = 0;
};

// Empirical lower-bound estimate of I(X;Y) using the in-batch objective with
// an arbitrary critic table [nx, ny].
MiEstimate mi_lower_bound_estimate(const MiJoint& joint, const std::vector<double>& critic,
                                   int batch_size, int n_batches, Rng& rng);

}  // namespace cclm
