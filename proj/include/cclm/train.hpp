#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cclm/data.hpp"
#include "cclm/eval.hpp"
#include "cclm/model.hpp"
#include "cclm/objectives.hpp"

namespace cclm {

struct AdamwParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.02;
};

struct OptimState {
  AdamwParams hp;
  int64_t step = 0;
  std::vector<std::vector<float>> m, v;  // mirror parameter shapes
};

OptimState init_optim(const ParamStoreT<float>& params, const AdamwParams& hp = {});

// One decoupled-weight-decay Adam update; grads are dense and aligned with
// the parameter store (a missing gradient must be passed as zeros upstream).
void adamw_step(ParamStoreT<float>& params, const std::vector<std::vector<float>>& grads,
                OptimState& state, double lr);

// Linear 0 -> peak over [0, warmup], then linear peak -> 0 over the rest.
double lr_schedule(int64_t step, int64_t warmup_steps, int64_t total_steps, double peak);

enum class TrainPhase { pretrain, finetune };

// Ablation variant labels plus the full model.
const std::vector<std::string>& ablation_names();

struct TrainConfig {
  int64_t steps = 2000;
  int batch_size = 16;
  double mix_ratio = 0.5;       // fraction of cross-lingual steps
  double peak_lr = 1e-4;
  int64_t warmup_steps = 100;
  uint64_t seed = 1;
  std::string ablation = "full";
  bool hard_negatives = true;
  double grad_clip = 0.0;  // 0 disables clipping
  AdamwParams adamw;
};

struct StepRecord {
  int64_t step = 0;
  ViewKind kind = ViewKind::cross_modal;
  bool has_cl = false, has_match = false, has_mlm = false;
  double l_cl = 0.0, l_match = 0.0, l_mlm = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

// "step<TAB>view_kind<TAB>L_cl<TAB>L_match<TAB>L_mlm<TAB>total<TAB>lr",
// with "-" for terms the step did not compute.
std::string format_log_line(const StepRecord& r);

class Trainer {
 public:
  Trainer(CclmModel& model, const SyntheticCorpus& corpus, const TrainConfig& cfg,
          TrainPhase phase);

  StepRecord step();
  int64_t steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  const OptimState& optim() const { return optim_; }
  int64_t cross_modal_batches() const { return stream_.cross_modal_batches(); }
  int64_t cross_lingual_batches() const { return stream_.cross_lingual_batches(); }

  // Optimizer moments, step counter and every rng stream, for exact resume.
  void save_state(const std::string& stem) const;
  void load_state(const std::string& stem);

 private:
  CclmModel* model_;
  const SyntheticCorpus* corpus_;
  TrainConfig cfg_;
  TrainPhase phase_;
  OptimState optim_;
  BatchStream stream_;
  RngPool pool_;
  Rng* negatives_;
  int64_t step_ = 0;
};

struct TrainSummary {
  double initial_total = 0.0;
  double final_total = 0.0;
  std::vector<StepRecord> records;
};

// Runs cfg.steps optimization steps, appending one log line per step to log
// (when given).
TrainSummary run_training(CclmModel& model, const SyntheticCorpus& corpus, const TrainConfig& cfg,
                          TrainPhase phase, std::vector<std::string>* log = nullptr);

// ---- ablation harness ----

struct AblationSpec {
  TrainConfig pretrain;
  TrainConfig finetune;
  int top_k = 8;
  std::vector<uint64_t> seeds;            // >= 3
  std::vector<TrainConfig> variants;      // default_ablation_variants(pretrain) if empty
};

std::vector<TrainConfig> default_ablation_variants(const TrainConfig& base);

struct AblationRow {
  std::string name;
  double mean_avg_recall = 0.0, std_avg_recall = 0.0;
  double mean_transfer_recall = 0.0, std_transfer_recall = 0.0;
  double mean_transfer_gap = 0.0;
  int64_t cross_lingual_batches = 0;  // summed over seeds
};

// Pretrains, fine-tunes (pivot only) and evaluates every variant on every
// seed with identical budgets; errors on mismatched budgets or short seed
// lists.
std::vector<AblationRow> run_ablation_suite(const CclmConfig& model_cfg,
                                            const SyntheticCorpus& corpus,
                                            const AblationSpec& spec);

std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace cclm
