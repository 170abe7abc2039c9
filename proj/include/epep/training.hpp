#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "epep/error.hpp"
#include "epep/evidential.hpp"
#include "epep/model.hpp"
#include "epep/numerics.hpp"
#include "epep/prompting.hpp"

namespace epep {

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 2e-3;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

// lr_max · (1 + cos(π·t/T)) / 2 for t < T, and 0 from T on.
double cosine_lr(double lr_max, std::int64_t step, std::int64_t total_steps);

struct ParamSlot {
  std::string name;
  Matrix* value;
  const Matrix* grad;
};

/// AdamW with decoupled weight decay and a cosine schedule over total_steps.
///
/// Moments are bound to parameter positions on the first step; later steps
/// must present the same parameters in the same order.
class AdamW {
 public:
  AdamW(OptimizerConfig config, std::int64_t total_steps);

  // Throws TrainingError naming the parameter if a gradient is non-finite.
  void step(std::span<const ParamSlot> params);

  std::int64_t steps() const { return step_; }
  std::int64_t total_steps() const { return total_; }
  double lr() const { return cosine_lr(config_.lr, step_, total_); }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

 private:
  OptimizerConfig config_;
  std::int64_t total_;
  std::int64_t step_ = 0;
  std::vector<std::string> names_;
  std::vector<Matrix> m_, v_;
};

// ---------------------------------------------------------------------------
// Metrics

using LabelSets = std::vector<std::vector<int>>;

// Unweighted mean of per-class F1. A class nobody predicts and nobody holds scores 0.
double f1_macro(const LabelSets& preds, const LabelSets& golds, int num_classes);

// Mann–Whitney AUROC; tied scores count one half.
double auroc(std::span<const double> scores, std::span<const int> golds);

// Binary: AUROC of class 1. K > 2: mean one-vs-rest AUROC over classes that
// have both positives and negatives.
double auroc_macro(const std::vector<std::vector<double>>& probs, const LabelSets& golds,
                   int num_classes);

// argmax p for single-label data, {j : p_j > 1/K} (or argmax if empty) for multi-label data.
std::vector<int> predict_labels(std::span<const double> probs, bool multi_label);

// ---------------------------------------------------------------------------
// Evaluation

enum class LossKind { Evidential, CrossEntropy };

std::string to_string(LossKind kind);
LossKind parse_loss(std::string_view name);

struct EvalReport {
  double f1_macro = 0.0;
  double auroc = 0.0;
  double loss_eb = 0.0;  // mean over samples, from the logits read as evidence
  double loss_kl = 0.0;  // mean KL(Dir(α̃) ‖ Dir(1))
  // Mean u = K/S for evidential runs, normalized softmax entropy for
  // cross-entropy runs. 0 when the group is empty.
  double mean_u_complete = 0.0;
  double mean_u_missing = 0.0;
  std::size_t n_complete = 0;
  std::size_t n_missing = 0;

  bool operator==(const EvalReport&) const = default;
};

EvalReport evaluate(const MultimodalEncoder& encoder, const PromptModule& prompts,
                    const std::vector<Sample>& samples, LossKind loss);

// ---------------------------------------------------------------------------
// Training

struct WarmupConfig {
  int epochs = 3;
  int batch_size = 32;
  double lr = 3e-3;
  double weight_decay = 0.0;

  void validate() const;
  bool operator==(const WarmupConfig&) const = default;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  EncoderConfig model;
  PromptMethod method = PromptMethod::EPEP;
  int rank = 4;
  bool per_layer_banks = false;
  // Empty: chosen from the training set's missing rate (see default_policy).
  std::optional<CompleteSamplePolicy> policy;
  LossKind loss = LossKind::Evidential;
  double lambda = kDefaultLambda;
  OptimizerConfig optimizer;
  int epochs = 8;
  int batch_size = 64;
  WarmupConfig warmup;
  bool reinit_classifier = true;
  bool eval_train = false;  // also log a "train" row per epoch

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct HistoryRow {
  int epoch = 0;
  std::string split;
  EvalReport report;
};

struct TrainResult {
  MultimodalEncoder encoder;
  PromptModule prompts;
  CompleteSamplePolicy policy;
  int epochs_trained = 0;
  std::vector<HistoryRow> history;
};

/// Raised when the loss turns non-finite. Carries the parameters from before
/// the failing batch.
class DivergenceError : public TrainingError {
 public:
  DivergenceError(const std::string& what, TrainResult last_good)
      : TrainingError(what), last_good_(std::move(last_good)) {}
  const TrainResult& last_good() const { return last_good_; }

 private:
  TrainResult last_good_;
};

// Fraction of samples missing at least one modality.
double observed_missing_rate(const std::vector<Sample>& samples);
CompleteSamplePolicy resolve_policy(const TrainConfig& config, const std::vector<Sample>& train);

// Freshly initialized prompts for the configured method (seed stream "prompt.init").
PromptModule make_prompt_module(const TrainConfig& config, CompleteSamplePolicy policy);

// Randomly initialized encoder (seed stream "init"), trained end to end with
// cross-entropy on complete samples.
MultimodalEncoder warmup_backbone(const TrainConfig& config, const std::vector<Sample>& complete);

// Freezes the backbone and trains prompts, pooler and classifier under the
// configured loss. History starts with an epoch-0 row before any update.
TrainResult train_prompts(const TrainConfig& config, MultimodalEncoder encoder,
                          const std::vector<Sample>& train, const std::vector<Sample>& test);

TrainResult train(const TrainConfig& config, const std::vector<Sample>& warmup_set,
                  const std::vector<Sample>& train, const std::vector<Sample>& test);

// CSV with header `epoch,split,f1_macro,auroc,loss_eb,loss_kl,mean_u_complete,mean_u_missing`.
void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const HistoryRow& row);
void write_metrics_csv(std::ostream& out, const std::vector<HistoryRow>& history);

}  // namespace epep
