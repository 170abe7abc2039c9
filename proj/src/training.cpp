#include "epep/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>

namespace epep {

namespace {

using Size = std::size_t;

bool is_multi_label(const std::vector<Sample>& samples) {
  return std::any_of(samples.begin(), samples.end(),
                     [](const Sample& s) { return s.labels.size() > 1; });
}

struct SampleLoss {
  double value = 0.0;
  std::vector<double> dlogits;
};

SampleLoss loss_and_gradient(std::span<const double> logits, const LabelVector& y,
                             LossKind kind, double lambda) {
  SampleLoss out;
  if (!std::all_of(logits.begin(), logits.end(), [](double z) { return std::isfinite(z); })) {
    out.value = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  if (kind == LossKind::Evidential) {
    out.value = loss_combined(evidence_from_logits(logits), y, lambda);
    out.dlogits = evidential_gradients(logits, y, lambda);
  } else {
    out.value = cross_entropy(logits, y);
    out.dlogits = cross_entropy_gradients(logits, y);
  }
  return out;
}

// Report from precomputed logits; evaluation and the training loop share it
// so both produce bit-identical rows.
EvalReport report_from_logits(const std::vector<std::vector<double>>& logits,
                              const std::vector<Sample>& samples, LossKind kind, int num_classes) {
  if (samples.empty()) throw MetricError("evaluate: empty dataset");
  const bool multi = is_multi_label(samples);
  const auto k = static_cast<Size>(num_classes);
  EvalReport r;
  LabelSets preds, golds;
  std::vector<std::vector<double>> probs;
  double u_complete = 0.0, u_missing = 0.0;
  for (Size i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const LabelVector y = LabelVector::from_indices(s.labels, k);
    const DirichletOutput d = evidence_from_logits(logits[i]);
    r.loss_eb += loss_eb(d, y);
    r.loss_kl += kl_to_uniform(alpha_tilde(d, y));
    std::vector<double> p;
    double u;
    if (kind == LossKind::Evidential) {
      p = d.probs;
      u = d.uncertainty;
    } else {
      p = softmax(logits[i]);
      u = normalized_entropy(p);
    }
    if (s.pattern.empty()) {
      u_complete += u;
      ++r.n_complete;
    } else {
      u_missing += u;
      ++r.n_missing;
    }
    preds.push_back(predict_labels(p, multi));
    golds.push_back(s.labels);
    probs.push_back(std::move(p));
  }
  const auto n = static_cast<double>(samples.size());
  r.loss_eb /= n;
  r.loss_kl /= n;
  if (r.n_complete > 0) r.mean_u_complete = u_complete / static_cast<double>(r.n_complete);
  if (r.n_missing > 0) r.mean_u_missing = u_missing / static_cast<double>(r.n_missing);
  r.f1_macro = f1_macro(preds, golds, num_classes);
  r.auroc = auroc_macro(probs, golds, num_classes);
  return r;
}

void collect_trainable(HeadParams& head, PromptModule& prompts, HeadParams& ghead,
                       PromptModule& gprompts, std::vector<ParamSlot>& out) {
  out.clear();
  std::vector<std::pair<std::string, Matrix*>> values, grads;
  auto into = [](std::vector<std::pair<std::string, Matrix*>>& dst) {
    return [&dst](const std::string& name, Matrix& m) { dst.emplace_back(name, &m); };
  };
  head.for_each_parameter(into(values));
  prompts.for_each_parameter(into(values));
  ghead.for_each_parameter(into(grads));
  gprompts.for_each_parameter(into(grads));
  for (Size i = 0; i < values.size(); ++i) {
    out.push_back({values[i].first, values[i].second, grads[i].second});
  }
}

void zero_all(HeadParams& head, PromptModule& prompts) {
  auto zero = [](const std::string&, Matrix& m) { m.fill(0.0); };
  head.for_each_parameter(zero);
  prompts.for_each_parameter(zero);
}

std::int64_t batches_per_epoch(Size n, int batch) {
  return static_cast<std::int64_t>((n + static_cast<Size>(batch) - 1) / static_cast<Size>(batch));
}

}  // namespace

PromptModule make_prompt_module(const TrainConfig& cfg, CompleteSamplePolicy policy) {
  Rng rng(derive_seed(cfg.seed, "prompt.init"));
  const auto& mc = cfg.model;
  const int banks = cfg.per_layer_banks ? std::max(1, mc.prompt_inject_layers) : 1;
  switch (cfg.method) {
    case PromptMethod::NoPrompt:
      return PromptModule::none();
    case PromptMethod::EPEP:
      return PromptModule::epep(mc.modalities, mc.d_model, mc.prompt_len, cfg.rank, banks, policy,
                                rng);
    case PromptMethod::MAP:
    case PromptMethod::MSP:
      return PromptModule::baseline(cfg.method, mc.modalities, mc.d_model, mc.prompt_len, banks,
                                    policy, rng);
  }
  throw ConfigError("unknown prompt method");
}

namespace {

// Logits for every sample. Samples whose prompt is fixed reuse cached pooled
// features, which is exact because the backbone is frozen.
class FeatureCache {
 public:
  FeatureCache(const MultimodalEncoder& enc, const PromptModule& prompts,
               const std::vector<Sample>& samples) {
    pooled_.resize(samples.size());
    for (Size i = 0; i < samples.size(); ++i) {
      if (prompts.depends_on_parameters(samples[i].pattern)) continue;
      pooled_[i] = enc.pooled_features(samples[i], prompts.prompts(samples[i].pattern));
    }
  }

  bool cached(Size i) const { return pooled_[i].has_value(); }
  const Matrix& pooled(Size i) const { return *pooled_[i]; }

  std::vector<std::vector<double>> logits(const MultimodalEncoder& enc,
                                          const PromptModule& prompts,
                                          const std::vector<Sample>& samples) const {
    std::vector<std::vector<double>> out(samples.size());
    for (Size i = 0; i < samples.size(); ++i) {
      out[i] = cached(i) ? enc.head_forward(pooled(i))
                         : enc.forward(samples[i], prompts.prompts(samples[i].pattern));
    }
    return out;
  }

 private:
  std::vector<std::optional<Matrix>> pooled_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Optimizer

void OptimizerConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("optimizer: " + what);
  };
  require(std::isfinite(lr) && lr >= 0.0, "lr must be finite and non-negative");
  require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0, 1)");
  require(eps > 0.0, "eps must be positive");
  require(weight_decay >= 0.0 && std::isfinite(weight_decay), "weight_decay must be >= 0");
}

double cosine_lr(double lr_max, std::int64_t step, std::int64_t total_steps) {
  if (step < 0) throw ConfigError("cosine_lr: negative step");
  if (total_steps <= 0 || step >= total_steps) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamW::AdamW(OptimizerConfig config, std::int64_t total_steps)
    : config_(config), total_(total_steps) {
  config_.validate();
  if (total_steps < 0) throw ConfigError("AdamW: negative total_steps");
}

void AdamW::step(std::span<const ParamSlot> params) {
  if (step_ == 0 && m_.empty()) {
    for (const auto& p : params) {
      names_.push_back(p.name);
      m_.emplace_back(p.value->rows(), p.value->cols());
      v_.emplace_back(p.value->rows(), p.value->cols());
    }
  }
  if (params.size() != m_.size()) {
    throw ShapeError("AdamW: expected " + std::to_string(m_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (Size i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (p.name != names_[i] || p.value->rows() != m_[i].rows() ||
        p.value->cols() != m_[i].cols() || p.grad->rows() != m_[i].rows() ||
        p.grad->cols() != m_[i].cols()) {
      throw ShapeError("AdamW: parameter '" + p.name + "' does not match its moments");
    }
    if (!p.grad->all_finite()) {
      throw TrainingError("non-finite gradient for parameter '" + p.name + "' at step " +
                          std::to_string(step_));
    }
  }

  const double lr = cosine_lr(config_.lr, step_, total_);
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  const double decay = 1.0 - lr * config_.weight_decay;
  for (Size i = 0; i < params.size(); ++i) {
    auto w = params[i].value->data();
    const auto g = params[i].grad->data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (Size j = 0; j < w.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] *= decay;
      w[j] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Metrics

double f1_macro(const LabelSets& preds, const LabelSets& golds, int num_classes) {
  if (preds.empty()) throw MetricError("f1_macro: empty input");
  if (preds.size() != golds.size()) {
    throw MetricError("f1_macro: " + std::to_string(preds.size()) + " predictions vs " +
                      std::to_string(golds.size()) + " labels");
  }
  if (num_classes < 1) throw MetricError("f1_macro: num_classes must be positive");
  const auto k = static_cast<Size>(num_classes);
  std::vector<double> tp(k, 0.0), fp(k, 0.0), fn(k, 0.0);
  auto to_mask = [&](const std::vector<int>& set) {
    std::vector<char> mask(k, 0);
    for (int c : set) {
      if (c < 0 || c >= num_classes) {
        throw MetricError("f1_macro: class " + std::to_string(c) + " outside [0, " +
                          std::to_string(num_classes) + ")");
      }
      mask[static_cast<Size>(c)] = 1;
    }
    return mask;
  };
  for (Size i = 0; i < preds.size(); ++i) {
    const auto p = to_mask(preds[i]);
    const auto g = to_mask(golds[i]);
    for (Size c = 0; c < k; ++c) {
      if (p[c] && g[c]) tp[c] += 1.0;
      if (p[c] && !g[c]) fp[c] += 1.0;
      if (!p[c] && g[c]) fn[c] += 1.0;
    }
  }
  double sum = 0.0;
  for (Size c = 0; c < k; ++c) {
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    sum += denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
  }
  return sum / static_cast<double>(k);
}

double auroc(std::span<const double> scores, std::span<const int> golds) {
  if (scores.size() != golds.size()) throw MetricError("auroc: length mismatch");
  if (scores.empty()) throw MetricError("auroc: empty input");
  std::vector<Size> order(scores.size());
  std::iota(order.begin(), order.end(), Size{0});
  for (Size i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw MetricError("auroc: NaN score");
    if (golds[i] != 0 && golds[i] != 1) throw MetricError("auroc: labels must be 0 or 1");
  }
  std::sort(order.begin(), order.end(), [&](Size a, Size b) { return scores[a] < scores[b]; });

  // Sum of midranks of the positives (Mann–Whitney U).
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  Size i = 0;
  while (i < order.size()) {
    Size j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (Size q = i; q < j; ++q) {
      if (golds[order[q]] == 1) {
        pos += 1.0;
        rank_sum += midrank;
      } else {
        neg += 1.0;
      }
    }
    i = j;
  }
  if (pos == 0.0 || neg == 0.0) throw MetricError("auroc: needs both positive and negative labels");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double auroc_macro(const std::vector<std::vector<double>>& probs, const LabelSets& golds,
                   int num_classes) {
  if (probs.size() != golds.size()) throw MetricError("auroc_macro: length mismatch");
  auto column = [&](int c) {
    std::vector<double> scores;
    std::vector<int> bin;
    for (Size i = 0; i < probs.size(); ++i) {
      if (probs[i].size() != static_cast<Size>(num_classes)) {
        throw MetricError("auroc_macro: score vector has wrong length");
      }
      scores.push_back(probs[i][static_cast<Size>(c)]);
      bin.push_back(std::find(golds[i].begin(), golds[i].end(), c) != golds[i].end() ? 1 : 0);
    }
    return std::make_pair(scores, bin);
  };
  if (num_classes == 2) {
    const auto [s, b] = column(1);
    return auroc(s, b);
  }
  double sum = 0.0;
  int used = 0;
  for (int c = 0; c < num_classes; ++c) {
    const auto [s, b] = column(c);
    const auto positives = std::count(b.begin(), b.end(), 1);
    if (positives == 0 || positives == static_cast<long>(b.size())) continue;
    sum += auroc(s, b);
    ++used;
  }
  if (used == 0) throw MetricError("auroc_macro: no class has both positives and negatives");
  return sum / used;
}

std::vector<int> predict_labels(std::span<const double> probs, bool multi_label) {
  if (probs.empty()) throw MetricError("predict_labels: empty score vector");
  const auto best = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  if (!multi_label) return {best};
  const double threshold = 1.0 / static_cast<double>(probs.size());
  std::vector<int> out;
  for (Size c = 0; c < probs.size(); ++c) {
    if (probs[c] > threshold) out.push_back(static_cast<int>(c));
  }
  if (out.empty()) out.push_back(best);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

std::string to_string(LossKind kind) {
  return kind == LossKind::Evidential ? "evidential" : "cross_entropy";
}

LossKind parse_loss(std::string_view name) {
  if (name == "evidential") return LossKind::Evidential;
  if (name == "cross_entropy") return LossKind::CrossEntropy;
  throw ConfigError("unknown loss '" + std::string(name) + "' (expected evidential|cross_entropy)");
}

EvalReport evaluate(const MultimodalEncoder& encoder, const PromptModule& prompts,
                    const std::vector<Sample>& samples, LossKind loss) {
  std::vector<std::vector<double>> logits;
  logits.reserve(samples.size());
  for (const auto& s : samples) logits.push_back(encoder.forward(s, prompts.prompts(s.pattern)));
  return report_from_logits(logits, samples, loss, encoder.config().num_classes);
}

// ---------------------------------------------------------------------------
// Training

void WarmupConfig::validate() const {
  if (epochs < 0) throw ConfigError("warmup.epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("warmup.batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("warmup.lr must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("warmup.weight_decay must be >= 0");
}

void TrainConfig::validate() const {
  model.validate();
  optimizer.validate();
  warmup.validate();
  if (model.modalities > kMaxModalities) throw ConfigError("too many modalities");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (method == PromptMethod::EPEP) {
    // Surfaces divisibility and rank errors before any training happens.
    LowRankPrompt(BlockPartition(model.modalities, model.d_model, model.prompt_len), rank);
  }
}

double observed_missing_rate(const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  const auto missing = std::count_if(samples.begin(), samples.end(),
                                     [](const Sample& s) { return !s.pattern.empty(); });
  return static_cast<double>(missing) / static_cast<double>(samples.size());
}

CompleteSamplePolicy resolve_policy(const TrainConfig& config, const std::vector<Sample>& train) {
  if (config.policy) return *config.policy;
  return default_policy(observed_missing_rate(train));
}

MultimodalEncoder warmup_backbone(const TrainConfig& config, const std::vector<Sample>& complete) {
  config.validate();
  Rng init(derive_seed(config.seed, "init"));
  MultimodalEncoder enc(config.model, init);
  const auto& wc = config.warmup;
  if (wc.epochs == 0 || complete.empty()) return enc;
  for (const auto& s : complete) {
    if (!s.pattern.empty()) throw TrainingError("warm-up data must be complete");
    enc.check_sample(s);
  }

  Rng shuffle(derive_seed(config.seed, "warmup.shuffle"));
  const std::int64_t total = batches_per_epoch(complete.size(), wc.batch_size) * wc.epochs;
  AdamW opt(OptimizerConfig{wc.lr, 0.9, 0.999, 1e-8, wc.weight_decay}, total);
  const auto k = static_cast<Size>(config.model.num_classes);

  std::vector<Size> order(complete.size());
  std::iota(order.begin(), order.end(), Size{0});
  ModelGradients g = enc.zero_gradients(0, true);
  BackwardOptions opts{.backbone = true, .head = true, .prompts = false};
  ForwardTrace tr;
  std::vector<ParamSlot> slots;
  {
    std::vector<std::pair<std::string, Matrix*>> values, grads;
    auto into = [](std::vector<std::pair<std::string, Matrix*>>& dst) {
      return [&dst](const std::string& name, Matrix& m) { dst.emplace_back(name, &m); };
    };
    enc.backbone().for_each_parameter(into(values));
    enc.head().for_each_parameter(into(values));
    g.backbone.for_each_parameter(into(grads));
    g.head.for_each_parameter(into(grads));
    for (Size i = 0; i < values.size(); ++i) {
      slots.push_back({values[i].first, values[i].second, grads[i].second});
    }
  }

  for (int epoch = 0; epoch < wc.epochs; ++epoch) {
    shuffle.shuffle(std::span<Size>(order));
    for (Size start = 0; start < order.size(); start += static_cast<Size>(wc.batch_size)) {
      const Size end = std::min(order.size(), start + static_cast<Size>(wc.batch_size));
      const double scale = 1.0 / static_cast<double>(end - start);
      g.backbone.for_each_parameter([](const std::string&, Matrix& m) { m.fill(0.0); });
      g.head.for_each_parameter([](const std::string&, Matrix& m) { m.fill(0.0); });
      for (Size b = start; b < end; ++b) {
        const Sample& s = complete[order[b]];
        const auto logits = enc.forward(s, {}, &tr);
        const LabelVector y = LabelVector::from_indices(s.labels, k);
        const double loss = cross_entropy(logits, y);
        if (!std::isfinite(loss)) {
          throw TrainingError("warm-up diverged at epoch " + std::to_string(epoch) +
                              ", sample " + std::to_string(order[b]));
        }
        auto dl = cross_entropy_gradients(logits, y);
        for (double& v : dl) v *= scale;
        enc.backward(s, tr, dl, opts, g);
      }
      opt.step(slots);
    }
  }
  return enc;
}

static bool trainable_finite(HeadParams& head, PromptModule& prompts) {
  bool ok = true;
  const ParamVisitor check = [&](const std::string&, Matrix& m) { ok = ok && m.all_finite(); };
  head.for_each_parameter(check);
  prompts.for_each_parameter(check);
  return ok;
}

TrainResult train_prompts(const TrainConfig& config, MultimodalEncoder encoder,
                          const std::vector<Sample>& train, const std::vector<Sample>& test) {
  config.validate();
  if (encoder.config() != config.model) {
    throw ShapeError("train_prompts: encoder dimensions differ from the config");
  }
  if (train.empty()) throw TrainingError("training set is empty");
  if (test.empty()) throw TrainingError("test set is empty");
  for (const auto& s : train) encoder.check_sample(s);
  for (const auto& s : test) encoder.check_sample(s);

  if (config.reinit_classifier) {
    Rng head_rng(derive_seed(config.seed, "head"));
    encoder.reinit_classifier(head_rng);
  }
  const CompleteSamplePolicy policy = resolve_policy(config, train);
  TrainResult res{std::move(encoder), make_prompt_module(config, policy), policy, 0, {}};
  const MultimodalEncoder& enc = res.encoder;
  const int num_classes = config.model.num_classes;
  const auto k = static_cast<Size>(num_classes);

  const FeatureCache train_cache(enc, res.prompts, train);
  const FeatureCache test_cache(enc, res.prompts, test);
  auto log_epoch = [&](int epoch) {
    res.history.push_back({epoch, "test",
                           report_from_logits(test_cache.logits(enc, res.prompts, test), test,
                                              config.loss, num_classes)});
    if (config.eval_train) {
      res.history.push_back({epoch, "train",
                             report_from_logits(train_cache.logits(enc, res.prompts, train),
                                                train, config.loss, num_classes)});
    }
  };
  log_epoch(0);
  if (config.epochs == 0) return res;

  const std::int64_t total = batches_per_epoch(train.size(), config.batch_size) * config.epochs;
  AdamW opt(config.optimizer, total);
  Rng shuffle(derive_seed(config.seed, "shuffle"));
  ModelGradients mg = enc.zero_gradients(res.prompts.num_banks());
  PromptModule gprompts = res.prompts.zeros_like();
  std::vector<ParamSlot> slots;
  collect_trainable(res.encoder.head(), res.prompts, mg.head, gprompts, slots);

  const BackwardOptions opts{.backbone = false, .head = true, .prompts = true};
  ForwardTrace tr;
  Matrix pooler;
  std::vector<Size> order(train.size());
  std::iota(order.begin(), order.end(), Size{0});

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle.shuffle(std::span<Size>(order));
    Size batch_index = 0;
    for (Size start = 0; start < order.size();
         start += static_cast<Size>(config.batch_size), ++batch_index) {
      const Size end = std::min(order.size(), start + static_cast<Size>(config.batch_size));
      const double scale = 1.0 / static_cast<double>(end - start);
      zero_all(mg.head, gprompts);
      for (Size b = start; b < end; ++b) {
        const Size idx = order[b];
        const Sample& s = train[idx];
        const LabelVector y = LabelVector::from_indices(s.labels, k);
        std::vector<double> logits;
        if (train_cache.cached(idx)) {
          logits = enc.head_forward(train_cache.pooled(idx), &pooler);
        } else {
          logits = enc.forward(s, res.prompts.prompts(s.pattern), &tr);
        }
        SampleLoss sl = loss_and_gradient(logits, y, config.loss, config.lambda);
        if (!std::isfinite(sl.value)) {
          throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_index) + ", sample " +
                                    std::to_string(idx) + " (pattern " + to_string(s.pattern) +
                                    ")",
                                res);
        }
        for (double& v : sl.dlogits) v *= scale;
        if (train_cache.cached(idx)) {
          enc.head_backward(train_cache.pooled(idx), pooler, sl.dlogits, mg.head);
        } else {
          for (auto& p : mg.prompts) p.fill(0.0);
          enc.backward(s, tr, sl.dlogits, opts, mg);
          res.prompts.accumulate(s.pattern, mg.prompts, gprompts);
        }
      }
      // Parameters from before this step, in case the update overflows.
      HeadParams head_before = res.encoder.head();
      PromptModule prompts_before = res.prompts;
      opt.step(slots);
      if (!trainable_finite(res.encoder.head(), res.prompts)) {
        res.encoder.head() = std::move(head_before);
        res.prompts = std::move(prompts_before);
        throw DivergenceError("non-finite parameters after epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(batch_index),
                              res);
      }
    }
    res.epochs_trained = epoch;
    log_epoch(epoch);
  }
  return res;
}

TrainResult train(const TrainConfig& config, const std::vector<Sample>& warmup_set,
                  const std::vector<Sample>& train, const std::vector<Sample>& test) {
  return train_prompts(config, warmup_backbone(config, warmup_set), train, test);
}

// ---------------------------------------------------------------------------
// Metrics CSV

void write_metrics_header(std::ostream& out) {
  out << "epoch,split,f1_macro,auroc,loss_eb,loss_kl,mean_u_complete,mean_u_missing\n";
}

void write_metrics_row(std::ostream& out, const HistoryRow& row) {
  char buf[512];
  const auto& r = row.report;
  std::snprintf(buf, sizeof buf, "%d,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", row.epoch,
                row.split.c_str(), r.f1_macro, r.auroc, r.loss_eb, r.loss_kl, r.mean_u_complete,
                r.mean_u_missing);
  out << buf;
}

void write_metrics_csv(std::ostream& out, const std::vector<HistoryRow>& history) {
  write_metrics_header(out);
  for (const auto& row : history) write_metrics_row(out, row);
}

}  // namespace epep
