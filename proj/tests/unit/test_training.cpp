#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "epep/config.hpp"
#include "epep/error.hpp"
#include "epep/evidential.hpp"
#include "epep/training.hpp"

using namespace epep;

namespace {

RunConfig small_run(std::uint64_t seed) {
  RunConfig cfg;
  auto& m = cfg.train.model;
  m.d_model = 16;
  m.layers = 2;
  m.heads = 2;
  m.ffn_dim = 32;
  m.tokens_per_modality = 8;
  m.patch_dim = 10;
  m.text_vocab = 11;
  m.prompt_len = 4;
  m.prompt_inject_layers = 2;
  cfg.train.seed = seed;
  cfg.train.rank = 2;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 16;
  cfg.train.warmup.epochs = 2;
  cfg.data.n_warmup = 96;
  cfg.data.n_train = 64;
  cfg.data.n_test = 40;
  cfg.validate();
  return cfg;
}

double pair_count_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

bool same_params(HeadParams a, HeadParams b) {
  std::vector<Matrix> va, vb;
  a.for_each_parameter([&](const std::string&, Matrix& m) { va.push_back(m); });
  b.for_each_parameter([&](const std::string&, Matrix& m) { vb.push_back(m); });
  return va == vb;
}

}  // namespace

TEST(Schedule, CosineValues) {
  EXPECT_EQ(cosine_lr(0.1, 0, 10), 0.1);
  EXPECT_NEAR(cosine_lr(0.1, 5, 10), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(0.1, 9, 10), 0.05 * (1 + std::cos(M_PI * 0.9)), 1e-15);
  EXPECT_EQ(cosine_lr(0.1, 10, 10), 0.0);
  EXPECT_EQ(cosine_lr(0.1, 11, 10), 0.0);
  EXPECT_THROW(cosine_lr(0.1, -1, 10), ConfigError);
}

TEST(AdamW, MatchesScalarReference) {
  const OptimizerConfig cfg{0.05, 0.9, 0.99, 1e-8, 0.1};
  const std::int64_t total = 6;
  AdamW opt(cfg, total);
  Matrix w = Matrix::from_rows({{1.0, -2.0}});
  Matrix g(1, 2);
  const std::vector<ParamSlot> slots{{"w", &w, &g}};

  std::vector<double> ref{1.0, -2.0}, m(2, 0.0), v(2, 0.0);
  for (int t = 0; t < total; ++t) {
    g(0, 0) = 0.3 * t - 0.5;
    g(0, 1) = std::sin(t + 1.0);
    const double lr = cfg.lr * (1 + std::cos(M_PI * t / total)) / 2;
    for (int i = 0; i < 2; ++i) {
      const double gi = g(0, i);
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi;
      const double mh = m[i] / (1 - std::pow(cfg.beta1, t + 1));
      const double vh = v[i] / (1 - std::pow(cfg.beta2, t + 1));
      ref[i] = ref[i] * (1 - lr * cfg.weight_decay) - lr * mh / (std::sqrt(vh) + cfg.eps);
    }
    opt.step(slots);
    EXPECT_NEAR(w(0, 0), ref[0], 1e-14) << "step " << t;
    EXPECT_NEAR(w(0, 1), ref[1], 1e-14) << "step " << t;
  }
  EXPECT_EQ(opt.steps(), total);
  EXPECT_EQ(opt.lr(), 0.0);
}

TEST(AdamW, RejectsBadInput) {
  AdamW opt(OptimizerConfig{}, 10);
  Matrix w(1, 2), g(1, 2), w2(2, 2), g2(2, 2);
  opt.step(std::vector<ParamSlot>{{"w", &w, &g}});
  EXPECT_THROW(opt.step(std::vector<ParamSlot>{{"w", &w, &g}, {"w2", &w2, &g2}}), ShapeError);
  EXPECT_THROW(opt.step(std::vector<ParamSlot>{{"w2", &w2, &g2}}), ShapeError);
  g(0, 1) = std::nan("");
  try {
    opt.step(std::vector<ParamSlot>{{"w", &w, &g}});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
  }
  EXPECT_THROW((OptimizerConfig{-1.0}.validate()), ConfigError);
}

TEST(Metrics, F1Fixtures) {
  // Class 0: tp 1, fp 1, fn 0 -> 2/3. Class 1: tp 2, fp 0, fn 1 -> 4/5.
  EXPECT_NEAR(f1_macro({{0}, {0}, {1}, {1}}, {{0}, {1}, {1}, {1}}, 2), (2.0 / 3 + 0.8) / 2, 1e-15);
  // Class 1 has no support and no predictions: it scores 0.
  EXPECT_EQ(f1_macro({{0}, {0}}, {{0}, {0}}, 2), 0.5);
  // Multi-label: class 0 tp 1 fn 1 -> 2/3; class 1 tp 1 fp 1 -> 2/3; class 2 fp 1 fn 1 -> 0.
  EXPECT_NEAR(f1_macro({{0, 1}, {1, 2}}, {{0, 2}, {0, 1}}, 3), (2.0 / 3 + 2.0 / 3) / 3, 1e-15);
  EXPECT_THROW(f1_macro({{0}}, {{0}, {1}}, 2), MetricError);
  EXPECT_THROW(f1_macro({{2}}, {{0}}, 2), MetricError);
}

TEST(Metrics, AurocMatchesPairCounting) {
  Rng rng(61);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(6)) / 5.0;  // many ties
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_EQ(auroc(s, y), pair_count_auroc(s, y)) << "instance " << t;
  }
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), MetricError);
}

TEST(Metrics, MacroAurocAveragesOneVsRest) {
  Rng rng(62);
  const int k = 4;
  std::vector<std::vector<double>> probs(40, std::vector<double>(k));
  LabelSets golds(40);
  for (std::size_t i = 0; i < 40; ++i) {
    for (double& p : probs[i]) p = rng.uniform();
    golds[i] = {static_cast<int>(rng.below(3))};  // class 3 never occurs
  }
  double sum = 0;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < 40; ++i) {
      s.push_back(probs[i][c]);
      y.push_back(golds[i][0] == c);
    }
    sum += pair_count_auroc(s, y);
  }
  EXPECT_NEAR(auroc_macro(probs, golds, k), sum / 3, 1e-15);

  // Binary: AUROC of class 1.
  std::vector<std::vector<double>> bp{{0.8, 0.2}, {0.3, 0.7}, {0.6, 0.4}};
  EXPECT_EQ(auroc_macro(bp, {{0}, {1}, {1}}, 2), 1.0);
}

TEST(Metrics, PredictLabels) {
  const std::vector<double> p{0.2, 0.5, 0.3};
  EXPECT_EQ(predict_labels(p, false), std::vector<int>{1});
  EXPECT_EQ(predict_labels(p, true), std::vector<int>{1});
  const std::vector<double> q{0.4, 0.35, 0.25};
  EXPECT_EQ(predict_labels(q, true), (std::vector<int>{0, 1}));
  const std::vector<double> flat{0.25, 0.25, 0.25, 0.25};
  EXPECT_EQ(predict_labels(flat, true), std::vector<int>{0});
}

TEST(Loss, NamesRoundTrip) {
  EXPECT_EQ(parse_loss("evidential"), LossKind::Evidential);
  EXPECT_EQ(parse_loss(to_string(LossKind::CrossEntropy)), LossKind::CrossEntropy);
  EXPECT_THROW(parse_loss("mse"), ConfigError);
}

TEST(Evaluate, UncertaintyGroups) {
  const RunConfig cfg = small_run(1);
  const auto test = make_synthetic_split(cfg, "test");
  Rng rng(63);
  const MultimodalEncoder enc(cfg.train.model, rng);
  const auto prompts = PromptModule::none();
  const auto r = evaluate(enc, prompts, test, LossKind::Evidential);
  EXPECT_EQ(r.n_complete + r.n_missing, test.size());
  EXPECT_EQ(r.n_missing, 24u);  // 40 samples, 30% + 30% missing

  // Independent recomputation of the group means.
  double uc = 0, um = 0;
  for (const auto& s : test) {
    const auto d = evidence_from_logits(enc.forward(s, {}));
    (s.pattern.empty() ? uc : um) += d.uncertainty;
  }
  EXPECT_NEAR(r.mean_u_complete, uc / r.n_complete, 1e-12);
  EXPECT_NEAR(r.mean_u_missing, um / r.n_missing, 1e-12);

  const auto ce = evaluate(enc, prompts, test, LossKind::CrossEntropy);
  double hc = 0;
  for (const auto& s : test)
    if (s.pattern.empty()) hc += normalized_entropy(softmax(enc.forward(s, {})));
  EXPECT_NEAR(ce.mean_u_complete, hc / ce.n_complete, 1e-12);
}

TEST(Warmup, OverfitsSmallCompleteSet) {
  RunConfig cfg = small_run(2);
  cfg.data.n_warmup = 64;
  cfg.train.warmup = WarmupConfig{60, 16, 1e-2, 0.0};
  const auto data = make_synthetic_split(cfg, "warmup");
  const auto enc = warmup_backbone(cfg.train, data);
  int correct = 0;
  for (const auto& s : data) {
    const auto z = enc.forward(s, {});
    correct += (z[1] > z[0]) == (s.labels[0] == 1);
  }
  EXPECT_GE(correct, 62) << "train accuracy " << correct << "/64";
}

TEST(Warmup, RejectsIncompleteSamples) {
  const RunConfig cfg = small_run(3);
  const auto train = make_synthetic_split(cfg, "train");
  EXPECT_THROW(warmup_backbone(cfg.train, train), TrainingError);
}

TEST(TrainPrompts, BackboneStaysFrozen) {
  const RunConfig cfg = small_run(4);
  const auto data = load_datasets(cfg);
  const auto enc = warmup_backbone(cfg.train, data.warmup);
  for (auto method : {PromptMethod::EPEP, PromptMethod::MAP, PromptMethod::NoPrompt}) {
    TrainConfig tc = cfg.train;
    tc.method = method;
    const auto res = train_prompts(tc, enc, data.train, data.test);
    BackboneParams a = res.encoder.backbone(), b = enc.backbone();
    std::vector<Matrix> va, vb;
    a.for_each_parameter([&](const std::string&, Matrix& m) { va.push_back(m); });
    b.for_each_parameter([&](const std::string&, Matrix& m) { vb.push_back(m); });
    EXPECT_EQ(va, vb) << to_string(method);
    EXPECT_NE(res.encoder.head().pooler_w, enc.head().pooler_w) << to_string(method);
    EXPECT_EQ(res.epochs_trained, tc.epochs);
    ASSERT_EQ(res.history.size(), static_cast<std::size_t>(tc.epochs + 1));
    EXPECT_EQ(res.history.front().epoch, 0);
    EXPECT_EQ(res.history.back().report, evaluate(res.encoder, res.prompts, data.test, tc.loss));
  }
}

TEST(TrainPrompts, PolicyResolution) {
  RunConfig cfg = small_run(5);
  const auto train = make_synthetic_split(cfg, "train");
  EXPECT_NEAR(observed_missing_rate(train), 0.59375, 1e-15);  // 19 + 19 of 64
  EXPECT_EQ(resolve_policy(cfg.train, train), CompleteSamplePolicy::ZeroPrompt);
  cfg.train.policy = CompleteSamplePolicy::AllWeights;
  EXPECT_EQ(resolve_policy(cfg.train, train), CompleteSamplePolicy::AllWeights);
  cfg.train.policy.reset();
  cfg.data.train_protocol = MissingProtocol{{1.0, 0.9}};
  EXPECT_EQ(resolve_policy(cfg.train, make_synthetic_split(cfg, "train")),
            CompleteSamplePolicy::SkipPrompt);
}

TEST(TrainPrompts, DeterministicForSeed) {
  const RunConfig cfg = small_run(6);
  const auto data = load_datasets(cfg);
  TrainConfig tc = cfg.train;
  tc.eval_train = true;
  const auto a = train(tc, data.warmup, data.train, data.test);
  const auto b = train(tc, data.warmup, data.train, data.test);
  ASSERT_EQ(a.history.size(), 2u * (tc.epochs + 1));
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].report, b.history[i].report);
  EXPECT_TRUE(same_params(a.encoder.head(), b.encoder.head()));
  std::ostringstream ca, cb;
  write_metrics_csv(ca, a.history);
  write_metrics_csv(cb, b.history);
  EXPECT_EQ(ca.str(), cb.str());

  tc.seed = 7;
  const auto c = train(tc, data.warmup, data.train, data.test);
  EXPECT_FALSE(same_params(a.encoder.head(), c.encoder.head()));
}

TEST(TrainPrompts, DivergenceKeepsLastGoodParameters) {
  RunConfig cfg = small_run(8);
  cfg.train.optimizer.lr = 1e300;
  const auto data = load_datasets(cfg);
  const auto enc = warmup_backbone(cfg.train, data.warmup);
  try {
    train_prompts(cfg.train, enc, data.train, data.test);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    const auto& good = e.last_good();
    HeadParams head = good.encoder.head();
    PromptModule prompts = good.prompts;
    bool finite = true;
    const ParamVisitor check = [&](const std::string&, Matrix& m) { finite = finite && m.all_finite(); };
    head.for_each_parameter(check);
    prompts.for_each_parameter(check);
    EXPECT_TRUE(finite);
    EXPECT_FALSE(good.history.empty());
  }
}

TEST(TrainPrompts, RejectsMismatchedEncoder) {
  const RunConfig cfg = small_run(9);
  const auto data = load_datasets(cfg);
  EncoderConfig other = cfg.train.model;
  other.layers = 3;
  Rng rng(0);
  EXPECT_THROW(train_prompts(cfg.train, MultimodalEncoder(other, rng), data.train, data.test),
               ShapeError);
}

TEST(MetricsCsv, Format) {
  std::ostringstream os;
  EvalReport r;
  r.f1_macro = 0.5;
  r.auroc = 0.75;
  write_metrics_csv(os, {{3, "test", r}});
  EXPECT_EQ(os.str(),
            "epoch,split,f1_macro,auroc,loss_eb,loss_kl,mean_u_complete,mean_u_missing\n"
            "3,test,0.5,0.75,0,0,0,0\n");
}
