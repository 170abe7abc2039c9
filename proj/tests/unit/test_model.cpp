#include <gtest/gtest.h>

#include <cmath>

#include "epep/error.hpp"
#include "epep/evidential.hpp"
#include "epep/model.hpp"

using namespace epep;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.d_model = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ffn_dim = 8;
  cfg.tokens_per_modality = 3;
  cfg.patch_dim = 4;
  cfg.text_vocab = 6;
  cfg.prompt_len = 2;
  cfg.prompt_inject_layers = 2;
  cfg.num_classes = 3;
  return cfg;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& x : m.data()) x = rng.normal();
  return m;
}

Sample random_sample(const EncoderConfig& cfg, MissingPattern pattern, Rng& rng) {
  Sample s;
  for (int i = 0; i < cfg.tokens_per_modality; ++i)
    s.text_tokens.push_back(1 + static_cast<int>(rng.below(cfg.text_vocab - 1)));
  s.image_patches = random_matrix(cfg.tokens_per_modality, cfg.patch_dim, rng);
  s.labels = {static_cast<int>(rng.below(cfg.num_classes))};
  s.pattern = pattern;
  return substitute_dummy(std::move(s));
}

// Every parameter of encoder, head and prompts, in a fixed order.
std::vector<std::pair<std::string, Matrix*>> slots(MultimodalEncoder& enc, std::vector<Matrix>& prompts) {
  std::vector<std::pair<std::string, Matrix*>> out;
  const ParamVisitor add = [&](const std::string& n, Matrix& m) { out.emplace_back(n, &m); };
  enc.backbone().for_each_parameter(add);
  enc.head().for_each_parameter(add);
  for (std::size_t b = 0; b < prompts.size(); ++b) out.emplace_back("prompt" + std::to_string(b), &prompts[b]);
  return out;
}

}  // namespace

TEST(Encoder, ConfigValidation) {
  EncoderConfig cfg = tiny_config();
  EXPECT_NO_THROW(cfg.validate());
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.modalities = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.prompt_inject_layers = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Encoder, LayerTokenCounts) {
  EncoderConfig cfg = tiny_config();
  cfg.layers = 3;
  Rng rng(41);
  const MultimodalEncoder enc(cfg, rng);
  const Sample s = random_sample(cfg, MissingPattern::none(), rng);
  ForwardTrace tr;
  enc.forward(s, std::vector<Matrix>{Matrix(8, 2)}, &tr);
  // 6 base tokens, 2 prompt tokens in each of the first two layers.
  EXPECT_EQ(tr.layer_tokens, (std::vector<int>{8, 8, 6}));
  enc.forward(s, {}, &tr);
  EXPECT_EQ(tr.layer_tokens, (std::vector<int>{6, 6, 6}));
}

TEST(Encoder, PromptsChangeOutputOnlyWhenNonZero) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(42);
  const MultimodalEncoder enc(cfg, rng);
  const Sample s = random_sample(cfg, MissingPattern::of({kImageModality}), rng);
  const auto plain = enc.forward(s, {});
  const auto with = enc.forward(s, std::vector<Matrix>{random_matrix(8, 2, rng)});
  EXPECT_NE(plain, with);
}

TEST(Encoder, HeadForwardIsBitwiseIdentical) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(43);
  const MultimodalEncoder enc(cfg, rng);
  for (int t = 0; t < 10; ++t) {
    const Sample s = random_sample(cfg, MissingPattern::from_mask(static_cast<std::uint32_t>(t % 3)), rng);
    const std::vector<Matrix> prompts{random_matrix(8, 2, rng)};
    ForwardTrace tr;
    const auto full = enc.forward(s, prompts, &tr);
    const Matrix pooled = enc.pooled_features(s, prompts);
    EXPECT_EQ(pooled, tr.pooled);
    Matrix pooler;
    EXPECT_EQ(enc.head_forward(pooled, &pooler), full);
    EXPECT_EQ(pooler, tr.pooler);
  }
}

TEST(Encoder, InputValidation) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(44);
  const MultimodalEncoder enc(cfg, rng);
  Sample s = random_sample(cfg, MissingPattern::none(), rng);
  Sample bad = s;
  bad.text_tokens.push_back(1);
  EXPECT_THROW(enc.forward(bad, {}), ShapeError);
  bad = s;
  bad.text_tokens[0] = cfg.text_vocab;
  EXPECT_THROW(enc.forward(bad, {}), ShapeError);
  bad = s;
  bad.image_patches = Matrix(3, 5);
  EXPECT_THROW(enc.forward(bad, {}), ShapeError);
  EXPECT_THROW(enc.forward(s, std::vector<Matrix>{Matrix(8, 3)}), ShapeError);
  EXPECT_THROW(enc.forward(s, std::vector<Matrix>(3, Matrix(8, 2))), ShapeError);
}

TEST(Encoder, DummySubstitution) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(45);
  Sample s = random_sample(cfg, MissingPattern::none(), rng);
  s.pattern = MissingPattern::of({kTextModality, kImageModality});
  const Sample d = substitute_dummy(s);
  EXPECT_EQ(d.text_tokens, std::vector<int>(3, kPadToken));
  EXPECT_EQ(d.image_patches, Matrix(3, 4));
  s.pattern = MissingPattern::none();
  EXPECT_EQ(substitute_dummy(s), s);
}

TEST(Encoder, ReinitClassifierLeavesBackboneAndPooler) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(46);
  MultimodalEncoder enc(cfg, rng);
  const auto before = enc;
  enc.reinit_classifier(rng);
  EXPECT_EQ(enc.head().pooler_w, before.head().pooler_w);
  EXPECT_NE(enc.head().cls_w, before.head().cls_w);
  EXPECT_EQ(enc.backbone().token_embed, before.backbone().token_embed);
}

TEST(Encoder, PadEmbeddingIsZeroAndFrozen) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(47);
  const MultimodalEncoder enc(cfg, rng);
  for (double x : enc.backbone().token_embed.row(kPadToken)) EXPECT_EQ(x, 0.0);
  const Sample s = random_sample(cfg, MissingPattern::of({kTextModality}), rng);
  ForwardTrace tr;
  const auto logits = enc.forward(s, {}, &tr);
  auto g = enc.zero_gradients(0, true);
  BackwardOptions opts;
  opts.backbone = true;
  enc.backward(s, tr, evidential_gradients(logits, LabelVector::one_hot(0, 3)), opts, g);
  for (double x : g.backbone.token_embed.row(kPadToken)) EXPECT_EQ(x, 0.0);
}

TEST(Encoder, BackboneGradientsRequireAllocation) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(48);
  const MultimodalEncoder enc(cfg, rng);
  const Sample s = random_sample(cfg, MissingPattern::none(), rng);
  ForwardTrace tr;
  const auto logits = enc.forward(s, {}, &tr);
  auto g = enc.zero_gradients(0);
  BackwardOptions opts;
  opts.backbone = true;
  EXPECT_THROW(enc.backward(s, tr, logits, opts, g), ShapeError);
}

// Full backward pass against central differences on every coordinate, for
// each missing pattern, with one prompt bank per injected layer.
TEST(Encoder, AllGradientsMatchCentralDifferences) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(49);
  for (std::uint32_t mask = 0; mask < 3; ++mask) {
    MultimodalEncoder enc(cfg, rng);
    // Non-trivial LayerNorm affine parameters.
    enc.backbone().for_each_parameter([&](const std::string& n, Matrix& m) {
      if (n.find("gamma") != std::string::npos || n.find("beta") != std::string::npos)
        for (double& x : m.data()) x += 0.3 * rng.normal();
    });
    const Sample s = random_sample(cfg, MissingPattern::from_mask(mask), rng);
    std::vector<Matrix> prompts{random_matrix(8, 2, rng), random_matrix(8, 2, rng)};
    std::vector<double> c(3);
    for (double& x : c) x = rng.normal();

    ForwardTrace tr;
    enc.forward(s, prompts, &tr);
    ModelGradients g = enc.zero_gradients(prompts.size(), true);
    BackwardOptions opts;
    opts.backbone = true;
    enc.backward(s, tr, c, opts, g);

    std::vector<Matrix> gprompts = g.prompts;
    auto value_slots = slots(enc, prompts);
    MultimodalEncoder genc(cfg, enc.backbone(), enc.head());
    genc.backbone() = g.backbone;
    genc.head() = g.head;
    auto grad_slots = slots(genc, gprompts);
    ASSERT_EQ(value_slots.size(), grad_slots.size());

    const double h = 1e-6;
    for (std::size_t p = 0; p < value_slots.size(); ++p) {
      Matrix& v = *value_slots[p].second;
      const Matrix& gm = *grad_slots[p].second;
      ASSERT_TRUE(v.same_shape(gm)) << value_slots[p].first;
      std::vector<double> analytic, numeric;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (value_slots[p].first == "backbone.token_embed" && i < v.cols()) continue;  // pad row
        const double orig = v.data()[i];
        auto objective = [&] {
          const auto z = enc.forward(s, prompts);
          return c[0] * z[0] + c[1] * z[1] + c[2] * z[2];
        };
        v.data()[i] = orig + h;
        const double up = objective();
        v.data()[i] = orig - h;
        const double down = objective();
        v.data()[i] = orig;
        analytic.push_back(gm.data()[i]);
        numeric.push_back((up - down) / (2 * h));
      }
      // The key bias shifts every score of a query row equally, so softmax
      // ignores it and both derivatives are rounding noise around zero.
      if (value_slots[p].first.ends_with(".bk")) {
        for (std::size_t i = 0; i < analytic.size(); ++i) {
          EXPECT_LT(std::abs(analytic[i]), 1e-12);
          EXPECT_LT(std::abs(numeric[i]), 1e-7);
        }
        continue;
      }
      EXPECT_LT(relative_error(analytic, numeric), 1e-6)
          << value_slots[p].first << " mask " << mask;
    }
  }
}

TEST(Encoder, TrainableOnlyBackwardMatchesFullBackward) {
  const EncoderConfig cfg = tiny_config();
  Rng rng(50);
  const MultimodalEncoder enc(cfg, rng);
  const Sample s = random_sample(cfg, MissingPattern::of({kTextModality}), rng);
  const std::vector<Matrix> prompts{random_matrix(8, 2, rng)};
  ForwardTrace tr;
  const auto logits = enc.forward(s, prompts, &tr);
  const auto dl = evidential_gradients(logits, LabelVector::one_hot(2, 3));
  auto full = enc.zero_gradients(1, true);
  BackwardOptions all;
  all.backbone = true;
  enc.backward(s, tr, dl, all, full);
  auto part = enc.zero_gradients(1);
  enc.backward(s, tr, dl, {}, part);
  EXPECT_LT(max_abs_diff(full.head.cls_w, part.head.cls_w), 1e-15);
  EXPECT_LT(max_abs_diff(full.prompts[0], part.prompts[0]), 1e-15);

  // Head backward from cached features agrees with the full pass.
  HeadParams gh = enc.head().zeros_like();
  Matrix pooler;
  enc.head_forward(tr.pooled, &pooler);
  auto no_prompt = enc.zero_gradients(1);
  enc.backward(s, tr, dl, {}, no_prompt);
  enc.head_backward(tr.pooled, pooler, dl, gh);
  EXPECT_LT(max_abs_diff(gh.pooler_w, no_prompt.head.pooler_w), 1e-15);
  EXPECT_LT(max_abs_diff(gh.cls_b, no_prompt.head.cls_b), 1e-15);
}
