#include <gtest/gtest.h>

#include <sstream>

#include "epep/bkm.hpp"
#include "epep/error.hpp"
#include "epep/prompting.hpp"

using namespace epep;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& x : m.data()) x = rng.normal();
  return m;
}

std::vector<double> flatten_params(PromptModule& module) {
  std::vector<double> out;
  module.for_each_parameter([&](const std::string&, Matrix& m) {
    out.insert(out.end(), m.data().begin(), m.data().end());
  });
  return out;
}

void assign_params(PromptModule& module, std::span<const double> x) {
  std::size_t k = 0;
  module.for_each_parameter([&](const std::string&, Matrix& m) {
    for (double& v : m.data()) v = x[k++];
  });
}

}  // namespace

TEST(MissingPattern, BitmaskBasics) {
  const auto p = MissingPattern::of({0, 2});
  EXPECT_EQ(p.mask(), 0b101u);
  EXPECT_TRUE(p.contains(2));
  EXPECT_FALSE(p.contains(1));
  EXPECT_EQ(p.count(), 2);
  EXPECT_EQ(p.indices(), (std::vector<int>{0, 2}));
  EXPECT_TRUE(MissingPattern::none().empty());
  EXPECT_EQ(MissingPattern::all(3).mask(), 0b111u);
  EXPECT_THROW(p.validate(2), PatternError);
  EXPECT_NO_THROW(p.validate(3));
  EXPECT_THROW(MissingPattern::of({kMaxModalities}), PatternError);
  EXPECT_THROW(MissingPattern::of({-1}), PatternError);
}

TEST(Policy, NamesAndDefaults) {
  for (auto p : {CompleteSamplePolicy::ZeroPrompt, CompleteSamplePolicy::SkipPrompt,
                 CompleteSamplePolicy::AllWeights})
    EXPECT_EQ(parse_policy(to_string(p)), p);
  for (auto m : {PromptMethod::EPEP, PromptMethod::MAP, PromptMethod::MSP, PromptMethod::NoPrompt})
    EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_THROW(parse_policy("sometimes"), ConfigError);
  EXPECT_EQ(default_policy(0.6), CompleteSamplePolicy::ZeroPrompt);
  EXPECT_EQ(default_policy(0.3), CompleteSamplePolicy::ZeroPrompt);
  EXPECT_EQ(default_policy(0.1), CompleteSamplePolicy::SkipPrompt);
}

TEST(PromptBank, AssembledPromptMatchesDefinition) {
  Rng rng(31);
  const BlockPartition part(2, 6, 4);
  auto bank = PromptBank::create(part, 2, CompleteSamplePolicy::ZeroPrompt, rng);
  const Matrix w = materialize(bank.comprehensive);

  const auto text = assemble_prompt(bank, MissingPattern::of({0}));
  ASSERT_TRUE(text);
  EXPECT_EQ(*text, bkm_multiply(bank.weights[0], w, part));

  const auto both = assemble_prompt(bank, MissingPattern::of({0, 1}));
  EXPECT_LT(max_abs_diff(*both, bkm_multiply(bank.weights[0] + bank.weights[1], w, part)), 1e-14);

  // Complete sample under ZeroPrompt: an all-zero prompt of full shape.
  EXPECT_EQ(*assemble_prompt(bank, MissingPattern::none()), Matrix(6, 4));
  EXPECT_THROW(assemble_prompt(bank, MissingPattern::of({2})), PatternError);
}

TEST(PromptBank, CompleteSamplePolicies) {
  Rng rng(32);
  const BlockPartition part(2, 4, 4);
  auto bank = PromptBank::create(part, 1, CompleteSamplePolicy::SkipPrompt, rng);
  EXPECT_FALSE(assemble_prompt(bank, MissingPattern::none()));
  bank.policy = CompleteSamplePolicy::AllWeights;
  EXPECT_EQ(*assemble_prompt(bank, MissingPattern::none()),
            *assemble_prompt(bank, MissingPattern::all(2)));
}

TEST(PromptBank, WeightsStartNearIdentity) {
  Rng rng(33);
  const auto bank = PromptBank::create(BlockPartition(3, 6, 6), 2, CompleteSamplePolicy::ZeroPrompt, rng);
  ASSERT_EQ(bank.weights.size(), 3u);
  for (const auto& w : bank.weights) EXPECT_LT(max_abs_diff(w, Matrix::identity(3)), 0.15);
}

TEST(Baselines, MapLooksUpExactCaseAndMspSums) {
  Rng rng(34);
  const auto map = BaselinePromptSet::create(PromptMethod::MAP, 2, 4, 2,
                                             CompleteSamplePolicy::ZeroPrompt, rng);
  ASSERT_EQ(map.prompts.size(), 3u);
  // Masks 1, 2, 3 map to prompts 0, 1, 2.
  EXPECT_EQ(*baseline_prompt(map, MissingPattern::of({0})), map.prompts[0]);
  EXPECT_EQ(*baseline_prompt(map, MissingPattern::of({1})), map.prompts[1]);
  EXPECT_EQ(*baseline_prompt(map, MissingPattern::of({0, 1})), map.prompts[2]);
  EXPECT_EQ(*baseline_prompt(map, MissingPattern::none()), Matrix(4, 2));

  const auto msp = BaselinePromptSet::create(PromptMethod::MSP, 3, 4, 2,
                                             CompleteSamplePolicy::SkipPrompt, rng);
  ASSERT_EQ(msp.prompts.size(), 3u);
  EXPECT_EQ(*baseline_prompt(msp, MissingPattern::of({0, 2})), msp.prompts[0] + msp.prompts[2]);
  EXPECT_FALSE(baseline_prompt(msp, MissingPattern::none()));
  EXPECT_THROW(BaselinePromptSet::prompt_count(PromptMethod::EPEP, 2), ConfigError);
}

TEST(ParamCount, TabulatedValues) {
  EXPECT_EQ(param_count(2, 768, 16, 4, PromptMethod::MAP), 36864);
  EXPECT_EQ(param_count(2, 768, 16, 4, PromptMethod::MSP), 24576);
  EXPECT_EQ(param_count(2, 768, 16, 4, PromptMethod::EPEP), 3144);
  EXPECT_EQ(param_count(2, 768, 16, 4, PromptMethod::NoPrompt), 0);
  EXPECT_EQ(param_count_blockwise(2, 768, 16, 4), 6280);
  EXPECT_THROW(param_count(3, 768, 16, 4, PromptMethod::EPEP), ConfigError);
}

TEST(ParamCount, ModuleCountsAgreeWithFormulas) {
  Rng rng(35);
  const int m = 2, d = 16, l = 8, r = 3;
  EXPECT_EQ(PromptModule::baseline(PromptMethod::MAP, m, d, l, 1, CompleteSamplePolicy::ZeroPrompt, rng)
                .parameter_count(),
            param_count(m, d, l, r, PromptMethod::MAP));
  EXPECT_EQ(PromptModule::baseline(PromptMethod::MSP, m, d, l, 1, CompleteSamplePolicy::ZeroPrompt, rng)
                .parameter_count(),
            param_count(m, d, l, r, PromptMethod::MSP));
  // The trained bank stores a factor pair per block.
  EXPECT_EQ(PromptModule::epep(m, d, l, r, 1, CompleteSamplePolicy::ZeroPrompt, rng).parameter_count(),
            param_count_blockwise(m, d, l, r));
  EXPECT_EQ(PromptModule::none().parameter_count(), 0);
}

TEST(ParamCount, OrderingHoldsAcrossSweep) {
  for (int m : {2, 3, 4})
    for (int r = 1; r <= 8; ++r)
      for (int d = 64; d <= 768; d += 64)
        for (int l = 64; l <= 768; l += 64) {
          if (d % m || l % m) continue;
          const auto e = param_count(m, d, l, r, PromptMethod::EPEP);
          const auto s = param_count(m, d, l, r, PromptMethod::MSP);
          const auto a = param_count(m, d, l, r, PromptMethod::MAP);
          ASSERT_LT(e, s) << m << " " << d << " " << l << " " << r;
          ASSERT_LT(s, a);
        }
}

TEST(ParamReport, PrintsRowsAndOrdering) {
  const auto report = param_report(2, 768, 16, 4);
  EXPECT_TRUE(report.ordered());
  std::ostringstream os;
  print_param_report(report, os);
  const std::string s = os.str();
  EXPECT_NE(s.find("EPEP    3144"), std::string::npos);
  EXPECT_NE(s.find("MSP     24576"), std::string::npos);
  EXPECT_NE(s.find("MAP     36864"), std::string::npos);

  const auto bad = param_report(2, 769, 16, 4);
  EXPECT_FALSE(bad.rows.back().count);
  EXPECT_FALSE(bad.rows.back().error.empty());
}

TEST(PromptModule, GradientsMatchCentralDifferences) {
  Rng rng(36);
  for (auto method : {PromptMethod::EPEP, PromptMethod::MAP, PromptMethod::MSP}) {
    for (auto policy : {CompleteSamplePolicy::ZeroPrompt, CompleteSamplePolicy::AllWeights}) {
      PromptModule module =
          method == PromptMethod::EPEP
              ? PromptModule::epep(2, 4, 6, 2, 2, policy, rng)
              : PromptModule::baseline(method, 2, 4, 6, 2, policy, rng);
      for (std::uint32_t mask = 0; mask < 4; ++mask) {
        const auto pattern = MissingPattern::from_mask(mask);
        std::vector<Matrix> up;
        for (std::size_t b = 0; b < module.num_banks(); ++b) up.push_back(random_matrix(4, 6, rng));

        PromptModule grad = module.zeros_like();
        module.accumulate(pattern, up, grad);
        const auto analytic = flatten_params(grad);

        PromptModule probe = module;
        const ScalarFunction f = [&](std::span<const double> x) {
          assign_params(probe, x);
          const auto ps = probe.prompts(pattern);
          double s = 0;
          for (std::size_t b = 0; b < ps.size(); ++b) s += frobenius_dot(up[b], ps[b]);
          return s;
        };
        const auto numeric = finite_diff_grad(f, flatten_params(module));
        EXPECT_LT(relative_error(analytic, numeric), 1e-7)
            << to_string(method) << " " << to_string(policy) << " mask " << mask;
        EXPECT_EQ(module.depends_on_parameters(pattern),
                  std::any_of(analytic.begin(), analytic.end(), [](double v) { return v != 0; }));
      }
    }
  }
}

TEST(PromptModule, DependsOnParameters) {
  Rng rng(37);
  const auto none = PromptModule::none();
  EXPECT_FALSE(none.depends_on_parameters(MissingPattern::of({0})));
  EXPECT_TRUE(none.prompts(MissingPattern::of({0})).empty());
  const auto skip = PromptModule::epep(2, 4, 4, 1, 1, CompleteSamplePolicy::SkipPrompt, rng);
  EXPECT_FALSE(skip.depends_on_parameters(MissingPattern::none()));
  EXPECT_TRUE(skip.prompts(MissingPattern::none()).empty());
  EXPECT_TRUE(skip.depends_on_parameters(MissingPattern::of({1})));
  const auto all = PromptModule::epep(2, 4, 4, 1, 1, CompleteSamplePolicy::AllWeights, rng);
  EXPECT_TRUE(all.depends_on_parameters(MissingPattern::none()));
}

TEST(PromptModule, PerLayerBanksAreIndependent) {
  Rng rng(38);
  const auto module = PromptModule::epep(2, 4, 4, 2, 3, CompleteSamplePolicy::ZeroPrompt, rng);
  ASSERT_EQ(module.num_banks(), 3u);
  const auto ps = module.prompts(MissingPattern::of({0}));
  ASSERT_EQ(ps.size(), 3u);
  EXPECT_NE(ps[0], ps[1]);
}
