#include "epep/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>

#include "epep/bkm.hpp"
#include "epep/data.hpp"
#include "epep/error.hpp"
#include "epep/evidential.hpp"
#include "epep/model.hpp"
#include "epep/numerics.hpp"
#include "epep/prompting.hpp"
#include "epep/training.hpp"

namespace epep {

namespace {

using Size = std::size_t;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

class Suite {
 public:
  Suite(std::string name, const VerifyOptions& options) : options_(options) {
    result_.name = std::move(name);
  }

  bool faulty(const std::string& op) const { return options_.inject_fault == op; }
  std::uint64_t seed(const std::string& stream) const {
    return derive_seed(options_.seed, result_.name + "." + stream);
  }

  void check(const std::string& op, bool ok, std::string detail) {
    result_.checks.push_back({op, ok, std::move(detail)});
  }

  // A check body that throws counts as a failure of that operation.
  void guarded(const std::string& op, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      check(op, false, std::string("threw: ") + e.what());
    }
  }

  SuiteResult take() { return std::move(result_); }

 private:
  const VerifyOptions& options_;
  SuiteResult result_;
};

Matrix random_matrix(Size r, Size c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

std::vector<double> flatten(const BkmGradients& g) {
  std::vector<double> out(g.grad_a.data().begin(), g.grad_a.data().end());
  for (const auto& f : g.grad_factors) {
    out.insert(out.end(), f.u.data().begin(), f.u.data().end());
    out.insert(out.end(), f.v.data().begin(), f.v.data().end());
  }
  return out;
}

// ---------------------------------------------------------------------------

void numerics_suite(Suite& s) {
  s.guarded("digamma", [&] {
    double worst = 0.0;
    for (double x : {0.01, 0.3, 1.0, 2.5, 7.0, 33.0, 1e3}) {
      double lhs = digamma(x + 1.0);
      if (s.faulty("digamma")) lhs += 1e-6;
      worst = std::max(worst, std::abs(lhs - (digamma(x) + 1.0 / x)));
    }
    const double at_one = std::abs(digamma(1.0) + std::numbers::egamma);
    const bool ok = worst < 1e-12 && at_one < 1e-14;
    s.check("digamma", ok,
            "recurrence max err " + fmt(worst) + ", |psi(1) + gamma| " + fmt(at_one));
  });
  s.guarded("trigamma", [&] {
    double worst = 0.0;
    for (double x : {0.05, 0.5, 1.0, 3.0, 12.0, 250.0}) {
      worst = std::max(worst, std::abs(trigamma(x + 1.0) - (trigamma(x) - 1.0 / (x * x))) /
                                  std::max(1.0, trigamma(x)));
    }
    const double at_one = std::abs(trigamma(1.0) - std::numbers::pi * std::numbers::pi / 6.0);
    s.check("trigamma", worst < 1e-12 && at_one < 1e-14,
            "recurrence max rel err " + fmt(worst) + ", |psi1(1) - pi^2/6| " + fmt(at_one));
  });
  s.guarded("log_gamma", [&] {
    double worst = 0.0;
    for (double x : {0.1, 0.5, 1.5, 4.0, 20.0, 170.0}) {
      worst = std::max(worst, std::abs(log_gamma(x + 1.0) - (log_gamma(x) + std::log(x))) /
                                  std::max(1.0, std::abs(log_gamma(x + 1.0))));
    }
    const double fact = std::abs(log_gamma(6.0) - std::log(120.0));
    const double half = std::abs(log_gamma(0.5) - 0.5 * std::log(std::numbers::pi));
    s.check("log_gamma", worst < 1e-13 && fact < 1e-13 && half < 1e-13,
            "recurrence max rel err " + fmt(worst) + ", |lnG(6) - ln 120| " + fmt(fact));
  });
  s.guarded("digamma", [&] {
    // psi is the derivative of ln Gamma.
    double worst = 0.0;
    for (double x : {0.7, 2.0, 9.5, 40.0}) {
      const double x0[] = {x};
      const auto g = finite_diff_grad([](std::span<const double> v) { return log_gamma(v[0]); },
                                      x0, 1e-5);
      worst = std::max(worst, std::abs(g[0] - digamma(x)) / std::max(1.0, std::abs(digamma(x))));
    }
    s.check("digamma", worst < 1e-8, "d lnGamma / dx vs psi max rel err " + fmt(worst));
  });
}

void bkm_suite(Suite& s) {
  s.guarded("bkm_multiply", [&] {
    Rng rng(s.seed("multiply"));
    double worst = 0.0;
    int instances = 0;
    for (int t = 0; t < 100; ++t) {
      const int m = 1 + static_cast<int>(rng.below(4));
      const int bd = 1 + static_cast<int>(rng.below(5));
      const int bl = 1 + static_cast<int>(rng.below(5));
      const BlockPartition part(m, m * bd, m * bl);
      const Matrix a = random_matrix(static_cast<Size>(m), static_cast<Size>(m), rng);
      const Matrix b = random_matrix(static_cast<Size>(m * bd), static_cast<Size>(m * bl), rng);
      Matrix got = bkm_multiply(a, b, part);
      if (s.faulty("bkm_multiply")) got(0, 0) += 1.0;
      // Naive oracle: every entry scaled by the weight of the block it falls in.
      for (int r = 0; r < m * bd; ++r) {
        for (int c = 0; c < m * bl; ++c) {
          const double want = a(static_cast<Size>(r / bd), static_cast<Size>(c / bl)) *
                              b(static_cast<Size>(r), static_cast<Size>(c));
          worst = std::max(worst, std::abs(got(static_cast<Size>(r), static_cast<Size>(c)) - want));
        }
      }
      ++instances;
    }
    s.check("bkm_multiply", worst == 0.0,
            std::to_string(instances) + " instances vs blockwise loop, max diff " + fmt(worst));
  });
  s.guarded("bkm_gradients", [&] {
    Rng rng(s.seed("gradients"));
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      const int m = 1 + static_cast<int>(rng.below(3));
      const int bd = 2 + static_cast<int>(rng.below(3));
      const int bl = 2 + static_cast<int>(rng.below(3));
      const int rank = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min(bd, bl))));
      const BlockPartition part(m, m * bd, m * bl);
      const Matrix a = random_matrix(static_cast<Size>(m), static_cast<Size>(m), rng);
      const LowRankPrompt p = LowRankPrompt::random(part, rank, rng);
      const Matrix up = random_matrix(static_cast<Size>(m * bd), static_cast<Size>(m * bl), rng);
      BkmGradients g = bkm_gradients(a, p, up);
      if (s.faulty("bkm_gradients")) g.grad_a(0, 0) += 1e-3;

      // Pack (a, factors) into one vector and differentiate <up, BKM(a, B)>.
      std::vector<double> x(a.data().begin(), a.data().end());
      for (const auto& f : p.factors()) {
        x.insert(x.end(), f.u.data().begin(), f.u.data().end());
        x.insert(x.end(), f.v.data().begin(), f.v.data().end());
      }
      auto f = [&](std::span<const double> v) {
        Matrix aa(a.rows(), a.cols());
        LowRankPrompt pp = p;
        Size k = 0;
        for (double& e : aa.data()) e = v[k++];
        for (auto& fp : pp.factors()) {
          for (double& e : fp.u.data()) e = v[k++];
          for (double& e : fp.v.data()) e = v[k++];
        }
        return frobenius_dot(up, bkm_multiply(aa, materialize(pp), part));
      };
      worst = std::max(worst, relative_error(flatten(g), finite_diff_grad(f, x)));
    }
    s.check("bkm_gradients", worst < 1e-5, "10 instances vs central differences, max rel err " +
                                               fmt(worst));
  });
}

void evidential_suite(Suite& s) {
  s.guarded("loss_eb", [&] {
    const LabelVector y0 = LabelVector::one_hot(0, 2);
    const double zero = loss_eb(evidence_from_logits(std::vector<double>{0.0, 0.0}), y0);
    const double nine = loss_eb(evidence_from_logits(std::vector<double>{9.0, 0.0}), y0);
    const double e1 = std::abs(zero - 1.0), e2 = std::abs(nine - 0.1);
    s.check("loss_eb", e1 < 1e-10 && e2 < 1e-10,
            "|L(e=0) - 1| " + fmt(e1) + ", |L(e=(9,0)) - 0.1| " + fmt(e2));
  });
  s.guarded("kl_to_uniform", [&] {
    const double e1 = std::abs(kl_to_uniform(std::vector<double>{2.0, 1.0}) -
                               (std::numbers::ln2 - 0.5));
    const double e2 = std::abs(kl_to_uniform(std::vector<double>{1.0, 1.0, 1.0}));
    s.check("kl_to_uniform", e1 < 1e-10 && e2 < 1e-12,
            "|KL((2,1)) - (ln2 - 1/2)| " + fmt(e1) + ", |KL(1)| " + fmt(e2));
  });
  s.guarded("evidential_gradients", [&] {
    Rng rng(s.seed("gradients"));
    double worst = 0.0;
    int used = 0;
    while (used < 50) {
      const Size k = 2 + static_cast<Size>(rng.below(4));
      std::vector<double> logits(k);
      for (double& v : logits) v = rng.normal(0.5, 2.0);
      // Keep probes away from the ReLU kink.
      if (std::any_of(logits.begin(), logits.end(), [](double v) { return std::abs(v) < 1e-3; })) {
        continue;
      }
      std::vector<double> y(k, 0.0);
      y[static_cast<Size>(rng.below(k))] = 1.0;
      if (rng.uniform() < 0.3) y[static_cast<Size>(rng.below(k))] = 1.0;
      const LabelVector lv(y);
      const double lambda = rng.uniform() < 0.5 ? kDefaultLambda : rng.uniform();
      auto g = evidential_gradients(logits, lv, lambda);
      if (s.faulty("evidential_gradients")) g[0] += 1e-3;
      const auto fd = finite_diff_grad(
          [&](std::span<const double> z) {
            return loss_combined(evidence_from_logits(z), lv, lambda);
          },
          logits);
      worst = std::max(worst, relative_error(g, fd));
      ++used;
    }
    s.check("evidential_gradients", worst < 1e-5,
            "50 instances vs central differences, max rel err " + fmt(worst));
  });
  s.guarded("cross_entropy_gradients", [&] {
    Rng rng(s.seed("ce"));
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
      const Size k = 2 + static_cast<Size>(rng.below(4));
      std::vector<double> logits(k);
      for (double& v : logits) v = rng.normal(0.0, 2.0);
      const LabelVector lv = LabelVector::one_hot(static_cast<Size>(rng.below(k)), k);
      const auto g = cross_entropy_gradients(logits, lv);
      const auto fd = finite_diff_grad(
          [&](std::span<const double> z) { return cross_entropy(z, lv); }, logits);
      worst = std::max(worst, relative_error(g, fd));
    }
    s.check("cross_entropy_gradients", worst < 1e-5,
            "20 instances vs central differences, max rel err " + fmt(worst));
  });
}

void metrics_suite(Suite& s) {
  s.guarded("auroc", [&] {
    Rng rng(s.seed("auroc"));
    double worst = 0.0;
    int done = 0;
    while (done < 1000) {
      const Size n = 2 + static_cast<Size>(rng.below(49));
      std::vector<double> scores(n);
      std::vector<int> golds(n);
      for (Size i = 0; i < n; ++i) {
        // Coarse scores so ties are common.
        scores[i] = static_cast<double>(rng.below(8)) / 8.0;
        golds[i] = static_cast<int>(rng.below(2));
      }
      const auto pos = std::count(golds.begin(), golds.end(), 1);
      if (pos == 0 || pos == static_cast<long>(n)) continue;
      double got = auroc(scores, golds);
      if (s.faulty("auroc")) got += 1e-3;
      double wins = 0.0, pairs = 0.0;
      for (Size i = 0; i < n; ++i) {
        for (Size j = 0; j < n; ++j) {
          if (golds[i] != 1 || golds[j] != 0) continue;
          pairs += 1.0;
          wins += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
        }
      }
      worst = std::max(worst, std::abs(got - wins / pairs));
      ++done;
    }
    s.check("auroc", worst < 1e-12, "1000 instances vs pair counting, max diff " + fmt(worst));
  });
  s.guarded("f1_macro", [&] {
    double got = f1_macro({{0}, {0}, {0}, {0}}, {{0}, {0}, {1}, {1}}, 2);
    if (s.faulty("f1_macro")) got += 1e-3;
    const double e1 = std::abs(got - 1.0 / 3.0);
    const double e2 = std::abs(f1_macro({{0}, {1}}, {{0}, {1}}, 2) - 1.0);
    const double e3 = std::abs(f1_macro({{1}, {0}}, {{0}, {1}}, 2));
    s.check("f1_macro", e1 < 1e-15 && e2 < 1e-15 && e3 < 1e-15,
            "fixtures (1/3, 1, 0) max diff " + fmt(std::max({e1, e2, e3})));
  });
}

void protocol_suite(Suite& s) {
  s.guarded("sample_pattern", [&] {
    const std::vector<std::vector<double>> shapes = {
        {1.0, 0.5}, {0.5, 1.0}, {0.75, 0.75}, {1.0, 0.3}, {0.3, 1.0}, {0.65, 0.65},
        {1.0, 0.4}, {0.4, 1.0}, {0.7, 0.7},   {1.0, 1.0}, {1.0, 0.1}, {0.6, 0.6}};
    Rng rng(s.seed("patterns"));
    bool ok = true;
    std::string bad;
    for (const auto& a : shapes) {
      for (Size n : {Size{1}, Size{7}, Size{100}, Size{400}, Size{1001}}) {
        const MissingProtocol p{a};
        auto pats = sample_pattern(p, n, rng);
        if (s.faulty("sample_pattern")) pats[0] = MissingPattern::all(2);
        const auto quotas = p.missing_quotas(n);
        Size text = 0, image = 0, both = 0;
        for (const auto& q : pats) {
          text += q.contains(0);
          image += q.contains(1);
          both += q.contains(0) && q.contains(1);
        }
        if (text != quotas[0] || image != quotas[1] || both != 0) {
          ok = false;
          bad = "protocol " + fmt(a[0]) + "/" + fmt(a[1]) + " n=" + std::to_string(n);
        }
      }
    }
    s.check("sample_pattern", ok,
            ok ? "12 protocol shapes x 5 sizes: exact quotas, no all-missing sample" : bad);
  });
}

void params_suite(Suite& s) {
  s.guarded("param_count", [&] {
    const auto map = param_count(2, 768, 16, 4, PromptMethod::MAP);
    const auto msp = param_count(2, 768, 16, 4, PromptMethod::MSP);
    auto epep = param_count(2, 768, 16, 4, PromptMethod::EPEP);
    if (s.faulty("param_count")) epep += 1;
    s.check("param_count", map == 36864 && msp == 24576 && epep == 3144,
            "m=2 d=768 l=16 r=4: " + std::to_string(map) + " / " + std::to_string(msp) + " / " +
                std::to_string(epep));
    int configs = 0;
    bool ordered = true;
    for (int m = 2; m <= 4; ++m) {
      for (int r = 1; r <= 8; ++r) {
        for (int d = 64; d <= 768; d += 64) {
          for (int l = 64; l <= 768; l += 64) {
            if (d % m || l % m || r > std::min(d, l) / m) continue;
            ++configs;
            ordered = ordered && param_report(m, d, l, r).ordered();
          }
        }
      }
    }
    s.check("param_count", ordered,
            "EPEP < MSP < MAP over " + std::to_string(configs) + " configurations");
  });
}

void model_suite(Suite& s) {
  s.guarded("trainable_gradients", [&] {
    EncoderConfig cfg;
    cfg.d_model = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.ffn_dim = 8;
    cfg.tokens_per_modality = 4;
    cfg.patch_dim = 4;
    cfg.text_vocab = 8;
    cfg.prompt_len = 4;
    cfg.prompt_inject_layers = 2;
    cfg.num_classes = 3;
    Rng rng(s.seed("model"));
    const MultimodalEncoder enc(cfg, rng);
    PromptModule pm = PromptModule::epep(2, 8, 4, 2, 1, CompleteSamplePolicy::ZeroPrompt, rng);

    Sample sample;
    sample.text_tokens = {1, 5, 2, 7};
    sample.image_patches = random_matrix(4, 4, rng);
    sample.labels = {1};
    sample.pattern = MissingPattern::of({kImageModality});
    sample = substitute_dummy(std::move(sample));
    const LabelVector y = LabelVector::from_indices(sample.labels, 3);

    auto loss_of = [&](const MultimodalEncoder& e, const PromptModule& p) {
      return loss_combined(evidence_from_logits(e.forward(sample, p.prompts(sample.pattern))), y);
    };
    ForwardTrace tr;
    const auto logits = enc.forward(sample, pm.prompts(sample.pattern), &tr);
    ModelGradients g = enc.zero_gradients(pm.num_banks());
    enc.backward(sample, tr, evidential_gradients(logits, y), {}, g);
    PromptModule gp = pm.zeros_like();
    pm.accumulate(sample.pattern, g.prompts, gp);

    // Analytic and numeric derivatives for 10 random prompt coordinates and
    // 5 head coordinates.
    std::vector<std::pair<std::string, Matrix*>> values, grads;
    HeadParams gh = g.head;
    pm.for_each_parameter([&](const std::string& n, Matrix& m) { values.emplace_back(n, &m); });
    gp.for_each_parameter([&](const std::string& n, Matrix& m) { grads.emplace_back(n, &m); });
    std::vector<double> analytic, numeric;
    const double h = 1e-5;
    for (int t = 0; t < 10; ++t) {
      const Size pi = static_cast<Size>(rng.below(values.size()));
      Matrix& param = *values[pi].second;
      const Size idx = static_cast<Size>(rng.below(param.size()));
      double a = grads[pi].second->data()[idx];
      if (s.faulty("trainable_gradients") && t == 0) a += 1e-2;
      analytic.push_back(a);
      const double orig = param.data()[idx];
      param.data()[idx] = orig + h;
      const double up = loss_of(enc, pm);
      param.data()[idx] = orig - h;
      const double down = loss_of(enc, pm);
      param.data()[idx] = orig;
      numeric.push_back((up - down) / (2.0 * h));
    }
    MultimodalEncoder probe = enc;
    std::vector<std::pair<Matrix*, Matrix*>> head_pairs;
    {
      std::vector<Matrix*> hv, hg;
      probe.head().for_each_parameter([&](const std::string&, Matrix& m) { hv.push_back(&m); });
      gh.for_each_parameter([&](const std::string&, Matrix& m) { hg.push_back(&m); });
      for (Size i = 0; i < hv.size(); ++i) head_pairs.emplace_back(hv[i], hg[i]);
    }
    for (int t = 0; t < 5; ++t) {
      auto [param, grad] = head_pairs[static_cast<Size>(rng.below(head_pairs.size()))];
      const Size idx = static_cast<Size>(rng.below(param->size()));
      analytic.push_back(grad->data()[idx]);
      const double orig = param->data()[idx];
      param->data()[idx] = orig + h;
      const double up = loss_of(probe, pm);
      param->data()[idx] = orig - h;
      const double down = loss_of(probe, pm);
      param->data()[idx] = orig;
      numeric.push_back((up - down) / (2.0 * h));
    }
    const double err = relative_error(analytic, numeric);
    s.check("trainable_gradients", err < 1e-4,
            "tiny model (d=8, l=4, 2 layers), 15 coordinates, rel err " + fmt(err));
  });
  s.guarded("forward", [&] {
    EncoderConfig cfg;
    cfg.d_model = 16;
    cfg.layers = 3;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    cfg.tokens_per_modality = 4;
    cfg.patch_dim = 4;
    cfg.text_vocab = 8;
    cfg.prompt_len = 4;
    cfg.prompt_inject_layers = 2;
    Rng rng(s.seed("forward"));
    const MultimodalEncoder enc(cfg, rng);
    Sample sample;
    sample.text_tokens = {1, 2, 3, 4};
    sample.image_patches = random_matrix(4, 4, rng);
    sample.labels = {0};
    const PromptModule skip =
        PromptModule::epep(2, 16, 4, 2, 1, CompleteSamplePolicy::SkipPrompt, rng);
    const auto plain = enc.forward(sample, {});
    const auto skipped = enc.forward(sample, skip.prompts(sample.pattern));
    ForwardTrace tr;
    enc.forward(sample, std::vector<Matrix>{Matrix(16, 4)}, &tr);
    const std::vector<int> want = {12, 12, 8};
    s.check("forward", plain == skipped && tr.layer_tokens == want,
            "SkipPrompt equals promptless forward; tokens per layer 12, 12, 8");
  });
}

const std::map<std::string, void (*)(Suite&)>& registry() {
  static const std::map<std::string, void (*)(Suite&)> suites = {
      {"numerics", numerics_suite}, {"bkm", bkm_suite},         {"evidential", evidential_suite},
      {"metrics", metrics_suite},   {"protocol", protocol_suite}, {"params", params_suite},
      {"model", model_suite},
  };
  return suites;
}

}  // namespace

bool SuiteResult::passed() const {
  return !checks.empty() &&
         std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names = {"numerics", "bkm",    "evidential", "metrics",
                                                 "protocol", "params", "model"};
  return names;
}

SuiteResult run_verify_suite(const std::string& name, const VerifyOptions& options) {
  const auto& reg = registry();
  auto it = reg.find(name);
  if (it == reg.end()) {
    std::string known;
    for (const auto& n : verify_suite_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown verify suite '" + name + "' (known: " + known + ")");
  }
  Suite suite(name, options);
  it->second(suite);
  return suite.take();
}

int run_verify(std::ostream& out, const std::vector<std::string>& suites,
               const VerifyOptions& options) {
  const std::vector<std::string>& names = suites.empty() ? verify_suite_names() : suites;
  bool all = true;
  for (const auto& name : names) {
    const SuiteResult r = run_verify_suite(name, options);
    for (const auto& c : r.checks) {
      out << "  " << (c.passed ? "ok  " : "FAIL") << " " << name << "/" << c.operation << ": "
          << c.detail << "\n";
    }
    out << (r.passed() ? "PASS" : "FAIL") << " " << name << "\n";
    all = all && r.passed();
  }
  return all ? 0 : 1;
}

}  // namespace epep
