#include "epep/evidential.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "epep/error.hpp"
#include "epep/numerics.hpp"

namespace epep {

namespace {

void check_classes(std::size_t k, std::size_t labels, const char* op) {
  if (k != labels) {
    throw ShapeError(std::string(op) + ": " + std::to_string(k) + " classes vs label length " +
                     std::to_string(labels));
  }
}

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
}

double label_mass(const LabelVector& y) {
  double total = 0.0;
  for (double v : y.values()) total += v;
  return total;
}

}  // namespace

LabelVector::LabelVector(std::vector<double> y) : y_(std::move(y)) {
  bool any = false;
  for (double v : y_) {
    if (v != 0.0 && v != 1.0) throw ConfigError("LabelVector: entries must be 0 or 1");
    any = any || v == 1.0;
  }
  if (!any) throw ConfigError("LabelVector: at least one entry must be 1");
}

LabelVector LabelVector::one_hot(std::size_t k, std::size_t num_classes) {
  if (k >= num_classes) throw ConfigError("LabelVector::one_hot: class out of range");
  std::vector<double> y(num_classes, 0.0);
  y[k] = 1.0;
  return LabelVector(std::move(y));
}

LabelVector LabelVector::from_indices(std::span<const int> classes, std::size_t num_classes) {
  std::vector<double> y(num_classes, 0.0);
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw ConfigError("LabelVector: class " + std::to_string(c) + " out of range for K=" +
                        std::to_string(num_classes));
    }
    y[static_cast<std::size_t>(c)] = 1.0;
  }
  return LabelVector(std::move(y));
}

DirichletOutput evidence_from_logits(std::span<const double> logits) {
  const std::size_t k = logits.size();
  if (k < 2) throw ConfigError("evidence_from_logits: need at least 2 classes");
  DirichletOutput d;
  d.evidence.resize(k);
  d.alpha.resize(k);
  d.probs.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    if (!std::isfinite(logits[j])) throw DomainError("evidence_from_logits: non-finite logit");
    d.evidence[j] = logits[j] > 0.0 ? logits[j] : 0.0;
    d.alpha[j] = d.evidence[j] + 1.0;
    d.strength += d.alpha[j];
  }
  for (std::size_t j = 0; j < k; ++j) d.probs[j] = d.alpha[j] / d.strength;
  d.uncertainty = static_cast<double>(k) / d.strength;
  return d;
}

double loss_eb(const DirichletOutput& d, const LabelVector& y) {
  check_classes(d.num_classes(), y.size(), "loss_eb");
  const double psi_s = digamma(d.strength);
  double loss = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (y[j] != 0.0) loss += y[j] * (psi_s - digamma(d.alpha[j]));
  }
  return loss;
}

std::vector<double> alpha_tilde(const DirichletOutput& d, const LabelVector& y) {
  check_classes(d.num_classes(), y.size(), "alpha_tilde");
  std::vector<double> out(y.size());
  for (std::size_t j = 0; j < y.size(); ++j) out[j] = y[j] + (1.0 - y[j]) * d.alpha[j];
  return out;
}

double kl_to_uniform(std::span<const double> alpha_t) {
  const auto k = static_cast<double>(alpha_t.size());
  double sum = 0.0;
  for (double a : alpha_t) {
    if (!(a > 0.0)) throw DomainError("kl_to_uniform: entries must be positive");
    sum += a;
  }
  const double psi_sum = digamma(sum);
  double kl = log_gamma(sum) - log_gamma(k);
  for (double a : alpha_t) {
    kl -= log_gamma(a);
    kl += (a - 1.0) * (digamma(a) - psi_sum);
  }
  // Rounding can leave a tiny negative residue at the minimum.
  return std::max(kl, 0.0);
}

double loss_combined(const DirichletOutput& d, const LabelVector& y, double lambda) {
  check_lambda(lambda);
  const double eb = loss_eb(d, y);
  if (lambda == 0.0) return eb;
  return (1.0 - lambda) * eb + lambda * kl_to_uniform(alpha_tilde(d, y));
}

std::vector<double> evidential_gradients(std::span<const double> logits, const LabelVector& y,
                                         double lambda) {
  check_lambda(lambda);
  const DirichletOutput d = evidence_from_logits(logits);
  check_classes(d.num_classes(), y.size(), "evidential_gradients");
  const std::size_t k = y.size();

  // dL_eb/dα_j = (Σ y) ψ'(S) − y_j ψ'(α_j)
  const double mass = label_mass(y);
  const double tri_s = trigamma(d.strength);

  // dKL/dα̃_j = (α̃_j − 1) ψ'(α̃_j) − (S̃ − K) ψ'(S̃), and dα̃_j/dα_j = 1 − y_j.
  const std::vector<double> at = alpha_tilde(d, y);
  double st = 0.0;
  for (double a : at) st += a;
  const double tri_st = trigamma(st);

  std::vector<double> grad(k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    if (!(logits[j] > 0.0)) continue;
    const double d_eb = mass * tri_s - y[j] * trigamma(d.alpha[j]);
    const double d_kl =
        (1.0 - y[j]) * ((at[j] - 1.0) * trigamma(at[j]) - (st - static_cast<double>(k)) * tri_st);
    grad[j] = (1.0 - lambda) * d_eb + lambda * d_kl;
  }
  return grad;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  const double top = *std::max_element(p.begin(), p.end());
  double total = 0.0;
  for (double& v : p) {
    v = std::exp(v - top);
    total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

double cross_entropy(std::span<const double> logits, const LabelVector& y) {
  check_classes(logits.size(), y.size(), "cross_entropy");
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - top);
  const double log_z = top + std::log(total);
  double loss = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) loss -= y[j] * (logits[j] - log_z);
  return loss;
}

std::vector<double> cross_entropy_gradients(std::span<const double> logits, const LabelVector& y) {
  check_classes(logits.size(), y.size(), "cross_entropy_gradients");
  std::vector<double> g = softmax(logits);
  const double mass = label_mass(y);
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = mass * g[j] - y[j];
  return g;
}

double normalized_entropy(std::span<const double> probs) {
  if (probs.size() < 2) throw ConfigError("normalized_entropy: need at least 2 classes");
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h / std::log(static_cast<double>(probs.size()));
}

}  // namespace epep
