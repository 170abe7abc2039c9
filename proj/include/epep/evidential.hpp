#pragma once

#include <span>
#include <vector>

namespace epep {

inline constexpr double kDefaultLambda = 0.004;

/// Dirichlet opinion derived from one sample's logits.
struct DirichletOutput {
  std::vector<double> evidence;  // e = ReLU(logits)
  std::vector<double> alpha;     // e + 1
  double strength = 0.0;         // S = Σ alpha
  std::vector<double> probs;     // alpha / S
  double uncertainty = 0.0;      // K / S

  std::size_t num_classes() const { return alpha.size(); }
};

/// Multi-hot (or one-hot) target over K classes.
class LabelVector {
 public:
  // Throws ConfigError unless every entry is 0 or 1 and at least one is 1.
  explicit LabelVector(std::vector<double> y);
  static LabelVector one_hot(std::size_t k, std::size_t num_classes);
  static LabelVector from_indices(std::span<const int> classes, std::size_t num_classes);

  std::size_t size() const { return y_.size(); }
  double operator[](std::size_t k) const { return y_[k]; }
  std::span<const double> values() const { return y_; }

 private:
  std::vector<double> y_;
};

DirichletOutput evidence_from_logits(std::span<const double> logits);

// Σ_j y_j (ψ(S) − ψ(α_j))
double loss_eb(const DirichletOutput& d, const LabelVector& y);

// y + (1 − y) ⊙ α
std::vector<double> alpha_tilde(const DirichletOutput& d, const LabelVector& y);

// KL[Dir(α̃) ‖ Dir(1)] in closed form.
double kl_to_uniform(std::span<const double> alpha_t);

// (1 − λ) loss_eb + λ KL(α̃ ‖ 1)
double loss_combined(const DirichletOutput& d, const LabelVector& y, double lambda = kDefaultLambda);

/// d loss_combined / d logits. ReLU subgradient at exactly 0 is 0.
std::vector<double> evidential_gradients(std::span<const double> logits, const LabelVector& y,
                                         double lambda = kDefaultLambda);

// Softmax cross-entropy surrogate used by the loss ablation.
std::vector<double> softmax(std::span<const double> logits);
double cross_entropy(std::span<const double> logits, const LabelVector& y);
std::vector<double> cross_entropy_gradients(std::span<const double> logits, const LabelVector& y);
// Entropy of p divided by log K, in [0, 1].
double normalized_entropy(std::span<const double> probs);

}  // namespace epep
