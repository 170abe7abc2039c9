#pragma once

#include <cstdint>
#include <vector>

#include "epep/numerics.hpp"

namespace epep {

/// Splits a d×l matrix into an m×m grid of (d/m)×(l/m) blocks.
/// Construction throws ShapeError unless m divides both d and l.
class BlockPartition {
 public:
  BlockPartition(int m, int d, int l);

  int m() const { return m_; }
  int d() const { return d_; }
  int l() const { return l_; }
  int block_rows() const { return d_ / m_; }
  int block_cols() const { return l_ / m_; }

  bool operator==(const BlockPartition&) const = default;

 private:
  int m_;
  int d_;
  int l_;
};

// One block's rank-r factorization: block = u · vᵀ.
struct FactorPair {
  Matrix u;  // (d/m) × r
  Matrix v;  // (l/m) × r
};

/// Comprehensive prompt stored as an m×m grid of low-rank block factors.
class LowRankPrompt {
 public:
  // Zero-initialized factors.
  LowRankPrompt(BlockPartition partition, int rank);

  // Entries drawn from N(0, variance 1/sqrt(r)) so materialized entries have unit variance.
  static LowRankPrompt random(BlockPartition partition, int rank, Rng& rng);

  const BlockPartition& partition() const { return partition_; }
  int rank() const { return rank_; }

  FactorPair& block(int i, int j) { return factors_[static_cast<std::size_t>(i * partition_.m() + j)]; }
  const FactorPair& block(int i, int j) const {
    return factors_[static_cast<std::size_t>(i * partition_.m() + j)];
  }
  std::vector<FactorPair>& factors() { return factors_; }
  const std::vector<FactorPair>& factors() const { return factors_; }

  // m² · r · (d/m + l/m) = (d + l) · r · m
  std::int64_t parameter_count() const;

 private:
  BlockPartition partition_;
  int rank_;
  std::vector<FactorPair> factors_;
};

// Block (i, j) of the result is a(i, j) times block (i, j) of b.
Matrix bkm_multiply(const Matrix& a, const Matrix& b, const BlockPartition& partition);

Matrix materialize(const LowRankPrompt& prompt);

struct BkmGradients {
  Matrix grad_a;                          // m × m
  std::vector<FactorPair> grad_factors;   // same layout as LowRankPrompt::factors()
};

/// Gradients of ⟨upstream, bkm_multiply(a, materialize(p))⟩ with respect to a
/// and every factor, computed blockwise without materializing the prompt.
BkmGradients bkm_gradients(const Matrix& a, const LowRankPrompt& p, const Matrix& upstream);

}  // namespace epep
