#include "epep/bkm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "epep/error.hpp"

namespace epep {

namespace {

void check_a(const Matrix& a, const BlockPartition& partition, const char* op) {
  const auto m = static_cast<std::size_t>(partition.m());
  if (a.rows() != m || a.cols() != m) {
    throw ShapeError(std::string(op) + ": weight matrix must be " + std::to_string(m) + "x" +
                     std::to_string(m) + ", got " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()));
  }
}

void check_b(const Matrix& b, const BlockPartition& partition, const char* op) {
  if (b.rows() != static_cast<std::size_t>(partition.d()) ||
      b.cols() != static_cast<std::size_t>(partition.l())) {
    throw ShapeError(std::string(op) + ": prompt must be " + std::to_string(partition.d()) +
                     "x" + std::to_string(partition.l()) + ", got " + std::to_string(b.rows()) +
                     "x" + std::to_string(b.cols()));
  }
}

}  // namespace

BlockPartition::BlockPartition(int m, int d, int l) : m_(m), d_(d), l_(l) {
  if (m < 1 || d < 1 || l < 1) {
    throw ShapeError("BlockPartition: m, d, l must be positive (m=" + std::to_string(m) +
                     ", d=" + std::to_string(d) + ", l=" + std::to_string(l) + ")");
  }
  if (d % m != 0 || l % m != 0) {
    throw ShapeError("BlockPartition: m=" + std::to_string(m) + " must divide d=" +
                     std::to_string(d) + " and l=" + std::to_string(l));
  }
}

LowRankPrompt::LowRankPrompt(BlockPartition partition, int rank)
    : partition_(partition), rank_(rank) {
  const int max_rank = std::min(partition.block_rows(), partition.block_cols());
  if (rank < 1 || rank > max_rank) {
    throw ShapeError("LowRankPrompt: rank " + std::to_string(rank) + " outside [1, " +
                     std::to_string(max_rank) + "]");
  }
  const auto blocks = static_cast<std::size_t>(partition.m() * partition.m());
  factors_.reserve(blocks);
  for (std::size_t k = 0; k < blocks; ++k) {
    factors_.push_back({Matrix(static_cast<std::size_t>(partition.block_rows()),
                               static_cast<std::size_t>(rank)),
                        Matrix(static_cast<std::size_t>(partition.block_cols()),
                               static_cast<std::size_t>(rank))});
  }
}

LowRankPrompt LowRankPrompt::random(BlockPartition partition, int rank, Rng& rng) {
  LowRankPrompt p(partition, rank);
  const double stddev = std::pow(static_cast<double>(rank), -0.25);
  for (auto& f : p.factors_) {
    for (double& x : f.u.data()) x = rng.normal(0.0, stddev);
    for (double& x : f.v.data()) x = rng.normal(0.0, stddev);
  }
  return p;
}

std::int64_t LowRankPrompt::parameter_count() const {
  const std::int64_t m = partition_.m();
  return m * m * rank_ * (partition_.block_rows() + partition_.block_cols());
}

Matrix bkm_multiply(const Matrix& a, const Matrix& b, const BlockPartition& partition) {
  check_a(a, partition, "bkm_multiply");
  check_b(b, partition, "bkm_multiply");
  const auto m = static_cast<std::size_t>(partition.m());
  const auto br = static_cast<std::size_t>(partition.block_rows());
  const auto bc = static_cast<std::size_t>(partition.block_cols());
  Matrix out(b.rows(), b.cols());
  for (std::size_t r = 0; r < b.rows(); ++r) {
    const std::size_t bi = r / br;
    auto src = b.row(r);
    auto dst = out.row(r);
    for (std::size_t bj = 0; bj < m; ++bj) {
      const double scale = a(bi, bj);
      for (std::size_t c = bj * bc; c < (bj + 1) * bc; ++c) dst[c] = scale * src[c];
    }
  }
  return out;
}

Matrix materialize(const LowRankPrompt& prompt) {
  const auto& part = prompt.partition();
  const auto m = static_cast<std::size_t>(part.m());
  const auto br = static_cast<std::size_t>(part.block_rows());
  const auto bc = static_cast<std::size_t>(part.block_cols());
  const auto r = static_cast<std::size_t>(prompt.rank());
  Matrix out(static_cast<std::size_t>(part.d()), static_cast<std::size_t>(part.l()));
  for (std::size_t bi = 0; bi < m; ++bi) {
    for (std::size_t bj = 0; bj < m; ++bj) {
      const auto& f = prompt.block(static_cast<int>(bi), static_cast<int>(bj));
      for (std::size_t i = 0; i < br; ++i) {
        for (std::size_t j = 0; j < bc; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < r; ++k) acc += f.u(i, k) * f.v(j, k);
          out(bi * br + i, bj * bc + j) = acc;
        }
      }
    }
  }
  return out;
}

BkmGradients bkm_gradients(const Matrix& a, const LowRankPrompt& p, const Matrix& upstream) {
  const auto& part = p.partition();
  check_a(a, part, "bkm_gradients");
  check_b(upstream, part, "bkm_gradients");
  const auto m = static_cast<std::size_t>(part.m());
  const auto br = static_cast<std::size_t>(part.block_rows());
  const auto bc = static_cast<std::size_t>(part.block_cols());
  const auto r = static_cast<std::size_t>(p.rank());

  BkmGradients out{Matrix(m, m), {}};
  out.grad_factors.reserve(m * m);
  for (std::size_t bi = 0; bi < m; ++bi) {
    for (std::size_t bj = 0; bj < m; ++bj) {
      const auto& f = p.block(static_cast<int>(bi), static_cast<int>(bj));
      const double scale = a(bi, bj);
      FactorPair g{Matrix(br, r), Matrix(bc, r)};
      // grad_a = ⟨G_ij, u vᵀ⟩ = Σ_k (uᵀ G v)_kk; grad_u = a G v; grad_v = a Gᵀ u.
      double inner = 0.0;
      for (std::size_t i = 0; i < br; ++i) {
        auto grow = upstream.row(bi * br + i);
        for (std::size_t j = 0; j < bc; ++j) {
          const double gij = grow[bj * bc + j];
          if (gij == 0.0) continue;
          for (std::size_t k = 0; k < r; ++k) {
            inner += gij * f.u(i, k) * f.v(j, k);
            g.u(i, k) += scale * gij * f.v(j, k);
            g.v(j, k) += scale * gij * f.u(i, k);
          }
        }
      }
      out.grad_a(bi, bj) = inner;
      out.grad_factors.push_back(std::move(g));
    }
  }
  return out;
}

}  // namespace epep
