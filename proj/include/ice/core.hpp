#pragma once

// Vector math shared by every scoring path. Functions accept any Eigen
// expression and evaluate in the expression's scalar type; the engine
// instantiates them with double.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "ice/error.hpp"

namespace ice {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using VectorXd = Vector<double>;
using RowMatrixXd = RowMatrix<double>;
using RowMatrixXf = RowMatrix<float>;

/// Norms below this are treated as the zero vector.
inline constexpr double kZeroNorm = 1e-30;

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& x, const char* what) {
  if (!x.derived().allFinite()) {
    throw Error(ErrorCode::NonFinite, std::string(what) + " contains NaN or Inf");
  }
}

template <typename Derived>
void require_nonempty(const Eigen::DenseBase<Derived>& x, const char* what) {
  if (x.size() == 0) throw Error(ErrorCode::EmptyInput, std::string(what) + " is empty");
}

/// Index of the largest entry; ties resolve to the lowest index.
template <typename Derived>
Eigen::Index argmax(const Eigen::DenseBase<Derived>& x) {
  require_nonempty(x, "argmax input");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < x.size(); ++i) {
    if (x(i) > x(best)) best = i;
  }
  return best;
}

template <typename Derived>
Vector<typename Derived::Scalar> normalize(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  require_finite(v, "vector");
  const Scalar n = v.norm();
  if (!(n >= Scalar(kZeroNorm))) throw Error(ErrorCode::ZeroVector, "cannot normalize a zero vector");
  return v / n;
}

/// Cosine similarity, clamped to [-1, 1].
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine(const Eigen::MatrixBase<DerivedA>& u, const Eigen::MatrixBase<DerivedB>& w) {
  using Scalar = typename DerivedA::Scalar;
  if (u.size() != w.size()) {
    throw Error(ErrorCode::DimensionMismatch,
                "cosine of vectors with dimensions " + std::to_string(u.size()) + " and " + std::to_string(w.size()));
  }
  require_finite(u, "cosine lhs");
  require_finite(w, "cosine rhs");
  const Scalar nu = u.norm();
  const Scalar nw = w.norm();
  if (!(nu >= Scalar(kZeroNorm)) || !(nw >= Scalar(kZeroNorm))) {
    throw Error(ErrorCode::ZeroVector, "cosine with a zero vector");
  }
  const Scalar c = u.dot(w) / (nu * nw);
  return std::clamp(c, Scalar(-1), Scalar(1));
}

/// Cosine of every row of `rows` against `query`. `row_norms` are the
/// precomputed L2 norms of those rows.
template <typename DerivedM, typename DerivedN, typename DerivedQ>
Vector<typename DerivedM::Scalar> cosine_rows(const Eigen::MatrixBase<DerivedM>& rows,
                                              const Eigen::MatrixBase<DerivedN>& row_norms,
                                              const Eigen::MatrixBase<DerivedQ>& query) {
  using Scalar = typename DerivedM::Scalar;
  if (rows.cols() != query.size()) {
    throw Error(ErrorCode::DimensionMismatch, "query dimension " + std::to_string(query.size()) +
                                                  " does not match prototype dimension " +
                                                  std::to_string(rows.cols()));
  }
  require_finite(query, "query");
  const Scalar qn = query.norm();
  if (!(qn >= Scalar(kZeroNorm))) throw Error(ErrorCode::ZeroVector, "query embedding is zero");
  if ((row_norms.array() < Scalar(kZeroNorm)).any()) {
    throw Error(ErrorCode::ZeroVector, "a prototype embedding is zero");
  }
  Vector<Scalar> dots = rows * query;
  return (dots.array() / (row_norms.array() * qn)).cwiseMax(Scalar(-1)).cwiseMin(Scalar(1)).matrix();
}

/// A probability vector over classes. Only constructible through softmax or
/// a validating factory, so every instance satisfies the simplex invariant.
template <typename Scalar>
class ScoreDistribution {
 public:
  static ScoreDistribution from_probabilities(Vector<Scalar> probs, double sum_tolerance = 1e-9) {
    require_nonempty(probs, "distribution");
    require_finite(probs, "distribution");
    if ((probs.array() < Scalar(0)).any()) {
      throw Error(ErrorCode::InvariantViolation, "distribution has a negative entry");
    }
    if (std::abs(double(probs.sum()) - 1.0) > sum_tolerance) {
      throw Error(ErrorCode::InvariantViolation, "distribution does not sum to 1");
    }
    return ScoreDistribution(std::move(probs));
  }

  const Vector<Scalar>& probs() const noexcept { return probs_; }
  Eigen::Index size() const noexcept { return probs_.size(); }
  Scalar operator[](Eigen::Index i) const { return probs_(i); }

 private:
  explicit ScoreDistribution(Vector<Scalar> probs) : probs_(std::move(probs)) {}

  template <typename Derived>
  friend ScoreDistribution<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>&, double);

  Vector<Scalar> probs_;
};

/// Softmax(temperature * scores). temperature = 1 is the plain softmax.
template <typename Derived>
ScoreDistribution<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& scores, double temperature) {
  using Scalar = typename Derived::Scalar;
  require_nonempty(scores, "scores");
  require_finite(scores, "scores");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::InvalidConfig, "softmax temperature must be positive and finite");
  }
  Vector<Scalar> z = scores * Scalar(temperature);
  z.array() -= z.maxCoeff();
  z = z.array().exp().matrix();
  z /= z.sum();
  return ScoreDistribution<Scalar>(std::move(z));
}

/// Population standard deviation. Exactly zero when all entries are equal.
template <typename Derived>
typename Derived::Scalar stddev(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  require_nonempty(x, "stddev input");
  require_finite(x, "stddev input");
  if (x.minCoeff() == x.maxCoeff()) return Scalar(0);
  const Scalar mean = x.mean();
  return std::sqrt((x.array() - mean).square().mean());
}

/// Arithmetic mean of the rows of `rows`. Not renormalized.
template <typename Derived>
Vector<typename Derived::Scalar> centroid(const Eigen::MatrixBase<Derived>& rows) {
  if (rows.rows() == 0) throw Error(ErrorCode::EmptyInput, "centroid of an empty set");
  if (rows.cols() == 0) throw Error(ErrorCode::DimensionMismatch, "centroid of zero-dimensional vectors");
  require_finite(rows, "centroid input");
  return rows.colwise().mean().transpose();
}

}  // namespace ice
