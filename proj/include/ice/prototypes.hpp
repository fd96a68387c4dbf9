#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ice/core.hpp"

namespace ice {

/// How a class with several text embeddings is reduced to one score.
enum class Reduction : std::uint8_t {
  single = 0,      // exactly one embedding per class
  centroid = 1,    // cosine against the mean embedding
  score_mean = 2,  // mean of cosines against every embedding
};

constexpr std::string_view to_string(Reduction r) {
  switch (r) {
    case Reduction::single: return "single";
    case Reduction::centroid: return "centroid";
    case Reduction::score_mean: return "score_mean";
  }
  return "unknown";
}

inline std::optional<Reduction> parse_reduction(std::string_view s) {
  if (s == "single") return Reduction::single;
  if (s == "centroid") return Reduction::centroid;
  if (s == "score_mean") return Reduction::score_mean;
  return std::nullopt;
}

/// Per-class text prototypes. Immutable once built; centroid reduction is
/// applied at build time so each class then holds a single row.
template <typename Scalar>
class ClassPrototypeSet {
 public:
  Eigen::Index num_classes() const noexcept { return static_cast<Eigen::Index>(counts_.size()); }
  Eigen::Index dimension() const noexcept { return members_.cols(); }
  Reduction reduction() const noexcept { return reduction_; }
  const std::vector<std::string>& class_names() const noexcept { return class_names_; }
  const RowMatrix<Scalar>& members() const noexcept { return members_; }
  const std::vector<Eigen::Index>& member_counts() const noexcept { return counts_; }

  /// Cosine scores of `query` against each class, before the softmax.
  template <typename Derived>
  Vector<Scalar> class_similarities(const Eigen::MatrixBase<Derived>& query) const {
    const Vector<Scalar> q = query.template cast<Scalar>();
    const Vector<Scalar> cos = cosine_rows(members_, member_norms_, q);
    if (reduction_ != Reduction::score_mean) return cos;
    Vector<Scalar> out(num_classes());
    for (Eigen::Index c = 0; c < num_classes(); ++c) {
      out(c) = cos.segment(offsets_[c], counts_[c]).sum() / Scalar(counts_[c]);
    }
    return out;
  }

  template <typename S>
  friend ClassPrototypeSet<S> build_prototypes(const std::vector<RowMatrix<S>>&, Reduction, std::vector<std::string>);

 private:
  std::vector<std::string> class_names_;
  RowMatrix<Scalar> members_;
  Vector<Scalar> member_norms_;
  std::vector<Eigen::Index> counts_;
  std::vector<Eigen::Index> offsets_;
  Reduction reduction_ = Reduction::single;
};

/// Builds a prototype set from per-class embedding lists (one row per text).
/// Class names are optional and only used for reporting.
template <typename Scalar>
ClassPrototypeSet<Scalar> build_prototypes(const std::vector<RowMatrix<Scalar>>& per_class, Reduction reduction,
                                           std::vector<std::string> class_names = {}) {
  const auto m = static_cast<Eigen::Index>(per_class.size());
  if (m < 2) throw Error(ErrorCode::InvariantViolation, "need at least two classes, got " + std::to_string(m));
  if (!class_names.empty() && static_cast<Eigen::Index>(class_names.size()) != m) {
    throw Error(ErrorCode::InvariantViolation, "class name count does not match class count");
  }
  const Eigen::Index dim = per_class.front().cols();
  Eigen::Index total = 0;
  for (Eigen::Index c = 0; c < m; ++c) {
    const auto& rows = per_class[c];
    if (rows.rows() == 0) throw Error(ErrorCode::EmptyClass, "class " + std::to_string(c) + " has no embeddings");
    if (rows.cols() != dim || dim == 0) {
      throw Error(ErrorCode::DimensionMismatch, "class " + std::to_string(c) + " has embedding dimension " +
                                                    std::to_string(rows.cols()) + ", expected " + std::to_string(dim));
    }
    require_finite(rows, "prototype embedding");
    if (reduction == Reduction::single && rows.rows() != 1) {
      throw Error(ErrorCode::InvariantViolation,
                  "single reduction requires one embedding per class; class " + std::to_string(c) + " has " +
                      std::to_string(rows.rows()));
    }
    total += rows.rows();
  }

  ClassPrototypeSet<Scalar> set;
  set.reduction_ = reduction;
  set.class_names_ = std::move(class_names);
  if (reduction == Reduction::centroid) {
    set.members_.resize(m, dim);
    for (Eigen::Index c = 0; c < m; ++c) set.members_.row(c) = centroid(per_class[c]).transpose();
    set.counts_.assign(m, 1);
  } else {
    set.members_.resize(total, dim);
    Eigen::Index row = 0;
    for (const auto& rows : per_class) {
      set.members_.middleRows(row, rows.rows()) = rows;
      set.counts_.push_back(rows.rows());
      row += rows.rows();
    }
  }
  set.offsets_.resize(m);
  Eigen::Index offset = 0;
  for (Eigen::Index c = 0; c < m; ++c) {
    set.offsets_[c] = offset;
    offset += set.counts_[c];
  }
  set.member_norms_ = set.members_.rowwise().norm();
  return set;
}

/// Splits a packed member matrix (rows grouped by class) into per-class blocks.
template <typename Scalar>
std::vector<RowMatrix<Scalar>> split_members(const RowMatrix<Scalar>& packed, const std::vector<Eigen::Index>& counts) {
  std::vector<RowMatrix<Scalar>> out;
  out.reserve(counts.size());
  Eigen::Index row = 0;
  for (const Eigen::Index n : counts) {
    if (n < 0 || row + n > packed.rows()) {
      throw Error(ErrorCode::InvariantViolation, "member counts exceed the packed member matrix");
    }
    out.emplace_back(packed.middleRows(row, n));
    row += n;
  }
  if (row != packed.rows()) throw Error(ErrorCode::InvariantViolation, "member counts do not cover every member row");
  return out;
}

/// Class probabilities of an embedded query (image or caption).
template <typename Scalar, typename Derived>
ScoreDistribution<Scalar> score_image(const Eigen::MatrixBase<Derived>& query, const ClassPrototypeSet<Scalar>& protos,
                                      double temperature) {
  return softmax(protos.class_similarities(query), temperature);
}

}  // namespace ice
