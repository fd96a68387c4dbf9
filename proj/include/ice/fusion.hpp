#pragma once

// Image-caption fusion: the prediction is restricted to the K classes the
// image distribution ranks highest, and within that set the caption
// distribution is added with a per-sample weight lambda.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ice/core.hpp"
#include "ice/prototypes.hpp"

namespace ice {

enum class LambdaMode { adaptive, fixed, image_only };

constexpr std::string_view to_string(LambdaMode mode) {
  switch (mode) {
    case LambdaMode::adaptive: return "adaptive";
    case LambdaMode::fixed: return "fixed";
    case LambdaMode::image_only: return "image_only";
  }
  return "unknown";
}

inline std::optional<LambdaMode> parse_lambda_mode(std::string_view s) {
  if (s == "adaptive") return LambdaMode::adaptive;
  if (s == "fixed") return LambdaMode::fixed;
  if (s == "image_only") return LambdaMode::image_only;
  return std::nullopt;
}

struct IceConfig {
  int K = 5;
  double xi = 0.08;
  double epsilon = 1e-12;
  LambdaMode lambda_mode = LambdaMode::adaptive;
  double lambda = 0.0;  // used when lambda_mode == fixed
  double tau = 1.0;
  std::optional<int> upsilon;  // caption prefix length; unset means all stored captions
};

/// Throws InvalidConfig naming the first offending field.
inline void validate(const IceConfig& cfg) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error(ErrorCode::InvalidConfig, field + " " + why);
  };
  if (cfg.K < 1) fail("K", "must be >= 1, got " + std::to_string(cfg.K));
  if (!std::isfinite(cfg.xi) || cfg.xi < 0) fail("xi", "must be finite and >= 0");
  if (!std::isfinite(cfg.epsilon) || !(cfg.epsilon > 0)) fail("epsilon", "must be finite and > 0");
  if (!std::isfinite(cfg.lambda) || cfg.lambda < 0) fail("lambda", "must be finite and >= 0");
  if (!std::isfinite(cfg.tau) || !(cfg.tau > 0)) fail("tau", "must be finite and > 0");
  if (cfg.upsilon && *cfg.upsilon < 1) fail("upsilon", "must be >= 1");
}

struct IcePrediction {
  Eigen::Index predicted_class = 0;
  std::vector<Eigen::Index> top_k_indices;  // descending image probability
  double lambda_used = 0.0;
  Eigen::Index image_argmax = 0;
  std::vector<double> fused_scores_on_top_k;  // aligned with top_k_indices
  bool k_clamped = false;                     // requested K exceeded the class count
};

/// Indices of the min(K, m) largest entries in descending order, ties to the
/// lowest index.
template <typename Derived>
std::vector<Eigen::Index> top_k_indices(const Eigen::MatrixBase<Derived>& probs, int K) {
  if (K < 1) throw Error(ErrorCode::InvalidConfig, "K must be >= 1");
  const Eigen::Index m = probs.size();
  const Eigen::Index k = std::min<Eigen::Index>(K, m);
  std::vector<Eigen::Index> idx(m);
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    return probs(a) > probs(b) || (probs(a) == probs(b) && a < b);
  });
  idx.resize(k);
  return idx;
}

template <typename Scalar>
std::vector<Eigen::Index> top_k_indices(const ScoreDistribution<Scalar>& dist, int K) {
  return top_k_indices(dist.probs(), K);
}

/// lambda = xi * sd(caption) / max(||[sd(image), sd(caption)]||, eps), in [0, xi].
template <typename DerivedI, typename DerivedC>
double adaptive_lambda(const Eigen::MatrixBase<DerivedI>& image_top_k, const Eigen::MatrixBase<DerivedC>& caption_top_k,
                       double xi, double epsilon) {
  if (image_top_k.size() != caption_top_k.size()) {
    throw Error(ErrorCode::DimensionMismatch, "Top-K probability vectors differ in length");
  }
  const double sd_image = double(stddev(image_top_k));
  const double sd_caption = double(stddev(caption_top_k));
  const double denom = std::max(std::hypot(sd_image, sd_caption), epsilon);
  return xi * std::min(1.0, sd_caption / denom);
}

/// Caption-conditioned class probabilities from the centroid of the caption
/// embeddings (one caption per row).
template <typename Scalar, typename Derived>
ScoreDistribution<Scalar> caption_score(const Eigen::MatrixBase<Derived>& captions,
                                        const ClassPrototypeSet<Scalar>& protos, double temperature) {
  const Vector<Scalar> c = centroid(captions.template cast<Scalar>());
  return score_image(c, protos, temperature);
}

template <typename Scalar>
IcePrediction ice_predict(const ScoreDistribution<Scalar>& image, const ScoreDistribution<Scalar>& caption,
                          const IceConfig& cfg) {
  if (image.size() != caption.size()) {
    throw Error(ErrorCode::DimensionMismatch, "image and caption distributions cover " + std::to_string(image.size()) +
                                                  " and " + std::to_string(caption.size()) + " classes");
  }
  validate(cfg);
  IcePrediction out;
  out.top_k_indices = top_k_indices(image, cfg.K);
  out.k_clamped = cfg.K > image.size();
  out.image_argmax = out.top_k_indices.front();

  const auto k = static_cast<Eigen::Index>(out.top_k_indices.size());
  Vector<Scalar> image_top(k), caption_top(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    image_top(j) = image[out.top_k_indices[j]];
    caption_top(j) = caption[out.top_k_indices[j]];
  }

  switch (cfg.lambda_mode) {
    case LambdaMode::adaptive: out.lambda_used = adaptive_lambda(image_top, caption_top, cfg.xi, cfg.epsilon); break;
    case LambdaMode::fixed: out.lambda_used = cfg.lambda; break;
    case LambdaMode::image_only: out.lambda_used = 0.0; break;
  }

  // Candidates arrive in descending image probability (lowest index on ties),
  // so a strict comparison settles fused ties toward the image ranking.
  out.fused_scores_on_top_k.resize(k);
  Eigen::Index best = 0;
  for (Eigen::Index j = 0; j < k; ++j) {
    out.fused_scores_on_top_k[j] = double(image_top(j)) + out.lambda_used * double(caption_top(j));
    if (out.fused_scores_on_top_k[j] > out.fused_scores_on_top_k[best]) best = j;
  }
  out.predicted_class = out.top_k_indices[best];
  return out;
}

}  // namespace ice
