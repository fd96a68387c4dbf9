#include <cmath>
#include <random>

#include "ice/bundle.hpp"

namespace ice {

void validate(const SynthSpec& s) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error(ErrorCode::InvalidSpec, field + " " + why);
  };
  if (s.num_images < 1) fail("N", "must be >= 1");
  if (s.num_classes < 2) fail("m", "must be >= 2, got " + std::to_string(s.num_classes));
  if (s.dimension < 1) fail("l", "must be >= 1");
  if (s.captions_per_image < 1) fail("upsilon", "must be >= 1");
  if (s.members_per_class < 1) fail("members_per_class", "must be >= 1");
  if (s.reduction == Reduction::single && s.members_per_class != 1) {
    fail("members_per_class", "must be 1 under single reduction");
  }
  if (!(s.caption_signal >= 0.0 && s.caption_signal <= 1.0)) fail("caption_signal", "must lie in [0, 1]");
  if (!(s.image_noise >= 0.0) || !std::isfinite(s.image_noise)) fail("image_noise", "must be finite and >= 0");
  if (!(s.caption_noise >= 0.0) || !std::isfinite(s.caption_noise)) fail("caption_noise", "must be finite and >= 0");
  if (!(s.member_noise >= 0.0) || !std::isfinite(s.member_noise)) fail("member_noise", "must be finite and >= 0");
  if (!(s.temperature_hint > 0.0) || !std::isfinite(s.temperature_hint)) fail("tau", "must be finite and > 0");
}

namespace {

class Sampler {
 public:
  Sampler(std::uint64_t seed, int dim) : rng_(seed), dim_(dim) {}

  // Isotropic Gaussian scaled so its expected squared norm is 1.
  VectorXd gaussian() {
    VectorXd v(dim_);
    const double scale = 1.0 / std::sqrt(double(dim_));
    for (int i = 0; i < dim_; ++i) v(i) = normal_(rng_) * scale;
    return v;
  }

  VectorXd unit() {
    for (;;) {
      const VectorXd v = gaussian();
      if (v.norm() >= kZeroNorm) return v.normalized();
    }
  }

  std::uint32_t label(int m) { return std::uniform_int_distribution<std::uint32_t>(0, m - 1)(rng_); }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
  int dim_;
};

// Normalizes in double and stores as float; a degenerate draw falls back to `fallback`.
Eigen::RowVectorXf to_unit_row(const VectorXd& v, const VectorXd& fallback) {
  const double n = v.norm();
  return (n >= kZeroNorm ? VectorXd(v / n) : fallback).transpose().cast<float>();
}

}  // namespace

EmbeddingBundle synth_bundle(const SynthSpec& s) {
  validate(s);
  Sampler rng(s.seed, s.dimension);
  const int n = s.num_images;
  const int m = s.num_classes;
  const int l = s.dimension;
  const int ups = s.captions_per_image;

  std::vector<VectorXd> protos;
  protos.reserve(m);
  for (int c = 0; c < m; ++c) protos.push_back(rng.unit());

  EmbeddingBundle b;
  b.reduction = s.reduction;
  b.temperature_hint = s.temperature_hint;
  b.captions_per_image = ups;
  b.member_counts.assign(m, static_cast<std::uint32_t>(s.members_per_class));
  b.prototype_members.resize(Eigen::Index(m) * s.members_per_class, l);
  for (int c = 0; c < m; ++c) {
    b.class_names.push_back("class_" + std::to_string(c));
    for (int j = 0; j < s.members_per_class; ++j) {
      const VectorXd member = s.member_noise > 0 ? VectorXd(protos[c] + s.member_noise * rng.gaussian()) : protos[c];
      b.prototype_members.row(Eigen::Index(c) * s.members_per_class + j) = to_unit_row(member, protos[c]);
    }
  }

  b.labels.resize(n);
  b.image_embeddings.resize(n, l);
  b.caption_embeddings.resize(Eigen::Index(n) * ups, l);
  for (int i = 0; i < n; ++i) {
    const std::uint32_t label = rng.label(m);
    b.labels[i] = label;
    const VectorXd& p = protos[label];
    b.image_embeddings.row(i) = to_unit_row(p + s.image_noise * rng.gaussian(), p);
    for (int j = 0; j < ups; ++j) {
      const VectorXd distractor = rng.unit();
      const VectorXd caption =
          s.caption_signal * p + (1.0 - s.caption_signal) * distractor + s.caption_noise * rng.gaussian();
      b.caption_embeddings.row(Eigen::Index(i) * ups + j) = to_unit_row(caption, p);
      if (s.caption_texts) {
        b.caption_texts.push_back("synthetic caption " + std::to_string(j) + " of image " + std::to_string(i));
      }
    }
  }

  b.manifest.dataset = s.dataset;
  b.manifest.split = "test";
  b.manifest.source_model = "synthetic";
  for (int j = 0; j < ups; ++j) b.manifest.caption_prompts.push_back("synthetic prompt " + std::to_string(j));
  b.manifest.group = s.group;
  b.manifest.extra = {
      {"generator",
       {{"N", n},
        {"m", m},
        {"l", l},
        {"upsilon", ups},
        {"caption_signal", s.caption_signal},
        {"image_noise", s.image_noise},
        {"caption_noise", s.caption_noise},
        {"members_per_class", s.members_per_class},
        {"member_noise", s.member_noise},
        {"seed", s.seed}}},
  };
  return b;
}

}  // namespace ice
