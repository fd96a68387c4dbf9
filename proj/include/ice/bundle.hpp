#pragma once

// The ICEB embedding bundle: a fixed little-endian binary layout shared with
// the exporter.
//
//   offset  field
//   0       "ICEB"
//   4       u32 version (= 1)
//   8       u32 reserved (= 0)
//   12      u32 flags (bit 0: caption texts present)
//   16      u32 l, u32 N, u32 upsilon, u32 m
//   32      u32 member_count[m]
//           u8  reduction tag (0 single, 1 centroid, 2 score_mean)
//           f64 temperature hint
//           f32 image[N][l]
//           f32 caption[N][upsilon][l]
//           f32 member[sum member_count][l]
//           u32 label[N]
//           m x (u32 byte length, UTF-8 class name)
//           if flag bit 0: N*upsilon x (u32 byte length, UTF-8 caption)
//           u32 byte length, manifest JSON
//           u64 CRC-64/XZ of every preceding byte

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ice/core.hpp"
#include "ice/error.hpp"
#include "ice/prototypes.hpp"

namespace ice {

inline constexpr char kBundleMagic[4] = {'I', 'C', 'E', 'B'};
inline constexpr std::uint32_t kBundleVersion = 1;
inline constexpr std::uint32_t kFlagCaptionTexts = 1u;

/// CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones).
std::uint64_t crc64(std::span<const std::uint8_t> bytes);

struct DatasetManifest {
  std::string dataset;
  std::string split;
  std::string source_model;
  std::vector<std::string> caption_prompts;
  std::string created;  // free-form timestamp; empty keeps files reproducible
  std::string group;    // "cross_dataset", "domain_generalization" or empty
  nlohmann::json extra = nlohmann::json::object();
};

struct EmbeddingBundle {
  RowMatrixXf image_embeddings;    // N x l
  RowMatrixXf caption_embeddings;  // (N * upsilon) x l, grouped by image
  Eigen::Index captions_per_image = 1;
  RowMatrixXf prototype_members;  // (sum member_counts) x l, grouped by class
  std::vector<std::uint32_t> member_counts;
  Reduction reduction = Reduction::single;
  double temperature_hint = 1.0;
  std::vector<std::uint32_t> labels;
  std::vector<std::string> class_names;
  std::vector<std::string> caption_texts;  // empty, or N * upsilon entries
  DatasetManifest manifest;

  Eigen::Index num_images() const noexcept { return image_embeddings.rows(); }
  Eigen::Index dimension() const noexcept { return image_embeddings.cols(); }
  Eigen::Index num_classes() const noexcept { return static_cast<Eigen::Index>(member_counts.size()); }

  /// The caption rows of image i, optionally only the first `prefix`.
  auto captions_of(Eigen::Index i, Eigen::Index prefix) const {
    return caption_embeddings.middleRows(i * captions_per_image, prefix);
  }
  auto captions_of(Eigen::Index i) const { return captions_of(i, captions_per_image); }
};

/// One finding from bundle validation.
struct BundleIssue {
  ErrorCode code;
  std::string message;
};

/// Invariant findings on an in-memory bundle (finiteness, label range,
/// shape agreement). Empty when the bundle is valid.
std::vector<BundleIssue> check_invariants(const EmbeddingBundle& bundle);

/// Serializes to the ICEB layout; throws InvariantViolation on an invalid bundle.
std::vector<std::uint8_t> encode_bundle(const EmbeddingBundle& bundle);

/// Parses and fully validates ICEB bytes; throws the first issue found.
EmbeddingBundle decode_bundle(std::span<const std::uint8_t> bytes);

/// Every issue found in ICEB bytes, for diagnostics. Empty when valid.
std::vector<BundleIssue> validate_bundle_bytes(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

/// Writes through a temporary file and a rename so a failed write leaves
/// nothing at `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

void write_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& path);
EmbeddingBundle read_bundle(const std::filesystem::path& path);

/// The bundle's prototype set, optionally under a different reduction.
ClassPrototypeSet<double> bundle_prototypes(const EmbeddingBundle& bundle,
                                            std::optional<Reduction> reduction = std::nullopt);

/// Parameters of the synthetic bundle generator.
struct SynthSpec {
  int num_images = 1000;
  int num_classes = 10;
  int dimension = 32;
  int captions_per_image = 3;
  double caption_signal = 0.8;  // 1: captions point at the true class, 0: pure distractor
  double image_noise = 0.5;
  double caption_noise = 0.5;
  int members_per_class = 1;
  double member_noise = 0.0;
  Reduction reduction = Reduction::single;
  double temperature_hint = 1.0;
  std::uint64_t seed = 0;
  bool caption_texts = false;
  std::string dataset = "synthetic";
  std::string group;
};

/// Throws InvalidSpec on an out-of-range parameter.
void validate(const SynthSpec& spec);

/// Deterministic in `spec`: class prototypes uniform on the unit sphere,
/// images are noisy copies of their class prototype, captions mix the class
/// prototype with a random distractor direction by `caption_signal`.
EmbeddingBundle synth_bundle(const SynthSpec& spec);

}  // namespace ice
