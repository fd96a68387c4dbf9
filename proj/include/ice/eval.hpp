#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "ice/bundle.hpp"
#include "ice/fusion.hpp"

namespace ice {

/// A scoring rule evaluated by the harness: which distribution predicts, and
/// optionally a prototype reduction overriding the bundle's own.
struct Method {
  enum class Kind { image_only, caption_only, ice };
  Kind kind = Kind::ice;
  std::optional<Reduction> reduction;

  /// "image_only", "caption_only", "ice", each optionally suffixed with
  /// ":single", ":centroid" or ":score_mean".
  static Method parse(std::string_view text);
  std::string name() const;
};

std::vector<Method> default_methods();

struct SampleRecord {
  std::size_t sample = 0;
  Eigen::Index label = 0;
  Eigen::Index image_argmax = 0;
  Eigen::Index caption_argmax = -1;  // -1 when the caption centroid was degenerate
  Eigen::Index ice_prediction = 0;
  double lambda = 0.0;
  Eigen::Index label_rank = 0;  // position of the label in the image ranking
  bool fallback = false;
  std::vector<Eigen::Index> top_k;
  std::vector<double> fused_scores;
};

struct QuadrantCounts {
  std::size_t fixed = 0;       // image wrong, ICE right
  std::size_t broken = 0;      // image right, ICE wrong
  std::size_t kept_right = 0;
  std::size_t kept_wrong = 0;

  std::size_t total() const noexcept { return fixed + broken + kept_right + kept_wrong; }
};

struct MethodResult {
  Method method;
  std::string name;
  std::size_t correct = 0;
  double top1 = 0.0;  // percent
};

struct TopKAccuracy {
  int K = 1;
  std::size_t correct = 0;
  double accuracy = 0.0;  // percent
};

struct EvalReport {
  std::string bundle_name;
  std::string group;
  IceConfig config;  // fully resolved, upsilon included
  Reduction reduction = Reduction::single;
  std::size_t num_samples = 0;
  Eigen::Index num_classes = 0;
  std::vector<MethodResult> methods;
  std::vector<TopKAccuracy> top_k;
  std::vector<SampleRecord> records;  // ICE on the bundle's own reduction
  QuadrantCounts quadrants;
  std::size_t fallbacks = 0;
  std::vector<std::string> warnings;

  const MethodResult* find(std::string_view name) const;
};

struct EvalOptions {
  std::vector<Method> methods = default_methods();
  std::vector<int> report_ks = {1, 5};
  unsigned workers = 0;  // 0: hardware concurrency
};

/// Image and caption distributions of every sample (one row per sample),
/// with the samples whose caption centroid cancelled flagged.
struct ScoredSamples {
  RowMatrixXd image;
  RowMatrixXd caption;
  std::vector<char> fallback;
};

ScoredSamples score_samples(const EmbeddingBundle& bundle, const ClassPrototypeSet<double>& protos, double tau,
                            Eigen::Index upsilon, unsigned workers);

/// Captions used per image under `cfg`; throws InvalidConfig when the
/// requested prefix exceeds the stored count.
Eigen::Index resolve_upsilon(const EmbeddingBundle& bundle, const IceConfig& cfg);

EvalReport evaluate(const EmbeddingBundle& bundle, const IceConfig& cfg, const EvalOptions& options = {});

/// Number of records whose label is among the K highest image probabilities.
std::size_t top_k_hits(const std::vector<SampleRecord>& records, int K);

/// The same as a percentage of all records.
double top_k_accuracy(const std::vector<SampleRecord>& records, int K);

QuadrantCounts quadrant_counts(const std::vector<SampleRecord>& records);

struct Exemplar {
  std::size_t sample = 0;
  Eigen::Index image_argmax = 0;
  Eigen::Index ice_prediction = 0;
  Eigen::Index label = 0;
  double lambda = 0.0;
  std::vector<std::string> captions;
};

struct QuadrantReport {
  QuadrantCounts counts;
  std::vector<Exemplar> fixed;
  std::vector<Exemplar> broken;
  std::vector<Exemplar> kept_right;
  std::vector<Exemplar> kept_wrong;
};

/// Counts plus up to `max_exemplars` samples per quadrant, in sample order.
/// `caption_texts` holds `captions_per_image` entries per sample, or is empty.
QuadrantReport quadrant_report(const std::vector<SampleRecord>& records, const std::vector<std::string>& caption_texts,
                               Eigen::Index captions_per_image, std::size_t max_exemplars = 5);

enum class AblationAxis { xi, K, upsilon, lambda_fixed };

std::optional<AblationAxis> parse_axis(std::string_view s);
std::string_view to_string(AblationAxis axis);

struct AxisValue {
  double value = 0.0;
  bool is_max = false;  // K only: every class, i.e. no Top-K restriction

  /// A number, or "max" when `axis` is K. Throws InvalidAxis otherwise.
  static AxisValue parse(AblationAxis axis, std::string_view text);
  std::string label() const;
};

struct AblationRow {
  AxisValue value;
  double top1 = 0.0;
  std::optional<double> top1_fixed;  // only on the xi axis
};

struct AblationGrid {
  AblationAxis axis = AblationAxis::xi;
  std::vector<AblationRow> rows;

  /// `axis,value,top1,top1_fixed` with one line per value.
  std::string to_csv() const;
};

AblationGrid ablate(const EmbeddingBundle& bundle, const IceConfig& base, AblationAxis axis,
                    const std::vector<AxisValue>& values, unsigned workers = 0);

/// Runs ICE over precomputed distributions. Exposed for ablations and tests.
std::vector<SampleRecord> run_ice(const ScoredSamples& scored, const std::vector<std::uint32_t>& labels,
                                  const IceConfig& cfg);

nlohmann::json config_to_json(const IceConfig& cfg);
nlohmann::json report_to_json(const EvalReport& report, bool include_records = true);

/// CSV header shared by every evaluation table.
std::string report_csv_header();
std::string report_csv_rows(const EvalReport& report);

struct GroupAverage {
  std::string group;
  std::string method;
  double top1 = 0.0;
  std::size_t bundles = 0;
};

/// Mean Top-1 per method over the bundles of each tagged benchmark group.
std::vector<GroupAverage> group_averages(const std::vector<EvalReport>& reports);

}  // namespace ice
