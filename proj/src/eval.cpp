#include "ice/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <sstream>
#include <thread>

namespace ice {

namespace {

// Runs fn(i) for i in [0, n) over contiguous chunks. Rethrows the exception
// of the earliest failing chunk, so failures are reported deterministically.
template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
  unsigned w = workers != 0 ? workers : std::max(1u, std::thread::hardware_concurrency());
  w = static_cast<unsigned>(std::min<std::size_t>(w, n));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(w);
  {
    std::vector<std::jthread> threads;
    threads.reserve(w);
    for (unsigned t = 0; t < w; ++t) {
      const std::size_t begin = n * t / w;
      const std::size_t end = n * (t + 1) / w;
      threads.emplace_back([&, t, begin, end] {
        try {
          for (std::size_t i = begin; i < end; ++i) fn(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_percent(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

double percent(std::size_t correct, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * double(correct) / double(total);
}

Eigen::Index label_rank(const Eigen::Ref<const VectorXd>& probs, Eigen::Index label) {
  Eigen::Index rank = 0;
  const double p = probs(label);
  for (Eigen::Index j = 0; j < probs.size(); ++j) {
    if (probs(j) > p || (probs(j) == p && j < label)) ++rank;
  }
  return rank;
}

std::size_t count_ice_correct(const std::vector<SampleRecord>& records) {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const SampleRecord& r) {
    return r.ice_prediction == r.label;
  }));
}

int checked_count(double v, const char* field) {
  if (!std::isfinite(v) || v < 1 || v != std::floor(v) || v > 1e9) {
    throw Error(ErrorCode::InvalidConfig, std::string(field) + " must be a positive integer, got " + format_number(v));
  }
  return static_cast<int>(v);
}

}  // namespace

Method Method::parse(std::string_view text) {
  Method m;
  const auto colon = text.find(':');
  const std::string_view kind = text.substr(0, colon);
  if (kind == "image_only") {
    m.kind = Kind::image_only;
  } else if (kind == "caption_only") {
    m.kind = Kind::caption_only;
  } else if (kind == "ice") {
    m.kind = Kind::ice;
  } else {
    throw Error(ErrorCode::InvalidConfig, "methods: unknown method '" + std::string(text) + "'");
  }
  if (colon != std::string_view::npos) {
    m.reduction = parse_reduction(text.substr(colon + 1));
    if (!m.reduction) throw Error(ErrorCode::InvalidConfig, "methods: unknown reduction in '" + std::string(text) + "'");
  }
  return m;
}

std::string Method::name() const {
  std::string out;
  switch (kind) {
    case Kind::image_only: out = "image_only"; break;
    case Kind::caption_only: out = "caption_only"; break;
    case Kind::ice: out = "ice"; break;
  }
  if (reduction) out += ":" + std::string(to_string(*reduction));
  return out;
}

std::vector<Method> default_methods() {
  return {Method{Method::Kind::image_only, {}}, Method{Method::Kind::caption_only, {}}, Method{Method::Kind::ice, {}}};
}

const MethodResult* EvalReport::find(std::string_view name) const {
  for (const auto& m : methods) {
    if (m.name == name) return &m;
  }
  return nullptr;
}

Eigen::Index resolve_upsilon(const EmbeddingBundle& bundle, const IceConfig& cfg) {
  if (!cfg.upsilon) return bundle.captions_per_image;
  if (*cfg.upsilon < 1 || *cfg.upsilon > bundle.captions_per_image) {
    throw Error(ErrorCode::InvalidConfig, "upsilon " + std::to_string(*cfg.upsilon) + " outside the stored range [1, " +
                                              std::to_string(bundle.captions_per_image) + "]");
  }
  return *cfg.upsilon;
}

ScoredSamples score_samples(const EmbeddingBundle& bundle, const ClassPrototypeSet<double>& protos, double tau,
                            Eigen::Index upsilon, unsigned workers) {
  const Eigen::Index n = bundle.num_images();
  const Eigen::Index m = protos.num_classes();
  ScoredSamples out;
  out.image.setZero(n, m);
  out.caption.setZero(n, m);
  out.fallback.assign(static_cast<std::size_t>(n), 0);
  parallel_for(static_cast<std::size_t>(n), workers, [&](std::size_t s) {
    const auto i = static_cast<Eigen::Index>(s);
    const VectorXd image = bundle.image_embeddings.row(i).transpose().cast<double>();
    out.image.row(i) = score_image(image, protos, tau).probs().transpose();
    try {
      out.caption.row(i) = caption_score(bundle.captions_of(i, upsilon), protos, tau).probs().transpose();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ZeroVector) throw;
      out.fallback[s] = 1;
    }
  });
  return out;
}

std::vector<SampleRecord> run_ice(const ScoredSamples& scored, const std::vector<std::uint32_t>& labels,
                                  const IceConfig& cfg) {
  validate(cfg);
  IceConfig fallback_cfg = cfg;
  fallback_cfg.lambda_mode = LambdaMode::image_only;
  const auto n = static_cast<std::size_t>(scored.image.rows());
  std::vector<SampleRecord> records(n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto i = static_cast<Eigen::Index>(s);
    const VectorXd image_probs = scored.image.row(i).transpose();
    const auto image = ScoreDistribution<double>::from_probabilities(image_probs);
    SampleRecord& r = records[s];
    r.sample = s;
    r.label = labels[s];
    r.fallback = scored.fallback[s] != 0;
    r.label_rank = label_rank(image_probs, r.label);
    IcePrediction pred;
    if (r.fallback) {
      pred = ice_predict(image, image, fallback_cfg);
      r.caption_argmax = -1;
    } else {
      const VectorXd caption_probs = scored.caption.row(i).transpose();
      pred = ice_predict(image, ScoreDistribution<double>::from_probabilities(caption_probs), cfg);
      r.caption_argmax = argmax(caption_probs);
    }
    r.image_argmax = pred.image_argmax;
    r.ice_prediction = pred.predicted_class;
    r.lambda = pred.lambda_used;
    r.top_k = std::move(pred.top_k_indices);
    r.fused_scores = std::move(pred.fused_scores_on_top_k);
  }
  return records;
}

std::size_t top_k_hits(const std::vector<SampleRecord>& records, int K) {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(),
                                                [K](const SampleRecord& r) { return r.label_rank < Eigen::Index(K); }));
}

double top_k_accuracy(const std::vector<SampleRecord>& records, int K) {
  return percent(top_k_hits(records, K), records.size());
}

QuadrantCounts quadrant_counts(const std::vector<SampleRecord>& records) {
  QuadrantCounts q;
  for (const auto& r : records) {
    const bool image_right = r.image_argmax == r.label;
    const bool ice_right = r.ice_prediction == r.label;
    if (!image_right && ice_right) ++q.fixed;
    else if (image_right && !ice_right) ++q.broken;
    else if (image_right) ++q.kept_right;
    else ++q.kept_wrong;
  }
  return q;
}

QuadrantReport quadrant_report(const std::vector<SampleRecord>& records, const std::vector<std::string>& caption_texts,
                               Eigen::Index captions_per_image, std::size_t max_exemplars) {
  QuadrantReport out;
  out.counts = quadrant_counts(records);
  const bool texts = !caption_texts.empty() && captions_per_image > 0;
  for (const auto& r : records) {
    const bool image_right = r.image_argmax == r.label;
    const bool ice_right = r.ice_prediction == r.label;
    auto& bucket = (!image_right && ice_right) ? out.fixed
                   : (image_right && !ice_right) ? out.broken
                   : image_right                 ? out.kept_right
                                                 : out.kept_wrong;
    if (bucket.size() >= max_exemplars) continue;
    Exemplar e{r.sample, r.image_argmax, r.ice_prediction, r.label, r.lambda, {}};
    if (texts) {
      const auto first = r.sample * static_cast<std::size_t>(captions_per_image);
      for (Eigen::Index j = 0; j < captions_per_image && first + j < caption_texts.size(); ++j) {
        e.captions.push_back(caption_texts[first + j]);
      }
    }
    bucket.push_back(std::move(e));
  }
  return out;
}

EvalReport evaluate(const EmbeddingBundle& bundle, const IceConfig& cfg, const EvalOptions& options) {
  validate(cfg);
  EvalReport report;
  report.bundle_name = bundle.manifest.dataset;
  report.group = bundle.manifest.group;
  report.config = cfg;
  const Eigen::Index upsilon = resolve_upsilon(bundle, cfg);
  report.config.upsilon = static_cast<int>(upsilon);
  report.reduction = bundle.reduction;
  report.num_samples = static_cast<std::size_t>(bundle.num_images());
  report.num_classes = bundle.num_classes();
  if (cfg.K > bundle.num_classes()) {
    report.warnings.push_back("K=" + std::to_string(cfg.K) + " exceeds the class count " +
                              std::to_string(bundle.num_classes()) + "; clamped");
  }

  std::map<Reduction, ScoredSamples> scored;
  auto scores_for = [&](Reduction r) -> const ScoredSamples& {
    auto it = scored.find(r);
    if (it == scored.end()) {
      it = scored.emplace(r, score_samples(bundle, bundle_prototypes(bundle, r), cfg.tau, upsilon, options.workers))
               .first;
    }
    return it->second;
  };

  const ScoredSamples& primary = scores_for(bundle.reduction);
  report.records = run_ice(primary, bundle.labels, cfg);
  report.quadrants = quadrant_counts(report.records);
  report.fallbacks = static_cast<std::size_t>(std::count(primary.fallback.begin(), primary.fallback.end(), 1));
  for (const int k : options.report_ks) {
    if (k < 1) throw Error(ErrorCode::InvalidConfig, "report_ks entries must be >= 1");
    const std::size_t hits = top_k_hits(report.records, k);
    report.top_k.push_back({k, hits, percent(hits, report.num_samples)});
  }

  for (const auto& method : options.methods) {
    const Reduction r = method.reduction.value_or(bundle.reduction);
    const ScoredSamples& s = scores_for(r);
    std::size_t correct = 0;
    switch (method.kind) {
      case Method::Kind::image_only:
        for (Eigen::Index i = 0; i < s.image.rows(); ++i) correct += argmax(s.image.row(i)) == bundle.labels[i];
        break;
      case Method::Kind::caption_only:
        for (Eigen::Index i = 0; i < s.caption.rows(); ++i) {
          correct += !s.fallback[i] && argmax(s.caption.row(i)) == bundle.labels[i];
        }
        break;
      case Method::Kind::ice:
        correct = r == bundle.reduction ? count_ice_correct(report.records)
                                        : count_ice_correct(run_ice(s, bundle.labels, cfg));
        break;
    }
    report.methods.push_back({method, method.name(), correct, percent(correct, report.num_samples)});
  }
  return report;
}

std::optional<AblationAxis> parse_axis(std::string_view s) {
  if (s == "xi") return AblationAxis::xi;
  if (s == "K") return AblationAxis::K;
  if (s == "upsilon") return AblationAxis::upsilon;
  if (s == "lambda_fixed") return AblationAxis::lambda_fixed;
  return std::nullopt;
}

std::string_view to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::xi: return "xi";
    case AblationAxis::K: return "K";
    case AblationAxis::upsilon: return "upsilon";
    case AblationAxis::lambda_fixed: return "lambda_fixed";
  }
  return "unknown";
}

AxisValue AxisValue::parse(AblationAxis axis, std::string_view text) {
  if (text == "max") {
    if (axis != AblationAxis::K) throw Error(ErrorCode::InvalidAxis, "'max' is only valid on the K axis");
    return {0.0, true};
  }
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw Error(ErrorCode::InvalidAxis, "axis value '" + std::string(text) + "' is not a number");
  }
  return {v, false};
}

std::string AxisValue::label() const { return is_max ? "max" : format_number(value); }

std::string AblationGrid::to_csv() const {
  std::string out = "axis,value,top1,top1_fixed\n";
  for (const auto& row : rows) {
    out += std::string(to_string(axis)) + "," + row.value.label() + "," + format_percent(row.top1) + ",";
    if (row.top1_fixed) out += format_percent(*row.top1_fixed);
    out += "\n";
  }
  return out;
}

AblationGrid ablate(const EmbeddingBundle& bundle, const IceConfig& base, AblationAxis axis,
                    const std::vector<AxisValue>& values, unsigned workers) {
  validate(base);
  if (values.empty()) throw Error(ErrorCode::InvalidAxis, "ablation needs at least one value");
  const auto protos = bundle_prototypes(bundle);
  const std::size_t n = static_cast<std::size_t>(bundle.num_images());

  std::optional<ScoredSamples> cached;
  auto base_scores = [&]() -> const ScoredSamples& {
    if (!cached) cached = score_samples(bundle, protos, base.tau, resolve_upsilon(bundle, base), workers);
    return *cached;
  };
  auto top1 = [&](const ScoredSamples& s, const IceConfig& cfg) {
    return percent(count_ice_correct(run_ice(s, bundle.labels, cfg)), n);
  };

  AblationGrid grid;
  grid.axis = axis;
  for (const auto& v : values) {
    if (v.is_max && axis != AblationAxis::K) throw Error(ErrorCode::InvalidAxis, "'max' is only valid on the K axis");
    AblationRow row{v, 0.0, std::nullopt};
    IceConfig cfg = base;
    switch (axis) {
      case AblationAxis::K:
        cfg.K = v.is_max ? static_cast<int>(bundle.num_classes()) : checked_count(v.value, "K");
        row.top1 = top1(base_scores(), cfg);
        break;
      case AblationAxis::xi: {
        cfg.lambda_mode = LambdaMode::adaptive;
        cfg.xi = v.value;
        row.top1 = top1(base_scores(), cfg);
        IceConfig fixed = base;
        fixed.lambda_mode = LambdaMode::fixed;
        fixed.lambda = v.value;
        row.top1_fixed = top1(base_scores(), fixed);
        break;
      }
      case AblationAxis::lambda_fixed:
        cfg.lambda_mode = LambdaMode::fixed;
        cfg.lambda = v.value;
        row.top1 = top1(base_scores(), cfg);
        break;
      case AblationAxis::upsilon: {
        cfg.upsilon = checked_count(v.value, "upsilon");
        const Eigen::Index ups = resolve_upsilon(bundle, cfg);
        row.top1 = top1(score_samples(bundle, protos, cfg.tau, ups, workers), cfg);
        break;
      }
    }
    grid.rows.push_back(row);
  }
  return grid;
}

nlohmann::json config_to_json(const IceConfig& cfg) {
  nlohmann::json j;
  j["K"] = cfg.K;
  j["xi"] = cfg.xi;
  j["epsilon"] = cfg.epsilon;
  j["lambda_mode"] = std::string(to_string(cfg.lambda_mode));
  j["lambda"] = cfg.lambda;
  j["tau"] = cfg.tau;
  j["upsilon"] = cfg.upsilon ? nlohmann::json(*cfg.upsilon) : nlohmann::json(nullptr);
  return j;
}

namespace {

nlohmann::json records_json(const std::vector<SampleRecord>& records) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) {
    arr.push_back({{"sample", r.sample},
                   {"label", r.label},
                   {"image_argmax", r.image_argmax},
                   {"caption_argmax", r.caption_argmax},
                   {"ice_prediction", r.ice_prediction},
                   {"lambda", r.lambda},
                   {"label_rank", r.label_rank},
                   {"fallback", r.fallback},
                   {"top_k", r.top_k},
                   {"fused_scores", r.fused_scores}});
  }
  return arr;
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& report, bool include_records) {
  nlohmann::json j;
  j["bundle"] = report.bundle_name;
  j["group"] = report.group;
  j["config"] = config_to_json(report.config);
  j["reduction"] = std::string(to_string(report.reduction));
  j["n_samples"] = report.num_samples;
  j["n_classes"] = report.num_classes;
  j["fallbacks"] = report.fallbacks;
  j["warnings"] = report.warnings;
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : report.methods) methods.push_back({{"method", m.name}, {"correct", m.correct}, {"top1", m.top1}});
  j["methods"] = methods;
  nlohmann::json topk = nlohmann::json::array();
  for (const auto& t : report.top_k) topk.push_back({{"K", t.K}, {"accuracy", t.accuracy}});
  j["image_top_k"] = topk;
  j["quadrants"] = {{"fixed", report.quadrants.fixed},
                    {"broken", report.quadrants.broken},
                    {"kept_right", report.quadrants.kept_right},
                    {"kept_wrong", report.quadrants.kept_wrong}};
  if (include_records) j["records"] = records_json(report.records);
  return j;
}

std::string report_csv_header() {
  return "bundle,group,method,top1,correct,n_samples,fallbacks,K,xi,epsilon,lambda_mode,lambda,tau,upsilon\n";
}

std::string report_csv_rows(const EvalReport& report) {
  const IceConfig& c = report.config;
  const std::string tail = "," + std::to_string(report.num_samples) + "," + std::to_string(report.fallbacks) + "," +
                           std::to_string(c.K) + "," + format_number(c.xi) + "," + format_number(c.epsilon) + "," +
                           std::string(to_string(c.lambda_mode)) + "," + format_number(c.lambda) + "," +
                           format_number(c.tau) + "," + (c.upsilon ? std::to_string(*c.upsilon) : "") + "\n";
  const std::string head = report.bundle_name + "," + report.group + ",";
  std::string out;
  for (const auto& m : report.methods) {
    out += head + m.name + "," + format_percent(m.top1) + "," + std::to_string(m.correct) + tail;
  }
  for (const auto& t : report.top_k) {
    out += head + "image_top" + std::to_string(t.K) + "," + format_percent(t.accuracy) + "," +
           std::to_string(t.correct) + tail;
  }
  return out;
}

std::vector<GroupAverage> group_averages(const std::vector<EvalReport>& reports) {
  std::map<std::pair<std::string, std::string>, GroupAverage> acc;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& r : reports) {
    if (r.group.empty()) continue;
    for (const auto& m : r.methods) {
      const auto key = std::make_pair(r.group, m.name);
      auto [it, inserted] = acc.try_emplace(key, GroupAverage{r.group, m.name, 0.0, 0});
      if (inserted) order.push_back(key);
      it->second.top1 += m.top1;
      ++it->second.bundles;
    }
  }
  std::vector<GroupAverage> out;
  for (const auto& key : order) {
    GroupAverage g = acc.at(key);
    g.top1 /= double(g.bundles);
    out.push_back(g);
  }
  return out;
}

}  // namespace ice
