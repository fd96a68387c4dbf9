#include "ice/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "ice/bundle.hpp"
#include "ice/eval.hpp"
#include "ice/run_config.hpp"

namespace ice {

namespace {

struct CommonFlags {
  std::string config_path;
  KeyValues overrides;
};

void add_common_flags(CLI::App* app, CommonFlags& flags) {
  app->add_option("--config", flags.config_path, "Flat key = value run-config file");
  struct Flag {
    const char* name;
    const char* key;
    const char* help;
  };
  static constexpr Flag kFlags[] = {
      {"--K", "K", "Top-K anchor size"},
      {"--xi", "xi", "Caption weight ceiling"},
      {"--epsilon", "epsilon", "Division floor of the adaptive weight"},
      {"--lambda-mode", "lambda_mode", "adaptive, fixed or image_only"},
      {"--lambda", "lambda", "Caption weight for lambda_mode=fixed"},
      {"--tau", "tau", "Softmax temperature (default: the bundle's hint)"},
      {"--upsilon", "upsilon", "Use only the first N captions of each image"},
      {"--methods", "methods", "Comma-separated methods, e.g. image_only,caption_only,ice:score_mean"},
      {"--report-ks", "report_ks", "Comma-separated K values for image Top-K accuracy"},
      {"--workers", "workers", "Evaluation threads (0: all cores)"},
      {"--seed", "seed", "Run seed, echoed into reports"},
  };
  for (const auto& f : kFlags) {
    const std::string key = f.key;
    app->add_option_function<std::string>(
        f.name, [&flags, key](const std::string& v) { flags.overrides.emplace_back(key, v); }, f.help);
  }
}

RunConfig build_run_config(const CommonFlags& flags) {
  RunConfig cfg;
  if (!flags.config_path.empty()) apply_settings(cfg, read_key_values(flags.config_path));
  apply_settings(cfg, flags.overrides);
  return cfg;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string timestamp_utc() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

bool is_bundle_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::IO:
    case ErrorCode::BadMagic:
    case ErrorCode::VersionUnsupported:
    case ErrorCode::ChecksumMismatch:
    case ErrorCode::InvariantViolation: return true;
    default: return false;
  }
}

// Maps a failure to the documented exit codes.
int report_error(const Error& e, std::ostream& err) {
  err << "error: " << e.what() << "\n";
  if (e.code() == ErrorCode::InvalidConfig || e.code() == ErrorCode::InvalidSpec ||
      e.code() == ErrorCode::InvalidAxis) {
    return kExitBadConfig;
  }
  return kExitFailure;
}

std::optional<EmbeddingBundle> load_bundle(const std::string& path, std::ostream& err) {
  try {
    return read_bundle(path);
  } catch (const Error& e) {
    err << "error: bundle " << path << ": " << e.what() << "\n";
    return std::nullopt;
  }
}

std::string bundle_label(const EmbeddingBundle& b, const std::string& path) {
  return b.manifest.dataset.empty() ? path : b.manifest.dataset;
}

EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions opt;
  opt.methods.clear();
  for (const auto& m : cfg.methods) opt.methods.push_back(Method::parse(m));
  opt.report_ks = cfg.report_ks;
  opt.workers = cfg.workers;
  return opt;
}

int cmd_predict(const CommonFlags& flags, const std::string& bundle_path, const std::vector<std::string>& id_args,
                std::ostream& out, std::ostream& err) {
  RunConfig run;
  IceConfig cfg;
  std::vector<long long> ids;
  try {
    run = build_run_config(flags);
    for (const auto& arg : id_args) {
      for (const auto& item : split_list(arg)) {
        std::size_t used = 0;
        long long id = 0;
        try {
          id = std::stoll(item, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != item.size()) throw Error(ErrorCode::InvalidConfig, "ids: '" + item + "' is not an integer");
        ids.push_back(id);
      }
    }
  } catch (const Error& e) {
    return report_error(e, err);
  }
  const std::string path = bundle_path.empty() && !run.bundles.empty() ? run.bundles.front() : bundle_path;
  if (path.empty()) {
    err << "error: predict needs --bundle\n";
    return kExitBadConfig;
  }
  auto bundle = load_bundle(path, err);
  if (!bundle) return kExitBadBundle;

  Eigen::Index upsilon = 0;
  try {
    cfg = resolve_ice_config(run, bundle->temperature_hint);
    validate(cfg);
    upsilon = resolve_upsilon(*bundle, cfg);
  } catch (const Error& e) {
    return report_error(e, err);
  }
  if (cfg.K > bundle->num_classes()) {
    err << "warning: K=" << cfg.K << " exceeds the class count " << bundle->num_classes() << "; clamped\n";
  }
  if (ids.empty()) {
    for (Eigen::Index i = 0; i < bundle->num_images(); ++i) ids.push_back(i);
  }
  for (const auto id : ids) {
    if (id < 0 || id >= bundle->num_images()) {
      err << "error: sample id " << id << " outside [0, " << bundle->num_images() << ")\n";
      return kExitIdOutOfRange;
    }
  }

  try {
    const auto protos = bundle_prototypes(*bundle);
    std::ostringstream lines;
    for (const auto id : ids) {
      const auto i = static_cast<Eigen::Index>(id);
      const VectorXd query = bundle->image_embeddings.row(i).transpose().cast<double>();
      const auto image = score_image(query, protos, cfg.tau);
      IcePrediction pred;
      bool fallback = false;
      try {
        const auto caption = caption_score(bundle->captions_of(i, upsilon), protos, cfg.tau);
        pred = ice_predict(image, caption, cfg);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::ZeroVector) throw;
        IceConfig image_only = cfg;
        image_only.lambda_mode = LambdaMode::image_only;
        pred = ice_predict(image, image, image_only);
        fallback = true;
      }
      lines << "sample=" << id << " image_argmax=" << pred.image_argmax << " top_k=";
      for (std::size_t j = 0; j < pred.top_k_indices.size(); ++j) lines << (j ? "," : "") << pred.top_k_indices[j];
      lines << " lambda=" << fixed(pred.lambda_used, 8) << " ice=" << pred.predicted_class
            << " label=" << bundle->labels[i] << (fallback ? " fallback=1" : "") << "\n";
    }
    out << lines.str();
  } catch (const Error& e) {
    return report_error(e, err);
  }
  return kExitOk;
}

int cmd_evaluate(const CommonFlags& flags, std::vector<std::string> bundle_paths, const std::string& json_path,
                 const std::string& csv_path, std::ostream& out, std::ostream& err) {
  RunConfig run;
  EvalOptions options;
  try {
    run = build_run_config(flags);
    if (!bundle_paths.empty()) run.bundles = bundle_paths;
    if (!json_path.empty()) run.report_json = json_path;
    if (!csv_path.empty()) run.report_csv = csv_path;
    options = eval_options(run);
  } catch (const Error& e) {
    return report_error(e, err);
  }
  if (run.bundles.empty()) {
    err << "error: evaluate needs at least one --bundle\n";
    return kExitBadConfig;
  }

  std::vector<EmbeddingBundle> bundles;
  for (const auto& path : run.bundles) {
    auto b = load_bundle(path, err);
    if (!b) return kExitBadBundle;
    bundles.push_back(std::move(*b));
  }

  std::vector<EvalReport> reports;
  try {
    for (std::size_t b = 0; b < bundles.size(); ++b) {
      EvalReport r = evaluate(bundles[b], resolve_ice_config(run, bundles[b].temperature_hint), options);
      r.bundle_name = bundle_label(bundles[b], run.bundles[b]);
      for (const auto& w : r.warnings) err << "warning: " << r.bundle_name << ": " << w << "\n";
      reports.push_back(std::move(r));
    }
  } catch (const Error& e) {
    return report_error(e, err);
  }

  std::string csv = report_csv_header();
  nlohmann::json j;
  j["created"] = timestamp_utc();
  j["config"] = run_config_to_json(run);
  j["reports"] = nlohmann::json::array();
  for (std::size_t b = 0; b < reports.size(); ++b) {
    csv += report_csv_rows(reports[b]);
    nlohmann::json rj = report_to_json(reports[b]);
    const auto q = quadrant_report(reports[b].records, bundles[b].caption_texts, bundles[b].captions_per_image,
                                   run.exemplars);
    nlohmann::json ex;
    auto dump = [](const std::vector<Exemplar>& list) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& e : list) {
        arr.push_back({{"sample", e.sample},
                       {"image_argmax", e.image_argmax},
                       {"ice_prediction", e.ice_prediction},
                       {"label", e.label},
                       {"lambda", e.lambda},
                       {"captions", e.captions}});
      }
      return arr;
    };
    ex["fixed"] = dump(q.fixed);
    ex["broken"] = dump(q.broken);
    ex["kept_right"] = dump(q.kept_right);
    ex["kept_wrong"] = dump(q.kept_wrong);
    rj["exemplars"] = ex;
    j["reports"].push_back(rj);
  }
  const auto averages = group_averages(reports);
  j["group_averages"] = nlohmann::json::array();
  for (const auto& g : averages) {
    j["group_averages"].push_back({{"group", g.group}, {"method", g.method}, {"top1", g.top1}, {"bundles", g.bundles}});
  }

  try {
    write_file_atomic(run.report_csv, csv);
    write_file_atomic(run.report_json, j.dump(2) + "\n");
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }

  // method x bundle table
  out << std::left << std::setw(24) << "method";
  for (const auto& r : reports) out << std::setw(16) << r.bundle_name;
  out << "\n";
  for (std::size_t m = 0; m < options.methods.size(); ++m) {
    out << std::setw(24) << reports.front().methods[m].name;
    for (const auto& r : reports) out << std::setw(16) << fixed(r.methods[m].top1, 2);
    out << "\n";
  }
  for (std::size_t k = 0; k < run.report_ks.size(); ++k) {
    out << std::setw(24) << ("image_top" + std::to_string(run.report_ks[k]));
    for (const auto& r : reports) out << std::setw(16) << fixed(r.top_k[k].accuracy, 2);
    out << "\n";
  }
  for (const auto& r : reports) {
    out << r.bundle_name << ": quadrants fixed=" << r.quadrants.fixed << " broken=" << r.quadrants.broken
        << " kept_right=" << r.quadrants.kept_right << " kept_wrong=" << r.quadrants.kept_wrong
        << " fallbacks=" << r.fallbacks << "\n";
  }
  for (const auto& g : averages) {
    out << "average[" << g.group << "] " << g.method << " = " << fixed(g.top1, 2) << " over " << g.bundles
        << " bundles\n";
  }
  out << std::right;
  return kExitOk;
}

int cmd_ablate(const CommonFlags& flags, const std::string& bundle_path, const std::string& axis_name,
               const std::string& values_arg, const std::string& out_path, std::ostream& out, std::ostream& err) {
  RunConfig run;
  AblationAxis axis{};
  std::vector<AxisValue> values;
  try {
    run = build_run_config(flags);
    const auto parsed = parse_axis(axis_name);
    if (!parsed) throw Error(ErrorCode::InvalidAxis, "unknown axis '" + axis_name + "' (xi, K, upsilon, lambda_fixed)");
    axis = *parsed;
    for (const auto& v : split_list(values_arg)) values.push_back(AxisValue::parse(axis, v));
    if (values.empty()) throw Error(ErrorCode::InvalidAxis, "--values is empty");
  } catch (const Error& e) {
    return report_error(e, err);
  }
  const std::string path = bundle_path.empty() && !run.bundles.empty() ? run.bundles.front() : bundle_path;
  if (path.empty()) {
    err << "error: ablate needs --bundle\n";
    return kExitBadConfig;
  }
  auto bundle = load_bundle(path, err);
  if (!bundle) return kExitBadBundle;

  AblationGrid grid;
  IceConfig cfg;
  try {
    cfg = resolve_ice_config(run, bundle->temperature_hint);
    grid = ablate(*bundle, cfg, axis, values, run.workers);
  } catch (const Error& e) {
    return report_error(e, err);
  }

  nlohmann::json sidecar;
  sidecar["created"] = timestamp_utc();
  sidecar["bundle"] = path;
  sidecar["axis"] = std::string(to_string(axis));
  sidecar["config"] = run_config_to_json(run);
  sidecar["resolved"] = config_to_json(cfg);
  try {
    write_file_atomic(out_path, grid.to_csv());
    write_file_atomic(out_path + ".json", sidecar.dump(2) + "\n");
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  out << std::left << std::setw(14) << to_string(axis) << std::setw(12) << "top1"
      << (axis == AblationAxis::xi ? "top1_fixed" : "") << "\n";
  for (const auto& row : grid.rows) {
    out << std::setw(14) << row.value.label() << std::setw(12) << fixed(row.top1, 2);
    if (row.top1_fixed) out << fixed(*row.top1_fixed, 2);
    out << "\n";
  }
  out << std::right;
  return kExitOk;
}

int cmd_validate(const std::string& path, std::ostream& out, std::ostream& err) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadBundle;
  }
  const auto issues = validate_bundle_bytes(bytes);
  if (!issues.empty()) {
    out << "FAILED " << path << " (" << issues.size() << " issue" << (issues.size() == 1 ? "" : "s") << ")\n";
    for (const auto& issue : issues) out << "  [" << to_string(issue.code) << "] " << issue.message << "\n";
    return kExitBadBundle;
  }
  const EmbeddingBundle b = decode_bundle(bytes);
  out << "OK " << path << "\n"
      << "  N=" << b.num_images() << " m=" << b.num_classes() << " l=" << b.dimension()
      << " upsilon=" << b.captions_per_image << " reduction=" << to_string(b.reduction)
      << " tau_hint=" << b.temperature_hint << " caption_texts=" << (b.caption_texts.empty() ? "no" : "yes") << "\n"
      << "  dataset=" << b.manifest.dataset << " split=" << b.manifest.split << " model=" << b.manifest.source_model
      << "\n";
  return kExitOk;
}

int cmd_synth(const SynthSpec& spec, const std::string& out_path, unsigned workers, std::ostream& out,
              std::ostream& err) {
  EmbeddingBundle bundle;
  try {
    bundle = synth_bundle(spec);
  } catch (const Error& e) {
    return report_error(e, err);
  }
  std::vector<std::uint8_t> bytes;
  try {
    bytes = encode_bundle(bundle);
    write_file_atomic(out_path, bytes);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }

  IceConfig cfg;
  cfg.tau = spec.temperature_hint;
  EvalOptions options;
  options.workers = workers;
  options.report_ks = {1, std::min(5, spec.num_classes)};
  EvalReport report;
  try {
    report = evaluate(bundle, cfg, options);
  } catch (const Error& e) {
    return report_error(e, err);
  }
  out << "wrote " << out_path << " (" << bytes.size() << " bytes, crc64 " << hex64(crc64(bytes)) << ")\n"
      << "  N=" << spec.num_images << " m=" << spec.num_classes << " l=" << spec.dimension
      << " upsilon=" << spec.captions_per_image << " seed=" << spec.seed << "\n"
      << "  caption_signal=" << spec.caption_signal << " image_noise=" << spec.image_noise
      << " caption_noise=" << spec.caption_noise << " tau_hint=" << spec.temperature_hint << "\n"
      << "ground-truth accuracies (K=" << cfg.K << ", xi=" << cfg.xi << ", adaptive lambda):\n";
  for (const auto& m : report.methods) out << "  " << std::left << std::setw(14) << m.name << std::right
                                           << fixed(m.top1, 2) << "%\n";
  for (const auto& t : report.top_k) out << "  image_top" << t.K << std::string(t.K < 10 ? 5 : 4, ' ')
                                         << fixed(t.accuracy, 2) << "%\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Image-caption fusion engine for zero-shot classification over embedding bundles", "ice"};
  app.require_subcommand(1);

  CommonFlags predict_flags, evaluate_flags, ablate_flags;
  std::string predict_bundle, ablate_bundle, axis, values, grid_out = "ice_ablation.csv";
  std::vector<std::string> ids, eval_bundles;
  std::string json_path, csv_path, validate_path, synth_out;
  SynthSpec spec;
  std::string synth_reduction = "single";
  unsigned synth_workers = 0;

  auto* predict = app.add_subcommand("predict", "Print per-sample image, Top-K and fused predictions");
  predict->add_option("--bundle", predict_bundle, "Bundle file");
  predict->add_option("--ids", ids, "Sample ids (comma separated; default all)")->delimiter(',');
  add_common_flags(predict, predict_flags);

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Evaluate methods over one or more bundles");
  evaluate_cmd->add_option("--bundle", eval_bundles, "Bundle file (repeatable)");
  evaluate_cmd->add_option("--json", json_path, "Full JSON report path");
  evaluate_cmd->add_option("--csv", csv_path, "CSV metric table path");
  add_common_flags(evaluate_cmd, evaluate_flags);

  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep one parameter and write a grid CSV");
  ablate_cmd->add_option("--bundle", ablate_bundle, "Bundle file");
  ablate_cmd->add_option("--axis", axis, "xi, K, upsilon or lambda_fixed")->required();
  ablate_cmd->add_option("--values", values, "Comma-separated values; 'max' allowed for K")->required();
  ablate_cmd->add_option("--out", grid_out, "Grid CSV path");
  add_common_flags(ablate_cmd, ablate_flags);

  auto* validate_cmd = app.add_subcommand("validate-bundle", "Check a bundle's structure, checksums and invariants");
  validate_cmd->add_option("path", validate_path, "Bundle file")->required();

  auto* synth = app.add_subcommand("synth", "Generate a synthetic bundle");
  synth->add_option("--out", synth_out, "Output bundle path")->required();
  synth->add_option("--N", spec.num_images, "Images");
  synth->add_option("--m", spec.num_classes, "Classes");
  synth->add_option("--l", spec.dimension, "Embedding dimension");
  synth->add_option("--upsilon", spec.captions_per_image, "Captions per image");
  synth->add_option("--caption-signal", spec.caption_signal, "Caption informativeness in [0, 1]");
  synth->add_option("--image-noise", spec.image_noise, "Image noise level");
  synth->add_option("--caption-noise", spec.caption_noise, "Caption noise level");
  synth->add_option("--members-per-class", spec.members_per_class, "Prototype embeddings per class");
  synth->add_option("--member-noise", spec.member_noise, "Noise between a class's prototype embeddings");
  synth->add_option("--reduction", synth_reduction, "single, centroid or score_mean");
  synth->add_option("--tau", spec.temperature_hint, "Temperature hint stored in the bundle");
  synth->add_option("--seed", spec.seed, "Generator seed");
  synth->add_option("--dataset", spec.dataset, "Dataset name recorded in the manifest");
  synth->add_option("--group", spec.group, "Benchmark group: cross_dataset or domain_generalization");
  synth->add_flag("--texts", spec.caption_texts, "Store placeholder caption texts");
  synth->add_option("--workers", synth_workers, "Threads for the accuracy summary");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadConfig;
  }

  try {
    if (*predict) return cmd_predict(predict_flags, predict_bundle, ids, out, err);
    if (*evaluate_cmd) return cmd_evaluate(evaluate_flags, eval_bundles, json_path, csv_path, out, err);
    if (*ablate_cmd) return cmd_ablate(ablate_flags, ablate_bundle, axis, values, grid_out, out, err);
    if (*validate_cmd) return cmd_validate(validate_path, out, err);
    if (*synth) {
      const auto r = parse_reduction(synth_reduction);
      if (!r) {
        err << "error: --reduction must be single, centroid or score_mean\n";
        return kExitBadConfig;
      }
      spec.reduction = *r;
      return cmd_synth(spec, synth_out, synth_workers, out, err);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return is_bundle_error(e.code()) ? kExitBadBundle : kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitBadConfig;
}

}  // namespace ice
