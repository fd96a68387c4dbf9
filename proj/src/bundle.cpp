#include "ice/bundle.hpp"

#include <boost/crc.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace ice {

static_assert(std::endian::native == std::endian::little, "ICEB I/O assumes a little-endian host");

std::uint64_t crc64(std::span<const std::uint8_t> bytes) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  template <typename T>
  void pod(T v) {
    bytes(&v, sizeof(T));
  }
  void u32(std::size_t v) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
      throw Error(ErrorCode::InvariantViolation, "value does not fit the u32 field");
    }
    pod(static_cast<std::uint32_t>(v));
  }
  void string(const std::string& s) {
    u32(s.size());
    bytes(s.data(), s.size());
  }
  void floats(const RowMatrixXf& m) { bytes(m.data(), sizeof(float) * static_cast<std::size_t>(m.size())); }

  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void read(void* out, std::size_t n) {
    if (n > bytes_.size() - pos_) throw Error(ErrorCode::IO, "bundle truncated at offset " + std::to_string(pos_));
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod() {
    T v;
    read(&v, sizeof(T));
    return v;
  }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::string string() {
    const std::uint32_t n = u32();
    if (n > remaining()) throw Error(ErrorCode::IO, "bundle truncated inside a string at offset " + std::to_string(pos_));
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  RowMatrixXf floats(std::uint64_t rows, std::uint64_t cols) {
    const std::uint64_t count = rows * cols;
    if (cols != 0 && count / cols != rows) throw Error(ErrorCode::IO, "array size overflows");
    if (count > (bytes_.size() - pos_) / sizeof(float)) {
      throw Error(ErrorCode::IO, "bundle truncated inside a float array at offset " + std::to_string(pos_));
    }
    RowMatrixXf m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    read(m.data(), count * sizeof(float));
    return m;
  }
  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["dataset"] = m.dataset;
  j["split"] = m.split;
  j["source_model"] = m.source_model;
  j["caption_prompts"] = m.caption_prompts;
  j["created"] = m.created;
  j["group"] = m.group;
  j["extra"] = m.extra;
  return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.dataset = j.value("dataset", "");
  m.split = j.value("split", "");
  m.source_model = j.value("source_model", "");
  m.caption_prompts = j.value("caption_prompts", std::vector<std::string>{});
  m.created = j.value("created", "");
  m.group = j.value("group", "");
  if (j.contains("extra")) m.extra = j.at("extra");
  return m;
}

struct Parsed {
  EmbeddingBundle bundle;
  std::string stored_payload_checksum;
  std::uint64_t payload_checksum = 0;
};

// Structural parse after the header and trailing checksum have been checked.
Parsed parse_structure(std::span<const std::uint8_t> bytes) {
  Reader r(bytes.first(bytes.size() - sizeof(std::uint64_t)));
  char magic[4];
  r.read(magic, 4);
  r.u32();  // version
  if (const std::uint32_t reserved = r.u32(); reserved != 0) {
    throw Error(ErrorCode::InvariantViolation, "reserved header word is " + std::to_string(reserved) + ", expected 0");
  }
  const std::uint32_t flags = r.u32();
  if (flags & ~kFlagCaptionTexts) {
    throw Error(ErrorCode::InvariantViolation, "unknown header flags " + std::to_string(flags));
  }
  const std::uint32_t l = r.u32();
  const std::uint32_t n = r.u32();
  const std::uint32_t upsilon = r.u32();
  const std::uint32_t m = r.u32();
  if (std::uint64_t(m) * 4 > r.remaining()) throw Error(ErrorCode::IO, "bundle truncated in member-count table");

  Parsed out;
  EmbeddingBundle& b = out.bundle;
  b.member_counts.resize(m);
  std::uint64_t total_members = 0;
  for (auto& c : b.member_counts) {
    c = r.u32();
    total_members += c;
  }
  const auto tag = r.pod<std::uint8_t>();
  if (tag > static_cast<std::uint8_t>(Reduction::score_mean)) {
    throw Error(ErrorCode::InvariantViolation, "unknown reduction tag " + std::to_string(tag));
  }
  b.reduction = static_cast<Reduction>(tag);
  b.temperature_hint = r.pod<double>();
  b.captions_per_image = upsilon;
  b.image_embeddings = r.floats(n, l);
  b.caption_embeddings = r.floats(std::uint64_t(n) * upsilon, l);
  b.prototype_members = r.floats(total_members, l);
  if (std::uint64_t(n) * 4 > r.remaining()) throw Error(ErrorCode::IO, "bundle truncated in labels");
  b.labels.resize(n);
  for (auto& label : b.labels) label = r.u32();
  b.class_names.reserve(m);
  for (std::uint32_t c = 0; c < m; ++c) b.class_names.push_back(r.string());
  if (flags & kFlagCaptionTexts) {
    const std::uint64_t count = std::uint64_t(n) * upsilon;
    if (count * 4 > r.remaining()) throw Error(ErrorCode::IO, "bundle truncated in caption texts");
    b.caption_texts.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) b.caption_texts.push_back(r.string());
  }
  out.payload_checksum = crc64(bytes.first(r.position()));
  const std::string manifest_text = r.string();
  if (r.remaining() != 0) {
    throw Error(ErrorCode::InvariantViolation, std::to_string(r.remaining()) + " unexpected bytes after the manifest");
  }
  nlohmann::json j = nlohmann::json::parse(manifest_text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::InvariantViolation, "manifest is not a JSON object");
  try {
    b.manifest = manifest_from_json(j);
    out.stored_payload_checksum = j.value("payload_checksum", "");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvariantViolation, std::string("malformed manifest field: ") + e.what());
  }
  return out;
}

void check_finite(const RowMatrixXf& m, const char* what, std::vector<BundleIssue>& issues) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (!m.row(i).allFinite()) {
      issues.push_back({ErrorCode::InvariantViolation, std::string(what) + " row " + std::to_string(i) +
                                                           " contains NaN or Inf"});
      return;
    }
  }
}

}  // namespace

std::vector<BundleIssue> check_invariants(const EmbeddingBundle& b) {
  std::vector<BundleIssue> issues;
  auto add = [&](std::string msg) { issues.push_back({ErrorCode::InvariantViolation, std::move(msg)}); };
  const Eigen::Index n = b.num_images();
  const Eigen::Index l = b.dimension();
  const Eigen::Index m = b.num_classes();
  const Eigen::Index ups = b.captions_per_image;

  if (n < 1) add("bundle has no images");
  if (l < 1) add("embedding dimension must be >= 1");
  if (m < 2) add("bundle needs at least two classes, has " + std::to_string(m));
  if (ups < 1) add("captions per image must be >= 1");
  if (b.caption_embeddings.rows() != n * ups || (b.caption_embeddings.size() > 0 && b.caption_embeddings.cols() != l)) {
    add("caption matrix must hold exactly upsilon = " + std::to_string(ups) + " captions of dimension " +
        std::to_string(l) + " per image");
  }
  const std::uint64_t total = std::accumulate(b.member_counts.begin(), b.member_counts.end(), std::uint64_t{0});
  if (static_cast<std::uint64_t>(b.prototype_members.rows()) != total ||
      (b.prototype_members.size() > 0 && b.prototype_members.cols() != l)) {
    add("prototype member matrix does not match the member-count table");
  }
  for (std::size_t c = 0; c < b.member_counts.size(); ++c) {
    if (b.member_counts[c] == 0) add("class " + std::to_string(c) + " has no prototype members");
    if (b.reduction == Reduction::single && b.member_counts[c] > 1) {
      add("class " + std::to_string(c) + " has " + std::to_string(b.member_counts[c]) +
          " members under single reduction");
    }
  }
  if (static_cast<Eigen::Index>(b.labels.size()) != n) add("label count does not match image count");
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    if (static_cast<Eigen::Index>(b.labels[i]) >= m) {
      add("sample " + std::to_string(i) + " has label " + std::to_string(b.labels[i]) + " outside [0, " +
          std::to_string(m) + ")");
    }
  }
  if (static_cast<Eigen::Index>(b.class_names.size()) != m) add("class name count does not match class count");
  if (!b.caption_texts.empty() && static_cast<Eigen::Index>(b.caption_texts.size()) != n * ups) {
    add("caption text count must be zero or N * upsilon");
  }
  if (!std::isfinite(b.temperature_hint) || !(b.temperature_hint > 0)) add("temperature hint must be finite and > 0");
  check_finite(b.image_embeddings, "image embedding", issues);
  check_finite(b.caption_embeddings, "caption embedding", issues);
  check_finite(b.prototype_members, "prototype member", issues);
  return issues;
}

std::vector<std::uint8_t> encode_bundle(const EmbeddingBundle& b) {
  if (const auto issues = check_invariants(b); !issues.empty()) throw Error(issues.front().code, issues.front().message);

  Writer w;
  w.bytes(kBundleMagic, 4);
  w.pod(kBundleVersion);
  w.pod(std::uint32_t{0});
  w.pod(b.caption_texts.empty() ? std::uint32_t{0} : kFlagCaptionTexts);
  w.u32(b.dimension());
  w.u32(b.num_images());
  w.u32(b.captions_per_image);
  w.u32(b.num_classes());
  for (const auto c : b.member_counts) w.pod(c);
  w.pod(static_cast<std::uint8_t>(b.reduction));
  w.pod(b.temperature_hint);
  w.floats(b.image_embeddings);
  w.floats(b.caption_embeddings);
  w.floats(b.prototype_members);
  for (const auto label : b.labels) w.pod(label);
  for (const auto& name : b.class_names) w.string(name);
  for (const auto& text : b.caption_texts) w.string(text);

  nlohmann::json manifest = manifest_to_json(b.manifest);
  manifest["payload_checksum"] = hex64(crc64(w.buffer()));
  w.string(manifest.dump());
  w.pod(crc64(w.buffer()));
  return std::move(w.buffer());
}

std::vector<BundleIssue> validate_bundle_bytes(std::span<const std::uint8_t> bytes) {
  std::vector<BundleIssue> issues;
  constexpr std::size_t kMinimum = 32 + 1 + 8 + 4 + 8;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kBundleMagic, 4) != 0) {
    issues.push_back({ErrorCode::BadMagic, "file does not start with ICEB"});
    return issues;
  }
  if (bytes.size() < kMinimum) {
    issues.push_back({ErrorCode::IO, "file is " + std::to_string(bytes.size()) + " bytes, shorter than any bundle"});
    return issues;
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kBundleVersion) {
    issues.push_back({ErrorCode::VersionUnsupported, "bundle version " + std::to_string(version) + " (supported: 1)"});
    return issues;
  }
  const auto body = bytes.first(bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  const std::uint64_t actual = crc64(body);
  if (stored != actual) {
    issues.push_back({ErrorCode::ChecksumMismatch, "file checksum " + hex64(stored) + " != computed " + hex64(actual)});
  }

  Parsed parsed;
  try {
    parsed = parse_structure(bytes);
  } catch (const Error& e) {
    issues.push_back({e.code(), e.what()});
    return issues;
  }
  if (parsed.stored_payload_checksum != hex64(parsed.payload_checksum)) {
    issues.push_back({ErrorCode::ChecksumMismatch, "manifest payload checksum '" + parsed.stored_payload_checksum +
                                                       "' != computed " + hex64(parsed.payload_checksum)});
  }
  for (auto& issue : check_invariants(parsed.bundle)) issues.push_back(std::move(issue));
  return issues;
}

EmbeddingBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  if (const auto issues = validate_bundle_bytes(bytes); !issues.empty()) {
    throw Error(issues.front().code, issues.front().message);
  }
  return parse_structure(bytes).bundle;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IO, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::IO, "error reading " + path.string());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IO, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw Error(ErrorCode::IO, "error writing " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorCode::IO, "cannot move output into place at " + path.string());
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& path) {
  write_file_atomic(path, encode_bundle(bundle));
}

EmbeddingBundle read_bundle(const std::filesystem::path& path) { return decode_bundle(read_file_bytes(path)); }

ClassPrototypeSet<double> bundle_prototypes(const EmbeddingBundle& bundle, std::optional<Reduction> reduction) {
  const RowMatrixXd packed = bundle.prototype_members.cast<double>();
  const std::vector<Eigen::Index> counts(bundle.member_counts.begin(), bundle.member_counts.end());
  return build_prototypes(split_members(packed, counts), reduction.value_or(bundle.reduction), bundle.class_names);
}

}  // namespace ice
