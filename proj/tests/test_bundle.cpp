#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <random>

#include "bundle_util.hpp"
#include "ice/eval.hpp"

using namespace ice;
using testutil::Bytes;

namespace {

SynthSpec small_spec() {
  SynthSpec s;
  s.num_images = 2;
  s.num_classes = 5;
  s.dimension = 8;
  s.captions_per_image = 3;
  s.seed = 17;
  return s;
}

bool has_code(const std::vector<BundleIssue>& issues, ErrorCode code) {
  for (const auto& i : issues) {
    if (i.code == code) return true;
  }
  return false;
}

double accuracy(const EvalReport& r, const char* method) { return r.find(method)->top1; }

}  // namespace

TEST_CASE("crc64 is CRC-64/XZ") {
  const std::string check = "123456789";
  CHECK(crc64(std::span(reinterpret_cast<const std::uint8_t*>(check.data()), check.size())) == 0x995DC9BBDF1939FAULL);
  CHECK(crc64({}) == 0);
}

TEST_CASE("round trip is bitwise") {
  for (const bool texts : {false, true}) {
    auto spec = small_spec();
    spec.caption_texts = texts;
    spec.members_per_class = 2;
    spec.member_noise = 0.1;
    spec.reduction = Reduction::score_mean;
    spec.temperature_hint = 100.0;
    spec.group = "cross_dataset";
    const auto b = synth_bundle(spec);
    const Bytes bytes = encode_bundle(b);
    const auto d = decode_bundle(bytes);
    CHECK(d.image_embeddings == b.image_embeddings);
    CHECK(d.caption_embeddings == b.caption_embeddings);
    CHECK(d.prototype_members == b.prototype_members);
    CHECK(d.member_counts == b.member_counts);
    CHECK(d.reduction == Reduction::score_mean);
    CHECK(d.temperature_hint == 100.0);
    CHECK(d.labels == b.labels);
    CHECK(d.class_names == b.class_names);
    CHECK(d.caption_texts == b.caption_texts);
    CHECK(d.caption_texts.empty() != texts);
    CHECK(d.manifest.group == "cross_dataset");
    CHECK(d.manifest.extra == b.manifest.extra);
    CHECK(encode_bundle(d) == bytes);
  }
}

TEST_CASE("file layout has the documented size and offsets") {
  const auto b = synth_bundle(small_spec());
  const Bytes bytes = encode_bundle(b);
  CHECK(std::memcmp(bytes.data(), "ICEB", 4) == 0);
  CHECK(testutil::read_u32(bytes, 4) == 1);
  CHECK(testutil::read_u32(bytes, 8) == 0);
  CHECK(testutil::read_u32(bytes, 12) == 0);
  CHECK(testutil::read_u32(bytes, 16) == 8);
  CHECK(testutil::read_u32(bytes, 20) == 2);
  CHECK(testutil::read_u32(bytes, 24) == 3);
  CHECK(testutil::read_u32(bytes, 28) == 5);

  // header 16, shape 16, counts 4m, tag 1, tau 8, floats 4(Nl + N*ups*l + ml), labels 4N
  const std::size_t core = 16 + 16 + 4 * 5 + 1 + 8 + 4 * (2 * 8 + 2 * 3 * 8 + 5 * 8) + 4 * 2;
  CHECK(core == 485);
  std::size_t names = 0;
  for (const auto& n : b.class_names) names += 4 + n.size();
  const std::size_t manifest_at = core + names;
  const std::uint32_t manifest_len = testutil::read_u32(bytes, manifest_at);
  CHECK(bytes.size() == manifest_at + 4 + manifest_len + 8);
  const auto j = nlohmann::json::parse(bytes.begin() + manifest_at + 4, bytes.begin() + manifest_at + 4 + manifest_len);
  CHECK(j.at("dataset") == "synthetic");
  CHECK(j.at("payload_checksum").get<std::string>().size() == 16);
  CHECK(testutil::manifest_offset(bytes) == manifest_at);

  std::uint64_t trailer;
  std::memcpy(&trailer, bytes.data() + bytes.size() - 8, 8);
  CHECK(trailer == crc64(std::span(bytes).first(bytes.size() - 8)));
}

TEST_CASE("invalid bundles are rejected before encoding") {
  auto b = synth_bundle(small_spec());
  b.image_embeddings(1, 3) = std::numeric_limits<float>::quiet_NaN();
  try {
    encode_bundle(b);
    FAIL("expected InvariantViolation");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvariantViolation);
    CHECK(std::string(e.what()).find("image embedding row 1") != std::string::npos);
  }

  auto c = synth_bundle(small_spec());
  c.labels[1] = 5;
  const auto issues = check_invariants(c);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].message == "sample 1 has label 5 outside [0, 5)");
}

TEST_CASE("damaged files are rejected with the right code") {
  const Bytes good = encode_bundle(synth_bundle(small_spec()));
  REQUIRE(validate_bundle_bytes(good).empty());

  SUBCASE("truncation") {
    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, std::size_t{100}, good.size() - 1}) {
      const Bytes t(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
      CHECK_FALSE(validate_bundle_bytes(t).empty());
      CHECK_THROWS_AS(decode_bundle(t), Error);
    }
  }
  SUBCASE("magic") {
    Bytes b = good;
    b[0] = 'X';
    CHECK(validate_bundle_bytes(b).front().code == ErrorCode::BadMagic);
  }
  SUBCASE("version") {
    Bytes b = good;
    testutil::write_u32(b, 4, 2);
    testutil::reseal(b);
    const auto issues = validate_bundle_bytes(b);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].code == ErrorCode::VersionUnsupported);
  }
  SUBCASE("reserved word and unknown flags") {
    Bytes b = good;
    testutil::write_u32(b, 8, 1);
    testutil::reseal(b);
    auto issues = validate_bundle_bytes(b);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].message.ends_with("reserved header word is 1, expected 0"));
    b = good;
    testutil::write_u32(b, 12, 4);
    testutil::reseal(b);
    issues = validate_bundle_bytes(b);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].code == ErrorCode::InvariantViolation);
    CHECK(issues[0].message.ends_with("unknown header flags 4"));
  }
  SUBCASE("label out of range after resealing") {
    Bytes b = good;
    const std::size_t labels_at = 485 - 8;
    testutil::write_u32(b, labels_at + 4, 7);
    testutil::reseal(b);
    const auto issues = validate_bundle_bytes(b);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].code == ErrorCode::InvariantViolation);
    CHECK(issues[0].message == "sample 1 has label 7 outside [0, 5)");
  }
  SUBCASE("payload edited without resealing the manifest") {
    Bytes b = good;
    b[100] ^= 0x40;
    const std::uint64_t crc = crc64(std::span(b).first(b.size() - 8));
    std::memcpy(b.data() + b.size() - 8, &crc, 8);
    const auto issues = validate_bundle_bytes(b);
    REQUIRE(issues.size() == 1);
    CHECK(issues[0].code == ErrorCode::ChecksumMismatch);
  }
  SUBCASE("every single-byte corruption is detected") {
    std::mt19937_64 rng(99);
    for (std::size_t at = 0; at < good.size(); ++at) {
      Bytes b = good;
      b[at] ^= static_cast<std::uint8_t>(1 + rng() % 255);
      const auto issues = validate_bundle_bytes(b);
      CHECK_FALSE(issues.empty());
      if (at >= 8) CHECK(has_code(issues, ErrorCode::ChecksumMismatch));
    }
  }
}

TEST_CASE("files on disk") {
  testutil::TempDir dir;
  const auto b = synth_bundle(small_spec());
  write_bundle(b, dir / "a.iceb");
  CHECK_FALSE(std::filesystem::exists(dir / "a.iceb.tmp"));
  CHECK(read_bundle(dir / "a.iceb").labels == b.labels);
  try {
    read_bundle(dir / "missing.iceb");
    FAIL("expected IO");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IO);
  }
  CHECK_THROWS_AS(write_bundle(b, dir / "no_such_dir" / "b.iceb"), Error);
  CHECK_FALSE(std::filesystem::exists(dir / "no_such_dir"));
}

TEST_CASE("synthetic generator") {
  SUBCASE("deterministic in the seed") {
    CHECK(encode_bundle(synth_bundle(small_spec())) == encode_bundle(synth_bundle(small_spec())));
    auto other = small_spec();
    other.seed = 18;
    CHECK(encode_bundle(synth_bundle(other)) != encode_bundle(synth_bundle(small_spec())));
  }
  SUBCASE("embeddings are unit norm and shapes match") {
    SynthSpec s;
    s.num_images = 50;
    s.members_per_class = 3;
    s.member_noise = 0.2;
    s.reduction = Reduction::centroid;
    const auto b = synth_bundle(s);
    CHECK(b.num_images() == 50);
    CHECK(b.caption_embeddings.rows() == 150);
    CHECK(b.prototype_members.rows() == 30);
    CHECK((b.image_embeddings.rowwise().norm().array() - 1.0f).abs().maxCoeff() < 1e-5f);
    CHECK((b.caption_embeddings.rowwise().norm().array() - 1.0f).abs().maxCoeff() < 1e-5f);
    CHECK(check_invariants(b).empty());
  }
  SUBCASE("pure captions are always right") {
    SynthSpec s;
    s.num_images = 500;
    s.caption_signal = 1.0;
    s.caption_noise = 0.0;
    const auto r = evaluate(synth_bundle(s), IceConfig{});
    CHECK(accuracy(r, "caption_only") == 100.0);
  }
  SUBCASE("distractor-only captions sit at chance") {
    SynthSpec s;
    s.num_images = 3000;
    s.num_classes = 10;
    s.caption_signal = 0.0;
    const auto r = evaluate(synth_bundle(s), IceConfig{});
    const double p = 0.1, se = std::sqrt(p * (1 - p) / 3000) * 100;
    CHECK(std::abs(accuracy(r, "caption_only") - 10.0) < 3 * se);
  }
  SUBCASE("invalid specs") {
    auto s = small_spec();
    s.num_classes = 1;
    CHECK_THROWS_AS(validate(s), Error);
    s = small_spec();
    s.caption_signal = 1.5;
    CHECK_THROWS_AS(synth_bundle(s), Error);
    s = small_spec();
    s.reduction = Reduction::single;
    s.members_per_class = 2;
    CHECK_THROWS_AS(synth_bundle(s), Error);
  }
}

TEST_CASE("bundle prototypes honour a reduction override") {
  auto s = small_spec();
  s.members_per_class = 4;
  s.member_noise = 0.3;
  s.reduction = Reduction::score_mean;
  const auto b = synth_bundle(s);
  CHECK(bundle_prototypes(b).members().rows() == 20);
  CHECK(bundle_prototypes(b, Reduction::centroid).members().rows() == 5);
}
