#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "ice/eval.hpp"

using namespace ice;

namespace {

SynthSpec spec(int n, int m, double image_noise, double caption_noise, std::uint64_t seed) {
  SynthSpec s;
  s.num_images = n;
  s.num_classes = m;
  s.dimension = 32;
  s.captions_per_image = 4;
  s.image_noise = image_noise;
  s.caption_noise = caption_noise;
  s.temperature_hint = 30.0;
  s.seed = seed;
  return s;
}

IceConfig cfg_with(int K, double tau = 30.0) {
  IceConfig c;
  c.K = K;
  c.tau = tau;
  return c;
}

double top1(const EvalReport& r, const char* name) {
  const auto* m = r.find(name);
  REQUIRE(m != nullptr);
  return m->top1;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("method parsing") {
  CHECK(Method::parse("ice").name() == "ice");
  CHECK(Method::parse("caption_only:centroid").name() == "caption_only:centroid");
  CHECK(Method::parse("ice:score_mean").reduction == Reduction::score_mean);
  CHECK_THROWS_AS(Method::parse("both"), Error);
  CHECK_THROWS_AS(Method::parse("ice:median"), Error);
  CHECK(default_methods().size() == 3);
}

TEST_CASE("quadrants account for every sample and the accuracy difference") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto b = synth_bundle(spec(400, 10, 1.5, 1.0, seed));
    const auto r = evaluate(b, cfg_with(5));
    const auto& q = r.quadrants;
    CHECK(q.total() == r.num_samples);
    const auto ice_correct = static_cast<long>(r.find("ice")->correct);
    const auto image_correct = static_cast<long>(r.find("image_only")->correct);
    CHECK(long(q.fixed) - long(q.broken) == ice_correct - image_correct);
    CHECK(long(q.fixed + q.kept_right) == ice_correct);
  }
}

TEST_CASE("image Top-K accuracy is monotone and complete at K = m") {
  const auto b = synth_bundle(spec(500, 12, 2.0, 1.0, 3));
  EvalOptions opt;
  opt.report_ks = {1, 2, 3, 5, 8, 12};
  const auto r = evaluate(b, cfg_with(5), opt);
  REQUIRE(r.top_k.size() == 6);
  for (std::size_t i = 1; i < r.top_k.size(); ++i) CHECK(r.top_k[i].accuracy >= r.top_k[i - 1].accuracy);
  CHECK(r.top_k.back().accuracy == 100.0);
  CHECK(r.top_k.front().correct == r.find("image_only")->correct);
}

TEST_CASE("Top-K accuracy of uninformative scores is K/m") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  const Eigen::Index n = 4000, m = 10;
  ScoredSamples s;
  s.image.resize(n, m);
  s.caption.resize(n, m);
  s.fallback.assign(n, 0);
  std::vector<std::uint32_t> labels(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    VectorXd a(m), c(m);
    for (auto& x : a) x = g(rng);
    for (auto& x : c) x = g(rng);
    s.image.row(i) = softmax(a, 1.0).probs().transpose();
    s.caption.row(i) = softmax(c, 1.0).probs().transpose();
    labels[i] = static_cast<std::uint32_t>(rng() % m);
  }
  const auto records = run_ice(s, labels, cfg_with(5, 1.0));
  const double se = 100.0 * std::sqrt(0.25 / double(n));
  CHECK(std::abs(top_k_accuracy(records, 5) - 50.0) < 3 * se);
  CHECK(top_k_accuracy(records, 10) == 100.0);
}

TEST_CASE("ICE with K = 1 is image-only") {
  const auto b = synth_bundle(spec(600, 10, 1.5, 0.5, 4));
  const auto r = evaluate(b, cfg_with(1));
  CHECK(top1(r, "ice") == top1(r, "image_only"));
  CHECK(r.quadrants.fixed == 0);
  CHECK(r.quadrants.broken == 0);
  for (const auto& rec : r.records) CHECK(rec.ice_prediction == rec.image_argmax);
}

TEST_CASE("ablation rows agree with direct evaluation") {
  const auto b = synth_bundle(spec(500, 10, 1.5, 1.0, 5));
  const IceConfig base = cfg_with(5);

  SUBCASE("upsilon") {
    const auto grid =
        ablate(b, base, AblationAxis::upsilon, {AxisValue::parse(AblationAxis::upsilon, "1"), AxisValue{4.0, false}});
    for (const auto& row : grid.rows) {
      IceConfig c = base;
      c.upsilon = int(row.value.value);
      CHECK(row.top1 == top1(evaluate(b, c), "ice"));
    }
    CHECK_THROWS_AS(ablate(b, base, AblationAxis::upsilon, {AxisValue{5.0, false}}), Error);
  }
  SUBCASE("K") {
    const auto grid = ablate(b, base, AblationAxis::K,
                             {AxisValue{1.0, false}, AxisValue{4.0, false}, AxisValue{5.0, false}, AxisValue{0, true}});
    REQUIRE(grid.rows.size() == 4);
    const auto r = evaluate(b, base);
    CHECK(grid.rows[0].top1 == top1(r, "image_only"));
    CHECK(grid.rows[2].top1 == top1(r, "ice"));
    CHECK(grid.rows[3].top1 == top1(evaluate(b, cfg_with(10)), "ice"));
    CHECK(grid.rows[3].value.label() == "max");
    CHECK_THROWS_AS(ablate(b, base, AblationAxis::K, {AxisValue{1.5, false}}), Error);
  }
  SUBCASE("xi pairs adaptive and fixed lambda") {
    const auto grid = ablate(b, base, AblationAxis::xi, {AxisValue{0.0, false}, AxisValue{0.08, false}});
    const auto r = evaluate(b, base);
    CHECK(grid.rows[0].top1 == top1(r, "image_only"));
    CHECK(*grid.rows[0].top1_fixed == top1(r, "image_only"));
    CHECK(grid.rows[1].top1 == top1(r, "ice"));
    IceConfig fixed = base;
    fixed.lambda_mode = LambdaMode::fixed;
    fixed.lambda = 0.08;
    CHECK(*grid.rows[1].top1_fixed == top1(evaluate(b, fixed), "ice"));
  }
  SUBCASE("lambda_fixed") {
    const auto grid = ablate(b, base, AblationAxis::lambda_fixed, {AxisValue{0.0, false}});
    CHECK(grid.rows[0].top1 == top1(evaluate(b, base), "image_only"));
    CHECK_FALSE(grid.rows[0].top1_fixed.has_value());
  }
}

TEST_CASE("axis values") {
  CHECK(AxisValue::parse(AblationAxis::K, "max").is_max);
  CHECK(AxisValue::parse(AblationAxis::xi, "0.04").value == 0.04);
  CHECK(AxisValue::parse(AblationAxis::xi, "0.04").label() == "0.04");
  CHECK_THROWS_AS(AxisValue::parse(AblationAxis::xi, "max"), Error);
  CHECK_THROWS_AS(AxisValue::parse(AblationAxis::K, "4x"), Error);
  CHECK(parse_axis("lambda_fixed") == AblationAxis::lambda_fixed);
  CHECK_FALSE(parse_axis("tau").has_value());

  AblationGrid g;
  g.axis = AblationAxis::xi;
  g.rows.push_back({AxisValue{0.02, false}, 61.5, 60.25});
  g.rows.push_back({AxisValue{0.16, false}, 62.0, std::nullopt});
  CHECK(g.to_csv() == "axis,value,top1,top1_fixed\nxi,0.02,61.500000,60.250000\nxi,0.16,62.000000,\n");
}

TEST_CASE("captions rescue samples the image gets wrong") {
  SynthSpec s = spec(2000, 10, 3.0, 0.3, 6);
  s.caption_signal = 1.0;
  const auto r = evaluate(synth_bundle(s), cfg_with(5));
  CHECK(r.quadrants.fixed > r.quadrants.broken);
  CHECK(top1(r, "ice") > top1(r, "image_only"));
}

TEST_CASE("uninformative captions cannot hurt perfect images") {
  SynthSpec s = spec(1000, 10, 0.0, 0.0, 15);
  s.caption_signal = 0.0;
  const auto r = evaluate(synth_bundle(s), cfg_with(5));
  CHECK(top1(r, "image_only") == 100.0);
  CHECK(top1(r, "ice") == 100.0);
}

TEST_CASE("image-only lambda mode leaves every prediction in place") {
  const auto b = synth_bundle(spec(500, 10, 2.0, 1.0, 16));
  IceConfig c = cfg_with(5);
  c.lambda_mode = LambdaMode::image_only;
  const auto r = evaluate(b, c);
  CHECK(r.quadrants.fixed == 0);
  CHECK(r.quadrants.broken == 0);
  CHECK(top1(r, "ice") == top1(r, "image_only"));
}

TEST_CASE("a caption weight of 0.08 beats no caption weight on informative captions") {
  // seed 17: 79.23% at 0 against 80.33% at 0.08
  SynthSpec s = spec(3000, 20, 2.0, 1.0, 17);
  s.caption_signal = 0.8;
  const auto grid = ablate(synth_bundle(s), cfg_with(5), AblationAxis::xi, {AxisValue{0.0, false}, AxisValue{0.08, false}});
  CHECK(grid.rows[1].top1 - grid.rows[0].top1 >= 1.0);
}

TEST_CASE("results do not depend on the worker count") {
  const auto b = synth_bundle(spec(300, 8, 1.5, 1.0, 7));
  EvalOptions one, many;
  one.workers = 1;
  many.workers = 4;
  const auto a = evaluate(b, cfg_with(4), one);
  const auto c = evaluate(b, cfg_with(4), many);
  REQUIRE(a.records.size() == c.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].ice_prediction == c.records[i].ice_prediction);
    CHECK(a.records[i].lambda == c.records[i].lambda);
    CHECK(a.records[i].fused_scores == c.records[i].fused_scores);
  }
  CHECK(report_csv_rows(a) == report_csv_rows(c));
  CHECK(ablate(b, cfg_with(4), AblationAxis::upsilon, {AxisValue{2, false}}, 1).to_csv() ==
        ablate(b, cfg_with(4), AblationAxis::upsilon, {AxisValue{2, false}}, 3).to_csv());
}

TEST_CASE("degenerate caption centroids fall back to the image prediction") {
  auto b = synth_bundle(spec(50, 5, 1.0, 1.0, 9));
  b.caption_embeddings.middleRows(0, 4).setZero();
  b.caption_embeddings.row(8) = -b.caption_embeddings.row(9);
  const auto r = evaluate(b, cfg_with(5));
  CHECK(r.fallbacks == 1);
  CHECK(r.records[0].fallback);
  CHECK_FALSE(r.records[2].fallback);
  CHECK(r.records[0].caption_argmax == -1);
  CHECK(r.records[0].ice_prediction == r.records[0].image_argmax);
  CHECK(r.records[0].lambda == 0.0);

  std::size_t caption_right = 0;
  for (const auto& rec : r.records) caption_right += !rec.fallback && rec.caption_argmax == rec.label;
  CHECK(r.find("caption_only")->correct == caption_right);

  IceConfig two = cfg_with(5);
  two.upsilon = 2;
  const auto r2 = evaluate(b, two);
  CHECK(r2.fallbacks == 2);
  CHECK(r2.records[2].fallback);
}

TEST_CASE("reduction override methods") {
  SynthSpec s = spec(300, 6, 1.5, 1.0, 10);
  s.members_per_class = 3;
  s.member_noise = 0.5;
  s.reduction = Reduction::score_mean;
  const auto b = synth_bundle(s);
  EvalOptions opt;
  opt.methods = {Method::parse("ice"), Method::parse("ice:score_mean"), Method::parse("ice:centroid"),
                 Method::parse("image_only:centroid")};
  const auto r = evaluate(b, cfg_with(3), opt);
  CHECK(top1(r, "ice") == top1(r, "ice:score_mean"));
  CHECK(r.reduction == Reduction::score_mean);

  SynthSpec c = s;
  c.reduction = Reduction::centroid;
  const auto rc = evaluate(synth_bundle(c), cfg_with(3));
  CHECK(top1(r, "ice:centroid") == top1(rc, "ice"));
  CHECK(top1(r, "image_only:centroid") == top1(rc, "image_only"));
}

TEST_CASE("configuration edge cases") {
  const auto b = synth_bundle(spec(40, 5, 1.0, 1.0, 11));
  const auto r = evaluate(b, cfg_with(8));
  REQUIRE(r.warnings.size() == 1);
  CHECK(r.warnings[0].find("K=8") != std::string::npos);
  CHECK(r.config.upsilon == 4);

  IceConfig too_many = cfg_with(5);
  too_many.upsilon = 5;
  try {
    evaluate(b, too_many);
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidConfig);
    CHECK(std::string(e.what()).find("upsilon") != std::string::npos);
  }
  EvalOptions bad;
  bad.report_ks = {0};
  CHECK_THROWS_AS(evaluate(b, cfg_with(5), bad), Error);
}

TEST_CASE("report tables") {
  SynthSpec s = spec(60, 5, 1.0, 1.0, 12);
  s.group = "cross_dataset";
  s.dataset = "alpha";
  const auto ra = evaluate(synth_bundle(s), cfg_with(5));
  s.dataset = "beta";
  s.seed = 13;
  const auto rb = evaluate(synth_bundle(s), cfg_with(5));

  const std::string header = report_csv_header();
  CHECK(std::count(header.begin(), header.end(), ',') == 13);
  const std::string rows = report_csv_rows(ra);
  CHECK(lines(rows) == 5);
  std::istringstream in(rows);
  std::string line;
  while (std::getline(in, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == 13);
    CHECK(line.rfind("alpha,cross_dataset,", 0) == 0);
  }
  CHECK(rows.find("alpha,cross_dataset,image_top5,100.000000,60,60,0,5,0.08,1e-12,adaptive,0,30,4\n") !=
        std::string::npos);

  const auto avg = group_averages({ra, rb});
  REQUIRE(avg.size() == 3);
  CHECK(avg[2].method == "ice");
  CHECK(avg[2].bundles == 2);
  CHECK(avg[2].top1 == doctest::Approx((top1(ra, "ice") + top1(rb, "ice")) / 2));

  const auto j = report_to_json(ra);
  CHECK(j.at("records").size() == 60);
  CHECK(j.at("config").at("upsilon") == 4);
  CHECK_FALSE(report_to_json(ra, false).contains("records"));
}

TEST_CASE("quadrant exemplars carry their captions") {
  SynthSpec s = spec(200, 6, 2.0, 0.5, 14);
  s.caption_texts = true;
  const auto b = synth_bundle(s);
  const auto r = evaluate(b, cfg_with(5));
  const auto q = quadrant_report(r.records, b.caption_texts, b.captions_per_image, 3);
  CHECK(q.counts.total() == 200);
  CHECK(q.kept_right.size() == std::min<std::size_t>(3, q.counts.kept_right));
  for (const auto& e : q.kept_right) {
    CHECK(e.image_argmax == e.label);
    REQUIRE(e.captions.size() == 4);
    CHECK(e.captions[0] == b.caption_texts[e.sample * 4]);
  }
  for (std::size_t i = 1; i < q.kept_right.size(); ++i) CHECK(q.kept_right[i].sample > q.kept_right[i - 1].sample);
  CHECK(quadrant_report(r.records, {}, 4).kept_right.front().captions.empty());
}
