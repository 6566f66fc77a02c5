#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "headaudit/audit.hpp"
#include "headaudit/error.hpp"
#include "headaudit/report.hpp"
#include "headaudit/synth.hpp"
#include "support.hpp"

using namespace headaudit;

namespace {

AuditConfig small_config(unsigned workers = 2) {
  AuditConfig c;
  c.attribute = "gender";
  c.grid.gap_max = 0.05;
  c.grid.gap_step = 0.005;
  c.grid.occ_max = 0.3;
  c.grid.occ_step = 0.05;
  c.textspan.k = 10;
  c.control.n_seeds = 3;
  c.workers = workers;
  return c;
}

const SynthOutput& planted() {
  static const SynthOutput out = generate(testing::small_spec(11), 2);
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = small_config();
  CHECK_NOTHROW(c.validate());
  c.attribute.clear();
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.stats.alpha = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.control.n_seeds = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.attribute = "race";
  const auto& out = planted();
  CHECK_THROWS_AS(run_audit(out.store, out.prototypes, out.classifier, c), Error);
}

TEST_CASE("full audit recovers the planted heads") {
  const auto& out = planted();
  const auto report = run_audit(out.store, out.prototypes, out.classifier, small_config());
  CHECK(report.suspected_heads() == out.truth.planted);
  REQUIRE(report.suspected.has_value());
  REQUIRE(report.suspected->delta_v.has_value());
  CHECK(*report.suspected->delta_v < -0.1);
  CHECK(report.suspected->n_correct >= report.baseline_correct);
  CHECK(report.candidates.size() == 2);
  for (const auto& cand : report.candidates) {
    CHECK_FALSE(cand.evidence.empty());
    CHECK(cand.textspan.selected.size() == 10);
  }
  // Attribution covers every baseline-significant class.
  CHECK(report.attribution.size() == report.baseline.n_significant());
  REQUIRE(report.control.has_value());
  CHECK(report.control->runs.size() == 3);
  CHECK(report.control->excluded == out.truth.planted);
  for (const auto& run : report.control->runs) {
    CHECK(layer_profile(run.heads) == layer_profile(out.truth.planted));
    for (const auto& h : run.heads) {
      CHECK(std::find(out.truth.planted.begin(), out.truth.planted.end(), h) ==
            out.truth.planted.end());
    }
  }
  CHECK(std::abs(report.control->mean_delta_v) < std::abs(*report.suspected->delta_v) / 10);
  REQUIRE(report.cross.size() == 1);
  CHECK(report.cross[0].attribute == "age");
}

TEST_CASE("audit output is a pure function of its inputs") {
  const auto& out = planted();
  const auto a = run_audit(out.store, out.prototypes, out.classifier, small_config(1));
  const auto b = run_audit(out.store, out.prototypes, out.classifier, small_config(3));
  CHECK(report_to_json(a).dump() == report_to_json(b).dump());
  CHECK(report_to_text(a) == report_to_text(b));
  CHECK(grid_trace_csv(a.grid) == grid_trace_csv(b.grid));
}

TEST_CASE("nothing planted means nothing suspected") {
  auto s = testing::small_spec(12);
  for (auto& p : s.planted) p.lambda = 0.0;
  const auto out = generate(s, 2);
  const auto report = run_audit(out.store, out.prototypes, out.classifier, small_config());
  CHECK(report.suspected_heads().empty());
  CHECK_FALSE(report.suspected.has_value());
  CHECK(report.attribution.empty());
  CHECK_FALSE(report.control.has_value());
  const auto j = report_to_json(report);
  CHECK_FALSE(j.contains("suspected"));
  CHECK_FALSE(j.contains("control"));
  CHECK(j.contains("baseline"));
  CHECK(j.contains("grid"));
  CHECK_NOTHROW(report_to_text(report));
}

TEST_CASE("control head draws") {
  const std::map<std::uint32_t, std::size_t> profile = {{2, 1}, {3, 2}};
  const std::vector<HeadId> exclude = {{3, 0}, {3, 3}};
  for (std::uint64_t run = 0; run < 20; ++run) {
    const auto heads = draw_control_heads(profile, exclude, 4, 7, run);
    CHECK(layer_profile(heads) == profile);
    CHECK(std::is_sorted(heads.begin(), heads.end()));
    for (const auto& h : heads) {
      CHECK(std::find(exclude.begin(), exclude.end(), h) == exclude.end());
    }
    CHECK(heads == draw_control_heads(profile, exclude, 4, 7, run));

    // Oracle for the documented procedure.
    Rng rng(derive_seed(7, run));
    std::vector<HeadId> expect;
    std::vector<HeadId> pool2 = {{2, 0}, {2, 1}, {2, 2}, {2, 3}};
    rng.shuffle(std::span<HeadId>(pool2));
    expect.push_back(pool2[0]);
    std::vector<HeadId> pool3 = {{3, 1}, {3, 2}};
    rng.shuffle(std::span<HeadId>(pool3));
    expect.insert(expect.end(), pool3.begin(), pool3.end());
    std::sort(expect.begin(), expect.end());
    CHECK(heads == expect);
  }
  // Asking for more heads than a layer has left is an input error.
  const auto e = [&] {
    try {
      (void)draw_control_heads({{3, 3}}, exclude, 4, 0, 0);
    } catch (const Error& err) {
      return err.code();
    }
    return Errc::kFormat;
  }();
  CHECK(e == Errc::kInvalidArgument);
  CHECK_THROWS_AS(draw_control_heads({{1, 5}}, {}, 4, 0, 0), Error);
}

TEST_CASE("random control with one seed has zero spread") {
  const auto& out = planted();
  const AblationEngine engine(out.store, out.classifier, 2);
  PredictionCache cache(engine);
  const auto bias = global_bias(engine.baseline().labels, out.store, "gender");
  ControlConfig cfg;
  cfg.n_seeds = 1;
  const auto r = random_control(cache, layer_profile(out.truth.planted), cfg,
                                out.truth.planted, "gender", bias.significant_classes);
  REQUIRE(r.runs.size() == 1);
  CHECK(r.std_delta_v == 0.0);
  CHECK(r.std_accuracy == 0.0);
  CHECK(r.mean_delta_v == r.runs[0].delta_v);

  // The run's numbers agree with a direct evaluation.
  const auto preds = classify(out.store, out.classifier, head_means(out.store, r.runs[0].heads), 1);
  const auto v = mean_v_over(preds.labels, out.store, bias.significant_classes, "gender");
  CHECK(r.runs[0].delta_v == doctest::Approx(*v - *bias.mean_v).epsilon(1e-12));
  CHECK(r.runs[0].accuracy == doctest::Approx(preds.accuracy(out.store)));

  ControlConfig many;
  many.n_seeds = 4;
  const auto r4 = random_control(cache, layer_profile(out.truth.planted), many,
                                 out.truth.planted, "gender", bias.significant_classes);
  std::vector<double> dv;
  for (const auto& run : r4.runs) dv.push_back(run.delta_v);
  double mean = 0.0;
  for (double x : dv) mean += x / 4.0;
  double var = 0.0;
  for (double x : dv) var += (x - mean) * (x - mean) / 4.0;
  CHECK(r4.mean_delta_v == doctest::Approx(mean));
  CHECK(r4.std_delta_v == doctest::Approx(std::sqrt(var)).epsilon(1e-9));

  // Infeasible profile: H + 1 heads in one layer.
  CHECK_THROWS_AS(random_control(cache, {{3, out.store.n_heads() + 1}}, cfg, {}, "gender",
                                 bias.significant_classes),
                  Error);
}

TEST_CASE("per-head attribution isolates the responsible head") {
  auto s = testing::small_spec(13, 3000);
  s.planted = {{{3, 2}, "gender", "female", 5.0, {0, 2, 4, 6}}};
  const auto out = generate(s, 2);
  const AblationEngine engine(out.store, out.classifier, 2);
  PredictionCache cache(engine);
  const auto bias = global_bias(engine.baseline().labels, out.store, "gender");
  REQUIRE(std::find(bias.significant_classes.begin(), bias.significant_classes.end(), 0u) !=
          bias.significant_classes.end());
  const std::vector<HeadId> heads = {{1, 0}, {3, 2}};
  const auto attr = per_head_attribution(cache, heads, 0, "gender");
  REQUIRE(attr.rows.size() == 2);
  CHECK(attr.rows[0].label == "L3H2");  // most negative first
  CHECK(attr.combined.heads == heads);
  CHECK(attr.combined.delta_v < 0.0);
  CHECK(attr.rows[0].delta_v / attr.combined.delta_v >= 0.9);
  CHECK(std::abs(attr.rows[1].delta_v) < 0.1 * std::abs(attr.combined.delta_v));
  CHECK(attr.baseline_v == doctest::Approx(bias.classes[0].cramers_v));
  // Rates are percentages of each group.
  for (const auto& row : attr.baseline_rates.rates) {
    for (double x : row) CHECK((x >= 0.0 && x <= 100.0));
  }
  CHECK(attr.baseline_rates.columns.front() == 0);

  // A class with no testable table is rejected.
  CHECK_THROWS_AS(per_head_attribution(cache, heads, 0, "gender", {0.05, 100000}), Error);
}

TEST_CASE("redistribution columns") {
  ContingencyTable t;
  t.true_class = 1;
  t.group_names = {"a", "b"};
  t.counts = RowMatrix<std::uint64_t>(2, 5);
  // group a: class 1 most, then 3, then 0, then 4
  t.counts(0, 1) = 50;
  t.counts(0, 3) = 9;
  t.counts(0, 0) = 5;
  t.counts(0, 4) = 1;
  // group b: 4 and 3 tie at 7; the lower class index comes first
  t.counts(1, 1) = 20;
  t.counts(1, 4) = 7;
  t.counts(1, 3) = 7;
  CHECK(redistribution_columns(t) == std::vector<std::uint32_t>{1, 3, 0, 4});
  const auto r = redistribution(t, {1, 3});
  CHECK(r.rates[0][0] == doctest::Approx(100.0 * 50 / 65));
  CHECK(r.rates[1][1] == doctest::Approx(100.0 * 7 / 34));
}

TEST_CASE("ablation summary agrees with direct computation") {
  const auto& out = planted();
  const AblationEngine engine(out.store, out.classifier, 2);
  PredictionCache cache(engine);
  const auto bias = global_bias(engine.baseline().labels, out.store, "gender");
  const auto sum = summarize_ablation(cache, out.truth.planted, bias, "gender");
  const auto preds = classify(out.store, out.classifier, head_means(out.store, out.truth.planted), 1);
  CHECK(sum.n_correct == preds.n_correct(out.store));
  CHECK(*sum.mean_v ==
        doctest::Approx(*mean_v_over(preds.labels, out.store, bias.significant_classes, "gender")));
  CHECK(*sum.delta_v == doctest::Approx(*sum.mean_v - *bias.mean_v));
  CHECK(sum.delta_accuracy ==
        doctest::Approx(preds.accuracy(out.store) - engine.baseline().accuracy(out.store)));
  CHECK(sum.classes.size() == 8);
  // The cache hands back the same object on a repeat request.
  CHECK(&cache.get(out.truth.planted) == &cache.get(out.truth.planted));
  CHECK(&cache.get({}) == &engine.baseline());
}
