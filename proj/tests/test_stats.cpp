#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "headaudit/error.hpp"
#include "headaudit/stats.hpp"
#include "headaudit/synth.hpp"
#include "support.hpp"

using namespace headaudit;

namespace {

RowMatrix<std::uint64_t> table(const std::vector<std::vector<std::uint64_t>>& rows) {
  RowMatrix<std::uint64_t> m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
  }
  return m;
}

RowMatrix<std::uint64_t> transpose(const RowMatrix<std::uint64_t>& m) {
  RowMatrix<std::uint64_t> t(m.cols, m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) t(c, r) = m(r, c);
  }
  return t;
}

bool close(double a, double b, double rel) {
  return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), 1e-300});
}

// Zero contributions; only labels and the gender column matter.
HeadContributionStore labeled_store(const std::vector<std::uint32_t>& labels,
                                    const std::vector<std::uint32_t>& gender,
                                    std::size_t n_classes) {
  auto m = testing::manifest(labels.size(), 1, 1, 2, n_classes);
  auto t = StoreTensors::zeros(m);
  t.labels = labels;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    t.demographics[i * 2] = gender[i];
    t.demographics[i * 2 + 1] = 2;  // age unknown
  }
  return HeadContributionStore(m, t);
}

nlohmann::json load_fixture() {
  std::ifstream in(std::string(HEADAUDIT_FIXTURE_DIR) + "/stats_oracle.json");
  REQUIRE(in.good());
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("hand-computed chi-squared tables") {
  SUBCASE("2x2 with chi2 = 20") {
    const auto r = chi2_test(table({{30, 10}, {10, 30}}));
    REQUIRE(r);
    CHECK(r->chi2 == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(r->dof == 1);
    CHECK(cramers_v(r->chi2, r->n, r->rows, r->cols_used) == doctest::Approx(0.5));
    CHECK(r->p_value == doctest::Approx(7.744216431044e-06).epsilon(1e-9));
  }
  SUBCASE("perfect association has V = 1") {
    const auto r = chi2_test(table({{10, 0}, {0, 10}}));
    REQUIRE(r);
    CHECK(r->chi2 == doctest::Approx(20.0));
    CHECK(cramers_v(r->chi2, r->n, r->rows, r->cols_used) == doctest::Approx(1.0));
  }
  SUBCASE("identical rows give chi2 = 0 and p = 1") {
    const auto r = chi2_test(table({{5, 5, 5}, {5, 5, 5}}));
    REQUIRE(r);
    CHECK(r->chi2 == doctest::Approx(0.0));
    CHECK(r->p_value == doctest::Approx(1.0));
  }
  SUBCASE("zero columns are dropped before the test") {
    const auto r = chi2_test(table({{30, 0, 10, 0}, {10, 0, 30, 0}}));
    REQUIRE(r);
    CHECK(r->chi2 == doctest::Approx(20.0));
    CHECK(r->dof == 1);
    CHECK(r->dof_before_drop == 3);
    CHECK(r->cols_used == 2);
  }
  SUBCASE("a single nonzero column leaves no degrees of freedom") {
    CHECK_FALSE(chi2_test(table({{0, 7, 0}, {0, 3, 0}})).has_value());
  }
  SUBCASE("one row is rejected") {
    CHECK_THROWS_AS(chi2_test(table({{1, 2, 3}})), Error);
  }
  SUBCASE("critical value") {
    CHECK(chi2_upper_tail(3.841458820694124, 1) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(chi2_upper_tail(0.0, 4) == 1.0);
  }
}

TEST_CASE("independent reference values") {
  const auto fx = load_fixture();
  const double alpha = fx["alpha"];
  std::vector<double> p_values;
  std::size_t n_checked = 0;
  for (const auto& t : fx["tables"]) {
    const auto rows = t["counts"].get<std::vector<std::vector<std::uint64_t>>>();
    const auto r = chi2_test(table(rows));
    REQUIRE(r);
    CHECK(r->dof == t["dof"].get<std::size_t>());
    CHECK(close(r->chi2, t["chi2"], 1e-10));
    CHECK(close(r->p_value, t["p_value"], 1e-10));
    CHECK(close(cramers_v(r->chi2, r->n, r->rows, r->cols_used), t["cramers_v"], 1e-10));
    p_values.push_back(r->p_value);
    ++n_checked;
  }
  CHECK(n_checked == 200);
  const auto bh = bh_correct(p_values, alpha);
  std::size_t i = 0;
  for (const auto& t : fx["tables"]) {
    CHECK(close(bh.adjusted[i], t["p_adjusted"], 1e-10));
    CHECK(bh.significant[i] == t["significant"].get<bool>());
    ++i;
  }
}

TEST_CASE("chi-squared invariances on random tables") {
  Rng rng(77);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t g = 2 + rng.uniform_index(3);
    const std::size_t k = 2 + rng.uniform_index(6);
    RowMatrix<std::uint64_t> m(g, k);
    for (auto& x : m.data) x = 1 + rng.uniform_index(40);
    const auto base = chi2_test(m);
    REQUIRE(base);
    const double v = cramers_v(base->chi2, base->n, base->rows, base->cols_used);

    // Row and column permutations.
    std::vector<std::size_t> rp(g), cp(k);
    std::iota(rp.begin(), rp.end(), 0);
    std::iota(cp.begin(), cp.end(), 0);
    rng.shuffle(std::span<std::size_t>(rp));
    rng.shuffle(std::span<std::size_t>(cp));
    RowMatrix<std::uint64_t> perm(g, k);
    for (std::size_t r = 0; r < g; ++r) {
      for (std::size_t c = 0; c < k; ++c) perm(r, c) = m(rp[r], cp[c]);
    }
    const auto pr = chi2_test(perm);
    CHECK(close(pr->chi2, base->chi2, 1e-9));

    // Scaling every count by s multiplies chi2 by s and leaves V alone.
    const std::uint64_t s = 2 + rng.uniform_index(5);
    auto scaled = m;
    for (auto& x : scaled.data) x *= s;
    const auto sr = chi2_test(scaled);
    CHECK(close(sr->chi2, base->chi2 * static_cast<double>(s), 1e-9));
    CHECK(close(cramers_v(sr->chi2, sr->n, sr->rows, sr->cols_used), v, 1e-9));

    // Transposing keeps both chi2 and V.
    const auto tr = chi2_test(transpose(m));
    CHECK(close(tr->chi2, base->chi2, 1e-9));
    CHECK(tr->dof == base->dof);
    CHECK(close(cramers_v(tr->chi2, tr->n, tr->rows, tr->cols_used), v, 1e-9));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0 + 1e-12);
  }
}

TEST_CASE("Benjamini-Hochberg") {
  SUBCASE("worked example") {
    const std::vector<double> p = {0.5, 0.02, 0.03};
    const auto r = bh_correct(p, 0.05);
    CHECK(r.adjusted[0] == doctest::Approx(0.5));
    CHECK(r.adjusted[1] == doctest::Approx(0.045));
    CHECK(r.adjusted[2] == doctest::Approx(0.045));
    CHECK(r.significant == std::vector<bool>{false, true, true});
  }
  SUBCASE("step-up lifts earlier p-values") {
    const std::vector<double> p = {0.01, 0.04, 0.03, 0.005};
    const auto r = bh_correct(p, 0.05);
    CHECK(r.adjusted[0] == doctest::Approx(0.02));
    CHECK(r.adjusted[1] == doctest::Approx(0.04));
    CHECK(r.adjusted[2] == doctest::Approx(0.04));
    CHECK(r.adjusted[3] == doctest::Approx(0.02));
    CHECK(std::all_of(r.significant.begin(), r.significant.end(), [](bool b) { return b; }));
  }
  SUBCASE("adjusted equal to alpha is not significant") {
    const std::vector<double> p = {0.05};
    CHECK_FALSE(bh_correct(p, 0.05).significant[0]);
  }
  SUBCASE("clipped to one") {
    const std::vector<double> p = {0.9, 0.95};
    const auto r = bh_correct(p, 0.05);
    CHECK(r.adjusted[0] <= 1.0);
    CHECK(r.adjusted[1] == 1.0 * 0.95);
  }
  SUBCASE("empty input") {
    CHECK(bh_correct(std::vector<double>{}, 0.05).adjusted.empty());
  }
  SUBCASE("monotone and never below the raw p-value") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> p(1 + rng.uniform_index(30));
      for (auto& x : p) x = std::pow(rng.uniform01(), 3.0);
      const auto r = bh_correct(p, 0.05);
      for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(r.adjusted[i] >= p[i] * (1.0 - 1e-15));
        CHECK(r.adjusted[i] <= 1.0);
        CHECK(r.significant[i] == (r.adjusted[i] < 0.05));
        for (std::size_t j = 0; j < p.size(); ++j) {
          if (p[i] <= p[j]) CHECK(r.adjusted[i] <= r.adjusted[j]);
        }
      }
    }
  }
}

TEST_CASE("contingency tables keep only large enough groups") {
  // Class 0: 180 male, 179 female, 3 nonbinary, 5 unannotated.
  std::vector<std::uint32_t> labels, gender, preds;
  auto add = [&](std::uint32_t y, std::uint32_t g, std::uint32_t pred, int count) {
    for (int i = 0; i < count; ++i) {
      labels.push_back(y);
      gender.push_back(g);
      preds.push_back(pred);
    }
  };
  add(0, 0, 0, 150);
  add(0, 0, 1, 30);
  add(0, 1, 0, 100);
  add(0, 1, 2, 79);
  add(0, 2, 1, 3);
  add(0, 3, 2, 5);
  add(1, 0, 1, 40);
  const auto store = labeled_store(labels, gender, 3);
  const auto t = build_contingency(preds, store, 0, "gender", 20);
  REQUIRE(t.counts.rows == 2);
  CHECK(t.group_names == std::vector<std::string>{"male", "female"});
  CHECK(t.group_values == std::vector<std::uint32_t>{0, 1});
  CHECK(t.counts(0, 0) == 150);
  CHECK(t.counts(0, 1) == 30);
  CHECK(t.counts(0, 2) == 0);
  CHECK(t.counts(1, 0) == 100);
  CHECK(t.counts(1, 2) == 79);
  REQUIRE(t.excluded_groups.size() == 1);
  CHECK(t.excluded_groups[0].name == "nonbinary");
  CHECK(t.excluded_groups[0].count == 3);
  CHECK(t.n_unknown == 5);
  CHECK(t.total() == 359);
  CHECK(t.testable());

  // Raising the floor past 179 leaves one group: untestable.
  const auto narrow = build_contingency(preds, store, 0, "gender", 180);
  CHECK_FALSE(narrow.testable());

  // Class 1 has only male images.
  CHECK_FALSE(build_contingency(preds, store, 1, "gender", 20).testable());
}

TEST_CASE("contingency counts match a naive tally on random data") {
  const auto store = testing::random_store(600, 1, 1, 2, 4, 33);
  Rng rng(8);
  std::vector<std::uint32_t> preds(600);
  for (auto& p : preds) p = static_cast<std::uint32_t>(rng.uniform_index(4));
  for (std::uint32_t c = 0; c < 4; ++c) {
    const auto t = build_contingency(preds, store, c, "gender", 1);
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> tally;
    for (std::size_t i = 0; i < 600; ++i) {
      if (store.true_class(i) == c && store.demographic(i, 0) < 3) {
        ++tally[{store.demographic(i, 0), preds[i]}];
      }
    }
    for (std::size_t r = 0; r < t.counts.rows; ++r) {
      for (std::uint32_t k = 0; k < 4; ++k) {
        CHECK(t.counts(r, k) == tally[{t.group_values[r], k}]);
      }
    }
  }
}

TEST_CASE("global bias against the independent oracle") {
  const auto store = testing::random_store(3000, 1, 1, 2, 5, 34);
  // Predictions that depend on gender for some classes.
  Rng rng(9);
  std::vector<std::uint32_t> preds(3000);
  for (std::size_t i = 0; i < 3000; ++i) {
    const auto y = store.true_class(i);
    const auto g = store.demographic(i, 0);
    const double skew = (y % 2 == 0 && g == 1) ? 0.4 : 0.1;
    preds[i] = rng.uniform01() < skew ? static_cast<std::uint32_t>((y + 1 + rng.uniform_index(4)) % 5) : y;
  }
  const auto bias = global_bias(preds, store, "gender", {0.05, 20});
  const auto oracle = oracle_metrics(store, preds, "gender", 20);
  REQUIRE(oracle.size() == 5);
  double sum_v = 0.0;
  for (std::uint32_t c = 0; c < 5; ++c) {
    const auto& r = bias.classes[c];
    CHECK(r.tested() == oracle[c].testable);
    if (!r.tested()) continue;
    CHECK(close(r.chi2, oracle[c].chi2, 1e-10));
    CHECK(close(r.cramers_v, oracle[c].v, 1e-10));
    CHECK(r.n == oracle[c].n);
    if (r.significant) sum_v += r.cramers_v;
  }
  REQUIRE(bias.n_significant() > 0);
  CHECK(bias.mean_v.has_value());
  CHECK(*bias.mean_v == doctest::Approx(sum_v / bias.n_significant()).epsilon(1e-14));
  // Even classes carry the planted skew.
  for (auto c : bias.significant_classes) CHECK(c % 2 == 0);

  const auto mv = mean_v_over(preds, store, bias.significant_classes, "gender", 20);
  CHECK(*mv == doctest::Approx(*bias.mean_v).epsilon(1e-14));
  CHECK_FALSE(mean_v_over(preds, store, std::vector<std::uint32_t>{}, "gender", 20));
}

TEST_CASE("collapsed and untestable classes") {
  const auto store = testing::random_store(500, 1, 1, 2, 3, 35);
  std::vector<std::uint32_t> preds(500, 1);  // everything predicted as class 1
  for (std::uint32_t c = 0; c < 3; ++c) {
    const auto v = class_v(preds, store, c, "gender", 20);
    REQUIRE(v.has_value());
    CHECK(*v == 0.0);
  }
  const auto bias = global_bias(preds, store, "gender");
  for (const auto& r : bias.classes) CHECK(r.status == ClassStatus::kSingleColumn);
  CHECK(bias.n_significant() == 0);
  CHECK_FALSE(bias.mean_v.has_value());

  // A floor above every group size leaves nothing testable.
  CHECK_FALSE(class_v(preds, store, 0, "gender", 10000).has_value());
  CHECK_THROWS_AS(global_bias(preds, store, "race"), Error);
}
