#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/stl_fuzz.hpp"
#include "stldp/stl.hpp"

using namespace stldp::stl;

namespace {

Signal one_channel(std::vector<double> xs) {
  static const SchemaPtr schema = std::make_shared<const Schema>(std::vector<ChannelDecl>{{"x", "m"}});
  Signal s;
  s.schema = schema;
  s.values.resize(static_cast<Eigen::Index>(xs.size()), 1);
  for (std::size_t i = 0; i < xs.size(); ++i) s.values(static_cast<Eigen::Index>(i), 0) = xs[i];
  return s;
}

Signal two_channel(std::vector<double> xs, std::vector<double> ys) {
  Signal s;
  s.schema = std::make_shared<const Schema>(std::vector<ChannelDecl>{{"x", ""}, {"y", ""}});
  s.values.resize(static_cast<Eigen::Index>(xs.size()), 2);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    s.values(static_cast<Eigen::Index>(i), 0) = xs[i];
    s.values(static_cast<Eigen::Index>(i), 1) = ys[i];
  }
  return s;
}

const Schema& xs() { return *fuzz::xyz_schema(); }

}  // namespace

TEST_CASE("parser maps the grammar onto the tree") {
  Formula f = parse("G[0,20](x >= 1.0)", xs());
  REQUIRE(f->op == Op::Always);
  CHECK(f->window.lo == 0);
  CHECK(f->window.hi == 20);
  REQUIRE(f->children[0]->op == Op::Atom);
  CHECK(f->children[0]->cmp == Cmp::Ge);
  CHECK(f->children[0]->threshold == 1.0);

  Formula g = parse("F[0,20](G[0,20](abs_y <= 0.3))", xs());
  REQUIRE(g->op == Op::Eventually);
  REQUIRE(g->children[0]->op == Op::Always);
  const Formula& inner = g->children[0]->children[0];
  REQUIRE(inner->op == Op::And);
  CHECK(inner->children.size() == 2);
}

TEST_CASE("parser precedence: not > and > or > implication") {
  Formula f = parse("not x >= 0 and y >= 0 or z >= 0 -> x <= 1", xs());
  REQUIRE(f->op == Op::Imply);
  REQUIRE(f->children[0]->op == Op::Or);
  REQUIRE(f->children[0]->children[0]->op == Op::And);
  CHECK(f->children[0]->children[0]->children[0]->op == Op::Not);
  Formula r = parse("x >= 0 -> y >= 0 -> z >= 0", xs());
  REQUIRE(r->op == Op::Imply);
  CHECK(r->children[1]->op == Op::Imply);
}

TEST_CASE("parse errors carry positions") {
  try {
    parse("G[0,5](x >=", xs());
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("end of input") != std::string::npos);
    CHECK(e.line() == 1);
  }
  try {
    parse("G[0,5](\n  w >= 1)", xs());
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
    CHECK(e.column() == 3);
  }
  CHECK_THROWS_AS(parse("F[4,2](x >= 0)", xs()), ParseError);
  CHECK_THROWS_AS(parse("x >= 0 )", xs()), ParseError);
}

TEST_CASE("format round-trips through the parser") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; ++i) {
    Formula f = fuzz::random_formula(rng, 4, 20);
    Formula g = parse(format(f), xs());
    CHECK(format(g) == format(f));
    Signal s = fuzz::random_signal(rng, 20);
    CHECK(robustness(f, s) == robustness(g, s));
  }
}

TEST_CASE("boolean semantics on small signals") {
  Signal s = one_channel({1, 2, 3});
  CHECK(eval_bool(always({0, 2}, atom(0, "x", Cmp::Ge, 0.0)), s));
  CHECK(eval_bool(eventually({0, 2}, atom(0, "x", Cmp::Ge, 2.5)), s));
  Signal u = two_channel({1, 1, -1}, {0, 2, 0});
  CHECK(eval_bool(until({0, 2}, atom(0, "x", Cmp::Ge, 0.0), atom(1, "y", Cmp::Ge, 1.0)), u));
  // Requiring y >= 1 only from step 2 on leaves no witness.
  CHECK_FALSE(eval_bool(until({2, 2}, atom(0, "x", Cmp::Ge, 0.0), atom(1, "y", Cmp::Ge, 1.0)), u));
}

TEST_CASE("robustness on small signals") {
  Signal s = one_channel({1, 2, 3});
  Formula g = always({0, 2}, atom(0, "x", Cmp::Ge, 0.0));
  CHECK(robustness(g, s) == doctest::Approx(1.0));
  CHECK(robustness(eventually({0, 2}, atom(0, "x", Cmp::Ge, 2.5)), s) == doctest::Approx(0.5));
  CHECK(robustness(negate(g), s) == doctest::Approx(-1.0));
  CHECK(robustness(top(), s) == 1.0);
  // Truncated window at t = 2 sees only the last sample.
  CHECK(robustness(always({0, 5}, atom(0, "x", Cmp::Le, 4.0)), s, 2) == doctest::Approx(1.0));
  // Boundary counts as satisfied.
  Formula edge = atom(0, "x", Cmp::Ge, 1.0);
  CHECK(robustness(edge, s) == 0.0);
  CHECK(eval_bool(edge, s));
}

TEST_CASE("windows starting past the horizon are rejected") {
  Signal s = one_channel({1, 2, 3});
  CHECK_THROWS_AS(robustness(eventually({3, 4}, atom(0, "x", Cmp::Ge, 0.0)), s), std::invalid_argument);
  CHECK_THROWS_AS(robustness(always({0, 2}, eventually({1, 1}, top())), s), std::invalid_argument);
  CHECK_NOTHROW(robustness(always({0, 1}, eventually({1, 1}, top())), s));
  CHECK_THROWS_AS(eventually({2, 1}, top()), std::invalid_argument);
}

TEST_CASE("robustness sign agrees with the reference evaluator") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    Formula f = fuzz::random_formula(rng, 4, 20);
    Signal s = fuzz::random_signal(rng, 20);
    const bool ref = fuzz::holds(*f, s, 0);
    CHECK(eval_bool(f, s) == ref);
    CHECK((robustness(f, s) >= 0.0) == ref);
  }
}

TEST_CASE("negation is exact antisymmetry, or is max") {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 200; ++i) {
    Formula a = fuzz::random_formula(rng, 3, 20);
    Formula b = fuzz::random_formula(rng, 3, 20);
    Signal s = fuzz::random_signal(rng, 20);
    CHECK(robustness(negate(a), s) == -robustness(a, s));
    CHECK(robustness(disj(a, b), s) == std::max(robustness(a, s), robustness(b, s)));
    CHECK(robustness(imply(a, b), s) == std::max(-robustness(a, s), robustness(b, s)));
  }
}

TEST_CASE("derived temporal operators match their expansion") {
  std::mt19937_64 rng(13);
  for (int i = 0; i < 200; ++i) {
    // Operands bounded by 1 in magnitude so the constant robustness of TOP
    // never dominates the inner minimum of the until.
    Signal s = fuzz::random_signal(rng, 20, 0.9);
    std::uniform_int_distribution<int> lo_d(0, 10);
    const int lo = lo_d(rng);
    const Interval w{lo, lo + static_cast<int>(rng() % 8)};
    Formula p = atom(rng() % 3, "x", rng() % 2 ? Cmp::Ge : Cmp::Le, 0.05);
    CHECK(robustness(eventually(w, p), s) == robustness(until(w, top(), p), s));
    CHECK(robustness(always(w, p), s) == robustness(negate(eventually(w, negate(p))), s));
    CHECK(eval_bool(eventually(w, p), s) == eval_bool(until(w, top(), p), s));
  }
}

TEST_CASE("smooth max and min") {
  CHECK(smooth_max({0.0, 0.0}, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(smooth_min({0.0, 0.0}, 1.0) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
  // Large inputs stay finite thanks to the max shift.
  CHECK(std::isfinite(smooth_max({1e4, 1e4 - 1}, 100.0)));
  CHECK(smooth_max({1e4, 1e4 - 1}, 100.0) == doctest::Approx(1e4));
}

TEST_CASE("smooth robustness stays within the gap bound") {
  Signal s = one_channel({1, 2, 3});
  Formula g = always({0, 2}, atom(0, "x", Cmp::Ge, 0.0));
  CHECK(std::abs(robustness_smooth(g, s, 10.0).value - 1.0) <= std::log(3.0) / 10.0);
  CHECK(smooth_gap_bound(g, 2) == doctest::Approx(std::log(3.0)));

  std::mt19937_64 rng(14);
  for (int i = 0; i < 300; ++i) {
    Formula f = fuzz::random_formula(rng, 4, 20);
    Signal sig = fuzz::random_signal(rng, 20);
    const double exact = robustness(f, sig);
    const double bound = smooth_gap_bound(f, 20);
    for (double beta : {1.0, 10.0, 100.0}) {
      CHECK(std::abs(robustness_smooth_value(f, sig, beta) - exact) <= bound / beta + 1e-12);
    }
  }
}

TEST_CASE("smooth robustness gradient matches central differences") {
  std::mt19937_64 rng(15);
  const double h = 1e-5;
  for (int i = 0; i < 100; ++i) {
    Formula f = fuzz::random_formula(rng, 4, 20);
    Signal s = fuzz::random_signal(rng, 20);
    const double beta = 5.0;
    SmoothResult r = robustness_smooth(f, s, beta);
    CHECK(r.value == doctest::Approx(robustness_smooth_value(f, s, beta)).epsilon(1e-12));
    double worst = 0.0;
    for (Eigen::Index k = 0; k < s.values.size(); ++k) {
      Signal p = s, m = s;
      p.values.data()[k] += h;
      m.values.data()[k] -= h;
      const double fd = (robustness_smooth_value(f, p, beta) - robustness_smooth_value(f, m, beta)) / (2 * h);
      worst = std::max(worst, fuzz::rel_err(fd, r.grad.data()[k]));
    }
    CHECK(worst < 1e-4);
  }
}

// Per formula the gap can grow with beta when soft-max and soft-min errors
// cancel at low temperature, so monotonicity is asserted on the corpus
// average and, per formula, on the min-only fragment.
TEST_CASE("smoothing gap shrinks as the temperature grows") {
  std::mt19937_64 rng(16);
  const std::vector<double> betas{1.0, 10.0, 100.0};
  std::vector<double> mean_gap(betas.size(), 0.0);
  for (int i = 0; i < 500; ++i) {
    Formula f = fuzz::random_formula(rng, 4, 20);
    Signal s = fuzz::random_signal(rng, 20);
    const double exact = robustness(f, s);
    for (std::size_t b = 0; b < betas.size(); ++b) mean_gap[b] += std::abs(robustness_smooth_value(f, s, betas[b]) - exact);
  }
  CHECK(mean_gap[1] <= mean_gap[0]);
  CHECK(mean_gap[2] <= mean_gap[1]);

  for (int i = 0; i < 200; ++i) {
    std::vector<Formula> parts;
    for (int k = 0; k < 3; ++k) {
      const int lo = static_cast<int>(rng() % 5);
      parts.push_back(always({lo, lo + static_cast<int>(rng() % 10)},
                             conj(atom(0, "x", Cmp::Ge, -0.5), atom(rng() % 3, "y", Cmp::Le, 0.5))));
    }
    Formula f = conj(parts);
    Signal s = fuzz::random_signal(rng, 20);
    const double exact = robustness(f, s);
    double prev = std::numeric_limits<double>::infinity();
    for (double beta : betas) {
      const double gap = std::abs(robustness_smooth_value(f, s, beta) - exact);
      CHECK(gap <= prev + 1e-12);
      prev = gap;
    }
  }
}
