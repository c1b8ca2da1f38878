#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "fedclust/clusterweights.hpp"
#include "fedclust/formulations.hpp"
#include "fedclust/rng.hpp"

using namespace fedclust;

namespace {

Eigen::RowVectorXd log_row(std::initializer_list<double> proba) {
  Eigen::RowVectorXd r(static_cast<long>(proba.size()));
  int i = 0;
  for (double p : proba) r(i++) = std::log(p);
  return r;
}

}  // namespace

TEST_CASE("conditional score of the uniform prediction") {
  Formulation form(FormulationKind::conditional, 1, 4);
  CHECK(form.log_score(0, log_row({0.25, 0.25, 0.25, 0.25}), 2) ==
        doctest::Approx(std::log(0.25)).epsilon(1e-14));
}

TEST_CASE("ratio score vanishes when the marginal equals the prediction") {
  Formulation form(FormulationKind::ratio, 1, 3);
  Eigen::MatrixXd proba(1, 3);
  proba << 0.5, 0.3, 0.2;
  form.update_marginal(0, proba);
  for (int y = 0; y < 3; ++y) {
    CHECK(form.log_score(0, log_row({0.5, 0.3, 0.2}), y) == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("ratio score worked example") {
  Formulation form(FormulationKind::ratio, 1, 2);
  Eigen::MatrixXd proba(1, 2);
  proba << 0.4, 0.6;
  form.update_marginal(0, proba);
  CHECK(form.log_score(0, log_row({0.8, 0.2}), 0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("marginal of identical prediction rows is that row") {
  Formulation form(FormulationKind::ratio, 1, 3);
  Eigen::MatrixXd proba(4, 3);
  for (int i = 0; i < 4; ++i) proba.row(i) << 0.2, 0.5, 0.3;
  form.update_marginal(0, proba);
  CHECK((form.marginals().row(0) - proba.row(0)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("marginal of two opposite one-hot rows is uniform") {
  Formulation form(FormulationKind::ratio, 1, 2);
  Eigen::MatrixXd proba(2, 2);
  proba << 1.0, 0.0, 0.0, 1.0;
  form.update_marginal(0, proba);
  CHECK(form.marginals()(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(form.marginals()(0, 1) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("marginal of three rows is the arithmetic mean") {
  Formulation form(FormulationKind::ratio, 1, 2);
  Eigen::MatrixXd proba(3, 2);
  proba << 0.2, 0.8, 0.6, 0.4, 0.4, 0.6;
  form.update_marginal(0, proba);
  CHECK(form.marginals()(0, 0) == doctest::Approx(0.4).epsilon(1e-14));
  CHECK(form.marginals()(0, 1) == doctest::Approx(0.6).epsilon(1e-14));
}

TEST_CASE("zero marginal entries are floored before the log") {
  Formulation form(FormulationKind::ratio, 1, 2);
  Eigen::MatrixXd proba(1, 2);
  proba << 1.0, 0.0;
  form.update_marginal(0, proba);
  const double score = form.log_score(0, log_row({0.5, 0.5}), 1);
  CHECK(std::isfinite(score));
  // prediction 0.5 against a floored marginal: log(0.5) - log(1e-12)
  CHECK(score == doctest::Approx(std::log(0.5) - std::log(kMarginalFloor)).epsilon(1e-9));
}

TEST_CASE("conditional scores are never positive") {
  RngStream rng(5);
  Formulation form(FormulationKind::conditional, 1, 4);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::VectorXd raw(4);
    for (int c = 0; c < 4; ++c) raw(c) = rng.uniform() + 1e-3;
    raw /= raw.sum();
    const Eigen::RowVectorXd lp = raw.transpose().array().log();
    CHECK(form.log_score(0, lp, rng.uniform_int(4)) <= 0.0);
  }
}

TEST_CASE("uniform-marginal ratio scoring induces the conditional responsibilities") {
  // the -log(1/C) offset is cluster-independent, so it cancels in the
  // responsibility normalizer
  RngStream rng(7);
  const int n = 6, K = 3, C = 4;
  Formulation cond(FormulationKind::conditional, K, C);
  Formulation ratio(FormulationKind::ratio, K, C);
  Eigen::MatrixXd uniform = Eigen::MatrixXd::Constant(1, C, 1.0 / C);
  for (int k = 0; k < K; ++k) ratio.update_marginal(k, uniform);

  Eigen::MatrixXd scores_cond(n, K), scores_ratio(n, K);
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k < K; ++k) {
      Eigen::VectorXd raw(C);
      for (int c = 0; c < C; ++c) raw(c) = rng.uniform() + 1e-3;
      raw /= raw.sum();
      const Eigen::RowVectorXd lp = raw.transpose().array().log();
      const int y = j % C;
      scores_cond(j, k) = cond.log_score(k, lp, y);
      scores_ratio(j, k) = ratio.log_score(k, lp, y);
    }
  }

  WeightState a = WeightState::uniform(n, K, 0.5);
  WeightState b = a;
  e_step(a, scores_cond);
  e_step(b, scores_ratio);
  CHECK((a.gamma - b.gamma).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.gamma_tilde - b.gamma_tilde).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.omega - b.omega).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("marginal bookkeeping tracks cluster duplication and removal") {
  Formulation form(FormulationKind::ratio, 2, 2);
  Eigen::MatrixXd p0(1, 2), p1(1, 2);
  p0 << 0.9, 0.1;
  p1 << 0.3, 0.7;
  form.update_marginal(0, p0);
  form.update_marginal(1, p1);

  form.duplicate_cluster(0);
  REQUIRE(form.num_clusters() == 3);
  CHECK((form.marginals().row(2) - form.marginals().row(0)).cwiseAbs().maxCoeff() == 0.0);

  form.remove_clusters({true, false, true});
  REQUIRE(form.num_clusters() == 2);
  CHECK(form.marginals()(0, 0) == doctest::Approx(0.9));
  CHECK(form.marginals()(1, 0) == doctest::Approx(0.9));
}

TEST_CASE("empty batches cannot update marginals") {
  Formulation form(FormulationKind::ratio, 1, 2);
  Eigen::MatrixXd empty(0, 2);
  CHECK_THROWS_AS(form.update_marginal(0, empty), std::invalid_argument);
}
