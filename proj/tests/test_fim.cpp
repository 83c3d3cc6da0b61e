// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the mmpos Project.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mmpos/fim.hpp"
#include "mmpos/rng.hpp"

using namespace mmpos;

namespace {

Scenario va_scenario() {
  Scenario s;
  s.bs = {0.0, 0.0, 5.0};
  s.ue.position = {20.0, 10.0, 0.0};
  s.vas = {{{-20.0, 0.0, 5.0}, 1},
           {{80.0, 0.0, 5.0}, 2},
           {{0.0, -20.0, 5.0}, 3},
           {{0.0, 80.0, 5.0}, 4}};
  s.los = true;
  return s;
}

FimScene reference_scene(bool los, int n_vas) {
  const Scenario s = va_scenario();
  FimScene scene;
  scene.bs = s.bs;
  scene.ue = s.ue;
  scene.los = los;
  for (int i = 0; i < n_vas; ++i) scene.vas.push_back(s.vas[i].position);
  return scene;
}

// Stacked channel-parameter vector of a scene described by zeta.
Eigen::VectorXd eta_of_zeta(const FimScene& base, const Eigen::VectorXd& zeta) {
  FimScene scene = base;
  scene.ue.position = zeta.segment<3>(0);
  scene.ue.orientation = zeta(3);
  scene.ue.clock_bias = zeta(4);
  for (std::size_t m = 0; m < scene.vas.size(); ++m) {
    scene.vas[m] = zeta.segment<3>(5 + 3 * m);
  }

  Eigen::VectorXd eta(5 * scene.n_paths());
  int row = 0;
  if (scene.los) {
    eta.segment<5>(row) =
        forward_model(scene.ue, std::nullopt, scene.bs).vec();
    row += 5;
  }
  for (std::size_t m = 0; m < scene.vas.size(); ++m) {
    VirtualAnchor va{scene.vas[m], static_cast<int>(m) + 1};
    eta.segment<5>(row) = forward_model(scene.ue, va, scene.bs).vec();
    row += 5;
  }
  return eta;
}

Eigen::VectorXd zeta_of_scene(const FimScene& scene) {
  Eigen::VectorXd zeta(scene.zeta_dim());
  zeta.segment<3>(0) = scene.ue.position;
  zeta(3) = scene.ue.orientation;
  zeta(4) = scene.ue.clock_bias;
  for (std::size_t m = 0; m < scene.vas.size(); ++m) {
    zeta.segment<3>(5 + 3 * m) = scene.vas[m];
  }
  return zeta;
}

// Central finite differences with angle-aware residuals.
Eigen::MatrixXd fd_jacobian(const FimScene& scene, double h = 1e-6) {
  const Eigen::VectorXd zeta = zeta_of_scene(scene);
  const int rows = 5 * scene.n_paths();
  Eigen::MatrixXd jac(rows, zeta.size());
  for (Eigen::Index j = 0; j < zeta.size(); ++j) {
    Eigen::VectorXd zp = zeta;
    Eigen::VectorXd zm = zeta;
    zp(j) += h;
    zm(j) -= h;
    const Eigen::VectorXd ep = eta_of_zeta(scene, zp);
    const Eigen::VectorXd em = eta_of_zeta(scene, zm);
    for (int i = 0; i < rows; ++i) {
      const int comp = i % 5;
      double diff = ep(i) - em(i);
      if (comp == kDoaAzComponent || comp == kDodAzComponent) {
        diff = wrap_angle(diff);
      }
      jac(i, j) = diff / (2.0 * h);
    }
  }
  return jac;
}

double max_rel_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double scale = std::max({std::abs(a(i, j)), std::abs(b(i, j)), 1e-9});
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / scale);
    }
  }
  return worst;
}

FimScene random_scene(Rng& rng) {
  FimScene scene;
  scene.bs = {0.0, 0.0, 5.0};
  scene.los = true;
  scene.ue.position = {rng.uniform(-40.0, 40.0), rng.uniform(-40.0, 40.0), 0.0};
  scene.ue.orientation = rng.uniform(-3.0, 3.0);
  scene.ue.clock_bias = rng.uniform(-5.0, 5.0);
  const int n_vas = 1 + static_cast<int>(rng.index(4));
  while (static_cast<int>(scene.vas.size()) < n_vas) {
    Eigen::Vector3d va(rng.uniform(-80.0, 80.0), rng.uniform(-80.0, 80.0), 5.0);
    if ((va - scene.bs).norm() < 5.0) continue;
    if (!ue_on_bs_side(scene.ue.position, va, scene.bs)) continue;
    if (std::abs((scene.ue.position - va).dot((scene.bs - va).normalized())) <
        1.0) {
      continue;
    }
    if (std::hypot(va.x() - scene.ue.position.x(),
                   va.y() - scene.ue.position.y()) < 2.0) {
      continue;
    }
    scene.vas.push_back(va);
  }
  return scene;
}

}  // namespace

TEST_CASE("structural Jacobian entries") {
  const FimScene scene = reference_scene(true, 2);
  const Eigen::MatrixXd jac = fim_jacobian(scene);

  // d toa / d B = 1 for every path.
  for (int p = 0; p < scene.n_paths(); ++p) {
    CHECK(jac(5 * p + kToaComponent, 4) == 1.0);
  }
  // LOS DOD ignores the orientation; LOS DOA azimuth has slope -1.
  CHECK(jac(kDodAzComponent, 3) == 0.0);
  CHECK(jac(kDodElComponent, 3) == 0.0);
  CHECK(jac(kDoaAzComponent, 3) == -1.0);
  // No channel parameter depends on the bias except the TOAs.
  for (int p = 0; p < scene.n_paths(); ++p) {
    for (int c = 1; c < 5; ++c) {
      CHECK(jac(5 * p + c, 4) == 0.0);
    }
  }
}

TEST_CASE("analytic Jacobian matches finite differences at the truth") {
  const FimScene scene = reference_scene(true, 4);
  CHECK(max_rel_error(fim_jacobian(scene), fd_jacobian(scene)) < 1e-4);
}

TEST_CASE("analytic Jacobian matches finite differences on random scenes") {
  Rng rng(424242);
  for (int i = 0; i < 50; ++i) {
    const FimScene scene = random_scene(rng);
    CHECK(max_rel_error(fim_jacobian(scene), fd_jacobian(scene)) < 1e-4);
  }
}

TEST_CASE("LOS-only with unknown bias is singular") {
  const FimScene scene = reference_scene(true, 0);
  const Eigen::MatrixXd j = location_fim(scene, {});
  const BoundSet b = bounds(j, scene);
  CHECK_FALSE(b.identifiable);
  CHECK(std::isinf(b.peb));
}

TEST_CASE("LOS plus one unknown NLOS path is identifiable (rank 8)") {
  const FimScene scene = reference_scene(true, 1);
  const Eigen::MatrixXd j = location_fim(scene, {});
  REQUIRE(j.rows() == 8);
  const BoundSet b = bounds(j, scene);
  CHECK(b.identifiable);
  CHECK(std::isfinite(b.peb));
}

TEST_CASE("FIM scales inversely with the covariance") {
  const FimScene scene = reference_scene(true, 2);
  NoiseSpec noise;
  const Eigen::MatrixXd j1 = location_fim(scene, noise);
  noise.toa_std *= 2.0;
  noise.angle_std *= 2.0;
  const Eigen::MatrixXd j4 = location_fim(scene, noise);
  CHECK((j1 - 4.0 * j4).cwiseAbs().maxCoeff() <
        1e-9 * j1.cwiseAbs().maxCoeff());
}

TEST_CASE("hybrid FIM with vanishing priors equals the channel FIM") {
  const FimScene scene = reference_scene(true, 2);
  const Eigen::MatrixXd j = location_fim(scene, {});
  HybridPriors priors;
  priors.ue_position_std = 0.0;  // zero std encodes "no prior" here
  priors.orientation_std = 0.0;
  priors.clock_bias_std = 0.0;
  priors.va_stds = {0.0, 0.0};
  priors.z_precision = 0.0;
  const Eigen::MatrixXd h = hybrid_fim(j, priors.precision_diag(scene));
  CHECK((h - j).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("infinite-precision bias prior reproduces the known-bias bound") {
  const FimScene scene = reference_scene(true, 4);
  const Eigen::MatrixXd j = location_fim(scene, {});

  Eigen::VectorXd prec = Eigen::VectorXd::Zero(scene.zeta_dim());
  prec(4) = 1e14;
  const BoundSet via_prior = bounds(hybrid_fim(j, prec), scene, {}, false);

  const KnownParams known{false, true};
  const BoundSet via_deletion = bounds(reduce_fim(j, scene, known), scene, known);
  CHECK(via_prior.peb ==
        doctest::Approx(via_deletion.peb).epsilon(1e-6));
}

TEST_CASE("hybrid information never loosens a bound") {
  const FimScene scene = reference_scene(true, 4);
  const Eigen::MatrixXd j = location_fim(scene, {});
  HybridPriors priors;
  priors.va_stds = {10.0, 10.0, 10.0, 0.0};
  const Eigen::MatrixXd h = hybrid_fim(j, priors.precision_diag(scene));

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h - j);
  CHECK(es.eigenvalues().minCoeff() >= -1e-9);

  const BoundSet bj = bounds(j, scene);
  const BoundSet bh = bounds(h, scene, {}, false);
  CHECK(bh.peb <= bj.peb * (1.0 + 1e-9));
  CHECK(bh.oeb <= bj.oeb * (1.0 + 1e-9));
  CHECK(bh.beb <= bj.beb * (1.0 + 1e-9));
}

TEST_CASE("bounds of a diagonal FIM have closed form") {
  FimScene scene = reference_scene(true, 0);  // zeta = [ue3, alpha, B]
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(5, 5);
  j.diagonal() << 4.0, 4.0, 4.0, 4.0, 4.0;
  const BoundSet b = bounds(j, scene);
  CHECK(b.identifiable);
  CHECK(b.peb == doctest::Approx(std::sqrt(3.0 / 4.0)));
  CHECK(b.oeb == doctest::Approx(0.5));
  CHECK(b.beb == doctest::Approx(0.5));
}

TEST_CASE("NLOS-only identifiability thresholds") {
  const Scenario s = va_scenario();
  const std::vector<IdentConfig> configs = {
      {false, 2, false, false},  // 2 paths, no map: singular
      {false, 2, true, false},   // 2 paths with map: identifiable
      {false, 3, false, false},  // 3 paths, no map: identifiable
  };
  const auto rows = identifiability_table(s, {}, configs,
                                          UniformBox{-100, 100, -100, 100}, 5);
  REQUIRE(rows.size() == 3);
  CHECK_FALSE(rows[0].identifiable);
  CHECK(rows[1].identifiable);
  CHECK(rows[2].identifiable);
}

TEST_CASE("adding a path never loosens any bound") {
  Rng rng(808);
  for (int trial = 0; trial < 20; ++trial) {
    FimScene small = random_scene(rng);
    FimScene big = small;
    // Extra anchor visible from the UE.
    while (true) {
      Eigen::Vector3d va(rng.uniform(-80.0, 80.0), rng.uniform(-80.0, 80.0),
                         5.0);
      if ((va - big.bs).norm() < 5.0) continue;
      if (!ue_on_bs_side(big.ue.position, va, big.bs)) continue;
      if (std::abs((big.ue.position - va).dot((big.bs - va).normalized())) <
          1.0) {
        continue;
      }
      big.vas.push_back(va);
      break;
    }

    // Compare on the shared parameters: known map isolates the UE block.
    const KnownParams known{true, false};
    const Eigen::MatrixXd js =
        reduce_fim(location_fim(small, {}), small, known);
    const Eigen::MatrixXd jb = reduce_fim(location_fim(big, {}), big, known);
    const BoundSet bs_small = bounds(js, small, known);
    const BoundSet bs_big = bounds(jb, big, known);
    if (bs_small.identifiable) {
      REQUIRE(bs_big.identifiable);
      CHECK(bs_big.peb <= bs_small.peb * (1.0 + 1e-9));
      CHECK(bs_big.oeb <= bs_small.oeb * (1.0 + 1e-9));
      CHECK(bs_big.beb <= bs_small.beb * (1.0 + 1e-9));
    }
  }
}

TEST_CASE("reference-scene bounds regression values") {
  // Frozen outputs of the validated model on the reference scene (no map
  // information). Guards against silent Jacobian/FIM regressions.
  NoiseSpec noise;

  FimScene nlos_only = reference_scene(false, 4);
  const BoundSet b1 = bounds(location_fim(nlos_only, noise), nlos_only);
  CHECK(b1.identifiable);
  CHECK(b1.peb == doctest::Approx(1.21685).epsilon(1e-4));
  CHECK(b1.beb == doctest::Approx(2.08985).epsilon(1e-4));

  FimScene full = reference_scene(true, 4);
  const BoundSet b2 = bounds(location_fim(full, noise), full);
  CHECK(b2.identifiable);
  CHECK(b2.peb == doctest::Approx(0.522114).epsilon(1e-4));
  CHECK(b2.beb == doctest::Approx(0.514305).epsilon(1e-4));

  const KnownParams known_bias{false, true};
  const BoundSet b3 = bounds(
      reduce_fim(location_fim(full, noise), full, known_bias), full, known_bias);
  CHECK(b3.peb == doctest::Approx(0.219354).epsilon(1e-4));
}
