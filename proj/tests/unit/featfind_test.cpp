#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "cbench/featfind.hpp"
#include "cbench/rng.hpp"
#include "doctest.h"
#include "support/fixture.hpp"
#include "support/oracles.hpp"

using cbench::ActivationDataset;
using cbench::Direction;
using cbench::FitError;

namespace {

bool kind_is(const FitError& e, FitError::Kind k) { return e.kind() == k; }

ActivationDataset gaussian_blobs(int n_per_class, int d,
                                 const Eigen::VectorXf& offset, float sigma,
                                 std::uint64_t seed) {
  cbench::Rng rng(seed);
  ActivationDataset acts;
  acts.X.resize(2 * n_per_class, d);
  acts.y.resize(2 * n_per_class);
  for (int i = 0; i < 2 * n_per_class; ++i) {
    const int cls = i % 2;
    const float sign = cls == 0 ? 1.0f : -1.0f;
    for (int j = 0; j < d; ++j) {
      acts.X(i, j) = sign * offset(j) +
                     sigma * static_cast<float>(rng.normal());
    }
    acts.y[i] = cls;
  }
  return acts;
}

// Points placed at mu_c +- s_j e_j make the within-class scatter exactly
// diagonal (sum over j of 2 s_j^2 e_j e_j^T per class), so closed-form
// whitening oracles apply.
ActivationDataset axis_symmetric_blobs(const Eigen::VectorXd& mu0,
                                       const Eigen::VectorXd& mu1,
                                       const Eigen::VectorXd& scales) {
  const int d = static_cast<int>(mu0.size());
  ActivationDataset acts;
  acts.X.resize(4 * d, d);
  acts.y.resize(4 * d);
  int row = 0;
  for (int cls = 0; cls < 2; ++cls) {
    const Eigen::VectorXd& mu = cls == 0 ? mu0 : mu1;
    for (int j = 0; j < d; ++j) {
      for (const double sign : {1.0, -1.0}) {
        Eigen::VectorXd x = mu;
        x(j) += sign * scales(j);
        acts.X.row(row) = x.cast<float>();
        acts.y[row] = cls;
        ++row;
      }
    }
  }
  return acts;
}

Eigen::VectorXd dir64(const Direction& d) {
  return d.vec().cast<double>();
}

}  // namespace

TEST_CASE("activation dataset validation") {
  ActivationDataset acts;
  acts.X = Eigen::MatrixXf::Random(4, 3);
  acts.y = {0, 1, 0, 1};
  CHECK_NOTHROW(acts.validate());
  CHECK(acts.class_rows(0) == std::vector<int>{0, 2});
  CHECK(acts.class_rows(1) == std::vector<int>{1, 3});

  auto bad = acts;
  bad.y = {0, 1, 0};
  CHECK_THROWS_AS(bad.validate(), FitError);

  bad = acts;
  bad.y = {0, 0, 0, 0};
  try {
    bad.validate();
    FAIL("expected a fit error");
  } catch (const FitError& e) {
    CHECK(kind_is(e, FitError::Kind::EmptyClass));
  }

  bad = acts;
  bad.X(2, 1) = std::numeric_limits<float>::quiet_NaN();
  try {
    bad.validate();
    FAIL("expected a fit error");
  } catch (const FitError& e) {
    CHECK(kind_is(e, FitError::Kind::NonFiniteLoss));
  }
}

TEST_CASE("collected activations are the cached residuals at region ends") {
  const auto cfg = fixture::small_config();
  const auto tensors = fixture::random_weights(cfg, 51);
  const auto model = fixture::make_model(cfg, tensors);
  const auto tok = fixture::toy_tokenizer();
  const auto tpl = fixture::toy_template();
  const auto data = cbench::build_dataset(tpl, 6, 2, 77);
  REQUIRE(data.train.size() == 12);

  std::vector<std::string> names;
  for (const auto& r : tpl.regions) names.push_back(r.name);

  const auto grid = cbench::collect_activation_grid(model, tpl, data.train,
                                                    tok);
  REQUIRE(grid.size() == 2);
  REQUIRE(grid[0].size() == 4);

  for (const int layer : {0, 1}) {
    for (const int region : {0, 3}) {
      const auto single = cbench::collect_activations(model, tpl, data.train,
                                                      tok, layer, region);
      CHECK(single.n() == 12);
      CHECK(single.d() == cfg.d_model);
      CHECK(single.X == grid[layer][region].X);
      CHECK(single.y == grid[layer][region].y);

      for (int i = 0; i < single.n(); ++i) {
        const auto& ex = data.train[i];
        const auto align = tok.align_regions(ex, names);
        const auto fwd = model.forward(tok.encode(ex.base_text));
        const Eigen::RowVectorXf want =
            fwd.cache.after_layer[layer].row(align.base_last[region]);
        CHECK((single.X.row(i) - want).cwiseAbs().maxCoeff() == 0.0f);
        CHECK(single.y[i] == (ex.base_type == tpl.types[0] ? 0 : 1));
      }
    }
  }

  // Mirrored pairs make the classes exactly balanced.
  const auto& acts = grid[1][2];
  CHECK(acts.class_rows(0).size() == 6);
  CHECK(acts.class_rows(1).size() == 6);
}

TEST_CASE("difference of class means matches a compensated-sum oracle") {
  cbench::Rng rng(303);
  ActivationDataset acts;
  const int n = 50, d = 16;
  acts.X.resize(n, d);
  acts.y.resize(n);
  for (int i = 0; i < n; ++i) {
    acts.y[i] = i < 21 ? 0 : 1;  // deliberately unbalanced
    for (int j = 0; j < d; ++j) {
      acts.X(i, j) = static_cast<float>(3.0 * rng.normal() + (i < 21));
    }
  }

  Eigen::VectorXd want(d);
  for (int j = 0; j < d; ++j) {
    std::vector<double> c0, c1;
    for (int i = 0; i < n; ++i) {
      (acts.y[i] == 0 ? c0 : c1).push_back(acts.X(i, j));
    }
    want(j) = oracle::kahan_sum(c0) / static_cast<double>(c0.size()) -
              oracle::kahan_sum(c1) / static_cast<double>(c1.size());
  }
  want.normalize();

  const Direction got = cbench::diff_means(acts);
  CHECK(got.vec().norm() == doctest::Approx(1.0f));
  CHECK(oracle::cosine(dir64(got), want) > 1.0 - 1e-9);

  ActivationDataset degenerate;
  degenerate.X = Eigen::MatrixXf::Ones(4, 3);
  degenerate.y = {0, 1, 0, 1};
  CHECK_THROWS_AS(cbench::diff_means(degenerate), FitError);
}

TEST_CASE("probe agrees with an independent Newton solver") {
  Eigen::VectorXf offset = Eigen::VectorXf::Zero(8);
  offset(0) = 0.4f;
  offset(3) = -0.3f;
  for (const double lambda : {0.5, 2.0}) {
    for (const std::uint64_t seed : {111ull, 222ull, 333ull}) {
      CAPTURE(lambda);
      CAPTURE(seed);
      const auto acts = gaussian_blobs(60, 8, offset, 1.0f, seed);
      const auto fit = cbench::fit_probe(acts, lambda);
      CHECK(fit.converged);

      std::vector<int> y01(acts.y.size());
      for (std::size_t i = 0; i < acts.y.size(); ++i) {
        y01[i] = acts.y[i] == 0 ? 1 : 0;  // the probe's positive class is 0
      }
      const Eigen::VectorXd want = oracle::newton_logistic(
          acts.X.cast<double>(), y01, lambda, /*fit_bias=*/true);
      CHECK(oracle::cosine(dir64(fit.direction), want) > 0.999);
    }
  }

  // Without a bias the two solvers must still agree.
  const auto acts = gaussian_blobs(60, 8, offset, 1.0f, 444);
  const auto fit = cbench::fit_probe(acts, 1.0, /*fit_bias=*/false);
  std::vector<int> y01(acts.y.size());
  for (std::size_t i = 0; i < acts.y.size(); ++i) {
    y01[i] = acts.y[i] == 0 ? 1 : 0;
  }
  const Eigen::VectorXd want = oracle::newton_logistic(
      acts.X.cast<double>(), y01, 1.0, /*fit_bias=*/false);
  CHECK(oracle::cosine(dir64(fit.direction), want) > 0.999);
}

TEST_CASE("LDA reduces to the mean difference for isotropic scatter") {
  const int d = 10;
  Eigen::VectorXd mu0 = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd mu1 = Eigen::VectorXd::Zero(d);
  mu0(0) = 1.0;
  mu0(4) = -0.5;
  mu1 = -mu0;
  const auto acts =
      axis_symmetric_blobs(mu0, mu1, Eigen::VectorXd::Constant(d, 0.7));

  const Eigen::VectorXd lda = dir64(cbench::fit_lda(acts));
  const Eigen::VectorXd dm = dir64(cbench::diff_means(acts));
  CHECK(oracle::cosine(lda, dm) > 0.99999);
}

TEST_CASE("LDA whitens anisotropic scatter per the closed form") {
  const int d = 6;
  Eigen::VectorXd mu0 = Eigen::VectorXd::Zero(d);
  mu0(0) = 0.5;
  mu0(1) = 0.5;
  const Eigen::VectorXd mu1 = -mu0;
  Eigen::VectorXd scales = Eigen::VectorXd::Ones(d);
  scales(0) = 2.0;   // noisy axis: LDA should discount it
  scales(1) = 0.5;   // quiet axis: LDA should lean on it

  const auto acts = axis_symmetric_blobs(mu0, mu1, scales);
  const Eigen::VectorXd lda = dir64(cbench::fit_lda(acts, 0.0));

  // Exact diagonal scatter => w proportional to delta / variances.
  Eigen::VectorXd want = Eigen::VectorXd::Zero(d);
  for (int j = 0; j < d; ++j) {
    want(j) = (mu0(j) - mu1(j)) / (scales(j) * scales(j));
  }
  want.normalize();
  CHECK(oracle::cosine(lda, want) > 1.0 - 1e-9);

  // The whitened direction must differ visibly from the raw difference.
  CHECK(oracle::cosine(lda, dir64(cbench::diff_means(acts))) < 0.99);

  ActivationDataset tiny;
  tiny.X = Eigen::MatrixXf::Random(2, 3);
  tiny.y = {0, 1};
  CHECK_THROWS_AS(cbench::fit_lda(tiny), FitError);
}

TEST_CASE("PCA matches power iteration and fixes its sign") {
  cbench::Rng rng(909);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 60, d = 12;
    ActivationDataset acts;
    acts.X.resize(n, d);
    acts.y.resize(n);
    for (int i = 0; i < n; ++i) {
      acts.y[i] = i % 2;
      for (int j = 0; j < d; ++j) {
        // Anisotropic spread gives a clear top component.
        acts.X(i, j) = static_cast<float>(rng.normal() * (1.0 + j));
      }
    }
    const Direction got = cbench::fit_pca(acts);

    Eigen::MatrixXd X = acts.X.cast<double>();
    X.rowwise() -= Eigen::RowVectorXd(X.colwise().mean());
    const Eigen::MatrixXd cov = X.transpose() * X;
    const Eigen::VectorXd top =
        oracle::power_iteration_top(cov, 2000, 1234 + trial);

    CHECK(std::abs(oracle::cosine(dir64(got), top)) > 0.999);

    // Orientation contract: the largest-magnitude coordinate is positive.
    int idx = 0;
    got.vec().cwiseAbs().maxCoeff(&idx);
    CHECK(got.vec()(idx) > 0.0f);

    // Row scaling must not change the component.
    auto scaled = acts;
    scaled.X *= 3.0f;
    CHECK((cbench::fit_pca(scaled).vec() - got.vec()).cwiseAbs().maxCoeff() <
          1e-5f);
  }

  ActivationDataset flat;
  flat.X = Eigen::MatrixXf::Ones(5, 4);
  flat.y = {0, 1, 0, 1, 0};
  CHECK_THROWS_AS(cbench::fit_pca(flat), FitError);
}

TEST_CASE("k-means on separated blobs recovers the centroid difference") {
  const int d = 8;
  Eigen::VectorXf mu = Eigen::VectorXf::Zero(d);
  mu(1) = 1.5f;
  mu(6) = -1.0f;
  const auto acts = gaussian_blobs(40, d, mu, 0.05f, 606);

  const Direction got = cbench::fit_kmeans(acts, 42);

  // With this separation the only optimal partition is the true one, so
  // the centroids are the per-blob sample means.
  Eigen::VectorXd m0 = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(d);
  for (int i = 0; i < acts.n(); ++i) {
    (acts.y[i] == 0 ? m0 : m1) += acts.X.row(i).cast<double>();
  }
  m0 /= static_cast<double>(acts.class_rows(0).size());
  m1 /= static_cast<double>(acts.class_rows(1).size());

  // Lexicographically smaller centroid first fixes the sign.
  Eigen::VectorXd want = Eigen::VectorXd::Zero(d);
  for (int j = 0; j < d; ++j) {
    if (m0(j) != m1(j)) {
      want = m0(j) < m1(j) ? (m0 - m1) : (m1 - m0);
      break;
    }
  }
  want.normalize();
  CHECK(oracle::cosine(dir64(got), want) > 1.0 - 1e-9);

  // Restart seeds may differ, the recovered component may not.
  const Direction again = cbench::fit_kmeans(acts, 43);
  CHECK(std::abs(oracle::cosine(dir64(again), dir64(got))) > 0.999999);
  const Direction rerun = cbench::fit_kmeans(acts, 42);
  CHECK(rerun.vec() == got.vec());

  ActivationDataset flat;
  flat.X = Eigen::MatrixXf::Zero(6, 3);
  flat.y = {0, 1, 0, 1, 0, 1};
  CHECK_THROWS_AS(cbench::fit_kmeans(flat, 1), FitError);
}

TEST_CASE("random directions are unit, seeded, and dimension-checked") {
  const Direction a = cbench::random_direction(16, 7);
  const Direction b = cbench::random_direction(16, 7);
  const Direction c = cbench::random_direction(16, 8);
  CHECK(a.vec() == b.vec());
  CHECK(a.vec() != c.vec());
  CHECK(a.vec().norm() == doctest::Approx(1.0f));
  CHECK(std::abs(cbench::random_direction(1, 3).vec()(0)) ==
        doctest::Approx(1.0f));
  CHECK_THROWS_AS(cbench::random_direction(0, 1), FitError);
}

TEST_CASE("interchange training moves toward the planted direction") {
  const auto planted = fixture::planted_model(5150);
  const auto model = fixture::make_model(planted.config, planted.tensors);
  const auto tok = fixture::toy_tokenizer();
  const auto tpl = fixture::toy_template();
  const auto data = cbench::build_dataset(tpl, 60, 4, 2718);

  const int layer = 1;
  const int region = static_cast<int>(tpl.label_region_index());
  cbench::DasHyper hyper;  // lr 5e-3, batch 4, one epoch = 30 steps

  // epochs = 0 returns the seeded random initialization untouched, which
  // draws the same normals as random_direction for the same seed.
  cbench::DasHyper frozen = hyper;
  frozen.epochs = 0;
  const Direction init =
      cbench::train_das(model, tpl, data.train, tok, layer, region, frozen,
                        99);
  CHECK((init.vec() -
         cbench::random_direction(planted.config.d_model, 99).vec())
            .cwiseAbs()
            .maxCoeff() < 1e-6f);

  hyper.epochs = 6;  // 180 steps total
  const Direction trained =
      cbench::train_das(model, tpl, data.train, tok, layer, region, hyper,
                        99);
  const Eigen::VectorXd target = planted.direction.cast<double>();
  const double cos_init = std::abs(oracle::cosine(dir64(init), target));
  const double cos_trained =
      std::abs(oracle::cosine(dir64(trained), target));
  CAPTURE(cos_init);
  CAPTURE(cos_trained);
  CHECK(cos_trained > 0.8);
  CHECK(cos_trained > cos_init);

  CHECK_THROWS_AS(cbench::train_das(model, tpl, {}, tok, layer, region,
                                    hyper, 1),
                  FitError);
}

TEST_CASE("directions persist and reload under their site keys") {
  std::map<std::string, Direction> dirs;
  dirs["toy/3/subject/das"] = cbench::random_direction(16, 1);
  dirs["toy/0/ctx/probe"] = cbench::random_direction(16, 2);

  const std::string path = fixture::scratch_path("cb_dirs", ".safetensors");
  cbench::save_directions(path, dirs);
  const auto back = cbench::load_directions(path);
  std::filesystem::remove(path);

  REQUIRE(back.size() == 2);
  REQUIRE(back.count("toy/3/subject/das") == 1);
  REQUIRE(back.count("toy/0/ctx/probe") == 1);
  CHECK(back.at("toy/3/subject/das").vec() ==
        dirs.at("toy/3/subject/das").vec());
  CHECK(back.at("toy/0/ctx/probe").vec() == dirs.at("toy/0/ctx/probe").vec());

  CHECK_THROWS(cbench::load_directions("/nonexistent/dirs.safetensors"));
}
