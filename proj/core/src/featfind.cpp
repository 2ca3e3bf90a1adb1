#include "cbench/featfind.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cbench/safetensors.hpp"

namespace cbench {

namespace {

// log(1 + exp(m)) without overflow.
double log1pexp(double m) {
  if (m > 35.0) return m;
  if (m < -35.0) return std::exp(m);
  return std::log1p(std::exp(m));
}

double sigmoid(double u) {
  if (u >= 0.0) {
    return 1.0 / (1.0 + std::exp(-u));
  }
  const double e = std::exp(u);
  return e / (1.0 + e);
}

Direction to_direction(const Eigen::VectorXd& v, const char* who) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw FitError(FitError::Kind::ZeroVector,
                   std::string(who) + ": zero or non-finite direction");
  }
  return Direction((v / n).cast<float>());
}

int class_of(const TaskTemplate& tpl, const std::string& type) {
  return tpl.type_class(type) == 0 ? 0 : 1;
}

}  // namespace

std::vector<int> ActivationDataset::class_rows(int c) const {
  std::vector<int> rows;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == c) rows.push_back(static_cast<int>(i));
  }
  return rows;
}

void ActivationDataset::validate() const {
  if (X.rows() != static_cast<Eigen::Index>(y.size())) {
    throw FitError(FitError::Kind::EmptyClass,
                   "activation dataset: label count does not match rows");
  }
  if (class_rows(0).empty() || class_rows(1).empty()) {
    throw FitError(FitError::Kind::EmptyClass,
                   "activation dataset: both classes must be nonempty");
  }
  if (!X.allFinite()) {
    throw FitError(FitError::Kind::NonFiniteLoss,
                   "activation dataset: non-finite activation row");
  }
}

std::vector<std::vector<ActivationDataset>> collect_activation_grid(
    const Model& model, const TaskTemplate& tpl,
    const std::vector<EvalExample>& train, const Tokenizer& tokenizer) {
  const int L = model.config().n_layers;
  const int R = static_cast<int>(tpl.regions.size());
  const int d = model.config().d_model;
  const int n = static_cast<int>(train.size());

  std::vector<std::string> names;
  for (const auto& r : tpl.regions) names.push_back(r.name);

  std::vector<std::vector<ActivationDataset>> grid(
      L, std::vector<ActivationDataset>(R));
  for (int l = 0; l < L; ++l) {
    for (int r = 0; r < R; ++r) {
      grid[l][r].X.resize(n, d);
      grid[l][r].y.resize(n);
    }
  }
  for (int i = 0; i < n; ++i) {
    const EvalExample& ex = train[i];
    const RegionAlignment align = tokenizer.align_regions(ex, names);
    const auto ids = tokenizer.encode(ex.base_text);
    const auto fwd = model.forward(ids);
    const int cls = class_of(tpl, ex.base_type);
    for (int l = 0; l < L; ++l) {
      for (int r = 0; r < R; ++r) {
        grid[l][r].X.row(i) =
            fwd.cache.after_layer[l].row(align.base_last[r]);
        grid[l][r].y[i] = cls;
      }
    }
  }
  for (auto& per_layer : grid) {
    for (auto& acts : per_layer) acts.validate();
  }
  return grid;
}

ActivationDataset collect_activations(const Model& model,
                                      const TaskTemplate& tpl,
                                      const std::vector<EvalExample>& train,
                                      const Tokenizer& tokenizer, int layer,
                                      int region_index) {
  const int d = model.config().d_model;
  const int n = static_cast<int>(train.size());
  std::vector<std::string> names;
  for (const auto& r : tpl.regions) names.push_back(r.name);

  ActivationDataset acts;
  acts.X.resize(n, d);
  acts.y.resize(n);
  for (int i = 0; i < n; ++i) {
    const EvalExample& ex = train[i];
    const RegionAlignment align = tokenizer.align_regions(ex, names);
    const auto ids = tokenizer.encode(ex.base_text);
    const auto fwd = model.forward(ids);
    acts.X.row(i) =
        fwd.cache.after_layer[layer].row(align.base_last[region_index]);
    acts.y[i] = class_of(tpl, ex.base_type);
  }
  acts.validate();
  return acts;
}

Direction train_das(const Model& model, const TaskTemplate& tpl,
                    const std::vector<EvalExample>& train,
                    const Tokenizer& tokenizer, int layer, int region_index,
                    const DasHyper& hyper, std::uint64_t seed) {
  (void)tpl;  // the objective only needs (b, s, y_s); kept for symmetry
  if (train.empty()) {
    throw FitError(FitError::Kind::EmptyClass, "train_das: empty train set");
  }
  const int d = model.config().d_model;
  Rng rng(seed);
  Eigen::VectorXf a(d);
  for (int i = 0; i < d; ++i) a(i) = static_cast<float>(rng.normal());
  float norm = a.norm();
  while (norm == 0.0f) {  // astronomically unlikely; keeps the contract total
    for (int i = 0; i < d; ++i) a(i) = static_cast<float>(rng.normal());
    norm = a.norm();
  }
  a /= norm;

  const int n = static_cast<int>(train.size());
  const int steps_per_epoch = (n + hyper.batch_size - 1) / hyper.batch_size;
  const int total_steps = steps_per_epoch * hyper.epochs;
  if (total_steps == 0) return Direction(a);

  struct Item {
    TokenizedExample tok;
    HookSite site_b, site_s;
  };
  std::vector<Item> items;
  items.reserve(train.size());
  for (const EvalExample& ex : train) {
    Item it;
    it.tok = tokenize_example(tokenizer, ex);
    it.site_b = {layer, it.tok.alignment.base_last[region_index]};
    it.site_s = {layer, it.tok.alignment.source_last[region_index]};
    items.push_back(std::move(it));
  }

  const int warmup_steps =
      static_cast<int>(hyper.warmup_fraction * total_steps);
  Eigen::VectorXf m = Eigen::VectorXf::Zero(d);
  Eigen::VectorXf v = Eigen::VectorXf::Zero(d);
  int step = 0;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    for (int batch_start = 0; batch_start < n;
         batch_start += hyper.batch_size) {
      const int batch_end = std::min(n, batch_start + hyper.batch_size);
      Eigen::VectorXf g = Eigen::VectorXf::Zero(d);
      for (int i = batch_start; i < batch_end; ++i) {
        const Item& it = items[i];
        const auto res =
            model.direction_grad(it.tok.base_ids, it.tok.source_ids,
                                 it.site_b, it.site_s, a, it.tok.y_source);
        if (!std::isfinite(res.loss)) {
          throw FitError(FitError::Kind::NonFiniteLoss,
                         "train_das: non-finite loss (divergence)");
        }
        g += res.grad;
      }
      g /= static_cast<float>(batch_end - batch_start);

      double mult;
      if (step < warmup_steps) {
        mult = static_cast<double>(step) / std::max(1, warmup_steps);
      } else {
        mult = static_cast<double>(total_steps - step) /
               std::max(1, total_steps - warmup_steps);
      }
      const float lr = static_cast<float>(hyper.learning_rate * mult);

      m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
      v = hyper.beta2 * v +
          (1.0 - hyper.beta2) * g.cwiseProduct(g);
      const double bc1 = 1.0 - std::pow(hyper.beta1, step + 1);
      const double bc2 = 1.0 - std::pow(hyper.beta2, step + 1);
      const Eigen::VectorXf m_hat = m / static_cast<float>(bc1);
      const Eigen::VectorXf v_hat = v / static_cast<float>(bc2);
      const Eigen::ArrayXf denom =
          v_hat.array().sqrt() + static_cast<float>(hyper.adam_eps);
      a.array() -= lr * m_hat.array() / denom;
      const float an = a.norm();
      if (!(an > 0.0f) || !std::isfinite(an)) {
        throw FitError(FitError::Kind::NonFiniteLoss,
                       "train_das: direction collapsed or diverged");
      }
      a /= an;
      ++step;
    }
  }
  return Direction(a);
}

ProbeFit fit_probe(const ActivationDataset& acts, double l2_weight,
                   bool fit_bias) {
  acts.validate();
  const int n = acts.n();
  const int d = acts.d();
  const Eigen::MatrixXd X = acts.X.cast<double>();
  Eigen::VectorXd t(n);
  for (int i = 0; i < n; ++i) t(i) = acts.y[i] == 0 ? 1.0 : -1.0;

  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0.0;

  auto objective = [&](const Eigen::VectorXd& wv, double bv) {
    const Eigen::VectorXd z = X * wv + Eigen::VectorXd::Constant(n, bv);
    double f = 0.0;
    for (int i = 0; i < n; ++i) f += log1pexp(-t(i) * z(i));
    return f + 0.5 * l2_weight * wv.squaredNorm();
  };

  const int max_iters = 10000;
  const double grad_tol = 1e-6;
  bool converged = false;
  double f = objective(w, b);
  for (int iter = 0; iter < max_iters; ++iter) {
    const Eigen::VectorXd z = X * w + Eigen::VectorXd::Constant(n, b);
    Eigen::VectorXd coef(n);
    for (int i = 0; i < n; ++i) coef(i) = -t(i) * sigmoid(-t(i) * z(i));
    Eigen::VectorXd gw = X.transpose() * coef + l2_weight * w;
    double gb = fit_bias ? coef.sum() : 0.0;
    const double gnorm = std::sqrt(gw.squaredNorm() + gb * gb);
    if (gnorm < grad_tol) {
      converged = true;
      break;
    }
    // Backtracking line search on the steepest-descent step.
    double eta = 1.0;
    const double slope = -(gw.squaredNorm() + gb * gb);
    bool stepped = false;
    for (int bt = 0; bt < 60; ++bt) {
      const Eigen::VectorXd w_try = w - eta * gw;
      const double b_try = b - eta * gb;
      const double f_try = objective(w_try, b_try);
      if (f_try <= f + 1e-4 * eta * slope) {
        w = w_try;
        b = b_try;
        f = f_try;
        stepped = true;
        break;
      }
      eta *= 0.5;
    }
    if (!stepped) break;  // step underflow: as converged as fp64 allows
  }

  ProbeFit fit;
  fit.converged = converged;
  fit.bias = b;
  if (w.norm() == 0.0) {
    // Fully regularized-away weights: fall back on the gradient direction
    // at w=0, which is the unregularized steepest descent, so the induced
    // ordering is still data-driven and deterministic.
    Eigen::VectorXd z = Eigen::VectorXd::Constant(n, b);
    Eigen::VectorXd coef(n);
    for (int i = 0; i < n; ++i) coef(i) = -t(i) * sigmoid(-t(i) * z(i));
    const Eigen::VectorXd g0 = X.transpose() * coef;
    fit.direction = to_direction(-g0, "fit_probe");
  } else {
    fit.direction = to_direction(w, "fit_probe");
  }
  return fit;
}

namespace {

Eigen::VectorXd class_mean(const ActivationDataset& acts, int c) {
  const auto rows = acts.class_rows(c);
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(acts.d());
  for (int i : rows) mu += acts.X.row(i).cast<double>();
  return mu / static_cast<double>(rows.size());
}

}  // namespace

Direction diff_means(const ActivationDataset& acts) {
  acts.validate();
  const Eigen::VectorXd diff = class_mean(acts, 0) - class_mean(acts, 1);
  if (diff.norm() == 0.0) {
    throw FitError(FitError::Kind::ZeroVector,
                   "diff_means: class means coincide");
  }
  return to_direction(diff, "diff_means");
}

Direction fit_lda(const ActivationDataset& acts, double shrinkage) {
  acts.validate();
  const int d = acts.d();
  const int n = acts.n();
  if (n < 3) {
    throw FitError(FitError::Kind::SingularMatrix,
                   "fit_lda: need at least 3 rows for pooled covariance");
  }
  const Eigen::VectorXd mu0 = class_mean(acts, 0);
  const Eigen::VectorXd mu1 = class_mean(acts, 1);
  Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(d, d);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd x = acts.X.row(i).cast<double>();
    const Eigen::VectorXd c = x - (acts.y[i] == 0 ? mu0 : mu1);
    scatter.noalias() += c * c.transpose();
  }
  Eigen::MatrixXd cov = scatter / static_cast<double>(n - 2);
  const double eps =
      shrinkage >= 0.0 ? shrinkage : 1e-4 * cov.trace() / d;
  cov += eps * Eigen::MatrixXd::Identity(d, d);

  Eigen::FullPivLU<Eigen::MatrixXd> lu(cov);
  if (!lu.isInvertible()) {
    throw FitError(FitError::Kind::SingularMatrix,
                   "fit_lda: pooled covariance is singular (increase "
                   "shrinkage)");
  }
  const Eigen::VectorXd diff = mu0 - mu1;
  if (diff.norm() == 0.0) {
    throw FitError(FitError::Kind::ZeroVector,
                   "fit_lda: class means coincide");
  }
  const Eigen::VectorXd w = lu.solve(diff);
  if (!w.allFinite()) {
    throw FitError(FitError::Kind::SingularMatrix,
                   "fit_lda: solve produced non-finite values");
  }
  return to_direction(w, "fit_lda");
}

Direction fit_pca(const ActivationDataset& acts) {
  acts.validate();
  const int n = acts.n();
  const int d = acts.d();
  if (n < 2) {
    throw FitError(FitError::Kind::DegenerateData,
                   "fit_pca: need at least 2 rows");
  }
  Eigen::MatrixXd X = acts.X.cast<double>();
  const Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  if (X.norm() == 0.0) {
    throw FitError(FitError::Kind::DegenerateData,
                   "fit_pca: all rows identical");
  }
  const Eigen::MatrixXd cov = X.transpose() * X;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Eigen::VectorXd top = eig.eigenvectors().col(d - 1);  // ascending order

  int max_idx = 0;
  top.cwiseAbs().maxCoeff(&max_idx);
  if (top(max_idx) < 0.0) top = -top;
  return to_direction(top, "fit_pca");
}

Direction fit_kmeans(const ActivationDataset& acts, std::uint64_t seed) {
  acts.validate();
  const int n = acts.n();
  const int d = acts.d();
  if (n < 2) {
    throw FitError(FitError::Kind::DegenerateData,
                   "fit_kmeans: need at least 2 rows");
  }
  const Eigen::MatrixXd X = acts.X.cast<double>();
  Rng rng(seed);

  auto sq_dist = [&](int i, const Eigen::VectorXd& c) {
    return (X.row(i).transpose() - c).squaredNorm();
  };

  double best_inertia = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_c0, best_c1;
  bool any = false;
  for (int restart = 0; restart < 10; ++restart) {
    // k-means++ seeding for k=2.
    Eigen::VectorXd c0 = X.row(static_cast<int>(rng.below(n))).transpose();
    std::vector<double> d2(n);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      d2[i] = sq_dist(i, c0);
      total += d2[i];
    }
    if (total == 0.0) {
      throw FitError(FitError::Kind::DegenerateData,
                     "fit_kmeans: all rows identical");
    }
    double pick = rng.uniform() * total;
    int second = n - 1;
    for (int i = 0; i < n; ++i) {
      pick -= d2[i];
      if (pick <= 0.0) {
        second = i;
        break;
      }
    }
    Eigen::VectorXd c1 = X.row(second).transpose();

    std::vector<int> assign(n, -1);
    for (int iter = 0; iter < 100; ++iter) {
      bool changed = false;
      for (int i = 0; i < n; ++i) {
        const int a = sq_dist(i, c0) <= sq_dist(i, c1) ? 0 : 1;
        if (a != assign[i]) {
          assign[i] = a;
          changed = true;
        }
      }
      if (!changed && iter > 0) break;
      Eigen::VectorXd sum0 = Eigen::VectorXd::Zero(d);
      Eigen::VectorXd sum1 = Eigen::VectorXd::Zero(d);
      int n0 = 0, n1 = 0;
      for (int i = 0; i < n; ++i) {
        if (assign[i] == 0) {
          sum0 += X.row(i).transpose();
          ++n0;
        } else {
          sum1 += X.row(i).transpose();
          ++n1;
        }
      }
      if (n0 == 0 || n1 == 0) {
        // Re-seed the empty cluster at the point farthest from the other
        // centroid and continue.
        const Eigen::VectorXd& full = n0 == 0 ? c1 : c0;
        int far_i = 0;
        double far_d = -1.0;
        for (int i = 0; i < n; ++i) {
          const double dd = sq_dist(i, full);
          if (dd > far_d) {
            far_d = dd;
            far_i = i;
          }
        }
        if (n0 == 0) {
          c0 = X.row(far_i).transpose();
          c1 = sum1 / n1;
        } else {
          c1 = X.row(far_i).transpose();
          c0 = sum0 / n0;
        }
        continue;
      }
      c0 = sum0 / n0;
      c1 = sum1 / n1;
    }
    double inertia = 0.0;
    for (int i = 0; i < n; ++i) {
      inertia += assign[i] == 0 ? sq_dist(i, c0) : sq_dist(i, c1);
    }
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best_c0 = c0;
      best_c1 = c1;
      any = true;
    }
  }
  if (!any) {
    throw FitError(FitError::Kind::DegenerateData,
                   "fit_kmeans: no valid clustering found");
  }
  // Fix cluster order lexicographically so the direction's sign is a pure
  // function of the data.
  bool c0_first = true;
  for (int j = 0; j < d; ++j) {
    if (best_c0(j) != best_c1(j)) {
      c0_first = best_c0(j) < best_c1(j);
      break;
    }
  }
  const Eigen::VectorXd diff =
      c0_first ? (best_c0 - best_c1).eval() : (best_c1 - best_c0).eval();
  if (diff.norm() == 0.0) {
    throw FitError(FitError::Kind::DegenerateData,
                   "fit_kmeans: coincident centroids");
  }
  return to_direction(diff, "fit_kmeans");
}

Direction random_direction(int d, std::uint64_t seed) {
  if (d < 1) {
    throw FitError(FitError::Kind::DegenerateData,
                   "random_direction: dimension must be >= 1");
  }
  Rng rng(seed);
  Eigen::VectorXf v(d);
  do {
    for (int i = 0; i < d; ++i) v(i) = static_cast<float>(rng.normal());
  } while (v.norm() == 0.0f);
  return Direction(std::move(v));
}

void save_directions(const std::string& path,
                     const std::map<std::string, Direction>& directions) {
  std::map<std::string, Tensor> tensors;
  for (const auto& [name, dir] : directions) {
    std::vector<float> data(dir.vec().data(),
                            dir.vec().data() + dir.vec().size());
    tensors.emplace(name, tensor_f32({dir.dim()}, std::move(data)));
  }
  save_safetensors(path, tensors);
}

std::map<std::string, Direction> load_directions(const std::string& path) {
  const SafetensorsFile file = SafetensorsFile::load(path);
  std::map<std::string, Direction> out;
  for (const std::string& name : file.names()) {
    const std::vector<double> data = file.tensor(name).as_f64();
    Eigen::VectorXf v(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      v(i) = static_cast<float>(data[i]);
    }
    out.emplace(name, Direction(std::move(v)));
  }
  return out;
}

}  // namespace cbench
