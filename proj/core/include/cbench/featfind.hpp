#pragma once

#include <Eigen/Dense>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbench/intervene.hpp"
#include "cbench/model.hpp"
#include "cbench/rng.hpp"
#include "cbench/taskgen.hpp"
#include "cbench/tokenizer.hpp"

namespace cbench {

class FitError : public std::runtime_error {
 public:
  enum class Kind {
    EmptyClass,
    ZeroVector,
    SingularMatrix,
    DegenerateData,
    NonFiniteLoss,
  };
  FitError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Residuals captured at one (layer, region) site over the train set, with
// the binary class of each example's base label type (first template type
// vs the rest).
struct ActivationDataset {
  Eigen::MatrixXf X;   // n x d_model
  std::vector<int> y;  // 0 or 1 per row

  int n() const { return static_cast<int>(X.rows()); }
  int d() const { return static_cast<int>(X.cols()); }
  std::vector<int> class_rows(int c) const;
  void validate() const;  // classes nonempty, rows finite
};

struct DasHyper {
  double learning_rate = 5e-3;
  int batch_size = 4;
  int epochs = 1;
  double warmup_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

ActivationDataset collect_activations(const Model& model,
                                      const TaskTemplate& tpl,
                                      const std::vector<EvalExample>& train,
                                      const Tokenizer& tokenizer, int layer,
                                      int region_index);

// One forward per example, extracting every (layer, region) site at once;
// grid[layer][region] matches collect_activations for that site.
std::vector<std::vector<ActivationDataset>> collect_activation_grid(
    const Model& model, const TaskTemplate& tpl,
    const std::vector<EvalExample>& train, const Tokenizer& tokenizer);

// Optimizes the interchange direction: minibatches of (b, s, y_s), Adam on
// the cross-entropy of y_s under the intervened run, learning rate linearly
// warmed up for the first warmup_fraction of steps then linearly decayed to
// zero, the direction renormalized after every step. The initial direction
// is a seeded random unit vector; epochs=0 returns it untouched.
Direction train_das(const Model& model, const TaskTemplate& tpl,
                    const std::vector<EvalExample>& train,
                    const Tokenizer& tokenizer, int layer, int region_index,
                    const DasHyper& hyper, std::uint64_t seed);

struct ProbeFit {
  Direction direction;
  bool converged = false;
  double bias = 0.0;  // fitted but unused by interventions
};

// L2-regularized logistic regression by full-batch gradient descent with
// backtracking line search; the bias is never regularized.
ProbeFit fit_probe(const ActivationDataset& acts, double l2_weight,
                   bool fit_bias = true);

Direction diff_means(const ActivationDataset& acts);

// shrinkage < 0 selects the default 1e-4 * trace(cov) / d.
Direction fit_lda(const ActivationDataset& acts, double shrinkage = -1.0);

Direction fit_pca(const ActivationDataset& acts);

Direction fit_kmeans(const ActivationDataset& acts, std::uint64_t seed);

Direction random_direction(int d, std::uint64_t seed);

// Raw fp32 persistence keyed "task/layer/region/method".
void save_directions(const std::string& path,
                     const std::map<std::string, Direction>& directions);
std::map<std::string, Direction> load_directions(const std::string& path);

}  // namespace cbench
