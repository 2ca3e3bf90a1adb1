#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbench/intervene.hpp"
#include "cbench/model.hpp"
#include "cbench/taskgen.hpp"
#include "cbench/tokenizer.hpp"

namespace cbench {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Average log odds-ratios per (layer, region) site.
struct OddsGrid {
  Eigen::MatrixXd values;  // n_layers x n_regions
  std::vector<std::string> region_labels;
  int n_eval = 0;
};

struct BenchmarkRecord {
  std::string task;
  std::string method;
  std::string checkpoint;
  double overall_odds = 0.0;
  double selectivity = 0.0;
  double accuracy = 0.0;
  std::uint64_t seed = 0;
};

// log[(p_orig(y_b)/p_orig(y_s)) * (p_intv(y_s)/p_intv(y_b))]: positive when
// the intervention moves mass from the base label to the source label.
double odds_ratio(const LabelLogProbs& logp_orig,
                  const LabelLogProbs& logp_intv);

double avg_odds(std::span<const double> per_example);

// Mean over layers of the per-layer max over regions.
double overall_odds(const OddsGrid& grid);

// overall_odds of the element-wise difference task - control.
double selectivity(const OddsGrid& task_grid, const OddsGrid& control_grid);

// Fraction of examples with p(y_b|b) strictly greater than p(y_s|b); ties
// count as incorrect.
double task_accuracy(const Model& model, const Tokenizer& tokenizer,
                     const std::vector<EvalExample>& evalset);

}  // namespace cbench
