#include "cbench/metrics.hpp"

namespace cbench {

double odds_ratio(const LabelLogProbs& logp_orig,
                  const LabelLogProbs& logp_intv) {
  return (logp_orig.logp_yb - logp_orig.logp_ys) +
         (logp_intv.logp_ys - logp_intv.logp_yb);
}

double avg_odds(std::span<const double> per_example) {
  if (per_example.empty()) {
    throw MetricsError("avg_odds: empty per-example list");
  }
  double sum = 0.0;
  for (double v : per_example) sum += v;
  return sum / static_cast<double>(per_example.size());
}

double overall_odds(const OddsGrid& grid) {
  if (grid.values.rows() == 0 || grid.values.cols() == 0) {
    throw MetricsError("overall_odds: empty grid");
  }
  double sum = 0.0;
  for (Eigen::Index l = 0; l < grid.values.rows(); ++l) {
    sum += grid.values.row(l).maxCoeff();
  }
  return sum / static_cast<double>(grid.values.rows());
}

double selectivity(const OddsGrid& task_grid, const OddsGrid& control_grid) {
  if (task_grid.values.rows() != control_grid.values.rows() ||
      task_grid.values.cols() != control_grid.values.cols()) {
    throw MetricsError("selectivity: grid shapes differ");
  }
  OddsGrid diff = task_grid;
  diff.values = task_grid.values - control_grid.values;
  return overall_odds(diff);
}

double task_accuracy(const Model& model, const Tokenizer& tokenizer,
                     const std::vector<EvalExample>& evalset) {
  if (evalset.empty()) throw MetricsError("task_accuracy: empty eval set");
  int correct = 0;
  for (const EvalExample& ex : evalset) {
    const auto ids = tokenizer.encode(ex.base_text);
    const auto fwd = model.forward(ids);
    const int yb = tokenizer.label_token_id(ex.base_label);
    const int ys = tokenizer.label_token_id(ex.source_label);
    if (fwd.logprobs(yb) > fwd.logprobs(ys)) ++correct;
  }
  return static_cast<double>(correct) /
         static_cast<double>(evalset.size());
}

}  // namespace cbench
