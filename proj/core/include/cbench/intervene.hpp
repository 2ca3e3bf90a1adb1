#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbench/model.hpp"
#include "cbench/tokenizer.hpp"

namespace cbench {

class InterveneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A unit-norm residual-stream direction. Construction normalizes, so every
// consumer sees ||a|| = 1 regardless of how the direction was produced.
class Direction {
 public:
  Direction() = default;
  explicit Direction(Eigen::VectorXf v) : v_(std::move(v)) {
    const float n = v_.norm();
    if (!std::isfinite(n) || n == 0.0f) {
      throw InterveneError("direction must be finite and nonzero");
    }
    v_ /= n;
  }

  const Eigen::VectorXf& vec() const { return v_; }
  int dim() const { return static_cast<int>(v_.size()); }
  bool empty() const { return v_.size() == 0; }

 private:
  Eigen::VectorXf v_;
};

namespace detail {
template <typename Vec>
Vec dii_apply_impl(const Vec& h_b, const Vec& h_s, const Vec& a) {
  if (h_b.size() != h_s.size() || h_b.size() != a.size()) {
    throw InterveneError("dii_apply: dimension mismatch");
  }
  const typename Vec::Scalar c = (h_s - h_b).dot(a);
  return h_b + c * a;
}
}  // namespace detail

// 1D distributed interchange: moves only the component along a, i.e.
// h_b + ((h_s . a) - (h_b . a)) a.
inline Eigen::VectorXf dii_apply(const Eigen::VectorXf& h_b,
                                 const Eigen::VectorXf& h_s,
                                 const Eigen::VectorXf& a) {
  return detail::dii_apply_impl(h_b, h_s, a);
}
inline Eigen::VectorXd dii_apply(const Eigen::VectorXd& h_b,
                                 const Eigen::VectorXd& h_s,
                                 const Eigen::VectorXd& a) {
  return detail::dii_apply_impl(h_b, h_s, a);
}
inline Eigen::VectorXf dii_apply(const Eigen::VectorXf& h_b,
                                 const Eigen::VectorXf& h_s,
                                 const Direction& a) {
  return detail::dii_apply_impl(h_b, h_s, a.vec());
}

// Either a 1D interchange along a direction or a full-vector swap that
// installs the source activation verbatim.
struct Intervention {
  enum class Kind { Dii, Vanilla };
  Kind kind = Kind::Vanilla;
  Direction direction;  // used only when kind == Dii

  static Intervention dii(Direction a) {
    Intervention i;
    i.kind = Kind::Dii;
    i.direction = std::move(a);
    return i;
  }
  static Intervention vanilla() { return Intervention{}; }
};

struct TokenizedExample {
  std::vector<int> base_ids;
  std::vector<int> source_ids;
  RegionAlignment alignment;
  int y_base = -1;    // label token ids
  int y_source = -1;
};

TokenizedExample tokenize_example(const Tokenizer& tokenizer,
                                  const EvalExample& example);

struct LabelLogProbs {
  double logp_yb = 0.0;
  double logp_ys = 0.0;
};

// Label log-probabilities of the un-intervened base run.
LabelLogProbs base_logprobs(const Model& model, const TokenizedExample& ex);

// Runs the source forward, builds the replacement at (layer, region) per
// the intervention kind, and evaluates the base run with that residual
// swapped in. Region sites use each sentence's own last-token index.
LabelLogProbs run_intervened(const Model& model, const TokenizedExample& ex,
                             int layer, int region_index,
                             const Intervention& intervention);

// Same, reusing already-computed residual caches for the two plain runs.
LabelLogProbs run_intervened_cached(const Model& model,
                                    const TokenizedExample& ex,
                                    const ResidualCache& base_cache,
                                    const ResidualCache& source_cache,
                                    int layer, int region_index,
                                    const Intervention& intervention);

}  // namespace cbench
