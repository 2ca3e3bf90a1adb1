#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbench/rng.hpp"

namespace cbench {

// Raised on malformed task-spec documents: JSON syntax errors, schema
// violations, and template invariant failures. The message carries the
// offending field path or rule.
class TaskSpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a template's support is too small to produce an eval set
// disjoint from the train set within the resampling budget.
class ExhaustionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class RegionKind { Constant, Variable, LabelVariable };

struct RegionSpec {
  std::string name;
  RegionKind kind = RegionKind::Constant;
  // Constant regions: fixed surface text.
  std::string text;
  // Variable regions: options shared by both sentences of a pair.
  std::vector<std::string> options;
  // Label-variable region: options keyed by type.
  std::map<std::string, std::vector<std::string>> typed_options;
};

// A region-structured minimal-pair template. The label-variable region and
// the label options are both keyed by an ordered set of types; the first
// type anchors the class partition used by control tasks and fitting.
struct TaskTemplate {
  std::string name;
  std::vector<std::string> types;
  std::vector<RegionSpec> regions;
  std::map<std::string, std::vector<std::string>> label_options;
  std::array<std::string, 2> control_labels{" dog", " give"};

  std::size_t label_region_index() const;
  // Index of the partition class for a type: 0 iff it is the first type.
  int type_class(const std::string& type) const;
};

// One counterfactual pair: base and source sentences differing in exactly
// the label-variable region, with their expected next-token labels.
struct EvalExample {
  std::string base_text;
  std::string source_text;
  std::string base_label;
  std::string source_label;
  std::vector<std::string> base_regions;
  std::vector<std::string> source_regions;
  std::string base_type;
  std::string source_type;
};

struct Dataset {
  std::vector<EvalExample> train;
  std::vector<EvalExample> eval;
  std::uint64_t seed = 0;
};

// Regions after the first are joined with a single space.
std::string join_regions(const std::vector<std::string>& region_texts);

TaskTemplate load_task_spec(const std::string& json_text);
TaskTemplate load_task_file(const std::string& path);

// Swaps base and source (sentences, labels, regions, types).
EvalExample mirror(const EvalExample& e);

EvalExample sample_pair(const TaskTemplate& tpl, Rng& rng);

// Train: n_train_pairs sampled pairs, each followed by its mirror.
// Eval: n_eval_pairs pairs mirrored the same way, resampled while either
// sentence collides with a train base sentence, bounded by
// 100 * n_eval_pairs draws.
Dataset build_dataset(const TaskTemplate& tpl, std::size_t n_train_pairs,
                      std::size_t n_eval_pairs, std::uint64_t seed);

// Replaces labels with the template's control labels according to the type
// partition; inputs are untouched. Idempotent.
Dataset apply_control_remap(Dataset dataset, const TaskTemplate& tpl);

}  // namespace cbench
