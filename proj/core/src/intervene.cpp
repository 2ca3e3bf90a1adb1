#include "cbench/intervene.hpp"

namespace cbench {

TokenizedExample tokenize_example(const Tokenizer& tokenizer,
                                  const EvalExample& example) {
  TokenizedExample out;
  out.base_ids = tokenizer.encode(example.base_text);
  out.source_ids = tokenizer.encode(example.source_text);
  out.alignment = tokenizer.align_regions(example);
  out.y_base = tokenizer.label_token_id(example.base_label);
  out.y_source = tokenizer.label_token_id(example.source_label);
  return out;
}

LabelLogProbs base_logprobs(const Model& model, const TokenizedExample& ex) {
  const auto fwd = model.forward(ex.base_ids);
  return {static_cast<double>(fwd.logprobs(ex.y_base)),
          static_cast<double>(fwd.logprobs(ex.y_source))};
}

LabelLogProbs run_intervened(const Model& model, const TokenizedExample& ex,
                             int layer, int region_index,
                             const Intervention& intervention) {
  const auto base_fwd = model.forward(ex.base_ids);
  const auto source_fwd = model.forward(ex.source_ids);
  return run_intervened_cached(model, ex, base_fwd.cache, source_fwd.cache,
                               layer, region_index, intervention);
}

LabelLogProbs run_intervened_cached(const Model& model,
                                    const TokenizedExample& ex,
                                    const ResidualCache& base_cache,
                                    const ResidualCache& source_cache,
                                    int layer, int region_index,
                                    const Intervention& intervention) {
  if (layer < 0 ||
      static_cast<std::size_t>(layer) >= base_cache.after_layer.size()) {
    throw InterveneError("layer " + std::to_string(layer) +
                         " outside cached range");
  }
  if (region_index < 0 ||
      static_cast<std::size_t>(region_index) >=
          ex.alignment.base_last.size()) {
    throw InterveneError("region index " + std::to_string(region_index) +
                         " outside alignment");
  }
  const int pos_b = ex.alignment.base_last[region_index];
  const int pos_s = ex.alignment.source_last[region_index];

  const Eigen::VectorXf h_s =
      source_cache.after_layer[layer].row(pos_s).transpose();
  Eigen::VectorXf replacement;
  if (intervention.kind == Intervention::Kind::Vanilla) {
    replacement = h_s;
  } else {
    if (intervention.direction.empty()) {
      throw InterveneError("dii intervention carries no direction");
    }
    const Eigen::VectorXf h_b =
        base_cache.after_layer[layer].row(pos_b).transpose();
    replacement = dii_apply(h_b, h_s, intervention.direction);
  }

  const HookSite site{layer, pos_b};
  const auto logprobs = model.forward_intervened(ex.base_ids, site,
                                                 replacement);
  return {static_cast<double>(logprobs(ex.y_base)),
          static_cast<double>(logprobs(ex.y_source))};
}

}  // namespace cbench
