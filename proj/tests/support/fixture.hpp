#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cbench/model.hpp"
#include "cbench/safetensors.hpp"
#include "cbench/taskgen.hpp"
#include "cbench/tokenizer.hpp"

// Shared scaffolding for the test suites: a small random transformer, a toy
// templatic task over a line-per-token vocabulary, and an analytically
// assembled model with a known causal direction.
namespace fixture {

// Unique path under the system temp directory; nothing is created.
std::string scratch_path(const std::string& stem, const std::string& ext = "");

cbench::ModelConfig small_config(int n_layers = 2, int d_model = 16,
                                 int n_heads = 4, int d_ff = 32,
                                 bool parallel = true, bool tied = true);

// Gaussian weights scaled so activations and logits stay O(1).
std::map<std::string, cbench::Tensor> random_weights(
    const cbench::ModelConfig& cfg, std::uint64_t seed);

// Vocabulary for the toy tasks; line number = token id. Covers every
// surface form the toy templates can produce plus the label tokens.
const std::vector<std::string>& toy_vocab();

std::string toy_task_json();
cbench::TaskTemplate toy_template();
cbench::Tokenizer toy_tokenizer();

cbench::Model make_model(const cbench::ModelConfig& cfg,
                         const std::map<std::string, cbench::Tensor>& t);
cbench::ModelF64 make_model_f64(
    const cbench::ModelConfig& cfg,
    const std::map<std::string, cbench::Tensor>& t);

// config.json + model.safetensors + vocab.txt, as `bench run` expects.
void write_model_dir(const std::string& dir, const cbench::ModelConfig& cfg,
                     const std::map<std::string, cbench::Tensor>& tensors);

std::string model_config_json(const cbench::ModelConfig& cfg);

// Model whose " yes"/" no" logit gap is an affine function of
// (residual . direction) at every layer: attention and MLP outputs are
// zeroed so the residual stream carries embeddings unchanged, the final
// layernorm is flattened by a huge epsilon, and only the label rows of the
// unembedding are nonzero (along +-direction). The toy task's label words
// displace embeddings by +-1 along `direction`, plus a correlated but
// causally inert component along `nuisance`.
struct Planted {
  cbench::ModelConfig config;
  std::map<std::string, cbench::Tensor> tensors;
  Eigen::VectorXf direction;
  Eigen::VectorXf nuisance;
};
Planted planted_model(std::uint64_t seed, int d_model = 16,
                      float label_noise = 0.3f, float nuisance_scale = 0.5f);

}  // namespace fixture
