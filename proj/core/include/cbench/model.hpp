#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbench/safetensors.hpp"

namespace cbench {

class ModelError : public std::runtime_error {
 public:
  enum class Kind {
    MissingTensor,
    ShapeMismatch,
    NonFinite,
    BadConfig,
    SiteOutOfRange,
    LengthError,
  };
  ModelError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct ModelConfig {
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int d_ff = 0;
  int vocab_size = 0;
  int max_positions = 0;
  double rotary_fraction = 1.0;
  bool parallel_residual = true;
  double layernorm_epsilon = 1e-5;
  bool tied_embeddings = false;

  int head_dim() const { return d_model / n_heads; }
  int rotary_dims() const;  // per head, even by construction
  void validate() const;    // throws ModelError{BadConfig}
};

ModelConfig parse_model_config(const std::string& json_text);

// Residual-stream replacement point: the output of layer `layer` at token
// `position`, i.e. the vector handed to layer `layer`+1 (or to the final
// layernorm for the last layer).
struct HookSite {
  int layer = 0;
  int position = 0;
};

// Residual stream after each layer: after_layer[l] is seq_len x d_model.
template <typename Scalar>
struct ResidualCacheT {
  using Mat =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  std::vector<Mat> after_layer;
};

// A frozen GPT-NeoX-style decoder: rotary attention with per-head-packed
// query_key_value, exact-erf GELU MLP, parallel or sequential residual,
// final layernorm, (un)tied unembedding. Immutable after load; forward and
// gradient calls own their buffers, so one instance is shareable across
// threads.
template <typename Scalar>
class ModelT {
 public:
  using Mat =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Cache = ResidualCacheT<Scalar>;

  struct LayerWeights {
    Vec ln1_w, ln1_b, ln2_w, ln2_b;
    Mat qkv_w;    // [3*d_model, d_model], rows packed per head (q,k,v)
    Vec qkv_b;    // [3*d_model]
    Mat dense_w;  // [d_model, d_model]
    Vec dense_b;
    Mat mlp_in_w;  // [d_ff, d_model]
    Vec mlp_in_b;
    Mat mlp_out_w;  // [d_model, d_ff]
    Vec mlp_out_b;
  };

  struct ForwardResult {
    Vec logprobs;  // final position, normalized
    Cache cache;
  };

  struct GradResult {
    double loss = 0.0;
    Vec grad;  // d(loss)/d(direction), d_model
  };

  static ModelT load_checkpoint(const SafetensorsFile& file,
                                const ModelConfig& config);
  // Reads <dir>/config.json and <dir>/model.safetensors.
  static ModelT load_dir(const std::string& dir);

  const ModelConfig& config() const { return config_; }

  ForwardResult forward(std::span<const int> ids) const;
  Vec forward_intervened(std::span<const int> ids, const HookSite& site,
                         const Vec& replacement) const;

  // Loss = -log p(target | ids_b with the site's residual replaced by
  // h_b + ((h_s - h_b) . a) a), h_s taken from the source run at site_s.
  // grad is with respect to a only; weights and activations below the site
  // receive no gradient. site_b and site_s must share the layer.
  GradResult direction_grad(std::span<const int> ids_b,
                            std::span<const int> ids_s,
                            const HookSite& site_b, const HookSite& site_s,
                            const Vec& a, int target) const;

  // Final layernorm + unembedding + log-softmax applied to the cached
  // last-layer residual at `position`.
  Vec logprobs_at(const Cache& cache, int position) const;

  // Opaque backward-pass record; defined in the implementation.
  struct LayerTape;

 private:
  void check_ids(std::span<const int> ids) const;
  void check_site(const HookSite& site, std::size_t seq_len) const;
  Mat embed(std::span<const int> ids) const;
  // Runs layers [first_layer, last_layer), optionally caching each layer
  // output and/or recording tapes for the backward pass.
  void run_layers(Mat& x, int first_layer, int last_layer, Cache* cache,
                  std::vector<LayerTape>* tapes) const;
  Vec head_logprobs(const Mat& residual_row, Mat* ln_xhat,
                    Vec* ln_rstd) const;

  const Mat& unembed() const {
    return config_.tied_embeddings ? embed_in_ : embed_out_;
  }

  ModelConfig config_;
  Mat embed_in_;   // [vocab, d_model]
  Mat embed_out_;  // [vocab, d_model]; unused (empty) when tied
  Vec final_ln_w_, final_ln_b_;
  std::vector<LayerWeights> layers_;
};

using Model = ModelT<float>;
using ModelF64 = ModelT<double>;
using ResidualCache = ResidualCacheT<float>;

extern template class ModelT<float>;
extern template class ModelT<double>;

}  // namespace cbench
