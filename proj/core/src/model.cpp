#include "cbench/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace cbench {

namespace {

using json = nlohmann::json;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kRotaryBase = 10000.0;

template <typename Scalar>
using MatT =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VecT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(kInvSqrt2)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar cdf =
      Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(kInvSqrt2)));
  const Scalar pdf =
      std::exp(Scalar(-0.5) * x * x) * Scalar(kInvSqrt2Pi);
  return cdf + x * pdf;
}

template <typename Scalar>
void layernorm_rows(const MatT<Scalar>& x, const VecT<Scalar>& w,
                    const VecT<Scalar>& b, double eps, MatT<Scalar>& y,
                    MatT<Scalar>* xhat_out, VecT<Scalar>* rstd_out) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index d = x.cols();
  y.resize(rows, d);
  if (xhat_out) xhat_out->resize(rows, d);
  if (rstd_out) rstd_out->resize(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Scalar mu = x.row(i).mean();
    const auto centered = (x.row(i).array() - mu).eval();
    const Scalar var = centered.square().sum() / Scalar(d);
    const Scalar rstd = Scalar(1) / std::sqrt(var + Scalar(eps));
    const auto xhat = (centered * rstd).eval();
    y.row(i) =
        (xhat * w.transpose().array() + b.transpose().array()).matrix();
    if (xhat_out) xhat_out->row(i) = xhat.matrix();
    if (rstd_out) (*rstd_out)(i) = rstd;
  }
}

// VJP of layernorm_rows: dx = rstd * (dxhat - mean(dxhat) - xhat *
// mean(dxhat * xhat)), with dxhat = dy * w.
template <typename Scalar>
MatT<Scalar> layernorm_backward(const MatT<Scalar>& dy, const VecT<Scalar>& w,
                                const MatT<Scalar>& xhat,
                                const VecT<Scalar>& rstd) {
  MatT<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const auto dxhat = (dy.row(i).array() * w.transpose().array()).eval();
    const Scalar m1 = dxhat.mean();
    const Scalar m2 = (dxhat * xhat.row(i).array()).mean();
    dx.row(i) =
        (rstd(i) * (dxhat - m1 - xhat.row(i).array() * m2)).matrix();
  }
  return dx;
}

template <typename Scalar>
void rotary_tables(int seq_len, int rot_dims, MatT<Scalar>& cos_t,
                   MatT<Scalar>& sin_t) {
  const int half = rot_dims / 2;
  cos_t.resize(seq_len, half);
  sin_t.resize(seq_len, half);
  for (int j = 0; j < half; ++j) {
    const double inv_freq =
        std::pow(kRotaryBase, -2.0 * j / double(rot_dims));
    for (int t = 0; t < seq_len; ++t) {
      const double angle = t * inv_freq;
      cos_t(t, j) = Scalar(std::cos(angle));
      sin_t(t, j) = Scalar(std::sin(angle));
    }
  }
}

// Rotates column pairs (col0+j, col0+j+half) of m by each row's position
// angle; `inverse` applies the transpose rotation (used by the VJP).
template <typename Scalar>
void rotate_cols(MatT<Scalar>& m, int col0, int half,
                 const MatT<Scalar>& cos_t, const MatT<Scalar>& sin_t,
                 bool inverse) {
  const Scalar sign = inverse ? Scalar(-1) : Scalar(1);
  for (int j = 0; j < half; ++j) {
    const VecT<Scalar> a = m.col(col0 + j);
    const VecT<Scalar> b = m.col(col0 + j + half);
    m.col(col0 + j) =
        a.cwiseProduct(cos_t.col(j)) - sign * b.cwiseProduct(sin_t.col(j));
    m.col(col0 + j + half) =
        b.cwiseProduct(cos_t.col(j)) + sign * a.cwiseProduct(sin_t.col(j));
  }
}

}  // namespace

template <typename Scalar>
struct ModelT<Scalar>::LayerTape {
  Mat ln1_xhat;
  Vec ln1_rstd;
  Mat ln2_xhat;
  Vec ln2_rstd;
  Mat q, k, v;  // post-rotary, columns blocked per head
  std::vector<Mat> probs;
  Mat mlp_pre;
};

namespace {

template <typename Scalar>
MatT<Scalar> attention_forward(const ModelConfig& cfg,
                               const typename ModelT<Scalar>::LayerWeights& W,
                               const MatT<Scalar>& z,
                               const MatT<Scalar>& cos_t,
                               const MatT<Scalar>& sin_t,
                               typename ModelT<Scalar>::LayerTape* tape) {
  const Eigen::Index T = z.rows();
  const int d = cfg.d_model;
  const int nh = cfg.n_heads;
  const int hd = cfg.head_dim();
  const int half = cfg.rotary_dims() / 2;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(hd));

  MatT<Scalar> qkv = z * W.qkv_w.transpose();
  qkv.rowwise() += W.qkv_b.transpose();
  MatT<Scalar> q(T, d), k(T, d), v(T, d);
  for (int h = 0; h < nh; ++h) {
    q.block(0, h * hd, T, hd) = qkv.block(0, h * 3 * hd, T, hd);
    k.block(0, h * hd, T, hd) = qkv.block(0, h * 3 * hd + hd, T, hd);
    v.block(0, h * hd, T, hd) = qkv.block(0, h * 3 * hd + 2 * hd, T, hd);
  }
  for (int h = 0; h < nh; ++h) {
    rotate_cols(q, h * hd, half, cos_t, sin_t, false);
    rotate_cols(k, h * hd, half, cos_t, sin_t, false);
  }

  MatT<Scalar> ctx(T, d);
  for (int h = 0; h < nh; ++h) {
    MatT<Scalar> scores =
        q.block(0, h * hd, T, hd) * k.block(0, h * hd, T, hd).transpose() *
        scale;
    MatT<Scalar> probs = MatT<Scalar>::Zero(T, T);
    for (Eigen::Index i = 0; i < T; ++i) {
      const Eigen::Index n = i + 1;
      const auto row = scores.row(i).head(n).array();
      const Scalar m = row.maxCoeff();
      const auto e = (row - m).exp().eval();
      probs.row(i).head(n) = (e / e.sum()).matrix();
    }
    ctx.block(0, h * hd, T, hd) = probs * v.block(0, h * hd, T, hd);
    if (tape) tape->probs.push_back(std::move(probs));
  }

  MatT<Scalar> out = ctx * W.dense_w.transpose();
  out.rowwise() += W.dense_b.transpose();
  if (tape) {
    tape->q = std::move(q);
    tape->k = std::move(k);
    tape->v = std::move(v);
  }
  return out;
}

template <typename Scalar>
MatT<Scalar> attention_backward(
    const ModelConfig& cfg, const typename ModelT<Scalar>::LayerWeights& W,
    const typename ModelT<Scalar>::LayerTape& tape, const MatT<Scalar>& dout,
    const MatT<Scalar>& cos_t, const MatT<Scalar>& sin_t) {
  const Eigen::Index T = dout.rows();
  const int d = cfg.d_model;
  const int nh = cfg.n_heads;
  const int hd = cfg.head_dim();
  const int half = cfg.rotary_dims() / 2;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(hd));

  const MatT<Scalar> dctx = dout * W.dense_w;
  MatT<Scalar> dq(T, d), dk(T, d), dv(T, d);
  for (int h = 0; h < nh; ++h) {
    const auto Qh = tape.q.block(0, h * hd, T, hd);
    const auto Kh = tape.k.block(0, h * hd, T, hd);
    const auto Vh = tape.v.block(0, h * hd, T, hd);
    const auto dctxh = dctx.block(0, h * hd, T, hd);
    const MatT<Scalar>& P = tape.probs[h];

    dv.block(0, h * hd, T, hd) = P.transpose() * dctxh;
    const MatT<Scalar> dP = dctxh * Vh.transpose();
    MatT<Scalar> dS = MatT<Scalar>::Zero(T, T);
    for (Eigen::Index i = 0; i < T; ++i) {
      const Eigen::Index n = i + 1;
      const auto p = P.row(i).head(n).array();
      const auto dp = dP.row(i).head(n).array();
      const Scalar dot = (dp * p).sum();
      dS.row(i).head(n) = (p * (dp - dot)).matrix();
    }
    dS *= scale;
    dq.block(0, h * hd, T, hd) = dS * Kh;
    dk.block(0, h * hd, T, hd) = dS.transpose() * Qh;
  }
  for (int h = 0; h < nh; ++h) {
    rotate_cols(dq, h * hd, half, cos_t, sin_t, true);
    rotate_cols(dk, h * hd, half, cos_t, sin_t, true);
  }

  MatT<Scalar> dqkv(T, 3 * d);
  for (int h = 0; h < nh; ++h) {
    dqkv.block(0, h * 3 * hd, T, hd) = dq.block(0, h * hd, T, hd);
    dqkv.block(0, h * 3 * hd + hd, T, hd) = dk.block(0, h * hd, T, hd);
    dqkv.block(0, h * 3 * hd + 2 * hd, T, hd) = dv.block(0, h * hd, T, hd);
  }
  return dqkv * W.qkv_w;
}

template <typename Scalar>
MatT<Scalar> mlp_forward(const typename ModelT<Scalar>::LayerWeights& W,
                         const MatT<Scalar>& z,
                         typename ModelT<Scalar>::LayerTape* tape) {
  MatT<Scalar> pre = z * W.mlp_in_w.transpose();
  pre.rowwise() += W.mlp_in_b.transpose();
  const MatT<Scalar> act =
      pre.unaryExpr([](Scalar x) { return gelu(x); });
  MatT<Scalar> out = act * W.mlp_out_w.transpose();
  out.rowwise() += W.mlp_out_b.transpose();
  if (tape) tape->mlp_pre = std::move(pre);
  return out;
}

template <typename Scalar>
MatT<Scalar> mlp_backward(const typename ModelT<Scalar>::LayerWeights& W,
                          const typename ModelT<Scalar>::LayerTape& tape,
                          const MatT<Scalar>& dout) {
  const MatT<Scalar> dact = dout * W.mlp_out_w;
  const MatT<Scalar> dpre = dact.cwiseProduct(
      tape.mlp_pre.unaryExpr([](Scalar x) { return gelu_grad(x); }));
  return dpre * W.mlp_in_w;
}

template <typename Scalar>
MatT<Scalar> layer_backward(const ModelConfig& cfg,
                            const typename ModelT<Scalar>::LayerWeights& W,
                            const typename ModelT<Scalar>::LayerTape& tape,
                            const MatT<Scalar>& dx_out,
                            const MatT<Scalar>& cos_t,
                            const MatT<Scalar>& sin_t) {
  if (cfg.parallel_residual) {
    const MatT<Scalar> dz2 = mlp_backward<Scalar>(W, tape, dx_out);
    const MatT<Scalar> dz1 =
        attention_backward<Scalar>(cfg, W, tape, dx_out, cos_t, sin_t);
    return dx_out + layernorm_backward(dz2, W.ln2_w, tape.ln2_xhat,
                                       tape.ln2_rstd) +
           layernorm_backward(dz1, W.ln1_w, tape.ln1_xhat, tape.ln1_rstd);
  }
  const MatT<Scalar> dz2 = mlp_backward<Scalar>(W, tape, dx_out);
  const MatT<Scalar> dx_mid =
      dx_out +
      layernorm_backward(dz2, W.ln2_w, tape.ln2_xhat, tape.ln2_rstd);
  const MatT<Scalar> dz1 =
      attention_backward<Scalar>(cfg, W, tape, dx_mid, cos_t, sin_t);
  return dx_mid +
         layernorm_backward(dz1, W.ln1_w, tape.ln1_xhat, tape.ln1_rstd);
}

}  // namespace

int ModelConfig::rotary_dims() const {
  return static_cast<int>(head_dim() * rotary_fraction);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw ModelError(ModelError::Kind::BadConfig, "model config: " + msg);
  };
  if (n_layers <= 0) fail("n_layers must be positive");
  if (d_model <= 0) fail("d_model must be positive");
  if (n_heads <= 0) fail("n_heads must be positive");
  if (d_ff <= 0) fail("d_ff must be positive");
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (max_positions <= 0) fail("max_positions must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (!(rotary_fraction > 0.0 && rotary_fraction <= 1.0)) {
    fail("rotary_fraction must be in (0, 1]");
  }
  if (rotary_dims() <= 0 || rotary_dims() % 2 != 0) {
    fail("rotary dims per head must be a positive even number");
  }
  if (!(layernorm_epsilon > 0.0)) fail("layernorm_epsilon must be positive");
}

ModelConfig parse_model_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ModelError(ModelError::Kind::BadConfig,
                     std::string("model config: JSON parse error: ") +
                         e.what());
  }
  // Native field names, with the HuggingFace GPT-NeoX spellings accepted
  // as aliases so exported checkpoint directories work unmodified.
  auto pick = [&](const char* name, const char* alias) -> const json& {
    if (doc.contains(name)) return doc[name];
    if (alias != nullptr && doc.contains(alias)) return doc[alias];
    throw ModelError(ModelError::Kind::BadConfig,
                     std::string("model config: missing field '") + name +
                         "'");
  };
  auto pick_or = [&](const char* name, const char* alias,
                     const json& fallback) -> json {
    if (doc.contains(name)) return doc[name];
    if (alias != nullptr && doc.contains(alias)) return doc[alias];
    return fallback;
  };
  ModelConfig cfg;
  try {
    cfg.n_layers = pick("n_layers", "num_hidden_layers").get<int>();
    cfg.d_model = pick("d_model", "hidden_size").get<int>();
    cfg.n_heads = pick("n_heads", "num_attention_heads").get<int>();
    cfg.d_ff = pick("d_ff", "intermediate_size").get<int>();
    cfg.vocab_size = pick("vocab_size", nullptr).get<int>();
    cfg.max_positions =
        pick("max_positions", "max_position_embeddings").get<int>();
    cfg.rotary_fraction =
        pick_or("rotary_fraction", "rotary_pct", json(0.25)).get<double>();
    cfg.parallel_residual =
        pick_or("parallel_residual", "use_parallel_residual", json(true))
            .get<bool>();
    cfg.layernorm_epsilon =
        pick_or("layernorm_epsilon", "layer_norm_eps", json(1e-5))
            .get<double>();
    cfg.tied_embeddings =
        pick_or("tied_embeddings", "tie_word_embeddings", json(false))
            .get<bool>();
  } catch (const json::exception& e) {
    throw ModelError(ModelError::Kind::BadConfig,
                     std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

namespace {

template <typename Scalar>
MatT<Scalar> fetch_mat(const SafetensorsFile& file, const std::string& name,
                       std::int64_t rows, std::int64_t cols) {
  if (!file.contains(name)) {
    throw ModelError(ModelError::Kind::MissingTensor,
                     "missing tensor '" + name + "'");
  }
  const Tensor& t = file.tensor(name);
  if (t.shape.size() != 2 || t.shape[0] != rows || t.shape[1] != cols) {
    std::ostringstream ss;
    ss << "tensor '" << name << "': expected shape [" << rows << ", " << cols
       << "]";
    throw ModelError(ModelError::Kind::ShapeMismatch, ss.str());
  }
  const std::vector<double> data = t.as_f64();
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw ModelError(ModelError::Kind::NonFinite,
                       "tensor '" + name + "' contains a non-finite value");
    }
  }
  return Eigen::Map<const MatT<double>>(data.data(), rows, cols)
      .cast<Scalar>();
}

template <typename Scalar>
VecT<Scalar> fetch_vec(const SafetensorsFile& file, const std::string& name,
                       std::int64_t n) {
  if (!file.contains(name)) {
    throw ModelError(ModelError::Kind::MissingTensor,
                     "missing tensor '" + name + "'");
  }
  const Tensor& t = file.tensor(name);
  if (t.shape.size() != 1 || t.shape[0] != n) {
    throw ModelError(ModelError::Kind::ShapeMismatch,
                     "tensor '" + name + "': expected shape [" +
                         std::to_string(n) + "]");
  }
  const std::vector<double> data = t.as_f64();
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw ModelError(ModelError::Kind::NonFinite,
                       "tensor '" + name + "' contains a non-finite value");
    }
  }
  return Eigen::Map<const VecT<double>>(data.data(), n).cast<Scalar>();
}

}  // namespace

template <typename Scalar>
ModelT<Scalar> ModelT<Scalar>::load_checkpoint(const SafetensorsFile& file,
                                               const ModelConfig& config) {
  config.validate();
  ModelT model;
  model.config_ = config;
  const int d = config.d_model;
  model.embed_in_ =
      fetch_mat<Scalar>(file, "gpt_neox.embed_in.weight", config.vocab_size,
                        d);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "gpt_neox.layers." + std::to_string(l) + ".";
    LayerWeights w;
    w.ln1_w = fetch_vec<Scalar>(file, p + "input_layernorm.weight", d);
    w.ln1_b = fetch_vec<Scalar>(file, p + "input_layernorm.bias", d);
    w.ln2_w =
        fetch_vec<Scalar>(file, p + "post_attention_layernorm.weight", d);
    w.ln2_b =
        fetch_vec<Scalar>(file, p + "post_attention_layernorm.bias", d);
    w.qkv_w = fetch_mat<Scalar>(file, p + "attention.query_key_value.weight",
                                3 * d, d);
    w.qkv_b =
        fetch_vec<Scalar>(file, p + "attention.query_key_value.bias", 3 * d);
    w.dense_w = fetch_mat<Scalar>(file, p + "attention.dense.weight", d, d);
    w.dense_b = fetch_vec<Scalar>(file, p + "attention.dense.bias", d);
    w.mlp_in_w =
        fetch_mat<Scalar>(file, p + "mlp.dense_h_to_4h.weight", config.d_ff,
                          d);
    w.mlp_in_b = fetch_vec<Scalar>(file, p + "mlp.dense_h_to_4h.bias",
                                   config.d_ff);
    w.mlp_out_w = fetch_mat<Scalar>(file, p + "mlp.dense_4h_to_h.weight", d,
                                    config.d_ff);
    w.mlp_out_b = fetch_vec<Scalar>(file, p + "mlp.dense_4h_to_h.bias", d);
    model.layers_.push_back(std::move(w));
  }
  model.final_ln_w_ =
      fetch_vec<Scalar>(file, "gpt_neox.final_layer_norm.weight", d);
  model.final_ln_b_ =
      fetch_vec<Scalar>(file, "gpt_neox.final_layer_norm.bias", d);
  if (!config.tied_embeddings) {
    model.embed_out_ =
        fetch_mat<Scalar>(file, "embed_out.weight", config.vocab_size, d);
  }
  return model;
}

template <typename Scalar>
ModelT<Scalar> ModelT<Scalar>::load_dir(const std::string& dir) {
  std::ifstream in(dir + "/config.json");
  if (!in) {
    throw ModelError(ModelError::Kind::BadConfig,
                     "cannot open " + dir + "/config.json");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  const ModelConfig cfg = parse_model_config(ss.str());
  const SafetensorsFile file =
      SafetensorsFile::load(dir + "/model.safetensors");
  return load_checkpoint(file, cfg);
}

template <typename Scalar>
void ModelT<Scalar>::check_ids(std::span<const int> ids) const {
  if (ids.empty() ||
      ids.size() > static_cast<std::size_t>(config_.max_positions)) {
    throw ModelError(ModelError::Kind::LengthError,
                     "sequence length " + std::to_string(ids.size()) +
                         " outside [1, " +
                         std::to_string(config_.max_positions) + "]");
  }
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw ModelError(ModelError::Kind::LengthError,
                       "token id " + std::to_string(id) +
                           " outside vocabulary");
    }
  }
}

template <typename Scalar>
void ModelT<Scalar>::check_site(const HookSite& site,
                                std::size_t seq_len) const {
  if (site.layer < 0 || site.layer >= config_.n_layers) {
    throw ModelError(ModelError::Kind::SiteOutOfRange,
                     "hook layer " + std::to_string(site.layer) +
                         " outside [0, " +
                         std::to_string(config_.n_layers) + ")");
  }
  if (site.position < 0 ||
      static_cast<std::size_t>(site.position) >= seq_len) {
    throw ModelError(ModelError::Kind::SiteOutOfRange,
                     "hook position " + std::to_string(site.position) +
                         " outside sequence of length " +
                         std::to_string(seq_len));
  }
}

template <typename Scalar>
typename ModelT<Scalar>::Mat ModelT<Scalar>::embed(
    std::span<const int> ids) const {
  Mat x(static_cast<Eigen::Index>(ids.size()), config_.d_model);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    x.row(static_cast<Eigen::Index>(t)) = embed_in_.row(ids[t]);
  }
  return x;
}

template <typename Scalar>
void ModelT<Scalar>::run_layers(Mat& x, int first_layer, int last_layer,
                                Cache* cache,
                                std::vector<LayerTape>* tapes) const {
  Mat cos_t, sin_t;
  rotary_tables<Scalar>(static_cast<int>(x.rows()), config_.rotary_dims(),
                        cos_t, sin_t);
  for (int l = first_layer; l < last_layer; ++l) {
    const LayerWeights& W = layers_[l];
    LayerTape* tape = nullptr;
    if (tapes) {
      tapes->emplace_back();
      tape = &tapes->back();
    }
    Mat z1;
    layernorm_rows<Scalar>(x, W.ln1_w, W.ln1_b, config_.layernorm_epsilon,
                           z1, tape ? &tape->ln1_xhat : nullptr,
                           tape ? &tape->ln1_rstd : nullptr);
    const Mat attn_out =
        attention_forward<Scalar>(config_, W, z1, cos_t, sin_t, tape);
    if (config_.parallel_residual) {
      Mat z2;
      layernorm_rows<Scalar>(x, W.ln2_w, W.ln2_b, config_.layernorm_epsilon,
                             z2, tape ? &tape->ln2_xhat : nullptr,
                             tape ? &tape->ln2_rstd : nullptr);
      x += attn_out + mlp_forward<Scalar>(W, z2, tape);
    } else {
      x += attn_out;
      Mat z2;
      layernorm_rows<Scalar>(x, W.ln2_w, W.ln2_b, config_.layernorm_epsilon,
                             z2, tape ? &tape->ln2_xhat : nullptr,
                             tape ? &tape->ln2_rstd : nullptr);
      x += mlp_forward<Scalar>(W, z2, tape);
    }
    if (cache) cache->after_layer.push_back(x);
  }
}

template <typename Scalar>
typename ModelT<Scalar>::Vec ModelT<Scalar>::head_logprobs(
    const Mat& residual_row, Mat* ln_xhat, Vec* ln_rstd) const {
  Mat normed;
  layernorm_rows<Scalar>(residual_row, final_ln_w_, final_ln_b_,
                         config_.layernorm_epsilon, normed, ln_xhat,
                         ln_rstd);
  Vec logits = unembed() * normed.row(0).transpose();
  const Scalar m = logits.maxCoeff();
  const Scalar lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

template <typename Scalar>
typename ModelT<Scalar>::ForwardResult ModelT<Scalar>::forward(
    std::span<const int> ids) const {
  check_ids(ids);
  ForwardResult out;
  Mat x = embed(ids);
  out.cache.after_layer.reserve(config_.n_layers);
  run_layers(x, 0, config_.n_layers, &out.cache, nullptr);
  out.logprobs = head_logprobs(x.row(x.rows() - 1), nullptr, nullptr);
  return out;
}

template <typename Scalar>
typename ModelT<Scalar>::Vec ModelT<Scalar>::forward_intervened(
    std::span<const int> ids, const HookSite& site,
    const Vec& replacement) const {
  check_ids(ids);
  check_site(site, ids.size());
  if (replacement.size() != config_.d_model) {
    throw ModelError(ModelError::Kind::ShapeMismatch,
                     "replacement vector has dimension " +
                         std::to_string(replacement.size()) + ", expected " +
                         std::to_string(config_.d_model));
  }
  Mat x = embed(ids);
  run_layers(x, 0, site.layer + 1, nullptr, nullptr);
  x.row(site.position) = replacement.transpose();
  run_layers(x, site.layer + 1, config_.n_layers, nullptr, nullptr);
  return head_logprobs(x.row(x.rows() - 1), nullptr, nullptr);
}

template <typename Scalar>
typename ModelT<Scalar>::Vec ModelT<Scalar>::logprobs_at(
    const Cache& cache, int position) const {
  if (cache.after_layer.empty()) {
    throw ModelError(ModelError::Kind::SiteOutOfRange, "empty cache");
  }
  const Mat& last = cache.after_layer.back();
  if (position < 0 || position >= last.rows()) {
    throw ModelError(ModelError::Kind::SiteOutOfRange,
                     "position " + std::to_string(position) +
                         " outside cached sequence");
  }
  return head_logprobs(last.row(position), nullptr, nullptr);
}

template <typename Scalar>
typename ModelT<Scalar>::GradResult ModelT<Scalar>::direction_grad(
    std::span<const int> ids_b, std::span<const int> ids_s,
    const HookSite& site_b, const HookSite& site_s, const Vec& a,
    int target) const {
  check_ids(ids_b);
  check_ids(ids_s);
  check_site(site_b, ids_b.size());
  check_site(site_s, ids_s.size());
  if (site_b.layer != site_s.layer) {
    throw ModelError(ModelError::Kind::SiteOutOfRange,
                     "base and source sites must share a layer");
  }
  if (a.size() != config_.d_model) {
    throw ModelError(ModelError::Kind::ShapeMismatch,
                     "direction has dimension " + std::to_string(a.size()) +
                         ", expected " + std::to_string(config_.d_model));
  }
  if (target < 0 || target >= config_.vocab_size) {
    throw ModelError(ModelError::Kind::LengthError,
                     "target token id outside vocabulary");
  }
  const int l = site_b.layer;
  const int L = config_.n_layers;

  const ForwardResult src = forward(ids_s);
  const Vec h_s = src.cache.after_layer[l].row(site_s.position).transpose();

  Mat x = embed(ids_b);
  run_layers(x, 0, l + 1, nullptr, nullptr);
  const Vec h_b = x.row(site_b.position).transpose();
  const Vec delta = h_s - h_b;
  const Scalar delta_dot_a = delta.dot(a);
  x.row(site_b.position) = (h_b + delta_dot_a * a).transpose();

  // Only the layers above the site need a tape: weights are frozen and the
  // direction enters solely through the replaced residual row.
  std::vector<LayerTape> tapes;
  run_layers(x, l + 1, L, nullptr, &tapes);

  const Eigen::Index seq = x.rows();
  Mat ln_xhat;
  Vec ln_rstd;
  const Vec logprobs = head_logprobs(x.row(seq - 1), &ln_xhat, &ln_rstd);
  GradResult out;
  out.loss = -static_cast<double>(logprobs(target));

  Vec dlogits = logprobs.array().exp();
  dlogits(target) -= Scalar(1);
  const Vec dnormed = unembed().transpose() * dlogits;
  const Mat drow =
      layernorm_backward<Scalar>(Mat(dnormed.transpose()), final_ln_w_,
                                 ln_xhat, ln_rstd);

  Mat cos_t, sin_t;
  rotary_tables<Scalar>(static_cast<int>(seq), config_.rotary_dims(), cos_t,
                        sin_t);
  Mat dx = Mat::Zero(seq, config_.d_model);
  dx.row(seq - 1) = drow.row(0);
  for (int l2 = L - 1; l2 > l; --l2) {
    dx = layer_backward<Scalar>(config_, layers_[l2], tapes[l2 - l - 1], dx,
                                cos_t, sin_t);
  }

  const Vec g = dx.row(site_b.position).transpose();
  out.grad = g.dot(a) * delta + delta_dot_a * g;
  return out;
}

template class ModelT<float>;
template class ModelT<double>;

}  // namespace cbench
