#include "fixture.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>

#include "cbench/rng.hpp"
#include "json.hpp"

namespace fixture {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kCtx = {"red",  "blue",  "green", "pink",
                                       "teal", "gray",  "amber", "ivory"};
const std::vector<std::string> kMid = {"door", "tree", "lamp",
                                       "rock", "bird", "fish"};
const std::vector<std::string> kWordsA = {"alpha", "beta",  "gamma", "delta",
                                          "epsi",  "zeta",  "theta", "kappa"};
const std::vector<std::string> kWordsB = {"one",  "two", "three", "four",
                                          "five", "six", "seven", "eight"};
const std::vector<std::string> kLabels = {"yes", "no", "dog", "give"};

cbench::Tensor randn(std::vector<std::int64_t> shape, double scale,
                     cbench::Rng& rng) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<float> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = static_cast<float>(scale * rng.normal());
  return cbench::tensor_f32(std::move(shape), std::move(data));
}

cbench::Tensor zeros(std::vector<std::int64_t> shape) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return cbench::tensor_f32(std::move(shape),
                            std::vector<float>(static_cast<std::size_t>(n)));
}

cbench::Tensor ln_weight(int d, double jitter, cbench::Rng& rng) {
  std::vector<float> data(static_cast<std::size_t>(d));
  for (auto& v : data) v = static_cast<float>(1.0 + jitter * rng.normal());
  return cbench::tensor_f32({d}, std::move(data));
}

int vocab_id(const std::string& token) {
  const auto& v = toy_vocab();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == token) return static_cast<int>(i);
  }
  throw std::runtime_error("fixture vocab is missing token '" + token + "'");
}

}  // namespace

std::string scratch_path(const std::string& stem, const std::string& ext) {
  static std::atomic<unsigned> counter{0};
  const auto now = std::chrono::steady_clock::now().time_since_epoch();
  const auto tag = std::to_string(
      std::chrono::duration_cast<std::chrono::nanoseconds>(now).count());
  return (fs::temp_directory_path() /
          (stem + "_" + tag + "_" + std::to_string(counter.fetch_add(1)) +
           ext))
      .string();
}

cbench::ModelConfig small_config(int n_layers, int d_model, int n_heads,
                                 int d_ff, bool parallel, bool tied) {
  cbench::ModelConfig cfg;
  cfg.n_layers = n_layers;
  cfg.d_model = d_model;
  cfg.n_heads = n_heads;
  cfg.d_ff = d_ff;
  cfg.vocab_size = static_cast<int>(toy_vocab().size());
  cfg.max_positions = 64;
  cfg.rotary_fraction = 0.5;
  cfg.parallel_residual = parallel;
  cfg.layernorm_epsilon = 1e-5;
  cfg.tied_embeddings = tied;
  cfg.validate();
  return cfg;
}

std::map<std::string, cbench::Tensor> random_weights(
    const cbench::ModelConfig& cfg, std::uint64_t seed) {
  cbench::Rng rng(seed);
  const int d = cfg.d_model;
  const int ff = cfg.d_ff;
  const double wd = 0.4 / std::sqrt(double(d));
  const double wf = 0.4 / std::sqrt(double(ff));

  std::map<std::string, cbench::Tensor> t;
  t.emplace("gpt_neox.embed_in.weight",
            randn({cfg.vocab_size, d}, 0.8, rng));
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "gpt_neox.layers." + std::to_string(i) + ".";
    t.emplace(p + "input_layernorm.weight", ln_weight(d, 0.05, rng));
    t.emplace(p + "input_layernorm.bias", randn({d}, 0.02, rng));
    t.emplace(p + "post_attention_layernorm.weight", ln_weight(d, 0.05, rng));
    t.emplace(p + "post_attention_layernorm.bias", randn({d}, 0.02, rng));
    t.emplace(p + "attention.query_key_value.weight",
              randn({3 * d, d}, wd, rng));
    t.emplace(p + "attention.query_key_value.bias", randn({3 * d}, 0.01, rng));
    t.emplace(p + "attention.dense.weight", randn({d, d}, wd, rng));
    t.emplace(p + "attention.dense.bias", randn({d}, 0.01, rng));
    t.emplace(p + "mlp.dense_h_to_4h.weight", randn({ff, d}, wd, rng));
    t.emplace(p + "mlp.dense_h_to_4h.bias", randn({ff}, 0.01, rng));
    t.emplace(p + "mlp.dense_4h_to_h.weight", randn({d, ff}, wf, rng));
    t.emplace(p + "mlp.dense_4h_to_h.bias", randn({d}, 0.01, rng));
  }
  t.emplace("gpt_neox.final_layer_norm.weight", ln_weight(d, 0.05, rng));
  t.emplace("gpt_neox.final_layer_norm.bias", randn({d}, 0.02, rng));
  if (!cfg.tied_embeddings) {
    t.emplace("embed_out.weight", randn({cfg.vocab_size, d}, 0.8, rng));
  }
  return t;
}

const std::vector<std::string>& toy_vocab() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> words;
    words.insert(words.end(), kCtx.begin(), kCtx.end());
    words.insert(words.end(), kMid.begin(), kMid.end());
    words.push_back("the");
    words.insert(words.end(), kWordsA.begin(), kWordsA.end());
    words.insert(words.end(), kWordsB.begin(), kWordsB.end());
    words.insert(words.end(), kLabels.begin(), kLabels.end());
    std::vector<std::string> v;
    for (const auto& w : words) v.push_back(w);
    for (const auto& w : words) v.push_back(" " + w);
    return v;
  }();
  return vocab;
}

std::string toy_task_json() {
  nlohmann::json doc;
  doc["name"] = "toy_pair";
  doc["types"] = {"A", "B"};
  doc["regions"] = nlohmann::json::array();
  doc["regions"].push_back(
      {{"name", "ctx"}, {"kind", "variable"}, {"options", kCtx}});
  doc["regions"].push_back(
      {{"name", "mid"}, {"kind", "variable"}, {"options", kMid}});
  doc["regions"].push_back(
      {{"name", "det"}, {"kind", "constant"}, {"text", "the"}});
  doc["regions"].push_back(
      {{"name", "subject"},
       {"kind", "label_variable"},
       {"options", {{"A", kWordsA}, {"B", kWordsB}}}});
  doc["label_options"] = {{"A", {" yes"}}, {"B", {" no"}}};
  return doc.dump(2);
}

cbench::TaskTemplate toy_template() {
  return cbench::load_task_spec(toy_task_json());
}

cbench::Tokenizer toy_tokenizer() {
  return cbench::Tokenizer::lookup_from_vocab(toy_vocab());
}

cbench::Model make_model(const cbench::ModelConfig& cfg,
                         const std::map<std::string, cbench::Tensor>& t) {
  const std::string path = scratch_path("cb_model", ".safetensors");
  cbench::save_safetensors(path, t);
  const auto file = cbench::SafetensorsFile::load(path);
  fs::remove(path);
  return cbench::Model::load_checkpoint(file, cfg);
}

cbench::ModelF64 make_model_f64(
    const cbench::ModelConfig& cfg,
    const std::map<std::string, cbench::Tensor>& t) {
  const std::string path = scratch_path("cb_model64", ".safetensors");
  cbench::save_safetensors(path, t);
  const auto file = cbench::SafetensorsFile::load(path);
  fs::remove(path);
  return cbench::ModelF64::load_checkpoint(file, cfg);
}

std::string model_config_json(const cbench::ModelConfig& cfg) {
  nlohmann::json doc;
  doc["n_layers"] = cfg.n_layers;
  doc["d_model"] = cfg.d_model;
  doc["n_heads"] = cfg.n_heads;
  doc["d_ff"] = cfg.d_ff;
  doc["vocab_size"] = cfg.vocab_size;
  doc["max_positions"] = cfg.max_positions;
  doc["rotary_fraction"] = cfg.rotary_fraction;
  doc["parallel_residual"] = cfg.parallel_residual;
  doc["layernorm_epsilon"] = cfg.layernorm_epsilon;
  doc["tied_embeddings"] = cfg.tied_embeddings;
  return doc.dump(2);
}

void write_model_dir(const std::string& dir, const cbench::ModelConfig& cfg,
                     const std::map<std::string, cbench::Tensor>& tensors) {
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "config.json");
    out << model_config_json(cfg) << "\n";
  }
  cbench::save_safetensors((fs::path(dir) / "model.safetensors").string(),
                           tensors);
  {
    std::ofstream out(fs::path(dir) / "vocab.txt");
    for (const auto& tok : toy_vocab()) out << tok << "\n";
  }
}

Planted planted_model(std::uint64_t seed, int d_model, float label_noise,
                      float nuisance_scale) {
  Planted p;
  p.config = small_config(2, d_model, 4, 2 * d_model, /*parallel=*/true,
                          /*tied=*/false);
  p.config.layernorm_epsilon = 1e8;  // flattens every layernorm to affine
  const int d = p.config.d_model;
  const int ff = p.config.d_ff;
  const int V = p.config.vocab_size;

  cbench::Rng rng(seed);
  // A balanced random sign pattern: exactly mean-free, so the layernorm's
  // mean subtraction cannot see it. Equal-magnitude coordinates also matter
  // for the optimizer: Adam's per-coordinate normalization makes its
  // steps sign-like near convergence, so the stable point of
  // step-and-renormalize is the sign vector of the target. For a Gaussian
  // direction that caps recovery at |cos| ~ sqrt(2/pi) no matter how long
  // training runs; for a sign direction the cap is the direction itself.
  Eigen::VectorXf dir(d);
  for (int i = 0; i < d; ++i) dir(i) = (i < d / 2) ? 1.0f : -1.0f;
  for (int i = d - 1; i > 0; --i) {
    std::swap(dir(i), dir(static_cast<int>(rng.below(
                  static_cast<std::uint64_t>(i) + 1))));
  }
  p.direction = dir.normalized();
  Eigen::VectorXf nui(d);
  for (int i = 0; i < d; ++i) nui(i) = static_cast<float>(rng.normal());
  nui -= nui.dot(p.direction) * p.direction;
  nui.normalize();
  p.nuisance = nui;

  // Embeddings: label words sit at +-(direction + 0.5 nuisance) plus a
  // small word-specific offset; everything else is random.
  std::vector<float> embed(static_cast<std::size_t>(V) * d);
  cbench::Rng erng(seed ^ 0x9e3779b97f4a7c15ull);
  for (int i = 0; i < V; ++i) {
    for (int j = 0; j < d; ++j) {
      embed[static_cast<std::size_t>(i) * d + j] =
          static_cast<float>(0.8 * erng.normal());
    }
  }
  auto plant = [&](const std::string& word, float sign) {
    Eigen::VectorXf noise(d);
    for (int j = 0; j < d; ++j) noise(j) = static_cast<float>(erng.normal());
    const Eigen::VectorXf e =
        sign * (p.direction + nuisance_scale * p.nuisance) +
        label_noise * noise;
    for (const std::string& form : {word, " " + word}) {
      const int id = vocab_id(form);
      for (int j = 0; j < d; ++j) {
        embed[static_cast<std::size_t>(id) * d + j] = e(j);
      }
    }
  };
  for (const auto& w : kWordsA) plant(w, +1.0f);
  for (const auto& w : kWordsB) plant(w, -1.0f);

  std::map<std::string, cbench::Tensor> t;
  t.emplace("gpt_neox.embed_in.weight",
            cbench::tensor_f32({V, d}, std::move(embed)));

  cbench::Rng wrng(seed ^ 0xdeadbeefull);
  for (int i = 0; i < p.config.n_layers; ++i) {
    const std::string pre = "gpt_neox.layers." + std::to_string(i) + ".";
    t.emplace(pre + "input_layernorm.weight", ln_weight(d, 0.0, wrng));
    t.emplace(pre + "input_layernorm.bias", zeros({d}));
    t.emplace(pre + "post_attention_layernorm.weight",
              ln_weight(d, 0.0, wrng));
    t.emplace(pre + "post_attention_layernorm.bias", zeros({d}));
    t.emplace(pre + "attention.query_key_value.weight",
              randn({3 * d, d}, 0.1, wrng));
    t.emplace(pre + "attention.query_key_value.bias", zeros({3 * d}));
    // Zero output projections keep the residual stream equal to the
    // embeddings at every layer.
    t.emplace(pre + "attention.dense.weight", zeros({d, d}));
    t.emplace(pre + "attention.dense.bias", zeros({d}));
    t.emplace(pre + "mlp.dense_h_to_4h.weight", randn({ff, d}, 0.1, wrng));
    t.emplace(pre + "mlp.dense_h_to_4h.bias", zeros({ff}));
    t.emplace(pre + "mlp.dense_4h_to_h.weight", zeros({d, ff}));
    t.emplace(pre + "mlp.dense_4h_to_h.bias", zeros({d}));
  }
  t.emplace("gpt_neox.final_layer_norm.weight", ln_weight(d, 0.0, wrng));
  t.emplace("gpt_neox.final_layer_norm.bias", zeros({d}));

  // logit(" yes") - logit(" no") = 2 * S * rstd * (h . direction) with
  // rstd ~= 1/sqrt(eps); S makes the slope ~0.9 per unit displacement.
  const float S = 0.45f * 1e4f;
  std::vector<float> unembed(static_cast<std::size_t>(V) * d, 0.0f);
  const int yes_id = vocab_id(" yes");
  const int no_id = vocab_id(" no");
  for (int j = 0; j < d; ++j) {
    unembed[static_cast<std::size_t>(yes_id) * d + j] = S * p.direction(j);
    unembed[static_cast<std::size_t>(no_id) * d + j] = -S * p.direction(j);
  }
  t.emplace("embed_out.weight", cbench::tensor_f32({V, d}, std::move(unembed)));

  p.tensors = std::move(t);
  return p;
}

}  // namespace fixture
