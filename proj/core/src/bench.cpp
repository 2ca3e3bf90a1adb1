#include "cbench/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include "cbench/heatmap.hpp"
#include "cbench/intervene.hpp"
#include "cbench/rng.hpp"
#include "json.hpp"

namespace cbench {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += "\"";
  return out;
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string basename_no_ext(const std::string& path) {
  fs::path p(path);
  std::string stem = p.filename().string();
  const auto dot = stem.rfind('.');
  if (dot != std::string::npos && dot > 0) stem = stem.substr(0, dot);
  return stem;
}

// Per-example eval-time state shared by every cell of a task.
struct EvalPre {
  TokenizedExample tok;  // task labels
  int ctrl_y_base = -1;
  int ctrl_y_source = -1;
  ResidualCache base_cache;
  ResidualCache source_cache;
  LabelLogProbs orig_task;
  LabelLogProbs orig_ctrl;
};

struct TaskState {
  TaskTemplate tpl;
  Dataset data;
  std::vector<EvalExample> control_train;
  std::vector<EvalPre> eval_pre;
  std::vector<std::vector<ActivationDataset>> acts;  // [layer][region]
  std::vector<std::string> region_names;
  double accuracy = 0.0;
};

std::optional<TaskState> build_task_state(const Model& model,
                                          const Tokenizer& tokenizer,
                                          const RunConfig& cfg,
                                          const std::string& task_file,
                                          std::vector<std::string>* diags) {
  try {
    TaskState ts;
    ts.tpl = load_task_file(task_file);
    SeedMix mix;
    mix.add(cfg.seed);
    mix.add(ts.tpl.name);
    mix.add("dataset");
    ts.data = build_dataset(ts.tpl, cfg.n_train_pairs, cfg.n_eval_pairs,
                            mix.digest());
    const Dataset control = apply_control_remap(ts.data, ts.tpl);
    ts.control_train = control.train;
    for (const auto& region : ts.tpl.regions) {
      ts.region_names.push_back(region.name);
    }

    ts.eval_pre.reserve(ts.data.eval.size());
    for (std::size_t i = 0; i < ts.data.eval.size(); ++i) {
      EvalPre ep;
      ep.tok = tokenize_example(tokenizer, ts.data.eval[i]);
      ep.ctrl_y_base = tokenizer.label_token_id(control.eval[i].base_label);
      ep.ctrl_y_source =
          tokenizer.label_token_id(control.eval[i].source_label);
      const auto base_fwd = model.forward(ep.tok.base_ids);
      const auto source_fwd = model.forward(ep.tok.source_ids);
      ep.orig_task = {static_cast<double>(base_fwd.logprobs(ep.tok.y_base)),
                      static_cast<double>(
                          base_fwd.logprobs(ep.tok.y_source))};
      ep.orig_ctrl = {static_cast<double>(base_fwd.logprobs(ep.ctrl_y_base)),
                      static_cast<double>(
                          base_fwd.logprobs(ep.ctrl_y_source))};
      ep.base_cache = std::move(base_fwd.cache);
      ep.source_cache = std::move(source_fwd.cache);
      ts.eval_pre.push_back(std::move(ep));
    }

    ts.acts = collect_activation_grid(model, ts.tpl, ts.data.train,
                                      tokenizer);
    ts.accuracy = task_accuracy(model, tokenizer, ts.data.eval);
    return ts;
  } catch (const std::exception& e) {
    diags->push_back("task '" + task_file + "' skipped: " + e.what());
    return std::nullopt;
  }
}

// Evaluates one intervention over the eval split; either output may be
// null when only one label set is wanted (DAS trains separate directions
// for task and control).
void accumulate_cell(const Model& model, const TaskState& ts, int layer,
                     int region, const Intervention& iv, double* avg_task,
                     double* avg_ctrl) {
  double sum_task = 0.0;
  double sum_ctrl = 0.0;
  for (const EvalPre& ep : ts.eval_pre) {
    const int pos_b = ep.tok.alignment.base_last[region];
    const int pos_s = ep.tok.alignment.source_last[region];
    const Eigen::VectorXf h_s =
        ep.source_cache.after_layer[layer].row(pos_s).transpose();
    Eigen::VectorXf replacement;
    if (iv.kind == Intervention::Kind::Vanilla) {
      replacement = h_s;
    } else {
      const Eigen::VectorXf h_b =
          ep.base_cache.after_layer[layer].row(pos_b).transpose();
      replacement = dii_apply(h_b, h_s, iv.direction);
    }
    const auto lp = model.forward_intervened(
        ep.tok.base_ids, HookSite{layer, pos_b}, replacement);
    if (avg_task) {
      const LabelLogProbs intv{static_cast<double>(lp(ep.tok.y_base)),
                               static_cast<double>(lp(ep.tok.y_source))};
      sum_task += odds_ratio(ep.orig_task, intv);
    }
    if (avg_ctrl) {
      const LabelLogProbs intv{static_cast<double>(lp(ep.ctrl_y_base)),
                               static_cast<double>(lp(ep.ctrl_y_source))};
      sum_ctrl += odds_ratio(ep.orig_ctrl, intv);
    }
  }
  const double n = static_cast<double>(ts.eval_pre.size());
  if (avg_task) *avg_task = sum_task / n;
  if (avg_ctrl) *avg_ctrl = sum_ctrl / n;
}

struct CellOut {
  bool failed = false;
  std::string diagnostic;
  // One entry per variant: probe has one per lambda, others exactly one.
  std::vector<double> avg_task;
  std::vector<double> avg_ctrl;
  std::vector<Direction> directions;  // empty entry-wise for vanilla
  std::uint64_t seed = 0;
};

// Sites whose activations carry no class signal leave the linear fits with
// nothing to return: regions upstream of the label region see identical
// prefixes in both classes, so class means coincide exactly and constant
// regions have no spread at all. These are structural properties of
// minimal-pair data, not errors.
bool fit_found_no_signal(const FitError& e) {
  switch (e.kind()) {
    case FitError::Kind::ZeroVector:
    case FitError::Kind::DegenerateData:
    case FitError::Kind::SingularMatrix:
      return true;
    default:
      return false;
  }
}

CellOut compute_cell(const Model& model, const Tokenizer& tokenizer,
                     const RunConfig& cfg, const TaskState& ts,
                     const std::string& method, int layer, int region) {
  SeedMix mix;
  mix.add(cfg.seed);
  mix.add(ts.tpl.name);
  mix.add(method);
  mix.add(static_cast<std::uint64_t>(layer));
  mix.add(ts.region_names[region]);
  const std::uint64_t cell_seed = mix.digest();

  CellOut out;
  out.seed = cell_seed;
  const int d = model.config().d_model;

  auto eval_both = [&](const Intervention& iv) {
    double t = 0.0, c = 0.0;
    accumulate_cell(model, ts, layer, region, iv, &t, &c);
    out.avg_task.push_back(t);
    out.avg_ctrl.push_back(c);
  };
  // A degenerate fit has no direction; intervening along none is the
  // identity, so the cell's effect is exactly zero.
  auto eval_fit = [&](auto&& fit) {
    try {
      Direction dir = fit();
      eval_both(Intervention::dii(dir));
      out.directions.push_back(std::move(dir));
    } catch (const FitError& e) {
      if (!fit_found_no_signal(e)) throw;
      out.avg_task.push_back(0.0);
      out.avg_ctrl.push_back(0.0);
      out.directions.emplace_back();
    }
  };

  if (method == "vanilla") {
    eval_both(Intervention::vanilla());
    out.directions.emplace_back();
  } else if (method == "random") {
    Direction dir = random_direction(d, cell_seed);
    eval_both(Intervention::dii(dir));
    out.directions.push_back(std::move(dir));
  } else if (method == "mean") {
    eval_fit([&] { return diff_means(ts.acts[layer][region]); });
  } else if (method == "lda") {
    eval_fit([&] { return fit_lda(ts.acts[layer][region]); });
  } else if (method == "pca") {
    eval_fit([&] { return fit_pca(ts.acts[layer][region]); });
  } else if (method == "kmeans") {
    eval_fit([&] { return fit_kmeans(ts.acts[layer][region], cell_seed); });
  } else if (method == "probe") {
    for (double lambda : cfg.probe_lambdas) {
      eval_fit(
          [&] { return fit_probe(ts.acts[layer][region], lambda).direction; });
    }
  } else if (method == "das") {
    Direction dir_task =
        train_das(model, ts.tpl, ts.data.train, tokenizer, layer, region,
                  cfg.das, cell_seed);
    Direction dir_ctrl =
        train_das(model, ts.tpl, ts.control_train, tokenizer, layer, region,
                  cfg.das, cell_seed);
    double avg_t = 0.0, avg_c = 0.0;
    accumulate_cell(model, ts, layer, region,
                    Intervention::dii(dir_task), &avg_t, nullptr);
    accumulate_cell(model, ts, layer, region,
                    Intervention::dii(dir_ctrl), nullptr, &avg_c);
    out.avg_task.push_back(avg_t);
    out.avg_ctrl.push_back(avg_c);
    out.directions.push_back(std::move(dir_task));
  } else {
    throw BenchError("unknown method '" + method + "'");
  }
  return out;
}

struct CellKey {
  int task = 0;
  int method = 0;
  int layer = 0;
  int region = 0;
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw BenchError("cannot open config " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw BenchError(std::string("config parse error: ") + e.what());
  }
  RunConfig cfg;
  try {
    cfg.model_dir = doc.at("model_dir").get<std::string>();
    cfg.task_files = doc.at("tasks").get<std::vector<std::string>>();
    cfg.out_dir = doc.at("out").get<std::string>();
    if (doc.contains("methods")) {
      cfg.methods = doc["methods"].get<std::vector<std::string>>();
    }
    if (doc.contains("train_pairs")) {
      cfg.n_train_pairs = doc["train_pairs"].get<int>();
    }
    if (doc.contains("eval_pairs")) {
      cfg.n_eval_pairs = doc["eval_pairs"].get<int>();
    }
    if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("jobs")) cfg.jobs = doc["jobs"].get<int>();
    if (doc.contains("probe_lambdas")) {
      cfg.probe_lambdas = doc["probe_lambdas"].get<std::vector<double>>();
    }
    if (doc.contains("checkpoints")) {
      cfg.checkpoints = doc["checkpoints"].get<std::vector<std::string>>();
    }
    if (doc.contains("das")) {
      const json& das = doc["das"];
      if (das.contains("learning_rate")) {
        cfg.das.learning_rate = das["learning_rate"].get<double>();
      }
      if (das.contains("batch_size")) {
        cfg.das.batch_size = das["batch_size"].get<int>();
      }
      if (das.contains("epochs")) cfg.das.epochs = das["epochs"].get<int>();
      if (das.contains("warmup_fraction")) {
        cfg.das.warmup_fraction = das["warmup_fraction"].get<double>();
      }
    }
  } catch (const json::exception& e) {
    throw BenchError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void RunConfig::validate() const {
  if (model_dir.empty()) throw BenchError("config: model_dir is required");
  if (task_files.empty()) throw BenchError("config: no tasks given");
  if (out_dir.empty()) throw BenchError("config: out directory is required");
  if (methods.empty()) throw BenchError("config: no methods given");
  for (const auto& m : methods) {
    const auto& all = all_methods();
    if (std::find(all.begin(), all.end(), m) == all.end()) {
      throw BenchError("config: unknown method '" + m + "'");
    }
  }
  if (n_train_pairs < 1 || n_eval_pairs < 1) {
    throw BenchError("config: pair counts must be positive");
  }
  if (jobs < 1) throw BenchError("config: jobs must be >= 1");
  const bool has_probe =
      std::find(methods.begin(), methods.end(), "probe") != methods.end();
  if (has_probe && probe_lambdas.empty()) {
    throw BenchError("config: probe requires at least one lambda");
  }
  if (das.learning_rate <= 0.0 || das.batch_size < 1 || das.epochs < 0 ||
      das.warmup_fraction < 0.0 || das.warmup_fraction >= 1.0) {
    throw BenchError("config: bad das hyperparameters");
  }
}

Tokenizer load_tokenizer_dir(const std::string& dir) {
  const fs::path vocab_json = fs::path(dir) / "vocab.json";
  const fs::path merges = fs::path(dir) / "merges.txt";
  const fs::path vocab_txt = fs::path(dir) / "vocab.txt";
  if (fs::exists(vocab_json) && fs::exists(merges)) {
    return Tokenizer::bpe_from_files(vocab_json.string(), merges.string());
  }
  if (fs::exists(vocab_txt)) {
    return Tokenizer::lookup_from_file(vocab_txt.string());
  }
  throw BenchError("no tokenizer found in " + dir +
                   " (expected vocab.json+merges.txt or vocab.txt)");
}

void write_summary_csv(const std::string& path,
                       const std::vector<BenchmarkRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BenchError("cannot write " + path);
  out << "task,method,checkpoint,overall_odds,selectivity,accuracy\n";
  for (const auto& r : records) {
    out << csv_field(r.task) << ',' << csv_field(r.method) << ','
        << csv_field(r.checkpoint) << ',' << fmt_double(r.overall_odds)
        << ',' << fmt_double(r.selectivity) << ','
        << fmt_double(r.accuracy) << '\n';
  }
}

void write_sites_csv(const std::string& path,
                     const std::vector<SiteRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BenchError("cannot write " + path);
  out << "task,method,checkpoint,layer,region,avg_odds,control_avg_odds,"
         "n_eval,seed\n";
  for (const auto& r : rows) {
    out << csv_field(r.task) << ',' << csv_field(r.method) << ','
        << csv_field(r.checkpoint) << ',' << r.layer << ','
        << csv_field(r.region) << ',' << fmt_double(r.avg_odds) << ','
        << fmt_double(r.control_avg_odds) << ',' << r.n_eval << ','
        << r.seed << '\n';
  }
}

std::vector<SiteRow> read_sites_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BenchError("cannot open " + path);
  std::vector<SiteRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      first = false;
      continue;  // header
    }
    const auto f = parse_csv_line(line);
    if (f.size() != 9) {
      throw BenchError("malformed sites CSV row: " + line);
    }
    SiteRow r;
    r.task = f[0];
    r.method = f[1];
    r.checkpoint = f[2];
    r.layer = std::stoi(f[3]);
    r.region = f[4];
    r.avg_odds = std::strtod(f[5].c_str(), nullptr);
    r.control_avg_odds = std::strtod(f[6].c_str(), nullptr);
    r.n_eval = std::stoi(f[7]);
    r.seed = std::stoull(f[8]);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

RunResult run_with_model(const Model& model, const Tokenizer& tokenizer,
                         const RunConfig& cfg,
                         const std::string& checkpoint_name,
                         const std::string& out_dir) {
  RunResult result;
  fs::create_directories(out_dir);
  fs::create_directories(fs::path(out_dir) / "heatmaps");

  std::vector<TaskState> tasks;
  for (const std::string& file : cfg.task_files) {
    auto ts = build_task_state(model, tokenizer, cfg, file,
                               &result.diagnostics);
    if (ts) tasks.push_back(std::move(*ts));
  }

  // Enumerate cells; results land in a preallocated slot per cell so the
  // reduction order is independent of scheduling.
  std::vector<CellKey> keys;
  for (int t = 0; t < static_cast<int>(tasks.size()); ++t) {
    const int L = model.config().n_layers;
    const int R = static_cast<int>(tasks[t].region_names.size());
    for (int m = 0; m < static_cast<int>(cfg.methods.size()); ++m) {
      for (int l = 0; l < L; ++l) {
        for (int r = 0; r < R; ++r) keys.push_back({t, m, l, r});
      }
    }
  }
  std::vector<CellOut> cells(keys.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= keys.size()) return;
      const CellKey& k = keys[i];
      try {
        cells[i] = compute_cell(model, tokenizer, cfg, tasks[k.task],
                                cfg.methods[k.method], k.layer, k.region);
      } catch (const std::exception& e) {
        cells[i].failed = true;
        cells[i].diagnostic = e.what();
      }
    }
  };
  const int n_threads =
      std::max(1, std::min<int>(cfg.jobs, static_cast<int>(keys.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  // Single-threaded, order-deterministic reduction.
  std::map<std::string, Direction> directions;
  std::size_t idx = 0;
  for (int t = 0; t < static_cast<int>(tasks.size()); ++t) {
    const TaskState& ts = tasks[t];
    const int L = model.config().n_layers;
    const int R = static_cast<int>(ts.region_names.size());
    for (int m = 0; m < static_cast<int>(cfg.methods.size()); ++m) {
      const std::string& method = cfg.methods[m];
      const int variants =
          method == "probe" ? static_cast<int>(cfg.probe_lambdas.size())
                            : 1;
      std::vector<OddsGrid> task_grids(variants), ctrl_grids(variants);
      for (int v = 0; v < variants; ++v) {
        task_grids[v].values = Eigen::MatrixXd::Constant(L, R, kNaN);
        task_grids[v].region_labels = ts.region_names;
        task_grids[v].n_eval = static_cast<int>(ts.eval_pre.size());
        ctrl_grids[v] = task_grids[v];
      }
      std::vector<std::vector<const Direction*>> grid_dirs(
          variants, std::vector<const Direction*>(
                        static_cast<std::size_t>(L) * R, nullptr));
      std::vector<std::uint64_t> cell_seeds(
          static_cast<std::size_t>(L) * R, 0);

      for (int l = 0; l < L; ++l) {
        for (int r = 0; r < R; ++r, ++idx) {
          const CellOut& cell = cells[idx];
          cell_seeds[static_cast<std::size_t>(l) * R + r] = cell.seed;
          if (cell.failed) {
            ++result.failed_cells;
            result.diagnostics.push_back(
                "cell " + ts.tpl.name + "/" + method + "/layer" +
                std::to_string(l) + "/" + ts.region_names[r] +
                " failed: " + cell.diagnostic);
            continue;
          }
          for (int v = 0;
               v < variants && v < static_cast<int>(cell.avg_task.size());
               ++v) {
            task_grids[v].values(l, r) = cell.avg_task[v];
            ctrl_grids[v].values(l, r) = cell.avg_ctrl[v];
            if (v < static_cast<int>(cell.directions.size()) &&
                !cell.directions[v].empty()) {
              grid_dirs[v][static_cast<std::size_t>(l) * R + r] =
                  &cell.directions[v];
            }
          }
        }
      }

      // Probe reports the best lambda by overall odds; ties keep the
      // first configured value.
      int winner = 0;
      if (variants > 1) {
        double best = -std::numeric_limits<double>::infinity();
        for (int v = 0; v < variants; ++v) {
          const double o = overall_odds(task_grids[v]);
          if (std::isfinite(o) && o > best) {
            best = o;
            winner = v;
          }
        }
      }
      const OddsGrid& task_grid = task_grids[winner];
      const OddsGrid& ctrl_grid = ctrl_grids[winner];

      BenchmarkRecord rec;
      rec.task = ts.tpl.name;
      rec.method = method;
      rec.checkpoint = checkpoint_name;
      rec.overall_odds = overall_odds(task_grid);
      rec.selectivity = selectivity(task_grid, ctrl_grid);
      rec.accuracy = ts.accuracy;
      rec.seed = cfg.seed;
      result.records.push_back(rec);

      for (int l = 0; l < L; ++l) {
        for (int r = 0; r < R; ++r) {
          SiteRow row;
          row.task = ts.tpl.name;
          row.method = method;
          row.checkpoint = checkpoint_name;
          row.layer = l;
          row.region = ts.region_names[r];
          row.avg_odds = task_grid.values(l, r);
          row.control_avg_odds = ctrl_grid.values(l, r);
          row.n_eval = task_grid.n_eval;
          row.seed = cell_seeds[static_cast<std::size_t>(l) * R + r];
          result.site_rows.push_back(std::move(row));
          const Direction* dir =
              grid_dirs[winner][static_cast<std::size_t>(l) * R + r];
          if (dir != nullptr) {
            directions.emplace(ts.tpl.name + "/" + std::to_string(l) + "/" +
                                   ts.region_names[r] + "/" + method,
                               *dir);
          }
        }
      }

      HeatmapSpec spec;
      spec.grid = task_grid;
      spec.lo = 0.0;
      double hi = 0.0;
      for (int l = 0; l < L; ++l) {
        for (int r = 0; r < R; ++r) {
          const double v = task_grid.values(l, r);
          if (std::isfinite(v)) hi = std::max(hi, v);
        }
      }
      spec.hi = hi > 0.0 ? hi : 1.0;
      spec.title = ts.tpl.name + " / " + method;
      emit_heatmap(spec, (fs::path(out_dir) / "heatmaps" /
                          (ts.tpl.name + "." + method + ".svg"))
                             .string());
    }
  }

  write_summary_csv((fs::path(out_dir) / "summary.csv").string(),
                    result.records);
  write_sites_csv((fs::path(out_dir) / "sites.csv").string(),
                  result.site_rows);
  if (!directions.empty()) {
    save_directions((fs::path(out_dir) / "directions.safetensors").string(),
                    directions);
  }
  return result;
}

}  // namespace

RunResult run_benchmark(const RunConfig& config) {
  config.validate();
  const Model model = Model::load_dir(config.model_dir);
  const Tokenizer tokenizer = load_tokenizer_dir(config.model_dir);
  return run_with_model(model, tokenizer, config,
                        basename_no_ext(config.model_dir), config.out_dir);
}

RunResult checkpoint_sweep(const RunConfig& config) {
  config.validate();
  if (config.checkpoints.empty()) {
    throw BenchError("checkpoint_sweep: no checkpoints configured");
  }
  std::ifstream in(config.model_dir + "/config.json");
  if (!in) {
    throw BenchError("cannot open " + config.model_dir + "/config.json");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  const ModelConfig mcfg = parse_model_config(ss.str());
  const Tokenizer tokenizer = load_tokenizer_dir(config.model_dir);

  RunResult combined;
  fs::create_directories(config.out_dir);
  for (const std::string& ckpt : config.checkpoints) {
    const std::string name = basename_no_ext(ckpt);
    try {
      const SafetensorsFile file = SafetensorsFile::load(ckpt);
      const Model model = Model::load_checkpoint(file, mcfg);
      const RunResult one = run_with_model(
          model, tokenizer, config, name,
          (fs::path(config.out_dir) / name).string());
      combined.records.insert(combined.records.end(), one.records.begin(),
                              one.records.end());
      combined.site_rows.insert(combined.site_rows.end(),
                                one.site_rows.begin(), one.site_rows.end());
      combined.failed_cells += one.failed_cells;
      combined.diagnostics.insert(combined.diagnostics.end(),
                                  one.diagnostics.begin(),
                                  one.diagnostics.end());
    } catch (const std::exception& e) {
      ++combined.failed_cells;
      combined.diagnostics.push_back("checkpoint '" + ckpt +
                                     "' failed: " + e.what());
    }
  }
  write_summary_csv(
      (fs::path(config.out_dir) / "summary.csv").string(),
      combined.records);
  write_sites_csv((fs::path(config.out_dir) / "sites.csv").string(),
                  combined.site_rows);
  return combined;
}

}  // namespace cbench
