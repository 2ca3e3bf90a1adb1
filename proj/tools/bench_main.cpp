#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cbench/bench.hpp"
#include "cbench/heatmap.hpp"
#include "cbench/rng.hpp"
#include "cbench/taskgen.hpp"

namespace {

int cmd_run(const cbench::RunConfig& cfg) {
  const cbench::RunResult result = cfg.checkpoints.empty()
                                       ? cbench::run_benchmark(cfg)
                                       : cbench::checkpoint_sweep(cfg);
  for (const auto& d : result.diagnostics) std::cerr << d << "\n";
  for (const auto& r : result.records) {
    std::cout << r.task << "\t" << r.method << "\t" << r.checkpoint
              << "\toverall_odds=" << r.overall_odds
              << "\tselectivity=" << r.selectivity
              << "\taccuracy=" << r.accuracy << "\n";
  }
  std::cout << "wrote " << cfg.out_dir << "/summary.csv and sites.csv ("
            << result.records.size() << " records, " << result.failed_cells
            << " failed cells)\n";
  return result.failed_cells == 0 ? 0 : 1;
}

int cmd_generate(const std::string& task_file, int n, std::uint64_t seed) {
  const cbench::TaskTemplate tpl = cbench::load_task_file(task_file);
  cbench::Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const cbench::EvalExample e = cbench::sample_pair(tpl, rng);
    std::cout << e.base_text << "\t" << e.source_text << "\t" << e.base_label
              << "\t" << e.source_label << "\n";
  }
  return 0;
}

int cmd_heatmap(const std::string& in, const std::string& task,
                const std::string& method, const std::string& out) {
  const std::vector<cbench::SiteRow> all = cbench::read_sites_csv(in);
  std::vector<cbench::SiteRow> rows;
  std::set<std::string> checkpoints;
  for (const auto& r : all) {
    if (r.task == task && r.method == method) {
      rows.push_back(r);
      checkpoints.insert(r.checkpoint);
    }
  }
  if (rows.empty()) {
    std::cerr << "no rows for task '" << task << "' and method '" << method
              << "' in " << in << "\n";
    return 1;
  }
  if (checkpoints.size() > 1) {
    std::cerr << "rows span " << checkpoints.size()
              << " checkpoints; pass a per-checkpoint sites.csv\n";
    return 1;
  }

  int n_layers = 0;
  std::vector<std::string> regions;
  for (const auto& r : rows) {
    n_layers = std::max(n_layers, r.layer + 1);
    if (std::find(regions.begin(), regions.end(), r.region) ==
        regions.end()) {
      regions.push_back(r.region);
    }
  }
  cbench::HeatmapSpec spec;
  spec.grid.values = Eigen::MatrixXd::Constant(
      n_layers, static_cast<int>(regions.size()),
      std::numeric_limits<double>::quiet_NaN());
  spec.grid.region_labels = regions;
  spec.grid.n_eval = rows.front().n_eval;
  for (const auto& r : rows) {
    const auto it = std::find(regions.begin(), regions.end(), r.region);
    spec.grid.values(r.layer,
                     static_cast<int>(it - regions.begin())) = r.avg_odds;
  }
  double hi = 0.0;
  for (int l = 0; l < spec.grid.values.rows(); ++l) {
    for (int c = 0; c < spec.grid.values.cols(); ++c) {
      const double v = spec.grid.values(l, c);
      if (std::isfinite(v)) hi = std::max(hi, v);
    }
  }
  spec.lo = 0.0;
  spec.hi = hi > 0.0 ? hi : 1.0;
  spec.title = task + " / " + method;
  cbench::emit_heatmap(spec, out);
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"benchmark causal directions in transformer residual streams"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand(
      "run", "sweep (task, method, layer, region) cells on a model");
  std::string config_file;
  cbench::RunConfig cfg;
  auto* opt_config =
      run->add_option("--config", config_file, "JSON run config");
  auto* opt_model = run->add_option("--model-dir", cfg.model_dir,
                                    "directory with config.json, "
                                    "model.safetensors, tokenizer files");
  auto* opt_tasks =
      run->add_option("--tasks", cfg.task_files, "task spec JSON files")
          ->delimiter(',');
  auto* opt_methods =
      run->add_option("--methods", cfg.methods,
                      "subset of das,probe,mean,pca,kmeans,lda,random,vanilla")
          ->delimiter(',');
  auto* opt_train =
      run->add_option("--train-pairs", cfg.n_train_pairs, "pairs per task");
  auto* opt_eval =
      run->add_option("--eval-pairs", cfg.n_eval_pairs, "pairs per task");
  auto* opt_seed = run->add_option("--seed", cfg.seed, "global seed");
  auto* opt_out = run->add_option("--out", cfg.out_dir, "output directory");
  auto* opt_jobs = run->add_option("--jobs", cfg.jobs, "worker threads");

  auto* gen = app.add_subcommand("generate",
                                 "sample counterfactual pairs as TSV");
  std::string gen_task;
  int gen_n = 0;
  std::uint64_t gen_seed = 0;
  gen->add_option("--task", gen_task, "task spec JSON file")->required();
  gen->add_option("--n", gen_n, "number of pairs")->required();
  gen->add_option("--seed", gen_seed, "sampling seed");

  auto* hm = app.add_subcommand("heatmap",
                                "render one (task, method) site grid as SVG");
  std::string hm_in, hm_task, hm_method, hm_out;
  hm->add_option("--in", hm_in, "sites.csv from a run")->required();
  hm->add_option("--task", hm_task, "task name")->required();
  hm->add_option("--method", hm_method, "method name")->required();
  hm->add_option("--out", hm_out, "output SVG path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      if (opt_config->count() > 0) {
        cbench::RunConfig from_file =
            cbench::RunConfig::from_json_file(config_file);
        // Explicit flags override the config file.
        if (opt_model->count() == 0) cfg.model_dir = from_file.model_dir;
        if (opt_tasks->count() == 0) cfg.task_files = from_file.task_files;
        if (opt_methods->count() == 0) cfg.methods = from_file.methods;
        if (opt_train->count() == 0) {
          cfg.n_train_pairs = from_file.n_train_pairs;
        }
        if (opt_eval->count() == 0) cfg.n_eval_pairs = from_file.n_eval_pairs;
        if (opt_seed->count() == 0) cfg.seed = from_file.seed;
        if (opt_out->count() == 0) cfg.out_dir = from_file.out_dir;
        if (opt_jobs->count() == 0) cfg.jobs = from_file.jobs;
        cfg.das = from_file.das;
        cfg.probe_lambdas = from_file.probe_lambdas;
        cfg.checkpoints = from_file.checkpoints;
      }
      cfg.validate();
      return cmd_run(cfg);
    }
    if (gen->parsed()) return cmd_generate(gen_task, gen_n, gen_seed);
    if (hm->parsed()) return cmd_heatmap(hm_in, hm_task, hm_method, hm_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
