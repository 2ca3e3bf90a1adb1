#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbench/featfind.hpp"
#include "cbench/metrics.hpp"
#include "cbench/model.hpp"
#include "cbench/tokenizer.hpp"

namespace cbench {

class BenchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The seven directions plus the full-swap baseline.
inline const std::vector<std::string>& all_methods() {
  static const std::vector<std::string> m = {
      "das", "probe", "mean", "pca", "kmeans", "lda", "random", "vanilla"};
  return m;
}

struct RunConfig {
  std::string model_dir;  // config.json, model.safetensors, tokenizer files
  std::vector<std::string> task_files;
  std::vector<std::string> methods = all_methods();
  int n_train_pairs = 200;
  int n_eval_pairs = 50;
  std::uint64_t seed = 0;
  DasHyper das;
  std::vector<double> probe_lambdas = {10.0};
  std::string out_dir;
  int jobs = 1;
  // Optional sweep: alternative weight files sharing model_dir's config.
  std::vector<std::string> checkpoints;

  static RunConfig from_json_file(const std::string& path);
  void validate() const;
};

struct SiteRow {
  std::string task;
  std::string method;
  std::string checkpoint;
  int layer = 0;
  std::string region;
  double avg_odds = 0.0;
  double control_avg_odds = 0.0;
  int n_eval = 0;
  std::uint64_t seed = 0;
};

struct RunResult {
  std::vector<BenchmarkRecord> records;
  std::vector<SiteRow> site_rows;
  int failed_cells = 0;
  std::vector<std::string> diagnostics;
};

// Picks byte-level BPE when vocab.json + merges.txt exist, otherwise the
// newline-delimited vocab.txt lookup tokenizer.
Tokenizer load_tokenizer_dir(const std::string& dir);

// Full sweep for one set of weights: per (task, method, layer, region) cell
// fit/train a direction on the train split, average the eval-split log
// odds-ratio for task labels and control labels, aggregate records, and
// write summary.csv, sites.csv, and per-(task, method) heatmaps under
// config.out_dir. Cell failures become diagnostics, never aborts.
RunResult run_benchmark(const RunConfig& config);

// One run_benchmark per entry of config.checkpoints into its own
// subdirectory, plus combined summary.csv/sites.csv at out_dir's root.
// A checkpoint that fails to load is recorded and skipped.
RunResult checkpoint_sweep(const RunConfig& config);

void write_summary_csv(const std::string& path,
                       const std::vector<BenchmarkRecord>& records);
void write_sites_csv(const std::string& path,
                     const std::vector<SiteRow>& rows);
std::vector<SiteRow> read_sites_csv(const std::string& path);

}  // namespace cbench
