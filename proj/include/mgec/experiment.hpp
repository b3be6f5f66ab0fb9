#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mgec/corpus.hpp"
#include "mgec/meta.hpp"
#include "mgec/model.hpp"

namespace mgec {

/// Full description of one experiment: corpus recipe, split sizes, model
/// shape, training schedule, and the seeds to average over. Loadable from an
/// INI-style file; defaults are the desk-scale preset.
struct ExperimentConfig {
  // corpus generation
  std::vector<std::string> source_profiles = {"ko", "zhtw", "ja", "ma", "bu",
                                              "th", "ensg", "en", "vi"};
  std::string valid_profile = "in";
  std::vector<std::string> test_profiles = {"de", "ru", "fr", "mo"};
  std::string pretrain_profile = "mix";
  int source_pairs = 1000;
  int valid_pairs = 1400;
  int test_pairs = 500;
  int pretrain_pairs = 20000;
  std::uint64_t data_seed = 9001;  // corpora are shared across experiment seeds
  int bpe_merges = 200;

  SplitSpec split;

  ModelConfig model;  // vocab_size is filled in after subword learning

  MetaHyperparams meta;

  double pretrain_lr = 1e-3;
  int pretrain_epochs = 1;
  int pretrain_batch = 16;
  double mtl_lr = 1e-3;
  int mtl_epochs = 1;
  int mtl_batch = 16;

  int beam_size = 12;
  int valid_eval_cap = 40;  // validation sentences scored during meta-training
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  ExperimentConfig();
  void validate() const;
};

ExperimentConfig parse_config(std::istream& in, const std::string& origin);
ExperimentConfig load_config(const std::string& path);

struct CellResult {
  std::vector<double> per_seed;
  double mean = 0.0;
  double stddev = 0.0;
};

/// Suite results: one cell per (target, strategy) holding per-seed scores,
/// plus the per-strategy average row over all targets.
struct ResultsTable {
  std::vector<std::string> targets;
  std::vector<std::string> strategies;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::map<std::string, CellResult>> cells;
  std::map<std::string, CellResult> average;
};

struct AblationRow {
  int source_count = 0;
  std::vector<double> per_seed;  // mean over targets, one entry per seed
  double mean = 0.0;
};
using AblationTable = std::vector<AblationRow>;

struct StrategyOutcome {
  double f05 = 0.0;
  std::uint64_t source_fingerprint = 0;  // 0 when the strategy uses no source tasks
};

extern const std::vector<std::string> kStrategies;

/// Caches the expensive stages (corpora, subword table, pretrained base,
/// pooled-source training, meta-training) so suite and ablation cells share
/// them within a process. All stage randomness is derived from the experiment
/// seed through named streams, never from global state.
class ExperimentLab {
 public:
  explicit ExperimentLab(ExperimentConfig cfg, std::ostream* progress = nullptr);

  const ExperimentConfig& config() const { return cfg_; }
  const ModelConfig& model_config();
  const Codec& codec();
  const MergeTable& merge_table();
  const DomainDataset& pretrain_corpus();
  const std::vector<DomainDataset>& corpora();
  const Splits& splits_for(std::uint64_t seed);

  const ModelParams& base_params(std::uint64_t seed);
  const ModelParams& mtl_params(std::uint64_t seed);
  const ModelParams& meta_params(std::uint64_t seed, int source_count);

  /// Hash of the source-task pairs a strategy trains on; mtl-finetune and
  /// full-source metagec must agree.
  std::uint64_t mtl_source_fingerprint(std::uint64_t seed);
  std::uint64_t meta_source_fingerprint(std::uint64_t seed, int source_count);

  /// Beam-decodes and MaxMatch-scores a parameter set on given pairs. beam < 1
  /// uses the configured beam size.
  double score_pairs(const ModelParams& params, const std::vector<SentencePair>& pairs,
                     int beam = 0);

  /// The parameters a strategy ends up evaluating on a target: the base model,
  /// or the stage model fine-tuned on the target's training split. The
  /// adaptation RNG stream depends only on (seed, target), so strategies that
  /// share a starting point adapt identically.
  ModelParams adapted_params(const std::string& strategy, const std::string& target,
                             std::uint64_t seed, int source_count = -1);

  StrategyOutcome run_strategy(const std::string& strategy, const std::string& target,
                               std::uint64_t seed, int source_count = -1);
  ResultsTable run_suite();
  AblationTable ablate_sources(const std::vector<int>& counts);

 private:
  void build();
  const TaskSplit& target_split(std::uint64_t seed, const std::string& target);
  double valid_score(const ModelParams& params, std::uint64_t seed);

  ExperimentConfig cfg_;
  std::ostream* progress_;
  bool built_ = false;
  std::vector<DomainDataset> corpora_;  // sources, then valid, then tests
  DomainDataset pretrain_;
  MergeTable table_;
  std::optional<Codec> codec_;
  std::optional<Seq2SeqObjective> objective_;
  ModelConfig model_cfg_;
  std::map<std::uint64_t, Splits> splits_;
  std::map<std::uint64_t, ModelParams> base_, mtl_;
  std::map<std::pair<std::uint64_t, int>, ModelParams> meta_;
};

/// Writers guarantee byte-identical output for equal inputs: fixed column
/// order, fixed precision, no timestamps.
void write_results_table(const ResultsTable& table, std::ostream& out);
void write_results_csv(const ResultsTable& table, std::ostream& out);
void write_ablation_csv(const AblationTable& table, const std::vector<std::uint64_t>& seeds,
                        std::ostream& out);
ResultsTable read_results_csv(std::istream& in, const std::string& origin);

int run_cli(int argc, char** argv);

}  // namespace mgec
