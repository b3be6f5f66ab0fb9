#include "mgec/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "mgec/rng.hpp"

namespace mgec {

namespace {

std::string fixed_n(double v, int n) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", n, v);
  return buf;
}
std::string fixed2(double v) { return fixed_n(v, 2); }
std::string fixed6(double v) { return fixed_n(v, 6); }
std::string fixed10(double v) { return fixed_n(v, 10); }

std::string hex16(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(v);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(line);
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

long long to_ll(const std::string& v) {
  size_t pos = 0;
  long long r = 0;
  try {
    r = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("bad integer '" + v + "'");
  }
  if (pos != v.size()) throw std::invalid_argument("bad integer '" + v + "'");
  return r;
}

int to_int(const std::string& v) {
  long long r = to_ll(v);
  if (r < -2147483648ll || r > 2147483647ll) throw std::invalid_argument("integer out of range '" + v + "'");
  return (int)r;
}

std::uint64_t to_u64(const std::string& v) {
  if (!v.empty() && v[0] == '-') throw std::invalid_argument("bad unsigned integer '" + v + "'");
  size_t pos = 0;
  unsigned long long r = 0;
  try {
    r = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("bad unsigned integer '" + v + "'");
  }
  if (pos != v.size()) throw std::invalid_argument("bad unsigned integer '" + v + "'");
  return r;
}

double to_double(const std::string& v) {
  size_t pos = 0;
  double r = 0.0;
  try {
    r = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("bad number '" + v + "'");
  }
  if (pos != v.size()) throw std::invalid_argument("bad number '" + v + "'");
  return r;
}

bool to_bool(const std::string& v) {
  std::string s;
  for (char c : v) s += (char)std::tolower((unsigned char)c);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("bad boolean '" + v + "'");
}

CellResult make_cell(std::vector<double> per_seed) {
  CellResult c;
  c.per_seed = std::move(per_seed);
  double acc = 0.0;
  for (double v : c.per_seed) acc += v;
  c.mean = acc / (double)c.per_seed.size();
  double sq = 0.0;
  for (double v : c.per_seed) sq += (v - c.mean) * (v - c.mean);
  c.stddev = std::sqrt(sq / (double)c.per_seed.size());
  return c;
}

std::uint64_t fnv1a_accum(const std::string& s, std::uint64_t h) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string pair_key(const SentencePair& p) {
  std::string k = p.domain;
  k += '\t';
  for (size_t i = 0; i < p.source_tokens.size(); ++i) {
    if (i) k += ' ';
    k += p.source_tokens[i];
  }
  k += '\t';
  for (size_t i = 0; i < p.target_tokens.size(); ++i) {
    if (i) k += ' ';
    k += p.target_tokens[i];
  }
  return k;
}

// Order-independent content hash of the pairs in the first count tasks.
std::uint64_t fingerprint_tasks(const std::vector<DomainDataset>& tasks, size_t count) {
  std::vector<std::string> keys;
  for (size_t t = 0; t < count; ++t)
    for (const SentencePair& p : tasks[t].pairs) keys.push_back(pair_key(p));
  std::sort(keys.begin(), keys.end());
  std::uint64_t h = 14695981039346656037ull;
  for (const std::string& k : keys) {
    h = fnv1a_accum(k, h);
    h = fnv1a_accum("\n", h);
  }
  return h;
}

void lab_note(std::ostream* progress, const std::string& msg) {
  if (progress) *progress << "[lab] " << msg << "\n" << std::flush;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

const std::vector<std::string> kStrategies = {"no-finetune", "finetune", "mtl-finetune",
                                              "metagec"};

ExperimentConfig::ExperimentConfig() {
  // Desk-scale learning rates; the full-scale defaults the hyperparameter
  // struct carries are too small to move a model this size in this many steps.
  meta.alpha = 1e-3;
  meta.beta = 1e-3;
  meta.finetune_lr = 1e-3;
}

void ExperimentConfig::validate() const {
  auto positive = [](long long v, const char* name) {
    if (v <= 0) throw std::invalid_argument(std::string("config: ") + name + " must be positive");
  };
  if (source_profiles.empty()) throw std::invalid_argument("config: no source profiles");
  std::set<std::string> roles;
  auto claim = [&](const std::string& name) {
    profile_by_name(name);  // rejects unknown profiles
    if (!roles.insert(name).second)
      throw std::invalid_argument("config: profile " + name + " used in more than one role");
  };
  for (const std::string& p : source_profiles) claim(p);
  claim(valid_profile);
  for (const std::string& p : test_profiles) claim(p);
  profile_by_name(pretrain_profile);  // may repeat a split profile; generated separately

  positive(source_pairs, "source_pairs");
  positive(valid_pairs, "valid_pairs");
  positive(test_pairs, "test_pairs");
  positive(pretrain_pairs, "pretrain_pairs");
  if (bpe_merges < 0) throw std::invalid_argument("config: bpe_merges must be non-negative");

  positive(split.source_count, "source_count");
  positive(split.valid_train, "valid_train");
  positive(split.valid_dev, "valid_dev");
  positive(split.valid_test, "valid_test");
  positive(split.test_train, "test_train");
  positive(split.test_dev_parts, "test_dev_parts");
  positive(split.test_test_parts, "test_test_parts");
  if (source_pairs < split.source_count)
    throw std::invalid_argument("config: source_pairs smaller than source_count");
  if (valid_pairs < split.valid_train + split.valid_dev + split.valid_test)
    throw std::invalid_argument("config: valid_pairs smaller than its split");
  if (test_pairs <= split.test_train)
    throw std::invalid_argument("config: test_pairs must exceed test_train");

  positive(model.width, "model width");
  positive(model.heads, "model heads");
  positive(model.enc_layers, "enc_layers");
  positive(model.dec_layers, "dec_layers");
  positive(model.ff_width, "ff_width");
  if (model.max_len < 2) throw std::invalid_argument("config: max_len must be at least 2");
  if (model.width % model.heads != 0)
    throw std::invalid_argument("config: width must be divisible by heads");

  meta.validate(source_profiles.size());

  if (!(pretrain_lr > 0.0)) throw std::invalid_argument("config: pretrain_lr must be positive");
  if (pretrain_epochs < 0) throw std::invalid_argument("config: pretrain_epochs must be non-negative");
  positive(pretrain_batch, "pretrain_batch");
  if (!(mtl_lr > 0.0)) throw std::invalid_argument("config: mtl_lr must be positive");
  if (mtl_epochs < 0) throw std::invalid_argument("config: mtl_epochs must be non-negative");
  positive(mtl_batch, "mtl_batch");

  positive(beam_size, "beam_size");
  positive(valid_eval_cap, "valid_eval_cap");
  if (seeds.empty()) throw std::invalid_argument("config: at least one seed required");
  std::set<std::uint64_t> unique_seeds(seeds.begin(), seeds.end());
  if (unique_seeds.size() != seeds.size())
    throw std::invalid_argument("config: duplicate seeds");
}

ExperimentConfig parse_config(std::istream& in, const std::string& origin) {
  ExperimentConfig cfg;
  using Setter = std::function<void(const std::string&)>;
  std::map<std::string, Setter> set;

  set["data.source_profiles"] = [&](const std::string& v) { cfg.source_profiles = split_list(v); };
  set["data.valid_profile"] = [&](const std::string& v) { cfg.valid_profile = v; };
  set["data.test_profiles"] = [&](const std::string& v) { cfg.test_profiles = split_list(v); };
  set["data.pretrain_profile"] = [&](const std::string& v) { cfg.pretrain_profile = v; };
  set["data.source_pairs"] = [&](const std::string& v) { cfg.source_pairs = to_int(v); };
  set["data.valid_pairs"] = [&](const std::string& v) { cfg.valid_pairs = to_int(v); };
  set["data.test_pairs"] = [&](const std::string& v) { cfg.test_pairs = to_int(v); };
  set["data.pretrain_pairs"] = [&](const std::string& v) { cfg.pretrain_pairs = to_int(v); };
  set["data.data_seed"] = [&](const std::string& v) { cfg.data_seed = to_u64(v); };
  set["data.bpe_merges"] = [&](const std::string& v) { cfg.bpe_merges = to_int(v); };

  set["splits.source_count"] = [&](const std::string& v) { cfg.split.source_count = to_int(v); };
  set["splits.valid_train"] = [&](const std::string& v) { cfg.split.valid_train = to_int(v); };
  set["splits.valid_dev"] = [&](const std::string& v) { cfg.split.valid_dev = to_int(v); };
  set["splits.valid_test"] = [&](const std::string& v) { cfg.split.valid_test = to_int(v); };
  set["splits.test_train"] = [&](const std::string& v) { cfg.split.test_train = to_int(v); };
  set["splits.test_dev_parts"] = [&](const std::string& v) { cfg.split.test_dev_parts = to_int(v); };
  set["splits.test_test_parts"] = [&](const std::string& v) { cfg.split.test_test_parts = to_int(v); };

  set["model.width"] = [&](const std::string& v) { cfg.model.width = to_int(v); };
  set["model.heads"] = [&](const std::string& v) { cfg.model.heads = to_int(v); };
  set["model.enc_layers"] = [&](const std::string& v) { cfg.model.enc_layers = to_int(v); };
  set["model.dec_layers"] = [&](const std::string& v) { cfg.model.dec_layers = to_int(v); };
  set["model.ff_width"] = [&](const std::string& v) { cfg.model.ff_width = to_int(v); };
  set["model.max_len"] = [&](const std::string& v) { cfg.model.max_len = to_int(v); };

  set["meta.alpha"] = [&](const std::string& v) { cfg.meta.alpha = to_double(v); };
  set["meta.beta"] = [&](const std::string& v) { cfg.meta.beta = to_double(v); };
  set["meta.tasks_per_meta_batch"] = [&](const std::string& v) { cfg.meta.tasks_per_meta_batch = to_int(v); };
  set["meta.support_size"] = [&](const std::string& v) { cfg.meta.support_size = to_int(v); };
  set["meta.query_size"] = [&](const std::string& v) { cfg.meta.query_size = to_int(v); };
  set["meta.meta_steps"] = [&](const std::string& v) { cfg.meta.meta_steps = to_int(v); };
  set["meta.finetune_lr"] = [&](const std::string& v) { cfg.meta.finetune_lr = to_double(v); };
  set["meta.finetune_epochs"] = [&](const std::string& v) { cfg.meta.finetune_epochs = to_int(v); };
  set["meta.finetune_batch_size"] = [&](const std::string& v) { cfg.meta.finetune_batch_size = to_int(v); };
  set["meta.inner_steps"] = [&](const std::string& v) { cfg.meta.inner_steps = to_int(v); };
  set["meta.plain_sgd_outer"] = [&](const std::string& v) { cfg.meta.plain_sgd_outer = to_bool(v); };
  set["meta.adam_inner"] = [&](const std::string& v) { cfg.meta.adam_inner = to_bool(v); };
  set["meta.eval_every"] = [&](const std::string& v) { cfg.meta.eval_every = to_int(v); };

  set["train.pretrain_lr"] = [&](const std::string& v) { cfg.pretrain_lr = to_double(v); };
  set["train.pretrain_epochs"] = [&](const std::string& v) { cfg.pretrain_epochs = to_int(v); };
  set["train.pretrain_batch"] = [&](const std::string& v) { cfg.pretrain_batch = to_int(v); };
  set["train.mtl_lr"] = [&](const std::string& v) { cfg.mtl_lr = to_double(v); };
  set["train.mtl_epochs"] = [&](const std::string& v) { cfg.mtl_epochs = to_int(v); };
  set["train.mtl_batch"] = [&](const std::string& v) { cfg.mtl_batch = to_int(v); };

  set["experiment.beam_size"] = [&](const std::string& v) { cfg.beam_size = to_int(v); };
  set["experiment.valid_eval_cap"] = [&](const std::string& v) { cfg.valid_eval_cap = to_int(v); };
  set["experiment.seeds"] = [&](const std::string& v) {
    cfg.seeds.clear();
    for (const std::string& s : split_list(v)) cfg.seeds.push_back(to_u64(s));
  };

  std::string line, section;
  int lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw std::invalid_argument(origin + " line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    size_t cut = line.find_first_of("#;");
    if (cut != std::string::npos) line.resize(cut);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) fail("empty section name");
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail("empty key");
    if (section.empty()) fail("key '" + key + "' outside any section");
    std::string full = section + "." + key;
    auto it = set.find(full);
    if (it == set.end()) fail("unknown key '" + full + "'");
    try {
      it->second(value);
    } catch (const std::invalid_argument& e) {
      fail(std::string(e.what()) + " for key '" + full + "'");
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  return parse_config(in, path);
}

ExperimentLab::ExperimentLab(ExperimentConfig cfg, std::ostream* progress)
    : cfg_(std::move(cfg)), progress_(progress) {}

void ExperimentLab::build() {
  if (built_) return;
  cfg_.validate();
  cfg_.split.valid_domain = cfg_.valid_profile;
  cfg_.split.test_domains = cfg_.test_profiles;
  auto t0 = std::chrono::steady_clock::now();
  for (const std::string& name : cfg_.source_profiles)
    corpora_.push_back(synth_domain(profile_by_name(name), cfg_.source_pairs, cfg_.data_seed));
  corpora_.push_back(synth_domain(profile_by_name(cfg_.valid_profile), cfg_.valid_pairs, cfg_.data_seed));
  for (const std::string& name : cfg_.test_profiles)
    corpora_.push_back(synth_domain(profile_by_name(name), cfg_.test_pairs, cfg_.data_seed));
  pretrain_ = synth_domain(profile_by_name(cfg_.pretrain_profile), cfg_.pretrain_pairs, cfg_.data_seed);

  std::vector<std::vector<std::string>> words;
  words.reserve(pretrain_.pairs.size() * 2);
  for (const SentencePair& p : pretrain_.pairs) {
    words.push_back(p.source_tokens);
    words.push_back(p.target_tokens);
  }
  table_ = learn_bpe(words, cfg_.bpe_merges);
  codec_.emplace(table_);
  model_cfg_ = cfg_.model;
  model_cfg_.vocab_size = table_.vocab_size();
  model_cfg_.validate();
  objective_.emplace(model_cfg_, *codec_);
  built_ = true;
  lab_note(progress_, "corpora and subword table ready, vocab " +
                          std::to_string(model_cfg_.vocab_size) + " (" + fixed2(elapsed_s(t0)) + "s)");
}

const ModelConfig& ExperimentLab::model_config() {
  build();
  return model_cfg_;
}
const Codec& ExperimentLab::codec() {
  build();
  return *codec_;
}
const MergeTable& ExperimentLab::merge_table() {
  build();
  return table_;
}
const DomainDataset& ExperimentLab::pretrain_corpus() {
  build();
  return pretrain_;
}
const std::vector<DomainDataset>& ExperimentLab::corpora() {
  build();
  return corpora_;
}

const Splits& ExperimentLab::splits_for(std::uint64_t seed) {
  build();
  auto it = splits_.find(seed);
  if (it != splits_.end()) return it->second;
  return splits_.emplace(seed, make_splits(corpora_, cfg_.split, seed)).first->second;
}

const ModelParams& ExperimentLab::base_params(std::uint64_t seed) {
  build();
  auto it = base_.find(seed);
  if (it != base_.end()) return it->second;
  auto t0 = std::chrono::steady_clock::now();
  Rng init_rng(Rng::stream(seed, "init"));
  ModelParams params = init_params(model_cfg_, init_rng);
  MetaHyperparams sched = cfg_.meta;
  sched.finetune_lr = cfg_.pretrain_lr;
  sched.finetune_epochs = cfg_.pretrain_epochs;
  sched.finetune_batch_size = cfg_.pretrain_batch;
  Rng rng(Rng::stream(seed, "pretrain"));
  params = fine_tune(*objective_, params, pretrain_, sched, rng, progress_);
  lab_note(progress_, "pretrain seed " + std::to_string(seed) + " done (" +
                          fixed2(elapsed_s(t0)) + "s)");
  return base_.emplace(seed, std::move(params)).first->second;
}

const ModelParams& ExperimentLab::mtl_params(std::uint64_t seed) {
  build();
  auto it = mtl_.find(seed);
  if (it != mtl_.end()) return it->second;
  const ModelParams& start = base_params(seed);
  auto t0 = std::chrono::steady_clock::now();
  const Splits& sp = splits_for(seed);
  DomainDataset pooled;
  pooled.domain = "sources";
  for (const DomainDataset& task : sp.source_tasks)
    pooled.pairs.insert(pooled.pairs.end(), task.pairs.begin(), task.pairs.end());
  MetaHyperparams sched = cfg_.meta;
  sched.finetune_lr = cfg_.mtl_lr;
  sched.finetune_epochs = cfg_.mtl_epochs;
  sched.finetune_batch_size = cfg_.mtl_batch;
  Rng rng(Rng::stream(seed, "mtl"));
  ModelParams params = fine_tune(*objective_, start, pooled, sched, rng, progress_);
  lab_note(progress_, "mtl seed " + std::to_string(seed) + " done (" + fixed2(elapsed_s(t0)) + "s)");
  return mtl_.emplace(seed, std::move(params)).first->second;
}

const ModelParams& ExperimentLab::meta_params(std::uint64_t seed, int source_count) {
  build();
  int total = (int)cfg_.source_profiles.size();
  if (source_count < 1 || source_count > total)
    throw std::invalid_argument("meta_params: source count " + std::to_string(source_count) +
                                " outside [1, " + std::to_string(total) + "]");
  auto key = std::make_pair(seed, source_count);
  auto it = meta_.find(key);
  if (it != meta_.end()) return it->second;
  const ModelParams& start = base_params(seed);
  auto t0 = std::chrono::steady_clock::now();
  const Splits& sp = splits_for(seed);
  std::vector<DomainDataset> tasks(sp.source_tasks.begin(),
                                   sp.source_tasks.begin() + source_count);
  Rng rng(Rng::stream(seed, "meta", (std::uint64_t)source_count));
  EvalFn eval = [this, seed](const ModelParams& p) { return valid_score(p, seed); };
  ModelParams params = meta_train(*objective_, tasks, start, cfg_.meta, rng, eval, progress_);
  lab_note(progress_, "meta seed " + std::to_string(seed) + " sources " +
                          std::to_string(source_count) + " done (" + fixed2(elapsed_s(t0)) + "s)");
  return meta_.emplace(key, std::move(params)).first->second;
}

std::uint64_t ExperimentLab::mtl_source_fingerprint(std::uint64_t seed) {
  const Splits& sp = splits_for(seed);
  return fingerprint_tasks(sp.source_tasks, sp.source_tasks.size());
}

std::uint64_t ExperimentLab::meta_source_fingerprint(std::uint64_t seed, int source_count) {
  const Splits& sp = splits_for(seed);
  if (source_count < 1 || source_count > (int)sp.source_tasks.size())
    throw std::invalid_argument("meta_source_fingerprint: source count out of range");
  return fingerprint_tasks(sp.source_tasks, (size_t)source_count);
}

double ExperimentLab::score_pairs(const ModelParams& params,
                                  const std::vector<SentencePair>& pairs, int beam) {
  build();
  if (beam < 1) beam = cfg_.beam_size;
  std::vector<std::vector<std::string>> sources, hypotheses;
  std::vector<std::vector<EditSpan>> golds;
  sources.reserve(pairs.size());
  for (const SentencePair& p : pairs) {
    std::vector<int> src = codec_->encode(p.source_tokens);
    std::vector<int> out = beam_decode(params, model_cfg_, src, beam, model_cfg_.max_len);
    sources.push_back(p.source_tokens);
    hypotheses.push_back(codec_->decode(out));
    golds.push_back(p.gold_edits ? *p.gold_edits : extract_edits(p.source_tokens, p.target_tokens));
  }
  return score_corpus(sources, hypotheses, golds).prf.f;
}

const TaskSplit& ExperimentLab::target_split(std::uint64_t seed, const std::string& target) {
  const Splits& sp = splits_for(seed);
  if (sp.valid_task.domain == target) return sp.valid_task;
  for (const TaskSplit& t : sp.test_tasks)
    if (t.domain == target) return t;
  throw std::invalid_argument("unknown target domain: " + target);
}

double ExperimentLab::valid_score(const ModelParams& params, std::uint64_t seed) {
  const TaskSplit& v = splits_for(seed).valid_task;
  size_t n = std::min((size_t)cfg_.valid_eval_cap, v.dev.size());
  std::vector<SentencePair> subset(v.dev.begin(), v.dev.begin() + (std::ptrdiff_t)n);
  // greedy decoding keeps the periodic evals cheap
  return score_pairs(params, subset, 1);
}

ModelParams ExperimentLab::adapted_params(const std::string& strategy, const std::string& target,
                                          std::uint64_t seed, int source_count) {
  build();
  if (source_count < 1) source_count = (int)cfg_.source_profiles.size();
  const ModelParams* start = nullptr;
  if (strategy == "no-finetune" || strategy == "finetune") {
    start = &base_params(seed);
  } else if (strategy == "mtl-finetune") {
    start = &mtl_params(seed);
  } else if (strategy == "metagec") {
    start = &meta_params(seed, source_count);
  } else {
    throw std::invalid_argument("unknown strategy: " + strategy);
  }
  if (strategy == "no-finetune") return *start;
  const TaskSplit& split = target_split(seed, target);
  DomainDataset train{split.domain, split.train};
  Rng rng(Rng::stream(seed, "finetune:" + target));
  return fine_tune(*objective_, *start, train, cfg_.meta, rng, progress_);
}

StrategyOutcome ExperimentLab::run_strategy(const std::string& strategy, const std::string& target,
                                            std::uint64_t seed, int source_count) {
  build();
  if (source_count < 1) source_count = (int)cfg_.source_profiles.size();
  ModelParams params = adapted_params(strategy, target, seed, source_count);
  StrategyOutcome oc;
  oc.f05 = score_pairs(params, target_split(seed, target).test);
  if (strategy == "mtl-finetune") oc.source_fingerprint = mtl_source_fingerprint(seed);
  if (strategy == "metagec") oc.source_fingerprint = meta_source_fingerprint(seed, source_count);
  return oc;
}

ResultsTable ExperimentLab::run_suite() {
  build();
  ResultsTable table;
  table.strategies = kStrategies;
  table.targets.push_back(cfg_.valid_profile);
  for (const std::string& t : cfg_.test_profiles) table.targets.push_back(t);
  table.seeds = cfg_.seeds;

  for (const std::string& strategy : kStrategies) {
    for (const std::string& target : table.targets) {
      std::vector<double> scores;
      for (std::uint64_t seed : cfg_.seeds) {
        auto t0 = std::chrono::steady_clock::now();
        StrategyOutcome oc = run_strategy(strategy, target, seed);
        lab_note(progress_, "cell " + strategy + " " + target + " seed " + std::to_string(seed) +
                                " f05 " + fixed6(oc.f05) + " (" + fixed2(elapsed_s(t0)) + "s)");
        scores.push_back(oc.f05);
      }
      table.cells[target][strategy] = make_cell(std::move(scores));
    }
  }

  int total = (int)cfg_.source_profiles.size();
  for (std::uint64_t seed : cfg_.seeds)
    if (mtl_source_fingerprint(seed) != meta_source_fingerprint(seed, total))
      throw std::logic_error("source-task fingerprint mismatch between mtl-finetune and metagec"
                             " for seed " + std::to_string(seed));

  for (const std::string& strategy : kStrategies) {
    std::vector<double> per_seed;
    for (size_t si = 0; si < cfg_.seeds.size(); ++si) {
      double acc = 0.0;
      for (const std::string& target : table.targets)
        acc += table.cells[target][strategy].per_seed[si];
      per_seed.push_back(acc / (double)table.targets.size());
    }
    table.average[strategy] = make_cell(std::move(per_seed));
  }
  return table;
}

AblationTable ExperimentLab::ablate_sources(const std::vector<int>& counts_in) {
  build();
  if (counts_in.empty()) throw std::invalid_argument("ablate_sources: no counts given");
  std::vector<int> counts = counts_in;
  std::sort(counts.begin(), counts.end());
  counts.erase(std::unique(counts.begin(), counts.end()), counts.end());
  int total = (int)cfg_.source_profiles.size();
  for (int c : counts)
    if (c < 1 || c > total)
      throw std::invalid_argument("ablate_sources: count " + std::to_string(c) + " outside [1, " +
                                  std::to_string(total) + "]");
  std::vector<std::string> targets;
  targets.push_back(cfg_.valid_profile);
  for (const std::string& t : cfg_.test_profiles) targets.push_back(t);

  AblationTable table;
  for (int c : counts) {
    AblationRow row;
    row.source_count = c;
    for (std::uint64_t seed : cfg_.seeds) {
      double acc = 0.0;
      for (const std::string& target : targets) acc += run_strategy("metagec", target, seed, c).f05;
      row.per_seed.push_back(acc / (double)targets.size());
      lab_note(progress_, "ablation sources " + std::to_string(c) + " seed " +
                              std::to_string(seed) + " mean_f05 " + fixed6(row.per_seed.back()));
    }
    row.mean = make_cell(row.per_seed).mean;
    table.push_back(std::move(row));
  }
  return table;
}

void write_results_table(const ResultsTable& table, std::ostream& out) {
  const std::string corner = "Target";
  const std::string avg = "Average";
  size_t name_w = std::max(corner.size(), avg.size());
  for (const std::string& t : table.targets) name_w = std::max(name_w, t.size());
  std::vector<size_t> col_w;
  for (const std::string& s : table.strategies) col_w.push_back(std::max<size_t>(s.size(), 6));
  auto pad_left = [](const std::string& s, size_t w) { return std::string(w - s.size(), ' ') + s; };
  auto pad_right = [](const std::string& s, size_t w) { return s + std::string(w - s.size(), ' '); };
  size_t line_w = name_w;
  for (size_t w : col_w) line_w += 2 + w;

  out << pad_right(corner, name_w);
  for (size_t i = 0; i < table.strategies.size(); ++i)
    out << "  " << pad_left(table.strategies[i], col_w[i]);
  out << "\n" << std::string(line_w, '-') << "\n";
  for (const std::string& t : table.targets) {
    out << pad_right(t, name_w);
    for (size_t i = 0; i < table.strategies.size(); ++i)
      out << "  "
          << pad_left(fixed2(table.cells.at(t).at(table.strategies[i]).mean * 100.0), col_w[i]);
    out << "\n";
  }
  out << std::string(line_w, '-') << "\n";
  out << pad_right(avg, name_w);
  for (size_t i = 0; i < table.strategies.size(); ++i)
    out << "  " << pad_left(fixed2(table.average.at(table.strategies[i]).mean * 100.0), col_w[i]);
  out << "\n";
}

void write_results_csv(const ResultsTable& table, std::ostream& out) {
  out << "target,strategy,mean_f05,stddev_f05";
  for (std::uint64_t s : table.seeds) out << ",seed_" << s;
  out << "\n";
  for (const std::string& t : table.targets) {
    for (const std::string& s : table.strategies) {
      const CellResult& c = table.cells.at(t).at(s);
      out << t << "," << s << "," << fixed10(c.mean) << "," << fixed10(c.stddev);
      for (double v : c.per_seed) out << "," << fixed10(v);
      out << "\n";
    }
  }
}

void write_ablation_csv(const AblationTable& table, const std::vector<std::uint64_t>& seeds,
                        std::ostream& out) {
  out << "source_count,mean_f05";
  for (std::uint64_t s : seeds) out << ",seed_" << s;
  out << "\n";
  for (const AblationRow& row : table) {
    out << row.source_count << "," << fixed10(row.mean);
    for (double v : row.per_seed) out << "," << fixed10(v);
    out << "\n";
  }
}

ResultsTable read_results_csv(std::istream& in, const std::string& origin) {
  ResultsTable table;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw std::runtime_error(origin + " line " + std::to_string(lineno) + ": " + msg);
  };

  ++lineno;
  if (!std::getline(in, line)) fail("missing header");
  std::vector<std::string> head = split_fields(trim(line));
  if (head.size() < 5 || head[0] != "target" || head[1] != "strategy" || head[2] != "mean_f05" ||
      head[3] != "stddev_f05")
    fail("unexpected header");
  for (size_t i = 4; i < head.size(); ++i) {
    if (head[i].rfind("seed_", 0) != 0) fail("expected seed_* column, got '" + head[i] + "'");
    table.seeds.push_back(to_u64(head[i].substr(5)));
  }

  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> f = split_fields(trim(line));
    if (f.size() != 4 + table.seeds.size()) fail("wrong field count");
    CellResult cell;
    cell.mean = to_double(f[2]);
    cell.stddev = to_double(f[3]);
    for (size_t i = 4; i < f.size(); ++i) cell.per_seed.push_back(to_double(f[i]));
    if (std::find(table.targets.begin(), table.targets.end(), f[0]) == table.targets.end())
      table.targets.push_back(f[0]);
    if (std::find(table.strategies.begin(), table.strategies.end(), f[1]) ==
        table.strategies.end())
      table.strategies.push_back(f[1]);
    if (table.cells[f[0]].count(f[1])) fail("duplicate cell " + f[0] + "/" + f[1]);
    table.cells[f[0]][f[1]] = std::move(cell);
  }
  if (table.targets.empty()) fail("no data rows");
  for (const std::string& t : table.targets)
    for (const std::string& s : table.strategies)
      if (!table.cells[t].count(s)) fail("missing cell " + t + "/" + s);

  for (const std::string& s : table.strategies) {
    std::vector<double> per_seed;
    for (size_t si = 0; si < table.seeds.size(); ++si) {
      double acc = 0.0;
      for (const std::string& t : table.targets) acc += table.cells[t][s].per_seed[si];
      per_seed.push_back(acc / (double)table.targets.size());
    }
    table.average[s] = make_cell(std::move(per_seed));
  }
  return table;
}

namespace {

void write_text_file(const std::string& path, const std::function<void(std::ostream&)>& writer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  writer(out);
  out.flush();
  if (!out) throw std::runtime_error("write failed for " + path);
}

void ensure_dir(const std::string& dir) { std::filesystem::create_directories(dir); }

int cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_dir) {
  ExperimentLab lab(cfg, &std::cerr);
  ensure_dir(out_dir + "/data");
  for (const DomainDataset& d : lab.corpora()) {
    std::string path = out_dir + "/data/" + d.domain + ".tsv";
    save_parallel(d, path);
    std::cout << "wrote " << path << "\n";
  }
  const DomainDataset& pre = lab.pretrain_corpus();
  std::string pre_path = out_dir + "/data/pretrain_" + pre.domain + ".tsv";
  save_parallel(pre, pre_path);
  std::cout << "wrote " << pre_path << "\n";
  std::string bpe_path = out_dir + "/bpe_merges.txt";
  save_merge_table(lab.merge_table(), bpe_path);
  std::cout << "wrote " << bpe_path << "\n";
  return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir) {
  ExperimentLab lab(cfg, &std::cerr);
  ensure_dir(out_dir);
  Checkpoint ck;
  ck.config = lab.model_config();
  ck.params = lab.base_params(seed);
  ck.rng_state = seed;
  std::string path = out_dir + "/base_seed" + std::to_string(seed) + ".ckpt";
  save_checkpoint(ck, path);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_meta_train(const ExperimentConfig& cfg, std::uint64_t seed, int sources,
                   const std::string& out_dir) {
  ExperimentLab lab(cfg, &std::cerr);
  ensure_dir(out_dir);
  int count = sources > 0 ? sources : (int)cfg.source_profiles.size();
  Checkpoint ck;
  ck.config = lab.model_config();
  ck.params = lab.meta_params(seed, count);
  ck.rng_state = seed;
  std::string path = out_dir + "/meta_seed" + std::to_string(seed) + "_src" +
                     std::to_string(count) + ".ckpt";
  save_checkpoint(ck, path);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_finetune(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& target,
                 const std::string& init, const std::string& out_dir) {
  std::string strategy;
  if (init == "base") strategy = "finetune";
  else if (init == "mtl") strategy = "mtl-finetune";
  else if (init == "meta") strategy = "metagec";
  else throw std::invalid_argument("unknown init stage: " + init);
  ExperimentLab lab(cfg, &std::cerr);
  ensure_dir(out_dir);
  ModelParams tuned = lab.adapted_params(strategy, target, seed);
  const Splits& sp = lab.splits_for(seed);
  const TaskSplit* split = nullptr;
  if (sp.valid_task.domain == target) split = &sp.valid_task;
  for (const TaskSplit& t : sp.test_tasks)
    if (t.domain == target) split = &t;
  if (!split) throw std::invalid_argument("unknown target domain: " + target);
  double f05 = lab.score_pairs(tuned, split->test);
  Checkpoint ck;
  ck.config = lab.model_config();
  ck.params = std::move(tuned);
  ck.rng_state = seed;
  std::string path = out_dir + "/finetune_" + init + "_" + target + "_seed" +
                     std::to_string(seed) + ".ckpt";
  save_checkpoint(ck, path);
  std::cout << "wrote " << path << "\n";
  std::cout << "target " << target << " init " << init << " seed " << seed << " f05 "
            << fixed6(f05) << "\n";
  return 0;
}

int cmd_run_suite(const ExperimentConfig& cfg, const std::string& out_dir) {
  ExperimentLab lab(cfg, &std::cerr);
  ensure_dir(out_dir);
  ResultsTable table = lab.run_suite();
  std::string table_path = out_dir + "/results_table.txt";
  std::string cells_path = out_dir + "/results_cells.csv";
  std::string fp_path = out_dir + "/source_fingerprints.csv";
  write_text_file(table_path, [&](std::ostream& o) { write_results_table(table, o); });
  write_text_file(cells_path, [&](std::ostream& o) { write_results_csv(table, o); });
  write_text_file(fp_path, [&](std::ostream& o) {
    o << "seed,mtl_finetune,metagec\n";
    for (std::uint64_t seed : table.seeds)
      o << seed << "," << hex16(lab.mtl_source_fingerprint(seed)) << ","
        << hex16(lab.meta_source_fingerprint(seed, (int)cfg.source_profiles.size())) << "\n";
  });
  std::cout << "wrote " << table_path << "\n";
  std::cout << "wrote " << cells_path << "\n";
  std::cout << "wrote " << fp_path << "\n";
  write_results_table(table, std::cout);
  return 0;
}

int cmd_ablate(const ExperimentConfig& cfg, const std::vector<int>& counts,
               const std::string& out_dir) {
  ExperimentLab lab(cfg, &std::cerr);
  ensure_dir(out_dir);
  AblationTable table = lab.ablate_sources(counts);
  std::string path = out_dir + "/ablation.csv";
  write_text_file(path, [&](std::ostream& o) { write_ablation_csv(table, cfg.seeds, o); });
  std::cout << "wrote " << path << "\n";
  for (const AblationRow& row : table)
    std::cout << "sources " << row.source_count << " mean_f05 " << fixed6(row.mean) << "\n";
  return 0;
}

int cmd_score(const std::string& pairs_path, const std::string& hyp_path) {
  DomainDataset data = load_parallel(pairs_path);
  std::ifstream in(hyp_path);
  if (!in) throw std::runtime_error("cannot open hypothesis file " + hyp_path);
  std::vector<std::vector<std::string>> hypotheses;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> toks;
    std::stringstream ss(line);
    std::string t;
    while (ss >> t) toks.push_back(t);
    hypotheses.push_back(std::move(toks));
  }
  if (hypotheses.size() != data.pairs.size())
    throw std::runtime_error("hypothesis count " + std::to_string(hypotheses.size()) +
                             " does not match pair count " + std::to_string(data.pairs.size()));
  std::vector<std::vector<std::string>> sources;
  std::vector<std::vector<EditSpan>> golds;
  for (const SentencePair& p : data.pairs) {
    sources.push_back(p.source_tokens);
    golds.push_back(p.gold_edits ? *p.gold_edits : extract_edits(p.source_tokens, p.target_tokens));
  }
  ScoreReport rep = score_corpus(sources, hypotheses, golds);
  std::cout << "tp " << rep.counts.tp << " fp " << rep.counts.fp << " fn " << rep.counts.fn
            << " precision " << fixed6(rep.prf.precision) << " recall " << fixed6(rep.prf.recall)
            << " f05 " << fixed6(rep.prf.f) << "\n";
  return 0;
}

int cmd_report(const std::string& cells_path, const std::string& out_dir) {
  std::ifstream in(cells_path);
  if (!in) throw std::runtime_error("cannot open cells file " + cells_path);
  ResultsTable table = read_results_csv(in, cells_path);
  ensure_dir(out_dir);
  std::string table_path = out_dir + "/results_table.txt";
  write_text_file(table_path, [&](std::ostream& o) { write_results_table(table, o); });
  std::cout << "wrote " << table_path << "\n";
  write_results_table(table, std::cout);
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Desk-scale lab for few-shot domain adaptation of a neural grammar corrector"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 1;
  app.add_option("--config", config_path, "experiment configuration file (INI)");
  app.add_option("--out", out_dir, "output directory")->capture_default_str();
  app.add_option("--seed", seed, "experiment seed for single-seed commands")->capture_default_str();

  CLI::App* gen = app.add_subcommand("gen-data", "write the synthetic corpora and subword table");
  CLI::App* pre = app.add_subcommand("pretrain", "train the base model for one seed and checkpoint it");
  int meta_sources = 0;
  CLI::App* met = app.add_subcommand("meta-train", "meta-train from the pretrained base and checkpoint the result");
  met->add_option("--sources", meta_sources, "number of source tasks (default: all)");
  std::string ft_target, ft_init = "base";
  CLI::App* ft = app.add_subcommand("finetune", "adapt a stage model to a target domain and report its score");
  ft->add_option("--target", ft_target, "target domain name")->required();
  ft->add_option("--init", ft_init, "starting model: base, mtl, or meta")
      ->check(CLI::IsMember({"base", "mtl", "meta"}))
      ->capture_default_str();
  CLI::App* suite = app.add_subcommand("run-suite", "run every strategy/target/seed cell and write the report");
  std::string counts_str = "5,9";
  CLI::App* abl = app.add_subcommand("ablate-sources", "rerun metagec with different source-task counts");
  abl->add_option("--counts", counts_str, "comma-separated source-task counts")->capture_default_str();
  std::string pairs_path, hyp_path;
  CLI::App* sc = app.add_subcommand("score", "score one-sentence-per-line hypotheses against a parallel file");
  sc->add_option("--pairs", pairs_path, "parallel source/target file")->required();
  sc->add_option("--hyp", hyp_path, "hypothesis file, one tokenized sentence per line")->required();
  std::string cells_path;
  CLI::App* rep = app.add_subcommand("report", "rebuild the results table from a cells CSV");
  rep->add_option("--cells", cells_path, "cells CSV path (default: <out>/results_cells.csv)");

  for (CLI::App* s : {gen, pre, met, ft, suite, abl, sc, rep}) s->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    if (gen->parsed()) return cmd_gen_data(cfg, out_dir);
    if (pre->parsed()) return cmd_pretrain(cfg, seed, out_dir);
    if (met->parsed()) return cmd_meta_train(cfg, seed, meta_sources, out_dir);
    if (ft->parsed()) return cmd_finetune(cfg, seed, ft_target, ft_init, out_dir);
    if (suite->parsed()) return cmd_run_suite(cfg, out_dir);
    if (abl->parsed()) {
      std::vector<int> counts;
      for (const std::string& c : split_list(counts_str)) counts.push_back(to_int(c));
      return cmd_ablate(cfg, counts, out_dir);
    }
    if (sc->parsed()) return cmd_score(pairs_path, hyp_path);
    if (rep->parsed())
      return cmd_report(cells_path.empty() ? out_dir + "/results_cells.csv" : cells_path, out_dir);
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mgec
