#include "mgec/meta.hpp"

#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

namespace mgec {

namespace {

std::string fmt6(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(6) << v;
  return ss.str();
}

void warn(std::ostream* log, const std::string& msg) {
  (log ? *log : std::cerr) << "warning: " << msg << "\n";
}

}  // namespace

LossResult Seq2SeqObjective::eval(const ModelParams& params,
                                  const std::vector<SentencePair>& batch) const {
  std::vector<EncodedPair> encoded;
  encoded.reserve(batch.size());
  for (const SentencePair& pair : batch) encoded.push_back(encode_pair(*codec_, pair));
  return loss_and_grads(params, cfg_, encoded);
}

void MetaHyperparams::validate(size_t task_count) const {
  if (alpha < 0.0) throw std::invalid_argument("MetaHyperparams: alpha must be >= 0");
  if (beta <= 0.0) throw std::invalid_argument("MetaHyperparams: beta must be > 0");
  if (support_size <= 0 || query_size <= 0)
    throw std::invalid_argument("MetaHyperparams: batch sizes must be positive");
  if (tasks_per_meta_batch <= 0 || (size_t)tasks_per_meta_batch > task_count)
    throw std::invalid_argument("MetaHyperparams: tasks_per_meta_batch " +
                                std::to_string(tasks_per_meta_batch) +
                                " outside [1, " + std::to_string(task_count) + "]");
  if (meta_steps < 0) throw std::invalid_argument("MetaHyperparams: meta_steps must be >= 0");
  if (inner_steps <= 0) throw std::invalid_argument("MetaHyperparams: inner_steps must be positive");
  if (eval_every <= 0) throw std::invalid_argument("MetaHyperparams: eval_every must be positive");
  if (finetune_lr <= 0.0) throw std::invalid_argument("MetaHyperparams: finetune_lr must be > 0");
  if (finetune_epochs < 0)
    throw std::invalid_argument("MetaHyperparams: finetune_epochs must be >= 0");
  if (finetune_batch_size <= 0)
    throw std::invalid_argument("MetaHyperparams: finetune_batch_size must be positive");
}

EpisodeBatch sample_episode(const DomainDataset& task, int support_size, int query_size,
                            Rng& rng) {
  if (support_size <= 0 || query_size <= 0)
    throw std::invalid_argument("sample_episode: batch sizes must be positive");
  int n = (int)task.pairs.size();
  if (support_size > n || query_size > n)
    throw std::invalid_argument("sample_episode: batch of " +
                                std::to_string(std::max(support_size, query_size)) +
                                " exceeds task " + task.domain + " with " + std::to_string(n) +
                                " pairs");
  EpisodeBatch ep;
  ep.domain = task.domain;
  for (int i : rng.sample_indices(n, support_size)) ep.support.push_back(task.pairs[(size_t)i]);
  for (int i : rng.sample_indices(n, query_size)) ep.query.push_back(task.pairs[(size_t)i]);
  return ep;
}

ModelParams inner_adapt(const Objective& objective, const ModelParams& params,
                        const std::vector<SentencePair>& support, const MetaHyperparams& hyper,
                        double* support_loss) {
  if (hyper.alpha < 0.0) throw std::invalid_argument("inner_adapt: alpha must be >= 0");
  if (support.empty()) throw std::invalid_argument("inner_adapt: empty support batch");
  if (hyper.alpha == 0.0) {
    // the adaptation step vanishes identically, so skip the gradient work and
    // hand back a bit-identical copy
    if (support_loss) {
      LossResult r = objective.eval(params, support);
      if (!std::isfinite(r.loss)) throw NumericError("inner_adapt: non-finite support loss");
      *support_loss = r.loss;
    }
    return params;
  }
  ModelParams adapted = params;
  AdamState inner_state;
  for (int step = 0; step < hyper.inner_steps; ++step) {
    LossResult r = objective.eval(adapted, support);
    if (!std::isfinite(r.loss)) throw NumericError("inner_adapt: non-finite support loss");
    if (step == 0 && support_loss) *support_loss = r.loss;
    if (hyper.adam_inner)
      adam_step(adapted, r.grads, inner_state, hyper.alpha);
    else
      adapted = params_add_scaled(adapted, r.grads, -hyper.alpha);
  }
  return adapted;
}

ModelParams meta_step(const Objective& objective, const ModelParams& params,
                      const std::vector<EpisodeBatch>& episodes, const MetaHyperparams& hyper,
                      AdamState& adam, MetaStepStats* stats, std::ostream* log) {
  if (episodes.empty()) throw std::invalid_argument("meta_step: no episodes");
  MetaStepStats st;
  GradMap total;
  for (const EpisodeBatch& ep : episodes) {
    if (ep.support.empty() || ep.query.empty())
      throw std::invalid_argument("meta_step: episode for domain " + ep.domain +
                                  " has an empty batch");
    try {
      double support_loss = 0.0;
      ModelParams adapted = inner_adapt(objective, params, ep.support, hyper, &support_loss);
      LossResult q = objective.eval(adapted, ep.query);
      if (!std::isfinite(q.loss)) throw NumericError("non-finite query loss");
      // first-order rule: the query gradient at the adapted parameters stands
      // in for the gradient with respect to the unadapted ones
      if (total.empty())
        total = q.grads;
      else
        total = params_add_scaled(total, q.grads, 1.0);
      st.support_loss += support_loss;
      st.query_loss += q.loss;
      st.episodes_used += 1;
    } catch (const NumericError& e) {
      warn(log, "meta_step: skipping episode for domain " + ep.domain + " (" + e.what() + ")");
      st.episodes_skipped += 1;
    }
  }
  if (st.episodes_used == 0)
    throw NumericError("meta_step: every episode was skipped for non-finite losses");
  st.support_loss /= st.episodes_used;
  st.query_loss /= st.episodes_used;
  if (stats) *stats = st;

  if (hyper.plain_sgd_outer) return params_add_scaled(params, total, -hyper.beta);
  ModelParams updated = params;
  adam_step(updated, total, adam, hyper.beta);
  return updated;
}

ModelParams meta_train(const Objective& objective, const std::vector<DomainDataset>& source_tasks,
                       const ModelParams& init, const MetaHyperparams& hyper, Rng& rng,
                       const EvalFn& eval, std::ostream* log) {
  if (source_tasks.empty()) throw std::invalid_argument("meta_train: no source tasks");
  hyper.validate(source_tasks.size());

  ModelParams params = init;
  AdamState adam;
  ModelParams best = params;
  double best_score = -1.0;
  auto run_eval = [&](int step) {
    if (!eval) return;
    double score = eval(params);
    if (log) *log << "step " << step << " valid_f05 " << fmt6(score) << "\n";
    if (score >= best_score) {
      best_score = score;
      best = params;
    }
  };

  run_eval(0);
  for (int step = 1; step <= hyper.meta_steps; ++step) {
    std::vector<EpisodeBatch> episodes;
    std::string names;
    for (int t : rng.sample_indices((int)source_tasks.size(), hyper.tasks_per_meta_batch)) {
      const DomainDataset& task = source_tasks[(size_t)t];
      episodes.push_back(sample_episode(task, hyper.support_size, hyper.query_size, rng));
      names += (names.empty() ? "" : ",") + task.domain;
    }
    MetaStepStats st;
    params = meta_step(objective, params, episodes, hyper, adam, &st, log);
    if (log)
      *log << "step " << step << " tasks " << names << " support_loss " << fmt6(st.support_loss)
           << " query_loss " << fmt6(st.query_loss) << "\n";
    if (step == hyper.meta_steps || step % hyper.eval_every == 0) run_eval(step);
  }
  return eval ? best : params;
}

ModelParams fine_tune(const Objective& objective, const ModelParams& params,
                      const DomainDataset& target_train, const MetaHyperparams& hyper, Rng& rng,
                      std::ostream* log) {
  if (target_train.pairs.empty())
    throw std::invalid_argument("fine_tune: task " + target_train.domain + " has no pairs");
  if (hyper.finetune_lr <= 0.0) throw std::invalid_argument("fine_tune: finetune_lr must be > 0");
  if (hyper.finetune_epochs < 0)
    throw std::invalid_argument("fine_tune: finetune_epochs must be >= 0");
  if (hyper.finetune_batch_size <= 0)
    throw std::invalid_argument("fine_tune: finetune_batch_size must be positive");

  ModelParams p = params;
  AdamState adam;
  size_t n = target_train.pairs.size();
  for (int epoch = 0; epoch < hyper.finetune_epochs; ++epoch) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), (size_t)0);
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (size_t start = 0; start < n; start += (size_t)hyper.finetune_batch_size) {
      size_t stop = std::min(n, start + (size_t)hyper.finetune_batch_size);
      std::vector<SentencePair> batch;
      for (size_t i = start; i < stop; ++i) batch.push_back(target_train.pairs[order[i]]);
      LossResult r = objective.eval(p, batch);
      if (!std::isfinite(r.loss))
        throw NumericError("fine_tune: non-finite loss on task " + target_train.domain);
      adam_step(p, r.grads, adam, hyper.finetune_lr);
      epoch_loss += r.loss;
      batches += 1;
    }
    if (log)
      *log << "finetune " << target_train.domain << " epoch " << epoch + 1 << " loss "
           << fmt6(epoch_loss / batches) << "\n";
  }
  return p;
}

}  // namespace mgec
