#pragma once

#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "mgec/corpus.hpp"
#include "mgec/model.hpp"
#include "mgec/rng.hpp"

namespace mgec {

/// Thrown when a loss turns non-finite; distinguishes numeric blowups from
/// contract violations so callers can skip an episode instead of aborting.
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A differentiable training objective over sentence pairs. The adaptation
/// code only sees this interface, so tests can swap in tiny analytic models.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual LossResult eval(const ModelParams& params,
                          const std::vector<SentencePair>& batch) const = 0;
};

/// Token-weighted cross-entropy of the seq2seq model over encoded pairs.
class Seq2SeqObjective : public Objective {
 public:
  Seq2SeqObjective(const ModelConfig& cfg, const Codec& codec) : cfg_(cfg), codec_(&codec) {}
  LossResult eval(const ModelParams& params,
                  const std::vector<SentencePair>& batch) const override;
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  const Codec* codec_;
};

/// One adaptation episode: a support batch to adapt on and a query batch to
/// evaluate the adapted parameters on, both drawn from the same domain.
struct EpisodeBatch {
  std::vector<SentencePair> support;
  std::vector<SentencePair> query;
  std::string domain;
};

struct MetaHyperparams {
  double alpha = 1e-7;            // inner step size
  double beta = 1e-5;             // outer step size
  int tasks_per_meta_batch = 3;   // domains sampled per meta-step, without replacement
  int support_size = 8;
  int query_size = 8;
  int meta_steps = 400;
  double finetune_lr = 5e-4;
  int finetune_epochs = 8;
  int finetune_batch_size = 8;
  int inner_steps = 1;            // adaptation steps per episode
  bool plain_sgd_outer = false;   // subtract beta * grad instead of Adam
  bool adam_inner = false;        // fresh per-episode Adam instead of plain steps
  int eval_every = 100;           // validation cadence during meta-training

  void validate(size_t task_count) const;
};

/// Draws the support and query batches independently and uniformly without
/// replacement within each batch; they may overlap each other.
EpisodeBatch sample_episode(const DomainDataset& task, int support_size, int query_size, Rng& rng);

/// Plain gradient descent on the support batch: inner_steps times
/// params <- params - alpha * grad. alpha = 0 returns the input unchanged.
/// With adam_inner, a fresh Adam optimizer at lr = alpha replaces the plain
/// steps. The input parameter set is never mutated. If support_loss is given
/// it receives the loss at the unadapted parameters. Throws NumericError on a
/// non-finite support loss.
ModelParams inner_adapt(const Objective& objective, const ModelParams& params,
                        const std::vector<SentencePair>& support, const MetaHyperparams& hyper,
                        double* support_loss = nullptr);

struct MetaStepStats {
  double support_loss = 0.0;  // mean over used episodes
  double query_loss = 0.0;
  int episodes_used = 0;
  int episodes_skipped = 0;
};

/// One outer update: adapts on each episode's support batch, takes the query
/// gradient at the adapted parameters as that episode's meta-gradient, sums
/// the meta-gradients in episode order, and applies them through Adam at
/// lr = beta (or a plain step when plain_sgd_outer). Episodes with non-finite
/// losses are skipped with a logged warning; if every episode is skipped a
/// NumericError is thrown.
ModelParams meta_step(const Objective& objective, const ModelParams& params,
                      const std::vector<EpisodeBatch>& episodes, const MetaHyperparams& hyper,
                      AdamState& adam, MetaStepStats* stats = nullptr,
                      std::ostream* log = nullptr);

/// Periodic validation hook: returns an F0.5 score for candidate parameters.
using EvalFn = std::function<double(const ModelParams&)>;

/// Runs meta_steps outer updates starting from init, sampling
/// tasks_per_meta_batch source tasks without replacement each step and one
/// episode per sampled task. When an eval hook is supplied it runs at step 0,
/// every eval_every steps, and after the last step; the parameters with the
/// best score win, ties going to the later evaluation. Without a hook the
/// final parameters are returned.
/// meta_steps = 0 returns init unchanged.
ModelParams meta_train(const Objective& objective, const std::vector<DomainDataset>& source_tasks,
                       const ModelParams& init, const MetaHyperparams& hyper, Rng& rng,
                       const EvalFn& eval = {}, std::ostream* log = nullptr);

/// Adam over the target task's training pairs for finetune_epochs epochs with
/// a fresh optimizer state, shuffling and re-batching every epoch.
/// finetune_epochs = 0 returns the input unchanged.
ModelParams fine_tune(const Objective& objective, const ModelParams& params,
                      const DomainDataset& target_train, const MetaHyperparams& hyper, Rng& rng,
                      std::ostream* log = nullptr);

}  // namespace mgec
