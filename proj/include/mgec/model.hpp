#pragma once
// Tiny encoder-decoder transformer: teacher-forced training loss on the
// autodiff tape, plus an incremental KV-cached inference path for decoding.
// Both paths run on the tensor_ops kernels, so their arithmetic agrees.
//
// Blocks are pre-layer-norm with a final layer norm per stack. Positions come
// from a learned table. Input and output embeddings are tied: logits are the
// hidden states times the transposed embedding matrix.

#include <cstdint>
#include <string>
#include <vector>

#include "mgec/corpus.hpp"
#include "mgec/rng.hpp"
#include "mgec/tensor.hpp"

namespace mgec {

struct ModelConfig {
  int vocab_size = 0;
  int width = 64;
  int heads = 2;
  int enc_layers = 1;
  int dec_layers = 1;
  int ff_width = 128;
  int max_len = 64;

  bool operator==(const ModelConfig&) const = default;
  void validate() const;
};

// uniform(-0.08, 0.08) draws in a fixed tensor order; layer-norm gains start
// at 1 and every bias at 0 so normalization starts neutral
ModelParams init_params(const ModelConfig& cfg, Rng& rng);

struct EncodedPair {
  std::vector<int> source;  // subword ids, no structural tokens
  std::vector<int> target;
};

EncodedPair encode_pair(const Codec& codec, const SentencePair& pair);

// Teacher-forced loss node on the caller's tape: token-count weighted mean
// cross-entropy over the batch, pairs processed in order. EOS closes the
// source and the label row; BOS opens the decoder input.
int forward_loss(Tape& tape, const ParamVars& vars, const ModelConfig& cfg,
                 const std::vector<EncodedPair>& batch);

struct LossResult {
  double loss = 0.0;
  GradMap grads;
};

LossResult loss_and_grads(const ModelParams& params, const ModelConfig& cfg,
                          const std::vector<EncodedPair>& batch);
double batch_loss(const ModelParams& params, const ModelConfig& cfg,
                  const std::vector<EncodedPair>& batch);

// Teacher-forced decoder logits [len(target)+1, vocab] for one pair; row t
// scores the token following BOS + target[0..t). Reference semantics for the
// incremental decoder, also used by parity and causality tests.
Tensor teacher_logits(const ModelParams& params, const ModelConfig& cfg, const EncodedPair& pair);

// Runs the cached incremental decoder over BOS + prefix and returns one logit
// row per consumed token, row-aligned with teacher_logits on the same pair.
Tensor incremental_logits(const ModelParams& params, const ModelConfig& cfg,
                          const std::vector<int>& source_ids, const std::vector<int>& prefix);

// Appends the argmax token until EOS or max_len tokens; logit ties break
// toward the lowest token id. Returns generated ids without EOS.
std::vector<int> greedy_decode(const ModelParams& params, const ModelConfig& cfg,
                               const std::vector<int>& source_ids, int max_len);

// Length-normalized beam search: hypothesis score is the sum of token log
// probabilities (EOS included when finished) divided by the token count (EOS
// counted). Each step takes the beam_size best extensions by (score, parent
// index, token id); EOS extensions move to the finished pool; search stops
// when the pool holds beam_size hypotheses or max_len is reached. beam_size=1
// reproduces greedy_decode token for token.
std::vector<int> beam_decode(const ModelParams& params, const ModelConfig& cfg,
                             const std::vector<int>& source_ids, int beam_size, int max_len);

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  AdamState adam;
  std::uint64_t rng_state = 0;
};

// Versioned binary container, byte-exact across save/load cycles.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mgec
