#pragma once
// Synthetic multi-domain corpus generation, subword tokenization, and split
// construction.
//
// Sentences come from a small template grammar (article + adjective + noun,
// agreeing verb, object, optional prepositional phrase) and are corrupted by
// per-domain rule probabilities to form the erroneous source side. Because
// corruption tracks token origins, every synthesized pair carries exact gold
// correction edits. Loaded corpora carry no gold edits; callers fall back to
// alignment-based extraction.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mgec/gec_eval.hpp"

namespace mgec {

struct SentencePair {
  std::vector<std::string> source_tokens;
  std::vector<std::string> target_tokens;
  std::string domain;
  // exact correction edits when the pair was synthesized; absent for loaded data
  std::optional<std::vector<EditSpan>> gold_edits;
};

struct DomainDataset {
  std::string domain;
  std::vector<SentencePair> pairs;
};

// Ordered merge rules plus the derived subword vocabulary. Ids 0 through 3 are
// reserved for UNK, PAD, BOS, EOS; learned symbols start at 4 in sorted order.
// Non-final subwords of a word carry the "@@" continuation marker.
struct MergeTable {
  static constexpr int kUnkId = 0;
  static constexpr int kPadId = 1;
  static constexpr int kBosId = 2;
  static constexpr int kEosId = 3;

  std::vector<std::pair<std::string, std::string>> merges;
  std::vector<std::string> id_to_symbol;
  std::map<std::string, int> symbol_to_id;

  int vocab_size() const { return (int)id_to_symbol.size(); }
  // kUnkId when the symbol is not in the vocabulary
  int lookup(const std::string& symbol) const;
};

// Greedy most-frequent-pair merges over the word type frequency table; count
// ties break toward the lexicographically smallest (left, right) pair. The
// vocabulary covers every subword form realized on the corpus plus both plain
// and marked forms of every seen character.
MergeTable learn_bpe(const std::vector<std::vector<std::string>>& corpus, int num_merges);

// Splits the token into characters, then applies merges in table order, each
// greedily left to right. Non-final pieces get the continuation marker.
std::vector<std::string> apply_bpe(const std::string& token, const MergeTable& table);

void save_merge_table(const MergeTable& table, const std::string& path);
MergeTable load_merge_table(const std::string& path);

// Memoizing encoder/decoder over a fixed merge table.
class Codec {
 public:
  explicit Codec(MergeTable table);
  const MergeTable& table() const { return table_; }
  // subword ids for a word sequence; no BOS/EOS added here
  std::vector<int> encode(const std::vector<std::string>& word_tokens) const;
  // joins continuation pieces back into words; structural ids produce no text
  std::vector<std::string> decode(const std::vector<int>& ids) const;

 private:
  MergeTable table_;
  mutable std::unordered_map<std::string, std::vector<int>> memo_;
};

struct SplitSpec {
  int source_count = 1000;
  int valid_train = 200;
  int valid_dev = 800;
  int valid_test = 400;
  int test_train = 200;
  // remaining test-domain pairs split dev:test in this ratio
  int test_dev_parts = 2;
  int test_test_parts = 1;
  std::string valid_domain;
  std::vector<std::string> test_domains;
};

struct TaskSplit {
  std::string domain;
  std::vector<SentencePair> train, dev, test;
};

struct Splits {
  std::vector<DomainDataset> source_tasks;
  TaskSplit valid_task;
  std::vector<TaskSplit> test_tasks;
};

// Samples every split without replacement from a per-domain permutation, so
// splits within a domain are disjoint. Datasets not named as the valid or a
// test domain become source tasks, in input order.
Splits make_splits(const std::vector<DomainDataset>& datasets, const SplitSpec& spec,
                   std::uint64_t rng_seed);

struct DomainProfile {
  std::string domain;
  double article_drop = 0.0;
  double agreement_flip = 0.0;
  double preposition_swap = 0.0;
  double adjacent_swap = 0.0;
  double function_insert = 0.0;
};

// Fixed corruption fingerprints for the built-in domains plus the "mix"
// profile used for the generic pretraining pool.
const std::vector<DomainProfile>& builtin_profiles();
const DomainProfile& profile_by_name(const std::string& domain);

DomainDataset synth_domain(const DomainProfile& profile, int n, std::uint64_t rng_seed);

DomainDataset load_parallel(const std::string& path);
void save_parallel(const DomainDataset& dataset, const std::string& path);

}  // namespace mgec
