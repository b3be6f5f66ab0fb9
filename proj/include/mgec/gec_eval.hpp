#pragma once

#include <string>
#include <vector>

namespace mgec {

/// Token-span edit on a source sentence: replace tokens [start, end) with
/// `replacement`. start == end encodes an insertion, an empty replacement a
/// deletion. Positions are word-token indices.
struct EditSpan {
  int start = 0;
  int end = 0;
  std::vector<std::string> replacement;

  bool operator==(const EditSpan& o) const = default;
};

struct ScoreCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;
};

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

struct ScoreReport {
  ScoreCounts counts;
  Prf prf;
};

/// Throws std::invalid_argument unless edits are sorted by start, pairwise
/// non-overlapping (insertions may touch but not interleave), and inside
/// [0, source_len].
void validate_edits(const std::vector<EditSpan>& edits, int source_len);

/// Applies a validated edit set to a source sentence.
std::vector<std::string> apply_edits(const std::vector<std::string>& source,
                                     const std::vector<EditSpan>& edits);

/// Minimal edit set turning `source` into `corrected`: Levenshtein alignment
/// with deterministic tie-breaking (match > substitution > deletion >
/// insertion), maximal runs of adjacent non-match operations merged into
/// single span edits.
std::vector<EditSpan> extract_edits(const std::vector<std::string>& source,
                                    const std::vector<std::string>& corrected);

/// Scores a hypothesis against gold edits. The system edit set is chosen over
/// every segmentation of the source->hypothesis alignment (adjacent alignment
/// operations merged into span edits) to maximise true positives, ties broken
/// toward fewer system edits.
ScoreCounts max_match(const std::vector<std::string>& source,
                      const std::vector<std::string>& hypothesis,
                      const std::vector<EditSpan>& gold);

Prf f_beta(const ScoreCounts& counts, double beta = 0.5);

/// Micro-averaged corpus score: counts accumulate over sentences before the
/// single final F computation.
ScoreReport score_corpus(const std::vector<std::vector<std::string>>& sources,
                         const std::vector<std::vector<std::string>>& hypotheses,
                         const std::vector<std::vector<EditSpan>>& golds, double beta = 0.5);

}  // namespace mgec
