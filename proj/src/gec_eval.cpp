#include "mgec/gec_eval.hpp"

#include <algorithm>
#include <stdexcept>

namespace mgec {

namespace {

struct AlignOp {
  enum Kind { kMatch, kSub, kDel, kIns };
  Kind kind;
  int s0, s1;  // source span [s0, s1)
  int h0, h1;  // hypothesis span [h0, h1)
};

/// Levenshtein alignment with deterministic tie-breaking:
/// match > substitution > deletion > insertion.
std::vector<AlignOp> align_ops(const std::vector<std::string>& src, const std::vector<std::string>& hyp) {
  int n = static_cast<int>(src.size()), m = static_cast<int>(hyp.size());
  std::vector<std::vector<int>> d(static_cast<size_t>(n + 1), std::vector<int>(static_cast<size_t>(m + 1)));
  for (int i = 0; i <= n; ++i) d[static_cast<size_t>(i)][0] = i;
  for (int j = 0; j <= m; ++j) d[0][static_cast<size_t>(j)] = j;
  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= m; ++j) {
      int sub = d[static_cast<size_t>(i - 1)][static_cast<size_t>(j - 1)] +
                (src[static_cast<size_t>(i - 1)] == hyp[static_cast<size_t>(j - 1)] ? 0 : 1);
      int del = d[static_cast<size_t>(i - 1)][static_cast<size_t>(j)] + 1;
      int ins = d[static_cast<size_t>(i)][static_cast<size_t>(j - 1)] + 1;
      d[static_cast<size_t>(i)][static_cast<size_t>(j)] = std::min({sub, del, ins});
    }
  }
  std::vector<AlignOp> ops;
  int i = n, j = m;
  while (i > 0 || j > 0) {
    int cur = d[static_cast<size_t>(i)][static_cast<size_t>(j)];
    if (i > 0 && j > 0 && src[static_cast<size_t>(i - 1)] == hyp[static_cast<size_t>(j - 1)] &&
        cur == d[static_cast<size_t>(i - 1)][static_cast<size_t>(j - 1)]) {
      ops.push_back({AlignOp::kMatch, i - 1, i, j - 1, j});
      --i, --j;
    } else if (i > 0 && j > 0 && cur == d[static_cast<size_t>(i - 1)][static_cast<size_t>(j - 1)] + 1) {
      ops.push_back({AlignOp::kSub, i - 1, i, j - 1, j});
      --i, --j;
    } else if (i > 0 && cur == d[static_cast<size_t>(i - 1)][static_cast<size_t>(j)] + 1) {
      ops.push_back({AlignOp::kDel, i - 1, i, j, j});
      --i;
    } else {
      ops.push_back({AlignOp::kIns, i, i, j - 1, j});
      --j;
    }
  }
  std::reverse(ops.begin(), ops.end());
  return ops;
}

EditSpan segment_edit(const std::vector<AlignOp>& ops, const std::vector<std::string>& hyp, size_t a,
                      size_t b) {
  EditSpan e;
  e.start = ops[a].s0;
  e.end = ops[b].s1;
  for (int j = ops[a].h0; j < ops[b].h1; ++j) e.replacement.push_back(hyp[static_cast<size_t>(j)]);
  return e;
}

}  // namespace

void validate_edits(const std::vector<EditSpan>& edits, int source_len) {
  for (size_t k = 0; k < edits.size(); ++k) {
    const EditSpan& e = edits[k];
    if (e.end < e.start)
      throw std::invalid_argument("edits: reversed span [" + std::to_string(e.start) + "," +
                                  std::to_string(e.end) + ")");
    if (e.start < 0 || e.end > source_len)
      throw std::invalid_argument("edits: span [" + std::to_string(e.start) + "," + std::to_string(e.end) +
                                  ") outside sentence of length " + std::to_string(source_len));
    if (k > 0) {
      const EditSpan& prev = edits[k - 1];
      if (e.start < prev.end)
        throw std::invalid_argument("edits: overlapping or unsorted spans at index " + std::to_string(k));
      if (prev.start == e.start && prev.end == e.end)
        throw std::invalid_argument("edits: duplicate zero-width span at position " +
                                    std::to_string(e.start));
    }
  }
}

std::vector<std::string> apply_edits(const std::vector<std::string>& source,
                                     const std::vector<EditSpan>& edits) {
  validate_edits(edits, static_cast<int>(source.size()));
  std::vector<std::string> out;
  int pos = 0;
  for (const EditSpan& e : edits) {
    for (; pos < e.start; ++pos) out.push_back(source[static_cast<size_t>(pos)]);
    for (const std::string& t : e.replacement) out.push_back(t);
    pos = e.end;
  }
  for (; pos < static_cast<int>(source.size()); ++pos) out.push_back(source[static_cast<size_t>(pos)]);
  return out;
}

std::vector<EditSpan> extract_edits(const std::vector<std::string>& source,
                                    const std::vector<std::string>& corrected) {
  std::vector<AlignOp> ops = align_ops(source, corrected);
  std::vector<EditSpan> edits;
  size_t i = 0;
  while (i < ops.size()) {
    if (ops[i].kind == AlignOp::kMatch) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j + 1 < ops.size() && ops[j + 1].kind != AlignOp::kMatch) ++j;
    edits.push_back(segment_edit(ops, corrected, i, j));
    i = j + 1;
  }
  return edits;
}

ScoreCounts max_match(const std::vector<std::string>& source, const std::vector<std::string>& hypothesis,
                      const std::vector<EditSpan>& gold) {
  validate_edits(gold, static_cast<int>(source.size()));
  std::vector<AlignOp> ops = align_ops(source, hypothesis);
  int L = static_cast<int>(ops.size());

  // Gold insertions can in principle be matched by two identical zero-width
  // segments; a small bitmask tracks them so each gold edit is credited once.
  // Wider gold spans cover distinct source tokens and cannot repeat.
  std::vector<int> ins_gold_bit(gold.size(), -1);
  int ins_bits = 0;
  for (size_t g = 0; g < gold.size(); ++g)
    if (gold[g].start == gold[g].end) ins_gold_bit[g] = ins_bits++;
  bool use_mask = ins_bits <= 10;
  int masks = use_mask ? (1 << ins_bits) : 1;

  auto gold_index = [&](const EditSpan& e) -> int {
    for (size_t g = 0; g < gold.size(); ++g)
      if (gold[g] == e) return static_cast<int>(g);
    return -1;
  };

  // candidate segments and their gold hits, shared across all mask states
  std::vector<std::vector<int>> seg_gold(static_cast<size_t>(L), std::vector<int>(static_cast<size_t>(L), -2));
  for (int i = 0; i < L; ++i) {
    bool has_change = false;
    for (int j = i; j < L; ++j) {
      if (ops[static_cast<size_t>(j)].kind != AlignOp::kMatch) has_change = true;
      if (!has_change) continue;
      seg_gold[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          gold_index(segment_edit(ops, hypothesis, static_cast<size_t>(i), static_cast<size_t>(j)));
    }
  }

  // dp[i][mask]: best (tp, -edits) over segmentations of the first i ops with
  // exactly the insertions in `mask` credited. Lexicographic maximisation.
  constexpr long kNeg = -1'000'000'000L;
  std::vector<std::vector<std::pair<long, long>>> dp(
      static_cast<size_t>(L + 1),
      std::vector<std::pair<long, long>>(static_cast<size_t>(masks), {kNeg, kNeg}));
  dp[0][0] = {0, 0};

  auto relax = [](std::pair<long, long>& slot, std::pair<long, long> cand) {
    if (cand > slot) slot = cand;
  };

  for (int i = 0; i < L; ++i) {
    for (int mask = 0; mask < masks; ++mask) {
      auto cur = dp[static_cast<size_t>(i)][static_cast<size_t>(mask)];
      if (cur.first == kNeg) continue;
      if (ops[static_cast<size_t>(i)].kind == AlignOp::kMatch)
        relax(dp[static_cast<size_t>(i + 1)][static_cast<size_t>(mask)], cur);
      // segment [i, j] merged into one edit; must contain a non-match op
      for (int j = i; j < L; ++j) {
        int g = seg_gold[static_cast<size_t>(i)][static_cast<size_t>(j)];
        if (g == -2) continue;  // all-match run, not a valid edit
        long tp_inc = 0;
        int nmask = mask;
        if (g >= 0) {
          int bit = ins_gold_bit[static_cast<size_t>(g)];
          if (!use_mask || bit < 0) {
            tp_inc = 1;
          } else if (!(mask & (1 << bit))) {
            tp_inc = 1;
            nmask = mask | (1 << bit);
          }
        }
        relax(dp[static_cast<size_t>(j + 1)][static_cast<size_t>(nmask)],
              {cur.first + tp_inc, cur.second - 1});
      }
    }
  }

  std::pair<long, long> best = {kNeg, kNeg};
  for (int mask = 0; mask < masks; ++mask) relax(best, dp[static_cast<size_t>(L)][static_cast<size_t>(mask)]);

  ScoreCounts counts;
  counts.tp = best.first;
  long edits = -best.second;
  counts.fp = edits - counts.tp;
  counts.fn = static_cast<long>(gold.size()) - counts.tp;
  return counts;
}

Prf f_beta(const ScoreCounts& counts, double beta) {
  Prf out;
  out.precision = (counts.tp + counts.fp == 0)
                      ? 1.0
                      : static_cast<double>(counts.tp) / static_cast<double>(counts.tp + counts.fp);
  out.recall = (counts.tp + counts.fn == 0)
                   ? 1.0
                   : static_cast<double>(counts.tp) / static_cast<double>(counts.tp + counts.fn);
  double b2 = beta * beta;
  double denom = b2 * out.precision + out.recall;
  out.f = denom > 0.0 ? (1.0 + b2) * out.precision * out.recall / denom : 0.0;
  return out;
}

ScoreReport score_corpus(const std::vector<std::vector<std::string>>& sources,
                         const std::vector<std::vector<std::string>>& hypotheses,
                         const std::vector<std::vector<EditSpan>>& golds, double beta) {
  if (sources.size() != hypotheses.size() || sources.size() != golds.size())
    throw std::invalid_argument("score_corpus: got " + std::to_string(sources.size()) + " sources, " +
                                std::to_string(hypotheses.size()) + " hypotheses, " +
                                std::to_string(golds.size()) + " gold sets");
  ScoreReport report;
  for (size_t i = 0; i < sources.size(); ++i) {
    ScoreCounts c = max_match(sources[i], hypotheses[i], golds[i]);
    report.counts.tp += c.tp;
    report.counts.fp += c.fp;
    report.counts.fn += c.fn;
  }
  report.prf = f_beta(report.counts, beta);
  return report;
}

}  // namespace mgec
