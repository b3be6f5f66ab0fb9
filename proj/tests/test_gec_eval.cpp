#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "mgec/gec_eval.hpp"
#include "mgec/rng.hpp"

using namespace mgec;

namespace {

// ---- independent oracle -------------------------------------------------
// Reimplements the alignment contract and enumerates every segmentation by
// brute force. Shares no code with the library implementation.

struct OOp {
  int kind;  // 0 match, 1 sub, 2 del, 3 ins
  int s0, s1, h0, h1;
};

std::vector<OOp> oracle_align(const std::vector<std::string>& src, const std::vector<std::string>& hyp) {
  int n = (int)src.size(), m = (int)hyp.size();
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1, 0));
  for (int i = 0; i <= n; ++i) d[i][0] = i;
  for (int j = 0; j <= m; ++j) d[0][j] = j;
  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= m; ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + (src[i - 1] == hyp[j - 1] ? 0 : 1), d[i - 1][j] + 1,
                          d[i][j - 1] + 1});
  std::vector<OOp> ops;
  int i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && src[i - 1] == hyp[j - 1] && d[i][j] == d[i - 1][j - 1])
      ops.push_back({0, i - 1, i, j - 1, j}), --i, --j;
    else if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1)
      ops.push_back({1, i - 1, i, j - 1, j}), --i, --j;
    else if (i > 0 && d[i][j] == d[i - 1][j] + 1)
      ops.push_back({2, i - 1, i, j, j}), --i;
    else
      ops.push_back({3, i, i, j - 1, j}), --j;
  }
  std::reverse(ops.begin(), ops.end());
  return ops;
}

EditSpan oracle_segment(const std::vector<OOp>& ops, const std::vector<std::string>& hyp, int a, int b) {
  EditSpan e;
  e.start = ops[a].s0;
  e.end = ops[b].s1;
  for (int j = ops[a].h0; j < ops[b].h1; ++j) e.replacement.push_back(hyp[j]);
  return e;
}

void oracle_enumerate(const std::vector<OOp>& ops, const std::vector<std::string>& hyp, int i,
                      std::vector<EditSpan>& cur, const std::vector<EditSpan>& gold, long& best_tp,
                      long& best_edits) {
  int L = (int)ops.size();
  if (i == L) {
    std::vector<bool> used(gold.size(), false);
    long tp = 0;
    for (const EditSpan& e : cur)
      for (size_t g = 0; g < gold.size(); ++g)
        if (!used[g] && gold[g] == e) {
          used[g] = true;
          ++tp;
          break;
        }
    long edits = (long)cur.size();
    if (tp > best_tp || (tp == best_tp && edits < best_edits)) {
      best_tp = tp;
      best_edits = edits;
    }
    return;
  }
  if (ops[i].kind == 0) oracle_enumerate(ops, hyp, i + 1, cur, gold, best_tp, best_edits);
  bool has_change = false;
  for (int j = i; j < L; ++j) {
    if (ops[j].kind != 0) has_change = true;
    if (!has_change) continue;
    cur.push_back(oracle_segment(ops, hyp, i, j));
    oracle_enumerate(ops, hyp, j + 1, cur, gold, best_tp, best_edits);
    cur.pop_back();
  }
}

ScoreCounts oracle_max_match(const std::vector<std::string>& src, const std::vector<std::string>& hyp,
                             const std::vector<EditSpan>& gold) {
  std::vector<OOp> ops = oracle_align(src, hyp);
  long best_tp = 0, best_edits = 0;
  // the empty segmentation is only reachable when every op is a match
  bool all_match = true;
  for (const OOp& o : ops) all_match = all_match && o.kind == 0;
  if (!all_match) {
    best_tp = -1;
    best_edits = 1 << 20;
  }
  std::vector<EditSpan> cur;
  oracle_enumerate(ops, hyp, 0, cur, gold, best_tp, best_edits);
  ScoreCounts c;
  c.tp = std::max(best_tp, 0L);
  c.fp = best_edits - c.tp;
  c.fn = (long)gold.size() - c.tp;
  return c;
}

std::vector<std::string> toks(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

TEST_CASE("extract edits single substitution") {
  auto edits = extract_edits(toks("He notice the picture ."), toks("He notices the picture ."));
  REQUIRE(edits.size() == 1);
  CHECK(edits[0] == EditSpan{1, 2, {"notices"}});
}

TEST_CASE("extract edits merges adjacent operations") {
  auto edits = extract_edits(toks("a b c"), toks("a x y c"));
  REQUIRE(edits.size() == 1);
  CHECK(edits[0] == EditSpan{1, 2, {"x", "y"}});
}

TEST_CASE("extract edits identity") {
  CHECK(extract_edits(toks("a b c"), toks("a b c")).empty());
  CHECK(extract_edits({}, {}).empty());
}

TEST_CASE("extract then apply round trips") {
  Rng rng(314159);
  std::vector<std::string> alphabet = {"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::string> src, dst;
    int n = rng.uniform_int(9);
    for (int i = 0; i < n; ++i) src.push_back(alphabet[rng.uniform_int(5)]);
    // random mutation of src
    for (size_t i = 0; i < src.size(); ++i) {
      double r = rng.uniform();
      if (r < 0.15) continue;  // delete
      if (r < 0.3) dst.push_back(alphabet[rng.uniform_int(5)]);  // substitute
      else dst.push_back(src[i]);
      if (rng.uniform() < 0.1) dst.push_back(alphabet[rng.uniform_int(5)]);  // insert after
    }
    auto edits = extract_edits(src, dst);
    CHECK(apply_edits(src, edits) == dst);
  }
}

TEST_CASE("validate rejects malformed edits") {
  CHECK_THROWS_AS(validate_edits({{2, 1, {}}}, 5), std::invalid_argument);
  CHECK_THROWS_AS(validate_edits({{0, 2, {}}, {1, 3, {}}}, 5), std::invalid_argument);
  CHECK_THROWS_AS(validate_edits({{3, 2, {}}}, 5), std::invalid_argument);
  CHECK_THROWS_AS(validate_edits({{0, 7, {}}}, 5), std::invalid_argument);
  CHECK_THROWS_AS(validate_edits({{2, 2, {"x"}}, {2, 2, {"y"}}}, 5), std::invalid_argument);
  validate_edits({{0, 1, {"x"}}, {1, 1, {"y"}}, {2, 3, {}}}, 5);  // well formed
}

TEST_CASE("max match credits merged segmentations") {
  // naive extraction gives two edits and zero credit; the merged segmentation
  // recovers the single wide gold edit
  std::vector<std::string> src = toks("a b c");
  std::vector<std::string> hyp = toks("x b y");
  std::vector<EditSpan> gold = {{0, 3, {"x", "b", "y"}}};
  auto naive = extract_edits(src, hyp);
  CHECK(naive.size() == 2);
  long naive_tp = 0;
  for (const auto& e : naive)
    if (std::find(gold.begin(), gold.end(), e) != gold.end()) ++naive_tp;
  CHECK(naive_tp == 0);
  ScoreCounts c = max_match(src, hyp, gold);
  CHECK(c.tp == 1);
  CHECK(c.fp == 0);
  CHECK(c.fn == 0);
}

TEST_CASE("max match on perfect and untouched hypotheses") {
  std::vector<std::string> src = toks("the cat sat");
  std::vector<EditSpan> gold = {{0, 1, {"a"}}, {2, 3, {"stood"}}};
  auto fixed = apply_edits(src, gold);
  ScoreCounts perfect = max_match(src, fixed, gold);
  CHECK(perfect.tp == 2);
  CHECK(perfect.fp == 0);
  CHECK(perfect.fn == 0);
  ScoreCounts idle = max_match(src, src, gold);
  CHECK(idle.tp == 0);
  CHECK(idle.fp == 0);
  CHECK(idle.fn == 2);
}

TEST_CASE("max match never scores below naive extraction") {
  Rng rng(2718);
  std::vector<std::string> alphabet = {"a", "b", "c"};
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> src, ref, hyp;
    int n = 1 + rng.uniform_int(6);
    for (int i = 0; i < n; ++i) src.push_back(alphabet[rng.uniform_int(3)]);
    for (size_t i = 0; i < src.size(); ++i) {
      if (rng.uniform() < 0.3) ref.push_back(alphabet[rng.uniform_int(3)]);
      else ref.push_back(src[i]);
      if (rng.uniform() < 0.3) hyp.push_back(alphabet[rng.uniform_int(3)]);
      else hyp.push_back(src[i]);
    }
    auto gold = extract_edits(src, ref);
    auto sys = extract_edits(src, hyp);
    std::vector<bool> used(gold.size(), false);
    long naive_tp = 0;
    for (const auto& e : sys)
      for (size_t g = 0; g < gold.size(); ++g)
        if (!used[g] && gold[g] == e) {
          used[g] = true;
          ++naive_tp;
          break;
        }
    ScoreCounts c = max_match(src, hyp, gold);
    CHECK(c.tp >= naive_tp);
  }
}

TEST_CASE("max match equals the exhaustive segmentation oracle") {
  Rng rng(97);
  std::vector<std::string> alphabet = {"a", "b", "c", "d"};
  int compared = 0;
  for (int trial = 0; trial < 400; ++trial) {
    int n = rng.uniform_int(7);  // sentences of length <= 6
    std::vector<std::string> src, ref, hyp;
    for (int i = 0; i < n; ++i) src.push_back(alphabet[rng.uniform_int(4)]);
    for (size_t i = 0; i < src.size(); ++i) {
      double r = rng.uniform();
      if (r < 0.2) continue;
      if (r < 0.4) ref.push_back(alphabet[rng.uniform_int(4)]);
      else ref.push_back(src[i]);
      if (rng.uniform() < 0.15) ref.push_back(alphabet[rng.uniform_int(4)]);
    }
    for (size_t i = 0; i < src.size(); ++i) {
      double r = rng.uniform();
      if (r < 0.2) continue;
      if (r < 0.4) hyp.push_back(alphabet[rng.uniform_int(4)]);
      else hyp.push_back(src[i]);
      if (rng.uniform() < 0.15) hyp.push_back(alphabet[rng.uniform_int(4)]);
    }
    auto gold = extract_edits(src, ref);
    ScoreCounts fast = max_match(src, hyp, gold);
    ScoreCounts slow = oracle_max_match(src, hyp, gold);
    CHECK(fast.tp == slow.tp);
    CHECK(fast.fp == slow.fp);
    CHECK(fast.fn == slow.fn);
    ++compared;
  }
  CHECK(compared == 400);
}

TEST_CASE("f beta conventions") {
  CHECK(f_beta({2, 1, 2}, 0.5).precision == doctest::Approx(2.0 / 3.0));
  CHECK(f_beta({2, 1, 2}, 0.5).recall == doctest::Approx(0.5));
  CHECK(f_beta({2, 1, 2}, 0.5).f == doctest::Approx(0.625).epsilon(1e-12));

  Prf empty_sys = f_beta({0, 0, 3});
  CHECK(empty_sys.precision == 1.0);
  CHECK(empty_sys.recall == 0.0);
  CHECK(empty_sys.f == 0.0);

  Prf empty_gold = f_beta({0, 3, 0});
  CHECK(empty_gold.precision == 0.0);
  CHECK(empty_gold.recall == 1.0);
  CHECK(empty_gold.f == 0.0);

  Prf nothing = f_beta({0, 0, 0});
  CHECK(nothing.precision == 1.0);
  CHECK(nothing.recall == 1.0);
  CHECK(nothing.f == 1.0);
}

TEST_CASE("micro averaged corpus score") {
  // sentence one: one hit, one miss; sentence two: one hit, one spurious edit
  std::vector<std::vector<std::string>> srcs = {toks("a b"), toks("c d")};
  std::vector<std::vector<EditSpan>> golds = {{{0, 1, {"x"}}, {1, 2, {"y"}}}, {{0, 1, {"u"}}}};
  std::vector<std::vector<std::string>> hyps = {toks("x b"), toks("u e")};
  ScoreReport r = score_corpus(srcs, hyps, golds);
  CHECK(r.counts.tp == 2);
  CHECK(r.counts.fp == 1);
  CHECK(r.counts.fn == 1);
  CHECK(r.prf.precision == doctest::Approx(2.0 / 3.0));
  CHECK(r.prf.recall == doctest::Approx(2.0 / 3.0));
  CHECK(r.prf.f == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // duplicating every sentence doubles counts but leaves P/R/F unchanged
  std::vector<std::vector<std::string>> srcs2 = {srcs[0], srcs[1], srcs[0], srcs[1]};
  std::vector<std::vector<EditSpan>> golds2 = {golds[0], golds[1], golds[0], golds[1]};
  std::vector<std::vector<std::string>> hyps2 = {hyps[0], hyps[1], hyps[0], hyps[1]};
  ScoreReport r2 = score_corpus(srcs2, hyps2, golds2);
  CHECK(r2.counts.tp == 2 * r.counts.tp);
  CHECK(r2.prf.f == doctest::Approx(r.prf.f).epsilon(1e-15));

  CHECK_THROWS_AS(score_corpus(srcs, hyps, {golds[0]}), std::invalid_argument);
}
