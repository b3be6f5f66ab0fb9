#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mgec/meta.hpp"

using namespace mgec;

namespace {

SentencePair tagged(const std::string& tag) {
  SentencePair p;
  p.source_tokens = {tag};
  p.target_tokens = {tag};
  return p;
}

ModelParams scalar_params(double theta) {
  ModelParams p;
  p.emplace("theta", Tensor::vec({theta}));
  return p;
}

// one-parameter bowls: support pulls toward 1, anything else toward 2
struct QuadObjective : Objective {
  LossResult eval(const ModelParams& p, const std::vector<SentencePair>& batch) const override {
    double theta = p.at("theta").data[0];
    double target = batch[0].source_tokens[0] == "support" ? 1.0 : 2.0;
    LossResult r;
    r.loss = 0.5 * (theta - target) * (theta - target);
    r.grads.emplace("theta", Tensor::vec({theta - target}));
    return r;
  }
};

// three weighted bowls with different support and query centers
struct BowlObjective : Objective {
  LossResult eval(const ModelParams& p, const std::vector<SentencePair>& batch) const override {
    static const double center_s[3] = {1.0, -2.0, 0.5};
    static const double center_q[3] = {3.0, 0.25, -1.0};
    static const double weight[3] = {1.0, 0.5, 2.0};
    const Tensor& th = p.at("theta");
    bool support = batch[0].source_tokens[0] == "support";
    LossResult r;
    Tensor g = Tensor::zeros({3});
    for (int i = 0; i < 3; ++i) {
      double d = th.data[(size_t)i] - (support ? center_s[i] : center_q[i]);
      r.loss += 0.5 * weight[i] * d * d;
      g.data[(size_t)i] = weight[i] * d;
    }
    r.grads.emplace("theta", std::move(g));
    return r;
  }
};

// "bad" batches blow up; everything else pulls toward 1
struct FragileObjective : Objective {
  LossResult eval(const ModelParams& p, const std::vector<SentencePair>& batch) const override {
    LossResult r;
    double theta = p.at("theta").data[0];
    if (batch[0].source_tokens[0] == "bad") {
      r.loss = std::numeric_limits<double>::infinity();
      r.grads.emplace("theta", Tensor::vec({0.0}));
      return r;
    }
    r.loss = 0.5 * (theta - 1.0) * (theta - 1.0);
    r.grads.emplace("theta", Tensor::vec({theta - 1.0}));
    return r;
  }
};

struct RealSetup {
  ModelConfig cfg;
  MergeTable table;
  DomainDataset data;
  ModelParams params;
};

const RealSetup& real_setup() {
  static const RealSetup setup = [] {
    RealSetup rs;
    rs.data = synth_domain(profile_by_name("en"), 40, 77);
    std::vector<std::vector<std::string>> words;
    for (const SentencePair& p : rs.data.pairs) {
      words.push_back(p.source_tokens);
      words.push_back(p.target_tokens);
    }
    rs.table = learn_bpe(words, 60);
    rs.cfg.vocab_size = (int)rs.table.vocab_size();
    rs.cfg.width = 16;
    rs.cfg.heads = 2;
    rs.cfg.enc_layers = 1;
    rs.cfg.dec_layers = 1;
    rs.cfg.ff_width = 32;
    rs.cfg.max_len = 64;
    Rng rng(5);
    rs.params = init_params(rs.cfg, rng);
    return rs;
  }();
  return setup;
}

}  // namespace

TEST_CASE("inner adaptation modes") {
  QuadObjective q;
  ModelParams theta = scalar_params(0.0);
  MetaHyperparams hp;
  hp.alpha = 0.1;

  double sloss = 0.0;
  ModelParams once = inner_adapt(q, theta, {tagged("support")}, hp, &sloss);
  CHECK(theta.at("theta").data[0] == 0.0);  // input untouched
  CHECK(once.at("theta").data[0] == 0.1);
  CHECK(sloss == 0.5);

  MetaHyperparams hp0 = hp;
  hp0.alpha = 0.0;
  CHECK(params_equal(inner_adapt(q, theta, {tagged("support")}, hp0), theta));

  MetaHyperparams hp2 = hp;
  hp2.alpha = 0.2;
  double d1 = once.at("theta").data[0];
  double d2 = inner_adapt(q, theta, {tagged("support")}, hp2).at("theta").data[0];
  CHECK(d2 == 2.0 * d1);

  MetaHyperparams hp3 = hp;
  hp3.inner_steps = 3;
  double manual = 0.0;
  for (int i = 0; i < 3; ++i) manual -= 0.1 * (manual - 1.0);
  CHECK(inner_adapt(q, theta, {tagged("support")}, hp3).at("theta").data[0] == manual);

  MetaHyperparams hpa = hp;
  hpa.adam_inner = true;
  ModelParams via = inner_adapt(q, theta, {tagged("support")}, hpa);
  ModelParams man = theta;
  AdamState st;
  adam_step(man, q.eval(theta, {tagged("support")}).grads, st, hpa.alpha);
  CHECK(params_equal(via, man));

  MetaHyperparams bad = hp;
  bad.alpha = -0.5;
  CHECK_THROWS_AS(inner_adapt(q, theta, {tagged("support")}, bad), std::invalid_argument);
}

TEST_CASE("the scalar meta update works out by hand") {
  QuadObjective q;
  MetaHyperparams hp;
  hp.alpha = 0.1;
  hp.beta = 0.1;
  hp.plain_sgd_outer = true;
  EpisodeBatch ep{{tagged("support")}, {tagged("query")}, "scalar"};
  AdamState st;
  MetaStepStats stats;
  ModelParams out = meta_step(q, scalar_params(0.0), {ep}, hp, st, &stats);
  CHECK(out.at("theta").data[0] == 0.19);
  CHECK(stats.support_loss == 0.5);
  CHECK(stats.query_loss == doctest::Approx(1.805).epsilon(1e-12));
  CHECK(stats.episodes_used == 1);
  CHECK(stats.episodes_skipped == 0);
}

TEST_CASE("first-order meta-gradient equals the adapted query gradient") {
  BowlObjective obj;
  ModelParams theta;
  theta.emplace("theta", Tensor::vec({0.3, -1.1, 0.8}));
  MetaHyperparams hp;
  hp.alpha = 0.05;
  hp.beta = 1.0;
  hp.plain_sgd_outer = true;
  EpisodeBatch ep{{tagged("support")}, {tagged("query")}, "bowl"};

  AdamState st;
  ModelParams out = meta_step(obj, theta, {ep}, hp, st);
  ModelParams adapted = inner_adapt(obj, theta, ep.support, hp);
  GradMap manual = obj.eval(adapted, ep.query).grads;
  for (size_t i = 0; i < 3; ++i) {
    double applied = theta.at("theta").data[i] - out.at("theta").data[i];
    CHECK(std::abs(applied - manual.at("theta").data[i]) <= 1e-12);
  }

  // the Adam outer path applies exactly the same meta-gradient
  MetaHyperparams hpa = hp;
  hpa.plain_sgd_outer = false;
  hpa.beta = 0.01;
  AdamState s1, s2;
  ModelParams via_meta = meta_step(obj, theta, {ep}, hpa, s1);
  ModelParams via_manual = theta;
  adam_step(via_manual, manual, s2, hpa.beta);
  CHECK(params_equal(via_meta, via_manual));

  // two identical episodes double the summed meta-gradient
  AdamState s3;
  ModelParams twice = meta_step(obj, theta, {ep, ep}, hp, s3);
  for (size_t i = 0; i < 3; ++i) {
    double one = theta.at("theta").data[i] - out.at("theta").data[i];
    double two = theta.at("theta").data[i] - twice.at("theta").data[i];
    CHECK(two == 2.0 * one);
  }
}

TEST_CASE("alpha zero collapses to pooled multi-task training") {
  QuadObjective q;
  ModelParams theta = scalar_params(0.7);
  MetaHyperparams hp;
  hp.alpha = 0.0;
  hp.beta = 0.003;
  std::vector<EpisodeBatch> eps = {
      {{tagged("support")}, {tagged("query")}, "a"},
      {{tagged("query")}, {tagged("support")}, "b"},
      {{tagged("support")}, {tagged("support")}, "c"},
  };
  AdamState s1;
  ModelParams via_meta = meta_step(q, theta, eps, hp, s1);
  GradMap pooled;
  for (const EpisodeBatch& ep : eps) {
    GradMap g = q.eval(theta, ep.query).grads;
    pooled = pooled.empty() ? g : params_add_scaled(pooled, g, 1.0);
  }
  AdamState s2;
  ModelParams manual = theta;
  adam_step(manual, pooled, s2, hp.beta);
  CHECK(params_equal(via_meta, manual));
  CHECK(s1.step == 1);

  // the same collapse holds bit for bit on the seq2seq model
  const RealSetup& rs = real_setup();
  Codec codec(rs.table);
  Seq2SeqObjective obj(rs.cfg, codec);
  Rng erng(123);
  std::vector<EpisodeBatch> reps = {sample_episode(rs.data, 4, 4, erng),
                                    sample_episode(rs.data, 4, 4, erng)};
  AdamState rs1, rs2;
  ModelParams rvia = meta_step(obj, rs.params, reps, hp, rs1);
  GradMap rpooled;
  for (const EpisodeBatch& ep : reps) {
    GradMap g = obj.eval(rs.params, ep.query).grads;
    rpooled = rpooled.empty() ? g : params_add_scaled(rpooled, g, 1.0);
  }
  ModelParams rman = rs.params;
  adam_step(rman, rpooled, rs2, hp.beta);
  CHECK(params_equal(rvia, rman));
}

TEST_CASE("episode sampling is uniform and reproducible") {
  DomainDataset task;
  task.domain = "mc";
  for (int i = 0; i < 10; ++i) {
    SentencePair p;
    p.source_tokens = {"w" + std::to_string(i)};
    p.target_tokens = p.source_tokens;
    task.pairs.push_back(p);
  }
  Rng rng(55);
  std::vector<int> hits(10, 0);
  for (int trial = 0; trial < 1000; ++trial) {
    EpisodeBatch ep = sample_episode(task, 1, 1, rng);
    for (int i = 0; i < 10; ++i)
      if (ep.support[0].source_tokens[0] == "w" + std::to_string(i)) hits[(size_t)i] += 1;
  }
  for (int i = 0; i < 10; ++i) {
    INFO("pair ", i, " hit ", hits[(size_t)i], " times");
    CHECK(std::abs(hits[(size_t)i] / 1000.0 - 0.1) <= 0.03);
  }

  std::uint64_t saved = rng.state();
  EpisodeBatch a = sample_episode(task, 3, 4, rng);
  rng.set_state(saved);
  EpisodeBatch b = sample_episode(task, 3, 4, rng);
  REQUIRE(a.support.size() == 3);
  REQUIRE(a.query.size() == 4);
  for (size_t i = 0; i < a.support.size(); ++i)
    CHECK(a.support[i].source_tokens == b.support[i].source_tokens);
  for (size_t i = 0; i < a.query.size(); ++i)
    CHECK(a.query[i].source_tokens == b.query[i].source_tokens);

  EpisodeBatch full = sample_episode(task, 10, 10, rng);
  auto keys = [](const std::vector<SentencePair>& v) {
    std::set<std::string> s;
    for (const SentencePair& p : v) s.insert(p.source_tokens[0]);
    return s;
  };
  CHECK(keys(full.support).size() == 10);
  CHECK(keys(full.query).size() == 10);

  try {
    sample_episode(task, 11, 1, rng);
    CHECK(false);
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("mc") != std::string::npos);
  }
}

TEST_CASE("non-finite episodes are skipped with a warning") {
  FragileObjective f;
  MetaHyperparams hp;
  hp.alpha = 0.0;
  hp.beta = 0.1;
  hp.plain_sgd_outer = true;
  std::vector<EpisodeBatch> eps = {{{tagged("bad")}, {tagged("bad")}, "broken"},
                                   {{tagged("ok")}, {tagged("ok")}, "fine"}};
  AdamState st;
  std::ostringstream log;
  MetaStepStats stats;
  ModelParams out = meta_step(f, scalar_params(0.0), eps, hp, st, &stats, &log);
  CHECK(stats.episodes_skipped == 1);
  CHECK(stats.episodes_used == 1);
  CHECK(log.str().find("broken") != std::string::npos);
  CHECK(out.at("theta").data[0] == 0.1);  // only the healthy episode contributes

  std::vector<EpisodeBatch> all_bad = {{{tagged("bad")}, {tagged("bad")}, "broken"}};
  CHECK_THROWS_AS(meta_step(f, scalar_params(0.0), all_bad, hp, st, nullptr, &log), NumericError);
}

TEST_CASE("meta-training covers sources and reproduces bit for bit") {
  QuadObjective q;
  auto mixed_task = [](const std::string& name, int n, int offset) {
    DomainDataset d;
    d.domain = name;
    for (int i = 0; i < n; ++i) d.pairs.push_back(tagged((i + offset) % 2 ? "support" : "query"));
    return d;
  };
  std::vector<DomainDataset> tasks = {mixed_task("t1", 6, 0), mixed_task("t2", 6, 1)};
  MetaHyperparams hp;
  hp.alpha = 0.05;
  hp.beta = 0.01;
  hp.tasks_per_meta_batch = 2;
  hp.support_size = 2;
  hp.query_size = 2;
  hp.meta_steps = 3;
  ModelParams init = scalar_params(0.0);

  std::ostringstream log;
  Rng r1(31);
  ModelParams out1 = meta_train(q, tasks, init, hp, r1, {}, &log);
  size_t step_lines = 0;
  std::istringstream in(log.str());
  std::string line;
  while (std::getline(in, line)) {
    if (line.find(" tasks ") == std::string::npos) continue;
    step_lines += 1;
    // saturated task batches name every source each step
    CHECK(line.find("t1") != std::string::npos);
    CHECK(line.find("t2") != std::string::npos);
    CHECK(line.find("support_loss") != std::string::npos);
    CHECK(line.find("query_loss") != std::string::npos);
  }
  CHECK(step_lines == 3);

  Rng r2(31);
  CHECK(params_equal(out1, meta_train(q, tasks, init, hp, r2)));
  Rng r3(32);
  CHECK_FALSE(params_equal(out1, meta_train(q, tasks, init, hp, r3)));
  CHECK(init.at("theta").data[0] == 0.0);

  MetaHyperparams hp0 = hp;
  hp0.meta_steps = 0;
  Rng r4(31);
  CHECK(params_equal(meta_train(q, tasks, init, hp0, r4), init));
}

TEST_CASE("the best validation score wins meta-training") {
  QuadObjective q;
  DomainDataset task;
  task.domain = "drift";
  for (int i = 0; i < 4; ++i) task.pairs.push_back(tagged("query"));
  MetaHyperparams hp;
  hp.alpha = 0.0;
  hp.beta = 0.2;
  hp.plain_sgd_outer = true;
  hp.tasks_per_meta_batch = 1;
  hp.support_size = 1;
  hp.query_size = 1;
  hp.meta_steps = 5;
  hp.eval_every = 1;

  std::vector<double> scores;
  std::vector<ModelParams> snaps;
  EvalFn eval = [&](const ModelParams& p) {
    double th = p.at("theta").data[0];
    double score = 1.0 - (th - 0.5) * (th - 0.5);
    scores.push_back(score);
    snaps.push_back(p);
    return score;
  };
  Rng rng(8);
  ModelParams out = meta_train(q, {task}, scalar_params(0.0), hp, rng, eval);
  REQUIRE(scores.size() == 6);  // step 0 plus every step
  size_t best = 0;
  for (size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  CHECK(best > 0);
  CHECK(params_equal(out, snaps[best]));
}

TEST_CASE("fine-tuning trains on the target task") {
  const RealSetup& rs = real_setup();
  Codec codec(rs.table);
  Seq2SeqObjective obj(rs.cfg, codec);
  DomainDataset target;
  target.domain = "target";
  target.pairs.assign(rs.data.pairs.begin(), rs.data.pairs.begin() + 20);
  MetaHyperparams hp;
  hp.finetune_lr = 1e-3;
  hp.finetune_epochs = 30;
  hp.finetune_batch_size = 8;

  double before = obj.eval(rs.params, target.pairs).loss;
  Rng r1(99);
  ModelParams tuned = fine_tune(obj, rs.params, target, hp, r1);
  double after = obj.eval(tuned, target.pairs).loss;
  INFO("loss ", before, " -> ", after);
  CHECK(after < before);

  Rng r2(99);
  CHECK(params_equal(tuned, fine_tune(obj, rs.params, target, hp, r2)));

  MetaHyperparams hp0 = hp;
  hp0.finetune_epochs = 0;
  Rng r3(99);
  CHECK(params_equal(fine_tune(obj, rs.params, target, hp0, r3), rs.params));

  DomainDataset empty;
  empty.domain = "none";
  CHECK_THROWS_AS(fine_tune(obj, rs.params, empty, hp, r3), std::invalid_argument);
}

TEST_CASE("hyperparameters and inputs are validated") {
  MetaHyperparams hp;
  CHECK_NOTHROW(hp.validate(5));
  MetaHyperparams bad = hp;
  bad.alpha = -1.0;
  CHECK_THROWS_AS(bad.validate(5), std::invalid_argument);
  bad = hp;
  bad.beta = 0.0;
  CHECK_THROWS_AS(bad.validate(5), std::invalid_argument);
  bad = hp;
  bad.tasks_per_meta_batch = 6;
  CHECK_THROWS_AS(bad.validate(5), std::invalid_argument);
  bad = hp;
  bad.eval_every = 0;
  CHECK_THROWS_AS(bad.validate(5), std::invalid_argument);
  bad = hp;
  bad.inner_steps = 0;
  CHECK_THROWS_AS(bad.validate(5), std::invalid_argument);
  bad = hp;
  bad.finetune_batch_size = 0;
  CHECK_THROWS_AS(bad.validate(5), std::invalid_argument);

  QuadObjective q;
  AdamState st;
  CHECK_THROWS_AS(meta_step(q, scalar_params(0.0), {}, hp, st), std::invalid_argument);
  Rng rng(1);
  CHECK_THROWS_AS(meta_train(q, {}, scalar_params(0.0), hp, rng), std::invalid_argument);
}
