#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "testing.hpp"

namespace ambert {
namespace {

using testing::random_pair;

// ---- masking ---------------------------------------------------------------

TEST(MaskBudget, RoundsHalfUpWithFloorOfOne) {
  EXPECT_EQ(mask_budget(0, 0.15), 0u);
  EXPECT_EQ(mask_budget(5, 0.0), 0u);
  EXPECT_EQ(mask_budget(1, 0.15), 1u);
  EXPECT_EQ(mask_budget(3, 0.15), 1u);   // 0.45 rounds to 0, floor lifts it
  EXPECT_EQ(mask_budget(10, 0.15), 2u);  // 1.5 rounds up
  EXPECT_EQ(mask_budget(20, 0.15), 3u);
  EXPECT_EQ(mask_budget(100, 0.15), 15u);
  EXPECT_EQ(mask_budget(7, 1.0), 7u);
  for (std::size_t n = 1; n < 500; ++n) {
    const auto expect = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(0.15 * n + 0.5)));
    ASSERT_EQ(mask_budget(n, 0.15), expect) << n;
  }
}

struct ActionTally {
  std::size_t mask = 0, random = 0, keep = 0;
  std::size_t total() const { return mask + random + keep; }
};

// Checks every structural invariant of one plan and tallies its actions.
void check_plan(const TokenSeqPair& p, const MaskPlan& plan, int vf, int vc, double rate, ActionTally& tally) {
  const std::size_t n = p.fine_ids.size(), m = p.coarse_ids.size();
  ASSERT_EQ(plan.fine_action.size(), n);
  ASSERT_EQ(plan.coarse_action.size(), m);
  ASSERT_EQ(plan.masked_fine_ids.size(), n);
  ASSERT_EQ(plan.masked_coarse_ids.size(), m);

  const auto cand = maskable_coarse(p);
  ASSERT_EQ(plan.num_coarse_masked(), mask_budget(cand.size(), rate));

  std::size_t projected = 0;
  for (std::size_t j = 0; j < m; ++j) {
    const MaskAction a = plan.coarse_action[j];
    if (is_special_id(p.coarse_ids[j])) {
      ASSERT_EQ(a, MaskAction::kNone) << "coarse special " << j;
    }
    if (j == 0 || j + 1 == m) continue;
    // Projection: every fine token under coarse j shares its action.
    const Span s = p.alignment[j - 1];
    for (int i = s.start; i < s.end; ++i) ASSERT_EQ(plan.fine_action[static_cast<std::size_t>(i)], a);
    if (a != MaskAction::kNone) projected += static_cast<std::size_t>(s.end - s.start);
  }
  ASSERT_EQ(plan.num_fine_masked(), projected);

  auto check_stream = [&](const std::vector<int>& ids, const std::vector<MaskAction>& act,
                          const std::vector<int>& targets, const std::vector<int>& masked, int v) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (is_special_id(ids[i])) {
        ASSERT_EQ(act[i], MaskAction::kNone);
      }
      switch (act[i]) {
        case MaskAction::kNone:
          ASSERT_EQ(targets[i], -1);
          ASSERT_EQ(masked[i], ids[i]);
          break;
        case MaskAction::kMask:
          ASSERT_EQ(targets[i], ids[i]);
          ASSERT_EQ(masked[i], kMaskId);
          break;
        case MaskAction::kRandom:
          ASSERT_EQ(targets[i], ids[i]);
          ASSERT_GE(masked[i], kNumSpecial);
          ASSERT_LT(masked[i], v);
          break;
        case MaskAction::kKeep:
          ASSERT_EQ(targets[i], ids[i]);
          ASSERT_EQ(masked[i], ids[i]);
          break;
      }
    }
  };
  check_stream(p.fine_ids, plan.fine_action, plan.fine_targets, plan.masked_fine_ids, vf);
  check_stream(p.coarse_ids, plan.coarse_action, plan.coarse_targets, plan.masked_coarse_ids, vc);

  for (MaskAction a : plan.coarse_action) {
    tally.mask += a == MaskAction::kMask;
    tally.random += a == MaskAction::kRandom;
    tally.keep += a == MaskAction::kKeep;
  }
}

// |observed - n p| <= 2.576 sqrt(n p (1-p)) + 1 (two-sided 99%, plus one
// for discreteness).
void expect_binomial(std::size_t observed, std::size_t n, double p, const char* what) {
  const double mean = static_cast<double>(n) * p;
  const double bound = 2.576 * std::sqrt(mean * (1.0 - p)) + 1.0;
  EXPECT_LE(std::abs(static_cast<double>(observed) - mean), bound)
      << what << ": " << observed << " of " << n << ", expected " << mean;
}

TEST(MaskPlan, InvariantsHoldOnRandomPairs) {
  const int vf = 50, vc = 40;
  Rng rng(20260101);
  ActionTally tally;
  for (int trial = 0; trial < 1000; ++trial) {
    const TokenSeqPair p = random_pair(rng, vf, vc, 30, true, 3);
    ASSERT_FALSE(check_pair(p).has_value());
    const MaskPlan plan = make_mask_plan(p, vf, vc, 0.15, sub_seed(7, "mask", trial));
    ASSERT_NO_FATAL_FAILURE(check_plan(p, plan, vf, vc, 0.15, tally)) << "trial " << trial;
  }
  ASSERT_GT(tally.total(), 2000u);
  expect_binomial(tally.mask, tally.total(), 0.8, "mask");
  expect_binomial(tally.random, tally.total(), 0.1, "random");
  expect_binomial(tally.keep, tally.total(), 0.1, "keep");
}

TEST(MaskPlan, CoarsePositionsAreSampledUniformly) {
  // One pair with 20 candidates, budget 3: each is chosen with p = 3/20.
  const int vf = 50, vc = 40;
  Rng rng(3);
  TokenSeqPair p;
  do p = random_pair(rng, vf, vc, 20, false, 2);
  while (maskable_coarse(p).size() != 20);
  std::vector<std::size_t> hits(p.coarse_ids.size(), 0);
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    const MaskPlan plan = make_mask_plan(p, vf, vc, 0.15, sub_seed(11, "u", t));
    for (std::size_t j = 0; j < hits.size(); ++j) hits[j] += plan.coarse_masked(j);
  }
  for (std::size_t j : maskable_coarse(p)) expect_binomial(hits[j], trials, 3.0 / 20.0, "position");
}

TEST(MaskPlan, RateExtremesAndDeterminism) {
  const int vf = 30, vc = 25;
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const TokenSeqPair p = random_pair(rng, vf, vc);
    const MaskPlan none = make_mask_plan(p, vf, vc, 0.0, 1);
    EXPECT_EQ(none.num_coarse_masked(), 0u);
    EXPECT_EQ(none.masked_fine_ids, p.fine_ids);
    const MaskPlan all = make_mask_plan(p, vf, vc, 1.0, 1);
    EXPECT_EQ(all.num_coarse_masked(), maskable_coarse(p).size());
    const MaskPlan a = make_mask_plan(p, vf, vc, 0.3, 99);
    const MaskPlan b = make_mask_plan(p, vf, vc, 0.3, 99);
    EXPECT_EQ(a.coarse_action, b.coarse_action);
    EXPECT_EQ(a.masked_fine_ids, b.masked_fine_ids);
    EXPECT_EQ(a.masked_coarse_ids, b.masked_coarse_ids);
    const TokenSeqPair hat = apply_mask(p, a);
    EXPECT_EQ(hat.fine_ids, a.masked_fine_ids);
    EXPECT_EQ(hat.alignment, p.alignment);
  }
  EXPECT_THROW(make_mask_plan(random_pair(rng, vf, vc), vf, vc, 1.5, 0), UsageError);
  EXPECT_THROW(make_mask_plan(random_pair(rng, vf, vc), kNumSpecial, vc, 0.1, 0), UsageError);
}

// ---- MLM loss ----------------------------------------------------------------

TEST(MlmLoss, EmptyPlanContributesNothing) {
  const ModelConfig c = testing::tiny_config(Variant::kAmbert);
  Model<double> m(c, 1);
  Rng rng(2);
  const TokenSeqPair p = random_pair(rng, c.fine_vocab_size, c.coarse_vocab_size);
  const MaskPlan plan = make_mask_plan(p, c.fine_vocab_size, c.coarse_vocab_size, 0.0, 0);
  const auto out = m.forward(p);
  auto g = HiddenGrads<double>::like(out);
  const MlmLoss l = mlm_loss(m, out, plan, &g);
  EXPECT_EQ(l.total, 0.0);
  EXPECT_EQ(l.fine_count + l.coarse_count, 0u);
  for (double x : g.fine.vec()) EXPECT_EQ(x, 0.0);
}

TEST(MlmLoss, UniformLogitsGiveLogVocabularyPerTarget) {
  // Zero token tables and output biases make every logit exactly 0.
  for (Variant v : {Variant::kAmbert, Variant::kCombo, Variant::kHybrid, Variant::kBert}) {
    const ModelConfig c = testing::tiny_config(v, 17, 23);
    Model<double> m(c, 3);
    for (const char* name : {"fine.embeddings.token", "coarse.embeddings.token", "fine.mlm.bias", "coarse.mlm.bias"})
      if (m.params().has(name)) m.params().get(name).value.fill(0.0);
    Rng rng(4);
    const TokenSeqPair p = random_pair(rng, c.fine_vocab_size, c.coarse_vocab_size, 6);
    const MaskPlan plan = make_mask_plan(p, c.fine_vocab_size, c.coarse_vocab_size, 0.5, 8);
    const auto out = m.forward(apply_mask(p, plan));
    const MlmLoss l = mlm_loss(m, out, plan);
    EXPECT_EQ(l.fine_count, plan.num_fine_masked()) << to_string(v);
    EXPECT_NEAR(l.fine_term, static_cast<double>(l.fine_count) * std::log(17.0), 1e-9) << to_string(v);
    if (c.has_coarse()) {
      EXPECT_EQ(l.coarse_count, plan.num_coarse_masked());
      EXPECT_NEAR(l.coarse_term, static_cast<double>(l.coarse_count) * std::log(23.0), 1e-9);
    } else {
      EXPECT_EQ(l.coarse_count, 0u);
    }
    EXPECT_DOUBLE_EQ(l.total, l.fine_term + l.coarse_term);
  }
}

TEST(MlmLoss, RejectsMismatchedPlan) {
  const ModelConfig c = testing::tiny_config(Variant::kAmbert);
  Model<double> m(c, 1);
  Rng rng(2);
  const TokenSeqPair p = random_pair(rng, c.fine_vocab_size, c.coarse_vocab_size);
  TokenSeqPair q;
  do q = random_pair(rng, c.fine_vocab_size, c.coarse_vocab_size);
  while (q.fine_len() == p.fine_len());
  const MaskPlan plan = make_mask_plan(q, c.fine_vocab_size, c.coarse_vocab_size, 0.5, 0);
  EXPECT_THROW(mlm_loss(m, m.forward(p), plan), UsageError);
}

TEST(NspLoss, ZeroHeadGivesLogTwoAndConfidentHeadGivesZero) {
  for (Variant v : {Variant::kAmbert, Variant::kBert}) {
    ModelConfig c = testing::tiny_config(v);
    c.nsp = true;
    Model<double> m(c, 1);
    Rng rng(3);
    const TokenSeqPair p = random_pair(rng, c.fine_vocab_size, c.coarse_vocab_size);
    m.params().get("nsp.w").value.fill(0.0);
    m.params().get("nsp.b").value.fill(0.0);
    const auto out = m.forward(p);
    EXPECT_NEAR(nsp_loss(m, out, 0), std::log(2.0), 1e-12);
    EXPECT_NEAR(nsp_loss(m, out, 1), std::log(2.0), 1e-12);
    m.params().get("nsp.b").value[0] = 50.0;
    EXPECT_LT(nsp_loss(m, out, 1), 1e-20);
    EXPECT_NEAR(nsp_loss(m, out, 0), 50.0, 1e-12);
    EXPECT_THROW(nsp_loss(m, out, 2), UsageError);
  }
  Model<double> plain(testing::tiny_config(Variant::kAmbert), 1);
  Rng rng(4);
  const auto out = plain.forward(random_pair(rng, 13, 11));
  EXPECT_THROW(nsp_loss(plain, out, 1), UsageError);
}

// ---- optimizer ---------------------------------------------------------------

TEST(LearningRate, WarmupThenLinearDecay) {
  AdamHyper h;
  h.lr = 1e-3;
  h.warmup_steps = 10;
  h.max_steps = 110;
  EXPECT_DOUBLE_EQ(learning_rate(h, 0), 0.0);
  EXPECT_DOUBLE_EQ(learning_rate(h, 1), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate(h, 5), 5e-4);
  EXPECT_DOUBLE_EQ(learning_rate(h, 10), 1e-3);
  EXPECT_DOUBLE_EQ(learning_rate(h, 60), 5e-4);
  EXPECT_DOUBLE_EQ(learning_rate(h, 110), 0.0);
  EXPECT_DOUBLE_EQ(learning_rate(h, 200), 0.0);
  double prev = 0.0;
  for (long t = 1; t <= 10; ++t) {
    EXPECT_GT(learning_rate(h, t), prev);
    prev = learning_rate(h, t);
  }
  for (long t = 11; t <= 110; ++t) {
    EXPECT_LT(learning_rate(h, t), prev);
    prev = learning_rate(h, t);
  }
  h.schedule = LrSchedule::kConstant;
  EXPECT_DOUBLE_EQ(learning_rate(h, 500), 1e-3);
  h.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(learning_rate(h, 1), 1e-3);
}

// Reference Adam with decoupled decay, written out per scalar.
struct AdamOracle {
  double m = 0, v = 0;
  double step(double w, double g, long t, double lr, const AdamHyper& h, bool decay) {
    m = h.beta1 * m + (1 - h.beta1) * g;
    v = h.beta2 * v + (1 - h.beta2) * g * g;
    const double mhat = m / (1 - std::pow(h.beta1, t));
    const double vhat = v / (1 - std::pow(h.beta2, t));
    return w - lr * (mhat / (std::sqrt(vhat) + h.eps) + (decay ? h.weight_decay : 0.0) * w);
  }
};

TEST(Adam, MatchesScalarOracleAndExemptsNonDecayParams) {
  AdamHyper h;
  h.lr = 0.01;
  h.weight_decay = 0.1;
  h.warmup_steps = 3;
  h.max_steps = 20;
  ParamStore<double> ps;
  ps.add("w", Shape{2, 3}, true);
  ps.add("ln.gamma", Shape{3}, false);
  Rng rng(9);
  for (std::size_t s = 0; s < ps.storage_count(); ++s) testing::fill_normal(ps.at(s).value, rng);
  std::vector<std::vector<double>> ref;
  std::vector<std::vector<AdamOracle>> oracle;
  for (std::size_t s = 0; s < ps.storage_count(); ++s) {
    ref.push_back(testing::as_vec(ps.at(s).value));
    oracle.emplace_back(ps.at(s).value.size());
  }
  AdamState<double> st;
  for (long t = 1; t <= 6; ++t) {
    for (std::size_t s = 0; s < ps.storage_count(); ++s) testing::fill_normal(ps.at(s).grad, rng);
    for (std::size_t s = 0; s < ps.storage_count(); ++s)
      for (std::size_t i = 0; i < ref[s].size(); ++i)
        ref[s][i] = oracle[s][i].step(ref[s][i], ps.at(s).grad[i], t, learning_rate(h, t), h, ps.at(s).decay);
    EXPECT_DOUBLE_EQ(adam_step(ps, st, h), learning_rate(h, t));
    EXPECT_EQ(st.step, t);
    for (std::size_t s = 0; s < ps.storage_count(); ++s)
      for (std::size_t i = 0; i < ref[s].size(); ++i)
        ASSERT_NEAR(ps.at(s).value[i], ref[s][i], 1e-14) << "step " << t << " storage " << s;
  }
}

TEST(Adam, FirstStepMovesEachWeightByLearningRate) {
  // With zero decay, step 1 gives mhat / sqrt(vhat) = sign(g).
  AdamHyper h;
  h.lr = 0.5;
  h.weight_decay = 0.0;
  h.warmup_steps = 0;
  h.schedule = LrSchedule::kConstant;
  h.eps = 0.0;
  ParamStore<double> ps;
  ps.add("w", Shape{4}, true);
  const double g[] = {3.0, -0.001, 7.5, -2.0};
  for (int i = 0; i < 4; ++i) ps.at(0).grad[i] = g[i];
  AdamState<double> st;
  adam_step(ps, st, h);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(ps.at(0).value[i], g[i] > 0 ? -0.5 : 0.5);
}

TEST(Adam, NonFiniteGradientThrowsBeforeAnyUpdate) {
  AdamHyper h;
  ParamStore<double> ps;
  ps.add("a", Shape{3}, true);
  ps.add("b", Shape{3}, true);
  ps.at(0).value.fill(1.0);
  ps.at(1).value.fill(2.0);
  ps.at(0).grad.fill(0.5);
  ps.at(1).grad[2] = std::nan("");
  AdamState<double> st;
  EXPECT_THROW(adam_step(ps, st, h), NumericError);
  for (double x : ps.at(0).value.vec()) EXPECT_EQ(x, 1.0);
  for (double x : ps.at(1).value.vec()) EXPECT_EQ(x, 2.0);
  EXPECT_EQ(st.step, 0);
  ps.at(1).grad[2] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(adam_step(ps, st, h), NumericError);
}

TEST(Adam, SharedStorageStepsOnce) {
  // An alias is one storage: it receives one update from the summed grad.
  AdamHyper h;
  h.warmup_steps = 0;
  h.weight_decay = 0.0;
  ParamStore<double> shared, single;
  shared.add("x", Shape{2}, true);
  shared.alias("y", "x", "x");
  single.add("x", Shape{2}, true);
  shared.get("x").grad[0] = 1.0;
  shared.get("y").grad[0] += 2.0;
  single.get("x").grad[0] = 3.0;
  AdamState<double> s1, s2;
  adam_step(shared, s1, h);
  adam_step(single, s2, h);
  EXPECT_EQ(shared.storage_count(), 1u);
  EXPECT_EQ(shared.get("y").value[0], single.get("x").value[0]);
}

// ---- driver -----------------------------------------------------------------

struct DeskSetup {
  RunConfig rc = RunConfig::desk();
  std::vector<std::string> docs = testing::bigram_corpus(1, 40);
  Tokenizer tok = testing::corpus_tokenizer(docs, rc);
  ModelConfig mc = rc.model_config(static_cast<int>(tok.fine().size()), static_cast<int>(tok.coarse().size()));
  PretrainHyper hyper() const {
    PretrainHyper h = rc.pretrain_hyper();
    h.batch_size = 2;
    return h;
  }
};

TEST(Pretrainer, ResumeReproducesTheNextStepBitwise) {
  DeskSetup s;
  Pretrainer<float> straight(Model<float>(s.mc, 5), s.tok, s.docs, s.hyper(), 5);
  for (int i = 0; i < 3; ++i) straight.train_step();

  Pretrainer<float> first(Model<float>(s.mc, 5), s.tok, s.docs, s.hyper(), 5);
  for (int i = 0; i < 2; ++i) first.train_step();
  Pretrainer<float> resumed(Model<float>(s.mc, first.model().params()), s.tok, s.docs, s.hyper(), 5);
  resumed.restore(first.optimizer(), first.loss_history());
  const StepReport r = resumed.train_step();

  EXPECT_EQ(r.step, 3);
  EXPECT_EQ(resumed.loss_history(), straight.loss_history());
  EXPECT_EQ(resumed.optimizer(), straight.optimizer());
  const auto& a = resumed.model().params();
  const auto& b = straight.model().params();
  for (std::size_t i = 0; i < a.storage_count(); ++i) ASSERT_EQ(a.at(i).value, b.at(i).value) << i;
}

TEST(Pretrainer, StepReportsAreConsistent) {
  DeskSetup s;
  Pretrainer<float> pt(Model<float>(s.mc, 1), s.tok, s.docs, s.hyper(), 1);
  const StepReport r = pt.train_step();
  EXPECT_EQ(r.step, 1);
  EXPECT_DOUBLE_EQ(r.lr, learning_rate(s.hyper().adam, 1));
  EXPECT_GT(r.mlm.fine_count, 0u);
  EXPECT_GT(r.mlm.coarse_count, 0u);
  EXPECT_DOUBLE_EQ(r.total, r.mlm.fine_term + r.mlm.coarse_term);
  std::ostringstream os;
  write_log_line(os, r);
  EXPECT_EQ(os.str().rfind("step=1 lr=", 0), 0u) << os.str();
  for (const char* key : {" fine_term=", " coarse_term=", " total=", " wall_ms="})
    EXPECT_NE(os.str().find(key), std::string::npos) << key;
}

TEST(Pretrainer, ZeroMaskRateLeavesOnlyWeightDecay) {
  DeskSetup s;
  PretrainHyper h = s.hyper();
  h.mask_rate = 0.0;
  Pretrainer<double> pt(Model<double>(s.mc, 2), s.tok, s.docs, h, 2);
  const ParamStore<double> before = pt.model().params();
  const StepReport r = pt.train_step();
  EXPECT_EQ(r.total, 0.0);
  const double lr = learning_rate(h.adam, 1);
  for (std::size_t i = 0; i < before.storage_count(); ++i) {
    const auto& b = before.at(i);
    const auto& a = pt.model().params().at(i);
    const double shrink = b.decay ? lr * h.adam.weight_decay : 0.0;
    for (std::size_t k = 0; k < b.value.size(); ++k)
      ASSERT_DOUBLE_EQ(a.value[k], b.value[k] - shrink * b.value[k]) << i;
  }
}

TEST(Pretrainer, RejectsEmptyCorpusAndMissingNspHead) {
  DeskSetup s;
  EXPECT_THROW(Pretrainer<float>(Model<float>(s.mc, 1), s.tok, {}, s.hyper(), 1), DataError);
  PretrainHyper h = s.hyper();
  h.nsp = true;
  EXPECT_THROW(Pretrainer<float>(Model<float>(s.mc, 1), s.tok, s.docs, h, 1), UsageError);
}

TEST(Pretrainer, NspExamplesPairConsecutiveDocumentsHalfTheTime) {
  DeskSetup s;
  s.rc.nsp = true;
  const ModelConfig mc = s.rc.model_config(s.mc.fine_vocab_size, s.mc.coarse_vocab_size);
  PretrainHyper h = s.hyper();
  h.nsp = true;
  Pretrainer<float> pt(Model<float>(mc, 1), s.tok, s.docs, h, 1);
  std::size_t positives = 0;
  const int n = 400;
  for (int t = 1; t <= n; ++t) {
    const auto [pair, label] = pt.example(t, 0);
    ASSERT_TRUE(label == 0 || label == 1);
    ASSERT_FALSE(check_pair(pair).has_value());
    positives += static_cast<std::size_t>(label);
  }
  // Documents 0..N-2 have a successor: it is drawn directly half the time,
  // and the random draw lands on it with probability 1/N.
  const double big_n = 40.0;
  const double p = (big_n - 1) / big_n * (0.5 + 0.5 / big_n);
  expect_binomial(positives, n, p, "positives");
  EXPECT_TRUE(std::isfinite(pt.train_step().nsp));
}

// ---- learning ---------------------------------------------------------------

TEST(PretrainLearning, HeldOutMlmLossHalvesOnBigramCorpus) {
  const testing::LearningResult r = testing::bigram_learning_run(2000);
  RecordProperty("before", std::to_string(r.before.total_per_example));
  RecordProperty("after", std::to_string(r.after.total_per_example));
  EXPECT_EQ(r.steps, 2000);
  EXPECT_LT(r.after.total_per_example, 0.5 * r.before.total_per_example);
  EXPECT_GT(r.after.fine_accuracy, 5.0 * r.chance);
}

}  // namespace
}  // namespace ambert
