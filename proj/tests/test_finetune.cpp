#include <gtest/gtest.h>

#include "testing.hpp"

namespace ambert {
namespace {

using testing::inflate;
using testing::tiny_config;

constexpr double kE2eTol = 1e-3;

void inflate_heads(Heads<double>& h, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& g : h.store.groups())
    for (auto& x : h.store.at(g.storage).value.vec()) x = 0.5 * rng.normal();
}

TokenSeqPair small_pair(Rng& rng, const ModelConfig& c) {
  return testing::random_pair(rng, c.fine_vocab_size, c.coarse_vocab_size, 3, true, 2);
}

// ---- gradients ---------------------------------------------------------------

TEST(FinetuneGrad, ClassificationLossMatchesFiniteDifferences) {
  for (Variant v : {Variant::kAmbert, Variant::kCombo, Variant::kHybrid, Variant::kBert}) {
    for (double lambda : {0.0, 1.0, 2.5}) {
      const ModelConfig c = tiny_config(v);
      Model<double> m(c, 61);
      inflate(m, 62, 0.3);
      Heads<double> heads = Heads<double>::create(c, Task::kClassification, 3, 63);
      inflate_heads(heads, 64);
      Rng rng(65);
      TaskExample ex;
      ex.pair = small_pair(rng, c);
      ex.label = 2;
      FineTuneConfig cfg;
      cfg.num_labels = 3;
      cfg.lambda = lambda;
      auto loss = [&] { return task_loss(m, heads, ex, cfg, false, 0, 1.0, false); };
      m.params().zero_grad();
      heads.store.zero_grad();
      task_loss(m, heads, ex, cfg, false, 0, 1.0, true);
      const auto r = testing::check_stores({&m.params(), &heads.store}, loss);
      EXPECT_LT(r.global, kE2eTol) << to_string(v) << " lambda " << lambda;
      EXPECT_LT(r.worst, kE2eTol) << to_string(v) << " lambda " << lambda << " " << r.worst_name;
    }
  }
}

TEST(FinetuneGrad, SpanLossMatchesFiniteDifferences) {
  for (Variant v : {Variant::kAmbert, Variant::kCombo, Variant::kHybrid, Variant::kBert}) {
    const ModelConfig c = tiny_config(v);
    Model<double> m(c, 71);
    inflate(m, 72, 0.3);
    Heads<double> heads = Heads<double>::create(c, Task::kSpan, 2, 73);
    inflate_heads(heads, 74);
    Rng rng(75);
    TaskExample ex;
    ex.pair = small_pair(rng, c);
    const int interior = ex.pair.fine_len() - 2;
    ex.answer = {1 + interior / 3, std::max(1 + interior / 3, interior - 1)};
    FineTuneConfig cfg;
    cfg.task = Task::kSpan;
    auto loss = [&] { return task_loss(m, heads, ex, cfg, false, 0, 1.0, false); };
    m.params().zero_grad();
    heads.store.zero_grad();
    task_loss(m, heads, ex, cfg, false, 0, 1.0, true);
    const auto r = testing::check_stores({&m.params(), &heads.store}, loss);
    EXPECT_LT(r.global, kE2eTol) << to_string(v);
    EXPECT_LT(r.worst, kE2eTol) << to_string(v) << " " << r.worst_name;
    EXPECT_EQ(heads.has("span.joint.w"), v != Variant::kBert);
  }
}

// ---- agreement regularizer -----------------------------------------------------

TEST(FinetuneAgreement, IdenticalStreamsAndHeadsGiveZero) {
  // Shared encoder, equal token tables, one fine token per coarse token with
  // equal ids: r_x0 == r_z0 exactly, so identical heads agree exactly.
  ModelConfig c = tiny_config(Variant::kAmbert, 13, 13);
  Model<double> m(c, 81);
  inflate(m, 82, 0.3);
  m.params().get("coarse.embeddings.token").value = m.params().get("fine.embeddings.token").value;
  Heads<double> heads = Heads<double>::create(c, Task::kClassification, 3, 83);
  inflate_heads(heads, 84);
  heads.p("head.z.w").value = heads.p("head.x.w").value;
  heads.p("head.z.b").value = heads.p("head.x.b").value;
  TokenSeqPair p;
  p.fine_ids = p.coarse_ids = {kClsId, 7, 9, 11, 5, kSepId};
  p.fine_segments = p.coarse_segments = {0, 0, 0, 0, 0, 0};
  for (int i = 1; i <= 4; ++i) p.alignment.push_back({i, i + 1});
  ASSERT_FALSE(check_pair(p));
  const auto out = m.forward(p);
  ASSERT_EQ(out.fine_cls(), out.coarse_cls());
  const ClassificationLoss l = classification_loss(out, heads, 1, 1.0);
  EXPECT_EQ(l.reg, 0.0);
  EXPECT_EQ(l.ce_x, l.ce_z);
}

TEST(FinetuneAgreement, LambdaZeroDecomposes) {
  for (Variant v : {Variant::kAmbert, Variant::kCombo}) {
    const ModelConfig c = tiny_config(v);
    Model<double> m(c, 91);
    inflate(m, 92, 0.3);
    Heads<double> heads = Heads<double>::create(c, Task::kClassification, 4, 93);
    inflate_heads(heads, 94);
    Rng rng(95);
    for (int t = 0; t < 20; ++t) {
      const auto out = m.forward(small_pair(rng, c));
      const int label = t % 4;
      const ClassificationLoss l0 = classification_loss(out, heads, label, 0.0);
      EXPECT_NEAR(l0.total, l0.ce_x + l0.ce_z + l0.ce_joint, 1e-6);
      const ClassificationLoss l1 = classification_loss(out, heads, label, 1.7);
      EXPECT_NEAR(l1.total - l0.total, 1.7 * l0.reg, 1e-6);
      EXPECT_GT(l0.reg, 0.0);
      // Each CE matches a direct evaluation of its head.
      const auto rx = out.fine_cls();
      std::vector<double> z(4);
      for (std::size_t j = 0; j < 4; ++j) {
        z[j] = heads.p("head.x.b").value[j];
        for (std::size_t i = 0; i < rx.size(); ++i) z[j] += rx[i] * heads.p("head.x.w").value(i, j);
      }
      double lse = 0;
      for (double x : z) lse += std::exp(x);
      EXPECT_NEAR(l0.ce_x, std::log(lse) - z[static_cast<std::size_t>(label)], 1e-9);
    }
  }
}

TEST(FinetuneAgreement, OppositeConfidentHeadsGiveSqrtTwo) {
  const ModelConfig c = tiny_config(Variant::kAmbert);
  Model<double> m(c, 1);
  Heads<double> heads = Heads<double>::create(c, Task::kClassification, 2, 2);
  heads.p("head.x.w").value.zero();
  heads.p("head.z.w").value.zero();
  heads.p("head.x.b").value.vec() = {60.0, -60.0};
  heads.p("head.z.b").value.vec() = {-60.0, 60.0};
  Rng rng(3);
  const auto out = m.forward(small_pair(rng, c));
  EXPECT_NEAR(classification_loss(out, heads, 0, 1.0).reg, std::sqrt(2.0), 1e-6);
}

TEST(FinetuneHeads, NonDualVariantsTrainHeadXOnly) {
  for (Variant v : {Variant::kHybrid, Variant::kBert}) {
    const ModelConfig c = tiny_config(v);
    Heads<double> h = Heads<double>::create(c, Task::kClassification, 3, 1);
    EXPECT_TRUE(h.has("head.x.w"));
    EXPECT_FALSE(h.has("head.z.w"));
    EXPECT_FALSE(h.has("head.joint.w"));
    Model<double> m(c, 1);
    Rng rng(2);
    const auto l = classification_loss(m.forward(small_pair(rng, c)), h, 1, 1.0);
    EXPECT_EQ(l.total, l.ce_x);
  }
}

TEST(FinetuneSpan, BestSpanRespectsOrderAndTies) {
  auto logits = [](std::vector<double> s, std::vector<double> e) {
    Tensor<double> z(Shape{s.size(), 2});
    for (std::size_t i = 0; i < s.size(); ++i) {
      z(i, 0) = s[i];
      z(i, 1) = e[i];
    }
    return z;
  };
  // Legal sums: (1,2) = (1,3) = (3,3) = 7 tie; the earlier start, then end, wins.
  const auto z = logits({0, 5, 1, 5}, {1, 0, 2, 2});
  EXPECT_EQ(best_span(z), (SpanAnswer{2, 3}));
  EXPECT_EQ(best_span(z, 1), (SpanAnswer{4, 4}));
  // (3,0) would score 18 but ends before it starts.
  EXPECT_EQ(best_span(logits({0, 0, 0, 9}, {9, 0, 0, 0})), (SpanAnswer{1, 1}));
}

TEST(FinetuneSpan, RejectsAnswerOutsideInterior) {
  const ModelConfig c = tiny_config(Variant::kAmbert);
  Model<double> m(c, 1);
  Heads<double> h = Heads<double>::create(c, Task::kSpan, 2, 1);
  Rng rng(1);
  const TokenSeqPair p = small_pair(rng, c);
  const auto out = m.forward(p);
  EXPECT_THROW(span_loss(out, p, h, SpanAnswer{0, 1}), UsageError);
  EXPECT_THROW(span_loss(out, p, h, SpanAnswer{1, p.fine_len() - 1}), UsageError);
  EXPECT_THROW(span_loss(out, p, h, SpanAnswer{2, 1}), UsageError);
}

// ---- learning --------------------------------------------------------------

TEST(FinetuneLearning, JointHeadReachesNinetyFivePercentWithinPreset) {
  const testing::CueTask task = testing::cue_task(1, 160, 100);
  const RunConfig rc = RunConfig::desk();
  Model<float> m(rc.model_config(static_cast<int>(task.tok.fine().size()), static_cast<int>(task.tok.coarse().size())), 3);
  const FineTuneConfig fc = rc.finetune_config(Task::kClassification, 2);
  Heads<float> heads = Heads<float>::create(m.config(), Task::kClassification, 2, fc.seed);
  const FineTuneReport rep = finetune(m, heads, task.train, fc);
  ASSERT_EQ(rep.epoch_loss.size(), static_cast<std::size_t>(fc.epochs));
  EXPECT_LT(rep.epoch_loss.back(), rep.epoch_loss.front());
  EXPECT_GE(evaluate(m, heads, task.dev, EncoderMode::kBoth, Metric::kAccuracy), 0.95);
}

TEST(FinetuneLearning, DeterministicGivenSeed) {
  const testing::CueTask task = testing::cue_task(2, 24, 4);
  const ModelConfig c = ModelConfig::desk(Variant::kAmbert, static_cast<int>(task.tok.fine().size()),
                                          static_cast<int>(task.tok.coarse().size()));
  FineTuneConfig fc;
  fc.epochs = 1;
  fc.batch_size = 8;
  fc.lr = 1e-3;
  auto run = [&] {
    Model<float> m(c, 5);
    Heads<float> h = Heads<float>::create(c, Task::kClassification, 2, fc.seed);
    finetune(m, h, task.train, fc);
    return m.params().get("fine.encoder.layer1.ffn.w2").value;
  };
  EXPECT_EQ(run(), run());
}

TEST(FinetuneLearning, RejectsBadLabelsAndEmptySets) {
  const testing::CueTask task = testing::cue_task(3, 4, 1);
  const ModelConfig c = ModelConfig::desk(Variant::kAmbert, static_cast<int>(task.tok.fine().size()),
                                          static_cast<int>(task.tok.coarse().size()));
  Model<float> m(c, 5);
  Heads<float> h = Heads<float>::create(c, Task::kClassification, 2, 0);
  FineTuneConfig fc;
  EXPECT_THROW(finetune(m, h, {}, fc), DataError);
  auto bad = task.train;
  bad[0].label = 2;
  EXPECT_THROW(finetune(m, h, bad, fc), DataError);
}

}  // namespace
}  // namespace ambert
