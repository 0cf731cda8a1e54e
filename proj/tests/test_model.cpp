#include <gtest/gtest.h>

#include "testing.hpp"

namespace ambert {
namespace {

using testing::inflate;
using testing::random_pair;
using testing::tiny_config;

constexpr double kE2eTol = 1e-3;

TokenSeqPair small_pair(Rng& rng, const ModelConfig& c) {
  return random_pair(rng, c.fine_vocab_size, c.coarse_vocab_size, 3, true, 2);
}

// ---- sharing ---------------------------------------------------------------

TEST(ModelSharing, AmbertLayersAreOneStorageWriteThrough) {
  Model<double> m(ModelConfig::desk(Variant::kAmbert, 40, 30), 1);
  auto& ps = m.params();
  std::size_t shared = 0;
  for (const auto& name : ps.names()) {
    if (name.rfind("coarse.", 0) != 0 || name == "coarse.embeddings.token" || name == "coarse.mlm.bias")
      continue;
    const std::string twin = "fine." + name.substr(7);
    ASSERT_TRUE(ps.has(twin)) << name;
    ASSERT_EQ(ps.index_of(name), ps.index_of(twin)) << name;
    // Write through one name, read through the other.
    ps.get(twin).value[0] = 123.5 + static_cast<double>(shared);
    EXPECT_EQ(ps.get(name).value[0], 123.5 + static_cast<double>(shared));
    ++shared;
  }
  EXPECT_GT(shared, 16u * 2);
  EXPECT_NE(ps.index_of("fine.embeddings.token"), ps.index_of("coarse.embeddings.token"));
  EXPECT_NE(ps.index_of("fine.mlm.bias"), ps.index_of("coarse.mlm.bias"));
}

TEST(ModelSharing, AmbertGradientsFromBothStreamsLandInOneBuffer) {
  const ModelConfig c = tiny_config(Variant::kAmbert);
  Model<double> m(c, 3);
  inflate(m, 4, 0.3);
  Rng rng(5);
  const TokenSeqPair pair = small_pair(rng, c);
  const auto out = m.forward(pair);
  Tensor<double> df(out.fine_hidden.shape(), 1.0), dc(out.coarse_hidden.shape(), 1.0);

  auto grad_of = [&](const Tensor<double>* a, const Tensor<double>* b) {
    m.params().zero_grad();
    m.backward(out, a, b);
    return m.params().get("fine.encoder.layer0.attn.wq").grad;
  };
  const Tensor<double> gf = grad_of(&df, nullptr), gc = grad_of(nullptr, &dc), gb = grad_of(&df, &dc);
  for (std::size_t i = 0; i < gb.size(); ++i) EXPECT_NEAR(gb[i], gf[i] + gc[i], 1e-12);
  EXPECT_GT(std::abs(gc[0]), 0.0);
}

TEST(ModelSharing, ComboIsFullyDisjoint) {
  Model<double> m(ModelConfig::desk(Variant::kCombo, 40, 30), 1);
  for (const auto& g : m.params().groups()) EXPECT_EQ(g.names.size(), 1u) << g.names.front();
}

/// Closed-form parameter count of one encoder stack (no token table).
std::size_t encoder_census(const ModelConfig& c, bool granularity) {
  const std::size_t d = static_cast<std::size_t>(c.hidden), f = static_cast<std::size_t>(c.ffn_inner);
  const std::size_t per_layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
  return static_cast<std::size_t>(c.max_positions) * d + static_cast<std::size_t>(c.type_vocab) * d +
         (granularity ? 2 * d : 0) + 2 * d + static_cast<std::size_t>(c.layers) * per_layer +
         (d * d + d + 2 * d);
}

TEST(ModelSharing, CensusMatchesEnumerationAndOrdering) {
  for (const auto& [layers, hidden, heads, vf, vc] :
       std::vector<std::tuple<int, int, int, int, int>>{{1, 8, 2, 13, 11}, {2, 64, 4, 300, 500}, {3, 32, 2, 57, 9},
                                                        {2, 48, 3, 120, 120}}) {
    auto cfg = [&](Variant v) {
      ModelConfig c;
      c.variant = v;
      c.layers = layers;
      c.hidden = hidden;
      c.heads = heads;
      c.head_size = hidden / heads;
      c.ffn_inner = 4 * hidden;
      c.max_positions = 64;
      c.fine_vocab_size = vf;
      c.coarse_vocab_size = vc;
      return c;
    };
    const std::size_t d = static_cast<std::size_t>(hidden);
    const std::size_t Vf = static_cast<std::size_t>(vf), Vc = static_cast<std::size_t>(vc);
    const std::size_t bert = Model<float>(cfg(Variant::kBert), 0).params().param_count();
    const std::size_t ambert = Model<float>(cfg(Variant::kAmbert), 0).params().param_count();
    const std::size_t combo = Model<float>(cfg(Variant::kCombo), 0).params().param_count();
    const std::size_t hybrid = Model<float>(cfg(Variant::kHybrid), 0).params().param_count();
    const std::size_t enc = encoder_census(cfg(Variant::kBert), false);
    EXPECT_EQ(bert, Vf * d + enc + Vf);
    EXPECT_EQ(ambert, bert + Vc * d + Vc);
    EXPECT_EQ(combo, ambert + enc);
    EXPECT_EQ(hybrid, ambert + 2 * d);
    EXPECT_GT(combo, ambert);
    EXPECT_GT(ambert, bert);
  }
}

// ---- stream independence ---------------------------------------------------

TokenSeqPair perturb_coarse(const TokenSeqPair& p, Rng& rng, int vc) {
  TokenSeqPair q = p;
  bool changed = false;
  while (!changed)
    for (std::size_t j = 1; j + 1 < q.coarse_ids.size(); ++j)
      if (rng.uniform() < 0.5) {
        const int id = kNumSpecial + static_cast<int>(rng.index(static_cast<std::uint64_t>(vc - kNumSpecial)));
        changed |= id != q.coarse_ids[j];
        q.coarse_ids[j] = id;
      }
  return q;
}

TEST(ModelStreams, DualVariantsFineStatesIgnoreCoarseInput) {
  for (Variant v : {Variant::kAmbert, Variant::kCombo}) {
    const ModelConfig c = ModelConfig::desk(v, 50, 40);
    Model<float> m(c, 7);
    inflate(m, 8, 0.2);
    Rng rng(9);
    for (int t = 0; t < 100; ++t) {
      const TokenSeqPair base = random_pair(rng, c.fine_vocab_size, c.coarse_vocab_size);
      const TokenSeqPair pert = perturb_coarse(base, rng, c.coarse_vocab_size);
      const auto a = m.forward(base), b = m.forward(pert);
      ASSERT_EQ(a.fine_hidden, b.fine_hidden) << to_string(v) << " trial " << t;
      ASSERT_FALSE(a.coarse_hidden == b.coarse_hidden);
    }
  }
}

TEST(ModelStreams, HybridFineStatesDependOnCoarseInput) {
  const ModelConfig c = ModelConfig::desk(Variant::kHybrid, 50, 40);
  Model<float> m(c, 7);
  inflate(m, 8, 0.2);
  Rng rng(10);
  int changed = 0;
  for (int t = 0; t < 100; ++t) {
    const TokenSeqPair base = random_pair(rng, c.fine_vocab_size, c.coarse_vocab_size);
    const TokenSeqPair pert = perturb_coarse(base, rng, c.coarse_vocab_size);
    changed += !(m.forward(base).fine_hidden == m.forward(pert).fine_hidden);
  }
  EXPECT_GE(changed, 99);
}

TEST(ModelStreams, SingleStreamRunsMatchDualRunBitwise) {
  for (Variant v : {Variant::kAmbert, Variant::kCombo}) {
    const ModelConfig c = ModelConfig::desk(v, 50, 40);
    Model<float> m(c, 11);
    inflate(m, 12, 0.2);
    Rng rng(13);
    for (int t = 0; t < 20; ++t) {
      const TokenSeqPair p = random_pair(rng, c.fine_vocab_size, c.coarse_vocab_size);
      const auto both = m.forward(p);
      ForwardOptions fo;
      fo.streams = Streams::kFineOnly;
      const auto fine = m.forward(p, fo);
      fo.streams = Streams::kCoarseOnly;
      const auto coarse = m.forward(p, fo);
      EXPECT_EQ(fine.fine_hidden, both.fine_hidden);
      EXPECT_FALSE(fine.has_coarse);
      EXPECT_EQ(coarse.coarse_hidden, both.coarse_hidden);
      EXPECT_FALSE(coarse.has_fine);
    }
  }
}

TEST(ModelStreams, HybridRefusesSingleStream) {
  Model<float> m(ModelConfig::desk(Variant::kHybrid, 50, 40), 1);
  Rng rng(1);
  ForwardOptions fo;
  fo.streams = Streams::kFineOnly;
  EXPECT_THROW(m.forward(random_pair(rng, 50, 40), fo), UsageError);
}

TEST(ModelStreams, HybridSharesOneAttentionOverBothSequences) {
  const ModelConfig c = tiny_config(Variant::kHybrid);
  Model<double> m(c, 2);
  Rng rng(3);
  const TokenSeqPair p = small_pair(rng, c);
  const auto out = m.forward(p);
  const auto& a = out.attention(Stream::kFine, 0, 1);
  EXPECT_EQ(a.rows(), static_cast<std::size_t>(p.fine_len() + p.coarse_len()));
  EXPECT_EQ(out.coarse_hidden.rows(), static_cast<std::size_t>(p.coarse_len()));
}

TEST(ModelStreams, DropoutDependsOnlyOnSeedInTrainMode) {
  ModelConfig c = ModelConfig::desk(Variant::kAmbert, 50, 40);
  Model<float> m(c, 1);
  Rng rng(2);
  const TokenSeqPair p = random_pair(rng, 50, 40);
  ForwardOptions fo;
  fo.train = true;
  fo.seed = 99;
  const auto a = m.forward(p, fo), b = m.forward(p, fo);
  EXPECT_EQ(a.fine_hidden, b.fine_hidden);
  fo.seed = 100;
  EXPECT_FALSE(m.forward(p, fo).fine_hidden == a.fine_hidden);
  EXPECT_FALSE(m.forward(p).fine_hidden == a.fine_hidden);
}

TEST(ModelValidation, RejectsBadIdsAndConfigs) {
  const ModelConfig c = tiny_config(Variant::kAmbert);
  Model<double> m(c, 1);
  Rng rng(1);
  TokenSeqPair p = small_pair(rng, c);
  p.fine_ids[1] = c.fine_vocab_size;
  EXPECT_ANY_THROW(m.forward(p));
  ModelConfig bad = c;
  bad.hidden = 9;
  EXPECT_THROW(bad.validate(), UsageError);
  bad = c;
  bad.coarse_vocab_size = 3;
  EXPECT_THROW(bad.validate(), UsageError);
}

// ---- end-to-end gradients --------------------------------------------------

struct MlmCase {
  Variant variant;
  bool train;
};

class MlmGrad : public ::testing::TestWithParam<MlmCase> {};

TEST_P(MlmGrad, MatchesFiniteDifferences) {
  const MlmCase tc = GetParam();
  ModelConfig c = tiny_config(tc.variant);
  if (tc.train) c.hidden_dropout = c.attention_dropout = 0.1;
  Model<double> m(c, 21);
  inflate(m, 22, 0.3);
  Rng rng(23 + static_cast<int>(tc.variant));
  const TokenSeqPair pair = small_pair(rng, c);
  const int vc = c.has_coarse() ? c.coarse_vocab_size : kNumSpecial + 1;
  const MaskPlan plan = make_mask_plan(pair, c.fine_vocab_size, vc, 0.5, 24);
  const TokenSeqPair input = apply_mask(pair, plan);
  ForwardOptions fo;
  fo.train = tc.train;
  fo.seed = 25;
  auto loss = [&] { return mlm_loss(m, m.forward(input, fo), plan).total; };

  m.params().zero_grad();
  const auto out = m.forward(input, fo);
  HiddenGrads<double> g = HiddenGrads<double>::like(out);
  mlm_loss(m, out, plan, &g);
  m.backward(out, g.fine_ptr(), g.coarse_ptr());

  const auto r = testing::check_stores({&m.params()}, loss);
  EXPECT_LT(r.global, kE2eTol);
  EXPECT_LT(r.worst, kE2eTol) << r.worst_name;
  EXPECT_GT(r.checked, 500u);
}

INSTANTIATE_TEST_SUITE_P(Variants, MlmGrad,
                         ::testing::Values(MlmCase{Variant::kAmbert, false}, MlmCase{Variant::kAmbert, true},
                                           MlmCase{Variant::kCombo, false}, MlmCase{Variant::kHybrid, false},
                                           MlmCase{Variant::kHybrid, true}, MlmCase{Variant::kBert, false}),
                         [](const auto& info) {
                           return to_string(info.param.variant) + (info.param.train ? "_dropout" : "");
                         });

TEST(ModelGrad, NspPlusMlmMatchesFiniteDifferences) {
  for (Variant v : {Variant::kAmbert, Variant::kBert}) {
    ModelConfig c = tiny_config(v);
    c.nsp = true;
    Model<double> m(c, 31);
    inflate(m, 32, 0.3);
    Rng rng(33);
    TokenSeqPair pair;
    do pair = small_pair(rng, c);
    while (pair.fine_segments.back() != 1);
    const int vc = c.has_coarse() ? c.coarse_vocab_size : kNumSpecial + 1;
    const MaskPlan plan = make_mask_plan(pair, c.fine_vocab_size, vc, 0.3, 34);
    const TokenSeqPair input = apply_mask(pair, plan);
    auto loss = [&] {
      const auto out = m.forward(input);
      return mlm_loss(m, out, plan).total + nsp_loss(m, out, 1);
    };
    m.params().zero_grad();
    const auto out = m.forward(input);
    HiddenGrads<double> g = HiddenGrads<double>::like(out);
    mlm_loss(m, out, plan, &g);
    nsp_loss(m, out, 1, &g);
    m.backward(out, g.fine_ptr(), g.coarse_ptr());
    const auto r = testing::check_stores({&m.params()}, loss);
    EXPECT_LT(r.global, kE2eTol) << to_string(v);
    EXPECT_LT(r.worst, kE2eTol) << to_string(v) << " " << r.worst_name;
  }
}

TEST(ModelGrad, KeyBiasGradientVanishes) {
  // Adding q.b_k to a whole logit row leaves its softmax unchanged.
  const ModelConfig c = tiny_config(Variant::kBert);
  Model<double> m(c, 51);
  inflate(m, 52, 0.3);
  Rng rng(53);
  const auto out = m.forward(small_pair(rng, c));
  Rng wr(54);
  const Tensor<double> w = testing::random_tensor<double>(out.fine_hidden.shape(), wr);
  m.params().zero_grad();
  m.backward(out, &w, nullptr);
  for (double g : m.params().get("fine.encoder.layer0.attn.bk").grad.vec()) EXPECT_NEAR(g, 0.0, 1e-12);
  double bq = 0;
  for (double g : m.params().get("fine.encoder.layer0.attn.bq").grad.vec()) bq += std::abs(g);
  EXPECT_GT(bq, 1e-6);
}

TEST(ModelGrad, FloatAndDoubleAgree) {
  const ModelConfig c = ModelConfig::desk(Variant::kAmbert, 50, 40);
  Model<double> md(c, 41);
  Model<float> mf = md.cast<float>();
  Rng rng(42);
  const TokenSeqPair p = random_pair(rng, 50, 40);
  const auto a = md.forward(p);
  const auto b = mf.forward(p);
  for (std::size_t i = 0; i < a.fine_hidden.size(); ++i) EXPECT_NEAR(a.fine_hidden[i], b.fine_hidden[i], 1e-4);
}

TEST(ModelFlops, AnalyticCountMatchesInstrumentedKernels) {
  for (Variant v : {Variant::kBert, Variant::kAmbert}) {
    const ModelConfig c = ModelConfig::desk(v, 50, 40);
    Model<float> m(c, 1);
    Rng rng(2);
    const TokenSeqPair p = random_pair(rng, 50, 40);
    ForwardOptions fo;
    fo.streams = Streams::kFineOnly;
    const auto before = nn::flop_counter();
    m.forward(p, fo);
    EXPECT_EQ(nn::flop_counter() - before, m.encoder_flops(static_cast<std::uint64_t>(p.fine_len())));
  }
}

}  // namespace
}  // namespace ambert
