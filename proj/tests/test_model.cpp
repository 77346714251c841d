#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

namespace optin {
namespace {

using test::goldens;
using test::max_abs_diff;
using test::random_tensor;

ModelGraph toy(std::size_t blocks = 4, std::uint64_t seed = 11, Pooling pooling = Pooling::first_token) {
  ToyTransformerSpec s;
  s.blocks = blocks;
  s.d_model = 8;
  s.heads = 2;
  s.ffn = 12;
  s.classes = 3;
  s.max_tokens = 8;
  s.pooling = pooling;
  return make_toy_transformer(s, seed);
}

PruneMask full_mask(const ModelGraph& m) {
  PruneMask mask = PruneMask::full(m);
  mask.token_counts.reset();
  return mask;
}

TEST(Forward, MatchesFloat64Reference) {
  for (const auto& c : goldens().at("transformers")) {
    const ModelGraph m = test::model_from_golden(c.at("model"));
    const CalibrationBatch batch = test::batch_from_golden(c.at("batch"));
    for (const auto& f : c.at("forward")) {
      const auto trace = forward(m, batch, test::mask_from_golden(f.at("mask")), parse_tap(f.at("tap")));
      EXPECT_LE(max_abs_diff(trace.logits, f.at("logits")), 1e-5) << c.at("name");
      ASSERT_EQ(trace.features.size(), f.at("features").size());
      for (std::size_t i = 0; i < trace.features.size(); ++i)
        EXPECT_LE(max_abs_diff(trace.features[i], f.at("features")[i]), 1e-5)
            << c.at("name") << " tap " << f.at("tap") << " block " << i;
    }
  }
}

TEST(Forward, ZeroWeightHeadIsANoOp) {
  ModelGraph m = toy(2);
  const std::size_t dh = m.head_dim();
  for (std::size_t r = 0; r < m.d_model; ++r)
    for (std::size_t e = 0; e < dh; ++e) {
      auto& w = m.blocks[1];
      w.wq.at(r, e) = w.wk.at(r, e) = w.wv.at(r, e) = 0.0;
      w.wo.at(e, r) = 0.0;
    }
  std::mt19937_64 rng(1);
  const auto batch = CalibrationBatch::from_features(random_tensor({3, 5, 8}, rng));
  PruneMask mask = full_mask(m);
  mask.heads[1] = {1};
  const auto a = forward(m, batch, full_mask(m)), b = forward(m, batch, mask);
  EXPECT_EQ(a.logits, b.logits);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a.features[i], b.features[i]);
}

TEST(Forward, AllNeuronsMaskedLeavesResidual) {
  const ModelGraph m = toy(2);
  std::mt19937_64 rng(2);
  const auto batch = CalibrationBatch::from_features(random_tensor({2, 4, 8}, rng));
  PruneMask mask = full_mask(m);
  mask.neurons[0].clear();
  const auto ffn = forward(m, batch, mask, TapPoint::ffn);
  for (double v : ffn.features[0].data()) EXPECT_EQ(v, 0.0);
  // Block output equals the attention-residual state: compare with a model
  // whose W2 for block 0 is zero.
  ModelGraph z = m;
  z.blocks[0].w2 = Tensor(z.blocks[0].w2.shape());
  const auto ref = forward(z, batch, full_mask(z), TapPoint::l_norm);
  const auto got = forward(m, batch, mask, TapPoint::l_norm);
  EXPECT_EQ(got.features[0], ref.features[0]);
}

TEST(Forward, MaskingEqualsZeroedWeights) {
  const ModelGraph m = toy(3);
  std::mt19937_64 rng(3);
  const auto batch = CalibrationBatch::from_features(random_tensor({3, 6, 8}, rng));
  for (int trial = 0; trial < 20; ++trial) {
    const PruneMask mask = test::random_mask(m, rng, true);
    const ModelGraph z = zero_masked_weights(m, mask);
    for (TapPoint tap : {TapPoint::ffn, TapPoint::l_norm, TapPoint::im_dense}) {
      const auto a = forward(m, batch, mask, tap), b = forward(z, batch, full_mask(z), tap);
      EXPECT_LE(max_abs_diff(a.logits, b.logits), 1e-6);
      for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(max_abs_diff(a.features[i], b.features[i]), 1e-6);
    }
  }
}

TEST(Forward, TokenCountsShapeFeatures) {
  const ModelGraph m = toy(4);
  std::mt19937_64 rng(4);
  const auto batch = CalibrationBatch::from_features(random_tensor({2, 8, 8}, rng));
  PruneMask mask = full_mask(m);
  mask.token_counts = std::vector<std::size_t>{8, 6, 3, 1};
  for (auto reducer : {TokenReducer::bipartite_merge, TokenReducer::random_prune}) {
    ForwardOptions opt;
    opt.reducer = reducer;
    const auto t = forward(m, batch, mask, TapPoint::ffn, opt);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(t.features[i].dim(1), (*mask.token_counts)[i]);
  }
}

TEST(Forward, Errors) {
  const ModelGraph m = toy(2);
  std::mt19937_64 rng(5);
  const auto too_long = CalibrationBatch::from_features(random_tensor({1, 9, 8}, rng));
  EXPECT_CODE(forward(m, too_long, full_mask(m)), ErrorCode::token_overflow);
  const auto batch = CalibrationBatch::from_features(random_tensor({1, 4, 8}, rng));
  PruneMask bad = full_mask(m);
  bad.heads.pop_back();
  EXPECT_CODE(forward(m, batch, bad), ErrorCode::mask_mismatch);
  bad = full_mask(m);
  bad.neurons[0].push_back(99);
  EXPECT_CODE(forward(m, batch, bad), ErrorCode::mask_mismatch);
  bad = full_mask(m);
  bad.token_counts = std::vector<std::size_t>{2, 3};
  EXPECT_CODE(forward(m, batch, bad), ErrorCode::mask_mismatch);
  bad.token_counts = std::vector<std::size_t>{5, 3};
  EXPECT_CODE(forward(m, batch, bad), ErrorCode::token_overflow);
}

TEST(ForwardFrom, StartZeroIsBitwiseForward) {
  const ModelGraph m = toy(4);
  std::mt19937_64 rng(6);
  const auto batch = CalibrationBatch::from_features(random_tensor({2, 5, 8}, rng));
  const auto cache = forward(m, batch, full_mask(m));
  const PruneMask mask = test::random_mask(m, rng);
  const auto a = forward(m, batch, mask), b = forward_from(m, batch, mask, TapPoint::ffn, 0, cache);
  EXPECT_EQ(a.logits, b.logits);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.features[i], b.features[i]);
}

TEST(ForwardFrom, FullMaskReproducesCache) {
  const ModelGraph m = toy(4);
  std::mt19937_64 rng(7);
  const auto batch = CalibrationBatch::from_features(random_tensor({2, 5, 8}, rng));
  const auto cache = forward(m, batch, full_mask(m));
  for (std::size_t s = 0; s <= 4; ++s) {
    const auto t = forward_from(m, batch, full_mask(m), TapPoint::ffn, s, cache);
    EXPECT_EQ(t.logits, cache.logits);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(t.features[i], cache.features[i]);
  }
}

TEST(ForwardFrom, AgreesWithForwardOnRandomCases) {
  const ModelGraph m = toy(4, 12);
  std::mt19937_64 rng(8);
  const auto batch = CalibrationBatch::from_features(random_tensor({2, 5, 8}, rng));
  const auto cache = forward(m, batch, full_mask(m));
  std::uniform_int_distribution<std::size_t> pick(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t start = pick(rng);
    PruneMask mask = test::random_mask(m, rng);
    for (std::size_t i = 0; i < start; ++i) {
      mask.heads[i] = full_mask(m).heads[i];
      mask.neurons[i] = full_mask(m).neurons[i];
    }
    const auto a = forward(m, batch, mask), b = forward_from(m, batch, mask, TapPoint::ffn, start, cache);
    ASSERT_LE(max_abs_diff(a.logits, b.logits), 1e-6);
    for (std::size_t i = 0; i < 4; ++i) ASSERT_LE(max_abs_diff(a.features[i], b.features[i]), 1e-6);
  }
}

TEST(ForwardFrom, RejectsMismatchedCache) {
  const ModelGraph m = toy(2);
  std::mt19937_64 rng(9);
  const auto batch = CalibrationBatch::from_features(random_tensor({2, 5, 8}, rng));
  const auto other = CalibrationBatch::from_features(random_tensor({3, 5, 8}, rng));
  const auto cache = forward(m, batch, full_mask(m));
  EXPECT_CODE(forward_from(m, other, full_mask(m), TapPoint::ffn, 1, cache), ErrorCode::cache_mismatch);
  EXPECT_CODE(forward_from(m, batch, full_mask(m), TapPoint::l_norm, 1, cache), ErrorCode::cache_mismatch);
  EXPECT_CODE(forward_from(m, batch, full_mask(m), TapPoint::ffn, 3, cache), ErrorCode::index_out_of_range);
  auto corrupt = cache;
  corrupt.block_inputs[0][0] += 1.0;
  EXPECT_CODE(forward_from(m, batch, full_mask(m), TapPoint::ffn, 1, corrupt), ErrorCode::cache_mismatch);
}

TEST(Merge, ZeroIsIdentity) {
  std::mt19937_64 rng(10);
  const Tensor f = random_tensor({2, 5, 3}, rng);
  EXPECT_EQ(bipartite_merge(f, 0), f);
  EXPECT_EQ(random_prune_tokens(f, 0, 3), f);
}

TEST(Merge, IdenticalPairMergesToOriginal) {
  // Tokens 1 (set A) and 2 (set B) are identical.
  Tensor f({1, 4, 2}, {9, 9, 1, 2, 1, 2, -3, 5});
  const Tensor out = bipartite_merge(f, 1);
  ASSERT_EQ(out.shape(), (Shape{1, 3, 2}));
  EXPECT_EQ(out.at(0, 0, 0), 9.0);
  EXPECT_EQ(out.at(0, 1, 0), 1.0);
  EXPECT_EQ(out.at(0, 1, 1), 2.0);
  EXPECT_EQ(out.at(0, 2, 0), -3.0);
}

TEST(Merge, PicksBestCosinePairExhaustively) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor f = random_tensor({1, 5, 4}, rng);
    auto cosine = [&](std::size_t a, std::size_t b) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        dot += double(f.at(0, a, k)) * f.at(0, b, k);
        na += double(f.at(0, a, k)) * f.at(0, a, k);
        nb += double(f.at(0, b, k)) * f.at(0, b, k);
      }
      return dot / std::sqrt(na * nb);
    };
    std::size_t best_a = 0, best_b = 0;
    double best = -2;
    for (std::size_t a : {1, 3})
      for (std::size_t b : {2, 4})
        if (cosine(a, b) > best) best = cosine(a, b), best_a = a, best_b = b;
    const MergePlan plan = bipartite_merge_plan(f, 1);
    ASSERT_EQ(plan.tokens_out, 4u);
    bool found = false;
    for (const auto& g : plan.groups[0]) {
      if (g.size() == 2) {
        EXPECT_EQ(g[0], best_b);
        EXPECT_EQ(g[1], best_a);
        found = true;
      }
    }
    EXPECT_TRUE(found);
    EXPECT_EQ(plan.groups[0][0], std::vector<std::size_t>{0});
  }
}

TEST(Merge, RangeChecks) {
  std::mt19937_64 rng(12);
  const Tensor f = random_tensor({1, 5, 2}, rng);
  EXPECT_CODE(bipartite_merge(f, 3), ErrorCode::invalid_parameter);
  EXPECT_CODE(random_prune_tokens(f, 5, 1), ErrorCode::invalid_parameter);
}

TEST(RandomPrune, KeepsClassTokenAndIsDeterministic) {
  std::mt19937_64 rng(13);
  const Tensor f = random_tensor({3, 6, 2}, rng);
  const Tensor one = random_prune_tokens(f, 5, 42);
  ASSERT_EQ(one.dim(1), 1u);
  for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(one.at(b, 0, 0), f.at(b, 0, 0));
  EXPECT_EQ(random_prune_tokens(f, 3, 42), random_prune_tokens(f, 3, 42));
}

TEST(Embed, TokenIdsAndVocabulary) {
  ToyTransformerSpec s;
  s.vocab = 5;
  s.max_tokens = 4;
  const ModelGraph m = make_toy_transformer(s, 3);
  const auto ok = CalibrationBatch::from_tokens({0, 1, 2, 4}, 1, 4);
  EXPECT_EQ(embed(m, ok).shape(), (Shape{1, 4, 16}));
  const auto bad = CalibrationBatch::from_tokens({0, 1, 5, 4}, 1, 4);
  EXPECT_CODE(embed(m, bad), ErrorCode::index_out_of_range);
}

}  // namespace
}  // namespace optin
