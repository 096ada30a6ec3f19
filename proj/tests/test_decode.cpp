#include "support.hpp"

#include "ppd/decode.hpp"
#include "ppd/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace ppd;
using namespace ppd::testing;

namespace {

// Model whose logits are the same at every position: argmax is `winner`,
// every other token ties at zero.
Model constant_model(TokenId winner) {
    Model model = init_model(tiny_config(21));
    auto & t = model.mutable_tensors();
    t["ln_f.gain"].fill(0.0f);
    t["ln_f.bias"].fill(1.0f);
    t["lm_head"].fill(0.0f);
    for (std::size_t r = 0; r < t["lm_head"].rows(); ++r) {
        t["lm_head"](r, static_cast<std::size_t>(winner)) = 1.0f;
    }
    return model;
}

SparseTree linear_tree(std::size_t m, std::vector<std::size_t> ranks) {
    SparseTree::Shape s;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        s.parent.push_back(static_cast<int>(i) - 1);
    }
    s.rank = std::move(ranks);
    s.chain.assign(s.parent.size(), m);
    s.root_chain = m;
    return SparseTree::from_shape(m, s);
}

struct VerifyFixture {
    std::vector<std::vector<float>> rows;
    VerifyInput in;

    // Each row is a one-hot logit favouring the given token.
    static std::vector<float> favour(TokenId t) {
        std::vector<float> row(8, 0.0f);
        row[static_cast<std::size_t>(t)] = 5.0f;
        return row;
    }
};

} // namespace

TEST(VerifyExact, WholeGreedyChainAccepted) {
    // Root predicts 1, candidate 1 predicts 2, candidate 2 predicts 3.
    const auto root = VerifyFixture::favour(1);
    const auto a = VerifyFixture::favour(2);
    const auto b = VerifyFixture::favour(3);
    VerifyInput in;
    in.parent = {std::nullopt, 0};
    in.rank = {1, 1};
    in.token = {1, 2};
    in.logits = {a, b};
    in.root_logits = root;
    EXPECT_EQ(verify_exact(in), (std::vector<std::size_t>{0, 1}));
    in.token = {1, 5};
    EXPECT_EQ(verify_exact(in), (std::vector<std::size_t>{0}));
    in.token = {4, 2};
    EXPECT_TRUE(verify_exact(in).empty());
}

TEST(VerifyExact, LongestPathThenSmallestRanks) {
    const auto root = VerifyFixture::favour(1);
    const auto next = VerifyFixture::favour(2);
    VerifyInput in;
    // Two depth-one copies of token 1; only the rank-2 copy has an accepted child.
    in.parent = {std::nullopt, std::nullopt, 1};
    in.rank = {1, 2, 1};
    in.token = {1, 1, 2};
    in.logits = {next, next, next};
    in.root_logits = root;
    EXPECT_EQ(verify_exact(in), (std::vector<std::size_t>{1, 2}));
    in.token = {1, 1, 7};
    EXPECT_EQ(verify_exact(in), (std::vector<std::size_t>{0}));
}

TEST(VerifyTypical, ThresholdExample) {
    const std::vector<float> uniform(258, 1.0f / 258.0f);
    const double thr = typical_threshold(uniform, 0.3, 0.09);
    EXPECT_NEAR(thr, 0.09 / 258.0, 1e-9);
    EXPECT_NEAR(thr, 3.49e-4, 1e-6);
    EXPECT_GT(1.0 / 258.0, thr);
    const std::vector<float> sure{1.0f, 0.0f, 0.0f};
    EXPECT_NEAR(typical_threshold(sure, 0.3, 0.09), 0.09, 1e-9);
    EXPECT_NEAR(typical_threshold(sure, 0.05, 0.09), 0.05, 1e-9);
}

TEST(VerifyTypical, AcceptsLikelyAndRejectsImpossible) {
    const std::vector<float> flat(258, 0.0f);
    std::vector<float> peaked(258, -1e4f);
    peaked[7] = 0.0f;
    VerifyInput in;
    in.parent = {std::nullopt};
    in.rank = {1};
    in.token = {3};
    in.logits = {flat};
    in.root_logits = flat;
    EXPECT_EQ(verify_typical(in, 0.3, 0.09, 1.0).size(), 1u);
    in.root_logits = peaked;
    EXPECT_TRUE(verify_typical(in, 0.3, 0.09, 1.0).empty());
    in.token = {7};
    EXPECT_EQ(verify_typical(in, 0.3, 0.09, 1.0).size(), 1u);
}

TEST(VerifyConfig, RejectsBadParameters) {
    VerifyConfig v;
    v.kind = VerifyConfig::Kind::Typical;
    v.epsilon = 0.0;
    EXPECT_THROW(v.validate(), ConfigError);
    v.epsilon = 0.3;
    v.delta = -1.0;
    EXPECT_THROW(v.validate(), ConfigError);
}

TEST(Session, PrefillState) {
    const Model model = textured_model(tiny_config(22, 2));
    const PromptTokenBank bank = init_bank(model, 3, 1, 1);
    DecodeSession s(model, bank, linear_tree(3, {1, 1}));
    std::mt19937_64 rng(1);
    const auto prompt = random_tokens(rng, 10);
    s.prefill(prompt);
    EXPECT_EQ(s.tokens(), prompt);
    EXPECT_EQ(s.stats().steps, 0u);
    EXPECT_EQ(s.state(), 3u);
    EXPECT_EQ(s.cache().committed_len(), prompt.size());
    const Generation v = vanilla_generate(model, prompt, 1);
    EXPECT_EQ(s.pending_root(), v.tokens[0]);
}

TEST(Session, Errors) {
    const Model model = init_model(tiny_config(23, 1, 16, 2, 32, 16));
    const PromptTokenBank bank = init_bank(model, 2, 1, 1);
    DecodeSession s(model, bank, linear_tree(2, {1}));
    EXPECT_THROW(s.decode_step(), ConfigError);
    EXPECT_THROW(s.step_request(), ConfigError);
    std::vector<TokenId> empty;
    EXPECT_THROW(s.prefill(empty), ConfigError);
    std::vector<TokenId> long_prompt(20, 65);
    EXPECT_THROW(s.prefill(long_prompt), CapacityError);
}

TEST(Session, CapacityOverflowDuringGeneration) {
    const Model model = textured_model(tiny_config(24, 1, 16, 2, 32, 24));
    const PromptTokenBank bank = init_bank(model, 2, 1, 1);
    DecodeSession s(model, bank, linear_tree(2, {1, 1}));
    std::vector<TokenId> prompt(10, 65);
    s.prefill(prompt);
    s.set_stop_tokens({});
    EXPECT_THROW(generate(s, 100, {}), CapacityError);
}

TEST(Session, AllAcceptedOnAConstantModel) {
    const Model model = constant_model(42);
    const PromptTokenBank bank = init_bank(model, 3, 1, 1);
    DecodeSession s(model, bank, linear_tree(3, {1, 1, 1}));
    const std::vector<TokenId> prompt{kBosToken, 65, 66};
    s.prefill(prompt);
    for (int i = 0; i < 5; ++i) {
        const StepOutcome out = s.decode_step();
        EXPECT_EQ(out.committed, std::vector<TokenId>(4, 42));
        EXPECT_EQ(out.accepted, 3u);
        EXPECT_EQ(out.next_state, 3u);
    }
}

TEST(Session, OnlyDepthOneMatches) {
    // The depth-two candidate is the rank-2 guess, which the constant model
    // never produces.
    const Model model = constant_model(42);
    const PromptTokenBank bank = init_bank(model, 2, 1, 1);
    DecodeSession s(model, bank, linear_tree(2, {1, 2}));
    const std::vector<TokenId> prompt{kBosToken, 65};
    s.prefill(prompt);
    for (int i = 0; i < 5; ++i) {
        EXPECT_EQ(s.decode_step().committed.size(), 2u);
    }
}

TEST(Session, FullRejectionCommitsOneTokenAndReturnsToStateM) {
    const Model model = textured_model(tiny_config(25, 2));
    const PromptTokenBank bank = init_bank(model, 3, 1, 3);
    std::mt19937_64 rng(2);
    const auto prof = random_profile(rng, 3, 3);
    DecodeSession s(model, bank, construct_optimal_tree(10, prof, 3));
    s.prefill(random_tokens(rng, 8));
    std::size_t rejections = 0;
    for (int i = 0; i < 30 && !s.finished(); ++i) {
        const StepOutcome out = s.decode_step();
        if (out.finished) {
            break;
        }
        if (out.accepted == 0) {
            ++rejections;
            EXPECT_EQ(out.committed.size(), 1u);
            EXPECT_EQ(out.next_state, 3u);
        }
    }
    EXPECT_GT(rejections, 0u);
}

TEST(Session, NextStateIsChainLengthAtAcceptedNode) {
    const Model model = constant_model(42);
    const PromptTokenBank bank = init_bank(model, 3, 1, 1);
    SparseTree::Shape shape;
    shape.parent = {-1, 0};
    shape.rank = {1, 1};
    shape.chain = {3, 1};
    shape.root_chain = 3;
    DecodeSession s(model, bank, SparseTree::from_shape(3, shape));
    const std::vector<TokenId> prompt{kBosToken};
    s.prefill(prompt);
    // State 3: both candidates accepted, the depth-two node carries one token.
    StepOutcome out = s.decode_step();
    EXPECT_EQ(out.accepted, 2u);
    EXPECT_EQ(out.next_state, 1u);
    // State 1: only the depth-one candidate is speculated.
    out = s.decode_step();
    EXPECT_EQ(out.accepted, 1u);
    EXPECT_EQ(out.next_state, 3u);
}

TEST(Generate, MaxNewZeroIsEmpty) {
    const Model model = textured_model(tiny_config(26));
    const PromptTokenBank bank = init_bank(model, 2, 1, 1);
    DecodeSession s(model, bank, linear_tree(2, {1}));
    const std::vector<TokenId> prompt{kBosToken, 70};
    s.prefill(prompt);
    const Generation g = generate(s, 0);
    EXPECT_TRUE(g.tokens.empty());
    EXPECT_EQ(g.stats.steps, 0u);
    EXPECT_TRUE(vanilla_generate(model, prompt, 0).tokens.empty());
}

TEST(Generate, LosslessAgainstVanilla) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 12; ++trial) {
        const Model model = textured_model(tiny_config(100 + trial, 2, 16, 2, 32, 160), 8.0f + static_cast<float>(trial));
        const std::size_t n_ept = 1 + trial % 2;
        const MaskMode mode = trial % 3 == 0 ? MaskMode::Ensemble
                              : trial % 3 == 1 ? MaskMode::DecoderLike
                                               : MaskMode::EncoderLike;
        const PromptTokenBank bank = init_bank(model, 3, n_ept, trial, mode);
        const auto prof = random_profile(rng, 3, 4, 0.9);
        const SparseTree tree = construct_optimal_tree(4 + 3 * trial, prof, 3);
        const auto prompt = random_tokens(rng, 3 + trial);
        DecodeSession s(model, bank, tree);
        s.prefill(prompt);
        const Generation ppd = generate(s, 40);
        const Generation van = vanilla_generate(model, prompt, 40);
        EXPECT_EQ(ppd.tokens, van.tokens) << "trial " << trial;
    }
}

TEST(Generate, StopTokenTruncatesLikeVanilla) {
    const Model model = constant_model(42);
    const PromptTokenBank bank = init_bank(model, 3, 1, 1);
    DecodeSession s(model, bank, linear_tree(3, {1, 1, 1}));
    const std::vector<TokenId> prompt{kBosToken};
    s.prefill(prompt);
    const Generation g = generate(s, 10, {42});
    EXPECT_EQ(g.tokens, std::vector<TokenId>{42});
    EXPECT_EQ(vanilla_generate(model, prompt, 10, {42}).tokens, g.tokens);

    std::mt19937_64 rng(4);
    const Model textured = textured_model(tiny_config(27, 2));
    const auto p2 = random_tokens(rng, 6);
    const Generation free = vanilla_generate(textured, p2, 30, {});
    const TokenId stop = free.tokens[12];
    const PromptTokenBank b2 = init_bank(textured, 3, 1, 2);
    DecodeSession s2(textured, b2, construct_optimal_tree(12, random_profile(rng, 3, 3), 3));
    s2.prefill(p2);
    EXPECT_EQ(generate(s2, 30, {stop}).tokens, vanilla_generate(textured, p2, 30, {stop}).tokens);
}

TEST(Generate, TauAccountingAndBounds) {
    const Model model = textured_model(tiny_config(28, 2));
    const PromptTokenBank bank = init_bank(model, 3, 1, 4);
    std::mt19937_64 rng(5);
    const SparseTree tree = construct_optimal_tree(16, random_profile(rng, 3, 3), 3);
    DecodeSession s(model, bank, tree);
    s.prefill(random_tokens(rng, 5));
    const Generation g = generate(s, 50);
    std::size_t total = 0;
    for (std::size_t t : g.stats.per_step_tau) {
        EXPECT_GE(t, 1u);
        EXPECT_LE(t, tree.max_candidate_depth() + 1);
        total += t;
    }
    EXPECT_EQ(total, g.stats.committed);
    EXPECT_EQ(g.stats.committed, g.tokens.size());
    EXPECT_DOUBLE_EQ(g.stats.tau_mean(),
                     static_cast<double>(g.stats.committed) / static_cast<double>(g.stats.steps));
    const auto j = g.stats.to_json();
    for (const char * key : {"steps", "committed", "tau_mean", "wall_ms", "tokens_per_s", "per_step_tau"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
}

TEST(Generate, CacheMatchesFromScratchRecomputation) {
    const Model model = textured_model(tiny_config(29, 2));
    const PromptTokenBank bank = init_bank(model, 3, 2, 5);
    std::mt19937_64 rng(6);
    DecodeSession s(model, bank, construct_optimal_tree(14, random_profile(rng, 3, 3), 3));
    s.prefill(random_tokens(rng, 7));
    generate(s, 30);
    const auto & tokens = s.tokens();
    ASSERT_EQ(s.cache().committed_len(), tokens.size());
    KVCache fresh(model.config().n_layers, model.config().d_model, model.config().max_positions);
    ForwardRequest r;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        r.entries.push_back(InputEntry::token(tokens[i]));
        r.position_ids.push_back(static_cast<std::int32_t>(i));
    }
    r.additive_mask = causal_mask(0, tokens.size());
    forward(model, r, fresh);
    for (std::size_t l = 0; l < model.config().n_layers; ++l) {
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            for (std::size_t c = 0; c < model.config().d_model; ++c) {
                ASSERT_NEAR(s.cache().keys(l)(i, c), fresh.keys(l)(i, c), 1e-4);
                ASSERT_NEAR(s.cache().values(l)(i, c), fresh.values(l)(i, c), 1e-4);
            }
        }
    }
    EXPECT_EQ(s.cache().positions().back(), static_cast<std::int32_t>(tokens.size() - 1));
}

TEST(Generate, TypicalModeIsReproducibleUnderSeed) {
    const Model model = textured_model(tiny_config(30, 2));
    const PromptTokenBank bank = init_bank(model, 3, 1, 6);
    std::mt19937_64 rng(7);
    const SparseTree tree = construct_optimal_tree(10, random_profile(rng, 3, 3), 3);
    const auto prompt = random_tokens(rng, 5);
    VerifyConfig v;
    v.kind = VerifyConfig::Kind::Typical;
    v.seed = 9;
    v.temperature = 0.7;
    DecodeSession a(model, bank, tree, v);
    DecodeSession b(model, bank, tree, v);
    a.prefill(prompt);
    b.prefill(prompt);
    const Generation ga = generate(a, 30);
    EXPECT_EQ(ga.tokens, generate(b, 30).tokens);
}

TEST(TopK, OrderAndTies) {
    const std::vector<float> logits{0.5f, 2.0f, 2.0f, -1.0f};
    EXPECT_EQ(top_k_tokens(logits, 3), (std::vector<TokenId>{1, 2, 0}));
    EXPECT_EQ(top_k_tokens(logits, 1), (std::vector<TokenId>{1}));
}
