#include "support.hpp"

#include "ppd/errors.hpp"
#include "ppd/tree.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

using namespace ppd;
using namespace ppd::testing;

namespace {

using Shape = SparseTree::Shape;

SparseTree candidates(std::vector<int> parent, std::vector<std::size_t> rank, std::size_t m) {
    Shape s;
    s.parent = std::move(parent);
    s.rank = std::move(rank);
    s.chain.assign(s.parent.size(), 0);
    return SparseTree::from_shape(m, s);
}

// Random candidate tree of n_c nodes: repeatedly attach the next free rank
// under a random node of depth < max_depth.
SparseTree random_candidate_tree(std::mt19937_64 & rng, std::size_t n_c, std::size_t max_depth, std::size_t K) {
    Shape s;
    std::vector<std::size_t> depth;
    std::vector<std::size_t> kids;
    std::size_t root_kids = 0;
    while (s.parent.size() < n_c) {
        std::vector<int> options;
        if (root_kids < K) {
            options.push_back(-1);
        }
        for (std::size_t i = 0; i < s.parent.size(); ++i) {
            if (depth[i] < max_depth && kids[i] < K) {
                options.push_back(static_cast<int>(i));
            }
        }
        const int par = options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
        s.parent.push_back(par);
        if (par < 0) {
            s.rank.push_back(++root_kids);
            depth.push_back(1);
        } else {
            s.rank.push_back(++kids[static_cast<std::size_t>(par)]);
            depth.push_back(depth[static_cast<std::size_t>(par)] + 1);
        }
        kids.push_back(0);
        s.chain.push_back(0);
    }
    return SparseTree::from_shape(max_depth, s);
}

} // namespace

TEST(ExpectedAccept, Examples) {
    const auto prof = AcceptanceProfile::from_rows({{0.5, 0.3}, {0.4, 0.1}});
    EXPECT_EQ(expected_accept_f(SparseTree(2), prof), 0.0);
    EXPECT_NEAR(expected_accept_f(candidates({-1, 0}, {1, 1}, 2), prof), 0.7, 1e-12);
    EXPECT_NEAR(expected_accept_f(candidates({-1, -1}, {1, 2}, 2), prof), 0.8, 1e-12);
}

TEST(ExpectedAccept, AddingANodeNeverDecreasesF) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto prof = random_profile(rng, 3, 3);
        std::mt19937_64 tree_rng(trial);
        const SparseTree big = random_candidate_tree(tree_rng, 8, 3, 3);
        Shape s = big.shape();
        double prev = 0.0;
        for (std::size_t n = 1; n <= 8; ++n) {
            Shape part;
            part.parent.assign(s.parent.begin(), s.parent.begin() + static_cast<long>(n));
            part.rank.assign(s.rank.begin(), s.rank.begin() + static_cast<long>(n));
            part.chain.assign(n, 0);
            const double f = expected_accept_f(SparseTree::from_shape(3, part), prof);
            EXPECT_GE(f, prev);
            prev = f;
        }
    }
}

TEST(FinalNode, Examples) {
    const auto single = final_node_distribution(candidates({-1}, {1}, 1), AcceptanceProfile::from_rows({{0.6}}));
    EXPECT_NEAR(single.by_node.at(0), 0.6, 1e-12);
    EXPECT_NEAR(single.none, 0.4, 1e-12);

    const auto chain =
        final_node_distribution(candidates({-1, 0}, {1, 1}, 2), AcceptanceProfile::from_rows({{0.5}, {0.4}}));
    EXPECT_NEAR(chain.by_node.at(1), 0.2, 1e-12);
    EXPECT_NEAR(chain.by_node.at(0), 0.3, 1e-12);
    EXPECT_NEAR(chain.none, 0.5, 1e-12);

    const auto zero =
        final_node_distribution(candidates({-1, 0}, {1, 1}, 2), AcceptanceProfile::from_rows({{0.0}, {0.0}}));
    EXPECT_EQ(zero.none, 1.0);
}

TEST(FinalNode, SumsToOne) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const auto prof = random_profile(rng, 3, 4);
        const SparseTree t = random_candidate_tree(rng, 1 + trial % 10, 3, 4);
        const auto fd = final_node_distribution(t, prof);
        double total = fd.none;
        for (const auto & [id, p] : fd.by_node) {
            total += p;
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(Transition, FullChainsAlwaysReturnToStateM) {
    std::mt19937_64 rng(3);
    const auto prof = random_profile(rng, 3, 2);
    const SparseTree t = append_prompt_chains(build_candidate_tree(prof, 5, 3), 3);
    const TransitionModel tm = transition_matrix(t, prof);
    for (const auto & row : tm.P) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            EXPECT_NEAR(row[i], i == 3 ? 1.0 : 0.0, 1e-12);
        }
    }
}

TEST(Transition, SingleCandidateWithShortChain) {
    Shape s;
    s.parent = {-1};
    s.rank = {1};
    s.chain = {1};
    s.root_chain = 2;
    const SparseTree t = SparseTree::from_shape(2, s);
    const TransitionModel tm = transition_matrix(t, AcceptanceProfile::from_rows({{0.6}, {0.5}}));
    EXPECT_NEAR(tm.P[2][1], 0.6, 1e-9);
    EXPECT_NEAR(tm.P[2][2], 0.4, 1e-9);
}

TEST(Transition, RowsSumToOne) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const auto prof = random_profile(rng, 3, 3);
        const SparseTree t = construct_optimal_tree(6 + trial % 12, prof, 3);
        const TransitionModel tm = transition_matrix(t, prof);
        for (const auto & row : tm.P) {
            EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-9);
        }
        double total = std::accumulate(tm.steady.begin(), tm.steady.end(), 0.0);
        EXPECT_NEAR(total, 1.0, 1e-12);
        for (std::size_t j = 0; j < tm.steady.size(); ++j) {
            double pj = 0.0;
            for (std::size_t i = 0; i < tm.steady.size(); ++i) {
                pj += tm.steady[i] * tm.P[i][j];
            }
            EXPECT_NEAR(pj, tm.steady[j], 1e-8);
        }
    }
}

TEST(SteadyState, Examples) {
    const auto pi = steady_state({{0.5, 0.5}, {0.25, 0.75}});
    EXPECT_NEAR(pi[0], 1.0 / 3.0, 1e-6);
    EXPECT_NEAR(pi[1], 2.0 / 3.0, 1e-6);

    const auto same = steady_state({{0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}});
    EXPECT_NEAR(same[0], 0.2, 1e-9);
    EXPECT_NEAR(same[1], 0.3, 1e-9);
    EXPECT_NEAR(same[2], 0.5, 1e-9);

    const auto pos = steady_state({{0.1, 0.9}, {0.7, 0.3}});
    EXPECT_GT(pos[0], 0.0);
    EXPECT_GT(pos[1], 0.0);
}

TEST(SteadyState, PeriodicChainConverges) {
    const auto pi = steady_state({{0.0, 1.0}, {1.0, 0.0}});
    EXPECT_NEAR(pi[0], 0.5, 1e-9);
}

TEST(SteadyState, Errors) {
    EXPECT_THROW(steady_state({{0.5, 0.4}, {0.5, 0.5}}), DomainError);
    EXPECT_THROW(steady_state({}), ShapeError);
    EXPECT_THROW(steady_state({{0.0, 1.0}, {1.0, 0.0}}, 1e-10, 0), NumericError);
}

TEST(AmortizedR, IsSteadyDotF) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto prof = random_profile(rng, 2, 3);
        const SparseTree t = construct_optimal_tree(4 + trial % 8, prof, 2);
        const TransitionModel tm = transition_matrix(t, prof);
        double r = 0.0;
        for (std::size_t k = 0; k < tm.f.size(); ++k) {
            r += tm.steady[k] * tm.f[k];
        }
        EXPECT_DOUBLE_EQ(amortized_R(t, prof), r);
    }
}

TEST(AmortizedR, SingleStateEqualsF) {
    // m = 1 with every chain full: the chain always returns to state 1.
    const auto prof = AcceptanceProfile::from_rows({{0.5, 0.3, 0.1}});
    const SparseTree t = append_prompt_chains(build_candidate_tree(prof, 3, 1), 1);
    EXPECT_NEAR(amortized_R(t, prof), 0.9, 1e-9);
}

TEST(AmortizedR, HandDotProduct) {
    const std::vector<double> pi{0.5, 0.5};
    const std::vector<double> f{1.0, 2.0};
    EXPECT_DOUBLE_EQ(std::inner_product(pi.begin(), pi.end(), f.begin(), 0.0), 1.5);
}

TEST(AmortizedR, MatchesIndependentLinearSolve) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t m = 1 + trial % 3;
        const auto prof = random_profile(rng, m, 3);
        const SparseTree full = append_prompt_chains(random_candidate_tree(rng, std::min<std::size_t>(2 + trial % 6, m == 1 ? 3 : 8), m, 3), m);
        const SparseTree t = random_pruning(rng, full, m + (full.n_p() - m) / 2);
        EXPECT_NEAR(amortized_R(t, prof), reference_R(t, prof), 1e-9);
    }
}

TEST(BuildCandidateTree, Examples) {
    const auto one = build_candidate_tree(AcceptanceProfile::from_rows({{0.6, 0.2}, {0.5, 0.1}}), 1, 2);
    ASSERT_EQ(one.n_c(), 1u);
    EXPECT_EQ(one.node(0).depth, 1u);
    EXPECT_EQ(one.node(0).rank, 1u);

    const auto three = build_candidate_tree(AcceptanceProfile::from_rows({{0.6, 0.2}, {0.5, 0.1}}), 3, 2);
    const Shape s = three.shape();
    EXPECT_EQ(s.parent, (std::vector<int>{-1, 0, -1}));
    EXPECT_EQ(s.rank, (std::vector<std::size_t>{1, 1, 2}));
}

TEST(BuildCandidateTree, ExhaustedProfileIsCapacityError) {
    EXPECT_THROW(build_candidate_tree(AcceptanceProfile::from_rows({{0.6, 0.2}}), 3, 1), CapacityError);
}

TEST(BuildCandidateTree, GreedyBeatsRandomTrees) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const auto prof = random_profile(rng, 3, 4);
        const std::size_t n_c = 2 + trial % 9;
        const double greedy = expected_accept_f(build_candidate_tree(prof, n_c, 3), prof);
        for (int r = 0; r < 100; ++r) {
            EXPECT_GE(greedy + 1e-12, expected_accept_f(random_candidate_tree(rng, n_c, 3, 4), prof));
        }
    }
}

TEST(AppendChains, Counts) {
    const auto prof = AcceptanceProfile::from_rows({{0.6, 0.2}, {0.5, 0.1}, {0.4, 0.1}});
    const SparseTree c = build_candidate_tree(prof, 3, 3);
    const SparseTree t = append_prompt_chains(c, 3);
    EXPECT_EQ(t.n_p(), 12u);
    EXPECT_EQ(t.n_c(), 3u);
    for (std::optional<std::size_t> host : {std::optional<std::size_t>{}, std::optional<std::size_t>{0},
                                            std::optional<std::size_t>{1}, std::optional<std::size_t>{2}}) {
        const auto ids = t.chain(host);
        ASSERT_EQ(ids.size(), 3u);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_EQ(t.node(ids[i]).offset, i + 1);
        }
    }
    EXPECT_EQ(append_prompt_chains(c, 0).size(), c.size());
}

TEST(DeltaF, Examples) {
    EXPECT_NEAR(delta_F(0.6, 1.4, 0.9), 0.30, 1e-12);
    EXPECT_EQ(delta_F(0.0, 1.4, 0.9), 0.0);
    EXPECT_EQ(delta_F(0.6, 1.1, 1.1), 0.0);
}

TEST(Prune, BudgetEqualToCurrentIsUnchanged) {
    const auto prof = AcceptanceProfile::from_rows({{0.6, 0.2}, {0.5, 0.1}});
    const SparseTree t = append_prompt_chains(build_candidate_tree(prof, 3, 2), 2);
    const SparseTree same = prune_prompt_tokens(t, t.n_p(), prof);
    EXPECT_EQ(same.shape().chain, t.shape().chain);
    EXPECT_EQ(same.size(), t.size());
}

TEST(Prune, LessLikelyNodeLosesFirst) {
    // A chain with p = (0.4, 0.25): final-node probabilities 0.3 and 0.1.
    const auto prof = AcceptanceProfile::from_rows({{0.4}, {0.25}});
    const SparseTree t = append_prompt_chains(candidates({-1, 0}, {1, 1}, 2), 2);
    const auto fd = final_node_distribution(t, prof);
    ASSERT_NEAR(fd.by_node.at(0), 0.3, 1e-12);
    ASSERT_NEAR(fd.by_node.at(1), 0.1, 1e-12);
    const SparseTree p = prune_prompt_tokens(t, t.n_p() - 1, prof);
    EXPECT_EQ(p.shape().chain, (std::vector<std::size_t>{2, 1}));
    EXPECT_EQ(p.shape().root_chain, 2u);
}

TEST(Prune, FloorMakesSmallBudgetsInfeasible) {
    const auto prof = AcceptanceProfile::from_rows({{0.3, 0.1}, {0.2, 0.1}});
    const SparseTree t = append_prompt_chains(candidates({-1, -1}, {1, 2}, 2), 2);
    EXPECT_THROW(prune_prompt_tokens(t, 3, prof, true), InfeasibleError);
    EXPECT_NO_THROW(prune_prompt_tokens(t, 3, prof, false));
}

TEST(Prune, BeatsTypicalRandomPruning) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const auto prof = random_profile(rng, 3, 3);
        const SparseTree full = append_prompt_chains(build_candidate_tree(prof, 4, 3), 3);
        const std::size_t budget = 3 + (trial % 6) + 1;
        const double pruned = amortized_R(prune_prompt_tokens(full, budget, prof), prof);
        std::vector<double> random_r;
        for (int r = 0; r < 100; ++r) {
            random_r.push_back(amortized_R(random_pruning(rng, full, budget), prof));
        }
        std::nth_element(random_r.begin(), random_r.begin() + 50, random_r.end());
        EXPECT_GE(pruned + 1e-12, random_r[50]) << "trial " << trial;
    }
}

TEST(ConstructOptimal, MinimalTree) {
    const SparseTree t = construct_optimal_tree(2, AcceptanceProfile::from_rows({{0.7, 0.2}}), 1);
    EXPECT_EQ(t.n_c(), 1u);
    EXPECT_EQ(t.n_p(), 1u);
    EXPECT_EQ(t.chain_length(std::nullopt), 1u);
    EXPECT_EQ(t.chain_length(0), 0u);
}

TEST(ConstructOptimal, InfeasibleBudgets) {
    const auto prof = AcceptanceProfile::from_rows({{0.7, 0.2}, {0.5, 0.1}});
    EXPECT_THROW(construct_optimal_tree(1, prof, 1), InfeasibleError);
    EXPECT_THROW(construct_optimal_tree(2, prof, 2), InfeasibleError);
    EXPECT_THROW(construct_optimal_tree(8, prof, 3), ProfileError);
}

TEST(ConstructOptimal, MatchesExhaustiveSearch) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 4; ++trial) {
        for (std::size_t m = 1; m <= 2; ++m) {
            const auto prof = random_profile(rng, m, 3);
            for (std::size_t n = m + 1; n <= 6; ++n) {
                const SparseTree t = construct_optimal_tree(n, prof, m);
                EXPECT_EQ(t.size(), n);
                EXPECT_NEAR(amortized_R(t, prof), exhaustive_best_R(n, prof, m), 1e-9)
                    << "n=" << n << " m=" << m << " trial " << trial;
            }
        }
    }
}

TEST(ConstructOptimal, IsDeterministic) {
    std::mt19937_64 rng(10);
    const auto prof = random_profile(rng, 3, 4);
    EXPECT_EQ(tree_to_json(construct_optimal_tree(24, prof, 3)), tree_to_json(construct_optimal_tree(24, prof, 3)));
}

TEST(MonteCarlo, AgreesWithSteadyState) {
    std::mt19937_64 rng(11);
    const auto prof = AcceptanceProfile::from_rows({{0.5, 0.2, 0.1}, {0.4, 0.2, 0.1}, {0.3, 0.2, 0.1}});
    const SparseTree t = construct_optimal_tree(16, prof, 3);
    const TransitionModel tm = transition_matrix(t, prof);
    const SimulationResult sim = simulate_acceptance(t, prof, 100000, rng);
    for (std::size_t k = 0; k < tm.steady.size(); ++k) {
        EXPECT_NEAR(sim.state_frequency[k], tm.steady[k], 0.02);
    }
    const double analytic = 1.0 + amortized_R(t, prof);
    EXPECT_NEAR(sim.mean_committed, analytic, 0.02 * analytic);
    EXPECT_NEAR(sim.mean_committed, sim.expected_committed, 0.02 * analytic);
}

TEST(Layout, LinearChainIsCausal) {
    const SparseTree t = candidates({-1, 0, 1}, {1, 1, 1}, 3);
    const TreeLayout l = tree_attention_layout(t, 5);
    ASSERT_EQ(l.mask.rows(), 4u);
    ASSERT_EQ(l.mask.cols(), 9u);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 9; ++c) {
            EXPECT_EQ(l.mask(r, c) == 0.0f, c <= 5 + r);
        }
        EXPECT_EQ(l.position_ids[r], static_cast<std::int32_t>(5 + r));
    }
}

TEST(Layout, SiblingsAreHiddenFromEachOther) {
    const SparseTree t = candidates({-1, -1}, {1, 2}, 1);
    const TreeLayout l = tree_attention_layout(t, 4);
    EXPECT_EQ(l.mask(1, 6), kMaskBlocked);
    EXPECT_EQ(l.mask(2, 5), kMaskBlocked);
    for (std::size_t c = 0; c < 5; ++c) {
        EXPECT_EQ(l.mask(1, c), 0.0f);
        EXPECT_EQ(l.mask(2, c), 0.0f);
    }
    EXPECT_EQ(l.position_ids[1], 5);
    EXPECT_EQ(l.position_ids[2], 5);
    EXPECT_EQ(l.candidate_paths.size(), 2u);
}

TEST(Layout, PromptChainsSeeTheirHostPath) {
    const auto prof = AcceptanceProfile::from_rows({{0.6, 0.2}, {0.5, 0.1}});
    const SparseTree t = append_prompt_chains(build_candidate_tree(prof, 3, 2), 2);
    const TreeLayout l = tree_attention_layout(t, 3);
    for (const TreeNode & node : t.nodes()) {
        std::size_t visible = 0;
        for (std::size_t c = 4; c < l.mask.cols(); ++c) {
            visible += l.mask(node.id + 1, c) == 0.0f;
        }
        EXPECT_EQ(visible, node.depth);
        EXPECT_EQ(l.position_ids[node.id + 1], static_cast<std::int32_t>(3 + node.depth));
    }
}

TEST(Json, TreeAndProfileRoundTrip) {
    std::mt19937_64 rng(12);
    const auto prof = random_profile(rng, 3, 4);
    const SparseTree t = construct_optimal_tree(20, prof, 3);
    const SparseTree back = tree_from_json(tree_to_json(t));
    EXPECT_EQ(tree_to_json(back), tree_to_json(t));
    EXPECT_EQ(back.shape().chain, t.shape().chain);
    EXPECT_DOUBLE_EQ(amortized_R(back, prof), amortized_R(t, prof));
    const AcceptanceProfile p2 = profile_from_json(profile_to_json(prof));
    EXPECT_EQ(p2.p, prof.p);
    EXPECT_EQ(p2.K, prof.K);
}

TEST(Json, MalformedTreeIsRejected) {
    nlohmann::json j = {{"m", 2}, {"nodes", {{{"id", 0}, {"parent", 5}, {"kind", "candidate"}, {"rank", 1}}}}};
    EXPECT_THROW(tree_from_json(j), Error);
}

TEST(Profile, ValidateRejectsBadRows) {
    EXPECT_THROW(AcceptanceProfile::from_rows({{0.7, 0.5}}), ProfileError);
    EXPECT_THROW(AcceptanceProfile::from_rows({{-0.1}}), ProfileError);
    const auto c = AcceptanceProfile::from_rows({{1.0, 0.0}}).clamped();
    EXPECT_LT(c.p[0][0], 1.0);
    EXPECT_GT(c.p[0][1], 0.0);
    EXPECT_LE(c.p[0][0] + c.p[0][1], 1.0 - 1e-6 + 1e-15);
}
