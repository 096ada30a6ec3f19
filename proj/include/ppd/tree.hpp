#pragma once

#include "ppd/numerics.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ppd {

// p[d-1][k-1]: probability that the rank-k guess at token distance d is the
// true token. Ranks at one distance are mutually exclusive.
struct AcceptanceProfile {
    std::size_t m = 0;
    std::size_t K = 0;
    std::vector<std::vector<double>> p;

    static AcceptanceProfile from_rows(std::vector<std::vector<double>> rows);

    double at(std::size_t depth, std::size_t rank) const;
    // Throws ProfileError on out-of-range values or row sums above 1. Ranks
    // are not required to be monotone since empirical profiles may not be.
    void validate() const;
    AcceptanceProfile clamped(double lo = 1e-6, double hi = 1.0 - 1e-6) const;
};

enum class NodeKind { Candidate, Prompt };

struct TreeNode {
    std::size_t id = 0;
    std::optional<std::size_t> parent; // empty = the root (last committed token)
    NodeKind kind = NodeKind::Candidate;
    std::size_t rank = 0;   // candidates: 1-based rank at their depth
    std::size_t offset = 0; // prompt nodes: 1-based offset along their chain
    std::size_t depth = 0;  // distance from the root
    std::optional<std::size_t> host; // prompt nodes: candidate carrying the chain (empty = root)
};

// Candidate subtree plus one prompt chain per candidate and one for the root.
// Ids are dense: candidates first (parents before children), then the root
// chain, then each candidate's chain in candidate order.
class SparseTree {
public:
    SparseTree() = default;
    explicit SparseTree(std::size_t m) : m_(m) {}

    // Candidate shape: parent index (-1 = root) and rank per candidate.
    struct Shape {
        std::vector<int> parent;
        std::vector<std::size_t> rank;
        std::vector<std::size_t> chain;
        std::size_t root_chain = 0;
    };

    static SparseTree from_shape(std::size_t m, const Shape & shape);
    static SparseTree from_nodes(std::size_t m, std::vector<TreeNode> nodes);
    Shape shape() const;

    std::size_t m() const noexcept { return m_; }
    const std::vector<TreeNode> & nodes() const noexcept { return nodes_; }
    const TreeNode & node(std::size_t id) const { return nodes_.at(id); }

    std::size_t n_c() const noexcept { return n_c_; }
    std::size_t n_p() const noexcept { return nodes_.size() - n_c_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    std::size_t max_candidate_depth() const;
    std::size_t chain_length(std::optional<std::size_t> host) const;
    // Prompt node ids of the chain carried by `host`, in offset order.
    std::vector<std::size_t> chain(std::optional<std::size_t> host) const;
    // Candidate children of `parent` (empty = root), in rank order.
    std::vector<std::size_t> children(std::optional<std::size_t> parent) const;
    // Candidate ids from the first depth down to `id`.
    std::vector<std::size_t> path(std::size_t id) const;

    void validate() const;

private:
    std::size_t m_ = 0;
    std::size_t n_c_ = 0;
    std::vector<TreeNode> nodes_;
};

double expected_accept_f(const SparseTree & tree, const AcceptanceProfile & profile,
                         std::optional<std::size_t> max_depth = std::nullopt);

struct FinalNodeDistribution {
    std::map<std::size_t, double> by_node;
    double none = 0.0;
};

FinalNodeDistribution final_node_distribution(const SparseTree & tree, const AcceptanceProfile & profile,
                                              std::optional<std::size_t> max_depth = std::nullopt);

// States 0..m. State k speculates with the candidate subtree truncated to
// depth k; the next state is the chain length at the final accepted node
// (the root chain when nothing is accepted).
struct TransitionModel {
    std::vector<std::vector<double>> P;
    std::vector<double> f;
    std::vector<double> steady;
};

TransitionModel transition_matrix(const SparseTree & tree, const AcceptanceProfile & profile);

// Stationary vector of row-stochastic P by lazy power iteration.
std::vector<double> steady_state(const std::vector<std::vector<double>> & P, double tol = 1e-10,
                                 std::size_t max_iter = 100000);

double amortized_R(const SparseTree & tree, const AcceptanceProfile & profile);

// Greedy candidate tree of n_c nodes. `depth_weights[d-1]` scales the path
// probability of depth-d frontier nodes when given.
SparseTree build_candidate_tree(const AcceptanceProfile & profile, std::size_t n_c, std::size_t max_depth,
                                const std::vector<double> * depth_weights = nullptr);

SparseTree append_prompt_chains(const SparseTree & tree, std::size_t m);

double delta_F(double p_c, double f_d, double f_dm1);

SparseTree prune_prompt_tokens(const SparseTree & tree, std::size_t prompt_budget, const AcceptanceProfile & profile,
                               bool min_one_floor = false);

struct TreeSearchOptions {
    bool min_one_floor = false;
    std::size_t reweight_rounds = 6;
    // Splits up to this total size get the full local search.
    std::size_t full_polish_limit = 16;
    std::size_t polished_splits = 3;
};

SparseTree construct_optimal_tree(std::size_t n, const AcceptanceProfile & profile, std::size_t m,
                                  const TreeSearchOptions & options = {});

// Row 0 is the root; node id i occupies row i + 1.
struct TreeLayout {
    Matrix mask; // (size + 1) x (committed_len + size + 1)
    std::vector<std::int32_t> position_ids;
    std::vector<std::vector<std::size_t>> candidate_paths;
};

TreeLayout tree_attention_layout(const SparseTree & tree, std::size_t committed_len);

struct SimulationResult {
    std::vector<double> state_frequency;
    double mean_committed = 0.0;
    double expected_committed = 0.0; // 1 + sum_k freq_k f(T_k)
};

// Samples the true-token rank at each distance from `profile` and walks the
// tree state machine for `steps` steps starting in state m.
SimulationResult simulate_acceptance(const SparseTree & tree, const AcceptanceProfile & profile, std::size_t steps,
                                     std::mt19937_64 & rng);

nlohmann::json tree_to_json(const SparseTree & tree);
SparseTree tree_from_json(const nlohmann::json & j);
nlohmann::json profile_to_json(const AcceptanceProfile & profile);
AcceptanceProfile profile_from_json(const nlohmann::json & j);

} // namespace ppd
