#pragma once

#include "ppd/model.hpp"
#include "ppd/prompt.hpp"
#include "ppd/tree.hpp"

#include <json.hpp>

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <vector>

namespace ppd {

struct VerifyConfig {
    enum class Kind { Exact, Typical };
    Kind kind = Kind::Exact;
    double epsilon = 0.3;
    double delta = 0.09;
    double temperature = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

// Candidates of one verification pass. parent[i] is the index of the parent
// candidate, empty for depth one. logits[i] belongs to candidate i and
// root_logits to the root; a candidate is judged by its parent's logits.
struct VerifyInput {
    std::vector<std::optional<std::size_t>> parent;
    std::vector<std::size_t> rank;
    std::vector<TokenId> token;
    std::vector<std::span<const float>> logits;
    std::span<const float> root_logits;
};

// Longest chain of accepted candidates, ties to the smallest rank sequence.
std::vector<std::size_t> verify_exact(const VerifyInput & in);
std::vector<std::size_t> verify_typical(const VerifyInput & in, double epsilon, double delta, double temperature);

// min(epsilon, delta * exp(-H(probs)))
double typical_threshold(std::span<const float> probs, double epsilon, double delta);

struct RunStats {
    std::size_t steps = 0;
    std::size_t committed = 0;
    double wall_ms = 0.0;
    std::vector<std::size_t> per_step_tau;

    double tau_mean() const;
    double tokens_per_s() const;
    nlohmann::json to_json() const;
};

struct StepOutcome {
    std::vector<TokenId> committed;
    std::size_t accepted = 0; // verified candidates; tau = committed.size()
    std::size_t next_state = 0;
    bool finished = false;
};

// One generation. The token the model is known to produce next is held as a
// pending root; each step feeds it together with the current tree, verifies
// the candidates against the root's and each other's logits, commits the
// root plus the accepted path and takes the next root from the last
// accepted position.
class DecodeSession {
public:
    DecodeSession(const Model & model, const PromptTokenBank & bank, SparseTree tree, VerifyConfig verify = {});

    void prefill(std::span<const TokenId> prompt);
    // `limit` caps the tokens committed by this step.
    StepOutcome decode_step(std::size_t limit = std::numeric_limits<std::size_t>::max());

    const std::vector<TokenId> & tokens() const noexcept { return tokens_; }
    std::size_t prompt_len() const noexcept { return prompt_len_; }
    std::size_t state() const noexcept { return state_; }
    TokenId pending_root() const noexcept { return root_; }
    const KVCache & cache() const noexcept { return cache_; }
    // The input the next decode step would feed, without running it.
    ForwardRequest step_request() const;
    const RunStats & stats() const noexcept { return stats_; }
    RunStats & mutable_stats() noexcept { return stats_; }
    bool finished() const noexcept { return finished_; }
    const std::set<TokenId> & stop_tokens() const noexcept { return stop_; }
    void set_stop_tokens(std::set<TokenId> stop) { stop_ = std::move(stop); }

private:
    struct StepInput {
        ForwardRequest request;
        std::vector<std::optional<std::size_t>> first_row; // per tree node
    };

    StepInput build_step_input() const;
    // Ranked guesses per distance from the prompt chain starting at row
    // `first_chain_row` of `logits`.
    void take_guesses(const Matrix & logits, std::size_t first_chain_row, std::size_t chain_len);
    TokenId choose_next(std::span<const float> logits);

    const Model * model_;
    const PromptTokenBank * bank_;
    SparseTree tree_;
    VerifyConfig verify_;
    EptLayout layout_;
    std::size_t max_rank_ = 1;
    KVCache cache_;
    std::vector<TokenId> tokens_;
    std::size_t prompt_len_ = 0;
    TokenId root_ = 0;
    std::size_t state_ = 0;
    std::vector<std::vector<TokenId>> guesses_;
    std::set<TokenId> stop_ = {kEosToken};
    std::mt19937_64 rng_;
    RunStats stats_;
    bool prefilled_ = false;
    bool finished_ = false;
};

struct Generation {
    std::vector<TokenId> tokens; // generated tokens only
    RunStats stats;
};

Generation generate(DecodeSession & session, std::size_t max_new);
Generation generate(DecodeSession & session, std::size_t max_new, const std::set<TokenId> & stop);

// Plain greedy decoding with the KV cache, one token per forward pass.
Generation vanilla_generate(const Model & model, std::span<const TokenId> prompt, std::size_t max_new,
                            const std::set<TokenId> & stop = {kEosToken});

// Tokens ordered by descending logit, ties by smaller id; the first `k`.
std::vector<TokenId> top_k_tokens(std::span<const float> logits, std::size_t k);

} // namespace ppd
