#include "ppd/decode.hpp"

#include "ppd/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>

namespace ppd {

namespace {

std::vector<float> tempered_probs(std::span<const float> logits, double temperature) {
    std::vector<float> scaled(logits.begin(), logits.end());
    for (auto & v : scaled) {
        v = static_cast<float>(v / temperature);
    }
    return softmax(scaled);
}

// Depth-first search for the longest accepted chain; children are visited in
// rank order and only a strictly longer chain replaces the current best.
std::vector<std::size_t> longest_accepted(const VerifyInput & in, const std::function<bool(std::size_t)> & accept) {
    const std::size_t n = in.parent.size();
    if (in.rank.size() != n || in.token.size() != n || in.logits.size() != n) {
        throw ShapeError("verify: candidate arrays disagree in length");
    }
    std::vector<std::vector<std::size_t>> kids(n + 1);
    for (std::size_t i = 0; i < n; ++i) {
        kids[in.parent[i] ? *in.parent[i] : n].push_back(i);
    }
    for (auto & k : kids) {
        std::sort(k.begin(), k.end(), [&](std::size_t a, std::size_t b) { return in.rank[a] < in.rank[b]; });
    }
    std::function<std::vector<std::size_t>(std::size_t)> best_from = [&](std::size_t node) {
        std::vector<std::size_t> best;
        bool any = false;
        for (std::size_t c : kids[node]) {
            if (!accept(c)) {
                continue;
            }
            std::vector<std::size_t> path = best_from(c);
            path.insert(path.begin(), c);
            if (!any || path.size() > best.size()) {
                best = std::move(path);
                any = true;
            }
        }
        return best;
    };
    return best_from(n);
}

std::chrono::steady_clock::time_point now() {
    return std::chrono::steady_clock::now();
}

double ms_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(now() - start).count();
}

} // namespace

void VerifyConfig::validate() const {
    if (kind == Kind::Typical) {
        if (!(epsilon > 0.0 && epsilon <= 1.0)) {
            throw ConfigError("typical acceptance needs epsilon in (0, 1]");
        }
        if (!(delta > 0.0)) {
            throw ConfigError("typical acceptance needs delta > 0");
        }
        if (!(temperature > 0.0)) {
            throw ConfigError("typical acceptance needs temperature > 0");
        }
    }
}

std::vector<TokenId> top_k_tokens(std::span<const float> logits, std::size_t k) {
    std::vector<TokenId> ids(logits.size());
    std::iota(ids.begin(), ids.end(), 0);
    k = std::min(k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<long>(k), ids.end(), [&](TokenId a, TokenId b) {
        const float la = logits[static_cast<std::size_t>(a)];
        const float lb = logits[static_cast<std::size_t>(b)];
        return la > lb || (la == lb && a < b);
    });
    ids.resize(k);
    return ids;
}

std::vector<std::size_t> verify_exact(const VerifyInput & in) {
    auto parent_logits = [&](std::size_t i) { return in.parent[i] ? in.logits[*in.parent[i]] : in.root_logits; };
    return longest_accepted(in, [&](std::size_t i) { return in.token[i] == greedy_next(parent_logits(i)); });
}

double typical_threshold(std::span<const float> probs, double epsilon, double delta) {
    return std::min(epsilon, delta * std::exp(-entropy(probs)));
}

std::vector<std::size_t> verify_typical(const VerifyInput & in, double epsilon, double delta, double temperature) {
    const std::size_t n = in.parent.size();
    std::vector<std::vector<float>> probs(n + 1);
    std::vector<double> threshold(n + 1, 0.0);
    std::vector<bool> ready(n + 1, false);
    auto prepare = [&](std::size_t slot, std::span<const float> logits) {
        if (!ready[slot]) {
            probs[slot] = tempered_probs(logits, temperature);
            threshold[slot] = typical_threshold(probs[slot], epsilon, delta);
            ready[slot] = true;
        }
    };
    return longest_accepted(in, [&](std::size_t i) {
        const std::size_t slot = in.parent[i] ? *in.parent[i] : n;
        prepare(slot, in.parent[i] ? in.logits[*in.parent[i]] : in.root_logits);
        const auto tok = static_cast<std::size_t>(in.token[i]);
        return tok < probs[slot].size() && probs[slot][tok] > threshold[slot];
    });
}

double RunStats::tau_mean() const {
    return steps == 0 ? 0.0 : static_cast<double>(committed) / static_cast<double>(steps);
}

double RunStats::tokens_per_s() const {
    return wall_ms <= 0.0 ? 0.0 : static_cast<double>(committed) / (wall_ms / 1000.0);
}

nlohmann::json RunStats::to_json() const {
    return {{"steps", steps},       {"committed", committed},         {"tau_mean", tau_mean()},
            {"wall_ms", wall_ms},   {"tokens_per_s", tokens_per_s()}, {"per_step_tau", per_step_tau}};
}

DecodeSession::DecodeSession(const Model & model, const PromptTokenBank & bank, SparseTree tree, VerifyConfig verify)
    : model_(&model),
      bank_(&bank),
      tree_(std::move(tree)),
      verify_(verify),
      layout_(EptLayout::make(bank.m, bank.n_ept)),
      cache_(model.config().n_layers, model.config().d_model, model.config().max_positions),
      rng_(verify.seed) {
    verify_.validate();
    bank.validate(model.config().d_model);
    tree_.validate();
    if (tree_.max_candidate_depth() > bank.m) {
        throw ConfigError("tree speculates " + std::to_string(tree_.max_candidate_depth()) +
                          " tokens ahead but the bank has only " + std::to_string(bank.m) + " prompt tokens");
    }
    for (const TreeNode & n : tree_.nodes()) {
        if (n.kind == NodeKind::Prompt && n.offset > bank.m) {
            throw ConfigError("tree prompt chain is longer than the bank's " + std::to_string(bank.m) + " tokens");
        }
        if (n.kind == NodeKind::Candidate) {
            max_rank_ = std::max(max_rank_, n.rank);
        }
    }
}

TokenId DecodeSession::choose_next(std::span<const float> logits) {
    if (verify_.kind == VerifyConfig::Kind::Exact) {
        return greedy_next(logits);
    }
    const auto probs = tempered_probs(logits, verify_.temperature);
    std::discrete_distribution<int> dist(probs.begin(), probs.end());
    return static_cast<TokenId>(dist(rng_));
}

void DecodeSession::take_guesses(const Matrix & logits, std::size_t first_chain_row, std::size_t chain_len) {
    guesses_.assign(chain_len, {});
    const std::size_t n_ept = bank_->n_ept;
    for (std::size_t o = 0; o < chain_len; ++o) {
        Matrix group(n_ept, logits.cols());
        for (std::size_t j = 0; j < n_ept; ++j) {
            auto src = logits.row(first_chain_row + o * n_ept + j);
            std::copy(src.begin(), src.end(), group.row(j).begin());
        }
        guesses_[o] = top_k_tokens(aggregate_logits(group), max_rank_);
    }
}

void DecodeSession::prefill(std::span<const TokenId> prompt) {
    if (prefilled_) {
        throw ConfigError("session already prefilled");
    }
    if (prompt.empty()) {
        throw ConfigError("prompt is empty");
    }
    const std::size_t n0 = prompt.size();
    const std::size_t chain_len = tree_.chain_length(std::nullopt);
    const std::size_t n_ept = bank_->n_ept;
    const std::size_t chain_rows = chain_len * n_ept;
    if (n0 + chain_len > model_->config().max_positions) {
        throw CapacityError("prompt of " + std::to_string(n0) + " tokens leaves no room under max_positions " +
                            std::to_string(model_->config().max_positions));
    }
    ForwardRequest req;
    for (std::size_t i = 0; i < n0; ++i) {
        req.entries.push_back(InputEntry::token(prompt[i]));
        req.position_ids.push_back(static_cast<std::int32_t>(i));
    }
    for (std::size_t o = 0; o < chain_len; ++o) {
        for (std::size_t j = 0; j < n_ept; ++j) {
            req.entries.push_back(InputEntry::embedding(static_cast<std::int32_t>(bank_->row_index(o, j))));
            req.position_ids.push_back(static_cast<std::int32_t>(n0 - 1 + o + 1));
        }
    }
    const std::size_t rows = n0 + chain_rows;
    req.additive_mask = Matrix(rows, rows, kMaskBlocked);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t context = std::min(r + 1, n0);
        for (std::size_t c = 0; c < context; ++c) {
            req.additive_mask(r, c) = 0.0f;
        }
        if (r >= n0) {
            for (std::size_t c = n0; c < rows; ++c) {
                if (ept_visible(bank_->mask_mode, layout_, r - n0, c - n0)) {
                    req.additive_mask(r, c) = 0.0f;
                }
            }
        }
    }
    const Matrix logits = forward(*model_, req, cache_, &bank_->embeddings);
    std::vector<std::size_t> keep(n0);
    std::iota(keep.begin(), keep.end(), 0);
    cache_.commit(keep);
    tokens_.assign(prompt.begin(), prompt.end());
    prompt_len_ = n0;
    root_ = choose_next(logits.row(n0 - 1));
    take_guesses(logits, n0, chain_len);
    state_ = chain_len;
    prefilled_ = true;
}

DecodeSession::StepInput DecodeSession::build_step_input() const {
    const std::size_t N = cache_.committed_len();
    const std::size_t n_ept = bank_->n_ept;
    const auto & nodes = tree_.nodes();

    // Rows: root, then included nodes in id order; prompt nodes expand to
    // n_ept rows each.
    StepInput input;
    auto & first_row = input.first_row;
    first_row.assign(nodes.size(), std::nullopt);
    ForwardRequest & req = input.request;
    req.entries.push_back(InputEntry::token(root_));
    req.position_ids.push_back(static_cast<std::int32_t>(N));
    auto included = [&](std::optional<std::size_t> host) { return !host || nodes[*host].depth <= state_; };
    for (const TreeNode & n : nodes) {
        if (n.kind == NodeKind::Candidate) {
            if (n.depth > state_) {
                continue;
            }
            first_row[n.id] = req.entries.size();
            req.entries.push_back(InputEntry::token(guesses_[n.depth - 1][n.rank - 1]));
            req.position_ids.push_back(static_cast<std::int32_t>(N + n.depth));
        } else {
            if (!included(n.host)) {
                continue;
            }
            first_row[n.id] = req.entries.size();
            for (std::size_t j = 0; j < n_ept; ++j) {
                req.entries.push_back(InputEntry::embedding(static_cast<std::int32_t>(bank_->row_index(n.offset - 1, j))));
                req.position_ids.push_back(static_cast<std::int32_t>(N + n.depth));
            }
        }
    }
    const std::size_t rows = req.entries.size();
    if (N + rows > model_->config().max_positions ||
        static_cast<std::size_t>(req.position_ids.back()) >= model_->config().max_positions) {
        throw CapacityError("decode step needs " + std::to_string(N + rows) + " cache rows, max_positions is " +
                            std::to_string(model_->config().max_positions));
    }
    req.additive_mask = Matrix(rows, N + rows, kMaskBlocked);
    auto open = [&](std::size_t r, std::size_t new_row) { req.additive_mask(r, N + new_row) = 0.0f; };
    auto open_path = [&](std::size_t r, std::optional<std::size_t> cand) {
        open(r, 0);
        while (cand) {
            open(r, *first_row[*cand]);
            cand = nodes[*cand].parent;
        }
    };
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < N; ++c) {
            req.additive_mask(r, c) = 0.0f;
        }
    }
    open(0, 0);
    for (const TreeNode & n : nodes) {
        if (!first_row[n.id]) {
            continue;
        }
        const std::size_t base = *first_row[n.id];
        if (n.kind == NodeKind::Candidate) {
            open_path(base, n.id);
            continue;
        }
        const std::vector<std::size_t> chain = tree_.chain(n.host);
        for (std::size_t j = 0; j < n_ept; ++j) {
            const std::size_t r = base + j;
            open_path(r, n.host);
            const std::size_t from = layout_.index(n.offset - 1, j);
            for (std::size_t other : chain) {
                const TreeNode & o = nodes[other];
                for (std::size_t j2 = 0; j2 < n_ept; ++j2) {
                    if (ept_visible(bank_->mask_mode, layout_, from, layout_.index(o.offset - 1, j2))) {
                        open(r, *first_row[other] + j2);
                    }
                }
            }
        }
    }

    return input;
}

ForwardRequest DecodeSession::step_request() const {
    if (!prefilled_) {
        throw ConfigError("step_request before prefill");
    }
    return build_step_input().request;
}

StepOutcome DecodeSession::decode_step(std::size_t limit) {
    if (!prefilled_) {
        throw ConfigError("decode_step before prefill");
    }
    StepOutcome outcome;
    if (finished_ || limit == 0) {
        outcome.finished = finished_;
        outcome.next_state = state_;
        return outcome;
    }
    StepInput input = build_step_input();
    const ForwardRequest & req = input.request;
    const auto & first_row = input.first_row;
    const auto & nodes = tree_.nodes();
    const Matrix logits = forward(*model_, req, cache_, &bank_->embeddings);

    VerifyInput vin;
    std::vector<std::size_t> cand_ids;
    std::vector<int> vin_index(nodes.size(), -1);
    for (const TreeNode & n : nodes) {
        if (n.kind != NodeKind::Candidate || !first_row[n.id]) {
            continue;
        }
        vin_index[n.id] = static_cast<int>(cand_ids.size());
        cand_ids.push_back(n.id);
        vin.parent.push_back(n.parent ? std::optional<std::size_t>(static_cast<std::size_t>(vin_index[*n.parent]))
                                      : std::nullopt);
        vin.rank.push_back(n.rank);
        vin.token.push_back(req.entries[*first_row[n.id]].index);
        vin.logits.push_back(logits.row(*first_row[n.id]));
    }
    vin.root_logits = logits.row(0);
    const std::vector<std::size_t> accepted = verify_.kind == VerifyConfig::Kind::Exact
                                                  ? verify_exact(vin)
                                                  : verify_typical(vin, verify_.epsilon, verify_.delta, verify_.temperature);

    // Commit the root and the accepted path, cut at a stop token or the limit.
    std::vector<std::size_t> keep_rows = {0};
    std::vector<std::optional<std::size_t>> keep_nodes = {std::nullopt};
    outcome.committed.push_back(root_);
    for (std::size_t a : accepted) {
        keep_rows.push_back(*first_row[cand_ids[a]]);
        keep_nodes.push_back(cand_ids[a]);
        outcome.committed.push_back(vin.token[a]);
    }
    outcome.accepted = accepted.size();
    std::size_t cut = outcome.committed.size();
    for (std::size_t i = 0; i < outcome.committed.size(); ++i) {
        if (stop_.contains(outcome.committed[i])) {
            cut = i + 1;
            finished_ = true;
            break;
        }
    }
    cut = std::min(cut, limit);
    outcome.committed.resize(cut);
    keep_rows.resize(cut);
    keep_nodes.resize(cut);
    cache_.commit(keep_rows);
    tokens_.insert(tokens_.end(), outcome.committed.begin(), outcome.committed.end());

    const std::optional<std::size_t> last = keep_nodes.back();
    root_ = choose_next(logits.row(keep_rows.back()));
    const std::size_t chain_len = tree_.chain_length(last);
    if (chain_len > 0) {
        take_guesses(logits, *first_row[tree_.chain(last).front()], chain_len);
    } else {
        guesses_.clear();
    }
    state_ = chain_len;

    stats_.steps += 1;
    stats_.committed += outcome.committed.size();
    stats_.per_step_tau.push_back(outcome.committed.size());
    outcome.next_state = state_;
    outcome.finished = finished_;
    return outcome;
}

Generation generate(DecodeSession & session, std::size_t max_new) {
    return generate(session, max_new, session.stop_tokens());
}

Generation generate(DecodeSession & session, std::size_t max_new, const std::set<TokenId> & stop) {
    session.set_stop_tokens(stop);
    const auto start = now();
    const std::size_t before = session.tokens().size();
    std::size_t produced = 0;
    while (produced < max_new && !session.finished()) {
        const StepOutcome out = session.decode_step(max_new - produced);
        produced += out.committed.size();
    }
    Generation g;
    g.tokens.assign(session.tokens().begin() + static_cast<long>(before), session.tokens().end());
    session.mutable_stats().wall_ms += ms_since(start);
    g.stats = session.stats();
    return g;
}

Generation vanilla_generate(const Model & model, std::span<const TokenId> prompt, std::size_t max_new,
                            const std::set<TokenId> & stop) {
    if (prompt.empty()) {
        throw ConfigError("prompt is empty");
    }
    const auto start = now();
    Generation g;
    if (max_new == 0) {
        return g;
    }
    KVCache cache(model.config().n_layers, model.config().d_model, model.config().max_positions);
    ForwardRequest req;
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        req.entries.push_back(InputEntry::token(prompt[i]));
        req.position_ids.push_back(static_cast<std::int32_t>(i));
    }
    req.additive_mask = causal_mask(0, prompt.size());
    Matrix logits = forward(model, req, cache);
    cache.commit_all();
    std::span<const float> last = logits.row(logits.rows() - 1);
    while (true) {
        const TokenId next = greedy_next(last);
        g.tokens.push_back(next);
        g.stats.steps += 1;
        g.stats.committed += 1;
        g.stats.per_step_tau.push_back(1);
        if (g.tokens.size() >= max_new || stop.contains(next)) {
            break;
        }
        ForwardRequest step;
        step.entries = {InputEntry::token(next)};
        step.position_ids = {static_cast<std::int32_t>(cache.committed_len())};
        step.additive_mask = causal_mask(cache.committed_len(), 1);
        logits = forward(model, step, cache);
        cache.commit_all();
        last = logits.row(0);
    }
    g.stats.wall_ms = ms_since(start);
    return g;
}

} // namespace ppd
