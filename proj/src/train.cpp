#include "ppd/train.hpp"

#include "ppd/decode.hpp"
#include "ppd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace ppd {

namespace {

constexpr float kTeacherFloor = 1e-30f;

// Causal pass over the real tokens; leaves their keys/values committed in
// `cache` and returns the logits of every position.
Matrix real_pass(const Model & model, std::span<const TokenId> tokens, KVCache & cache) {
    ForwardRequest req;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        req.entries.push_back(InputEntry::token(tokens[t]));
        req.position_ids.push_back(static_cast<std::int32_t>(t));
    }
    req.additive_mask = causal_mask(0, tokens.size());
    Matrix logits = forward(model, req, cache);
    cache.commit_all();
    return logits;
}

// Prompt chains after `context_len` committed rows, one chain per insertion
// point, each seeing the first `insertion` context rows and its own chain.
ForwardRequest chain_request(const PromptTokenBank & bank, const EptLayout & layout, std::size_t context_len,
                             std::span<const std::size_t> insertions) {
    const std::size_t per_chain = bank.rows();
    const std::size_t rows = insertions.size() * per_chain;
    ForwardRequest req;
    req.additive_mask = Matrix(rows, context_len + rows, kMaskBlocked);
    for (std::size_t q = 0; q < insertions.size(); ++q) {
        const std::size_t i = insertions[q];
        const std::size_t base = q * per_chain;
        for (std::size_t a = 0; a < per_chain; ++a) {
            const EptSlot slot = layout.slots[a];
            req.entries.push_back(InputEntry::embedding(static_cast<std::int32_t>(a)));
            req.position_ids.push_back(static_cast<std::int32_t>(i + slot.prompt));
            for (std::size_t c = 0; c < i; ++c) {
                req.additive_mask(base + a, c) = 0.0f;
            }
            for (std::size_t b = 0; b < per_chain; ++b) {
                if (ept_visible(bank.mask_mode, layout, a, b)) {
                    req.additive_mask(base + a, context_len + base + b) = 0.0f;
                }
            }
        }
    }
    return req;
}

std::vector<float> floored_softmax(std::span<const float> logits) {
    std::vector<float> p = softmax(logits);
    for (auto & v : p) {
        v = std::max(v, kTeacherFloor);
    }
    return p;
}

} // namespace

void TrainConfig::validate(const ModelConfig & model) const {
    if (!(lr_start >= 0.0) || !std::isfinite(lr_start)) {
        throw ConfigError("lr_start must be a finite non-negative number");
    }
    if (!(alpha > 0.0 && alpha <= 1.0)) {
        throw ConfigError("alpha must lie in (0, 1]");
    }
    if (epochs == 0 || batch_size == 0 || n_insertions == 0) {
        throw ConfigError("epochs, batch_size and n_insertions must be positive");
    }
    if (max_context < 2 || max_context > model.max_positions) {
        throw ConfigError("max_context must lie in [2, max_positions]");
    }
}

std::vector<DistillExample> prepare_batch(std::span<const std::vector<TokenId>> sequences, std::size_t m,
                                          std::size_t n_insertions, std::mt19937_64 & rng, std::size_t * skipped) {
    std::vector<DistillExample> out;
    for (const auto & seq : sequences) {
        if (seq.size() <= m) {
            if (skipped != nullptr) {
                ++*skipped;
            }
            continue;
        }
        // Valid points 1..span on a circle of length span: random gaps of at
        // least m + 1 and a uniform rotation make every point marginally
        // uniform while keeping pairs more than m apart.
        const std::size_t span = seq.size() - m;
        const std::size_t count = std::max<std::size_t>(1, std::min(n_insertions, span / (m + 1)));
        const std::size_t slack = count == 1 ? 0 : span - count * (m + 1);
        std::vector<std::size_t> cuts(count - 1);
        std::uniform_int_distribution<std::size_t> cut_dist(0, slack);
        for (auto & c : cuts) {
            c = cut_dist(rng);
        }
        std::sort(cuts.begin(), cuts.end());
        std::uniform_int_distribution<std::size_t> rot_dist(0, span - 1);
        const std::size_t rotation = rot_dist(rng);
        DistillExample ex;
        ex.tokens = seq;
        std::size_t offset = 0;
        std::size_t prev_cut = 0;
        for (std::size_t k = 0; k < count; ++k) {
            ex.insertions.push_back(1 + (rotation + offset) % span);
            if (k + 1 < count) {
                const std::size_t extra = cuts[k] - prev_cut;
                prev_cut = cuts[k];
                offset += (m + 1) + extra;
            }
        }
        std::sort(ex.insertions.begin(), ex.insertions.end());
        out.push_back(std::move(ex));
    }
    return out;
}

Matrix teacher_logits(const Model & model, std::span<const TokenId> sequence) {
    KVCache cache(model.config().n_layers, model.config().d_model, model.config().max_positions);
    const Matrix logits = real_pass(model, sequence, cache);
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto p = softmax(logits.row(r));
        std::copy(p.begin(), p.end(), out.row(r).begin());
    }
    return out;
}

double kd_loss(std::span<const std::vector<float>> student, std::span<const std::vector<float>> teacher, double alpha,
               KlDirection direction) {
    if (student.size() != teacher.size() || student.empty()) {
        throw ShapeError("kd_loss: need matching, non-empty distribution lists");
    }
    double total = 0.0;
    double weight = 1.0;
    for (std::size_t i = 0; i < student.size(); ++i) {
        const double kl = direction == KlDirection::StudentFirst ? kl_divergence(student[i], teacher[i])
                                                                 : kl_divergence(teacher[i], student[i]);
        total += kl * weight;
        weight *= alpha;
    }
    return total / static_cast<double>(student.size());
}

double cosine_lr(double lr_start, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) {
        return lr_start;
    }
    return lr_start * 0.5 *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

BatchLoss batch_loss(const Model & model, const PromptTokenBank & bank, std::span<const DistillExample> batch,
                     double alpha, KlDirection direction) {
    const ModelConfig & cfg = model.config();
    const std::size_t m = bank.m;
    const std::size_t n_ept = bank.n_ept;
    const EptLayout layout = EptLayout::make(m, n_ept);
    BatchLoss out;
    out.grad = Matrix(bank.embeddings.rows(), bank.embeddings.cols());
    for (const auto & ex : batch) {
        out.insertions += ex.insertions.size();
    }
    if (out.insertions == 0) {
        throw DataError("batch has no insertion points");
    }
    const double norm = 1.0 / (static_cast<double>(out.insertions) * static_cast<double>(m));

    for (const auto & ex : batch) {
        const std::size_t L = ex.tokens.size();
        KVCache cache(cfg.n_layers, cfg.d_model, L + ex.insertions.size() * bank.rows());
        const Matrix real_logits = real_pass(model, ex.tokens, cache);

        Graph graph;
        const NodeId emb = graph.leaf(bank.embeddings, true);
        const ForwardRequest req = chain_request(bank, layout, L, ex.insertions);
        const GraphForward fw = forward_graph(graph, model, req, &cache, emb);

        const std::size_t q_count = ex.insertions.size();
        std::vector<std::vector<std::size_t>> groups;
        Matrix targets(q_count * m, cfg.vocab_size);
        std::vector<float> weights;
        for (std::size_t q = 0; q < q_count; ++q) {
            const std::size_t i = ex.insertions[q];
            if (i < 1 || i + m > L) {
                throw DataError("insertion point " + std::to_string(i) + " leaves no room for " + std::to_string(m) +
                                " teacher targets");
            }
            double w = 1.0;
            for (std::size_t d = 0; d < m; ++d) {
                std::vector<std::size_t> g;
                for (std::size_t j = 0; j < n_ept; ++j) {
                    g.push_back(q * bank.rows() + layout.index(d, j));
                }
                groups.push_back(std::move(g));
                const auto t = floored_softmax(real_logits.row(i + d));
                std::copy(t.begin(), t.end(), targets.row(q * m + d).begin());
                weights.push_back(static_cast<float>(w * norm));
                w *= alpha;
            }
        }
        const NodeId student = graph.average_row_groups(fw.logits, std::move(groups));
        const NodeId kl = graph.kl_rows(student, targets, direction);
        const NodeId loss = graph.weighted_sum(kl, weights);
        out.loss += graph.value(loss)(0, 0);
        auto grads = graph.reverse_gradients(loss);
        const Matrix & g = grads.at(emb);
        auto dst = out.grad.data();
        auto src = g.data();
        for (std::size_t k = 0; k < dst.size(); ++k) {
            dst[k] += src[k];
        }
    }
    return out;
}

TrainResult train_bank(const Model & model, const PromptTokenBank & bank,
                       std::span<const std::vector<TokenId>> sequences, const TrainConfig & config,
                       const StepCallback & on_step) {
    config.validate(model.config());
    bank.validate(model.config().d_model);
    if (sequences.empty()) {
        throw DataError("training corpus is empty");
    }
    TrainResult result;
    result.bank = bank;
    std::mt19937_64 rng(config.seed);

    std::vector<std::vector<TokenId>> usable;
    for (const auto & s : sequences) {
        if (s.size() > config.max_context) {
            usable.emplace_back(s.begin(), s.begin() + static_cast<long>(config.max_context));
        } else {
            usable.push_back(s);
        }
    }
    const std::size_t per_epoch = (usable.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total = per_epoch * config.epochs;
    std::vector<std::size_t> order(usable.size());
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
            std::vector<std::vector<TokenId>> batch_seqs;
            for (std::size_t k = b * config.batch_size; k < std::min(usable.size(), (b + 1) * config.batch_size); ++k) {
                batch_seqs.push_back(usable[order[k]]);
            }
            const auto batch = prepare_batch(batch_seqs, bank.m, config.n_insertions, rng, &result.skipped);
            if (batch.empty()) {
                continue;
            }
            const BatchLoss bl = batch_loss(model, result.bank, batch, config.alpha, config.direction);
            if (!std::isfinite(bl.loss) || !bl.grad.all_finite()) {
                throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                                       std::to_string(epoch) + ", loss " + std::to_string(bl.loss) + ")",
                                   bl.loss);
            }
            const double lr = cosine_lr(config.lr_start, step, total);
            auto w = result.bank.embeddings.data();
            auto g = bl.grad.data();
            for (std::size_t k = 0; k < w.size(); ++k) {
                w[k] -= static_cast<float>(lr) * g[k];
            }
            const LossRecord rec{step, epoch, lr, bl.loss};
            result.losses.push_back(rec);
            if (on_step) {
                on_step(rec);
            }
        }
    }
    return result;
}

void write_loss_csv(const std::string & path, std::span<const LossRecord> losses) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot write '" + path + "'");
    }
    out << "step,epoch,lr,loss\n";
    out.precision(9);
    for (const auto & r : losses) {
        out << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss << '\n';
    }
}

AccuracyReport eval_accuracy(const Model & model, const PromptTokenBank & bank,
                             std::span<const std::vector<TokenId>> sequences, std::size_t K, AccuracyTarget target) {
    if (K == 0) {
        throw ConfigError("eval_accuracy needs K >= 1");
    }
    const ModelConfig & cfg = model.config();
    bank.validate(cfg.d_model);
    const std::size_t m = bank.m;
    const std::size_t n_ept = bank.n_ept;
    const EptLayout layout = EptLayout::make(m, n_ept);
    constexpr std::size_t kChunk = 32;

    std::vector<std::vector<std::size_t>> hits(m, std::vector<std::size_t>(K, 0));
    std::size_t samples = 0;
    for (const auto & seq : sequences) {
        const std::size_t L = std::min(seq.size(), cfg.max_positions);
        if (L < m + 2) {
            continue;
        }
        const std::span<const TokenId> tokens(seq.data(), L);
        KVCache cache(cfg.n_layers, cfg.d_model, L + kChunk * bank.rows());
        const Matrix real_logits = real_pass(model, tokens, cache);
        std::vector<std::size_t> points;
        for (std::size_t i = 1; i + m <= L - 1; ++i) {
            points.push_back(i);
        }
        for (std::size_t start = 0; start < points.size(); start += kChunk) {
            const std::size_t end = std::min(points.size(), start + kChunk);
            const std::span<const std::size_t> chunk(points.data() + start, end - start);
            const ForwardRequest req = chain_request(bank, layout, L, chunk);
            const Matrix logits = forward(model, req, cache, &bank.embeddings);
            cache.discard_speculative();
            for (std::size_t q = 0; q < chunk.size(); ++q) {
                const std::size_t i = chunk[q];
                for (std::size_t d = 0; d < m; ++d) {
                    Matrix group(n_ept, cfg.vocab_size);
                    for (std::size_t j = 0; j < n_ept; ++j) {
                        auto src = logits.row(q * bank.rows() + layout.index(d, j));
                        std::copy(src.begin(), src.end(), group.row(j).begin());
                    }
                    const std::vector<float> agg = aggregate_logits(group);
                    // Prompt d + 1 after context length i predicts position i + d + 1.
                    const TokenId truth = target == AccuracyTarget::Corpus ? tokens[i + d + 1]
                                                                           : greedy_next(real_logits.row(i + d));
                    const std::vector<TokenId> ranked = top_k_tokens(agg, K);
                    for (std::size_t k = 0; k < ranked.size(); ++k) {
                        if (ranked[k] == truth) {
                            ++hits[d][k];
                            break;
                        }
                    }
                }
                ++samples;
            }
        }
    }
    if (samples == 0) {
        throw DataError("eval_accuracy: no sequence is long enough to evaluate");
    }
    AccuracyReport report;
    report.samples = samples;
    report.profile.m = m;
    report.profile.K = K;
    report.profile.p.assign(m, std::vector<double>(K, 0.0));
    report.accumulative.assign(m, std::vector<double>(K, 0.0));
    for (std::size_t d = 0; d < m; ++d) {
        std::size_t cumulative = 0;
        for (std::size_t k = 0; k < K; ++k) {
            cumulative += hits[d][k];
            report.accumulative[d][k] = static_cast<double>(cumulative) / static_cast<double>(samples);
            report.profile.p[d][k] = report.accumulative[d][k] - (k == 0 ? 0.0 : report.accumulative[d][k - 1]);
        }
    }
    return report;
}

} // namespace ppd
