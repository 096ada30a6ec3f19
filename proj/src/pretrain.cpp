#include "ppd/errors.hpp"
#include "ppd/train.hpp"

#include <algorithm>
#include <cmath>

namespace ppd {

std::vector<LossRecord> pretrain(Model & model, std::span<const std::vector<TokenId>> sequences,
                                 const PretrainConfig & config, const StepCallback & on_step) {
    if (config.steps == 0 || config.batch_size == 0 || !(config.lr > 0.0)) {
        throw ConfigError("pretraining needs positive steps, batch_size and lr");
    }
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        if (sequences[i].size() >= 2) {
            usable.push_back(i);
        }
    }
    if (usable.empty()) {
        throw DataError("pretraining corpus has no sequence of two or more tokens");
    }
    const ModelConfig & cfg = model.config();
    TensorMap & params = model.mutable_tensors();
    TensorMap m1;
    TensorMap m2;
    for (const auto & [name, t] : params) {
        m1.emplace(name, Matrix(t.rows(), t.cols()));
        m2.emplace(name, Matrix(t.rows(), t.cols()));
    }

    std::mt19937_64 rng(config.seed);
    std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
    std::vector<LossRecord> losses;
    for (std::size_t step = 0; step < config.steps; ++step) {
        std::vector<std::size_t> batch(config.batch_size);
        std::size_t n_targets = 0;
        for (auto & b : batch) {
            b = usable[pick(rng)];
            n_targets += std::min(sequences[b].size(), cfg.max_positions) - 1;
        }
        TensorMap grads;
        double loss = 0.0;
        for (std::size_t b : batch) {
            const auto & seq = sequences[b];
            const std::size_t L = std::min(seq.size(), cfg.max_positions);
            Graph graph;
            const ParamNodes nodes = bind_parameters(graph, model, true);
            ForwardRequest req;
            for (std::size_t t = 0; t < L; ++t) {
                req.entries.push_back(InputEntry::token(seq[t]));
                req.position_ids.push_back(static_cast<std::int32_t>(t));
            }
            req.additive_mask = causal_mask(0, L);
            std::vector<std::size_t> rows(L - 1);
            for (std::size_t t = 0; t + 1 < L; ++t) {
                rows[t] = t;
            }
            const GraphForward fw = forward_graph(graph, model, req, nullptr, std::nullopt, rows, &nodes);
            Matrix targets(L - 1, cfg.vocab_size);
            for (std::size_t t = 0; t + 1 < L; ++t) {
                targets(t, static_cast<std::size_t>(seq[t + 1])) = 1.0f;
            }
            // Cross-entropy is KL(one-hot || model) since the one-hot has zero entropy.
            const NodeId kl = graph.kl_rows(fw.logits, targets, KlDirection::TargetFirst);
            const std::vector<float> w(L - 1, static_cast<float>(1.0 / static_cast<double>(n_targets)));
            const NodeId total = graph.weighted_sum(kl, w);
            loss += graph.value(total)(0, 0);
            auto g = graph.reverse_gradients(total);
            for (const auto & [name, id] : nodes) {
                auto it = g.find(id);
                if (it == g.end()) {
                    continue;
                }
                auto [slot, inserted] = grads.try_emplace(name, it->second);
                if (!inserted) {
                    auto dst = slot->second.data();
                    auto src = it->second.data();
                    for (std::size_t k = 0; k < dst.size(); ++k) {
                        dst[k] += src[k];
                    }
                }
            }
        }
        if (!std::isfinite(loss)) {
            throw NumericError("pretraining loss became non-finite at step " + std::to_string(step), loss);
        }
        const double lr = cosine_lr(config.lr, step, config.steps);
        const double t = static_cast<double>(step + 1);
        const double c1 = 1.0 - std::pow(config.beta1, t);
        const double c2 = 1.0 - std::pow(config.beta2, t);
        for (auto & [name, g] : grads) {
            auto w = params.at(name).data();
            auto a = m1.at(name).data();
            auto v = m2.at(name).data();
            auto gs = g.data();
            for (std::size_t k = 0; k < w.size(); ++k) {
                a[k] = static_cast<float>(config.beta1 * a[k] + (1.0 - config.beta1) * gs[k]);
                v[k] = static_cast<float>(config.beta2 * v[k] + (1.0 - config.beta2) * gs[k] * gs[k]);
                const double mh = a[k] / c1;
                const double vh = v[k] / c2;
                w[k] -= static_cast<float>(lr * mh / (std::sqrt(vh) + config.eps));
            }
        }
        const LossRecord rec{step, 1, lr, loss};
        losses.push_back(rec);
        if (on_step) {
            on_step(rec);
        }
    }
    return losses;
}

} // namespace ppd
