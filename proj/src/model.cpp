#include "ppd/model.hpp"

#include "ppd/container.hpp"
#include "ppd/errors.hpp"

#include <random>

namespace ppd {

namespace {

constexpr float kLayerNormEps = 1e-5f;

std::string layer_name(std::size_t l, const char * suffix) {
    return "blocks." + std::to_string(l) + "." + suffix;
}

nlohmann::json config_to_json(const ModelConfig & c) {
    return {{"n_layers", c.n_layers}, {"d_model", c.d_model},     {"n_heads", c.n_heads},
            {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions},
            {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json & j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.d_ff = j.at("d_ff").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_positions = j.at("max_positions").get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
    return c;
}

} // namespace

void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0) {
        throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    }
    if (vocab_size < kByteVocab) {
        throw ConfigError("vocab_size must be at least " + std::to_string(kByteVocab));
    }
    if (max_positions == 0) {
        throw ConfigError("max_positions must be positive");
    }
}

Model::Model(ModelConfig config, TensorMap tensors) : config_(config), tensors_(std::move(tensors)) {
    config_.validate();
    const auto shapes = expected_tensor_shapes(config_);
    if (shapes.size() != tensors_.size()) {
        throw FormatError("model expects " + std::to_string(shapes.size()) + " tensors, got " +
                          std::to_string(tensors_.size()));
    }
    for (const auto & [name, shape] : shapes) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) {
            throw FormatError("missing tensor '" + name + "'");
        }
        if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
            throw FormatError("tensor '" + name + "' has shape " + std::to_string(it->second.rows()) + "x" +
                              std::to_string(it->second.cols()));
        }
    }
}

const Matrix & Model::at(const std::string & name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw ConfigError("no tensor named '" + name + "'");
    }
    return it->second;
}

std::size_t Model::parameter_count() const {
    std::size_t total = 0;
    for (const auto & [name, m] : tensors_) {
        total += m.size();
    }
    return total;
}

std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> expected_tensor_shapes(
    const ModelConfig & c) {
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> out;
    out.push_back({"tok_emb", {c.vocab_size, c.d_model}});
    out.push_back({"pos_emb", {c.max_positions, c.d_model}});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        out.push_back({layer_name(l, "ln1.gain"), {1, c.d_model}});
        out.push_back({layer_name(l, "ln1.bias"), {1, c.d_model}});
        out.push_back({layer_name(l, "attn.wq"), {c.d_model, c.d_model}});
        out.push_back({layer_name(l, "attn.wk"), {c.d_model, c.d_model}});
        out.push_back({layer_name(l, "attn.wv"), {c.d_model, c.d_model}});
        out.push_back({layer_name(l, "attn.wo"), {c.d_model, c.d_model}});
        out.push_back({layer_name(l, "ln2.gain"), {1, c.d_model}});
        out.push_back({layer_name(l, "ln2.bias"), {1, c.d_model}});
        out.push_back({layer_name(l, "ffn.w1"), {c.d_model, c.d_ff}});
        out.push_back({layer_name(l, "ffn.b1"), {1, c.d_ff}});
        out.push_back({layer_name(l, "ffn.w2"), {c.d_ff, c.d_model}});
        out.push_back({layer_name(l, "ffn.b2"), {1, c.d_model}});
    }
    out.push_back({"ln_f.gain", {1, c.d_model}});
    out.push_back({"ln_f.bias", {1, c.d_model}});
    out.push_back({"lm_head", {c.d_model, c.vocab_size}});
    return out;
}

Model init_model(const ModelConfig & config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<float> normal(0.0f, 0.02f);
    TensorMap tensors;
    for (const auto & [name, shape] : expected_tensor_shapes(config)) {
        Matrix m(shape.first, shape.second);
        const bool is_gain = name.ends_with(".gain");
        const bool is_bias = name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2");
        if (is_gain) {
            m.fill(1.0f);
        } else if (!is_bias) {
            for (auto & v : m.data()) {
                v = normal(rng);
            }
        }
        tensors.emplace(name, std::move(m));
    }
    return Model(config, std::move(tensors));
}

KVCache::KVCache(std::size_t n_layers, std::size_t d_model, std::size_t capacity)
    : capacity_(capacity), keys_(n_layers, Matrix(0, d_model)), values_(n_layers, Matrix(0, d_model)) {}

void KVCache::append_speculative(const std::vector<Matrix> & layer_keys, const std::vector<Matrix> & layer_values,
                                 std::span<const std::int32_t> positions) {
    if (layer_keys.size() != keys_.size() || layer_values.size() != values_.size()) {
        throw ShapeError("KVCache: layer count mismatch");
    }
    if (positions_.size() + positions.size() > capacity_) {
        throw CapacityError("KV cache overflow: " + std::to_string(positions_.size() + positions.size()) +
                            " rows exceed capacity " + std::to_string(capacity_));
    }
    for (std::size_t l = 0; l < keys_.size(); ++l) {
        if (layer_keys[l].rows() != positions.size() || layer_values[l].rows() != positions.size()) {
            throw ShapeError("KVCache: row count mismatch");
        }
        keys_[l].append_rows(layer_keys[l]);
        values_[l].append_rows(layer_values[l]);
    }
    positions_.insert(positions_.end(), positions.begin(), positions.end());
}

void KVCache::commit(std::span<const std::size_t> keep) {
    const std::size_t spec = speculative_len();
    std::size_t dst = committed_;
    std::size_t prev = 0;
    bool first = true;
    for (std::size_t offset : keep) {
        if (offset >= spec || (!first && offset <= prev)) {
            throw ShapeError("KVCache::commit: offsets must be increasing and inside the speculative block");
        }
        first = false;
        prev = offset;
        const std::size_t src = committed_ + offset;
        if (src != dst) {
            for (std::size_t l = 0; l < keys_.size(); ++l) {
                auto ks = keys_[l].row(src);
                std::copy(ks.begin(), ks.end(), keys_[l].row(dst).begin());
                auto vs = values_[l].row(src);
                std::copy(vs.begin(), vs.end(), values_[l].row(dst).begin());
            }
            positions_[dst] = positions_[src];
        }
        ++dst;
    }
    for (std::size_t l = 0; l < keys_.size(); ++l) {
        keys_[l].resize_rows(dst);
        values_[l].resize_rows(dst);
    }
    positions_.resize(dst);
    committed_ = dst;
}

void KVCache::commit_all() {
    committed_ = positions_.size();
}

void KVCache::discard_speculative() {
    for (std::size_t l = 0; l < keys_.size(); ++l) {
        keys_[l].resize_rows(committed_);
        values_[l].resize_rows(committed_);
    }
    positions_.resize(committed_);
}

ParamNodes bind_parameters(Graph & graph, const Model & model, bool trainable) {
    ParamNodes nodes;
    for (const auto & [name, m] : model.tensors()) {
        nodes.emplace(name, trainable ? graph.leaf(m, true) : graph.constant_ref(m));
    }
    return nodes;
}

GraphForward forward_graph(Graph & graph, const Model & model, const ForwardRequest & request,
                           const KVCache * cache, std::optional<NodeId> embeddings,
                           std::span<const std::size_t> logit_rows, const ParamNodes * params) {
    const ModelConfig & cfg = model.config();
    const std::size_t n = request.entries.size();
    const std::size_t n_cached = cache != nullptr ? cache->total_len() : 0;
    if (n == 0) {
        throw ShapeError("forward: request has no entries");
    }
    if (request.position_ids.size() != n) {
        throw ShapeError("forward: " + std::to_string(request.position_ids.size()) + " position ids for " +
                         std::to_string(n) + " entries");
    }
    if (request.additive_mask.rows() != n || request.additive_mask.cols() != n_cached + n) {
        throw ShapeError("forward: mask must be " + std::to_string(n) + "x" + std::to_string(n_cached + n));
    }
    if (cache != nullptr && n_cached + n > cache->capacity()) {
        throw CapacityError("KV cache overflow: " + std::to_string(n_cached + n) + " rows exceed capacity " +
                            std::to_string(cache->capacity()));
    }

    ParamNodes local;
    if (params == nullptr) {
        local = bind_parameters(graph, model, false);
        params = &local;
    }
    auto p = [&](const std::string & name) { return params->at(name); };

    std::vector<RowRef> tok_rows(n);
    std::vector<RowRef> pos_rows(n);
    for (std::size_t i = 0; i < n; ++i) {
        const InputEntry & e = request.entries[i];
        if (e.kind == InputEntry::Kind::Token) {
            if (e.index < 0 || static_cast<std::size_t>(e.index) >= cfg.vocab_size) {
                throw DomainError("forward: token id " + std::to_string(e.index) + " outside the vocabulary");
            }
            tok_rows[i] = {p("tok_emb"), static_cast<std::size_t>(e.index)};
        } else {
            if (!embeddings) {
                throw ShapeError("forward: embedding entry without an embedding table");
            }
            if (e.index < 0 || static_cast<std::size_t>(e.index) >= graph.value(*embeddings).rows()) {
                throw ShapeError("forward: embedding row " + std::to_string(e.index) + " out of range");
            }
            tok_rows[i] = {*embeddings, static_cast<std::size_t>(e.index)};
        }
        const std::int32_t pos = request.position_ids[i];
        if (pos < 0 || static_cast<std::size_t>(pos) >= cfg.max_positions) {
            throw CapacityError("forward: position " + std::to_string(pos) + " exceeds max_positions " +
                                std::to_string(cfg.max_positions));
        }
        pos_rows[i] = {p("pos_emb"), static_cast<std::size_t>(pos)};
    }

    NodeId h = graph.add(graph.gather_rows(tok_rows, cfg.d_model), graph.gather_rows(pos_rows, cfg.d_model));

    GraphForward out;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const NodeId a = graph.layer_norm(h, p(layer_name(l, "ln1.gain")), p(layer_name(l, "ln1.bias")), kLayerNormEps);
        const NodeId q = graph.matmul(a, p(layer_name(l, "attn.wq")));
        const NodeId k = graph.matmul(a, p(layer_name(l, "attn.wk")));
        const NodeId v = graph.matmul(a, p(layer_name(l, "attn.wv")));
        out.keys.push_back(k);
        out.values.push_back(v);
        NodeId k_all = k;
        NodeId v_all = v;
        if (n_cached > 0) {
            k_all = graph.concat_rows(graph.constant_ref(cache->keys(l)), k);
            v_all = graph.concat_rows(graph.constant_ref(cache->values(l)), v);
        }
        const NodeId att = graph.attention(q, k_all, v_all, request.additive_mask, cfg.n_heads);
        h = graph.add(h, graph.matmul(att, p(layer_name(l, "attn.wo"))));

        const NodeId b = graph.layer_norm(h, p(layer_name(l, "ln2.gain")), p(layer_name(l, "ln2.bias")), kLayerNormEps);
        const NodeId f1 = graph.gelu(graph.add_row(graph.matmul(b, p(layer_name(l, "ffn.w1"))), p(layer_name(l, "ffn.b1"))));
        const NodeId f2 = graph.add_row(graph.matmul(f1, p(layer_name(l, "ffn.w2"))), p(layer_name(l, "ffn.b2")));
        h = graph.add(h, f2);
    }

    NodeId hf = graph.layer_norm(h, p("ln_f.gain"), p("ln_f.bias"), kLayerNormEps);
    if (!logit_rows.empty()) {
        std::vector<RowRef> sel;
        sel.reserve(logit_rows.size());
        for (std::size_t r : logit_rows) {
            if (r >= n) {
                throw ShapeError("forward: logit row " + std::to_string(r) + " out of range");
            }
            sel.push_back({hf, r});
        }
        hf = graph.gather_rows(sel, cfg.d_model);
    }
    out.logits = graph.matmul(hf, p("lm_head"));
    return out;
}

Matrix forward(const Model & model, const ForwardRequest & request, KVCache & cache, const Matrix * embeddings) {
    Graph graph;
    std::optional<NodeId> emb;
    if (embeddings != nullptr) {
        emb = graph.constant_ref(*embeddings);
    }
    const GraphForward fw = forward_graph(graph, model, request, &cache, emb);
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
    for (std::size_t l = 0; l < fw.keys.size(); ++l) {
        keys.push_back(graph.value(fw.keys[l]));
        values.push_back(graph.value(fw.values[l]));
    }
    cache.append_speculative(keys, values, request.position_ids);
    return graph.value(fw.logits);
}

Matrix causal_mask(std::size_t n_cached, std::size_t n_new) {
    Matrix mask(n_new, n_cached + n_new);
    for (std::size_t i = 0; i < n_new; ++i) {
        for (std::size_t j = n_cached + i + 1; j < n_cached + n_new; ++j) {
            mask(i, j) = kMaskBlocked;
        }
    }
    return mask;
}

TokenId greedy_next(std::span<const float> logits_row) {
    return static_cast<TokenId>(argmax(logits_row));
}

void save_checkpoint(const Model & model, const std::string & path) {
    std::vector<std::pair<std::string, const Matrix *>> tensors;
    for (const auto & [name, shape] : expected_tensor_shapes(model.config())) {
        tensors.emplace_back(name, &model.at(name));
    }
    write_container(path, {{"config", config_to_json(model.config())}}, tensors);
}

Model load_checkpoint(const std::string & path) {
    Container c = read_container(path);
    if (!c.header.contains("config")) {
        throw FormatError(path + ": not a model checkpoint (no config)");
    }
    const ModelConfig config = config_from_json(c.header["config"]);
    TensorMap tensors;
    for (auto & [name, m] : c.tensors) {
        if (!tensors.emplace(name, std::move(m)).second) {
            throw FormatError(path + ": tensor '" + name + "' appears twice");
        }
    }
    try {
        config.validate();
    } catch (const ConfigError & e) {
        throw FormatError(path + ": " + e.what());
    }
    return Model(config, std::move(tensors));
}

} // namespace ppd
