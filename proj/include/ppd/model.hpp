#pragma once

#include "ppd/graph.hpp"
#include "ppd/numerics.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ppd {

using TokenId = std::int32_t;

inline constexpr TokenId kBosToken = 256;
inline constexpr TokenId kEosToken = 257;
inline constexpr std::size_t kByteVocab = 258;

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t d_ff = 512;
    std::size_t vocab_size = kByteVocab;
    std::size_t max_positions = 1024;
    std::uint64_t seed = 1234;

    std::size_t head_dim() const { return d_model / n_heads; }
    // Throws ConfigError on an unusable configuration.
    void validate() const;

    friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

using TensorMap = std::map<std::string, Matrix>;

// Frozen decoder-only transformer: learned absolute positions, pre-norm
// blocks, GELU feed-forward, untied output projection.
class Model {
public:
    Model(ModelConfig config, TensorMap tensors);

    const ModelConfig & config() const noexcept { return config_; }
    const TensorMap & tensors() const noexcept { return tensors_; }
    // Mutable access is for base-model pretraining only.
    TensorMap & mutable_tensors() noexcept { return tensors_; }

    const Matrix & at(const std::string & name) const;
    std::size_t parameter_count() const;

private:
    ModelConfig config_;
    TensorMap tensors_;
};

// Deterministic N(0, 0.02) initialization; layer-norm gains start at 1.
Model init_model(const ModelConfig & config);

// Names and shapes every checkpoint of `config` must contain.
std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> expected_tensor_shapes(
    const ModelConfig & config);

// Per-layer key/value rows. Rows [0, committed) are append-only; rows after
// that belong to the current speculative pass.
class KVCache {
public:
    KVCache(std::size_t n_layers, std::size_t d_model, std::size_t capacity);

    std::size_t committed_len() const noexcept { return committed_; }
    std::size_t speculative_len() const noexcept { return positions_.size() - committed_; }
    std::size_t total_len() const noexcept { return positions_.size(); }
    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t n_layers() const noexcept { return keys_.size(); }

    const Matrix & keys(std::size_t layer) const { return keys_.at(layer); }
    const Matrix & values(std::size_t layer) const { return values_.at(layer); }
    const std::vector<std::int32_t> & positions() const noexcept { return positions_; }

    void append_speculative(const std::vector<Matrix> & layer_keys, const std::vector<Matrix> & layer_values,
                            std::span<const std::int32_t> positions);
    // Promotes the listed speculative rows (offsets relative to the start of
    // the speculative block, strictly increasing) and drops the rest.
    void commit(std::span<const std::size_t> keep);
    void commit_all();
    void discard_speculative();

private:
    std::size_t capacity_;
    std::size_t committed_ = 0;
    std::vector<Matrix> keys_;
    std::vector<Matrix> values_;
    std::vector<std::int32_t> positions_;
};

// One input row: an ordinary token, or row `index` of an external embedding
// table (the prompt bank).
struct InputEntry {
    enum class Kind { Token, Embedding };
    Kind kind = Kind::Token;
    std::int32_t index = 0;

    static InputEntry token(TokenId id) { return {Kind::Token, id}; }
    static InputEntry embedding(std::int32_t row) { return {Kind::Embedding, row}; }
};

struct ForwardRequest {
    std::vector<InputEntry> entries;
    std::vector<std::int32_t> position_ids;
    // new entries x (cached rows + new entries), 0 = visible, kMaskBlocked = hidden
    Matrix additive_mask;
};

struct GraphForward {
    NodeId logits;
    std::vector<NodeId> keys;
    std::vector<NodeId> values;
};

using ParamNodes = std::map<std::string, NodeId>;

// Registers every model tensor on `graph`, as constants unless `trainable`.
ParamNodes bind_parameters(Graph & graph, const Model & model, bool trainable);

// Records one forward pass on `graph`. `embeddings` supplies rows for
// Embedding entries and may be a trainable leaf. When `logit_rows` is
// non-empty only those rows are projected to the vocabulary. Without
// `params` the model tensors are bound as constants.
GraphForward forward_graph(Graph & graph, const Model & model, const ForwardRequest & request,
                           const KVCache * cache, std::optional<NodeId> embeddings,
                           std::span<const std::size_t> logit_rows = {}, const ParamNodes * params = nullptr);

// Inference forward: returns logits (entries x vocab) and appends the new
// keys/values to `cache` as speculative rows.
Matrix forward(const Model & model, const ForwardRequest & request, KVCache & cache,
               const Matrix * embeddings = nullptr);

// Causal mask for `n_new` rows appended after `n_cached` visible rows.
Matrix causal_mask(std::size_t n_cached, std::size_t n_new);

TokenId greedy_next(std::span<const float> logits_row);

void save_checkpoint(const Model & model, const std::string & path);
Model load_checkpoint(const std::string & path);

} // namespace ppd
