#pragma once

#include "ppd/model.hpp"
#include "ppd/numerics.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ppd {

enum class MaskMode { Ensemble, DecoderLike, EncoderLike };

std::string to_string(MaskMode mode);
MaskMode mask_mode_from_string(const std::string & text);

// The only trainable state: m prompt tokens, each backed by n_ept embedding
// rows laid out prompt-major (row = d * n_ept + j, both zero-based).
struct PromptTokenBank {
    std::size_t m = 3;
    std::size_t n_ept = 1;
    Matrix embeddings;
    MaskMode mask_mode = MaskMode::Ensemble;

    std::size_t rows() const noexcept { return m * n_ept; }
    std::size_t row_index(std::size_t d, std::size_t j) const noexcept { return d * n_ept + j; }
    void validate(std::size_t d_model) const;
};

// Each row copies the embedding of a seed-chosen byte token.
PromptTokenBank init_bank(const Model & model, std::size_t m, std::size_t n_ept, std::uint64_t seed,
                          MaskMode mode = MaskMode::Ensemble);

struct EptSlot {
    std::size_t prompt = 0; // zero-based prompt index d
    std::size_t ept = 0;    // zero-based EPT index j
};

struct EptLayout {
    std::size_t m = 0;
    std::size_t n_ept = 0;
    std::vector<EptSlot> slots;

    static EptLayout make(std::size_t m, std::size_t n_ept);
    std::size_t index(std::size_t d, std::size_t j) const noexcept { return d * n_ept + j; }
};

// Whether EPT row `from` may attend to EPT row `to` of the same chain.
bool ept_visible(MaskMode mode, const EptLayout & layout, std::size_t from, std::size_t to);

// (m * n_ept) x (context_len + m * n_ept) additive mask: every EPT row sees
// the whole context, EPT-to-EPT visibility follows `mode`.
Matrix build_ept_mask(MaskMode mode, const EptLayout & layout, std::size_t context_len);

// Arithmetic mean of raw logit rows.
std::vector<float> aggregate_logits(const Matrix & per_ept_logits);

// Trainable parameters as a fraction of the frozen model's parameters.
double trainable_ratio(std::size_t m, std::size_t n_ept, std::size_t d_model, std::size_t total_params);

void save_bank(const PromptTokenBank & bank, const std::string & path);
PromptTokenBank load_bank(const std::string & path);

} // namespace ppd
