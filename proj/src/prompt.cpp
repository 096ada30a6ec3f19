#include "ppd/prompt.hpp"

#include "ppd/container.hpp"
#include "ppd/errors.hpp"

#include <random>

namespace ppd {

std::string to_string(MaskMode mode) {
    switch (mode) {
        case MaskMode::Ensemble:
            return "ensemble";
        case MaskMode::DecoderLike:
            return "decoder_like";
        case MaskMode::EncoderLike:
            return "encoder_like";
    }
    return "ensemble";
}

MaskMode mask_mode_from_string(const std::string & text) {
    if (text == "ensemble") {
        return MaskMode::Ensemble;
    }
    if (text == "decoder_like") {
        return MaskMode::DecoderLike;
    }
    if (text == "encoder_like") {
        return MaskMode::EncoderLike;
    }
    throw ConfigError("unknown mask mode '" + text + "' (expected ensemble, decoder_like or encoder_like)");
}

void PromptTokenBank::validate(std::size_t d_model) const {
    if (m == 0 || n_ept == 0) {
        throw ConfigError("prompt bank needs m >= 1 and n_ept >= 1");
    }
    if (embeddings.rows() != rows() || embeddings.cols() != d_model) {
        throw ShapeError("prompt bank embeddings are " + std::to_string(embeddings.rows()) + "x" +
                         std::to_string(embeddings.cols()) + ", expected " + std::to_string(rows()) + "x" +
                         std::to_string(d_model));
    }
    if (!embeddings.all_finite()) {
        throw NumericError("prompt bank has non-finite embeddings", 0.0);
    }
}

PromptTokenBank init_bank(const Model & model, std::size_t m, std::size_t n_ept, std::uint64_t seed, MaskMode mode) {
    if (m == 0 || n_ept == 0) {
        throw ConfigError("prompt bank needs m >= 1 and n_ept >= 1");
    }
    const Matrix & tok = model.at("tok_emb");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, 255);
    PromptTokenBank bank;
    bank.m = m;
    bank.n_ept = n_ept;
    bank.mask_mode = mode;
    bank.embeddings = Matrix(m * n_ept, tok.cols());
    for (std::size_t r = 0; r < bank.rows(); ++r) {
        auto src = tok.row(pick(rng));
        std::copy(src.begin(), src.end(), bank.embeddings.row(r).begin());
    }
    return bank;
}

EptLayout EptLayout::make(std::size_t m, std::size_t n_ept) {
    EptLayout layout;
    layout.m = m;
    layout.n_ept = n_ept;
    for (std::size_t d = 0; d < m; ++d) {
        for (std::size_t j = 0; j < n_ept; ++j) {
            layout.slots.push_back({d, j});
        }
    }
    return layout;
}

bool ept_visible(MaskMode mode, const EptLayout & layout, std::size_t from, std::size_t to) {
    const EptSlot a = layout.slots.at(from);
    const EptSlot b = layout.slots.at(to);
    switch (mode) {
        case MaskMode::Ensemble:
            return a.ept == b.ept && b.prompt <= a.prompt;
        case MaskMode::DecoderLike:
            return to <= from;
        case MaskMode::EncoderLike:
            return to <= from || a.prompt == b.prompt;
    }
    return false;
}

Matrix build_ept_mask(MaskMode mode, const EptLayout & layout, std::size_t context_len) {
    const std::size_t n = layout.slots.size();
    Matrix mask(n, context_len + n);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
            if (!ept_visible(mode, layout, a, b)) {
                mask(a, context_len + b) = kMaskBlocked;
            }
        }
    }
    return mask;
}

std::vector<float> aggregate_logits(const Matrix & per_ept_logits) {
    if (per_ept_logits.rows() == 0) {
        throw ShapeError("aggregate_logits: no rows");
    }
    std::vector<double> acc(per_ept_logits.cols(), 0.0);
    for (std::size_t r = 0; r < per_ept_logits.rows(); ++r) {
        auto row = per_ept_logits.row(r);
        for (std::size_t c = 0; c < acc.size(); ++c) {
            acc[c] += row[c];
        }
    }
    std::vector<float> out(acc.size());
    const double inv = 1.0 / static_cast<double>(per_ept_logits.rows());
    for (std::size_t c = 0; c < acc.size(); ++c) {
        out[c] = static_cast<float>(acc[c] * inv);
    }
    return out;
}

double trainable_ratio(std::size_t m, std::size_t n_ept, std::size_t d_model, std::size_t total_params) {
    if (total_params == 0) {
        throw DomainError("trainable_ratio: model has no parameters");
    }
    return static_cast<double>(m * n_ept * d_model) / static_cast<double>(total_params);
}

void save_bank(const PromptTokenBank & bank, const std::string & path) {
    const nlohmann::json fields = {{"m", bank.m}, {"n_ept", bank.n_ept}, {"mask_mode", to_string(bank.mask_mode)}};
    write_container(path, fields, {{"prompt.embeddings", &bank.embeddings}});
}

PromptTokenBank load_bank(const std::string & path) {
    Container c = read_container(path);
    PromptTokenBank bank;
    try {
        bank.m = c.header.at("m").get<std::size_t>();
        bank.n_ept = c.header.at("n_ept").get<std::size_t>();
        bank.mask_mode = mask_mode_from_string(c.header.at("mask_mode").get<std::string>());
    } catch (const nlohmann::json::exception & e) {
        throw FormatError(path + ": not a prompt bank: " + e.what());
    } catch (const ConfigError & e) {
        throw FormatError(path + ": " + e.what());
    }
    bank.embeddings = c.tensor("prompt.embeddings");
    if (bank.m == 0 || bank.n_ept == 0 || bank.embeddings.rows() != bank.rows()) {
        throw FormatError(path + ": bank header disagrees with its embedding table");
    }
    return bank;
}

} // namespace ppd
