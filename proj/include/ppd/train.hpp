#pragma once

#include "ppd/graph.hpp"
#include "ppd/model.hpp"
#include "ppd/prompt.hpp"
#include "ppd/tree.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ppd {

struct TrainConfig {
    std::size_t epochs = 1;
    std::size_t batch_size = 8;
    double lr_start = 0.01;
    double alpha = 0.8;
    std::size_t max_context = 128;
    std::uint64_t seed = 7;
    std::size_t n_insertions = 4;
    KlDirection direction = KlDirection::StudentFirst;

    void validate(const ModelConfig & model) const;
};

// A training sequence and the context lengths at which prompt chains are
// inserted. Chain d of insertion i sits at position i - 1 + d and is
// distilled towards the frozen model's distribution at that position.
struct DistillExample {
    std::vector<TokenId> tokens;
    std::vector<std::size_t> insertions;
};

// Insertion points are marginally uniform on [1, len - m] and pairwise more
// than m apart. Sequences with len <= m are skipped and counted.
std::vector<DistillExample> prepare_batch(std::span<const std::vector<TokenId>> sequences, std::size_t m,
                                          std::size_t n_insertions, std::mt19937_64 & rng,
                                          std::size_t * skipped = nullptr);

// Softmax of the frozen model's causal logits, one row per position.
Matrix teacher_logits(const Model & model, std::span<const TokenId> sequence);

// (1/N) sum_i KL_i * alpha^(i-1) over the N distance pairs.
double kd_loss(std::span<const std::vector<float>> student, std::span<const std::vector<float>> teacher, double alpha,
               KlDirection direction = KlDirection::StudentFirst);

double cosine_lr(double lr_start, std::size_t step, std::size_t total_steps);

struct LossRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct BatchLoss {
    double loss = 0.0;
    Matrix grad; // d loss / d bank.embeddings
    std::size_t insertions = 0;
};

// Loss and bank gradient for a batch, every chain distilled in one pass per
// sequence. Model parameters enter the graph as constants.
BatchLoss batch_loss(const Model & model, const PromptTokenBank & bank, std::span<const DistillExample> batch,
                     double alpha, KlDirection direction);

struct TrainResult {
    PromptTokenBank bank;
    std::vector<LossRecord> losses;
    std::size_t skipped = 0;
};

using StepCallback = std::function<void(const LossRecord &)>;

// Plain SGD with a cosine-annealed learning rate, no warmup.
TrainResult train_bank(const Model & model, const PromptTokenBank & bank,
                       std::span<const std::vector<TokenId>> sequences, const TrainConfig & config,
                       const StepCallback & on_step = {});

void write_loss_csv(const std::string & path, std::span<const LossRecord> losses);

enum class AccuracyTarget {
    Corpus,        // the token that actually follows in the text
    ModelGreedy,   // the frozen model's greedy prediction at that position
};

struct AccuracyReport {
    AcceptanceProfile profile;
    std::vector<std::vector<double>> accumulative; // A[d-1][k-1]
    std::size_t samples = 0;                       // evaluated positions per distance
};

AccuracyReport eval_accuracy(const Model & model, const PromptTokenBank & bank,
                             std::span<const std::vector<TokenId>> sequences, std::size_t K,
                             AccuracyTarget target = AccuracyTarget::Corpus);

struct PretrainConfig {
    std::size_t steps = 400;
    std::size_t batch_size = 8;
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 11;
};

// Next-token cross-entropy training of every model parameter with Adam and a
// cosine-annealed learning rate. Used to give the frozen base model something
// to predict before prompt tokens are distilled from it.
std::vector<LossRecord> pretrain(Model & model, std::span<const std::vector<TokenId>> sequences,
                                 const PretrainConfig & config, const StepCallback & on_step = {});

} // namespace ppd
