#pragma once

#include "ppd/model.hpp"
#include "ppd/prompt.hpp"
#include "ppd/train.hpp"
#include "ppd/tree.hpp"

#include <random>
#include <vector>

namespace ppd::testing {

ModelConfig tiny_config(std::uint64_t seed = 1, std::size_t n_layers = 1, std::size_t d_model = 16,
                        std::size_t n_heads = 2, std::size_t d_ff = 32, std::size_t max_positions = 96);

// Model whose weights are scaled up so that its greedy output depends on the
// context; the default initialisation is close to a constant function.
Model textured_model(const ModelConfig & config, float scale = 12.0f);

std::vector<TokenId> random_tokens(std::mt19937_64 & rng, std::size_t n, bool with_bos = true);

// Random profile with rows summing to at most `mass` and ranks non-increasing.
AcceptanceProfile random_profile(std::mt19937_64 & rng, std::size_t m, std::size_t K, double mass = 0.95);

// Double-precision re-implementation of the transformer used as an oracle.
// Rows attend where mask(i, j) == 0.
std::vector<std::vector<double>> reference_logits(const Model & model, const std::vector<std::vector<double>> & inputs,
                                                  const std::vector<std::size_t> & positions,
                                                  const std::vector<std::vector<bool>> & visible);

// The distillation loss of `batch` recomputed in double precision from
// scratch: one joint pass over the real tokens and every prompt chain.
double reference_kd_loss(const Model & model, const std::vector<std::vector<double>> & bank_rows, std::size_t m,
                         std::size_t n_ept, MaskMode mode, std::span<const DistillExample> batch, double alpha,
                         KlDirection direction);

// Amortized acceptance of a tree by outcome enumeration and a dense linear
// solve for the stationary vector, independent of the library code path.
double reference_R(const SparseTree & tree, const AcceptanceProfile & profile);

// Removes random tail prompt tokens from candidate chains (never the root
// chain) until `budget` prompt nodes remain.
SparseTree random_pruning(std::mt19937_64 & rng, const SparseTree & full, std::size_t budget);

// Best R over every tree of exactly n nodes: ordered candidate trees of depth
// at most m with ranks 1..k among siblings, a root chain of length m and all
// chain-length assignments in 0..m for the candidates.
double exhaustive_best_R(std::size_t n, const AcceptanceProfile & profile, std::size_t m);

} // namespace ppd::testing
