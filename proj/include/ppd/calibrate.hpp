#pragma once

#include "ppd/model.hpp"
#include "ppd/prompt.hpp"
#include "ppd/tree.hpp"

#include <json.hpp>

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace ppd {

struct LatencySample {
    double median_s = 0.0;
    double mad_s = 0.0; // median absolute deviation
    std::size_t reps = 0;
};

struct LatencyCurve {
    std::map<std::size_t, LatencySample> samples;
    // One-token forward pass with the same cache, used to normalise speedups.
    LatencySample baseline;
    std::vector<std::string> warnings;
};

using TauCurve = std::map<std::size_t, double>;

constexpr std::size_t kMinLatencyReps = 30;
constexpr std::size_t kWarmupPasses = 5;

std::vector<std::size_t> default_calibration_grid();

// Times one decode-step forward pass per size on a fixed prompt, using the
// optimal tree of that size. Median over `reps` warm runs after the warmup.
LatencyCurve profile_latency(const Model & model, const PromptTokenBank & bank, const AcceptanceProfile & profile,
                             const std::set<std::size_t> & sizes, std::size_t reps,
                             std::span<const TokenId> prompt);

// Exact-mode generation over the prompts with the optimal tree of each size;
// tau(n) = committed / steps.
TauCurve estimate_tau(const Model & model, const PromptTokenBank & bank, const AcceptanceProfile & profile,
                      const std::set<std::size_t> & sizes, std::span<const std::vector<TokenId>> prompts,
                      std::size_t max_new);

// argmax tau(n) / L(n) over the shared sizes, ties to the smaller n.
std::size_t select_tree_size(const TauCurve & tau, const std::map<std::size_t, double> & latency);
std::size_t select_tree_size(const TauCurve & tau, const LatencyCurve & latency);

struct CalibrationReport {
    std::vector<std::size_t> grid;
    TauCurve tau;
    std::map<std::size_t, double> latency_ms;
    std::map<std::size_t, double> speedup;            // tau / latency_ms
    std::map<std::size_t, double> speedup_normalized; // tau * baseline_ms / latency_ms
    double baseline_ms = 0.0;
    std::size_t selected_n = 0;
    std::string host;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
};

CalibrationReport make_report(const TauCurve & tau, const LatencyCurve & latency);

std::string host_description();

} // namespace ppd
