#include "ppd/calibrate.hpp"

#include "ppd/decode.hpp"
#include "ppd/errors.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <thread>

namespace ppd {

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename Fn>
LatencySample time_runs(std::size_t reps, Fn && run, std::vector<std::string> & warnings, const std::string & label) {
    using clock = std::chrono::steady_clock;
    for (std::size_t i = 0; i < kWarmupPasses; ++i) {
        run();
    }
    std::vector<double> times;
    times.reserve(reps);
    for (std::size_t i = 0; i < reps; ++i) {
        const auto t0 = clock::now();
        run();
        times.push_back(std::chrono::duration<double>(clock::now() - t0).count());
    }
    LatencySample s;
    s.reps = reps;
    s.median_s = median(times);
    std::vector<double> dev(times.size());
    std::transform(times.begin(), times.end(), dev.begin(), [&](double t) { return std::abs(t - s.median_s); });
    s.mad_s = median(dev);
    const double tick = static_cast<double>(clock::period::num) / static_cast<double>(clock::period::den);
    if (s.median_s < 100.0 * tick) {
        warnings.push_back(label + ": median latency " + std::to_string(s.median_s) +
                           " s is within 100 ticks of the timer resolution");
    }
    return s;
}

} // namespace

std::vector<std::size_t> default_calibration_grid() {
    return {4, 8, 16, 24, 32, 48, 64};
}

LatencyCurve profile_latency(const Model & model, const PromptTokenBank & bank, const AcceptanceProfile & profile,
                             const std::set<std::size_t> & sizes, std::size_t reps,
                             std::span<const TokenId> prompt) {
    if (reps == 0) {
        throw ConfigError("latency profiling needs reps > 0");
    }
    if (reps < kMinLatencyReps) {
        throw ConfigError("latency profiling needs at least " + std::to_string(kMinLatencyReps) + " reps");
    }
    if (sizes.empty()) {
        throw ConfigError("latency profiling needs at least one tree size");
    }
    if (prompt.empty()) {
        throw ConfigError("latency profiling needs a non-empty prompt");
    }
    LatencyCurve curve;
    for (std::size_t n : sizes) {
        DecodeSession session(model, bank, construct_optimal_tree(n, profile, bank.m));
        session.prefill(prompt);
        const ForwardRequest req = session.step_request();
        if (session.cache().committed_len() + req.entries.size() > model.config().max_positions) {
            throw CapacityError("tree of size " + std::to_string(n) + " does not fit after a " +
                                std::to_string(prompt.size()) + "-token prompt");
        }
        KVCache cache = session.cache();
        curve.samples[n] = time_runs(
            reps,
            [&] {
                forward(model, req, cache, &bank.embeddings);
                cache.discard_speculative();
            },
            curve.warnings, "n=" + std::to_string(n));
    }

    KVCache cache(model.config().n_layers, model.config().d_model, model.config().max_positions);
    ForwardRequest pre;
    for (std::size_t t = 0; t < prompt.size(); ++t) {
        pre.entries.push_back(InputEntry::token(prompt[t]));
        pre.position_ids.push_back(static_cast<std::int32_t>(t));
    }
    pre.additive_mask = causal_mask(0, prompt.size());
    forward(model, pre, cache);
    cache.commit_all();
    ForwardRequest one;
    one.entries.push_back(InputEntry::token(prompt.back()));
    one.position_ids.push_back(static_cast<std::int32_t>(prompt.size()));
    one.additive_mask = causal_mask(prompt.size(), 1);
    curve.baseline = time_runs(
        reps,
        [&] {
            forward(model, one, cache);
            cache.discard_speculative();
        },
        curve.warnings, "baseline");
    return curve;
}

TauCurve estimate_tau(const Model & model, const PromptTokenBank & bank, const AcceptanceProfile & profile,
                      const std::set<std::size_t> & sizes, std::span<const std::vector<TokenId>> prompts,
                      std::size_t max_new) {
    std::vector<const std::vector<TokenId> *> usable;
    for (const auto & p : prompts) {
        if (!p.empty()) {
            usable.push_back(&p);
        }
    }
    if (usable.empty()) {
        throw DataError("tau estimation needs at least one non-empty validation prompt");
    }
    if (max_new == 0) {
        throw ConfigError("tau estimation needs max_new > 0");
    }
    TauCurve tau;
    for (std::size_t n : sizes) {
        const SparseTree tree = construct_optimal_tree(n, profile, bank.m);
        std::size_t committed = 0;
        std::size_t steps = 0;
        for (const auto * p : usable) {
            DecodeSession session(model, bank, tree);
            const std::size_t room = model.config().max_positions - std::min(model.config().max_positions, p->size());
            session.prefill(*p);
            const Generation g = generate(session, std::min(max_new, room));
            committed += g.stats.committed;
            steps += g.stats.steps;
        }
        if (steps == 0) {
            throw DataError("tau estimation ran no decode steps");
        }
        tau[n] = static_cast<double>(committed) / static_cast<double>(steps);
    }
    return tau;
}

std::size_t select_tree_size(const TauCurve & tau, const std::map<std::size_t, double> & latency) {
    bool found = false;
    std::size_t best_n = 0;
    double best = 0.0;
    for (const auto & [n, t] : tau) {
        auto it = latency.find(n);
        if (it == latency.end()) {
            continue;
        }
        if (!(it->second > 0.0)) {
            throw DataError("latency at n=" + std::to_string(n) + " is not positive");
        }
        const double ratio = t / it->second;
        if (!found || ratio > best) {
            best = ratio;
            best_n = n;
            found = true;
        }
    }
    if (!found) {
        throw DataError("tau and latency curves share no tree size");
    }
    return best_n;
}

std::size_t select_tree_size(const TauCurve & tau, const LatencyCurve & latency) {
    std::map<std::size_t, double> l;
    for (const auto & [n, s] : latency.samples) {
        l[n] = s.median_s;
    }
    return select_tree_size(tau, l);
}

CalibrationReport make_report(const TauCurve & tau, const LatencyCurve & latency) {
    CalibrationReport r;
    r.selected_n = select_tree_size(tau, latency);
    r.baseline_ms = latency.baseline.median_s * 1000.0;
    for (const auto & [n, s] : latency.samples) {
        auto it = tau.find(n);
        if (it == tau.end()) {
            continue;
        }
        const double ms = s.median_s * 1000.0;
        r.grid.push_back(n);
        r.tau[n] = it->second;
        r.latency_ms[n] = ms;
        r.speedup[n] = it->second / ms;
        r.speedup_normalized[n] = it->second * r.baseline_ms / ms;
    }
    r.host = host_description();
    r.warnings = latency.warnings;
    return r;
}

nlohmann::json CalibrationReport::to_json() const {
    auto keyed = [](const std::map<std::size_t, double> & m) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto & [n, v] : m) {
            j[std::to_string(n)] = v;
        }
        return j;
    };
    return {{"grid", grid},
            {"tau", keyed(tau)},
            {"latency_ms", keyed(latency_ms)},
            {"speedup", keyed(speedup)},
            {"speedup_normalized", keyed(speedup_normalized)},
            {"baseline_latency_ms", baseline_ms},
            {"selected_n", selected_n},
            {"host", host},
            {"warnings", warnings}};
}

std::string host_description() {
    std::string cpu = "unknown cpu";
    std::ifstream in("/proc/cpuinfo");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("model name", 0) == 0) {
            auto colon = line.find(':');
            if (colon != std::string::npos) {
                cpu = line.substr(colon + 2);
            }
            break;
        }
    }
    return cpu + ", " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads";
}

} // namespace ppd
