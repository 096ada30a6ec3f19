#include "ppd/calibrate.hpp"
#include "ppd/corpus.hpp"
#include "ppd/decode.hpp"
#include "ppd/errors.hpp"
#include "ppd/model.hpp"
#include "ppd/prompt.hpp"
#include "ppd/train.hpp"
#include "ppd/tree.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>

using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

// Options of one subcommand. Each is a CLI flag and a key of the JSON config;
// explicit flags win over the config file, which wins over the defaults.
class OptionSet {
public:
    explicit OptionSet(CLI::App * app) : app_(app) {
        app_->add_option("--config", config_path_, "JSON config file");
        app_->add_flag("--print-config", print_config_, "Print the effective config and exit");
    }

    template <typename T>
    void add(const std::string & key, T & ref, const std::string & help) {
        CLI::Option * opt = app_->add_option("--" + key, ref, help)->capture_default_str();
        fields_.push_back({key, opt, [&ref](const json & j) { ref = j.get<T>(); }, [&ref] { return json(ref); }});
    }

    template <typename T>
    void add_flag(const std::string & key, T & ref, const std::string & help) {
        CLI::Option * opt = app_->add_flag("--" + key, ref, help);
        fields_.push_back({key, opt, [&ref](const json & j) { ref = j.get<T>(); }, [&ref] { return json(ref); }});
    }

    // Returns false when only the config was requested.
    bool resolve() {
        if (!config_path_.empty()) {
            json cfg;
            try {
                cfg = json::parse(ppd::read_text_file(config_path_));
            } catch (const json::parse_error & e) {
                throw ppd::ConfigError(config_path_ + ": " + e.what());
            }
            if (!cfg.is_object()) {
                throw ppd::ConfigError(config_path_ + ": config must be a JSON object");
            }
            for (auto it = cfg.begin(); it != cfg.end(); ++it) {
                auto f = std::find_if(fields_.begin(), fields_.end(), [&](const Field & x) { return x.key == it.key(); });
                if (f == fields_.end()) {
                    throw ppd::ConfigError(config_path_ + ": unknown key '" + it.key() + "'");
                }
                if (f->opt->count() == 0) {
                    try {
                        f->set(it.value());
                    } catch (const json::exception & e) {
                        throw ppd::ConfigError(config_path_ + ": bad value for '" + it.key() + "': " + e.what());
                    }
                }
            }
        }
        if (print_config_) {
            std::cout << effective().dump(2) << "\n";
            return false;
        }
        return true;
    }

    json effective() const {
        json j = json::object();
        for (const auto & f : fields_) {
            j[f.key] = f.get();
        }
        return j;
    }

private:
    struct Field {
        std::string key;
        CLI::Option * opt;
        std::function<void(const json &)> set;
        std::function<json()> get;
    };

    CLI::App * app_;
    std::string config_path_;
    bool print_config_ = false;
    std::vector<Field> fields_;
};

json read_json(const std::string & path) {
    try {
        return json::parse(ppd::read_text_file(path));
    } catch (const json::parse_error & e) {
        throw ppd::FormatError(path + ": " + e.what());
    }
}

void write_json(const std::string & path, const json & j) {
    ppd::write_text_file(path, j.dump(2) + "\n");
}

void require(const std::string & value, const std::string & name) {
    if (value.empty()) {
        throw ppd::ConfigError("--" + name + " is required");
    }
}

std::vector<ppd::TokenId> prompt_tokens(const std::string & text) {
    if (text.empty()) {
        throw ppd::ConfigError("prompt is empty");
    }
    std::vector<ppd::TokenId> tokens = ppd::tokenize(text);
    tokens.pop_back(); // EOS
    return tokens;
}

std::vector<std::vector<ppd::TokenId>> read_prompts(const std::string & path) {
    std::vector<std::vector<ppd::TokenId>> prompts;
    for (const auto & line : ppd::split_lines(ppd::read_text_file(path))) {
        if (!line.empty()) {
            prompts.push_back(prompt_tokens(line));
        }
    }
    if (prompts.empty()) {
        throw ppd::DataError(path + ": no prompts");
    }
    return prompts;
}

ppd::KlDirection kl_direction_from_string(const std::string & s) {
    if (s == "student-first") {
        return ppd::KlDirection::StudentFirst;
    }
    if (s == "target-first") {
        return ppd::KlDirection::TargetFirst;
    }
    throw ppd::ConfigError("kl-direction must be student-first or target-first, got '" + s + "'");
}

ppd::VerifyConfig verify_from(const std::string & mode, double epsilon, double delta, double temperature,
                              std::uint64_t seed) {
    ppd::VerifyConfig v;
    if (mode == "exact") {
        v.kind = ppd::VerifyConfig::Kind::Exact;
    } else if (mode == "typical") {
        v.kind = ppd::VerifyConfig::Kind::Typical;
    } else {
        throw ppd::ConfigError("verify must be exact or typical, got '" + mode + "'");
    }
    v.epsilon = epsilon;
    v.delta = delta;
    v.temperature = temperature;
    v.seed = seed;
    v.validate();
    return v;
}

// Tree from --tree, or built from --profile and --budget.
struct TreeSource {
    std::string tree;
    std::string profile;
    std::size_t budget = 16;

    void bind(OptionSet & o) {
        o.add("tree", tree, "Tree spec JSON; overrides --profile/--budget");
        o.add("profile", profile, "Acceptance profile JSON used to build the tree");
        o.add("budget", budget, "Tree size when building from the profile");
    }

    ppd::SparseTree load(std::size_t m) const {
        if (!tree.empty()) {
            json j = read_json(tree);
            return ppd::tree_from_json(j.contains("tree") ? j.at("tree") : j);
        }
        if (profile.empty()) {
            throw ppd::ConfigError("either --tree or --profile is required");
        }
        return ppd::construct_optimal_tree(budget, ppd::profile_from_json(read_json(profile)), m);
    }
};

void add_corpus(CLI::App & root) {
    auto * app = root.add_subcommand("corpus", "Write the synthetic templated corpus");
    auto opts = std::make_shared<OptionSet>(app);
    auto out = std::make_shared<std::string>();
    auto lines = std::make_shared<std::size_t>(2000);
    auto seed = std::make_shared<std::uint64_t>(5);
    opts->add("out", *out, "Output text file");
    opts->add("lines", *lines, "Number of documents");
    opts->add("seed", *seed, "Generator seed");
    app->callback([=] {
        if (!opts->resolve()) {
            return;
        }
        require(*out, "out");
        ppd::write_text_file(*out, ppd::synthetic_corpus(*lines, *seed));
    });
}

void add_init(CLI::App & root) {
    auto * app = root.add_subcommand("init", "Write a randomly initialised model checkpoint");
    auto opts = std::make_shared<OptionSet>(app);
    auto out = std::make_shared<std::string>();
    auto cfg = std::make_shared<ppd::ModelConfig>();
    cfg->n_layers = 2;
    cfg->d_model = 64;
    cfg->d_ff = 256;
    cfg->max_positions = 256;
    opts->add("out", *out, "Checkpoint path");
    opts->add("n-layers", cfg->n_layers, "Transformer blocks");
    opts->add("d-model", cfg->d_model, "Hidden size");
    opts->add("n-heads", cfg->n_heads, "Attention heads");
    opts->add("d-ff", cfg->d_ff, "Feed-forward size");
    opts->add("max-positions", cfg->max_positions, "Position table size");
    opts->add("seed", cfg->seed, "Initialisation seed");
    app->callback([=] {
        if (!opts->resolve()) {
            return;
        }
        require(*out, "out");
        cfg->validate();
        ppd::save_checkpoint(ppd::init_model(*cfg), *out);
    });
}

void add_pretrain(CLI::App & root) {
    auto * app = root.add_subcommand("pretrain", "Train the base model on a corpus (next-token cross-entropy)");
    auto opts = std::make_shared<OptionSet>(app);
    struct Args {
        std::string model, out, corpus, loss_csv;
        std::size_t max_context = 96;
        ppd::PretrainConfig cfg;
    };
    auto a = std::make_shared<Args>();
    opts->add("model", a->model, "Input checkpoint");
    opts->add("out", a->out, "Output checkpoint");
    opts->add("corpus", a->corpus, "Plain-text corpus, one document per line");
    opts->add("loss-csv", a->loss_csv, "Optional loss curve CSV");
    opts->add("max-context", a->max_context, "Chunk length in tokens");
    opts->add("steps", a->cfg.steps, "Optimizer steps");
    opts->add("batch-size", a->cfg.batch_size, "Sequences per step");
    opts->add("lr", a->cfg.lr, "Peak Adam learning rate (cosine annealed)");
    opts->add("seed", a->cfg.seed, "Sampling seed");
    app->callback([=] {
        if (!opts->resolve()) {
            return;
        }
        require(a->model, "model");
        require(a->out, "out");
        require(a->corpus, "corpus");
        ppd::Model model = ppd::load_checkpoint(a->model);
        const auto seqs = ppd::tokenize_corpus(ppd::read_text_file(a->corpus), a->max_context);
        const auto losses = ppd::pretrain(model, seqs, a->cfg);
        ppd::save_checkpoint(model, a->out);
        if (!a->loss_csv.empty()) {
            ppd::write_loss_csv(a->loss_csv, losses);
        }
        std::cout << json{{"final_loss", losses.back().loss}, {"steps", losses.size()}}.dump() << "\n";
    });
}

void add_train(CLI::App & root) {
    auto * app = root.add_subcommand("train", "Distil the prompt-token bank from the frozen model");
    auto opts = std::make_shared<OptionSet>(app);
    struct Args {
        std::string model, corpus, out, loss_csv, report;
        std::string init_bank;
        std::size_t m = 3;
        std::size_t n_ept = 1;
        std::string mask_mode = "ensemble";
        std::string kl_direction = "student-first";
        std::uint64_t bank_seed = 7;
        ppd::TrainConfig cfg;
    };
    auto a = std::make_shared<Args>();
    opts->add("model", a->model, "Frozen model checkpoint");
    opts->add("corpus", a->corpus, "Plain-text corpus, one document per line");
    opts->add("out", a->out, "Output bank checkpoint");
    opts->add("loss-csv", a->loss_csv, "Output loss curve CSV");
    opts->add("report", a->report, "Optional JSON run report");
    opts->add("init-bank", a->init_bank, "Start from this bank instead of a fresh one");
    opts->add("m", a->m, "Prompt tokens");
    opts->add("n-ept", a->n_ept, "Ensemble prompt tokens per prompt token");
    opts->add("mask-mode", a->mask_mode, "ensemble, decoder_like or encoder_like");
    opts->add("bank-seed", a->bank_seed, "Seed of the bank initialisation");
    opts->add("epochs", a->cfg.epochs, "Passes over the corpus");
    opts->add("batch-size", a->cfg.batch_size, "Sequences per step");
    opts->add("lr", a->cfg.lr_start, "Starting SGD learning rate (cosine annealed)");
    opts->add("alpha", a->cfg.alpha, "Per-distance loss decay");
    opts->add("max-context", a->cfg.max_context, "Chunk length in tokens");
    opts->add("seed", a->cfg.seed, "Shuffling and insertion seed");
    opts->add("insertions", a->cfg.n_insertions, "Insertion points per sequence");
    opts->add("kl-direction", a->kl_direction, "student-first or target-first");
    app->callback([=] {
        if (!opts->resolve()) {
            return;
        }
        require(a->model, "model");
        require(a->corpus, "corpus");
        require(a->out, "out");
        require(a->loss_csv, "loss-csv");
        a->cfg.direction = kl_direction_from_string(a->kl_direction);
        const std::string text = ppd::read_text_file(a->corpus);
        const ppd::Model model = ppd::load_checkpoint(a->model);
        a->cfg.validate(model.config());
        const ppd::PromptTokenBank bank =
            a->init_bank.empty()
                ? ppd::init_bank(model, a->m, a->n_ept, a->bank_seed, ppd::mask_mode_from_string(a->mask_mode))
                : ppd::load_bank(a->init_bank);
        const auto seqs = ppd::tokenize_corpus(text, a->cfg.max_context);
        const ppd::TrainResult result = ppd::train_bank(model, bank, seqs, a->cfg);
        ppd::save_bank(result.bank, a->out);
        ppd::write_loss_csv(a->loss_csv, result.losses);
        const std::size_t total = model.parameter_count();
        json report = {{"schema_version", kSchemaVersion},
                       {"config", opts->effective()},
                       {"steps", result.losses.size()},
                       {"skipped_sequences", result.skipped},
                       {"final_loss", result.losses.empty() ? 0.0 : result.losses.back().loss},
                       {"trainable_parameters", bank.rows() * model.config().d_model},
                       {"model_parameters", total},
                       {"trainable_ratio", ppd::trainable_ratio(bank.m, bank.n_ept, model.config().d_model, total)}};
        if (!a->report.empty()) {
            write_json(a->report, report);
        }
        std::cout << report.dump() << "\n";
    });
}

void add_eval_accuracy(CLI::App & root) {
    auto * app = root.add_subcommand("eval-accuracy", "Top-k accuracy per token distance and acceptance profile");
    auto opts = std::make_shared<OptionSet>(app);
    struct Args {
        std::string model, bank, corpus, out, report;
        std::size_t k = 10;
        std::size_t max_context = 96;
        std::string target = "corpus";
    };
    auto a = std::make_shared<Args>();
    opts->add("model", a->model, "Frozen model checkpoint");
    opts->add("bank", a->bank, "Trained bank");
    opts->add("corpus", a->corpus, "Held-out corpus");
    opts->add("out", a->out, "Output acceptance profile JSON");
    opts->add("report", a->report, "Optional accuracy report JSON");
    opts->add("k", a->k, "Ranks per distance");
    opts->add("max-context", a->max_context, "Chunk length in tokens");
    opts->add("target", a->target, "corpus (next text token) or model (frozen model's greedy token)");
    app->callback([=] {
        if (!opts->resolve()) {
            return;
        }
        require(a->model, "model");
        require(a->bank, "bank");
        require(a->corpus, "corpus");
        require(a->out, "out");
        ppd::AccuracyTarget target;
        if (a->target == "corpus") {
            target = ppd::AccuracyTarget::Corpus;
        } else if (a->target == "model") {
            target = ppd::AccuracyTarget::ModelGreedy;
        } else {
            throw ppd::ConfigError("target must be corpus or model, got '" + a->target + "'");
        }
        const std::string text = ppd::read_text_file(a->corpus);
        const ppd::Model model = ppd::load_checkpoint(a->model);
        const ppd::PromptTokenBank bank = ppd::load_bank(a->bank);
        const auto seqs = ppd::tokenize_corpus(text, a->max_context);
        const ppd::AccuracyReport acc = ppd::eval_accuracy(model, bank, seqs, a->k, target);
        write_json(a->out, ppd::profile_to_json(acc.profile));
        json report = {{"schema_version", kSchemaVersion},
                       {"config", opts->effective()},
                       {"samples", acc.samples},
                       {"accumulative", acc.accumulative}};
        if (!a->report.empty()) {
            write_json(a->report, report);
        }
        std::cout << report.dump() << "\n";
    });
}

void add_tree(CLI::App & root) {
    auto * app = root.add_subcommand("tree", "Build the sparse tree of a given size for a profile");
    auto opts = std::make_shared<OptionSet>(app);
    struct Args {
        std::string profile, out;
        std::size_t budget = 16;
        std::size_t m = 3;
        bool min_one_floor = false;
    };
    auto a = std::make_shared<Args>();
    opts->add("profile", a->profile, "Acceptance profile JSON");
    opts->add("out", a->out, "Output tree spec JSON");
    opts->add("budget", a->budget, "Total tree size n");
    opts->add("m", a->m, "Prompt tokens per chain");
    opts->add_flag("min-one-floor", a->min_one_floor, "Give every candidate at least one prompt token");
    app->callback([=] {
        if (!opts->resolve()) {
            return;
        }
        require(a->profile, "profile");
        require(a->out, "out");
        const ppd::AcceptanceProfile prof = ppd::profile_from_json(read_json(a->profile));
        ppd::TreeSearchOptions search;
        search.min_one_floor = a->min_one_floor;
        const ppd::SparseTree tree = ppd::construct_optimal_tree(a->budget, prof, a->m, search);
        json report = {{"schema_version", kSchemaVersion},
                       {"config", opts->effective()},
                       {"tree", ppd::tree_to_json(tree)},
                       {"R", ppd::amortized_R(tree, prof)},
                       {"n_c", tree.n_c()},
                       {"n_p", tree.n_p()}};
        write_json(a->out, report);
        std::cout << json{{"R", report["R"]}, {"n_c", tree.n_c()}, {"n_p", tree.n_p()}}.dump() << "\n";
    });
}

void add_generate(CLI::App & root) {
    auto * app = root.add_subcommand("generate", "Generate a continuation of a prompt");
    auto opts = std::make_shared<OptionSet>(app);
    struct Args {
        std::string model, bank, prompt, stats;
        TreeSource tree;
        std::size_t max_new = 64;
        bool vanilla = false;
        std::string verify = "exact";
        double epsilon = 0.3;
        double delta = 0.09;
        double temperature = 1.0;
        std::uint64_t seed = 0;
    };
    auto a = std::make_shared<Args>();
    opts->add("model", a->model, "Frozen model checkpoint");
    opts->add("bank", a->bank, "Trained bank");
    a->tree.bind(*opts);
    opts->add("prompt", a->prompt, "Prompt text");
    opts->add("max-new", a->max_new, "Tokens to generate at most");
    opts->add_flag("vanilla", a->vanilla, "Plain greedy decoding, one token per pass");
    opts->add("verify", a->verify, "exact or typical");
    opts->add("epsilon", a->epsilon, "Typical acceptance hard threshold");
    opts->add("delta", a->delta, "Typical acceptance entropy scale");
    opts->add("temperature", a->temperature, "Typical acceptance temperature");
    opts->add("seed", a->seed, "Sampling seed for typical acceptance");
    opts->add("stats", a->stats, "Optional RunStats JSON output");
    app->callback([=] {
        if (!opts->resolve()) {
            return;
        }
        const auto prompt = prompt_tokens(a->prompt);
        require(a->model, "model");
        const ppd::Model model = ppd::load_checkpoint(a->model);
        ppd::Generation gen;
        if (a->vanilla) {
            gen = ppd::vanilla_generate(model, prompt, a->max_new);
        } else {
            require(a->bank, "bank");
            const ppd::PromptTokenBank bank = ppd::load_bank(a->bank);
            ppd::DecodeSession session(model, bank, a->tree.load(bank.m),
                                       verify_from(a->verify, a->epsilon, a->delta, a->temperature, a->seed));
            session.prefill(prompt);
            gen = ppd::generate(session, a->max_new);
        }
        std::cout << ppd::detokenize(gen.tokens) << "\n";
        if (!a->stats.empty()) {
            json j = gen.stats.to_json();
            j["schema_version"] = kSchemaVersion;
            j["config"] = opts->effective();
            write_json(a->stats, j);
        }
    });
}

void add_bench(CLI::App & root) {
    auto * app = root.add_subcommand("bench", "Acceptance length and throughput against vanilla decoding");
    auto opts = std::make_shared<OptionSet>(app);
    struct Args {
        std::string model, bank, prompts, out_json, out_csv;
        TreeSource tree;
        std::size_t max_new = 64;
        std::string verify = "exact";
        double epsilon = 0.3;
        double delta = 0.09;
        double temperature = 1.0;
        std::uint64_t seed = 0;
    };
    auto a = std::make_shared<Args>();
    opts->add("model", a->model, "Frozen model checkpoint");
    opts->add("bank", a->bank, "Trained bank");
    a->tree.bind(*opts);
    opts->add("prompts", a->prompts, "Prompt file, one prompt per line");
    opts->add("max-new", a->max_new, "Tokens to generate per prompt at most");
    opts->add("verify", a->verify, "exact or typical");
    opts->add("epsilon", a->epsilon, "Typical acceptance hard threshold");
    opts->add("delta", a->delta, "Typical acceptance entropy scale");
    opts->add("temperature", a->temperature, "Typical acceptance temperature");
    opts->add("seed", a->seed, "Sampling seed for typical acceptance");
    opts->add("out-json", a->out_json, "Report JSON");
    opts->add("out-csv", a->out_csv, "Per-prompt CSV");
    app->callback([=] {
        if (!opts->resolve()) {
            return;
        }
        require(a->model, "model");
        require(a->bank, "bank");
        require(a->prompts, "prompts");
        const auto prompts = read_prompts(a->prompts);
        const ppd::Model model = ppd::load_checkpoint(a->model);
        const ppd::PromptTokenBank bank = ppd::load_bank(a->bank);
        const ppd::SparseTree tree = a->tree.load(bank.m);
        const ppd::VerifyConfig verify = verify_from(a->verify, a->epsilon, a->delta, a->temperature, a->seed);

        std::ostringstream csv;
        csv << "prompt,mode,steps,committed,tau,wall_ms,tokens_per_s\n";
        json rows = json::array();
        ppd::RunStats ppd_total;
        ppd::RunStats van_total;
        auto row = [&](std::size_t i, const char * mode, const ppd::RunStats & s) {
            csv << i << ',' << mode << ',' << s.steps << ',' << s.committed << ',' << s.tau_mean() << ','
                << s.wall_ms << ',' << s.tokens_per_s() << '\n';
            rows.push_back({{"prompt", i},
                            {"mode", mode},
                            {"steps", s.steps},
                            {"committed", s.committed},
                            {"tau", s.tau_mean()},
                            {"wall_ms", s.wall_ms},
                            {"tokens_per_s", s.tokens_per_s()}});
        };
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            ppd::DecodeSession session(model, bank, tree, verify);
            session.prefill(prompts[i]);
            const ppd::Generation g = ppd::generate(session, a->max_new);
            const ppd::Generation v = ppd::vanilla_generate(model, prompts[i], a->max_new);
            row(i, "ppd", g.stats);
            row(i, "vanilla", v.stats);
            for (auto [total, s] : {std::pair{&ppd_total, &g.stats}, std::pair{&van_total, &v.stats}}) {
                total->steps += s->steps;
                total->committed += s->committed;
                total->wall_ms += s->wall_ms;
            }
        }
        const double speedup =
            van_total.tokens_per_s() > 0.0 ? ppd_total.tokens_per_s() / van_total.tokens_per_s() : 0.0;
        json report = {{"schema_version", kSchemaVersion},
                       {"config", opts->effective()},
                       {"host", ppd::host_description()},
                       {"prompts", prompts.size()},
                       {"tree", {{"n_c", tree.n_c()}, {"n_p", tree.n_p()}}},
                       {"aggregate",
                        {{"ppd", {{"steps", ppd_total.steps},
                                  {"committed", ppd_total.committed},
                                  {"tau", ppd_total.tau_mean()},
                                  {"wall_ms", ppd_total.wall_ms},
                                  {"tokens_per_s", ppd_total.tokens_per_s()}}},
                         {"vanilla", {{"steps", van_total.steps},
                                      {"committed", van_total.committed},
                                      {"tau", van_total.tau_mean()},
                                      {"wall_ms", van_total.wall_ms},
                                      {"tokens_per_s", van_total.tokens_per_s()}}},
                         {"speedup", speedup}}},
                       {"rows", rows}};
        if (!a->out_json.empty()) {
            write_json(a->out_json, report);
        }
        if (!a->out_csv.empty()) {
            ppd::write_text_file(a->out_csv, csv.str());
        }
        std::cout << report["aggregate"].dump() << "\n";
    });
}

void add_calibrate(CLI::App & root) {
    auto * app = root.add_subcommand("calibrate", "Pick the tree size with the best acceptance per unit latency");
    auto opts = std::make_shared<OptionSet>(app);
    struct Args {
        std::string model, bank, profile, prompts, out;
        std::vector<std::size_t> grid = ppd::default_calibration_grid();
        std::size_t reps = ppd::kMinLatencyReps;
        std::size_t max_new = 64;
    };
    auto a = std::make_shared<Args>();
    opts->add("model", a->model, "Frozen model checkpoint");
    opts->add("bank", a->bank, "Trained bank");
    opts->add("profile", a->profile, "Acceptance profile JSON");
    opts->add("prompts", a->prompts, "Validation prompts, one per line");
    opts->add("grid", a->grid, "Tree sizes to try");
    opts->add("reps", a->reps, "Timed forward passes per size");
    opts->add("max-new", a->max_new, "Tokens generated per validation prompt");
    opts->add("out", a->out, "Calibration report JSON");
    app->callback([=] {
        if (!opts->resolve()) {
            return;
        }
        require(a->model, "model");
        require(a->bank, "bank");
        require(a->profile, "profile");
        require(a->prompts, "prompts");
        require(a->out, "out");
        const auto prompts = read_prompts(a->prompts);
        const ppd::Model model = ppd::load_checkpoint(a->model);
        const ppd::PromptTokenBank bank = ppd::load_bank(a->bank);
        const ppd::AcceptanceProfile prof = ppd::profile_from_json(read_json(a->profile));
        const std::set<std::size_t> sizes(a->grid.begin(), a->grid.end());
        const ppd::LatencyCurve lat = ppd::profile_latency(model, bank, prof, sizes, a->reps, prompts.front());
        const ppd::TauCurve tau = ppd::estimate_tau(model, bank, prof, sizes, prompts, a->max_new);
        json report = ppd::make_report(tau, lat).to_json();
        report["schema_version"] = kSchemaVersion;
        report["config"] = opts->effective();
        write_json(a->out, report);
        for (const auto & w : lat.warnings) {
            std::cerr << "warning: " << w << "\n";
        }
        std::cout << json{{"selected_n", report["selected_n"]}}.dump() << "\n";
    });
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"Parallel prompt decoding: training, tree construction, generation and calibration"};
    app.require_subcommand(1);
    add_corpus(app);
    add_init(app);
    add_pretrain(app);
    add_train(app);
    add_eval_accuracy(app);
    add_tree(app);
    add_generate(app);
    add_bench(app);
    add_calibrate(app);
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp & e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp & e) {
        return app.exit(e);
    } catch (const CLI::ParseError & e) {
        app.exit(e);
        return ppd::exit_code_for(ppd::ErrorKind::Config);
    } catch (const ppd::Error & e) {
        std::cerr << "error: " << e.what() << "\n";
        return ppd::exit_code_for(e.kind());
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
