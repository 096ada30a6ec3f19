#include "support.hpp"

#include "ppd/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>

namespace ppd::testing {

namespace {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

Mat to_mat(const Matrix & m) {
    Mat out(m.rows(), Vec(m.cols()));
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            out[r][c] = m(r, c);
        }
    }
    return out;
}

Vec to_vec(const Matrix & m) {
    return Vec(m.data().begin(), m.data().end());
}

Mat mul(const Mat & a, const Mat & b) {
    Mat out(a.size(), Vec(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t k = 0; k < b.size(); ++k) {
            for (std::size_t j = 0; j < b[0].size(); ++j) {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    return out;
}

Mat norm_rows(const Mat & x, const Vec & g, const Vec & b) {
    Mat out = x;
    for (auto & row : out) {
        double mean = 0.0;
        for (double v : row) {
            mean += v;
        }
        mean /= static_cast<double>(row.size());
        double var = 0.0;
        for (double v : row) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(row.size());
        const double denom = std::sqrt(var + 1e-5);
        for (std::size_t c = 0; c < row.size(); ++c) {
            row[c] = (row[c] - mean) / denom * g[c] + b[c];
        }
    }
    return out;
}

double gelu(double x) {
    const double k = std::sqrt(2.0 / std::numbers::pi);
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

Vec softmax(const Vec & z) {
    const double mx = *std::max_element(z.begin(), z.end());
    Vec p(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp(z[i] - mx);
        s += p[i];
    }
    for (auto & v : p) {
        v /= s;
    }
    return p;
}

bool ept_sees(MaskMode mode, std::size_t n_ept, std::size_t a, std::size_t b) {
    const std::size_t da = a / n_ept;
    const std::size_t ja = a % n_ept;
    const std::size_t db = b / n_ept;
    const std::size_t jb = b % n_ept;
    switch (mode) {
    case MaskMode::Ensemble:
        return ja == jb && db <= da;
    case MaskMode::DecoderLike:
        return b <= a;
    case MaskMode::EncoderLike:
        return b <= a || da == db;
    }
    return false;
}

} // namespace

ModelConfig tiny_config(std::uint64_t seed, std::size_t n_layers, std::size_t d_model, std::size_t n_heads,
                        std::size_t d_ff, std::size_t max_positions) {
    ModelConfig c;
    c.seed = seed;
    c.n_layers = n_layers;
    c.d_model = d_model;
    c.n_heads = n_heads;
    c.d_ff = d_ff;
    c.max_positions = max_positions;
    return c;
}

Model textured_model(const ModelConfig & config, float scale) {
    Model base = init_model(config);
    TensorMap tensors = base.tensors();
    for (auto & [name, t] : tensors) {
        const bool is_gain = name.ends_with(".gain");
        const bool is_bias = name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2");
        if (!is_gain && !is_bias) {
            for (auto & v : t.data()) {
                v *= scale;
            }
        }
    }
    return Model(config, std::move(tensors));
}

std::vector<TokenId> random_tokens(std::mt19937_64 & rng, std::size_t n, bool with_bos) {
    std::uniform_int_distribution<int> byte(32, 126);
    std::vector<TokenId> out;
    if (with_bos) {
        out.push_back(kBosToken);
    }
    while (out.size() < n) {
        out.push_back(static_cast<TokenId>(byte(rng)));
    }
    return out;
}

AcceptanceProfile random_profile(std::mt19937_64 & rng, std::size_t m, std::size_t K, double mass) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::vector<double>> rows(m, std::vector<double>(K));
    for (auto & row : rows) {
        for (auto & v : row) {
            v = u(rng);
        }
        std::sort(row.begin(), row.end(), std::greater<>());
        double s = 0.0;
        for (double v : row) {
            s += v;
        }
        const double target = mass * u(rng);
        for (auto & v : row) {
            v *= target / s;
        }
    }
    return AcceptanceProfile::from_rows(rows);
}

std::vector<std::vector<double>> reference_logits(const Model & model, const std::vector<std::vector<double>> & inputs,
                                                  const std::vector<std::size_t> & positions,
                                                  const std::vector<std::vector<bool>> & visible) {
    const ModelConfig & cfg = model.config();
    const std::size_t n = inputs.size();
    const std::size_t d = cfg.d_model;
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = d / H;
    const Mat pos = to_mat(model.at("pos_emb"));
    Mat h(n, Vec(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            h[i][c] = inputs[i][c] + pos[positions[i]][c];
        }
    }
    auto t = [&](const std::string & name) { return to_mat(model.at(name)); };
    auto v = [&](const std::string & name) { return to_vec(model.at(name)); };
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "blocks." + std::to_string(l) + ".";
        const Mat a = norm_rows(h, v(pre + "ln1.gain"), v(pre + "ln1.bias"));
        const Mat q = mul(a, t(pre + "attn.wq"));
        const Mat k = mul(a, t(pre + "attn.wk"));
        const Mat val = mul(a, t(pre + "attn.wv"));
        Mat att(n, Vec(d, 0.0));
        for (std::size_t head = 0; head < H; ++head) {
            const std::size_t c0 = head * dh;
            for (std::size_t i = 0; i < n; ++i) {
                Vec s(n, -std::numeric_limits<double>::infinity());
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < n; ++j) {
                    if (!visible[i][j]) {
                        continue;
                    }
                    double dot = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dot += q[i][c0 + c] * k[j][c0 + c];
                    }
                    s[j] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    if (visible[i][j]) {
                        s[j] = std::exp(s[j] - mx);
                        z += s[j];
                    }
                }
                for (std::size_t j = 0; j < n; ++j) {
                    if (visible[i][j]) {
                        for (std::size_t c = 0; c < dh; ++c) {
                            att[i][c0 + c] += s[j] / z * val[j][c0 + c];
                        }
                    }
                }
            }
        }
        const Mat o = mul(att, t(pre + "attn.wo"));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < d; ++c) {
                h[i][c] += o[i][c];
            }
        }
        const Mat b = norm_rows(h, v(pre + "ln2.gain"), v(pre + "ln2.bias"));
        Mat f1 = mul(b, t(pre + "ffn.w1"));
        const Vec b1 = v(pre + "ffn.b1");
        for (auto & row : f1) {
            for (std::size_t c = 0; c < row.size(); ++c) {
                row[c] = gelu(row[c] + b1[c]);
            }
        }
        const Mat f2 = mul(f1, t(pre + "ffn.w2"));
        const Vec b2 = v(pre + "ffn.b2");
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < d; ++c) {
                h[i][c] += f2[i][c] + b2[c];
            }
        }
    }
    return mul(norm_rows(h, v("ln_f.gain"), v("ln_f.bias")), t("lm_head"));
}

double reference_kd_loss(const Model & model, const std::vector<std::vector<double>> & bank_rows, std::size_t m,
                         std::size_t n_ept, MaskMode mode, std::span<const DistillExample> batch, double alpha,
                         KlDirection direction) {
    const Mat tok = to_mat(model.at("tok_emb"));
    const std::size_t per_chain = m * n_ept;
    std::size_t total_insertions = 0;
    for (const auto & ex : batch) {
        total_insertions += ex.insertions.size();
    }
    double loss = 0.0;
    for (const auto & ex : batch) {
        const std::size_t L = ex.tokens.size();
        const std::size_t n = L + ex.insertions.size() * per_chain;
        Mat inputs;
        std::vector<std::size_t> positions;
        std::vector<std::vector<bool>> visible(n, std::vector<bool>(n, false));
        for (std::size_t t = 0; t < L; ++t) {
            inputs.push_back(tok[static_cast<std::size_t>(ex.tokens[t])]);
            positions.push_back(t);
            for (std::size_t s = 0; s <= t; ++s) {
                visible[t][s] = true;
            }
        }
        for (std::size_t q = 0; q < ex.insertions.size(); ++q) {
            const std::size_t i = ex.insertions[q];
            for (std::size_t a = 0; a < per_chain; ++a) {
                const std::size_t row = L + q * per_chain + a;
                inputs.push_back(bank_rows[a]);
                positions.push_back(i + a / n_ept);
                for (std::size_t s = 0; s < i; ++s) {
                    visible[row][s] = true;
                }
                for (std::size_t b = 0; b < per_chain; ++b) {
                    visible[row][L + q * per_chain + b] = ept_sees(mode, n_ept, a, b);
                }
            }
        }
        const Mat logits = reference_logits(model, inputs, positions, visible);
        for (std::size_t q = 0; q < ex.insertions.size(); ++q) {
            const std::size_t i = ex.insertions[q];
            double w = 1.0;
            for (std::size_t d = 0; d < m; ++d) {
                Vec mean(logits[0].size(), 0.0);
                for (std::size_t j = 0; j < n_ept; ++j) {
                    const auto & r = logits[L + q * per_chain + d * n_ept + j];
                    for (std::size_t c = 0; c < mean.size(); ++c) {
                        mean[c] += r[c] / static_cast<double>(n_ept);
                    }
                }
                const Vec s = softmax(mean);
                Vec t = softmax(logits[i + d]);
                for (auto & v : t) {
                    v = std::max(v, 1e-30);
                }
                double kl = 0.0;
                for (std::size_t c = 0; c < s.size(); ++c) {
                    if (direction == KlDirection::StudentFirst) {
                        kl += s[c] > 0.0 ? s[c] * (std::log(s[c]) - std::log(t[c])) : 0.0;
                    } else {
                        kl += t[c] * (std::log(t[c]) - std::log(s[c]));
                    }
                }
                loss += w * kl;
                w *= alpha;
            }
        }
    }
    return loss / static_cast<double>(total_insertions * m);
}

double reference_R(const SparseTree & tree, const AcceptanceProfile & profile) {
    const AcceptanceProfile prof = profile.clamped();
    const std::size_t m = tree.m();
    const std::size_t S = m + 1;
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(S));
    Eigen::VectorXd f = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(S));
    auto state_of = [&](std::optional<std::size_t> host) {
        return static_cast<Eigen::Index>(std::min(tree.chain_length(host), m));
    };
    for (std::size_t k = 0; k < S; ++k) {
        const auto row = static_cast<Eigen::Index>(k);
        // Walk: at each accepted node one child is accepted with its own
        // probability, otherwise the walk ends there.
        std::function<void(std::optional<std::size_t>, double, std::size_t)> walk =
            [&](std::optional<std::size_t> at, double reach, std::size_t depth) {
                double moved = 0.0;
                if (depth < k) {
                    for (std::size_t c : tree.children(at)) {
                        const double p = prof.at(depth + 1, tree.node(c).rank);
                        moved += p;
                        f(row) += reach * p;
                        walk(c, reach * p, depth + 1);
                    }
                }
                P(row, state_of(at)) += reach * (1.0 - moved);
            };
        walk(std::nullopt, 1.0, 0);
    }
    // pi (P - I) = 0 with sum(pi) = 1, solved as a least-squares system.
    Eigen::MatrixXd A(static_cast<Eigen::Index>(S + 1), static_cast<Eigen::Index>(S));
    A.topRows(static_cast<Eigen::Index>(S)) =
        (P - Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(S))).transpose();
    A.row(static_cast<Eigen::Index>(S)).setOnes();
    Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(S + 1));
    b(static_cast<Eigen::Index>(S)) = 1.0;
    const Eigen::VectorXd pi = A.colPivHouseholderQr().solve(b);
    return pi.dot(f);
}

double exhaustive_best_R(std::size_t n, const AcceptanceProfile & profile, std::size_t m) {
    double best = -1.0;
    // Ordered candidate trees grown in breadth-first order: each new node is
    // the next child of some node at or after the current parent cursor.
    std::vector<int> parent;
    std::vector<std::size_t> rank;
    std::vector<std::size_t> depth;
    std::function<void(std::size_t)> grow;
    auto score_chains = [&]() {
        const std::size_t n_c = parent.size();
        if (n < n_c + m) {
            return;
        }
        const std::size_t spare = n - n_c - m;
        if (spare > m * n_c) {
            return;
        }
        std::vector<std::size_t> chain(n_c, 0);
        std::function<void(std::size_t, std::size_t)> assign = [&](std::size_t i, std::size_t left) {
            if (i == n_c) {
                if (left != 0) {
                    return;
                }
                SparseTree::Shape s;
                s.parent = parent;
                s.rank = rank;
                s.chain = chain;
                s.root_chain = m;
                best = std::max(best, reference_R(SparseTree::from_shape(m, s), profile));
                return;
            }
            for (std::size_t c = 0; c <= std::min(m, left); ++c) {
                chain[i] = c;
                assign(i + 1, left - c);
            }
        };
        assign(0, spare);
    };
    // cursor: index of the first node (or -1 for the root) that may still get
    // children; nodes before it are closed, keeping one canonical order.
    grow = [&](std::size_t budget) {
        score_chains();
        if (budget == 0) {
            return;
        }
        const int first = parent.empty() ? -1 : parent.back();
        for (int at = first; at < static_cast<int>(parent.size()); ++at) {
            const std::size_t d = at < 0 ? 0 : depth[static_cast<std::size_t>(at)];
            if (d + 1 > m) {
                continue;
            }
            std::size_t siblings = 0;
            for (int p : parent) {
                siblings += p == at ? 1 : 0;
            }
            if (siblings + 1 > profile.K) {
                continue;
            }
            parent.push_back(at);
            rank.push_back(siblings + 1);
            depth.push_back(d + 1);
            grow(budget - 1);
            parent.pop_back();
            rank.pop_back();
            depth.pop_back();
        }
    };
    grow(n >= m ? n - m : 0);
    if (best < 0.0) {
        throw InfeasibleError("no tree of size " + std::to_string(n));
    }
    return best;
}

SparseTree random_pruning(std::mt19937_64 & rng, const SparseTree & full, std::size_t budget) {
    SparseTree::Shape s = full.shape();
    std::size_t current = s.root_chain + std::accumulate(s.chain.begin(), s.chain.end(), std::size_t{0});
    while (current > budget) {
        std::vector<std::size_t> live;
        for (std::size_t v = 0; v < s.chain.size(); ++v) {
            if (s.chain[v] > 0) {
                live.push_back(v);
            }
        }
        --s.chain[live[std::uniform_int_distribution<std::size_t>(0, live.size() - 1)(rng)]];
        --current;
    }
    return SparseTree::from_shape(full.m(), s);
}


} // namespace ppd::testing
