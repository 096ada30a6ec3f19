#include "ppd/tree.hpp"

#include "ppd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <tuple>

namespace ppd {

namespace {

using Shape = SparseTree::Shape;

std::vector<std::size_t> shape_depths(const Shape & s) {
    std::vector<std::size_t> depth(s.parent.size());
    for (std::size_t i = 0; i < s.parent.size(); ++i) {
        depth[i] = s.parent[i] < 0 ? 1 : depth[static_cast<std::size_t>(s.parent[i])] + 1;
    }
    return depth;
}

struct ShapeModel {
    std::vector<std::vector<double>> P;
    std::vector<double> f;
};

// Transition model of a candidate shape; `prof` is expected to be clamped.
ShapeModel shape_model(const Shape & s, const AcceptanceProfile & prof, std::size_t m) {
    const std::size_t n = s.parent.size();
    const auto depth = shape_depths(s);
    std::vector<double> p(n);
    std::vector<double> path(n);
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = prof.at(depth[i], s.rank[i]);
        path[i] = (s.parent[i] < 0 ? 1.0 : path[static_cast<std::size_t>(s.parent[i])]) * p[i];
    }
    ShapeModel out;
    out.P.assign(m + 1, std::vector<double>(m + 1, 0.0));
    out.f.assign(m + 1, 0.0);
    for (std::size_t k = 0; k <= m; ++k) {
        std::vector<double> child_sum(n, 0.0);
        double root_child_sum = 0.0;
        double f = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (depth[i] > k) {
                continue;
            }
            f += path[i];
            if (s.parent[i] < 0) {
                root_child_sum += p[i];
            } else {
                child_sum[static_cast<std::size_t>(s.parent[i])] += p[i];
            }
        }
        out.f[k] = f;
        auto & row = out.P[k];
        row[std::min(s.root_chain, m)] += 1.0 - root_child_sum;
        for (std::size_t i = 0; i < n; ++i) {
            if (depth[i] <= k) {
                row[std::min(s.chain[i], m)] += path[i] * (1.0 - child_sum[i]);
            }
        }
    }
    return out;
}

double shape_R(const Shape & s, const AcceptanceProfile & prof, std::size_t m) {
    const ShapeModel sm = shape_model(s, prof, m);
    const auto pi = steady_state(sm.P);
    double r = 0.0;
    for (std::size_t k = 0; k <= m; ++k) {
        r += pi[k] * sm.f[k];
    }
    return r;
}

std::vector<double> shape_steady(const Shape & s, const AcceptanceProfile & prof, std::size_t m) {
    return steady_state(shape_model(s, prof, m).P);
}

// Greedy frontier growth; throws CapacityError when no frontier node remains.
Shape greedy_shape(const AcceptanceProfile & prof, std::size_t n_c, std::size_t max_depth,
                   const std::vector<double> * weights) {
    Shape s;
    std::vector<std::size_t> depth;
    std::vector<double> path;
    std::vector<std::size_t> n_children;
    std::size_t root_children = 0;
    while (s.parent.size() < n_c) {
        bool found = false;
        std::tuple<double, std::size_t, std::size_t, int> best_key{};
        int best_parent = -1;
        for (int par = -1; par < static_cast<int>(s.parent.size()); ++par) {
            const std::size_t d = par < 0 ? 1 : depth[static_cast<std::size_t>(par)] + 1;
            if (d > max_depth) {
                continue;
            }
            const std::size_t r = (par < 0 ? root_children : n_children[static_cast<std::size_t>(par)]) + 1;
            if (r > prof.K) {
                continue;
            }
            const double pp = (par < 0 ? 1.0 : path[static_cast<std::size_t>(par)]) * prof.at(d, r);
            const double w = weights != nullptr ? (*weights)[d - 1] : 1.0;
            const std::tuple<double, std::size_t, std::size_t, int> key{-pp * w, d, r, par};
            if (!found || key < best_key) {
                found = true;
                best_key = key;
                best_parent = par;
            }
        }
        if (!found) {
            throw CapacityError("candidate tree: profile exhausted after " + std::to_string(s.parent.size()) +
                                " nodes (K = " + std::to_string(prof.K) + ", depth limit " +
                                std::to_string(max_depth) + ")");
        }
        const std::size_t d = std::get<1>(best_key);
        const std::size_t r = std::get<2>(best_key);
        s.parent.push_back(best_parent);
        s.rank.push_back(r);
        s.chain.push_back(0);
        depth.push_back(d);
        path.push_back((best_parent < 0 ? 1.0 : path[static_cast<std::size_t>(best_parent)]) * prof.at(d, r));
        n_children.push_back(0);
        if (best_parent < 0) {
            ++root_children;
        } else {
            ++n_children[static_cast<std::size_t>(best_parent)];
        }
    }
    return s;
}

// Removes tail prompt tokens from candidate chains by minimal delta F.
void prune_shape(Shape & s, std::size_t budget, const AcceptanceProfile & prof, std::size_t m, bool floor) {
    const std::size_t floor_len = floor ? 1 : 0;
    std::size_t current = s.root_chain + std::accumulate(s.chain.begin(), s.chain.end(), std::size_t{0});
    if (budget > current) {
        throw InfeasibleError("prompt budget " + std::to_string(budget) + " exceeds the " + std::to_string(current) +
                              " prompt nodes present");
    }
    if (budget < s.root_chain + floor_len * s.parent.size()) {
        throw InfeasibleError("prompt budget " + std::to_string(budget) + " is below the minimum of " +
                              std::to_string(s.root_chain + floor_len * s.parent.size()));
    }
    if (budget == current) {
        return;
    }
    const SparseTree tree = SparseTree::from_shape(m, s);
    std::vector<double> fs(m + 1, 0.0);
    for (std::size_t d = 1; d <= m; ++d) {
        fs[d] = expected_accept_f(tree, prof, d);
    }
    const FinalNodeDistribution fd = final_node_distribution(tree, prof, m);
    while (current > budget) {
        bool found = false;
        double best_df = 0.0;
        std::size_t best_v = 0;
        for (std::size_t v = 0; v < s.chain.size(); ++v) {
            const std::size_t d = s.chain[v];
            if (d <= floor_len) {
                continue;
            }
            const double df = delta_F(fd.by_node.at(v), fs[std::min(d, m)], fs[std::min(d, m) - 1]);
            if (!found || df < best_df) {
                found = true;
                best_df = df;
                best_v = v;
            }
        }
        if (!found) {
            throw InfeasibleError("no removable prompt token left");
        }
        --s.chain[best_v];
        --current;
    }
}

bool is_leaf(const Shape & s, std::size_t v) {
    for (int p : s.parent) {
        if (p == static_cast<int>(v)) {
            return false;
        }
    }
    return true;
}

Shape remove_candidate(const Shape & s, std::size_t v) {
    Shape out;
    out.root_chain = s.root_chain;
    std::vector<int> remap(s.parent.size(), -1);
    for (std::size_t i = 0; i < s.parent.size(); ++i) {
        if (i == v) {
            continue;
        }
        remap[i] = static_cast<int>(out.parent.size());
        out.parent.push_back(s.parent[i] < 0 ? -1 : remap[static_cast<std::size_t>(s.parent[i])]);
        out.rank.push_back(s.rank[i]);
        out.chain.push_back(s.chain[i]);
    }
    return out;
}

struct Scored {
    Shape shape;
    double R = 0.0;
};

// Moves single chain tokens between candidates while R improves.
void polish_chains(Scored & cur, const AcceptanceProfile & prof, std::size_t m, bool floor) {
    const std::size_t floor_len = floor ? 1 : 0;
    bool improved = true;
    while (improved) {
        improved = false;
        for (std::size_t a = 0; a < cur.shape.chain.size(); ++a) {
            for (std::size_t b = 0; b < cur.shape.chain.size(); ++b) {
                if (a == b || cur.shape.chain[a] <= floor_len || cur.shape.chain[b] >= m) {
                    continue;
                }
                Shape t = cur.shape;
                --t.chain[a];
                ++t.chain[b];
                const double r = shape_R(t, prof, m);
                if (r > cur.R + 1e-12) {
                    cur.shape = std::move(t);
                    cur.R = r;
                    improved = true;
                }
            }
        }
    }
}

// Relocates one candidate leaf (the highest rank among its siblings) to a
// frontier slot, redistributing its chain tokens greedily. Returns true when
// R improved.
bool polish_candidates_once(Scored & cur, const AcceptanceProfile & prof, std::size_t m, bool floor) {
    const std::size_t floor_len = floor ? 1 : 0;
    const Shape & s = cur.shape;
    for (std::size_t v = 0; v < s.parent.size(); ++v) {
        if (!is_leaf(s, v)) {
            continue;
        }
        std::size_t max_sib_rank = 0;
        for (std::size_t i = 0; i < s.parent.size(); ++i) {
            if (s.parent[i] == s.parent[v]) {
                max_sib_rank = std::max(max_sib_rank, s.rank[i]);
            }
        }
        if (s.rank[v] != max_sib_rank) {
            continue;
        }
        const Shape base = remove_candidate(s, v);
        const std::size_t freed = s.chain[v];
        const auto depth = shape_depths(base);
        for (int q = -1; q < static_cast<int>(base.parent.size()); ++q) {
            const std::size_t d = q < 0 ? 1 : depth[static_cast<std::size_t>(q)] + 1;
            if (d > m) {
                continue;
            }
            std::size_t used = 0;
            for (int p : base.parent) {
                used += p == q ? 1 : 0;
            }
            const std::size_t rank = used + 1;
            if (rank > prof.K) {
                continue;
            }
            for (std::size_t cl = floor_len; cl <= std::min(m, freed); ++cl) {
                Shape t = base;
                t.parent.push_back(q);
                t.rank.push_back(rank);
                t.chain.push_back(cl);
                bool ok = true;
                for (std::size_t extra = freed - cl; extra > 0; --extra) {
                    double best_r = -1.0;
                    std::size_t best_i = 0;
                    bool any = false;
                    for (std::size_t i = 0; i < t.chain.size(); ++i) {
                        if (t.chain[i] >= m) {
                            continue;
                        }
                        ++t.chain[i];
                        const double r = shape_R(t, prof, m);
                        --t.chain[i];
                        if (!any || r > best_r) {
                            any = true;
                            best_r = r;
                            best_i = i;
                        }
                    }
                    if (!any) {
                        ok = false;
                        break;
                    }
                    ++t.chain[best_i];
                }
                if (!ok) {
                    continue;
                }
                const double r = shape_R(t, prof, m);
                if (r > cur.R + 1e-12) {
                    cur.shape = std::move(t);
                    cur.R = r;
                    return true;
                }
            }
        }
    }
    return false;
}

void polish(Scored & cur, const AcceptanceProfile & prof, std::size_t m, bool floor, bool candidate_moves) {
    polish_chains(cur, prof, m, floor);
    while (candidate_moves && polish_candidates_once(cur, prof, m, floor)) {
        polish_chains(cur, prof, m, floor);
    }
}

} // namespace

AcceptanceProfile AcceptanceProfile::from_rows(std::vector<std::vector<double>> rows) {
    AcceptanceProfile out;
    out.m = rows.size();
    out.K = rows.empty() ? 0 : rows.front().size();
    out.p = std::move(rows);
    out.validate();
    return out;
}

double AcceptanceProfile::at(std::size_t depth, std::size_t rank) const {
    if (depth == 0 || depth > m) {
        throw ProfileError("profile has no depth " + std::to_string(depth) + " (m = " + std::to_string(m) + ")");
    }
    if (rank == 0 || rank > K) {
        throw ProfileError("profile has no rank " + std::to_string(rank) + " (K = " + std::to_string(K) + ")");
    }
    return p[depth - 1][rank - 1];
}

void AcceptanceProfile::validate() const {
    if (m == 0 || K == 0) {
        throw ProfileError("profile needs m >= 1 and K >= 1");
    }
    if (p.size() != m) {
        throw ProfileError("profile has " + std::to_string(p.size()) + " depth rows, expected " + std::to_string(m));
    }
    for (std::size_t d = 0; d < m; ++d) {
        if (p[d].size() != K) {
            throw ProfileError("profile row " + std::to_string(d + 1) + " has " + std::to_string(p[d].size()) +
                               " ranks, expected " + std::to_string(K));
        }
        double sum = 0.0;
        for (double v : p[d]) {
            if (!(v >= 0.0 && v <= 1.0)) {
                throw ProfileError("profile value " + std::to_string(v) + " outside [0, 1]");
            }
            sum += v;
        }
        if (sum > 1.0 + 1e-9) {
            throw ProfileError("profile row " + std::to_string(d + 1) + " sums to " + std::to_string(sum));
        }
    }
}

AcceptanceProfile AcceptanceProfile::clamped(double lo, double hi) const {
    AcceptanceProfile out = *this;
    for (auto & row : out.p) {
        double sum = 0.0;
        for (auto & v : row) {
            v = std::clamp(v, lo, hi);
            sum += v;
        }
        if (sum > hi) {
            for (auto & v : row) {
                v *= hi / sum;
            }
        }
    }
    return out;
}

SparseTree SparseTree::from_shape(std::size_t m, const Shape & shape) {
    const std::size_t n_c = shape.parent.size();
    if (shape.rank.size() != n_c || shape.chain.size() != n_c) {
        throw ShapeError("tree shape arrays disagree in length");
    }
    SparseTree t(m);
    t.n_c_ = n_c;
    const auto depth = shape_depths(shape);
    for (std::size_t i = 0; i < n_c; ++i) {
        if (shape.parent[i] >= static_cast<int>(i)) {
            throw ShapeError("tree shape: parent must precede child");
        }
        TreeNode node;
        node.id = i;
        if (shape.parent[i] >= 0) {
            node.parent = static_cast<std::size_t>(shape.parent[i]);
        }
        node.kind = NodeKind::Candidate;
        node.rank = shape.rank[i];
        node.depth = depth[i];
        t.nodes_.push_back(node);
    }
    auto add_chain = [&](std::optional<std::size_t> host, std::size_t len, std::size_t host_depth) {
        std::optional<std::size_t> prev = host;
        for (std::size_t o = 1; o <= len; ++o) {
            TreeNode node;
            node.id = t.nodes_.size();
            node.parent = prev;
            node.kind = NodeKind::Prompt;
            node.offset = o;
            node.depth = host_depth + o;
            node.host = host;
            prev = node.id;
            t.nodes_.push_back(node);
        }
    };
    add_chain(std::nullopt, shape.root_chain, 0);
    for (std::size_t i = 0; i < n_c; ++i) {
        add_chain(i, shape.chain[i], depth[i]);
    }
    t.validate();
    return t;
}

SparseTree::Shape SparseTree::shape() const {
    Shape s;
    s.parent.resize(n_c_);
    s.rank.resize(n_c_);
    s.chain.assign(n_c_, 0);
    for (std::size_t i = 0; i < n_c_; ++i) {
        s.parent[i] = nodes_[i].parent ? static_cast<int>(*nodes_[i].parent) : -1;
        s.rank[i] = nodes_[i].rank;
    }
    for (std::size_t i = n_c_; i < nodes_.size(); ++i) {
        if (nodes_[i].host) {
            ++s.chain[*nodes_[i].host];
        } else {
            ++s.root_chain;
        }
    }
    return s;
}

SparseTree SparseTree::from_nodes(std::size_t m, std::vector<TreeNode> nodes) {
    const std::size_t n = nodes.size();
    std::map<std::size_t, std::size_t> by_id;
    for (std::size_t i = 0; i < n; ++i) {
        if (!by_id.emplace(nodes[i].id, i).second) {
            throw ShapeError("tree: duplicate node id " + std::to_string(nodes[i].id));
        }
    }
    auto index_of = [&](std::size_t id) {
        auto it = by_id.find(id);
        if (it == by_id.end()) {
            throw ShapeError("tree: unknown parent id " + std::to_string(id));
        }
        return it->second;
    };
    // Order candidates so parents precede children.
    std::vector<int> cand_index(n, -1);
    Shape s;
    std::vector<std::size_t> order;
    std::vector<int> state(n, 0);
    std::function<void(std::size_t)> visit = [&](std::size_t i) {
        if (state[i] == 2) {
            return;
        }
        if (state[i] == 1) {
            throw ShapeError("tree: cycle through node " + std::to_string(nodes[i].id));
        }
        state[i] = 1;
        if (nodes[i].parent) {
            const std::size_t p = index_of(*nodes[i].parent);
            if (nodes[i].kind == NodeKind::Candidate && nodes[p].kind != NodeKind::Candidate) {
                throw ShapeError("tree: candidate " + std::to_string(nodes[i].id) + " hangs off a prompt node");
            }
            visit(p);
        }
        state[i] = 2;
        if (nodes[i].kind == NodeKind::Candidate) {
            cand_index[i] = static_cast<int>(order.size());
            order.push_back(i);
        }
    };
    for (std::size_t i = 0; i < n; ++i) {
        visit(i);
    }
    for (std::size_t i : order) {
        s.parent.push_back(nodes[i].parent ? cand_index[index_of(*nodes[i].parent)] : -1);
        s.rank.push_back(nodes[i].rank);
        s.chain.push_back(0);
    }
    // Each chain is linear: offset 1 hangs off its host, offset o off offset o-1.
    std::map<int, std::vector<std::size_t>> chains; // host candidate index (-1 = root) -> offsets
    for (std::size_t i = 0; i < n; ++i) {
        if (nodes[i].kind != NodeKind::Prompt) {
            continue;
        }
        std::size_t cur = i;
        std::size_t steps = 0;
        while (nodes[cur].kind == NodeKind::Prompt) {
            if (!nodes[cur].parent) {
                break;
            }
            const std::size_t p = index_of(*nodes[cur].parent);
            if (nodes[p].kind == NodeKind::Prompt && nodes[p].offset + 1 != nodes[cur].offset) {
                throw ShapeError("tree: prompt offsets along a chain must be consecutive");
            }
            cur = p;
            ++steps;
            if (steps > n) {
                throw ShapeError("tree: cycle among prompt nodes");
            }
        }
        const int host = nodes[cur].kind == NodeKind::Candidate ? cand_index[cur] : -1;
        const std::size_t expected_offset = nodes[cur].kind == NodeKind::Candidate ? steps : steps + 1;
        if (nodes[i].offset != expected_offset) {
            throw ShapeError("tree: prompt node " + std::to_string(nodes[i].id) + " has offset " +
                             std::to_string(nodes[i].offset) + " but sits " + std::to_string(expected_offset) +
                             " steps from its host");
        }
        chains[host].push_back(nodes[i].offset);
    }
    for (auto & [host, offsets] : chains) {
        std::sort(offsets.begin(), offsets.end());
        for (std::size_t k = 0; k < offsets.size(); ++k) {
            if (offsets[k] != k + 1) {
                throw ShapeError("tree: a chain branches or skips an offset");
            }
        }
        if (host < 0) {
            s.root_chain = offsets.size();
        } else {
            s.chain[static_cast<std::size_t>(host)] = offsets.size();
        }
    }
    return from_shape(m, s);
}

std::size_t SparseTree::max_candidate_depth() const {
    std::size_t d = 0;
    for (std::size_t i = 0; i < n_c_; ++i) {
        d = std::max(d, nodes_[i].depth);
    }
    return d;
}

std::size_t SparseTree::chain_length(std::optional<std::size_t> host) const {
    return chain(host).size();
}

std::vector<std::size_t> SparseTree::chain(std::optional<std::size_t> host) const {
    std::vector<std::size_t> out;
    for (std::size_t i = n_c_; i < nodes_.size(); ++i) {
        if (nodes_[i].host == host) {
            out.push_back(i);
        }
    }
    return out;
}

std::vector<std::size_t> SparseTree::children(std::optional<std::size_t> parent) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n_c_; ++i) {
        if (nodes_[i].parent == parent) {
            out.push_back(i);
        }
    }
    std::sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) { return nodes_[a].rank < nodes_[b].rank; });
    return out;
}

std::vector<std::size_t> SparseTree::path(std::size_t id) const {
    std::vector<std::size_t> out;
    std::optional<std::size_t> cur = id;
    while (cur) {
        if (nodes_.at(*cur).kind != NodeKind::Candidate) {
            throw ShapeError("tree path requested through a prompt node");
        }
        out.push_back(*cur);
        cur = nodes_[*cur].parent;
    }
    std::reverse(out.begin(), out.end());
    return out;
}

void SparseTree::validate() const {
    for (std::size_t i = 0; i < n_c_; ++i) {
        const TreeNode & n = nodes_[i];
        if (n.kind != NodeKind::Candidate || n.rank == 0) {
            throw ShapeError("tree: candidate " + std::to_string(i) + " is malformed");
        }
        if (n.depth > m_) {
            throw ShapeError("tree: candidate depth " + std::to_string(n.depth) + " exceeds m = " + std::to_string(m_));
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (nodes_[j].parent == n.parent && nodes_[j].rank == n.rank) {
                throw ShapeError("tree: siblings share rank " + std::to_string(n.rank));
            }
        }
    }
    std::map<std::optional<std::size_t>, std::size_t> chain_len;
    for (std::size_t i = n_c_; i < nodes_.size(); ++i) {
        if (nodes_[i].kind != NodeKind::Prompt) {
            throw ShapeError("tree: candidates must precede prompt nodes");
        }
        chain_len[nodes_[i].host] += 1;
    }
    for (const auto & [host, len] : chain_len) {
        if (len > m_) {
            throw ShapeError("tree: a prompt chain of length " + std::to_string(len) + " exceeds m = " +
                             std::to_string(m_));
        }
    }
}

double expected_accept_f(const SparseTree & tree, const AcceptanceProfile & profile, std::optional<std::size_t> max_depth) {
    const std::size_t limit = max_depth.value_or(std::numeric_limits<std::size_t>::max());
    std::vector<double> path(tree.n_c(), 0.0);
    double f = 0.0;
    for (std::size_t i = 0; i < tree.n_c(); ++i) {
        const TreeNode & n = tree.node(i);
        path[i] = (n.parent ? path[*n.parent] : 1.0) * profile.at(n.depth, n.rank);
        if (n.depth <= limit) {
            f += path[i];
        }
    }
    return f;
}

FinalNodeDistribution final_node_distribution(const SparseTree & tree, const AcceptanceProfile & profile,
                                              std::optional<std::size_t> max_depth) {
    const std::size_t limit = max_depth.value_or(std::numeric_limits<std::size_t>::max());
    const std::size_t n = tree.n_c();
    std::vector<double> p(n);
    std::vector<double> path(n);
    std::vector<double> child_sum(n, 0.0);
    double root_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const TreeNode & node = tree.node(i);
        p[i] = profile.at(node.depth, node.rank);
        path[i] = (node.parent ? path[*node.parent] : 1.0) * p[i];
        if (node.depth > limit) {
            continue;
        }
        if (node.parent) {
            child_sum[*node.parent] += p[i];
        } else {
            root_sum += p[i];
        }
    }
    FinalNodeDistribution out;
    out.none = 1.0 - root_sum;
    for (std::size_t i = 0; i < n; ++i) {
        if (tree.node(i).depth <= limit) {
            out.by_node[i] = path[i] * (1.0 - child_sum[i]);
        }
    }
    return out;
}

TransitionModel transition_matrix(const SparseTree & tree, const AcceptanceProfile & profile) {
    const AcceptanceProfile prof = profile.clamped();
    const ShapeModel sm = shape_model(tree.shape(), prof, tree.m());
    TransitionModel out;
    out.P = sm.P;
    out.f = sm.f;
    out.steady = steady_state(out.P);
    return out;
}

std::vector<double> steady_state(const std::vector<std::vector<double>> & P, double tol, std::size_t max_iter) {
    const std::size_t s = P.size();
    if (s == 0) {
        throw ShapeError("steady_state: empty matrix");
    }
    for (const auto & row : P) {
        if (row.size() != s) {
            throw ShapeError("steady_state: matrix is not square");
        }
        const double sum = std::accumulate(row.begin(), row.end(), 0.0);
        if (std::abs(sum - 1.0) > 1e-9) {
            throw DomainError("steady_state: row sums to " + std::to_string(sum));
        }
    }
    std::vector<double> pi(s, 1.0 / static_cast<double>(s));
    std::vector<double> next(s);
    double residual = 0.0;
    for (std::size_t it = 0; it < max_iter; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < s; ++j) {
                next[j] += pi[i] * P[i][j];
            }
        }
        residual = 0.0;
        for (std::size_t j = 0; j < s; ++j) {
            residual = std::max(residual, std::abs(next[j] - pi[j]));
        }
        if (residual < tol) {
            const double total = std::accumulate(next.begin(), next.end(), 0.0);
            for (auto & v : next) {
                v /= total;
            }
            return next;
        }
        // Lazy step (I + P) / 2 keeps periodic chains convergent.
        for (std::size_t j = 0; j < s; ++j) {
            pi[j] = 0.5 * (pi[j] + next[j]);
        }
    }
    throw NumericError("steady_state did not converge in " + std::to_string(max_iter) + " iterations", residual);
}

double amortized_R(const SparseTree & tree, const AcceptanceProfile & profile) {
    const TransitionModel tm = transition_matrix(tree, profile);
    double r = 0.0;
    for (std::size_t k = 0; k < tm.f.size(); ++k) {
        r += tm.steady[k] * tm.f[k];
    }
    return r;
}

SparseTree build_candidate_tree(const AcceptanceProfile & profile, std::size_t n_c, std::size_t max_depth,
                                const std::vector<double> * depth_weights) {
    if (n_c == 0) {
        throw ConfigError("candidate tree needs n_c >= 1");
    }
    if (max_depth == 0 || max_depth > profile.m) {
        throw ProfileError("depth limit " + std::to_string(max_depth) + " outside the profile range 1.." +
                           std::to_string(profile.m));
    }
    if (depth_weights != nullptr && depth_weights->size() < max_depth) {
        throw ShapeError("candidate tree: fewer depth weights than depths");
    }
    return SparseTree::from_shape(max_depth, greedy_shape(profile, n_c, max_depth, depth_weights));
}

SparseTree append_prompt_chains(const SparseTree & tree, std::size_t m) {
    if (m == 0) {
        return tree;
    }
    Shape s = tree.shape();
    s.root_chain = m;
    std::fill(s.chain.begin(), s.chain.end(), m);
    return SparseTree::from_shape(std::max(m, tree.max_candidate_depth()), s);
}

double delta_F(double p_c, double f_d, double f_dm1) {
    return p_c * (f_d - f_dm1);
}

SparseTree prune_prompt_tokens(const SparseTree & tree, std::size_t prompt_budget, const AcceptanceProfile & profile,
                               bool min_one_floor) {
    Shape s = tree.shape();
    prune_shape(s, prompt_budget, profile, tree.m(), min_one_floor);
    return SparseTree::from_shape(tree.m(), s);
}

SparseTree construct_optimal_tree(std::size_t n, const AcceptanceProfile & profile, std::size_t m,
                                  const TreeSearchOptions & options) {
    if (m == 0) {
        throw ConfigError("tree construction needs m >= 1");
    }
    if (m > profile.m) {
        throw ProfileError("profile covers " + std::to_string(profile.m) + " distances, tree needs " +
                           std::to_string(m));
    }
    if (n < 2) {
        throw InfeasibleError("tree budget must be at least 2");
    }
    const AcceptanceProfile prof = profile.clamped();
    const bool floor = options.min_one_floor;

    std::vector<std::pair<std::size_t, Scored>> splits;
    for (std::size_t n_c = 1; n_c + m <= n; ++n_c) {
        const std::size_t n_p = n - n_c;
        if (n_p > m * (n_c + 1) || n_p < m + (floor ? n_c : 0)) {
            continue;
        }
        std::optional<Scored> best;
        auto consider = [&](const Shape & cand) {
            Shape s = cand;
            s.root_chain = m;
            std::fill(s.chain.begin(), s.chain.end(), m);
            prune_shape(s, n_p, prof, m, floor);
            const double r = shape_R(s, prof, m);
            if (!best || r > best->R + 1e-15) {
                best = Scored{s, r};
            }
        };
        for (std::size_t depth_limit = 1; depth_limit <= m; ++depth_limit) {
            try {
                consider(greedy_shape(prof, n_c, depth_limit, nullptr));
            } catch (const CapacityError &) {
            }
        }
        if (!best) {
            continue;
        }
        // Rebuild with depths weighted by how often the stationary chain
        // speculates that deep.
        for (std::size_t round = 0; round < options.reweight_rounds; ++round) {
            const auto pi = shape_steady(best->shape, prof, m);
            std::vector<double> w(m, 0.0);
            for (std::size_t d = 1; d <= m; ++d) {
                for (std::size_t k = d; k <= m; ++k) {
                    w[d - 1] += pi[k];
                }
            }
            const double before = best->R;
            try {
                consider(greedy_shape(prof, n_c, m, &w));
            } catch (const CapacityError &) {
                break;
            }
            if (best->R <= before) {
                break;
            }
        }
        splits.emplace_back(n_c, std::move(*best));
    }
    if (splits.empty()) {
        throw InfeasibleError("no feasible split of " + std::to_string(n) + " nodes with m = " + std::to_string(m) +
                              " and K = " + std::to_string(prof.K));
    }

    const bool full = n <= options.full_polish_limit;
    std::vector<std::size_t> order(splits.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return splits[a].second.R > splits[b].second.R; });
    const std::size_t n_polish = full ? order.size() : std::min(order.size(), options.polished_splits);
    for (std::size_t i = 0; i < n_polish; ++i) {
        polish(splits[order[i]].second, prof, m, floor, full);
    }

    const Scored * winner = nullptr;
    for (const auto & [n_c, sc] : splits) {
        if (winner == nullptr || sc.R >= winner->R - 1e-15) {
            winner = &sc;
        }
    }
    return SparseTree::from_shape(m, winner->shape);
}

TreeLayout tree_attention_layout(const SparseTree & tree, std::size_t committed_len) {
    const std::size_t rows = tree.size() + 1;
    TreeLayout out;
    out.mask = Matrix(rows, committed_len + rows, kMaskBlocked);
    out.position_ids.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c <= committed_len; ++c) {
            out.mask(r, c) = 0.0f; // committed context and the root
        }
        if (r == 0) {
            out.position_ids[0] = static_cast<std::int32_t>(committed_len);
            continue;
        }
        const TreeNode & node = tree.node(r - 1);
        out.position_ids[r] = static_cast<std::int32_t>(committed_len + node.depth);
        std::optional<std::size_t> cur = node.id;
        while (cur) {
            out.mask(r, committed_len + 1 + *cur) = 0.0f;
            cur = tree.node(*cur).parent;
        }
    }
    for (std::size_t i = 0; i < tree.n_c(); ++i) {
        out.candidate_paths.push_back(tree.path(i));
    }
    return out;
}

SimulationResult simulate_acceptance(const SparseTree & tree, const AcceptanceProfile & profile, std::size_t steps,
                                     std::mt19937_64 & rng) {
    const std::size_t m = tree.m();
    std::vector<double> f(m + 1);
    for (std::size_t k = 0; k <= m; ++k) {
        f[k] = expected_accept_f(tree, profile, k);
    }
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<std::size_t> visits(m + 1, 0);
    std::size_t state = std::min(tree.chain_length(std::nullopt), m);
    double committed = 0.0;
    double expected = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
        ++visits[state];
        expected += 1.0 + f[state];
        std::optional<std::size_t> cur;
        std::size_t depth = 0;
        while (depth < state) {
            const std::size_t d = depth + 1;
            const double u = unif(rng);
            double acc = 0.0;
            std::size_t rank = 0;
            for (std::size_t k = 1; k <= profile.K; ++k) {
                acc += profile.at(d, k);
                if (u < acc) {
                    rank = k;
                    break;
                }
            }
            if (rank == 0) {
                break;
            }
            std::optional<std::size_t> next;
            for (std::size_t c : tree.children(cur)) {
                if (tree.node(c).rank == rank) {
                    next = c;
                }
            }
            if (!next) {
                break;
            }
            cur = next;
            depth = d;
        }
        committed += 1.0 + static_cast<double>(depth);
        state = std::min(tree.chain_length(cur), m);
    }
    SimulationResult out;
    out.state_frequency.resize(m + 1);
    for (std::size_t k = 0; k <= m; ++k) {
        out.state_frequency[k] = static_cast<double>(visits[k]) / static_cast<double>(steps);
    }
    out.mean_committed = committed / static_cast<double>(steps);
    out.expected_committed = expected / static_cast<double>(steps);
    return out;
}

} // namespace ppd
