#include "ppd/graph.hpp"

#include "ppd/errors.hpp"

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace ppd {

namespace {

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::OuterStride<>;
using ConstBlock = Eigen::Map<const RowMajor, 0, Strided>;
using MutBlock = Eigen::Map<RowMajor, 0, Strided>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Matrix & m) {
    return ConstMap(m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

MutMap view(Matrix & m) {
    return MutMap(m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

ConstBlock cols_of(const Matrix & m, std::size_t first, std::size_t count) {
    return ConstBlock(m.data().data() + first, static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(count),
                      Strided(static_cast<Eigen::Index>(m.cols())));
}

MutBlock cols_of(Matrix & m, std::size_t first, std::size_t count) {
    return MutBlock(m.data().data() + first, static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(count),
                    Strided(static_cast<Eigen::Index>(m.cols())));
}

void require_same_shape(const Matrix & a, const Matrix & b, const char * op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
    }
}

} // namespace

const Graph::Node & Graph::node(NodeId id) const {
    if (id.index >= nodes_.size()) {
        throw ShapeError("graph: unknown node " + std::to_string(id.index));
    }
    return nodes_[id.index];
}

NodeId Graph::push(Matrix value, bool requires_grad, Backward backward) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) {
        n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Graph::constant(Matrix value) {
    return push(std::move(value), false, nullptr);
}

NodeId Graph::constant_ref(const Matrix & value) {
    Node n;
    n.borrowed = &value;
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Graph::leaf(const Matrix & value, bool trainable) {
    Node n;
    n.borrowed = &value;
    n.requires_grad = trainable;
    n.trainable = trainable;
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Matrix & Graph::value(NodeId id) const {
    const Node & n = node(id);
    return n.borrowed != nullptr ? *n.borrowed : n.owned;
}

bool Graph::requires_grad(NodeId id) const {
    return node(id).requires_grad;
}

bool Graph::is_trainable(NodeId id) const {
    return node(id).trainable;
}

Matrix & Graph::grad_slot(NodeId id) {
    Node & n = nodes_[id.index];
    if (!n.has_grad) {
        const Matrix & v = value(id);
        n.grad = Matrix(v.rows(), v.cols());
        n.has_grad = true;
    }
    return n.grad;
}

void Graph::accumulate(NodeId id, const Matrix & grad) {
    if (!nodes_[id.index].requires_grad) {
        return;
    }
    Matrix & slot = grad_slot(id);
    view(slot) += view(grad);
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    Matrix out = ppd::matmul(value(a), value(b));
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b](Graph & g, const Matrix & dy) {
        if (g.requires_grad(a)) {
            g.accumulate(a, matmul_bt(dy, g.value(b)));
        }
        if (g.requires_grad(b)) {
            g.accumulate(b, matmul_at(g.value(a), dy));
        }
    });
}

NodeId Graph::add(NodeId a, NodeId b) {
    require_same_shape(value(a), value(b), "add");
    Matrix out = value(a);
    view(out) += view(value(b));
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b](Graph & g, const Matrix & dy) {
        g.accumulate(a, dy);
        g.accumulate(b, dy);
    });
}

NodeId Graph::add_row(NodeId x, NodeId bias) {
    const Matrix & xv = value(x);
    const Matrix & bv = value(bias);
    if (bv.rows() != 1 || bv.cols() != xv.cols()) {
        throw ShapeError("add_row: bias must be 1 x " + std::to_string(xv.cols()));
    }
    Matrix out = xv;
    view(out).rowwise() += view(bv).row(0);
    const bool rg = requires_grad(x) || requires_grad(bias);
    return push(std::move(out), rg, [x, bias](Graph & g, const Matrix & dy) {
        g.accumulate(x, dy);
        if (g.requires_grad(bias)) {
            Matrix db(1, dy.cols());
            view(db).row(0) = view(dy).colwise().sum();
            g.accumulate(bias, db);
        }
    });
}

NodeId Graph::mul(NodeId a, NodeId b) {
    require_same_shape(value(a), value(b), "mul");
    Matrix out = value(a);
    view(out).array() *= view(value(b)).array();
    const bool rg = requires_grad(a) || requires_grad(b);
    return push(std::move(out), rg, [a, b](Graph & g, const Matrix & dy) {
        if (g.requires_grad(a)) {
            Matrix da = dy;
            view(da).array() *= view(g.value(b)).array();
            g.accumulate(a, da);
        }
        if (g.requires_grad(b)) {
            Matrix db = dy;
            view(db).array() *= view(g.value(a)).array();
            g.accumulate(b, db);
        }
    });
}

NodeId Graph::scale(NodeId x, float factor) {
    Matrix out = value(x);
    view(out) *= factor;
    return push(std::move(out), requires_grad(x), [x, factor](Graph & g, const Matrix & dy) {
        Matrix dx = dy;
        view(dx) *= factor;
        g.accumulate(x, dx);
    });
}

NodeId Graph::gelu(NodeId x) {
    Matrix out = value(x);
    for (auto & v : out.data()) {
        v = ppd::gelu(v);
    }
    return push(std::move(out), requires_grad(x), [x](Graph & g, const Matrix & dy) {
        Matrix dx = dy;
        auto xs = g.value(x).data();
        auto ds = dx.data();
        for (std::size_t i = 0; i < ds.size(); ++i) {
            ds[i] *= gelu_grad(xs[i]);
        }
        g.accumulate(x, dx);
    });
}

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId bias, float eps) {
    const Matrix & xv = value(x);
    const Matrix & gv = value(gain);
    const Matrix & bv = value(bias);
    const std::size_t n = xv.rows();
    const std::size_t d = xv.cols();
    if (gv.rows() != 1 || gv.cols() != d || bv.rows() != 1 || bv.cols() != d) {
        throw ShapeError("layer_norm: gain/bias must be 1 x " + std::to_string(d));
    }
    auto normed = std::make_shared<Matrix>(n, d);
    auto inv_std = std::make_shared<std::vector<float>>(n);
    Matrix out(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        auto xr = xv.row(r);
        double mean = 0.0;
        for (float v : xr) {
            mean += v;
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (float v : xr) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(d);
        const double denom = std::sqrt(var + eps);
        const double inv = denom > 0.0 ? 1.0 / denom : 0.0;
        (*inv_std)[r] = static_cast<float>(inv);
        auto nr = normed->row(r);
        auto yr = out.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            nr[c] = static_cast<float>((xr[c] - mean) * inv);
            yr[c] = nr[c] * gv(0, c) + bv(0, c);
        }
    }
    const bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
    return push(std::move(out), rg, [x, gain, bias, normed, inv_std](Graph & g, const Matrix & dy) {
        const std::size_t n = dy.rows();
        const std::size_t d = dy.cols();
        if (g.requires_grad(gain)) {
            Matrix dg(1, d);
            view(dg).row(0) = (view(dy).array() * view(*normed).array()).colwise().sum();
            g.accumulate(gain, dg);
        }
        if (g.requires_grad(bias)) {
            Matrix db(1, d);
            view(db).row(0) = view(dy).colwise().sum();
            g.accumulate(bias, db);
        }
        if (g.requires_grad(x)) {
            const Matrix & gv = g.value(gain);
            Matrix dx(n, d);
            for (std::size_t r = 0; r < n; ++r) {
                auto dyr = dy.row(r);
                auto nr = normed->row(r);
                double mean_dn = 0.0;
                double mean_dn_n = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    const double dn = static_cast<double>(dyr[c]) * gv(0, c);
                    mean_dn += dn;
                    mean_dn_n += dn * nr[c];
                }
                mean_dn /= static_cast<double>(d);
                mean_dn_n /= static_cast<double>(d);
                auto dxr = dx.row(r);
                const double inv = (*inv_std)[r];
                for (std::size_t c = 0; c < d; ++c) {
                    const double dn = static_cast<double>(dyr[c]) * gv(0, c);
                    dxr[c] = static_cast<float>(inv * (dn - mean_dn - nr[c] * mean_dn_n));
                }
            }
            g.accumulate(x, dx);
        }
    });
}

NodeId Graph::gather_rows(std::span<const RowRef> rows, std::size_t cols) {
    Matrix out(rows.size(), cols);
    bool rg = false;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Matrix & src = value(rows[i].source);
        if (src.cols() != cols || rows[i].row >= src.rows()) {
            throw ShapeError("gather_rows: row " + std::to_string(rows[i].row) + " out of range or width mismatch");
        }
        auto dst = out.row(i);
        auto s = src.row(rows[i].row);
        std::copy(s.begin(), s.end(), dst.begin());
        rg = rg || requires_grad(rows[i].source);
    }
    std::vector<RowRef> refs(rows.begin(), rows.end());
    return push(std::move(out), rg, [refs = std::move(refs)](Graph & g, const Matrix & dy) {
        for (std::size_t i = 0; i < refs.size(); ++i) {
            if (!g.requires_grad(refs[i].source)) {
                continue;
            }
            Matrix & slot = g.grad_slot(refs[i].source);
            auto dst = slot.row(refs[i].row);
            auto src = dy.row(i);
            for (std::size_t c = 0; c < dst.size(); ++c) {
                dst[c] += src[c];
            }
        }
    });
}

NodeId Graph::concat_rows(NodeId top, NodeId bottom) {
    Matrix out = value(top);
    out.append_rows(value(bottom));
    const std::size_t top_rows = value(top).rows();
    const bool rg = requires_grad(top) || requires_grad(bottom);
    return push(std::move(out), rg, [top, bottom, top_rows](Graph & g, const Matrix & dy) {
        const std::size_t cols = dy.cols();
        if (g.requires_grad(top)) {
            Matrix dt(top_rows, cols,
                      std::vector<float>(dy.data().begin(), dy.data().begin() + static_cast<long>(top_rows * cols)));
            g.accumulate(top, dt);
        }
        if (g.requires_grad(bottom)) {
            Matrix db(dy.rows() - top_rows, cols,
                      std::vector<float>(dy.data().begin() + static_cast<long>(top_rows * cols), dy.data().end()));
            g.accumulate(bottom, db);
        }
    });
}

NodeId Graph::average_row_groups(NodeId x, std::vector<std::vector<std::size_t>> groups) {
    const Matrix & xv = value(x);
    Matrix out(groups.size(), xv.cols());
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        if (groups[gi].empty()) {
            throw ShapeError("average_row_groups: empty group");
        }
        auto dst = out.row(gi);
        for (std::size_t r : groups[gi]) {
            if (r >= xv.rows()) {
                throw ShapeError("average_row_groups: row out of range");
            }
            auto src = xv.row(r);
            for (std::size_t c = 0; c < dst.size(); ++c) {
                dst[c] += src[c];
            }
        }
        const float inv = 1.0f / static_cast<float>(groups[gi].size());
        for (auto & v : dst) {
            v *= inv;
        }
    }
    const std::size_t rows = xv.rows();
    return push(std::move(out), requires_grad(x), [x, rows, groups = std::move(groups)](Graph & g, const Matrix & dy) {
        Matrix dx(rows, dy.cols());
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            const float inv = 1.0f / static_cast<float>(groups[gi].size());
            auto src = dy.row(gi);
            for (std::size_t r : groups[gi]) {
                auto dst = dx.row(r);
                for (std::size_t c = 0; c < dst.size(); ++c) {
                    dst[c] += src[c] * inv;
                }
            }
        }
        g.accumulate(x, dx);
    });
}

NodeId Graph::attention(NodeId q, NodeId k, NodeId v, const Matrix & mask, std::size_t n_heads) {
    const Matrix & qv = value(q);
    const Matrix & kv = value(k);
    const Matrix & vv = value(v);
    const std::size_t n = qv.rows();
    const std::size_t s = kv.rows();
    const std::size_t d = qv.cols();
    if (kv.cols() != d || vv.cols() != d || vv.rows() != s) {
        throw ShapeError("attention: q/k/v widths disagree");
    }
    if (mask.rows() != n || mask.cols() != s) {
        throw ShapeError("attention: mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                         ", expected " + std::to_string(n) + "x" + std::to_string(s));
    }
    if (n_heads == 0 || d % n_heads != 0) {
        throw ShapeError("attention: width not divisible by head count");
    }
    const std::size_t dh = d / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    // Each output row is computed from its own query with a fixed summation
    // order over visible keys, so a row's result never depends on which
    // other rows share the pass.
    auto probs = std::make_shared<std::vector<RowMajor>>(n_heads);
    Matrix out(n, d);
    std::vector<std::size_t> open;
    std::vector<float> acc(dh);
    for (std::size_t h = 0; h < n_heads; ++h) {
        RowMajor p = RowMajor::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(s));
        for (std::size_t r = 0; r < n; ++r) {
            open.clear();
            auto mrow = mask.row(r);
            for (std::size_t c = 0; c < s; ++c) {
                if (mrow[c] > kMaskBlockedThreshold) {
                    open.push_back(c);
                }
            }
            if (open.empty()) {
                throw DomainError("attention: row " + std::to_string(r) + " cannot attend to anything");
            }
            const float * qr = qv.row(r).data() + h * dh;
            float max_v = -std::numeric_limits<float>::infinity();
            for (std::size_t c : open) {
                const float * kr = kv.row(c).data() + h * dh;
                float dot = 0.0f;
                for (std::size_t t = 0; t < dh; ++t) {
                    dot += qr[t] * kr[t];
                }
                const float sc = dot * scale + mrow[c];
                p(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = sc;
                max_v = std::max(max_v, sc);
            }
            double denom = 0.0;
            for (std::size_t c : open) {
                float & e = p(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
                e = std::exp(e - max_v);
                denom += e;
            }
            const float inv = static_cast<float>(1.0 / denom);
            std::fill(acc.begin(), acc.end(), 0.0f);
            for (std::size_t c : open) {
                float & e = p(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
                e *= inv;
                const float * vr = vv.row(c).data() + h * dh;
                for (std::size_t t = 0; t < dh; ++t) {
                    acc[t] += e * vr[t];
                }
            }
            std::copy(acc.begin(), acc.end(), out.row(r).begin() + static_cast<long>(h * dh));
        }
        (*probs)[h] = std::move(p);
    }

    const bool rg = requires_grad(q) || requires_grad(k) || requires_grad(v);
    return push(std::move(out), rg, [q, k, v, probs, n_heads, dh, scale](Graph & g, const Matrix & dy) {
        const Matrix & qv = g.value(q);
        const Matrix & kv = g.value(k);
        const Matrix & vv = g.value(v);
        Matrix dq(qv.rows(), qv.cols());
        Matrix dk(kv.rows(), kv.cols());
        Matrix dv(vv.rows(), vv.cols());
        for (std::size_t h = 0; h < n_heads; ++h) {
            const RowMajor & p = (*probs)[h];
            const ConstBlock dyh = cols_of(dy, h * dh, dh);
            cols_of(dv, h * dh, dh).noalias() = p.transpose() * dyh;
            RowMajor dp = dyh * cols_of(vv, h * dh, dh).transpose();
            // softmax backward: dS = P * (dP - rowsum(dP * P))
            Eigen::VectorXf row_dot = (dp.array() * p.array()).rowwise().sum();
            dp.colwise() -= row_dot;
            dp.array() *= p.array();
            dp *= scale;
            cols_of(dq, h * dh, dh).noalias() = dp * cols_of(kv, h * dh, dh);
            cols_of(dk, h * dh, dh).noalias() = dp.transpose() * cols_of(qv, h * dh, dh);
        }
        g.accumulate(q, dq);
        g.accumulate(k, dk);
        g.accumulate(v, dv);
    });
}

NodeId Graph::kl_rows(NodeId logits, const Matrix & target_probs, KlDirection direction) {
    const Matrix & z = value(logits);
    require_same_shape(z, target_probs, "kl_rows");
    const std::size_t n = z.rows();
    const std::size_t w = z.cols();
    auto student = std::make_shared<Matrix>(n, w);
    auto log_ratio = std::make_shared<Matrix>(n, w);
    auto target = std::make_shared<Matrix>(target_probs);
    Matrix out(n, 1);
    for (std::size_t r = 0; r < n; ++r) {
        const std::vector<float> log_s = log_softmax(z.row(r));
        auto t = target_probs.row(r);
        auto sr = student->row(r);
        auto lr = log_ratio->row(r);
        double kl = 0.0;
        for (std::size_t c = 0; c < w; ++c) {
            sr[c] = std::exp(log_s[c]);
            if (direction == KlDirection::StudentFirst) {
                if (t[c] <= 0.0f) {
                    throw DomainError("kl_rows: target has zero mass where the student is positive");
                }
                lr[c] = log_s[c] - std::log(t[c]);
                kl += static_cast<double>(sr[c]) * lr[c];
            } else if (t[c] > 0.0f) {
                kl += static_cast<double>(t[c]) * (std::log(static_cast<double>(t[c])) - log_s[c]);
            }
        }
        out(r, 0) = static_cast<float>(kl);
    }
    return push(std::move(out), requires_grad(logits),
                [logits, student, log_ratio, target, direction](Graph & g, const Matrix & dy) {
                    const std::size_t n = student->rows();
                    const std::size_t w = student->cols();
                    Matrix dz(n, w);
                    for (std::size_t r = 0; r < n; ++r) {
                        auto s = student->row(r);
                        auto dzr = dz.row(r);
                        const float scale_r = dy(r, 0);
                        if (direction == KlDirection::StudentFirst) {
                            auto lr = log_ratio->row(r);
                            double value = 0.0;
                            for (std::size_t c = 0; c < w; ++c) {
                                value += static_cast<double>(s[c]) * lr[c];
                            }
                            for (std::size_t c = 0; c < w; ++c) {
                                dzr[c] = static_cast<float>(scale_r * s[c] * (lr[c] - value));
                            }
                        } else {
                            auto t = target->row(r);
                            for (std::size_t c = 0; c < w; ++c) {
                                dzr[c] = scale_r * (s[c] - t[c]);
                            }
                        }
                    }
                    g.accumulate(logits, dz);
                });
}

NodeId Graph::weighted_sum(NodeId x, std::span<const float> weights) {
    const Matrix & xv = value(x);
    if (weights.size() != xv.size()) {
        throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(xv.size()) + " entries");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += static_cast<double>(weights[i]) * xv.data()[i];
    }
    Matrix out(1, 1, static_cast<float>(acc));
    std::vector<float> w(weights.begin(), weights.end());
    const std::size_t rows = xv.rows();
    const std::size_t cols = xv.cols();
    return push(std::move(out), requires_grad(x), [x, w = std::move(w), rows, cols](Graph & g, const Matrix & dy) {
        Matrix dx(rows, cols, w);
        view(dx) *= dy(0, 0);
        g.accumulate(x, dx);
    });
}

NodeId Graph::sum(NodeId x) {
    const Matrix & xv = value(x);
    double acc = 0.0;
    for (float v : xv.data()) {
        acc += v;
    }
    const std::size_t rows = xv.rows();
    const std::size_t cols = xv.cols();
    return push(Matrix(1, 1, static_cast<float>(acc)), requires_grad(x), [x, rows, cols](Graph & g, const Matrix & dy) {
        g.accumulate(x, Matrix(rows, cols, dy(0, 0)));
    });
}

std::map<NodeId, Matrix> Graph::reverse_gradients(NodeId loss) {
    const Matrix & lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
        throw ShapeError("reverse_gradients: loss must be 1x1, got " + std::to_string(lv.rows()) + "x" +
                         std::to_string(lv.cols()));
    }
    for (auto & n : nodes_) {
        n.has_grad = false;
        n.grad = Matrix();
    }
    if (nodes_[loss.index].requires_grad) {
        grad_slot(loss)(0, 0) = 1.0f;
        for (std::size_t i = loss.index + 1; i-- > 0;) {
            Node & n = nodes_[i];
            if (!n.has_grad || !n.backward) {
                continue;
            }
            // Closures only touch gradients of earlier nodes, so n.grad stays put.
            n.backward(*this, n.grad);
        }
    }
    std::map<NodeId, Matrix> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].trainable) {
            continue;
        }
        const NodeId id{static_cast<std::uint32_t>(i)};
        if (nodes_[i].has_grad) {
            out.emplace(id, nodes_[i].grad);
        } else {
            const Matrix & v = value(id);
            out.emplace(id, Matrix(v.rows(), v.cols()));
        }
    }
    return out;
}

} // namespace ppd
