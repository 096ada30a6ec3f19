#pragma once

#include "ppd/numerics.hpp"

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

namespace ppd {

struct NodeId {
    std::uint32_t index = 0;

    friend auto operator<=>(NodeId, NodeId) = default;
};

struct RowRef {
    NodeId source;
    std::size_t row = 0;
};

// Which way round the per-row KL is taken when one side is a fixed target.
enum class KlDirection {
    StudentFirst, // KL(student || target)
    TargetFirst,  // KL(target || student)
};

// Tape of primitive applications with reverse-mode differentiation.
//
// Nodes are appended in evaluation order, so creation order is a valid
// topological order. Gradients flow through every node that depends on a
// trainable leaf; only trainable leaves are reported by reverse_gradients().
// One graph is meant for one forward/backward pass on one thread.
class Graph {
public:
    Graph() = default;
    Graph(const Graph &) = delete;
    Graph & operator=(const Graph &) = delete;

    NodeId constant(Matrix value);
    // Borrowed storage; `value` must outlive the graph.
    NodeId constant_ref(const Matrix & value);
    // Borrowed storage; gradients are reported for it when `trainable`.
    NodeId leaf(const Matrix & value, bool trainable);

    const Matrix & value(NodeId id) const;
    bool requires_grad(NodeId id) const;
    bool is_trainable(NodeId id) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    // x + broadcast of the 1 x cols row `bias`
    NodeId add_row(NodeId x, NodeId bias);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId x, float factor);
    NodeId gelu(NodeId x);
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, float eps);
    NodeId gather_rows(std::span<const RowRef> rows, std::size_t cols);
    NodeId concat_rows(NodeId top, NodeId bottom);
    // Output row g is the arithmetic mean of rows groups[g] of x.
    NodeId average_row_groups(NodeId x, std::vector<std::vector<std::size_t>> groups);
    // Scaled dot-product attention split across `n_heads` column blocks.
    // q: n x d, k and v: s x d, mask: n x s additive.
    NodeId attention(NodeId q, NodeId k, NodeId v, const Matrix & mask, std::size_t n_heads);
    // Column vector of per-row KL between softmax(logits) and `target_probs`.
    NodeId kl_rows(NodeId logits, const Matrix & target_probs, KlDirection direction);
    // 1 x 1 node holding sum_i weights[i] * x_flat[i].
    NodeId weighted_sum(NodeId x, std::span<const float> weights);
    NodeId sum(NodeId x);

    // Exact reverse-mode gradients of the scalar `loss` for every trainable leaf.
    std::map<NodeId, Matrix> reverse_gradients(NodeId loss);

private:
    using Backward = std::function<void(Graph &, const Matrix & grad_out)>;

    struct Node {
        Matrix owned;
        const Matrix * borrowed = nullptr;
        bool requires_grad = false;
        bool trainable = false;
        Backward backward;
        Matrix grad;
        bool has_grad = false;
    };

    NodeId push(Matrix value, bool requires_grad, Backward backward);
    void accumulate(NodeId id, const Matrix & grad);
    Matrix & grad_slot(NodeId id);
    const Node & node(NodeId id) const;

    std::vector<Node> nodes_;
};

} // namespace ppd
