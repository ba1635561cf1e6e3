// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation over dense row-major tensors.
// A Graph is built fresh for every step; nodes are appended in creation order,
// so reverse creation order is a valid reverse topological order.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "muse/parameter.hpp"

namespace muse::ad {

enum class OpKind {
    Leaf,
    Constant,
    StopGradient,
    MatMul,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowBroadcast,
    Exp,
    Log,
    Gelu,
    Square,
    Sum,
    Mean,
    SoftmaxRows,
    LayerNorm,
    MeanPoolRows,
    MeanPoolBlocks,
    ConcatRows,
    GatherRows,
    Transpose,
    Reshape,
    AttentionScores,
    AttentionMix,
    RestrictRenormalize,
    KlRows,
    L2NormalizeRows,
    DivByScalar,
    CrossEntropyRows,
    Mse,
};

[[nodiscard]] std::string_view op_name(OpKind kind);

/// Cache-line aligned allocation. Vectorized kernels choose their peeling
/// from the buffer address, so a fixed alignment keeps results bitwise
/// reproducible from run to run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Plain dense value: shape + row-major values.
template <typename Real>
struct Tensor {
    Shape shape;
    std::vector<Real> values;

    Tensor() = default;
    Tensor(Shape s, std::vector<Real> v);
    explicit Tensor(Shape s) : shape(std::move(s)), values(numel(shape), Real(0)) {}
};

template <typename Real>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename Real>
class Var {
public:
    Var() = default;
    Var(Graph<Real>* graph, int id) : graph_(graph), id_(id) {}

    [[nodiscard]] Graph<Real>& graph() const { return *graph_; }
    [[nodiscard]] int id() const { return id_; }
    [[nodiscard]] bool valid() const { return graph_ != nullptr && id_ >= 0; }

    [[nodiscard]] const Shape& shape() const;
    [[nodiscard]] std::span<const Real> value() const;
    [[nodiscard]] std::size_t size() const { return value().size(); }
    /// Rows of the matrix view: product of all leading dimensions.
    [[nodiscard]] std::size_t rows() const;
    /// Columns of the matrix view: last dimension.
    [[nodiscard]] std::size_t cols() const;
    [[nodiscard]] bool requires_grad() const;
    /// Value of a single-element tensor.
    [[nodiscard]] Real item() const;

private:
    Graph<Real>* graph_ = nullptr;
    int id_ = -1;
};

/// Gradient buffers for one backward sweep. Buffers are allocated lazily.
template <typename Real>
class GradTable {
public:
    GradTable(const Graph<Real>& graph, std::size_t nodes) : graph_(&graph), grads_(nodes) {}

    /// Mutable gradient of node `id`, or an empty span when the node does not
    /// require a gradient (callers skip the accumulation in that case).
    std::span<Real> at(int id);
    [[nodiscard]] bool has(int id) const { return !grads_[static_cast<std::size_t>(id)].empty(); }
    Buffer<Real>& raw(int id) { return grads_[static_cast<std::size_t>(id)]; }

private:
    const Graph<Real>* graph_;
    std::vector<Buffer<Real>> grads_;
};

template <typename Real>
class Graph {
public:
    /// Called with the node's own forward value and its incoming gradient.
    using BackwardFn = std::function<void(std::span<const Real> out_value,
                                          std::span<const Real> out_grad, GradTable<Real>& grads)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<Real> constant(Shape shape, std::vector<Real> values);
    Var<Real> constant(const Tensor<Real>& t) { return constant(t.shape, t.values); }
    Var<Real> leaf(Shape shape, std::vector<Real> values, bool requires_grad = true);
    Var<Real> leaf(const Tensor<Real>& t, bool requires_grad = true) {
        return leaf(t.shape, t.values, requires_grad);
    }
    /// Leaf whose gradient additionally accumulates into `param.grad`.
    Var<Real> bind(Parameter<Real>& param, bool requires_grad = true);

    /// Reverse sweep from a single-element loss. Leaf gradients accumulate
    /// (+=) across calls; intermediate gradients are recomputed each call.
    void backward(Var<Real> loss);

    /// Accumulated gradient of a leaf (all zeros before the first backward).
    [[nodiscard]] std::span<const Real> grad(Var<Real> v) const;
    /// Zeroes every leaf gradient, including bound parameters.
    void zero_grads();

    // Op-author interface.
    Var<Real> emit(OpKind kind, Shape shape, Buffer<Real> value, std::vector<int> parents,
                   BackwardFn backward);

    [[nodiscard]] std::size_t size() const { return nodes_.size(); }
    [[nodiscard]] OpKind kind(int id) const { return node(id).kind; }
    [[nodiscard]] const std::vector<int>& parents(int id) const { return node(id).parents; }
    [[nodiscard]] const Shape& shape(int id) const { return node(id).shape; }
    [[nodiscard]] std::span<const Real> value(int id) const { return node(id).value; }
    [[nodiscard]] bool requires_grad(int id) const { return node(id).requires_grad; }

private:
    struct Node {
        OpKind kind = OpKind::Constant;
        Shape shape;
        Buffer<Real> value;
        std::vector<int> parents;
        BackwardFn backward;
        bool requires_grad = false;
        bool is_leaf = false;
        Buffer<Real> grad;  // accumulated leaf gradient
        Parameter<Real>* param = nullptr;
    };

    [[nodiscard]] const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations. Matrix ops view a tensor as [rows x cols] with cols = last dim.

/// y = x * w (+ b broadcast over rows).
template <typename Real>
Var<Real> linear_map(Var<Real> x, Var<Real> w, std::optional<Var<Real>> b = std::nullopt);
template <typename Real>
Var<Real> linear_map(Var<Real> x, Var<Real> w, Var<Real> b) {
    return linear_map(x, w, std::optional<Var<Real>>(b));
}
template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b);
template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b);
template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b);
template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b);
template <typename Real>
Var<Real> scale(Var<Real> a, Real factor);
template <typename Real>
Var<Real> add_row_broadcast(Var<Real> x, Var<Real> row);
template <typename Real>
Var<Real> exp(Var<Real> a);
/// Natural log; non-positive input is a numeric-domain error.
template <typename Real>
Var<Real> log(Var<Real> a);
/// Exact (erf) GELU.
template <typename Real>
Var<Real> gelu(Var<Real> a);
template <typename Real>
Var<Real> square(Var<Real> a);
template <typename Real>
Var<Real> sum(Var<Real> a);
template <typename Real>
Var<Real> mean(Var<Real> a);

/// Softmax over the last dimension with max subtraction. NaN/Inf input is a
/// numeric-domain error.
template <typename Real>
Var<Real> softmax_rows(Var<Real> logits);

/// Identity forward; contributes nothing to any ancestor in backward.
template <typename Real>
Var<Real> stop_gradient(Var<Real> x);

template <typename Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gain, Var<Real> bias, Real eps = Real(1e-5));

/// Mean of the selected rows -> shape [cols]. Empty subset is an argument error.
template <typename Real>
Var<Real> mean_pool_rows(Var<Real> x, std::span<const std::size_t> rows);

/// x is [groups*block x D]; returns [groups x D], each the mean of rows
/// [offset, offset+count) of its block.
template <typename Real>
Var<Real> mean_pool_blocks(Var<Real> x, std::size_t block, std::size_t offset, std::size_t count);

template <typename Real>
Var<Real> concat_rows(Var<Real> a, Var<Real> b);
/// Row gather; backward scatter-adds, so indices may repeat.
template <typename Real>
Var<Real> gather_rows(Var<Real> x, std::span<const std::size_t> index);
template <typename Real>
Var<Real> transpose(Var<Real> x);
template <typename Real>
Var<Real> reshape(Var<Real> x, Shape shape);

/// Per (sample, head) scaled dot products. q, k are [batch*tokens x heads*dk];
/// output is [batch*heads*tokens x tokens], block (b, h) = scale * Q_bh K_bh^T.
template <typename Real>
Var<Real> attention_scores(Var<Real> q, Var<Real> k, std::size_t batch, std::size_t heads,
                           Real scale);

/// Inverse layout of attention_scores: a is [batch*heads*tokens x tokens],
/// v is [batch*tokens x heads*dk]; output block (b, h) = A_bh V_bh.
template <typename Real>
Var<Real> attention_mix(Var<Real> a, Var<Real> v, std::size_t batch, std::size_t heads);

/// a is [groups*tokens x tokens]; keeps the leading `kept` rows/cols of each
/// group and renormalizes rows to sum 1. A kept row whose mass is < 1e-12 is
/// a numeric error (degenerate row).
template <typename Real>
Var<Real> restrict_renormalize(Var<Real> a, std::size_t tokens, std::size_t kept);

/// Mean over rows of KL(target_row || student_row) with 0 ln 0 = 0. `target`
/// is constant and has the student's size. Student entries <= 0 where the
/// target is positive are a numeric-domain error.
template <typename Real>
Var<Real> kl_rows(std::span<const Real> target, Var<Real> student);

template <typename Real>
Var<Real> l2_normalize_rows(Var<Real> x);

/// x / s for a single-element s.
template <typename Real>
Var<Real> div_by_scalar(Var<Real> x, Var<Real> s);

/// Mean over rows of -log softmax(logits_r restricted to allowed)[target_r].
/// `allowed` is row-major [rows x cols]; every target must be allowed.
template <typename Real>
Var<Real> cross_entropy_rows(Var<Real> logits, std::span<const std::size_t> targets,
                             std::span<const std::uint8_t> allowed);

/// Mean squared error against a constant target of equal size.
template <typename Real>
Var<Real> mse(Var<Real> a, std::span<const Real> target);

}  // namespace muse::ad
