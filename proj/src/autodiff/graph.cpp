// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include <numeric>
#include <sstream>

#include "muse/autodiff.hpp"
#include "muse/errors.hpp"

namespace muse {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::string_view subspace_name(Subspace s) {
    switch (s) {
        case Subspace::Topology: return "topology";
        case Subspace::Semantic: return "semantic";
        case Subspace::Backbone: return "backbone";
        case Subspace::Decoder: return "decoder";
        case Subspace::All: return "all";
    }
    return "unknown";
}

Subspace parse_subspace(std::string_view name) {
    for (auto s : {Subspace::Topology, Subspace::Semantic, Subspace::Backbone, Subspace::Decoder,
                   Subspace::All}) {
        if (subspace_name(s) == name) return s;
    }
    throw ArgumentError("unknown subspace '" + std::string(name) + "'");
}

}  // namespace muse

namespace muse::ad {

std::string_view op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Constant: return "constant";
        case OpKind::StopGradient: return "stop_gradient";
        case OpKind::MatMul: return "matmul";
        case OpKind::Linear: return "linear_map";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::AddRowBroadcast: return "add_row_broadcast";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Gelu: return "gelu";
        case OpKind::Square: return "square";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::SoftmaxRows: return "softmax_rows";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::MeanPoolRows: return "mean_pool_rows";
        case OpKind::MeanPoolBlocks: return "mean_pool_blocks";
        case OpKind::ConcatRows: return "concat_rows";
        case OpKind::GatherRows: return "gather_rows";
        case OpKind::Transpose: return "transpose";
        case OpKind::Reshape: return "reshape";
        case OpKind::AttentionScores: return "attention_scores";
        case OpKind::AttentionMix: return "attention_mix";
        case OpKind::RestrictRenormalize: return "restrict_renormalize";
        case OpKind::KlRows: return "kl_rows";
        case OpKind::L2NormalizeRows: return "l2_normalize_rows";
        case OpKind::DivByScalar: return "div_by_scalar";
        case OpKind::CrossEntropyRows: return "cross_entropy_rows";
        case OpKind::Mse: return "mse";
    }
    return "unknown";
}

template <typename Real>
Tensor<Real>::Tensor(Shape s, std::vector<Real> v) : shape(std::move(s)), values(std::move(v)) {
    if (numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_string(shape) + " holds " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
}

template <typename Real>
const Shape& Var<Real>::shape() const {
    return graph_->shape(id_);
}

template <typename Real>
std::span<const Real> Var<Real>::value() const {
    return graph_->value(id_);
}

template <typename Real>
std::size_t Var<Real>::rows() const {
    const auto& s = shape();
    if (s.empty()) return 1;
    return numel(s) / s.back();
}

template <typename Real>
std::size_t Var<Real>::cols() const {
    const auto& s = shape();
    return s.empty() ? 1 : s.back();
}

template <typename Real>
bool Var<Real>::requires_grad() const {
    return graph_->requires_grad(id_);
}

template <typename Real>
Real Var<Real>::item() const {
    auto v = value();
    if (v.size() != 1) {
        throw ArgumentError("item() on tensor of shape " + shape_string(shape()));
    }
    return v[0];
}

template <typename Real>
std::span<Real> GradTable<Real>::at(int id) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) {
        if (!graph_->requires_grad(id)) return {};
        g.assign(graph_->value(id).size(), Real(0));
    }
    return g;
}

template <typename Real>
Var<Real> Graph<Real>::constant(Shape shape, std::vector<Real> values) {
    Tensor<Real> checked(std::move(shape), std::move(values));
    Node n;
    n.kind = OpKind::Constant;
    n.shape = std::move(checked.shape);
    n.value.assign(checked.values.begin(), checked.values.end());
    nodes_.push_back(std::move(n));
    return Var<Real>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename Real>
Var<Real> Graph<Real>::leaf(Shape shape, std::vector<Real> values, bool requires_grad) {
    Tensor<Real> checked(std::move(shape), std::move(values));
    Node n;
    n.kind = OpKind::Leaf;
    n.shape = std::move(checked.shape);
    n.value.assign(checked.values.begin(), checked.values.end());
    n.requires_grad = requires_grad;
    n.is_leaf = true;
    nodes_.push_back(std::move(n));
    return Var<Real>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename Real>
Var<Real> Graph<Real>::bind(Parameter<Real>& param, bool requires_grad) {
    auto v = leaf(param.shape, param.value, requires_grad);
    node(v.id()).param = &param;
    if (param.grad.size() != param.value.size()) param.grad.assign(param.value.size(), Real(0));
    return v;
}

template <typename Real>
Var<Real> Graph<Real>::emit(OpKind kind, Shape shape, Buffer<Real> value,
                            std::vector<int> parents, BackwardFn backward) {
    Node n;
    n.kind = kind;
    n.shape = std::move(shape);
    n.value = std::move(value);
    for (int p : parents) n.requires_grad = n.requires_grad || node(p).requires_grad;
    if (kind == OpKind::StopGradient) n.requires_grad = false;
    n.parents = std::move(parents);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<Real>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename Real>
void Graph<Real>::backward(Var<Real> loss) {
    if (&loss.graph() != this) {
        throw ArgumentError("backward: loss belongs to another graph");
    }
    const auto& lnode = node(loss.id());
    if (lnode.value.size() != 1) {
        throw ArgumentError("backward: loss must be scalar, got shape " +
                            shape_string(lnode.shape));
    }
    for (auto& n : nodes_) {
        if (n.is_leaf && n.requires_grad && n.grad.size() != n.value.size()) {
            n.grad.assign(n.value.size(), Real(0));
        }
    }
    if (!lnode.requires_grad) return;

    GradTable<Real> table(*this, nodes_.size());
    table.at(loss.id())[0] = Real(1);
    for (int id = loss.id(); id >= 0; --id) {
        auto& n = node(id);
        if (!n.requires_grad || !table.has(id)) continue;
        if (n.is_leaf) {
            auto g = table.at(id);
            for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
            if (n.param != nullptr) {
                auto& pg = n.param->grad;
                for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
            continue;
        }
        if (n.backward) n.backward(n.value, table.at(id), table);
        table.raw(id).clear();
        table.raw(id).shrink_to_fit();
    }
}

template <typename Real>
std::span<const Real> Graph<Real>::grad(Var<Real> v) const {
    const auto& n = node(v.id());
    if (!n.is_leaf) throw ArgumentError("grad() is only recorded for leaves");
    return n.grad;
}

template <typename Real>
void Graph<Real>::zero_grads() {
    for (auto& n : nodes_) {
        if (!n.is_leaf) continue;
        std::fill(n.grad.begin(), n.grad.end(), Real(0));
        if (n.param != nullptr) n.param->zero_grad();
    }
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Var<float>;
template class Var<double>;
template class GradTable<float>;
template class GradTable<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace muse::ad
