// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include "muse/objectives.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <sstream>

#include "muse/errors.hpp"
#include "muse/optimizer.hpp"
#include "../util/rng.hpp"

namespace muse {

using ad::Graph;
using ad::Var;

std::string_view loss_name(LossKind k) {
    switch (k) {
        case LossKind::Topo: return "topo";
        case LossKind::Anchor: return "anchor";
        case LossKind::Rec: return "rec";
    }
    return "unknown";
}

LossKind parse_loss(std::string_view name) {
    for (auto k : {LossKind::Topo, LossKind::Anchor, LossKind::Rec}) {
        if (loss_name(k) == name) return k;
    }
    throw ConfigError("unknown loss '" + std::string(name) + "' (expected topo, anchor or rec)");
}

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// 1-D bilinear weights, align_corners = false.
MatD axis_weights(std::size_t g_t, std::size_t g_s) {
    MatD w = MatD::Zero(static_cast<Eigen::Index>(g_s), static_cast<Eigen::Index>(g_t));
    const double ratio = static_cast<double>(g_t) / static_cast<double>(g_s);
    for (std::size_t o = 0; o < g_s; ++o) {
        double x = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        x = std::clamp(x, 0.0, static_cast<double>(g_t - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(x));
        const std::size_t i1 = std::min(i0 + 1, g_t - 1);
        const double frac = x - static_cast<double>(i0);
        const auto oi = static_cast<Eigen::Index>(o);
        w(oi, static_cast<Eigen::Index>(i0)) += 1.0 - frac;
        w(oi, static_cast<Eigen::Index>(i1)) += frac;
    }
    return w;
}

}  // namespace

std::vector<double> psi_resample(std::span<const double> teacher, std::size_t g_t, std::size_t g_s) {
    if (g_t < 1 || g_s < 1) throw ArgumentError("psi_resample: grid sides must be >= 1");
    const std::size_t nt = g_t * g_t, ns = g_s * g_s;
    if (teacher.size() != nt * nt) {
        throw DimensionError("psi_resample: expected " + std::to_string(nt) + "x" +
                             std::to_string(nt) + " teacher, got " + std::to_string(teacher.size()) +
                             " values");
    }
    for (std::size_t i = 0; i < nt; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < nt; ++j) {
            const double v = teacher[i * nt + j];
            if (v < 0.0 || !std::isfinite(v)) {
                throw ArgumentError("psi_resample: teacher row " + std::to_string(i) +
                                    " has a negative or non-finite entry");
            }
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-4) {
            throw ArgumentError("psi_resample: teacher row " + std::to_string(i) + " sums to " +
                                std::to_string(s) + ", not 1");
        }
    }
    const MatD w = axis_weights(g_t, g_s);
    MatD grid(static_cast<Eigen::Index>(ns), static_cast<Eigen::Index>(nt));
    for (std::size_t r = 0; r < g_s; ++r) {
        for (std::size_t c = 0; c < g_s; ++c) {
            for (std::size_t a = 0; a < g_t; ++a) {
                for (std::size_t b = 0; b < g_t; ++b) {
                    grid(static_cast<Eigen::Index>(r * g_s + c), static_cast<Eigen::Index>(a * g_t + b)) =
                        w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(a)) *
                        w(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(b));
                }
            }
        }
    }
    const Eigen::Map<const MatD> t(teacher.data(), static_cast<Eigen::Index>(nt),
                                   static_cast<Eigen::Index>(nt));
    MatD out = grid * t * grid.transpose();
    out.array().colwise() /= out.rowwise().sum().array();
    return {out.data(), out.data() + out.size()};
}

template <typename Real>
Var<Real> topo_loss(std::span<const Var<Real>> students, std::span<const Real> teacher,
                    std::size_t batch, std::size_t heads) {
    if (students.empty()) throw ArgumentError("topo_loss: no student maps");
    const std::size_t np = students.front().cols();
    if (teacher.size() != batch * np * np) {
        throw DimensionError("topo_loss: teacher holds " + std::to_string(teacher.size()) +
                             " values, expected " + std::to_string(batch) + "x" + std::to_string(np) +
                             "x" + std::to_string(np));
    }
    std::vector<Real> target(batch * heads * np * np);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            std::copy_n(teacher.begin() + static_cast<std::ptrdiff_t>(b * np * np), np * np,
                        target.begin() + static_cast<std::ptrdiff_t>((b * heads + h) * np * np));
        }
    }
    std::optional<Var<Real>> acc;
    for (const auto& s : students) {
        auto kl = ad::kl_rows(std::span<const Real>(target), s);
        acc = acc ? ad::add(*acc, kl) : kl;
    }
    return ad::scale(*acc, Real(1) / static_cast<Real>(students.size()));
}

template <typename Real>
AnchorResult<Real> anchor_loss(Var<Real> embeddings, std::span<const std::size_t> labels,
                               Var<Real> class_table, Var<Real> tau, const AnchorOptions& options) {
    const std::size_t b = embeddings.rows();
    if (b < 2) throw ArgumentError("anchor_loss: batch must hold at least 2 samples");
    if (labels.size() != b) {
        throw DimensionError("anchor_loss: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(b) + " embeddings");
    }
    for (auto l : labels) {
        if (l >= class_table.rows()) {
            throw ArgumentError("anchor_loss: label " + std::to_string(l) + " outside the class table");
        }
    }
    AnchorResult<Real> result;
    const double tv = static_cast<double>(tau.item());
    if (!(tv >= options.tau_lo && tv <= options.tau_hi)) {
        const double clamped = std::clamp(std::isfinite(tv) ? tv : options.tau_hi, options.tau_lo,
                                          options.tau_hi);
        std::ostringstream os;
        os << "temperature " << tv << " outside [" << options.tau_lo << ", " << options.tau_hi
           << "], clamped to " << clamped;
        result.warning = os.str();
        tau = embeddings.graph().constant({1}, {static_cast<Real>(clamped)});
    }
    const auto targets = ad::l2_normalize_rows(ad::gather_rows(class_table, labels));
    const auto logits = ad::div_by_scalar(ad::matmul(embeddings, ad::transpose(targets)), tau);

    std::vector<std::size_t> diagonal(b);
    std::vector<std::uint8_t> allowed(b * b);
    for (std::size_t i = 0; i < b; ++i) {
        diagonal[i] = i;
        for (std::size_t j = 0; j < b; ++j) allowed[i * b + j] = (i == j || labels[i] != labels[j]) ? 1 : 0;
    }
    const auto rows = ad::cross_entropy_rows(logits, std::span<const std::size_t>(diagonal),
                                             std::span<const std::uint8_t>(allowed));
    if (options.symmetric) {
        const auto cols = ad::cross_entropy_rows(ad::transpose(logits),
                                                 std::span<const std::size_t>(diagonal),
                                                 std::span<const std::uint8_t>(allowed));
        result.loss = ad::scale(ad::add(rows, cols), Real(0.5));
    } else {
        result.loss = rows;
    }
    result.logits = logits;
    return result;
}

template <typename Real>
Var<Real> recon_loss(Var<Real> recon, std::span<const Real> target) {
    return ad::mse(recon, target);
}

std::vector<double> flow_interpolate(std::span<const double> x0, std::span<const double> x1,
                                     std::span<const double> t, std::size_t dim) {
    if (x0.size() != x1.size() || dim == 0 || x0.size() != t.size() * dim) {
        throw DimensionError("flow_interpolate: mismatched batch shapes");
    }
    std::vector<double> xt(x0.size());
    for (std::size_t b = 0; b < t.size(); ++b) {
        if (!(t[b] >= 0.0 && t[b] <= 1.0)) {
            throw ArgumentError("flow_interpolate: t = " + std::to_string(t[b]) + " outside [0, 1]");
        }
        for (std::size_t k = 0; k < dim; ++k) {
            const std::size_t i = b * dim + k;
            xt[i] = t[b] * x1[i] + (1.0 - t[b]) * x0[i];
        }
    }
    return xt;
}

template <typename Real>
Var<Real> flow_matching_loss(Var<Real> v_pred, std::span<const Real> x1, std::span<const Real> x0) {
    if (x1.size() != x0.size()) throw DimensionError("flow_matching_loss: x0/x1 size mismatch");
    std::vector<Real> velocity(x1.size());
    for (std::size_t i = 0; i < x1.size(); ++i) velocity[i] = x1[i] - x0[i];
    return ad::mse(v_pred, std::span<const Real>(velocity));
}

FlowPredictor FlowPredictor::init(std::size_t dim, std::size_t cond_dim, std::size_t hidden,
                                  std::uint64_t seed) {
    if (dim == 0 || hidden == 0) throw ConfigError("flow predictor needs positive dims");
    FlowPredictor m;
    m.dim = dim;
    m.cond_dim = cond_dim;
    m.hidden = hidden;
    const std::size_t in = dim + 1 + cond_dim;
    m.params.emplace_back("flow.fc1.weight", Shape{in, hidden}, Subspace::Semantic);
    m.params.emplace_back("flow.fc1.bias", Shape{hidden}, Subspace::Semantic);
    m.params.emplace_back("flow.fc2.weight", Shape{hidden, dim}, Subspace::Semantic);
    m.params.emplace_back("flow.fc2.bias", Shape{dim}, Subspace::Semantic);
    rng::Stream r(seed);
    auto uniform = [&](Parameter<double>& p, std::size_t fan_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : p.value) v = r.uniform(-bound, bound);
    };
    uniform(m.params[0], in);
    uniform(m.params[2], hidden);
    return m;
}

Var<double> FlowPredictor::forward(Graph<double>& g, std::span<const double> x_t,
                                   std::span<const double> t, std::span<const double> cond,
                                   std::size_t batch) {
    if (x_t.size() != batch * dim || t.size() != batch || cond.size() != batch * cond_dim) {
        throw DimensionError("flow predictor: input sizes do not match batch " + std::to_string(batch));
    }
    const std::size_t in = dim + 1 + cond_dim;
    std::vector<double> x(batch * in);
    for (std::size_t b = 0; b < batch; ++b) {
        auto row = x.begin() + static_cast<std::ptrdiff_t>(b * in);
        row = std::copy_n(x_t.begin() + static_cast<std::ptrdiff_t>(b * dim), dim, row);
        *row++ = t[b];
        std::copy_n(cond.begin() + static_cast<std::ptrdiff_t>(b * cond_dim), cond_dim, row);
    }
    const auto input = g.constant({batch, in}, std::move(x));
    const auto hidden_act =
        ad::gelu(ad::linear_map(input, g.bind(params[0]), g.bind(params[1])));
    return ad::linear_map(hidden_act, g.bind(params[2]), g.bind(params[3]));
}

FlowTrainResult train_flow_predictor(FlowPredictor& model, std::span<const double> x0,
                                     std::span<const double> x1, std::span<const double> cond,
                                     std::size_t batch, std::size_t steps, double lr,
                                     std::uint64_t seed) {
    constexpr std::size_t kGrid = 8;
    auto evaluate = [&] {
        double total = 0.0;
        for (std::size_t k = 0; k < kGrid; ++k) {
            const std::vector<double> t(batch, (static_cast<double>(k) + 0.5) / kGrid);
            const auto xt = flow_interpolate(x0, x1, t, model.dim);
            Graph<double> g;
            total += flow_matching_loss(model.forward(g, xt, t, cond, batch), x1, x0).item();
        }
        return total / kGrid;
    };

    FlowTrainResult result;
    result.initial_loss = evaluate();
    AdamW<double> opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0}, model.params);
    rng::Stream r(seed);
    std::vector<double> t(batch);
    for (std::size_t step = 0; step < steps; ++step) {
        for (auto& v : t) v = r.uniform();
        const auto xt = flow_interpolate(x0, x1, t, model.dim);
        for (auto& p : model.params) p.zero_grad();
        Graph<double> g;
        const auto loss = flow_matching_loss(model.forward(g, xt, t, cond, batch), x1, x0);
        g.backward(loss);
        result.losses.push_back(loss.item());
        opt.step(model.params, lr, {}, static_cast<long>(step));
    }
    result.final_loss = evaluate();
    return result;
}

double LossWeights::weight(LossKind k) const {
    switch (k) {
        case LossKind::Topo: return topo;
        case LossKind::Anchor: return anchor;
        case LossKind::Rec: return rec * spec;
    }
    return 0.0;
}

std::array<LossWeights, 3> default_stage_weights() {
    // Anchor, reconstruction and spectral weights undefined for early stages
    // take the nearest defined value.
    return {LossWeights{1.0, 0.2, 1.0, 0.5, 0.3}, LossWeights{1.0, 0.2, 1.0, 0.5, 0.3},
            LossWeights{1.0, 0.1, 1.0, 0.5, 0.3}};
}

std::set<LossKind> stage_losses(int stage) {
    switch (stage) {
        case 1: return {LossKind::Topo};
        case 2: return {LossKind::Topo, LossKind::Anchor};
        case 3: return {LossKind::Topo, LossKind::Anchor, LossKind::Rec};
        default: throw ConfigError("stage must be 1, 2 or 3, got " + std::to_string(stage));
    }
}

std::optional<double> LossValues::get(LossKind k) const {
    switch (k) {
        case LossKind::Topo: return topo;
        case LossKind::Anchor: return anchor;
        case LossKind::Rec: return rec;
    }
    return std::nullopt;
}

template <typename Real>
std::optional<Var<Real>> LossParts<Real>::get(LossKind k) const {
    switch (k) {
        case LossKind::Topo: return topo;
        case LossKind::Anchor: return anchor;
        case LossKind::Rec: return rec;
    }
    return std::nullopt;
}

namespace {

void check_stage(int stage) {
    if (stage < 1 || stage > 3) throw ConfigError("stage must be 1, 2 or 3, got " + std::to_string(stage));
}

[[noreturn]] void missing_part(int stage, LossKind k) {
    throw ConfigError("stage " + std::to_string(stage) + " requires the " +
                      std::string(loss_name(k)) + " loss");
}

}  // namespace

double total_loss(int stage, const LossValues& parts, const LossWeights& weights,
                  const std::set<LossKind>& active) {
    check_stage(stage);
    double total = 0.0;
    for (auto k : active) {
        const auto v = parts.get(k);
        if (!v) missing_part(stage, k);
        total += weights.weight(k) * *v;
    }
    return total;
}

template <typename Real>
Var<Real> total_loss(int stage, const LossParts<Real>& parts, const LossWeights& weights,
                     const std::set<LossKind>& active) {
    check_stage(stage);
    if (active.empty()) throw ConfigError("no active loss in stage " + std::to_string(stage));
    std::optional<Var<Real>> acc;
    for (auto k : active) {
        const auto v = parts.get(k);
        if (!v) missing_part(stage, k);
        const auto term = ad::scale(*v, static_cast<Real>(weights.weight(k)));
        acc = acc ? ad::add(*acc, term) : term;
    }
    return *acc;
}

#define MUSE_OBJECTIVES_INSTANTIATE(Real)                                                        \
    template Var<Real> topo_loss(std::span<const Var<Real>>, std::span<const Real>, std::size_t, \
                                 std::size_t);                                                   \
    template AnchorResult<Real> anchor_loss(Var<Real>, std::span<const std::size_t>, Var<Real>,  \
                                            Var<Real>, const AnchorOptions&);                    \
    template Var<Real> recon_loss(Var<Real>, std::span<const Real>);                             \
    template Var<Real> flow_matching_loss(Var<Real>, std::span<const Real>,                      \
                                          std::span<const Real>);                                \
    template struct LossParts<Real>;                                                             \
    template Var<Real> total_loss(int, const LossParts<Real>&, const LossWeights&,               \
                                  const std::set<LossKind>&);

MUSE_OBJECTIVES_INSTANTIATE(float)
MUSE_OBJECTIVES_INSTANTIATE(double)

#undef MUSE_OBJECTIVES_INSTANTIATE

}  // namespace muse
