// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include "muse/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "muse/errors.hpp"

namespace muse {

namespace {

bool tag_matches(Subspace param_tag, Subspace tag) { return tag == Subspace::All || param_tag == tag; }

double l2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

template <typename Real>
std::vector<double> subspace_gradient(const std::vector<Parameter<Real>>& params, Subspace tag,
                                      const std::optional<std::set<int>>& streams) {
    std::vector<double> out;
    bool matched = false;
    for (const auto& p : params) {
        if (!tag_matches(p.subspace, tag)) continue;
        if (streams && !streams->contains(p.stream)) continue;
        matched = true;
        out.insert(out.end(), p.grad.begin(), p.grad.end());
    }
    if (!matched) {
        throw ArgumentError("no parameter is tagged " + std::string(subspace_name(tag)));
    }
    return out;
}

std::optional<double> gradient_cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ArgumentError("gradient_cosine: lengths " + std::to_string(a.size()) + " and " +
                            std::to_string(b.size()) + " differ");
    }
    const double na = l2(a), nb = l2(b);
    if (na <= kCosineNormFloor || nb <= kCosineNormFloor) return std::nullopt;
    const double dot = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    return std::clamp(dot / (na * nb), -1.0, 1.0);
}

LossPair parse_loss_pair(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) {
        throw ConfigError("loss pair '" + std::string(text) + "' must look like anchor:topo");
    }
    LossPair p{parse_loss(text.substr(0, colon)), parse_loss(text.substr(colon + 1))};
    if (p.first == p.second) throw ConfigError("loss pair '" + std::string(text) + "' repeats a loss");
    return p;
}

std::string loss_pair_name(const LossPair& pair) {
    return std::string(loss_name(pair.first)) + "_" + std::string(loss_name(pair.second));
}

std::vector<LossPair> default_loss_pairs() {
    return {{LossKind::Anchor, LossKind::Topo},
            {LossKind::Anchor, LossKind::Rec},
            {LossKind::Topo, LossKind::Rec}};
}

template <typename Real>
GradSnapshot snapshot_gradients(std::vector<Parameter<Real>>& params, const LossBuilder<Real>& build,
                                std::map<LossKind, double>* loss_values) {
    for (auto& p : params) p.zero_grad();
    ad::Graph<Real> g;
    const auto losses = build(g);
    GradSnapshot snap;
    for (const auto& [kind, loss] : losses) {
        for (auto& p : params) p.zero_grad();
        g.backward(loss);
        auto& per_param = snap.grads[kind];
        per_param.reserve(params.size());
        for (const auto& p : params) per_param.emplace_back(p.grad.begin(), p.grad.end());
        if (loss_values != nullptr) (*loss_values)[kind] = static_cast<double>(loss.item());
    }
    for (auto& p : params) p.zero_grad();
    return snap;
}

template <typename Real>
GradReport make_report(const std::vector<Parameter<Real>>& params, const GradSnapshot& snapshot,
                       const std::vector<LossPair>& pairs, const std::set<Subspace>& tags, long step) {
    GradReport report;
    report.step = step;

    std::map<LossKind, std::set<int>> support;
    for (const auto& [kind, grads] : snapshot.grads) {
        auto& norms = report.subspace_norms[kind];
        std::map<Subspace, double> sq;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double n = l2(grads[i]);
            if (n > 0.0) support[kind].insert(params[i].stream);
            sq[params[i].subspace] += n * n;
            sq[Subspace::All] += n * n;
            report.matrix_norms.push_back({kind, params[i].subspace, params[i].layer, params[i].name, n});
        }
        for (auto tag : {Subspace::Topology, Subspace::Semantic, Subspace::Backbone,
                         Subspace::Decoder, Subspace::All}) {
            norms[tag] = std::sqrt(sq[tag]);
        }
    }

    for (const auto& pair : pairs) {
        auto& row = report.cosines[pair];
        const auto ia = snapshot.grads.find(pair.first);
        const auto ib = snapshot.grads.find(pair.second);
        for (auto tag : tags) row[tag] = std::nullopt;
        if (ia == snapshot.grads.end() || ib == snapshot.grads.end()) continue;
        std::set<int> shared;
        std::set_intersection(support[pair.first].begin(), support[pair.first].end(),
                              support[pair.second].begin(), support[pair.second].end(),
                              std::inserter(shared, shared.begin()));
        if (shared.empty()) continue;
        for (auto tag : tags) {
            std::vector<double> a, b;
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (!tag_matches(params[i].subspace, tag) || !shared.contains(params[i].stream)) continue;
                a.insert(a.end(), ia->second[i].begin(), ia->second[i].end());
                b.insert(b.end(), ib->second[i].begin(), ib->second[i].end());
            }
            row[tag] = gradient_cosine(a, b);
        }
    }
    return report;
}

template <typename Real>
GradReport conflict_probe(std::vector<Parameter<Real>>& params, const LossBuilder<Real>& build,
                          const std::vector<LossPair>& pairs, const std::set<Subspace>& tags,
                          long step) {
    std::map<LossKind, double> values;
    const auto snap = snapshot_gradients(params, build, &values);
    auto report = make_report(params, snap, pairs, tags, step);
    report.loss_values = std::move(values);
    return report;
}

double midpoint_quantile(std::span<const double> x, double p) {
    if (x.empty()) throw ArgumentError("quantile of an empty sample");
    const std::size_t n = x.size();
    const double h = p * static_cast<double>(n);
    const double k = std::round(h);
    if (std::abs(h - k) < 1e-12 && k >= 1 && k <= static_cast<double>(n - 1)) {
        const auto i = static_cast<std::size_t>(k);
        return 0.5 * (x[i - 1] + x[i]);
    }
    const auto i = static_cast<std::size_t>(std::clamp(std::ceil(h), 1.0, static_cast<double>(n)));
    return x[i - 1];
}

NormSummary norm_distribution(std::span<const GradReport> reports, LossKind loss, Subspace tag) {
    NormSummary s;
    for (const auto& r : reports) {
        for (const auto& m : r.matrix_norms) {
            if (m.loss == loss && tag_matches(m.subspace, tag)) s.samples.push_back(m.norm);
        }
    }
    if (s.samples.empty()) {
        throw ArgumentError("norm_distribution: no samples for loss " + std::string(loss_name(loss)) +
                            " in subspace " + std::string(subspace_name(tag)));
    }
    std::vector<double> sorted = s.samples;
    std::sort(sorted.begin(), sorted.end());
    s.min = sorted.front();
    s.max = sorted.back();
    s.q25 = midpoint_quantile(sorted, 0.25);
    s.median = midpoint_quantile(sorted, 0.5);
    s.q75 = midpoint_quantile(sorted, 0.75);
    s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
    return s;
}

std::string format_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

void write_violin_rows(std::ostream& out, const GradReport& report) {
    for (const auto& m : report.matrix_norms) {
        out << report.step << ',' << loss_name(m.loss) << ',' << subspace_name(m.subspace) << ',';
        if (m.layer) out << *m.layer;
        out << ',' << m.matrix << ',' << format_number(m.norm) << '\n';
    }
}

void write_grad_report_rows(std::ostream& out, const GradReport& report) {
    for (const auto& [pair, row] : report.cosines) {
        for (const auto& [tag, cos] : row) {
            out << report.step << ',' << loss_name(pair.first) << ',' << loss_name(pair.second) << ','
                << subspace_name(tag) << ',';
            if (cos) out << format_number(*cos);
            out << ',' << (cos ? 0 : 1) << '\n';
        }
    }
}

#define MUSE_DIAG_INSTANTIATE(Real)                                                              \
    template std::vector<double> subspace_gradient(const std::vector<Parameter<Real>>&, Subspace, \
                                                   const std::optional<std::set<int>>&);         \
    template GradSnapshot snapshot_gradients(std::vector<Parameter<Real>>&,                      \
                                             const LossBuilder<Real>&,                           \
                                             std::map<LossKind, double>*);                       \
    template GradReport make_report(const std::vector<Parameter<Real>>&, const GradSnapshot&,    \
                                    const std::vector<LossPair>&, const std::set<Subspace>&,     \
                                    long);                                                       \
    template GradReport conflict_probe(std::vector<Parameter<Real>>&, const LossBuilder<Real>&,  \
                                       const std::vector<LossPair>&, const std::set<Subspace>&,  \
                                       long);

MUSE_DIAG_INSTANTIATE(float)
MUSE_DIAG_INSTANTIATE(double)

#undef MUSE_DIAG_INSTANTIATE

}  // namespace muse
