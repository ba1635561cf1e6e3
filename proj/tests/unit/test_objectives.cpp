// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "muse/errors.hpp"
#include "muse/gradcheck.hpp"
#include "muse/objectives.hpp"
#include "muse/scenes.hpp"
#include "test_support.hpp"

using namespace muse;
using ad::Graph;
using ad::Var;

namespace {

std::vector<double> random_stochastic(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<double> m(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < cols; ++c) s += m[r * cols + c] = u(rng);
        for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] /= s;
    }
    return m;
}

/// Extended-precision mean row KL(t || s).
long double reference_kl(const std::vector<double>& t, const std::vector<double>& s, std::size_t cols) {
    long double total = 0;
    for (std::size_t r = 0; r < t.size() / cols; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const long double tv = t[r * cols + c];
            if (tv > 0) total += tv * (std::log(tv) - std::log(static_cast<long double>(s[r * cols + c])));
        }
    }
    return total / static_cast<long double>(t.size() / cols);
}

double topo_value(const std::vector<double>& student, const std::vector<double>& teacher, std::size_t batch,
                  std::size_t heads, std::size_t np) {
    Graph<double> g;
    std::vector<Var<double>> students{g.leaf({batch * heads * np, np}, student)};
    return topo_loss<double>(students, teacher, batch, heads).item();
}

}  // namespace

TEST_CASE("psi_resample identity and constants") {
    std::mt19937_64 rng(1);
    const auto a = random_stochastic(rng, 16, 16);
    const auto same = psi_resample(a, 4, 4);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(same[i] - a[i]) < 1e-12);

    const std::vector<double> uniform(16, 1.0 / 4.0);
    for (std::size_t gs : {1u, 3u, 4u, 8u}) {
        const auto out = psi_resample(uniform, 2, gs);
        const double expect = 1.0 / static_cast<double>(gs * gs);
        for (double v : out) CHECK(v == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("psi_resample keeps segment structure when upsampling") {
    // 2x2 grid: left column one segment, right column the other.
    const std::vector<std::uint8_t> mask{1, 0, 1, 0};
    const auto t = teacher_attention_from_mask(mask);
    const auto out = psi_resample(t, 2, 4);
    REQUIRE(out.size() == 256);
    for (std::size_t r = 0; r < 16; ++r) {
        double total = 0, left = 0;
        for (std::size_t c = 0; c < 16; ++c) {
            total += out[r * 16 + c];
            if (c % 4 < 2) left += out[r * 16 + c];
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        const bool row_left = (r % 4) < 2;
        const double same = row_left ? left : total - left;
        CHECK(same >= total - same);
    }
}

TEST_CASE("psi_resample rejects non-stochastic input") {
    std::vector<double> bad(16, 0.25);
    bad[0] = 0.5;
    CHECK_THROWS_AS((void)psi_resample(bad, 2, 4), ArgumentError);
    CHECK_THROWS_AS((void)psi_resample(std::vector<double>(16, 0.25), 0, 4), ArgumentError);
}

TEST_CASE("topo loss closed forms") {
    const std::size_t np = 64;
    std::vector<double> teacher(np * np, 0.0);
    for (std::size_t i = 0; i < np; ++i) teacher[i * np + (i * 7) % np] = 1.0;
    const std::vector<double> uniform(np * np, 1.0 / static_cast<double>(np));
    CHECK(topo_value(uniform, teacher, 1, 1, np) == doctest::Approx(std::log(64.0)).epsilon(1e-12));
    CHECK(std::log(64.0) == doctest::Approx(4.1589).epsilon(1e-4));

    std::mt19937_64 rng(4);
    const auto t = random_stochastic(rng, 4, 4);
    CHECK(std::abs(topo_value(t, t, 1, 1, 4)) < 1e-15);
}

TEST_CASE("topo loss matches an extended-precision evaluation and averages heads and layers") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        const auto t = random_stochastic(rng, 4, 4);
        const auto s = random_stochastic(rng, 4, 4);
        CHECK(std::abs(topo_value(s, t, 1, 1, 4) - static_cast<double>(reference_kl(t, s, 4))) < 1e-10);
    }
    // Two samples x two heads, plus two layers: the mean of the four (or eight) KLs.
    std::mt19937_64 rng(9);
    const std::size_t np = 3;
    const auto teacher = random_stochastic(rng, 2 * np, np);
    Graph<double> g;
    std::vector<Var<double>> layers;
    long double expect = 0;
    for (int l = 0; l < 2; ++l) {
        const auto s = random_stochastic(rng, 4 * np, np);
        layers.push_back(g.leaf({4 * np, np}, s));
        for (std::size_t b = 0; b < 2; ++b) {
            std::vector<double> tb(teacher.begin() + b * np * np, teacher.begin() + (b + 1) * np * np);
            for (std::size_t h = 0; h < 2; ++h) {
                const std::size_t off = (b * 2 + h) * np * np;
                expect += reference_kl(tb, std::vector<double>(s.begin() + off, s.begin() + off + np * np), np);
            }
        }
    }
    CHECK(topo_loss<double>(layers, teacher, 2, 2).item() == doctest::Approx(static_cast<double>(expect / 8)).epsilon(1e-12));
}

TEST_CASE("topo loss gradient and domain errors") {
    std::mt19937_64 rng(2);
    const auto teacher = random_stochastic(rng, 4, 4);
    ad::LeafLossBuilder f = [&](Graph<double>& g, std::span<const Var<double>> x) {
        std::vector<Var<double>> s{ad::softmax_rows(x[0])};
        return topo_loss<double>(s, teacher, 1, 1);
    };
    CHECK(ad::finite_difference_check(f, {testing::random_tensor(rng, {4, 4})}).max_rel_error < 1e-4);

    Graph<double> g;
    std::vector<double> student(16, 0.25);
    student[0] = 0.0;
    student[1] = 0.5;
    std::vector<Var<double>> s{g.leaf({4, 4}, student)};
    CHECK_THROWS_AS((void)topo_loss<double>(s, teacher, 1, 1), NumericError);
}

TEST_CASE("anchor loss with equal logits is ln B") {
    for (std::size_t b : {2u, 5u, 32u}) {
        Graph<double> g;
        std::vector<double> e(b * 4, 0.0), table(b * 4, 0.0);
        std::vector<std::size_t> labels(b);
        for (std::size_t i = 0; i < b; ++i) {
            labels[i] = i;
            e[i * 4] = 1.0;      // every embedding along axis 0
            table[i * 4 + 1] = 1.0;  // every label orthogonal to it
        }
        auto r = anchor_loss(g.leaf({b, 4}, e), labels, g.leaf({b, 4}, table), g.leaf({1}, {0.07}));
        CHECK(r.loss.item() == doctest::Approx(std::log(static_cast<double>(b))).epsilon(1e-12));
        CHECK_FALSE(r.warning.has_value());
    }
}

TEST_CASE("anchor loss two-point closed form") {
    Graph<double> g;
    auto e = g.leaf({2, 2}, {1.0, 0.0, 0.0, 1.0});
    auto table = g.leaf({2, 2}, {1.0, 0.0, 0.0, 1.0});
    const std::vector<std::size_t> labels{0, 1};
    auto r = anchor_loss(e, labels, table, g.leaf({1}, {0.07}));
    const double expect = std::log1p(std::exp(-1.0 / 0.07));
    CHECK(r.loss.item() == doctest::Approx(expect).epsilon(1e-9));
    CHECK(expect == doctest::Approx(6.1e-7).epsilon(0.02));
}

TEST_CASE("anchor loss masks duplicate labels and handles errors") {
    Graph<double> g;
    // All four share a label: no negatives remain, so the loss is exactly 0.
    auto e = g.leaf({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
    auto table = g.leaf({3, 2}, {0.6, 0.8, 1, 0, 0, 1});
    const std::vector<std::size_t> same{0, 0, 0, 0};
    CHECK(anchor_loss(e, same, table, g.leaf({1}, {0.5})).loss.item() == doctest::Approx(0.0));

    const std::vector<std::size_t> one{0};
    CHECK_THROWS_AS((void)anchor_loss(g.leaf({1, 2}, {1, 0}), one, table, g.leaf({1}, {0.5})), ArgumentError);

    const std::vector<std::size_t> labels{0, 1, 2, 1};
    auto hot = anchor_loss(e, labels, table, g.leaf({1}, {50.0}));
    CHECK(hot.warning.has_value());
    auto clamped = anchor_loss(e, labels, table, g.leaf({1}, {10.0}));
    CHECK(hot.loss.item() == clamped.loss.item());
}

TEST_CASE("anchor loss gradient check") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        std::mt19937_64 rng(seed);
        const std::vector<std::size_t> labels{0, 3, 5, 3};
        ad::LeafLossBuilder f = [&](Graph<double>&, std::span<const Var<double>> x) {
            return anchor_loss(ad::l2_normalize_rows(x[0]), labels, x[1], x[2]).loss;
        };
        const auto r = ad::finite_difference_check(
            f, {testing::random_tensor(rng, {4, 8}), testing::random_tensor(rng, {8, 8}),
                testing::random_tensor(rng, {1}, 0.1, 0.5)});
        CHECK(r.max_rel_error < 1e-4);
    }
}

TEST_CASE("anchor loss concentrates near ln B at random init") {
    const std::size_t b = 32;
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n;
    double total = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Graph<double> g;
        std::vector<double> e(b * 32), table(8 * 32);
        for (auto& v : e) v = n(rng);
        for (auto& v : table) v = n(rng);
        std::vector<std::size_t> labels(b);
        for (auto& l : labels) l = rng() % 8;
        total += anchor_loss(ad::l2_normalize_rows(g.leaf({b, 32}, e)), labels, g.leaf({8, 32}, table),
                             g.leaf({1}, {1.0}))
                     .loss.item();
    }
    const double mean = total / 100.0;
    CHECK(std::abs(mean - std::log(32.0)) < 0.05 * std::log(32.0));
}

TEST_CASE("reconstruction loss") {
    Graph<double> g;
    const std::vector<double> target{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    CHECK(recon_loss(g.leaf({2, 3}, target), std::span<const double>(target)).item() == 0.0);
    std::vector<double> shifted = target;
    for (auto& v : shifted) v += 0.5;
    auto x = g.leaf({2, 3}, shifted);
    auto l = recon_loss(x, std::span<const double>(target));
    CHECK(l.item() == doctest::Approx(0.25).epsilon(1e-14));
    g.backward(l);
    for (double v : g.grad(x)) CHECK(v == doctest::Approx(2.0 * 0.5 / 6.0).epsilon(1e-14));
}

TEST_CASE("flow matching") {
    const std::vector<double> x0{0, 0, 1, -1};
    const std::vector<double> x1{2, 2, 3, 1};
    const auto mid = flow_interpolate(x0, x1, std::vector<double>{0.5, 0.0}, 2);
    CHECK(mid == std::vector<double>{1, 1, 1, -1});
    CHECK_THROWS_AS((void)flow_interpolate(x0, x1, std::vector<double>{1.5, 0.0}, 2), ArgumentError);

    Graph<double> g;
    std::vector<double> v(4);
    for (std::size_t i = 0; i < 4; ++i) v[i] = x1[i] - x0[i];
    CHECK(std::abs(flow_matching_loss(g.leaf({2, 2}, v), std::span<const double>(x1), std::span<const double>(x0))
                       .item()) < 1e-12);
}

TEST_CASE("toy flow predictor learns fixed pairs") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    const std::size_t count = 64, dim = 4, cond = 2;
    std::vector<double> x0(count * dim), x1(count * dim), c(count * cond);
    for (auto& v : x0) v = n(rng);
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t d = 0; d < dim; ++d) x1[i * dim + d] = 2.0 + 0.1 * n(rng) + (d % 2 ? 1.0 : -1.0);
        for (std::size_t d = 0; d < cond; ++d) c[i * cond + d] = n(rng);
    }
    auto model = FlowPredictor::init(dim, cond, 32, 5);
    const auto r = train_flow_predictor(model, x0, x1, c, count, 500, 1e-2, 6);
    CHECK(r.losses.size() == 500);
    CHECK(r.final_loss <= 0.5 * r.initial_loss);
}

TEST_CASE("weighted total") {
    LossWeights w1;
    w1.topo = 1.0;
    LossValues a;
    a.topo = 2.0;
    CHECK(total_loss(1, a, w1, {LossKind::Topo}) == 2.0);

    LossWeights w3;
    w3.topo = 1.0;
    w3.anchor = 0.1;
    w3.rec = 1.0;
    w3.spec = 0.5;
    LossValues all;
    all.topo = all.anchor = all.rec = 1.0;
    const std::set<LossKind> every{LossKind::Topo, LossKind::Anchor, LossKind::Rec};
    CHECK(total_loss(3, all, w3, every) == doctest::Approx(1.6).epsilon(1e-15));

    LossValues zero;
    zero.topo = zero.anchor = zero.rec = 0.0;
    CHECK(total_loss(3, zero, w3, every) == 0.0);

    CHECK_THROWS_AS((void)total_loss(3, a, w3, every), ConfigError);
    CHECK_THROWS_AS((void)total_loss(4, all, w3, every), ConfigError);

    const auto defaults = default_stage_weights();
    CHECK(defaults[0].topo == 1.0);
    CHECK(defaults[2].anchor == 0.1);
    CHECK(defaults[2].spec == 0.5);
    CHECK(stage_losses(2) == std::set<LossKind>{LossKind::Topo, LossKind::Anchor});

    Graph<double> g;
    LossParts<double> parts;
    parts.topo = g.leaf({1}, {1.0});
    parts.anchor = g.leaf({1}, {1.0});
    parts.rec = g.leaf({1}, {1.0});
    CHECK(total_loss<double>(3, parts, w3, every).item() == doctest::Approx(1.6).epsilon(1e-15));
}

TEST_CASE("loss names") {
    CHECK(parse_loss("anchor") == LossKind::Anchor);
    CHECK(loss_name(LossKind::Rec) == "rec");
    CHECK_THROWS_AS((void)parse_loss("itc"), ConfigError);
}
