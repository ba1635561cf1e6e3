// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <sstream>

#include "model_fixture.hpp"
#include "muse/diagnostics.hpp"
#include "muse/errors.hpp"

using namespace muse;

namespace {

LossBuilder<double> builder(EncoderParams<double>& params, const PreparedBatch<double>& batch, Routing routing) {
    return [&params, &batch, routing](ad::Graph<double>& g) {
        return build_losses(g, params, batch, testing::all_losses(), ForwardOptions{routing, {}, true},
                            AnchorOptions{});
    };
}

const std::set<Subspace> kAllTags{Subspace::Topology, Subspace::Semantic, Subspace::Backbone, Subspace::Decoder,
                                  Subspace::All};

}  // namespace

TEST_CASE("subspace gradient lengths") {
    EncoderConfig cfg;
    auto params = init_params<double>(0, cfg);
    CHECK(subspace_gradient(params.params, Subspace::Topology).size() == 49152);
    std::size_t parts = 0;
    for (auto tag : {Subspace::Topology, Subspace::Semantic, Subspace::Backbone, Subspace::Decoder}) {
        parts += subspace_gradient(params.params, tag).size();
    }
    CHECK(parts == params.scalar_count());
    CHECK(subspace_gradient(params.params, Subspace::All).size() == params.scalar_count());

    std::vector<Parameter<double>> only_decoder;
    only_decoder.emplace_back("decoder.weight", Shape{2, 2}, Subspace::Decoder);
    CHECK_THROWS_AS((void)subspace_gradient(only_decoder, Subspace::Topology), ArgumentError);
}

TEST_CASE("gradient cosine examples") {
    const std::vector<double> g{0.3, -1.2, 2.0};
    const std::vector<double> neg{-0.3, 1.2, -2.0};
    CHECK(*gradient_cosine(g, g) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(*gradient_cosine(g, neg) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(*gradient_cosine(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
    CHECK_FALSE(gradient_cosine(std::vector<double>{0, 0}, std::vector<double>{0, 1}).has_value());
    CHECK_FALSE(gradient_cosine(std::vector<double>{1e-13, 0}, std::vector<double>{0, 1}).has_value());
    CHECK_THROWS_AS((void)gradient_cosine(std::vector<double>{1}, std::vector<double>{1, 2}), ArgumentError);
}

TEST_CASE("cosine stays within [-1, 1] on random vectors") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a(17), b(17);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = n(rng);
            b[i] = trial % 2 ? n(rng) : -2.5 * a[i];
        }
        const auto c = gradient_cosine(a, b);
        REQUIRE(c.has_value());
        CHECK(std::abs(*c) <= 1.0 + 1e-9);
    }
}

TEST_CASE("loss pair parsing") {
    CHECK(parse_loss_pair("anchor:topo") == LossPair{LossKind::Anchor, LossKind::Topo});
    CHECK(loss_pair_name({LossKind::Anchor, LossKind::Rec}) == "anchor_rec");
    CHECK_THROWS_AS((void)parse_loss_pair("anchor:itc"), ConfigError);
    CHECK_THROWS_AS((void)parse_loss_pair("anchor"), ConfigError);
    CHECK_THROWS_AS((void)parse_loss_pair("rec:rec"), ConfigError);
    CHECK(default_loss_pairs().size() == 3);
}

TEST_CASE("midpoint quantiles") {
    const std::vector<double> four{1, 2, 3, 4};
    CHECK(midpoint_quantile(four, 0.5) == 2.5);
    CHECK(midpoint_quantile(four, 0.25) == 1.5);
    CHECK(midpoint_quantile(four, 0.75) == 3.5);
    CHECK(midpoint_quantile(four, 0.0) == 1.0);
    CHECK(midpoint_quantile(four, 1.0) == 4.0);
    const std::vector<double> three{1, 5, 9};
    CHECK(midpoint_quantile(three, 0.5) == 5.0);
    const std::vector<double> one{7.5};
    for (double p : {0.0, 0.25, 0.5, 0.75, 1.0}) CHECK(midpoint_quantile(one, p) == 7.5);
}

TEST_CASE("norm distribution summaries") {
    GradReport r;
    for (double v : {4.0, 1.0, 3.0, 2.0}) r.matrix_norms.push_back({LossKind::Anchor, Subspace::Semantic, 0, "m", v});
    r.matrix_norms.push_back({LossKind::Topo, Subspace::Topology, 0, "q", 9.0});
    const std::vector<GradReport> reports{r};
    const auto s = norm_distribution(reports, LossKind::Anchor, Subspace::Semantic);
    CHECK(s.median == 2.5);
    CHECK(s.min == 1.0);
    CHECK(s.max == 4.0);
    CHECK(s.mean == 2.5);
    CHECK(s.samples.size() == 4);
    CHECK(s.min <= s.q25);
    CHECK(s.q25 <= s.median);
    CHECK(s.median <= s.q75);
    CHECK(s.q75 <= s.max);
    CHECK(norm_distribution(reports, LossKind::Anchor, Subspace::All).samples.size() == 4);
    CHECK_THROWS_AS((void)norm_distribution(reports, LossKind::Rec, Subspace::All), ArgumentError);
    CHECK_THROWS_AS((void)norm_distribution(std::span<const GradReport>{}, LossKind::Rec, Subspace::All),
                    ArgumentError);
}

TEST_CASE("strict probe: disjoint supports give exact zero cosines") {
    auto cfg = testing::tiny_encoder();
    auto params = init_params<double>(5, cfg);
    testing::jitter(params, 6);
    const auto batch = testing::random_batch(cfg, 4, 2);
    const auto report = conflict_probe(params.params, builder(params, batch, Routing::Strict),
                                       default_loss_pairs(), kAllTags, 7);
    CHECK(report.step == 7);
    for (const auto& pair : default_loss_pairs()) {
        CAPTURE(loss_pair_name(pair));
        const auto& all = report.cosines.at(pair).at(Subspace::All);
        REQUIRE(all.has_value());
        CHECK(*all == 0.0);
    }
    CHECK(report.subspace_norms.at(LossKind::Anchor).at(Subspace::Topology) == 0.0);
    CHECK(report.subspace_norms.at(LossKind::Rec).at(Subspace::Topology) == 0.0);
    CHECK(report.subspace_norms.at(LossKind::Topo).at(Subspace::Semantic) == 0.0);
    CHECK(report.subspace_norms.at(LossKind::Topo).at(Subspace::Decoder) == 0.0);
    CHECK(report.subspace_norms.at(LossKind::Topo).at(Subspace::Topology) > 0.0);
    CHECK_FALSE(report.cosines.at({LossKind::Anchor, LossKind::Topo}).at(Subspace::Topology).has_value());

    const std::vector<GradReport> reports{report};
    for (double v : norm_distribution(reports, LossKind::Topo, Subspace::Semantic).samples) CHECK(v == 0.0);
    CHECK(report.loss_values.size() == 3);
}

TEST_CASE("probing leaves parameters bitwise unchanged and gradients zero") {
    auto cfg = testing::tiny_encoder();
    auto params = init_params<double>(8, cfg);
    testing::jitter(params, 9);
    const auto before = params.params;
    const auto batch = testing::random_batch(cfg, 4, 4);
    (void)conflict_probe(params.params, builder(params, batch, Routing::Naive), default_loss_pairs(), kAllTags, 0);
    for (std::size_t i = 0; i < params.params.size(); ++i) {
        CHECK(params.params[i].value == before[i].value);
        for (double g : params.params[i].grad) CHECK(g == 0.0);
    }
}

TEST_CASE("naive probe has defined cosines; two-stream cross cosines are undefined") {
    auto cfg = testing::tiny_encoder();
    auto params = init_params<double>(1, cfg);
    testing::jitter(params, 2);
    const auto batch = testing::random_batch(cfg, 4, 1);
    const auto naive = conflict_probe(params.params, builder(params, batch, Routing::Naive), default_loss_pairs(),
                                      kAllTags, 0);
    CHECK(naive.cosines.at({LossKind::Anchor, LossKind::Rec}).at(Subspace::All).has_value());
    CHECK(naive.cosines.at({LossKind::Anchor, LossKind::Topo}).at(Subspace::Topology).has_value());

    auto two = init_params<double>(1, cfg, true);
    testing::jitter(two, 2);
    const auto split = conflict_probe(two.params, builder(two, batch, Routing::TwoStream), default_loss_pairs(),
                                      kAllTags, 0);
    for (auto tag : kAllTags) {
        CHECK_FALSE(split.cosines.at({LossKind::Anchor, LossKind::Topo}).at(tag).has_value());
        CHECK_FALSE(split.cosines.at({LossKind::Anchor, LossKind::Rec}).at(tag).has_value());
    }
    CHECK(split.cosines.at({LossKind::Topo, LossKind::Rec}).at(Subspace::All).has_value());
}

TEST_CASE("CSV writers") {
    CHECK(kViolinHeader == "step,loss,subspace,layer,matrix,norm");
    GradReport r;
    r.step = 30;
    r.matrix_norms.push_back({LossKind::Anchor, Subspace::Semantic, 2, "blocks.2.attn.w_v", 0.5});
    r.matrix_norms.push_back({LossKind::Rec, Subspace::Decoder, std::nullopt, "decoder.weight", 0.25});
    r.cosines[{LossKind::Anchor, LossKind::Rec}][Subspace::All] = -0.125;
    r.cosines[{LossKind::Anchor, LossKind::Rec}][Subspace::Topology] = std::nullopt;
    std::ostringstream violin, cos;
    write_violin_rows(violin, r);
    write_grad_report_rows(cos, r);
    CHECK(violin.str() == "30,anchor,semantic,2,blocks.2.attn.w_v,0.5\n30,rec,decoder,,decoder.weight,0.25\n");
    CHECK(cos.str() == "30,anchor,rec,topology,,1\n30,anchor,rec,all,-0.125,0\n");
    CHECK(format_number(0.1) == "0.1");
    CHECK(format_number(1e-300) == "1e-300");
}
