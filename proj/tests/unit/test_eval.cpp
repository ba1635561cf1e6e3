// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Dense>
#include <json.hpp>

#include "model_fixture.hpp"
#include "muse/errors.hpp"
#include "muse/eval.hpp"

using namespace muse;

namespace {

std::vector<double> random_stochastic(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> m(n * n);
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < n; ++c) s += m[r * n + c] = u(rng) * u(rng);
        for (std::size_t c = 0; c < n; ++c) m[r * n + c] /= s;
    }
    return m;
}

/// Direct enumeration of the documented rules for one scene.
std::pair<double, double> brute_force(const std::vector<double>& a, const std::vector<std::uint8_t>& mask) {
    const std::size_t n = mask.size();
    const double nd = static_cast<double>(n);
    std::size_t right = 0, total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const bool pred = a[i * n + j] + a[j * n + i] > 2.0 / nd;
            right += pred == (mask[i] == mask[j]) ? 1 : 0;
            ++total;
        }
    }
    std::size_t seed = n;
    double best = -1;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i] == 0) continue;
        double mass = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i && mask[j] != 0) mass += a[i * n + j];
        }
        if (mass > best) {
            best = mass;
            seed = i;
        }
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const bool p = a[seed * n + j] > 1.0 / nd;
        const bool t = mask[j] == mask[seed];
        inter += p && t;
        uni += p || t;
    }
    return {static_cast<double>(right) / static_cast<double>(total),
            static_cast<double>(inter) / static_cast<double>(uni)};
}

}  // namespace

TEST_CASE("segmentation of the exact teacher is perfect") {
    std::vector<std::uint8_t> mask(16, 0);
    for (std::size_t i : {5u, 6u, 9u, 10u}) mask[i] = 1;
    for (std::size_t i : {0u, 1u}) mask[i] = 2;
    const auto t = teacher_attention_from_mask(mask, 0.0);
    const auto s = attention_segmentation({t}, {mask});
    CHECK(s.pair_acc == 1.0);
    CHECK(s.iou == 1.0);
    CHECK(s.samples == 1);
    CHECK(s.skipped == 0);
}

TEST_CASE("uniform attention predicts no same-segment pair") {
    std::vector<std::uint8_t> mask(16, 0);
    for (std::size_t i = 0; i < 6; ++i) mask[i] = 1;
    const std::vector<double> uniform(256, 1.0 / 16.0);
    const auto s = attention_segmentation({uniform}, {mask});
    // 6 * 10 pairs differ out of 120.
    CHECK(s.pair_acc == doctest::Approx(60.0 / 120.0).epsilon(1e-15));
    CHECK(s.iou == 0.0);
}

TEST_CASE("segmentation matches the brute-force oracle on random maps") {
    std::mt19937_64 rng(17);
    std::vector<std::vector<double>> maps;
    std::vector<std::vector<std::uint8_t>> masks;
    double acc = 0, iou = 0;
    for (int s = 0; s < 25; ++s) {
        std::vector<std::uint8_t> mask(16, 0);
        for (std::size_t i = 0; i < 16; ++i) mask[i] = (i % 4) >= static_cast<std::size_t>(s % 3 + 1) ? 1 : 0;
        auto a = random_stochastic(rng, 16);
        const auto [pa, pi] = brute_force(a, mask);
        acc += pa;
        iou += pi;
        maps.push_back(std::move(a));
        masks.push_back(mask);
    }
    masks.push_back(std::vector<std::uint8_t>(16, 0));
    maps.push_back(std::vector<double>(256, 1.0 / 16.0));
    const auto s = attention_segmentation(maps, masks);
    CHECK(s.samples == 25);
    CHECK(s.skipped == 1);
    CHECK(s.pair_acc == doctest::Approx(acc / 25).epsilon(1e-14));
    CHECK(s.iou == doctest::Approx(iou / 25).epsilon(1e-14));
}

TEST_CASE("linear probe: separable, constant and rotated features") {
    const std::size_t classes = 4, m = 200;
    std::vector<std::size_t> labels(m);
    std::vector<double> onehot(m * classes, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        labels[i] = (i * 7) % classes;
        onehot[i * classes + labels[i]] = 1.0;
    }
    const auto sep = linear_probe(onehot, classes, labels, classes, 1);
    CHECK(sep.accuracy == 1.0);
    CHECK(sep.train == 160);
    CHECK(sep.test == 40);

    double mean = 0;
    const std::vector<double> constant(m * 3, 0.7);
    for (std::uint64_t seed = 0; seed < 20; ++seed) mean += linear_probe(constant, 3, labels, classes, seed).accuracy;
    mean /= 20;
    CHECK(mean >= 0.5 / classes);
    CHECK(mean <= 2.0 / classes);

    // Zero features give all-zero scores; the tie goes to class 0.
    std::vector<std::size_t> mostly_zero(100, 0);
    mostly_zero[3] = mostly_zero[50] = 1;
    const auto tied = linear_probe(std::vector<double>(100 * 2, 0.0), 2, mostly_zero, 2, 4);
    CHECK(tied.accuracy >= 0.9);

    std::mt19937_64 rng(5);
    std::normal_distribution<double> n;
    const std::size_t dim = 6;
    std::vector<double> feats(m * dim);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t d = 0; d < dim; ++d) feats[i * dim + d] = n(rng) + (d == labels[i] ? 1.5 : 0.0);
    }
    Eigen::MatrixXd q = Eigen::MatrixXd::NullaryExpr(dim, dim, [&] { return n(rng); }).householderQr().householderQ();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(feats.data(), m, dim);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> xr = x * q;
    std::vector<double> rotated(xr.data(), xr.data() + xr.size());
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const double a = linear_probe(feats, dim, labels, classes, seed).accuracy;
        const double b = linear_probe(rotated, dim, labels, classes, seed).accuracy;
        CHECK(std::abs(a - b) < 1e-9);
        CHECK(a > 0.5);
    }
}

TEST_CASE("linear probe errors") {
    const std::vector<std::size_t> labels{0, 1, 0};
    const std::vector<double> f{1, 0, 0, 1, 1, 0};
    CHECK_THROWS_AS((void)linear_probe(f, 2, labels, 2, 0), ArgumentError);
    std::vector<std::size_t> l4{0, 1, 0, 1};
    std::vector<double> bad{1, 0, 0, 1, std::numeric_limits<double>::quiet_NaN(), 0, 1, 1};
    CHECK_THROWS_AS((void)linear_probe(bad, 2, l4, 2, 0), NumericError);
}

TEST_CASE("retrieval examples") {
    const std::vector<double> table{1, 0, 0, 0, 1, 0, 0, 0, 1};
    const std::vector<std::size_t> labels{2, 0, 1};
    const std::vector<double> exact{0, 0, 1, 1, 0, 0, 0, 1, 0};
    CHECK(retrieval_top1(exact, 3, labels, table) == 1.0);

    const std::vector<double> protos{1, 0, 0, 0, 1, 0};
    const std::vector<double> ortho{0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 1};
    const std::vector<std::size_t> l2{0, 1, 1, 0};
    CHECK(retrieval_top1(ortho, 3, l2, protos) == 0.5);
}

TEST_CASE("retrieval of random embeddings sits near chance") {
    const std::size_t c = 8, m = 1000, dim = 16;
    double mean = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n;
        std::vector<double> e(m * dim), t(c * dim);
        for (auto& v : e) v = n(rng);
        for (auto& v : t) v = n(rng);
        std::vector<std::size_t> labels(m);
        for (auto& l : labels) l = rng() % c;
        const double acc = retrieval_top1(e, dim, labels, t);
        CHECK(acc >= 0.09);
        CHECK(acc <= 0.16);
        mean += acc / 20;
    }
    CHECK(mean == doctest::Approx(0.125).epsilon(0.1));
}

TEST_CASE("psnr examples") {
    const std::vector<double> target{0.2, 0.4, 0.6, 0.8};
    std::vector<double> off = target;
    for (auto& v : off) v += 0.1;
    CHECK(psnr(off, target) == doctest::Approx(20.0).epsilon(1e-12));
    for (auto& v : off) v += 0.4;
    CHECK(psnr(off, target) == doctest::Approx(6.0206).epsilon(1e-5));
    CHECK(std::isinf(psnr(target, target)));

    EvalReport r;
    r.psnr_db = std::numeric_limits<double>::infinity();
    const auto j = nlohmann::json::parse(r.to_json());
    CHECK(j.at("psnr_db") == "inf");
    for (const char* key : {"config_hash", "checkpoint", "seg_pair_acc", "seg_iou", "probe_acc", "retrieval_top1", "n"}) {
        CHECK(j.contains(key));
    }
}

TEST_CASE("config hash ignores formatting") {
    CHECK(config_hash(R"({"a": 1, "b": [1, 2]})") == config_hash("{\"b\":[1,2],\n \"a\":1}"));
    CHECK(config_hash(R"({"a": 1})") != config_hash(R"({"a": 2})"));
    CHECK(config_hash("{}").size() == 16);
}

TEST_CASE("evaluate is deterministic and in range") {
    SceneConfig sc;
    sc.image_size = 16;
    sc.patch = 2;
    const auto ds = make_dataset(40, 8, sc);
    auto enc = testing::tiny_encoder();
    enc.image_size = 16;
    enc.patch = 2;
    enc.classes = 8;
    const auto params = init_params<double>(3, enc);
    Checkpoint<double> ck{CheckpointHeader{kCheckpointVersion, checkpoint_config(enc, false), 0, 0}, params};
    const auto a = evaluate(ck, ds, 1, "init.bin");
    const auto b = evaluate(ck, ds, 1, "init.bin");
    CHECK(a.to_json() == b.to_json());
    CHECK(a.n == 40);
    CHECK(a.checkpoint == "init.bin");
    for (double v : {a.seg_pair_acc, a.seg_iou, a.probe_acc, a.retrieval_top1}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(std::isfinite(a.psnr_db));

    auto maps = mean_patch_attention(ck.params, std::vector<double>(2 * 64 * 12, 0.5), 2);
    REQUIRE(maps.size() == 2);
    for (std::size_t r = 0; r < 64; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 64; ++c) s += maps[0][r * 64 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}
