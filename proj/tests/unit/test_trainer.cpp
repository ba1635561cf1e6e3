// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "model_fixture.hpp"
#include "muse/errors.hpp"
#include "muse/trainer.hpp"

using namespace muse;
namespace fs = std::filesystem;

namespace {

EncoderConfig small_encoder() {
    auto c = testing::tiny_encoder();
    c.image_size = 16;
    c.patch = 2;
    c.classes = 8;
    return c;
}

const Dataset& small_dataset() {
    static const Dataset d = [] {
        SceneConfig sc;
        sc.image_size = 16;
        sc.patch = 2;
        return make_dataset(24, 3, sc);
    }();
    return d;
}

TrainConfig small_config(std::array<long, 3> steps) {
    TrainConfig c;
    c.encoder = small_encoder();
    c.steps = steps;
    c.batch = 4;
    c.seed = 2;
    c.precision = Precision::F64;
    c.probe_interval = 2;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("muse_trainer_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

TEST_CASE("stage policy examples") {
    TrainConfig c;
    const auto s1 = stage_policy(1, c);
    CHECK(s1.losses == std::set<LossKind>{LossKind::Topo});
    CHECK(s1.frozen == std::set<Subspace>{Subspace::Backbone});
    CHECK(s1.lr == 4e-4);
    CHECK(s1.routing == Routing::Strict);
    CHECK(stage_policy(2, c).losses == std::set<LossKind>{LossKind::Topo, LossKind::Anchor});
    const auto s3 = stage_policy(3, c);
    CHECK(s3.losses == testing::all_losses());
    CHECK(s3.frozen.empty());
    CHECK(s3.lr == 1e-5);

    c.preset = Preset::SemanticOnly;
    CHECK(stage_policy(2, c).losses == std::set<LossKind>{LossKind::Anchor});
    c.preset = Preset::TopologyOnly;
    CHECK_FALSE(stage_policy(3, c).losses.contains(LossKind::Anchor));
    c.preset = Preset::BaselineRecOnly;
    CHECK(stage_policy(1, c).losses == std::set<LossKind>{LossKind::Rec});
    c.preset = Preset::NaiveShared;
    CHECK(stage_policy(1, c).routing == Routing::Naive);
    c.preset = Preset::SoftReg;
    CHECK(stage_policy(3, c).soft_reg);
    CHECK(stage_policy(3, c).routing == Routing::Naive);
    c.preset = Preset::TwoStream;
    CHECK(stage_policy(2, c).routing == Routing::TwoStream);
}

TEST_CASE("preset and routing consistency") {
    TrainConfig c;
    c.preset = Preset::NaiveShared;
    c.routing = Routing::Strict;
    CHECK_THROWS_AS((void)c.effective_routing(), ConfigError);
    c.routing = Routing::Naive;
    CHECK(c.effective_routing() == Routing::Naive);
    c.preset = Preset::Muse;
    c.routing = Routing::TwoStream;
    CHECK_THROWS_AS((void)c.effective_routing(), ConfigError);
    c.routing = Routing::Relaxed;
    CHECK(c.effective_routing() == Routing::Relaxed);
    CHECK_THROWS_AS((void)parse_preset("full"), ConfigError);
    CHECK(parse_preset("baseline_rec_only") == Preset::BaselineRecOnly);
}

TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    c.steps = {100, 100, 100};
    // Five warmup steps ramp linearly to the peak.
    CHECK(learning_rate(c, 1, 0) == doctest::Approx(4e-4 / 5));
    CHECK(learning_rate(c, 1, 4) == doctest::Approx(4e-4));
    CHECK(learning_rate(c, 1, 5) == doctest::Approx(4e-4));
    CHECK(learning_rate(c, 1, 100) == doctest::Approx(1e-5));
    double prev = learning_rate(c, 2, 5);
    for (long k = 6; k < 100; ++k) {
        const double lr = learning_rate(c, 2, k);
        CHECK(lr <= prev);
        CHECK(lr > 0);
        prev = lr;
    }
}

TEST_CASE("soft regularization examples") {
    const std::vector<double> a{1, 0}, b{-1, 0};
    auto r = soft_reg_adjust(a, b, 1.0);
    CHECK(r.a == std::vector<double>{0, 0});
    CHECK(r.b == std::vector<double>{0, 0});

    r = soft_reg_adjust(std::vector<double>{1, 1}, b, 1.0);
    CHECK(r.a == std::vector<double>{0, 1});

    const std::vector<double> c{0.5, 2}, d{1, 1};
    r = soft_reg_adjust(c, d, 0.7);
    CHECK(r.a == c);
    CHECK(r.b == d);
    CHECK_FALSE(r.flagged);

    r = soft_reg_adjust(std::vector<double>{1, 2}, std::vector<double>{0, 0}, 0.5);
    CHECK(r.a == std::vector<double>{1, 2});
    CHECK(r.flagged);

    CHECK_THROWS_AS((void)soft_reg_adjust(a, b, 1.5), ArgumentError);

    // Pairwise projection with the original partners pulls the cosine toward 0.
    std::vector<std::vector<double>> g{{1.0, 0.2}, {-0.8, 0.6}};
    const double before = g[0][0] * g[1][0] + g[0][1] * g[1][1];
    CHECK_FALSE(soft_reg_adjust_all(g, 0.3));
    const double after = g[0][0] * g[1][0] + g[0][1] * g[1][1];
    CHECK(before < after);
    CHECK(after < 0);
}

TEST_CASE("config JSON round trip and validation") {
    TrainConfig c;
    c.preset = Preset::SoftReg;
    c.steps = {3, 4, 5};
    c.seed = 99;
    c.pairs = {{LossKind::Topo, LossKind::Rec}};
    c.weights[1].anchor = 0.25;
    const auto text = c.to_json();
    const auto back = TrainConfig::from_json(text);
    CHECK(back.to_json() == text);
    CHECK(back.seed == 99);
    CHECK(back.weights[1].anchor == 0.25);
    CHECK(nlohmann::json::parse(text).at("routing") == "naive");

    CHECK_THROWS_AS((void)TrainConfig::from_json(R"({"stepz": [1, 1, 1]})"), ConfigError);
    CHECK_THROWS_AS((void)TrainConfig::from_json(R"({"preset": "full"})"), ConfigError);

    auto bad = c;
    bad.batch = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.lr[0] = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.weights[0].topo = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.teacher_patch = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    const auto partial = TrainConfig::from_json(R"({"batch": 8})", c);
    CHECK(partial.batch == 8);
    CHECK(partial.seed == 99);
}

TEST_CASE("metrics row formatting") {
    CHECK(kMetricsHeader ==
          "step,stage,loss_topo,loss_anchor,loss_rec,loss_total,cos_anchor_topo,cos_anchor_rec,cos_topo_rec,"
          "undef_flags,gnorm_topology_topo,gnorm_topology_anchor,gnorm_topology_rec,gnorm_semantic_topo,"
          "gnorm_semantic_anchor,gnorm_semantic_rec");
    MetricsRow row;
    row.step = 12;
    row.stage = 1;
    row.losses.topo = 0.5;
    row.total = 0.5;
    const auto cells = split(format_metrics_row(row));
    REQUIRE(cells.size() == 16);
    CHECK(cells[0] == "12");
    CHECK(cells[2] == "0.5");
    CHECK(cells[3].empty());
    for (std::size_t i = 6; i < 16; ++i) CHECK(cells[i].empty());
}

TEST_CASE("batch sampling is deterministic and in range") {
    const auto a = batch_indices(5, 17, 32, 100);
    CHECK(a == batch_indices(5, 17, 32, 100));
    CHECK(a != batch_indices(5, 18, 32, 100));
    CHECK(a != batch_indices(6, 17, 32, 100));
    for (auto i : a) CHECK(i < 100);
}

TEST_CASE("prepared batches carry row-stochastic teachers on the student grid") {
    const auto& ds = small_dataset();
    const std::vector<std::size_t> idx{0, 5, 9};
    for (std::size_t tp : {0u, 4u}) {
        const auto b = prepare_batch<double>(ds, idx, small_encoder(), 0.1, tp);
        CHECK(b.size == 3);
        CHECK(b.patches.size() == 3 * 64 * 12);
        REQUIRE(b.teacher.size() == 3 * 64 * 64);
        for (std::size_t r = 0; r < 3 * 64; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 64; ++c) s += b.teacher[r * 64 + c];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("zero steps writes a header-only metrics file and the initial checkpoint") {
    const auto dir = scratch("zero");
    const auto r = train_run(small_config({0, 0, 0}), small_dataset(), TrainOptions{dir, {}});
    CHECK(r.rows.empty());
    CHECK(slurp(dir / "metrics.csv") == std::string(kMetricsHeader) + "\n");
    CHECK(slurp(dir / "violin.csv") == std::string(kViolinHeader) + "\n");
    CHECK_FALSE(fs::exists(dir / "ckpt_stage1.bin"));
    const auto ck = read_checkpoint<double>(dir / "final.bin");
    const auto init = init_params<double>(2, small_encoder());
    for (std::size_t i = 0; i < init.params.size(); ++i) {
        std::vector<float> expect(init.params[i].value.begin(), init.params[i].value.end());
        std::vector<float> got(ck.params.params[i].value.begin(), ck.params.params[i].value.end());
        CHECK(got == expect);
    }
    fs::remove_all(dir);
}

TEST_CASE("training is deterministic in 64-bit mode") {
    const auto a = scratch("det_a");
    const auto b = scratch("det_b");
    const auto cfg = small_config({3, 3, 3});
    const auto ra = train_run(cfg, small_dataset(), TrainOptions{a, {}});
    (void)train_run(cfg, small_dataset(), TrainOptions{b, {}});
    for (const char* f : {"metrics.csv", "violin.csv", "ckpt_stage1.bin", "ckpt_stage2.bin", "ckpt_stage3.bin",
                          "final.bin"}) {
        CAPTURE(f);
        CHECK(slurp(a / f) == slurp(b / f));
    }
    CHECK(ra.rows.size() == 9);
    CHECK(ra.checkpoints.size() == 4);
    std::istringstream lines(slurp(a / "metrics.csv"));
    std::string line;
    std::getline(lines, line);
    while (std::getline(lines, line)) CHECK(split(line).size() == 16);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("freeze contract and strict routing during training") {
    auto cfg = small_config({4, 4, 0});
    cfg.probe_interval = 1;
    const auto r = train_run(cfg, small_dataset());
    for (std::size_t i = 0; i < r.initial.params.size(); ++i) {
        const auto& p = r.initial.params[i];
        CAPTURE(p.name);
        if (p.subspace == Subspace::Backbone) CHECK(p.value == r.final.params[i].value);
        if (p.subspace == Subspace::Topology) CHECK(p.value != r.final.params[i].value);
    }
    REQUIRE(r.reports.size() == 8);
    for (const auto& rep : r.reports) {
        CHECK(rep.subspace_norms.at(LossKind::Anchor).at(Subspace::Topology) == 0.0);
        CHECK(rep.subspace_norms.at(LossKind::Rec).at(Subspace::Topology) == 0.0);
        CHECK(rep.subspace_norms.at(LossKind::Topo).at(Subspace::Semantic) == 0.0);
        CHECK(rep.subspace_norms.at(LossKind::Topo).at(Subspace::Decoder) == 0.0);
        for (const auto& pair : default_loss_pairs()) {
            const auto& c = rep.cosines.at(pair).at(Subspace::All);
            if (c) CHECK(*c == 0.0);
        }
    }
}

TEST_CASE("naive_shared runs naive routing and records conflicts") {
    auto cfg = small_config({0, 0, 4});
    cfg.preset = Preset::NaiveShared;
    cfg.probe_interval = 1;
    const auto r = train_run(cfg, small_dataset());
    REQUIRE(r.reports.size() == 4);
    for (const auto& rep : r.reports) {
        CHECK(rep.subspace_norms.at(LossKind::Anchor).at(Subspace::Topology) > 0.0);
        const auto& c = rep.cosines.at({LossKind::Anchor, LossKind::Rec}).at(Subspace::All);
        REQUIRE(c.has_value());
        CHECK(*c != 0.0);
    }
}

TEST_CASE("other presets train without errors") {
    for (auto preset : {Preset::SoftReg, Preset::TwoStream, Preset::SemanticOnly, Preset::TopologyOnly,
                        Preset::BaselineRecOnly}) {
        CAPTURE(preset_name(preset));
        auto cfg = small_config({2, 2, 2});
        cfg.preset = preset;
        cfg.precision = Precision::F32;
        const auto r = train_run(cfg, small_dataset());
        CHECK(r.rows.size() == 6);
        for (const auto& row : r.rows) CHECK(std::isfinite(row.total));
    }
}

TEST_CASE("geometry mismatch between dataset and encoder is rejected") {
    auto cfg = small_config({1, 0, 0});
    cfg.encoder.image_size = 32;
    CHECK_THROWS_AS((void)train_run(cfg, small_dataset()), ConfigError);
}

TEST_CASE("diagnosing a checkpoint reproduces the recorded routing") {
    const auto dir = scratch("diag");
    auto cfg = small_config({1, 1, 1});
    (void)train_run(cfg, small_dataset(), TrainOptions{dir, {}});
    const auto ck = read_checkpoint<double>(dir / "final.bin");
    DiagnoseOptions opt;
    opt.batch = 4;
    const auto a = diagnose_checkpoint(ck, small_dataset(), opt);
    const auto b = diagnose_checkpoint(ck, small_dataset(), opt);
    std::ostringstream sa, sb;
    write_grad_report_rows(sa, a);
    write_grad_report_rows(sb, b);
    CHECK(sa.str() == sb.str());
    CHECK(*a.cosines.at({LossKind::Anchor, LossKind::Rec}).at(Subspace::All) == 0.0);
    fs::remove_all(dir);
}
