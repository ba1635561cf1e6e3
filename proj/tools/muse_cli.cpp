// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0
//
// muse: command-line front end over the C API.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "muse/muse.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Failure {
    muse_status status;
};

void check(muse_status s) {
    if (s != MUSE_OK) throw Failure{s};
}

struct Deleter {
    void operator()(muse_dataset* p) const { muse_dataset_free(p); }
    void operator()(muse_checkpoint* p) const { muse_checkpoint_free(p); }
    void operator()(muse_train_config* p) const { muse_train_config_free(p); }
    void operator()(char* p) const { muse_string_free(p); }
};

template <typename T>
using Handle = std::unique_ptr<T, Deleter>;

std::string take_string(char* raw) {
    Handle<char> owned(raw);
    return owned ? std::string(owned.get()) : std::string();
}

Handle<muse_dataset> load_dataset(const std::string& path) {
    muse_dataset* raw = nullptr;
    check(muse_dataset_read(path.c_str(), &raw));
    return Handle<muse_dataset>(raw);
}

Handle<muse_checkpoint> load_checkpoint(const std::string& path) {
    muse_checkpoint* raw = nullptr;
    check(muse_checkpoint_read(path.c_str(), &raw));
    return Handle<muse_checkpoint>(raw);
}

// ISO-8601 UTC; SOURCE_DATE_EPOCH pins the clock for reproducible manifests.
std::string timestamp() {
    std::time_t t = std::time(nullptr);
    if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) {
        try {
            t = static_cast<std::time_t>(std::stoll(env));
        } catch (const std::exception&) {
            throw std::runtime_error("SOURCE_DATE_EPOCH must be an integer");
        }
    }
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

struct TrainArgs {
    std::string config_path, preset, data, out, precision, routing;
    std::vector<long> steps;
    std::optional<std::uint64_t> seed;
    std::optional<long> probe_interval;
    std::optional<std::size_t> batch;
};

int run_train(const TrainArgs& a) {
    auto dataset = load_dataset(a.data);

    muse_train_config* raw_cfg = nullptr;
    check(muse_train_config_new(nullptr, &raw_cfg));
    Handle<muse_train_config> cfg(raw_cfg);

    if (const char* env = std::getenv("MUSE_PRECISION")) {
        check(muse_train_config_merge(cfg.get(), json{{"precision", env}}.dump().c_str()));
    }
    bool file_sets_encoder = false;
    if (!a.config_path.empty()) {
        std::ifstream in(a.config_path);
        if (!in) {
            std::cerr << "error: cannot open config '" << a.config_path << "'\n";
            return 3;
        }
        std::stringstream ss;
        ss << in.rdbuf();
        json parsed;
        try {
            parsed = json::parse(ss.str());
        } catch (const json::exception& e) {
            std::cerr << "error: config '" << a.config_path << "': " << e.what() << '\n';
            return 2;
        }
        file_sets_encoder = parsed.is_object() && parsed.contains("encoder");
        check(muse_train_config_merge(cfg.get(), parsed.dump().c_str()));
    }
    if (!file_sets_encoder) check(muse_train_config_adopt_dataset(cfg.get(), dataset.get()));

    json flags = json::object();
    if (!a.preset.empty()) flags["preset"] = a.preset;
    if (!a.routing.empty()) flags["routing"] = a.routing;
    if (!a.precision.empty()) flags["precision"] = a.precision;
    if (!a.steps.empty()) flags["steps"] = a.steps;
    if (a.seed) flags["seed"] = *a.seed;
    if (a.probe_interval) flags["probe_interval"] = *a.probe_interval;
    if (a.batch) flags["batch"] = *a.batch;
    check(muse_train_config_merge(cfg.get(), flags.dump().c_str()));

    char* raw_json = nullptr;
    check(muse_train_config_json(cfg.get(), &raw_json));
    const json resolved = json::parse(take_string(raw_json));

    const fs::path out_dir(a.out);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        std::cerr << "error: cannot create '" << out_dir.string() << "': " << ec.message() << '\n';
        return 3;
    }

    std::vector<std::string> outputs{"metrics.csv", "violin.csv"};
    const auto steps = resolved.at("steps").get<std::vector<long>>();
    for (std::size_t s = 0; s < steps.size(); ++s) {
        if (steps[s] > 0) outputs.push_back("ckpt_stage" + std::to_string(s + 1) + ".bin");
    }
    outputs.push_back("final.bin");

    json manifest = {{"command", "train"},
                     {"config", resolved},
                     {"seed", resolved.at("seed")},
                     {"tool_version", muse_version()},
                     {"data", a.data},
                     {"start_time", timestamp()},
                     {"end_time", nullptr},
                     {"status", "running"},
                     {"outputs", outputs}};
    write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");

    const muse_status st = muse_train(cfg.get(), dataset.get(), a.out.c_str(), nullptr, nullptr);
    manifest["end_time"] = timestamp();
    manifest["status"] = st == MUSE_OK ? "ok" : "failed";
    write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
    check(st);
    std::cout << "trained " << resolved.at("preset").get<std::string>() << " ("
              << resolved.at("routing").get<std::string>() << ") -> " << out_dir.string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MUSE toy tokenizer: data generation, curriculum training, evaluation, diagnostics"};
    app.set_version_flag("--version", std::string(muse_version()));
    app.require_subcommand(1);

    std::string out, data, checkpoint, pairs;
    std::size_t count = 0, image_size = 32, patch = 4, classes = 8, batch = 32;
    std::uint64_t seed = 0;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
    gen->add_option("--out", out, "Output dataset file")->required();
    gen->add_option("--count", count, "Number of scenes")->required();
    gen->add_option("--seed", seed, "Base seed");
    gen->add_option("--image-size", image_size, "Image side in pixels")->capture_default_str();
    gen->add_option("--patch", patch, "Patch side in pixels")->capture_default_str();
    gen->add_option("--classes", classes, "Number of classes (<= 8)")->capture_default_str();

    TrainArgs targs;
    std::uint64_t train_seed = 0;
    long probe_interval = 0;
    std::size_t train_batch = 0;
    auto* train = app.add_subcommand("train", "Run the three-stage curriculum");
    train->add_option("--config", targs.config_path, "JSON file mirroring the training configuration");
    train->add_option("--preset", targs.preset, "Preset name");
    train->add_option("--data", targs.data, "Dataset file")->required();
    train->add_option("--out", targs.out, "Output directory")->required();
    train->add_option("--steps-per-stage", targs.steps, "Steps of stages 1, 2 and 3")->expected(3);
    auto* seed_opt = train->add_option("--seed", train_seed, "Training seed");
    train->add_option("--precision", targs.precision, "f32 or f64");
    auto* probe_opt = train->add_option("--probe-interval", probe_interval, "Steps between gradient probes (0 = off)");
    train->add_option("--routing", targs.routing, "strict, relaxed, naive or two_stream");
    auto* batch_opt = train->add_option("--batch", train_batch, "Batch size");

    std::uint64_t eval_seed = 0;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", data, "Dataset file")->required();
    eval->add_option("--out", out, "Output JSON file")->required();
    eval->add_option("--seed", eval_seed, "Seed of the probe split");

    std::uint64_t diag_seed = 0;
    auto* diag = app.add_subcommand("diagnose", "Per-subspace gradient cosines of a checkpoint");
    diag->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    diag->add_option("--data", data, "Dataset file")->required();
    diag->add_option("--pairs", pairs, "Comma-separated loss pairs, e.g. anchor:topo,topo:rec");
    diag->add_option("--out", out, "Output directory for grad_report.csv and violin.csv")->required();
    diag->add_option("--seed", diag_seed, "Batch seed");
    diag->add_option("--batch", batch, "Batch size")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        (void)app.exit(e);
        return 2;
    }

    try {
        if (*gen) {
            muse_dataset* raw = nullptr;
            check(muse_dataset_generate(count, seed, image_size, patch, classes, &raw));
            Handle<muse_dataset> ds(raw);
            check(muse_dataset_write(ds.get(), out.c_str()));
            std::cout << "wrote " << muse_dataset_count(ds.get()) << " scenes to " << out << '\n';
            return 0;
        }
        if (*train) {
            if (*seed_opt) targs.seed = train_seed;
            if (*probe_opt) targs.probe_interval = probe_interval;
            if (*batch_opt) targs.batch = train_batch;
            return run_train(targs);
        }
        if (*eval) {
            auto ck = load_checkpoint(checkpoint);
            auto ds = load_dataset(data);
            char* raw = nullptr;
            check(muse_evaluate(ck.get(), ds.get(), eval_seed, fs::path(checkpoint).filename().string().c_str(), &raw));
            write_text(out, take_string(raw) + "\n");
            std::cout << "wrote " << out << '\n';
            return 0;
        }
        if (*diag) {
            auto ck = load_checkpoint(checkpoint);
            auto ds = load_dataset(data);
            const fs::path dir(out);
            std::error_code ec;
            fs::create_directories(dir, ec);
            if (ec) {
                std::cerr << "error: cannot create '" << dir.string() << "': " << ec.message() << '\n';
                return 3;
            }
            const auto report = (dir / "grad_report.csv").string();
            const auto violin = (dir / "violin.csv").string();
            check(muse_diagnose(ck.get(), ds.get(), pairs.empty() ? nullptr : pairs.c_str(), diag_seed, batch,
                                report.c_str(), violin.c_str()));
            std::cout << "wrote " << report << " and " << violin << '\n';
            return 0;
        }
    } catch (const Failure& f) {
        std::cerr << "error: " << muse_last_error() << '\n';
        return muse_exit_code(f.status);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
