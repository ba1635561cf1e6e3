// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include "muse/muse.h"

#include <json.hpp>

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "muse/diagnostics.hpp"
#include "muse/errors.hpp"
#include "muse/eval.hpp"
#include "muse/trainer.hpp"

struct muse_dataset {
    muse::Dataset value;
};

struct muse_checkpoint {
    muse::Checkpoint<double> value;
};

struct muse_train_config {
    muse::TrainConfig value;
};

namespace {

thread_local std::string g_last_error;

muse_status status_for(muse::ErrorCategory c) {
    switch (c) {
        case muse::ErrorCategory::Config: return MUSE_ERR_CONFIG;
        case muse::ErrorCategory::Argument: return MUSE_ERR_ARGUMENT;
        case muse::ErrorCategory::Dimension: return MUSE_ERR_DIMENSION;
        case muse::ErrorCategory::Io: return MUSE_ERR_IO;
        case muse::ErrorCategory::Parse: return MUSE_ERR_PARSE;
        case muse::ErrorCategory::Numeric: return MUSE_ERR_NUMERIC;
        case muse::ErrorCategory::Oracle: return MUSE_ERR_ORACLE;
    }
    return MUSE_ERR_INTERNAL;
}

template <typename F>
muse_status guarded(F&& f) {
    try {
        f();
        g_last_error.clear();
        return MUSE_OK;
    } catch (const muse::Error& e) {
        g_last_error = e.what();
        return status_for(e.category());
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return MUSE_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return MUSE_ERR_INTERNAL;
    }
}

void require(const void* p, const char* what) {
    if (p == nullptr) throw muse::ArgumentError(std::string(what) + " must not be NULL");
}

char* copy_string(const std::string& s) {
    auto* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out == nullptr) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

std::vector<muse::LossPair> parse_pairs(const char* text) {
    if (text == nullptr) return muse::default_loss_pairs();
    std::vector<muse::LossPair> pairs;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) pairs.push_back(muse::parse_loss_pair(item));
    }
    if (pairs.empty()) throw muse::ConfigError("no loss pairs given");
    return pairs;
}

}  // namespace

extern "C" {

const char* muse_version(void) { return "0.1.0"; }

const char* muse_last_error(void) { return g_last_error.c_str(); }

int muse_exit_code(muse_status status) {
    switch (status) {
        case MUSE_OK: return 0;
        case MUSE_ERR_CONFIG:
        case MUSE_ERR_ARGUMENT:
        case MUSE_ERR_DIMENSION: return 2;
        case MUSE_ERR_IO:
        case MUSE_ERR_PARSE: return 3;
        case MUSE_ERR_NUMERIC:
        case MUSE_ERR_ORACLE: return 4;
        case MUSE_ERR_INTERNAL: return 1;
    }
    return 1;
}

void muse_string_free(char* s) { std::free(s); }

muse_status muse_dataset_generate(size_t count, uint64_t seed, size_t image_size, size_t patch, size_t classes,
                                  muse_dataset** out) {
    return guarded([&] {
        require(out, "out");
        muse::SceneConfig cfg;
        cfg.image_size = image_size;
        cfg.patch = patch;
        cfg.classes = classes;
        *out = new muse_dataset{muse::make_dataset(count, seed, cfg)};
    });
}

muse_status muse_dataset_read(const char* path, muse_dataset** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new muse_dataset{muse::read_dataset(path)};
    });
}

muse_status muse_dataset_write(const muse_dataset* dataset, const char* path) {
    return guarded([&] {
        require(dataset, "dataset");
        require(path, "path");
        muse::write_dataset(dataset->value, path);
    });
}

size_t muse_dataset_count(const muse_dataset* dataset) { return dataset ? dataset->value.samples.size() : 0; }

muse_status muse_dataset_header_json(const muse_dataset* dataset, char** out) {
    return guarded([&] {
        require(dataset, "dataset");
        require(out, "out");
        const auto& h = dataset->value.header;
        const nlohmann::json j = {{"count", h.count},     {"image_h", h.image_h}, {"image_w", h.image_w},
                                  {"patch", h.patch},     {"classes", h.classes}, {"base_seed", h.base_seed}};
        *out = copy_string(j.dump());
    });
}

void muse_dataset_free(muse_dataset* dataset) { delete dataset; }

muse_status muse_train_config_new(const char* json, muse_train_config** out) {
    return guarded([&] {
        require(out, "out");
        auto cfg = json ? muse::TrainConfig::from_json(json) : muse::TrainConfig{};
        *out = new muse_train_config{std::move(cfg)};
    });
}

muse_status muse_train_config_merge(muse_train_config* config, const char* json) {
    return guarded([&] {
        require(config, "config");
        require(json, "json");
        config->value = muse::TrainConfig::from_json(json, config->value);
    });
}

muse_status muse_train_config_adopt_dataset(muse_train_config* config, const muse_dataset* dataset) {
    return guarded([&] {
        require(config, "config");
        require(dataset, "dataset");
        const auto& h = dataset->value.header;
        config->value.encoder.image_size = h.image_h;
        config->value.encoder.patch = h.patch;
        config->value.encoder.classes = h.classes;
    });
}

muse_status muse_train_config_json(const muse_train_config* config, char** out) {
    return guarded([&] {
        require(config, "config");
        require(out, "out");
        config->value.validate();
        *out = copy_string(config->value.to_json());
    });
}

void muse_train_config_free(muse_train_config* config) { delete config; }

muse_status muse_train(const muse_train_config* config, const muse_dataset* dataset, const char* out_dir,
                       muse_step_callback callback, void* user) {
    return guarded([&] {
        require(config, "config");
        require(dataset, "dataset");
        require(out_dir, "out_dir");
        muse::TrainOptions opts;
        opts.out_dir = std::filesystem::path(out_dir);
        if (callback) {
            opts.on_step = [callback, user](const muse::MetricsRow& row) {
                callback(row.step, row.stage, row.total, user);
            };
        }
        (void)muse::train_run(config->value, dataset->value, opts);
    });
}

muse_status muse_checkpoint_read(const char* path, muse_checkpoint** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new muse_checkpoint{muse::read_checkpoint<double>(path)};
    });
}

muse_status muse_checkpoint_write(const muse_checkpoint* checkpoint, const char* path) {
    return guarded([&] {
        require(checkpoint, "checkpoint");
        require(path, "path");
        muse::write_checkpoint(path, checkpoint->value.params, checkpoint->value.header);
    });
}

long muse_checkpoint_step(const muse_checkpoint* checkpoint) {
    return checkpoint ? checkpoint->value.header.step : -1;
}

void muse_checkpoint_free(muse_checkpoint* checkpoint) { delete checkpoint; }

muse_status muse_evaluate(const muse_checkpoint* checkpoint, const muse_dataset* dataset, uint64_t seed,
                          const char* label, char** json_out) {
    return guarded([&] {
        require(checkpoint, "checkpoint");
        require(dataset, "dataset");
        require(json_out, "json_out");
        const auto report = muse::evaluate(checkpoint->value, dataset->value, seed, label ? label : "");
        *json_out = copy_string(report.to_json());
    });
}

muse_status muse_diagnose(const muse_checkpoint* checkpoint, const muse_dataset* dataset, const char* pairs,
                          uint64_t seed, size_t batch, const char* report_path, const char* violin_path) {
    return guarded([&] {
        require(checkpoint, "checkpoint");
        require(dataset, "dataset");
        require(report_path, "report_path");
        require(violin_path, "violin_path");
        muse::DiagnoseOptions opts;
        opts.pairs = parse_pairs(pairs);
        opts.seed = seed;
        opts.batch = batch;
        const auto report = muse::diagnose_checkpoint(checkpoint->value, dataset->value, opts);
        std::ofstream rep(report_path), vio(violin_path);
        if (!rep) throw muse::IoError(std::string("cannot write ") + report_path);
        if (!vio) throw muse::IoError(std::string("cannot write ") + violin_path);
        rep << muse::kGradReportHeader << '\n';
        muse::write_grad_report_rows(rep, report);
        vio << muse::kViolinHeader << '\n';
        muse::write_violin_rows(vio, report);
        rep.close();
        vio.close();
        if (rep.fail() || vio.fail()) throw muse::IoError("failed to write diagnose output");
    });
}

}  // extern "C"
