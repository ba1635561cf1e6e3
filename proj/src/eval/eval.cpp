// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include "muse/eval.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "muse/diagnostics.hpp"
#include "muse/errors.hpp"
#include "../util/rng.hpp"

namespace muse {

namespace {

constexpr std::size_t kEvalChunk = 50;

std::size_t argmax_lowest(std::span<const double> scores) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.size(); ++c) {
        if (scores[c] > scores[best]) best = c;
    }
    return best;
}

}  // namespace

SegmentationScore attention_segmentation(const std::vector<std::vector<double>>& maps,
                                         const std::vector<std::vector<std::uint8_t>>& patch_masks) {
    if (maps.size() != patch_masks.size()) throw DimensionError("attention_segmentation: map/mask count differs");
    SegmentationScore out;
    double pair_sum = 0.0, iou_sum = 0.0;
    for (std::size_t s = 0; s < maps.size(); ++s) {
        const auto& a = maps[s];
        const auto& m = patch_masks[s];
        const std::size_t np = m.size();
        if (a.size() != np * np) throw DimensionError("attention_segmentation: map is not N_p x N_p");
        if (std::none_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; })) {
            ++out.skipped;
            continue;
        }
        const double inv = 1.0 / static_cast<double>(np);

        std::size_t correct = 0, pairs = 0;
        for (std::size_t i = 0; i < np; ++i) {
            for (std::size_t j = i + 1; j < np; ++j) {
                const bool predicted = a[i * np + j] + a[j * np + i] > 2.0 * inv;
                correct += predicted == (m[i] == m[j]);
                ++pairs;
            }
        }
        pair_sum += pairs ? static_cast<double>(correct) / static_cast<double>(pairs) : 1.0;

        std::size_t seed = np;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < np; ++i) {
            if (m[i] == 0) continue;
            double mass = 0.0;
            for (std::size_t j = 0; j < np; ++j) {
                if (j != i && m[j] != 0) mass += a[i * np + j];
            }
            if (mass > best) {
                best = mass;
                seed = i;
            }
        }
        std::size_t inter = 0, uni = 0;
        for (std::size_t j = 0; j < np; ++j) {
            const bool pred = a[seed * np + j] > inv;
            const bool truth = m[j] == m[seed];
            inter += pred && truth;
            uni += pred || truth;
        }
        iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++out.samples;
    }
    if (out.samples > 0) {
        out.pair_acc = pair_sum / static_cast<double>(out.samples);
        out.iou = iou_sum / static_cast<double>(out.samples);
    }
    return out;
}

std::vector<std::vector<double>> mean_patch_attention(EncoderParams<double>& params,
                                                      std::span<const double> patches, std::size_t batch) {
    const auto& cfg = params.config;
    const std::size_t np = cfg.num_patches(), heads = cfg.heads;
    ad::Graph<double> graph;
    ForwardOptions opts;
    opts.routing = params.two_stream ? Routing::TwoStream : Routing::Naive;
    opts.need_embedding = false;
    const auto out = encoder_forward(graph, params, patches, batch, opts);
    std::vector<std::vector<double>> maps(batch, std::vector<double>(np * np, 0.0));
    const double w = 1.0 / static_cast<double>(out.attention.size() * heads);
    for (const auto& layer : out.attention) {
        const auto student = extract_student_topology(layer, cfg.tokens(), np).value();
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                const auto* src = student.data() + (b * heads + h) * np * np;
                for (std::size_t k = 0; k < np * np; ++k) maps[b][k] += w * src[k];
            }
        }
    }
    return maps;
}

ProbeResult linear_probe(std::span<const double> features, std::size_t dim, std::span<const std::size_t> labels,
                         std::size_t classes, std::uint64_t seed, double ridge) {
    const std::size_t m = labels.size();
    if (dim == 0 || features.size() != m * dim) throw DimensionError("linear_probe: features are not M x dim");
    if (classes == 0 || m < 2 * classes) throw ArgumentError("linear_probe: need at least 2 samples per class");
    if (!(ridge > 0)) throw ArgumentError("linear_probe: ridge must be > 0");
    if (std::any_of(features.begin(), features.end(), [](double v) { return !std::isfinite(v); })) {
        throw NumericError("linear_probe: non-finite feature");
    }
    for (auto l : labels) {
        if (l >= classes) throw ArgumentError("linear_probe: label out of range");
    }

    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng::Stream stream(seed);
    for (std::size_t i = m - 1; i > 0; --i) std::swap(order[i], order[stream.below(i + 1)]);
    const std::size_t n_train = (m * 4) / 5;

    using Mat = Eigen::MatrixXd;
    Mat x(n_train, dim), y = Mat::Zero(n_train, classes);
    for (std::size_t r = 0; r < n_train; ++r) {
        for (std::size_t c = 0; c < dim; ++c) x(r, c) = features[order[r] * dim + c];
        y(r, labels[order[r]]) = 1.0;
    }
    Mat gram = x.transpose() * x;
    gram.diagonal().array() += ridge;
    const Mat w = gram.ldlt().solve(x.transpose() * y);
    if (!w.allFinite()) throw NumericError("linear_probe: ridge solve produced non-finite weights");

    std::size_t correct = 0;
    std::vector<double> scores(classes);
    for (std::size_t r = n_train; r < m; ++r) {
        const std::size_t i = order[r];
        for (std::size_t c = 0; c < classes; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) s += features[i * dim + k] * w(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
            scores[c] = s;
        }
        correct += argmax_lowest(scores) == labels[i];
    }
    ProbeResult out;
    out.train = n_train;
    out.test = m - n_train;
    out.accuracy = out.test ? static_cast<double>(correct) / static_cast<double>(out.test) : 0.0;
    return out;
}

double retrieval_top1(std::span<const double> embeddings, std::size_t dim, std::span<const std::size_t> labels,
                      std::span<const double> class_embeddings) {
    if (dim == 0 || embeddings.size() != labels.size() * dim || class_embeddings.size() % dim != 0) {
        throw DimensionError("retrieval_top1: inconsistent sizes");
    }
    if (labels.empty()) return 0.0;
    const std::size_t classes = class_embeddings.size() / dim;
    std::vector<double> scores(classes);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t c = 0; c < classes; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) s += embeddings[i * dim + k] * class_embeddings[c * dim + k];
            scores[c] = s;
        }
        correct += argmax_lowest(scores) == labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double psnr(std::span<const double> recon, std::span<const double> target) {
    if (recon.size() != target.size() || recon.empty()) throw DimensionError("psnr: size mismatch");
    double se = 0.0;
    for (std::size_t i = 0; i < recon.size(); ++i) se += (recon[i] - target[i]) * (recon[i] - target[i]);
    const double mse = se / static_cast<double>(recon.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

std::string config_hash(std::string_view json_text) {
    std::string canonical;
    try {
        canonical = nlohmann::json::parse(json_text).dump();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config_hash: ") + e.what());
    }
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string EvalReport::to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(format_number(v)); };
    nlohmann::json j = {{"config_hash", config_hash},
                        {"checkpoint", checkpoint},
                        {"seg_pair_acc", num(seg_pair_acc)},
                        {"seg_iou", num(seg_iou)},
                        {"probe_acc", num(probe_acc)},
                        {"retrieval_top1", num(retrieval_top1)},
                        {"psnr_db", num(psnr_db)},
                        {"recon_mse", num(recon_mse)},
                        {"n", n},
                        {"seg_skipped", seg_skipped}};
    return j.dump(2);
}

EvalReport evaluate(const Checkpoint<double>& checkpoint, const Dataset& dataset, std::uint64_t seed,
                    const std::string& checkpoint_label) {
    auto params = checkpoint.params;
    const auto& cfg = params.config;
    if (dataset.header.image_h != cfg.image_size || dataset.header.classes > cfg.classes) {
        throw ConfigError("dataset geometry does not match the checkpoint encoder");
    }
    const std::size_t m = dataset.samples.size();
    const std::size_t np = cfg.num_patches(), pd = cfg.patch_dim();

    std::vector<std::vector<double>> maps;
    std::vector<std::vector<std::uint8_t>> masks;
    std::vector<double> pooled, embeddings, recon, target;
    std::vector<std::size_t> labels;
    std::vector<double> class_table;

    for (std::size_t start = 0; start < m; start += kEvalChunk) {
        const std::size_t count = std::min(kEvalChunk, m - start);
        std::vector<double> patches;
        patches.reserve(count * np * pd);
        for (std::size_t s = start; s < start + count; ++s) {
            const auto grid = to_patches(dataset.samples[s], cfg.patch);
            patches.insert(patches.end(), grid.tokens.begin(), grid.tokens.end());
            masks.push_back(grid.patch_mask);
            labels.push_back(dataset.samples[s].label);
        }
        auto chunk_maps = mean_patch_attention(params, patches, count);
        std::move(chunk_maps.begin(), chunk_maps.end(), std::back_inserter(maps));

        ad::Graph<double> graph;
        ForwardOptions opts;
        opts.routing = params.two_stream ? Routing::TwoStream : Routing::Naive;
        const auto out = encoder_forward(graph, params, std::span<const double>(patches), count, opts);
        const auto p = out.pooled.value();
        const auto e = out.embedding.value();
        const auto r = out.recon.value();
        pooled.insert(pooled.end(), p.begin(), p.end());
        embeddings.insert(embeddings.end(), e.begin(), e.end());
        recon.insert(recon.end(), r.begin(), r.end());
        target.insert(target.end(), patches.begin(), patches.end());
        if (class_table.empty()) {
            const auto t = out.class_table.value();
            class_table.assign(t.begin(), t.end());
        }
    }

    EvalReport report;
    report.config_hash = config_hash(checkpoint.header.config_json);
    report.checkpoint = checkpoint_label;
    report.n = m;
    if (m == 0) return report;

    const auto seg = attention_segmentation(maps, masks);
    report.seg_pair_acc = seg.pair_acc;
    report.seg_iou = seg.iou;
    report.seg_skipped = seg.skipped;

    report.probe_acc = linear_probe(pooled, cfg.dim, labels, cfg.classes, seed).accuracy;

    const std::size_t de = cfg.embed_dim;
    for (std::size_t c = 0; c * de < class_table.size(); ++c) {
        double n2 = 0.0;
        for (std::size_t k = 0; k < de; ++k) n2 += class_table[c * de + k] * class_table[c * de + k];
        const double inv = n2 > 0 ? 1.0 / std::sqrt(n2) : 0.0;
        for (std::size_t k = 0; k < de; ++k) class_table[c * de + k] *= inv;
    }
    report.retrieval_top1 = retrieval_top1(embeddings, de, labels, class_table);

    report.psnr_db = psnr(recon, target);
    double se = 0.0;
    for (std::size_t i = 0; i < recon.size(); ++i) se += (recon[i] - target[i]) * (recon[i] - target[i]);
    report.recon_mse = se / static_cast<double>(recon.size());
    return report;
}

}  // namespace muse
