// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

#include "muse/errors.hpp"
#include "muse/trainer.hpp"
#include "../util/rng.hpp"

namespace muse {

namespace {

constexpr std::array kAllLosses = {LossKind::Topo, LossKind::Anchor, LossKind::Rec};

std::optional<double> pair_cosine(const GradReport& report, LossKind a, LossKind b, Subspace tag) {
    for (const auto& key : {LossPair{a, b}, LossPair{b, a}}) {
        const auto it = report.cosines.find(key);
        if (it == report.cosines.end()) continue;
        const auto jt = it->second.find(tag);
        if (jt != it->second.end()) return jt->second;
    }
    return std::nullopt;
}

std::string optional_cell(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

std::vector<double> flatten(const std::vector<std::vector<double>>& per_param) {
    std::vector<double> flat;
    for (const auto& g : per_param) flat.insert(flat.end(), g.begin(), g.end());
    return flat;
}

void set_value(LossValues& values, LossKind k, double v) {
    switch (k) {
        case LossKind::Topo: values.topo = v; break;
        case LossKind::Anchor: values.anchor = v; break;
        case LossKind::Rec: values.rec = v; break;
    }
}

std::vector<LossPair> probe_pairs(const std::vector<LossPair>& requested) {
    auto pairs = default_loss_pairs();
    for (const auto& p : requested) {
        const bool known = std::any_of(pairs.begin(), pairs.end(), [&](const LossPair& q) {
            return q == p || (q.first == p.second && q.second == p.first);
        });
        if (!known) pairs.push_back(p);
    }
    return pairs;
}

void check_geometry(const TrainConfig& config, const Dataset& dataset) {
    const auto& h = dataset.header;
    const auto& e = config.encoder;
    if (dataset.samples.empty()) throw ConfigError("dataset is empty");
    if (h.image_h != e.image_size || h.image_w != e.image_size) {
        throw ConfigError("dataset images are " + std::to_string(h.image_h) + "x" + std::to_string(h.image_w) +
                          " but the encoder expects " + std::to_string(e.image_size));
    }
    if (h.classes > e.classes) {
        throw ConfigError("dataset has " + std::to_string(h.classes) + " classes, encoder table holds " +
                          std::to_string(e.classes));
    }
}

void write_nan_dump(const std::optional<std::filesystem::path>& dir, long step, int stage,
                    const std::map<LossKind, double>& values) {
    if (!dir) return;
    nlohmann::json j;
    j["step"] = step;
    j["stage"] = stage;
    for (const auto& [k, v] : values) j["losses"][std::string(loss_name(k))] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(format_number(v));
    std::ofstream(*dir / "nan_dump.json") << j.dump(2) << '\n';
}

class CsvSink {
public:
    explicit CsvSink(const std::optional<std::filesystem::path>& dir) {
        if (!dir) return;
        std::error_code ec;
        std::filesystem::create_directories(*dir, ec);
        if (ec) throw IoError("cannot create " + dir->string() + ": " + ec.message());
        metrics_.open(*dir / "metrics.csv");
        violin_.open(*dir / "violin.csv");
        if (!metrics_ || !violin_) throw IoError("cannot write CSV files in " + dir->string());
        metrics_ << kMetricsHeader << '\n';
        violin_ << kViolinHeader << '\n';
    }

    void row(const MetricsRow& r) {
        if (!metrics_.is_open()) return;
        metrics_ << format_metrics_row(r) << '\n';
        if (r.probe) write_violin_rows(violin_, *r.probe);
    }

    void close() {
        if (!metrics_.is_open()) return;
        metrics_.close();
        violin_.close();
        if (metrics_.fail() || violin_.fail()) throw IoError("failed to flush CSV output");
    }

private:
    std::ofstream metrics_;
    std::ofstream violin_;
};

template <typename Real>
TrainResult run(const TrainConfig& config, const Dataset& dataset, const TrainOptions& options) {
    const Routing routing = config.effective_routing();
    const bool two_stream = routing == Routing::TwoStream;
    const auto& enc = config.encoder;
    const std::size_t tpatch = teacher_patch_size(config);
    const auto pairs = probe_pairs(config.pairs);
    const std::set<Subspace> tags{Subspace::Topology, Subspace::Semantic, Subspace::Backbone,
                                  Subspace::Decoder, Subspace::All};
    const AnchorOptions anchor_opts{config.symmetric_anchor, 1e-3, 10.0};

    auto params = init_params<Real>(config.seed, enc, two_stream);
    AdamW<Real> optimizer(config.optimizer, params.params);

    TrainResult result;
    result.initial = params.template cast<double>();
    CsvSink sink(options.out_dir);
    std::set<std::string> seen_warnings;
    auto warn = [&](const std::string& w) {
        if (seen_warnings.insert(w).second) result.warnings.push_back(w);
    };

    long global = 0;
    for (int stage = 1; stage <= 3; ++stage) {
        const auto policy = stage_policy(stage, config);
        const long n = config.steps[static_cast<std::size_t>(stage - 1)];
        for (long k = 0; k < n; ++k, ++global) {
            const auto idx = batch_indices(config.seed, global, config.batch, dataset.samples.size());
            const auto batch = prepare_batch<Real>(dataset, idx, enc, config.teacher_smoothing, tpatch);
            const bool probing = config.probe_interval > 0 && global % config.probe_interval == 0;
            const bool separate = probing || policy.soft_reg;
            std::set<LossKind> needed = policy.losses;
            if (probing) needed.insert(kAllLosses.begin(), kAllLosses.end());

            ForwardOptions fwd{policy.routing, policy.frozen, needed.contains(LossKind::Anchor)};
            std::vector<std::string> step_warnings;
            std::map<LossKind, double> values;

            MetricsRow row;
            row.step = global;
            row.stage = stage;

            if (!separate) {
                ad::Graph<Real> graph;
                const auto losses = build_losses(graph, params, batch, needed, fwd, anchor_opts, &step_warnings);
                LossParts<Real> parts;
                for (const auto& [kind, var] : losses) {
                    values[kind] = static_cast<double>(var.item());
                    if (kind == LossKind::Topo) parts.topo = var;
                    if (kind == LossKind::Anchor) parts.anchor = var;
                    if (kind == LossKind::Rec) parts.rec = var;
                }
                for (const auto& [kind, v] : values) {
                    if (!std::isfinite(v)) {
                        write_nan_dump(options.out_dir, global, stage, values);
                        throw NumericError("non-finite " + std::string(loss_name(kind)) + " loss at step " +
                                           std::to_string(global));
                    }
                }
                params.zero_grads();
                graph.backward(total_loss(stage, parts, policy.weights, policy.losses));
            } else {
                LossBuilder<Real> builder = [&](ad::Graph<Real>& g) {
                    return build_losses(g, params, batch, needed, fwd, anchor_opts, &step_warnings);
                };
                const auto snap = snapshot_gradients(params.params, builder, &values);
                for (const auto& [kind, v] : values) {
                    if (!std::isfinite(v)) {
                        write_nan_dump(options.out_dir, global, stage, values);
                        throw NumericError("non-finite " + std::string(loss_name(kind)) + " loss at step " +
                                           std::to_string(global));
                    }
                }

                // Combined update from the active losses.
                std::vector<LossKind> active(policy.losses.begin(), policy.losses.end());
                std::vector<std::vector<double>> flat;
                for (auto kind : active) {
                    auto g = flatten(snap.grads.at(kind));
                    const double w = policy.weights.weight(kind);
                    for (double& x : g) x *= w;
                    flat.push_back(std::move(g));
                }
                if (policy.soft_reg && soft_reg_adjust_all(flat, policy.weights.reg)) {
                    warn("soft_reg: zero-norm gradient partner left a gradient unprojected");
                }
                std::size_t offset = 0;
                for (auto& p : params.params) {
                    for (std::size_t i = 0; i < p.grad.size(); ++i) {
                        double acc = 0.0;
                        for (const auto& g : flat) acc += g[offset + i];
                        p.grad[i] = static_cast<Real>(acc);
                    }
                    offset += p.grad.size();
                }

                if (probing) {
                    GradSnapshot reported = snap;
                    if (policy.soft_reg) {
                        std::vector<std::vector<double>> all;
                        for (auto kind : kAllLosses) all.push_back(flatten(snap.grads.at(kind)));
                        (void)soft_reg_adjust_all(all, policy.weights.reg);
                        for (std::size_t li = 0; li < kAllLosses.size(); ++li) {
                            auto& per_param = reported.grads[kAllLosses[li]];
                            std::size_t off = 0;
                            for (auto& g : per_param) {
                                std::copy_n(all[li].begin() + static_cast<std::ptrdiff_t>(off), g.size(), g.begin());
                                off += g.size();
                            }
                        }
                    }
                    auto report = make_report(params.params, reported, pairs, tags, global);
                    report.loss_values = values;
                    row.probe = std::move(report);
                }
            }

            for (const auto& w : step_warnings) warn(w);
            for (const auto& [kind, v] : values) set_value(row.losses, kind, v);
            row.total = total_loss(stage, row.losses, policy.weights, policy.losses);

            for (const auto& p : params.params) {
                for (Real g : p.grad) {
                    if (!std::isfinite(static_cast<double>(g))) {
                        write_nan_dump(options.out_dir, global, stage, values);
                        throw NumericError("non-finite gradient in " + p.name + " at step " + std::to_string(global));
                    }
                }
            }
            optimizer.step(params.params, learning_rate(config, stage, k), policy.frozen, global);
            params.clamp_tau();
            params.zero_grads();

            sink.row(row);
            if (options.on_step) options.on_step(row);
            if (row.probe) result.reports.push_back(*row.probe);
            result.rows.push_back(std::move(row));
        }
        if (options.out_dir && n > 0) {
            const auto path = *options.out_dir / ("ckpt_stage" + std::to_string(stage) + ".bin");
            write_checkpoint(path, params, CheckpointHeader{kCheckpointVersion, config.to_json(), global, stage});
            result.checkpoints.push_back(path);
        }
    }
    sink.close();
    if (options.out_dir) {
        const auto path = *options.out_dir / "final.bin";
        write_checkpoint(path, params, CheckpointHeader{kCheckpointVersion, config.to_json(), global, 3});
        result.checkpoints.push_back(path);
    }
    result.final = params.template cast<double>();
    return result;
}

}  // namespace

std::string format_metrics_row(const MetricsRow& row) {
    std::ostringstream os;
    os << row.step << ',' << row.stage << ',' << optional_cell(row.losses.topo) << ','
       << optional_cell(row.losses.anchor) << ',' << optional_cell(row.losses.rec) << ','
       << format_number(row.total);
    const std::array<std::pair<LossKind, LossKind>, 3> cols{
        {{LossKind::Anchor, LossKind::Topo}, {LossKind::Anchor, LossKind::Rec}, {LossKind::Topo, LossKind::Rec}}};
    if (!row.probe) {
        os << ",,,,,,,,,,";
        return os.str();
    }
    const auto& r = *row.probe;
    int flags = 0;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        const auto c = pair_cosine(r, cols[i].first, cols[i].second, Subspace::All);
        if (!c) flags |= 1 << i;
        os << ',' << optional_cell(c);
    }
    os << ',' << flags;
    for (auto tag : {Subspace::Topology, Subspace::Semantic}) {
        for (auto loss : kAllLosses) {
            std::optional<double> norm;
            if (auto it = r.subspace_norms.find(loss); it != r.subspace_norms.end()) {
                if (auto jt = it->second.find(tag); jt != it->second.end()) norm = jt->second;
            }
            os << ',' << optional_cell(norm);
        }
    }
    return os.str();
}

std::size_t teacher_patch_size(const TrainConfig& config) {
    return config.teacher_patch == 0 ? config.encoder.patch : config.teacher_patch;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, long step, std::size_t batch,
                                       std::size_t dataset_size) {
    if (dataset_size == 0) throw ArgumentError("batch_indices: empty dataset");
    rng::Stream stream(rng::splitmix64(seed) ^ rng::splitmix64(static_cast<std::uint64_t>(step) + 1));
    std::vector<std::size_t> out(batch);
    for (auto& i : out) i = static_cast<std::size_t>(stream.below(dataset_size));
    return out;
}

template <typename Real>
PreparedBatch<Real> prepare_batch(const Dataset& dataset, std::span<const std::size_t> indices,
                                  const EncoderConfig& encoder, double teacher_smoothing,
                                  std::size_t teacher_patch) {
    PreparedBatch<Real> out;
    out.size = indices.size();
    const std::size_t np = encoder.num_patches();
    const std::size_t tp = teacher_patch == 0 ? encoder.patch : teacher_patch;
    out.patches.reserve(out.size * np * encoder.patch_dim());
    out.teacher.reserve(out.size * np * np);
    for (std::size_t i : indices) {
        if (i >= dataset.samples.size()) throw ArgumentError("prepare_batch: index out of range");
        const auto& sample = dataset.samples[i];
        const auto grid = to_patches(sample, encoder.patch);
        if (grid.num_patches() != np) throw DimensionError("prepare_batch: sample does not match the encoder grid");
        for (float v : grid.tokens) out.patches.push_back(static_cast<Real>(v));
        out.labels.push_back(sample.label);
        std::vector<double> teacher;
        if (tp == encoder.patch) {
            teacher = teacher_attention_from_mask(grid.patch_mask, teacher_smoothing);
        } else {
            const auto coarse = to_patches(sample, tp);
            teacher = psi_resample(teacher_attention_from_mask(coarse.patch_mask, teacher_smoothing), coarse.grid,
                                   grid.grid);
        }
        for (double v : teacher) out.teacher.push_back(static_cast<Real>(v));
        out.patch_masks.push_back(grid.patch_mask);
    }
    return out;
}

template <typename Real>
std::map<LossKind, ad::Var<Real>> build_losses(ad::Graph<Real>& graph, EncoderParams<Real>& params,
                                               const PreparedBatch<Real>& batch,
                                               const std::set<LossKind>& losses,
                                               const ForwardOptions& forward, const AnchorOptions& anchor,
                                               std::vector<std::string>* warnings) {
    ForwardOptions opts = forward;
    opts.need_embedding = losses.contains(LossKind::Anchor);
    const auto& cfg = params.config;
    auto out = encoder_forward(graph, params, std::span<const Real>(batch.patches), batch.size, opts);
    std::map<LossKind, ad::Var<Real>> result;
    if (losses.contains(LossKind::Topo)) {
        std::vector<ad::Var<Real>> students;
        for (auto a : out.attention) students.push_back(extract_student_topology(a, cfg.tokens(), cfg.num_patches()));
        result[LossKind::Topo] = topo_loss<Real>(students, batch.teacher, batch.size, cfg.heads);
    }
    if (losses.contains(LossKind::Anchor)) {
        auto r = anchor_loss(out.embedding, batch.labels, out.class_table, out.tau, anchor);
        if (r.warning && warnings) warnings->push_back(*r.warning);
        result[LossKind::Anchor] = r.loss;
    }
    if (losses.contains(LossKind::Rec)) {
        result[LossKind::Rec] = recon_loss(out.recon, std::span<const Real>(batch.patches));
    }
    return result;
}

TrainResult train_run(const TrainConfig& config, const Dataset& dataset, const TrainOptions& options) {
    config.validate();
    check_geometry(config, dataset);
    if (config.precision == Precision::F64) return run<double>(config, dataset, options);
    return run<float>(config, dataset, options);
}

GradReport diagnose_checkpoint(const Checkpoint<double>& checkpoint, const Dataset& dataset,
                               const DiagnoseOptions& options) {
    TrainConfig config = TrainConfig::from_json(checkpoint.header.config_json);
    config.encoder = checkpoint.params.config;
    if (checkpoint.params.two_stream) {
        config.preset = Preset::TwoStream;
        config.routing.reset();
    }
    check_geometry(config, dataset);
    if (options.batch < 2) throw ConfigError("diagnose batch must be >= 2");
    if (options.pairs.empty()) throw ConfigError("diagnose needs at least one loss pair");

    auto params = checkpoint.params;
    const auto idx = batch_indices(options.seed, checkpoint.header.step, options.batch, dataset.samples.size());
    const auto batch = prepare_batch<double>(dataset, idx, config.encoder, config.teacher_smoothing,
                                             teacher_patch_size(config));
    const std::set<LossKind> all(kAllLosses.begin(), kAllLosses.end());
    const ForwardOptions fwd{config.effective_routing(), {}, true};
    const AnchorOptions anchor{config.symmetric_anchor, 1e-3, 10.0};
    LossBuilder<double> builder = [&](ad::Graph<double>& g) {
        return build_losses(g, params, batch, all, fwd, anchor);
    };
    std::map<LossKind, double> values;
    const auto snap = snapshot_gradients(params.params, builder, &values);
    for (const auto& [kind, v] : values) {
        if (!std::isfinite(v)) throw NumericError("non-finite " + std::string(loss_name(kind)) + " loss in diagnose");
    }
    const std::set<Subspace> tags{Subspace::Topology, Subspace::Semantic, Subspace::Backbone, Subspace::Decoder,
                                  Subspace::All};
    auto report = make_report(params.params, snap, options.pairs, tags, checkpoint.header.step);
    report.loss_values = values;
    return report;
}

#define MUSE_TRAINER_INSTANTIATE(Real)                                                               \
    template PreparedBatch<Real> prepare_batch<Real>(const Dataset&, std::span<const std::size_t>,  \
                                                     const EncoderConfig&, double, std::size_t);     \
    template std::map<LossKind, ad::Var<Real>> build_losses<Real>(                                   \
        ad::Graph<Real>&, EncoderParams<Real>&, const PreparedBatch<Real>&, const std::set<LossKind>&, \
        const ForwardOptions&, const AnchorOptions&, std::vector<std::string>*);

MUSE_TRAINER_INSTANTIATE(float)
MUSE_TRAINER_INSTANTIATE(double)

}  // namespace muse
