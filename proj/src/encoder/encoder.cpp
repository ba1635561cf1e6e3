// Copyright (c) 2026, MUSE toy tokenizer authors
// SPDX-License-Identifier: Apache-2.0

#include "muse/encoder.hpp"

#include <json.hpp>

#include <cmath>
#include <numeric>

#include "muse/errors.hpp"
#include "../util/rng.hpp"

namespace muse {

using ad::Graph;
using ad::Var;

std::string_view routing_name(Routing r) {
    switch (r) {
        case Routing::Strict: return "strict";
        case Routing::Relaxed: return "relaxed";
        case Routing::Naive: return "naive";
        case Routing::TwoStream: return "two_stream";
    }
    return "unknown";
}

Routing parse_routing(std::string_view name) {
    for (auto r : {Routing::Strict, Routing::Relaxed, Routing::Naive, Routing::TwoStream}) {
        if (routing_name(r) == name) return r;
    }
    throw ConfigError("unknown routing mode '" + std::string(name) +
                      "' (expected strict, relaxed, naive or two_stream)");
}

void EncoderConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("encoder config: " + m); };
    if (patch == 0 || image_size == 0 || image_size % patch != 0) {
        fail("image size " + std::to_string(image_size) + " is not divisible by patch " +
             std::to_string(patch));
    }
    if (dim == 0 || heads == 0 || dim % heads != 0) {
        fail("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
    }
    if (layers < 1) fail("layers must be >= 1");
    if (queries < 1) fail("queries must be >= 1");
    if (embed_dim < 2) fail("embed_dim must be >= 2");
    if (classes < 2) fail("classes must be >= 2");
    if (!(tau_min > 0 && tau_min <= tau_init && tau_init <= tau_max)) {
        fail("temperature bounds must satisfy 0 < tau_min <= tau_init <= tau_max");
    }
}

std::string EncoderConfig::to_json() const {
    nlohmann::json j = {{"image_size", image_size}, {"patch", patch},       {"dim", dim},
                        {"heads", heads},           {"layers", layers},     {"embed_dim", embed_dim},
                        {"queries", queries},       {"classes", classes},   {"tau_init", tau_init},
                        {"tau_min", tau_min},       {"tau_max", tau_max}};
    return j.dump();
}

EncoderConfig EncoderConfig::from_json(std::string_view text) {
    EncoderConfig c;
    try {
        const auto j = nlohmann::json::parse(text);
        c.image_size = j.value("image_size", c.image_size);
        c.patch = j.value("patch", c.patch);
        c.dim = j.value("dim", c.dim);
        c.heads = j.value("heads", c.heads);
        c.layers = j.value("layers", c.layers);
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.queries = j.value("queries", c.queries);
        c.classes = j.value("classes", c.classes);
        c.tau_init = j.value("tau_init", c.tau_init);
        c.tau_min = j.value("tau_min", c.tau_min);
        c.tau_max = j.value("tau_max", c.tau_max);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("encoder config: ") + e.what());
    }
    return c;
}

template <typename Real>
std::size_t EncoderParams<Real>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
}

template <typename Real>
const Parameter<Real>* EncoderParams<Real>::find(std::string_view name) const {
    for (const auto& p : params) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

template <typename Real>
void EncoderParams<Real>::zero_grads() {
    for (auto& p : params) p.zero_grad();
}

template <typename Real>
void EncoderParams<Real>::clamp_tau() {
    for (const auto& s : streams) {
        auto& v = params[s.tau].value[0];
        v = std::clamp(v, static_cast<Real>(config.tau_min), static_cast<Real>(config.tau_max));
    }
}

template <typename Real>
EncoderParams<Real> make_layout(const EncoderConfig& c, bool two_stream) {
    c.validate();
    EncoderParams<Real> out;
    out.config = c;
    out.two_stream = two_stream;
    const std::size_t d = c.dim;
    for (int s = 0; s < (two_stream ? 2 : 1); ++s) {
        const std::string prefix = s == 0 ? "" : "stream1.";
        auto add = [&](const std::string& name, Shape shape, Subspace tag,
                       std::optional<int> layer = std::nullopt) {
            out.params.emplace_back(prefix + name, std::move(shape), tag, layer, s);
            return out.params.size() - 1;
        };
        StreamIndex ix{};
        ix.patch_w = add("patch_embed.weight", {c.patch_dim(), d}, Subspace::Backbone);
        ix.patch_b = add("patch_embed.bias", {d}, Subspace::Backbone);
        ix.pos = add("pos_embed", {c.num_patches(), d}, Subspace::Backbone);
        ix.queries = add("query_tokens", {c.queries, d}, Subspace::Semantic);
        for (std::size_t l = 0; l < c.layers; ++l) {
            const std::string b = "blocks." + std::to_string(l) + ".";
            const int li = static_cast<int>(l);
            BlockIndex bi{};
            bi.ln1_gain = add(b + "ln1.gain", {d}, Subspace::Semantic, li);
            bi.ln1_bias = add(b + "ln1.bias", {d}, Subspace::Semantic, li);
            bi.w_q = add(b + "attn.w_q", {d, d}, Subspace::Topology, li);
            bi.w_k = add(b + "attn.w_k", {d, d}, Subspace::Topology, li);
            bi.w_v = add(b + "attn.w_v", {d, d}, Subspace::Semantic, li);
            bi.w_o = add(b + "attn.w_o", {d, d}, Subspace::Semantic, li);
            bi.ln2_gain = add(b + "ln2.gain", {d}, Subspace::Semantic, li);
            bi.ln2_bias = add(b + "ln2.bias", {d}, Subspace::Semantic, li);
            bi.fc1_w = add(b + "mlp.fc1.weight", {d, c.hidden()}, Subspace::Semantic, li);
            bi.fc1_b = add(b + "mlp.fc1.bias", {c.hidden()}, Subspace::Semantic, li);
            bi.fc2_w = add(b + "mlp.fc2.weight", {c.hidden(), d}, Subspace::Semantic, li);
            bi.fc2_b = add(b + "mlp.fc2.bias", {d}, Subspace::Semantic, li);
            ix.blocks.push_back(bi);
        }
        ix.proj_w = add("projector.weight", {d, c.embed_dim}, Subspace::Semantic);
        ix.proj_b = add("projector.bias", {c.embed_dim}, Subspace::Semantic);
        ix.class_emb = add("class_embeddings", {c.classes, c.embed_dim}, Subspace::Semantic);
        ix.tau = add("tau", {1}, Subspace::Semantic);
        ix.dec_w = add("decoder.weight", {d, c.patch_dim()}, Subspace::Decoder);
        ix.dec_b = add("decoder.bias", {c.patch_dim()}, Subspace::Decoder);
        out.streams.push_back(std::move(ix));
    }
    return out;
}

template <typename Real>
EncoderParams<Real> init_params(std::uint64_t seed, const EncoderConfig& c, bool two_stream) {
    auto out = make_layout<Real>(c, two_stream);
    for (std::size_t s = 0; s < out.streams.size(); ++s) {
        rng::Stream r(s == 0 ? seed : rng::splitmix64(seed ^ 0x53545245414D31ULL));
        const auto& ix = out.streams[s];
        auto uniform = [&](std::size_t idx, std::size_t fan_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (auto& v : out.params[idx].value) v = static_cast<Real>(r.uniform(-bound, bound));
        };
        auto normal = [&](std::size_t idx, double stddev) {
            for (auto& v : out.params[idx].value) v = static_cast<Real>(stddev * r.normal());
        };
        auto fill = [&](std::size_t idx, Real value) {
            std::fill(out.params[idx].value.begin(), out.params[idx].value.end(), value);
        };
        uniform(ix.patch_w, c.patch_dim());
        normal(ix.pos, 0.02);
        normal(ix.queries, 0.02);
        for (const auto& b : ix.blocks) {
            fill(b.ln1_gain, Real(1));
            fill(b.ln2_gain, Real(1));
            uniform(b.w_q, c.dim);
            uniform(b.w_k, c.dim);
            uniform(b.w_v, c.dim);
            uniform(b.w_o, c.dim);
            uniform(b.fc1_w, c.dim);
            uniform(b.fc2_w, c.hidden());
        }
        uniform(ix.proj_w, c.dim);
        uniform(ix.class_emb, c.embed_dim);
        fill(ix.tau, static_cast<Real>(c.tau_init));
        uniform(ix.dec_w, c.dim);
    }
    return out;
}

template <typename Real>
BlockOutput<Real> block_forward(Var<Real> input, const BlockVars<Real>& p, std::size_t batch,
                                std::size_t heads, Routing routing) {
    const std::size_t dim = input.cols();
    if (heads == 0 || dim % heads != 0) {
        throw DimensionError("block_forward: width " + std::to_string(dim) +
                             " is not divisible by " + std::to_string(heads) + " heads");
    }
    const bool detach_map = routing == Routing::Strict || routing == Routing::Relaxed;
    const auto normed = ad::layer_norm(input, p.ln1_gain, p.ln1_bias);
    const auto qk_in = routing == Routing::Strict ? ad::stop_gradient(normed) : normed;
    const auto q = ad::linear_map(qk_in, p.w_q);
    const auto k = ad::linear_map(qk_in, p.w_k);
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dim / heads));
    const auto attn = ad::softmax_rows(ad::attention_scores(q, k, batch, heads, scale));
    const auto mix_map = detach_map ? ad::stop_gradient(attn) : attn;
    const auto values = ad::linear_map(normed, p.w_v);
    const auto mixed = ad::attention_mix(mix_map, values, batch, heads);
    const auto mid = ad::add(input, ad::linear_map(mixed, p.w_o));
    const auto hidden =
        ad::gelu(ad::linear_map(ad::layer_norm(mid, p.ln2_gain, p.ln2_bias), p.fc1_w, p.fc1_b));
    const auto out = ad::add(mid, ad::linear_map(hidden, p.fc2_w, p.fc2_b));
    return {out, attn};
}

namespace {

template <typename Real>
struct StreamVars {
    Var<Real> patch_w, patch_b, pos, queries;
    std::vector<BlockVars<Real>> blocks;
    Var<Real> proj_w, proj_b, class_emb, tau, dec_w, dec_b;
};

template <typename Real>
StreamVars<Real> bind_stream(Graph<Real>& g, EncoderParams<Real>& params, const StreamIndex& ix,
                             const std::set<Subspace>& frozen) {
    auto bind = [&](std::size_t i) {
        auto& p = params.params[i];
        return g.bind(p, !frozen.contains(p.subspace));
    };
    StreamVars<Real> v;
    v.patch_w = bind(ix.patch_w);
    v.patch_b = bind(ix.patch_b);
    v.pos = bind(ix.pos);
    v.queries = bind(ix.queries);
    for (const auto& b : ix.blocks) {
        v.blocks.push_back({bind(b.ln1_gain), bind(b.ln1_bias), bind(b.w_q), bind(b.w_k),
                            bind(b.w_v), bind(b.w_o), bind(b.ln2_gain), bind(b.ln2_bias),
                            bind(b.fc1_w), bind(b.fc1_b), bind(b.fc2_w), bind(b.fc2_b)});
    }
    v.proj_w = bind(ix.proj_w);
    v.proj_b = bind(ix.proj_b);
    v.class_emb = bind(ix.class_emb);
    v.tau = bind(ix.tau);
    v.dec_w = bind(ix.dec_w);
    v.dec_b = bind(ix.dec_b);
    return v;
}

template <typename Real>
EncoderOutput<Real> run_stream(const EncoderConfig& c, const StreamVars<Real>& v,
                               Var<Real> patches, std::size_t batch, Routing routing) {
    const std::size_t np = c.num_patches(), nq = c.queries, n = c.tokens();
    const bool straight_through = routing == Routing::Strict || routing == Routing::Relaxed;

    std::vector<std::size_t> pos_index(batch * np), query_index(batch * nq), order(batch * n),
        patch_rows(batch * np);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < np; ++i) {
            pos_index[b * np + i] = i;
            order[b * n + i] = b * np + i;
            patch_rows[b * np + i] = b * n + i;
        }
        for (std::size_t i = 0; i < nq; ++i) {
            query_index[b * nq + i] = i;
            order[b * n + np + i] = batch * np + b * nq + i;
        }
    }

    const auto embedded = ad::add(ad::linear_map(patches, v.patch_w, v.patch_b),
                                  ad::gather_rows(v.pos, std::span<const std::size_t>(pos_index)));
    const auto stack_patches = straight_through ? ad::stop_gradient(embedded) : embedded;
    const auto query_rows = ad::gather_rows(v.queries, std::span<const std::size_t>(query_index));
    auto tokens = ad::gather_rows(ad::concat_rows(stack_patches, query_rows),
                                  std::span<const std::size_t>(order));

    EncoderOutput<Real> out;
    for (const auto& block : v.blocks) {
        auto r = block_forward(tokens, block, batch, c.heads, routing);
        tokens = r.tokens;
        out.attention.push_back(r.attention);
    }
    out.tokens = tokens;

    const auto patch_out = ad::gather_rows(tokens, std::span<const std::size_t>(patch_rows));
    const auto decoder_in =
        straight_through ? ad::add(embedded, ad::stop_gradient(ad::sub(patch_out, embedded)))
                         : patch_out;
    out.recon = ad::linear_map(decoder_in, v.dec_w, v.dec_b);
    out.pooled = ad::mean_pool_blocks(tokens, n, np, nq);
    out.embedding = ad::l2_normalize_rows(ad::linear_map(out.pooled, v.proj_w, v.proj_b));
    out.class_table = v.class_emb;
    out.tau = v.tau;
    return out;
}

}  // namespace

template <typename Real>
EncoderOutput<Real> encoder_forward(Graph<Real>& g, EncoderParams<Real>& params,
                                    std::span<const Real> patches, std::size_t batch,
                                    const ForwardOptions& options) {
    const auto& c = params.config;
    if (batch == 0) throw ArgumentError("encoder_forward: empty batch");
    if (patches.size() != batch * c.num_patches() * c.patch_dim()) {
        throw DimensionError("encoder_forward: expected " + std::to_string(batch) + "x" +
                             std::to_string(c.num_patches()) + "x" + std::to_string(c.patch_dim()) +
                             " patch values, got " + std::to_string(patches.size()));
    }
    const bool two = options.routing == Routing::TwoStream;
    if (two != params.two_stream) {
        throw ConfigError(std::string("routing ") + std::string(routing_name(options.routing)) +
                          (params.two_stream ? " cannot drive a two-stream parameter set"
                                             : " requires a two-stream parameter set"));
    }
    const auto x = g.constant({batch * c.num_patches(), c.patch_dim()},
                              std::vector<Real>(patches.begin(), patches.end()));
    const Routing inner = two ? Routing::Naive : options.routing;
    auto main_vars = bind_stream(g, params, params.streams[0], options.frozen);
    auto out = run_stream(c, main_vars, x, batch, inner);
    if (two) {
        if (options.need_embedding) {
            auto sem_vars = bind_stream(g, params, params.streams[1], options.frozen);
            auto sem = run_stream(c, sem_vars, x, batch, inner);
            out.pooled = sem.pooled;
            out.embedding = sem.embedding;
            out.class_table = sem.class_table;
            out.tau = sem.tau;
        } else {
            out.pooled = {};
            out.embedding = {};
            out.class_table = {};
            out.tau = {};
        }
    }
    return out;
}

template <typename Real>
Var<Real> extract_student_topology(Var<Real> attention, std::size_t tokens, std::size_t num_patches) {
    if (num_patches < 1) throw ArgumentError("extract_student_topology: no patch tokens");
    return ad::restrict_renormalize(attention, tokens, num_patches);
}

#define MUSE_ENCODER_INSTANTIATE(Real)                                                           \
    template struct EncoderParams<Real>;                                                         \
    template EncoderParams<Real> make_layout<Real>(const EncoderConfig&, bool);                  \
    template EncoderParams<Real> init_params<Real>(std::uint64_t, const EncoderConfig&, bool);   \
    template BlockOutput<Real> block_forward(Var<Real>, const BlockVars<Real>&, std::size_t,     \
                                             std::size_t, Routing);                              \
    template EncoderOutput<Real> encoder_forward(Graph<Real>&, EncoderParams<Real>&,             \
                                                 std::span<const Real>, std::size_t,             \
                                                 const ForwardOptions&);                         \
    template Var<Real> extract_student_topology(Var<Real>, std::size_t, std::size_t);

MUSE_ENCODER_INSTANTIATE(float)
MUSE_ENCODER_INSTANTIATE(double)

#undef MUSE_ENCODER_INSTANTIATE

}  // namespace muse
