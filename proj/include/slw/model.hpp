#pragma once

// Decoder-only autoregressive transformer with pre-norm residual blocks,
// rotary attention, tied embeddings, and three MLP parametrizations
// (dense, adaptive FastFood, block-diagonal + block-Hadamard). Doped models
// interleave frozen dense MLP layers between trainable decoder layers.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "slw/core.hpp"
#include "slw/ops.hpp"
#include "slw/transforms.hpp"

namespace slw {

enum class MlpKind { dense, fastfood, block };

inline std::string mlp_kind_name(MlpKind k) {
    switch (k) {
        case MlpKind::dense: return "dense";
        case MlpKind::fastfood: return "fastfood";
        case MlpKind::block: return "block";
    }
    return "?";
}

inline MlpKind mlp_kind_from_name(const std::string& s) {
    if (s == "dense") return MlpKind::dense;
    if (s == "fastfood") return MlpKind::fastfood;
    if (s == "block") return MlpKind::block;
    throw std::invalid_argument("unknown mlp_kind '" + s + "'");
}

struct ModelConfig {
    std::size_t n_layers = 1;       // total layers, frozen included
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t context = 128;
    double dropout = 0.0;
    double attn_dropout = 0.0;
    MlpKind mlp_kind = MlpKind::dense;
    std::size_t block_count = 4;
    std::string doped_layout;       // e.g. "TFTFT"; empty = all trainable
    std::size_t frozen_hidden_mult = 6;
    std::size_t mlp_hidden_mult = 4;
    std::size_t vocab_size = 256;
    std::uint64_t seed = 0;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t mlp_hidden() const { return mlp_hidden_mult * d_model; }
    std::size_t frozen_hidden() const { return frozen_hidden_mult * d_model; }

    void validate() const {
        if (n_layers == 0) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
        if (head_dim() % 2 != 0)
            throw std::invalid_argument("ModelConfig: head dim must be even for rotary embeddings");
        if (context == 0) throw std::invalid_argument("ModelConfig: context must be >= 1");
        if (vocab_size == 0) throw std::invalid_argument("ModelConfig: vocab_size must be >= 1");
        if (dropout < 0 || dropout >= 1 || attn_dropout < 0 || attn_dropout >= 1)
            throw std::invalid_argument("ModelConfig: dropout must lie in [0,1)");
        if (!doped_layout.empty()) {
            if (doped_layout.size() != n_layers)
                throw std::invalid_argument("ModelConfig: doped_layout length != n_layers");
            if (doped_layout.front() != 'T' || doped_layout.back() != 'T')
                throw std::invalid_argument(
                    "ModelConfig: doped_layout must start and end with a trainable layer");
            for (char c : doped_layout)
                if (c != 'T' && c != 'F')
                    throw std::invalid_argument("ModelConfig: doped_layout chars must be T or F");
        }
        if (mlp_kind == MlpKind::block) {
            if (block_count == 0 || !is_power_of_two(block_count))
                throw std::invalid_argument("ModelConfig: block_count must be a power of two");
            if (d_model % block_count != 0 || mlp_hidden() % block_count != 0)
                throw std::invalid_argument("ModelConfig: block_count must divide MLP widths");
        }
    }

    char layer_kind(std::size_t i) const {
        return doped_layout.empty() ? 'T' : doped_layout[i];
    }
};

enum class InitKind { zeros, ones, gauss_proj, gauss_resid, diag_near_identity, gauss_embed };

struct ParamSpec {
    std::string name;
    std::vector<std::size_t> shape;
    bool trainable = true;
    bool embedding = false;
    InitKind init = InitKind::zeros;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto e : shape) n *= e;
        return n;
    }
};

struct ModelPlan {
    std::vector<ParamSpec> params;
    std::vector<TransformCensus> structured;
};

// Enumerates every parameter array a model of this config will own, without
// allocating any data. build_model and the census both derive from it.
inline ModelPlan plan_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelPlan plan;
    const std::size_t d = cfg.d_model;
    auto add = [&](const std::string& name, std::vector<std::size_t> shape, bool trainable,
                   InitKind init, bool embedding = false) {
        plan.params.push_back({name, std::move(shape), trainable, embedding, init});
    };
    add("tok_emb", {cfg.vocab_size, d}, true, InitKind::gauss_embed, true);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "L" + std::to_string(i) + ".";
        if (cfg.layer_kind(i) == 'F') {
            const std::size_t hid = cfg.frozen_hidden();
            add(p + "ln.g", {d}, false, InitKind::ones);
            add(p + "ln.b", {d}, false, InitKind::zeros);
            add(p + "mlp.w1", {d, hid}, false, InitKind::gauss_proj);
            add(p + "mlp.b1", {hid}, false, InitKind::zeros);
            add(p + "mlp.w2", {hid, d}, false, InitKind::gauss_resid);
            add(p + "mlp.b2", {d}, false, InitKind::zeros);
            continue;
        }
        add(p + "ln1.g", {d}, true, InitKind::ones);
        add(p + "ln1.b", {d}, true, InitKind::zeros);
        for (const char* w : {"wq", "wk", "wv"})
            add(p + "attn." + std::string(w), {d, d}, true, InitKind::gauss_proj);
        for (const char* b : {"bq", "bk", "bv"})
            add(p + "attn." + std::string(b), {d}, true, InitKind::zeros);
        add(p + "attn.wo", {d, d}, true, InitKind::gauss_resid);
        add(p + "attn.bo", {d}, true, InitKind::zeros);
        add(p + "ln2.g", {d}, true, InitKind::ones);
        add(p + "ln2.b", {d}, true, InitKind::zeros);
        const std::size_t hid = cfg.mlp_hidden();
        switch (cfg.mlp_kind) {
            case MlpKind::dense:
                add(p + "mlp.w1", {d, hid}, true, InitKind::gauss_proj);
                add(p + "mlp.b1", {hid}, true, InitKind::zeros);
                add(p + "mlp.w2", {hid, d}, true, InitKind::gauss_resid);
                add(p + "mlp.b2", {d}, true, InitKind::zeros);
                break;
            case MlpKind::fastfood: {
                const std::size_t w_in = next_power_of_two(d);
                const std::size_t stacks_in = (hid + w_in - 1) / w_in;
                for (std::size_t s = 0; s < stacks_in; ++s)
                    for (const char* dn : {"d1", "d2", "d3"})
                        add(p + "mlp.in.u" + std::to_string(s) + "." + dn, {w_in}, true,
                            InitKind::diag_near_identity);
                add(p + "mlp.b1", {hid}, true, InitKind::zeros);
                const std::size_t w_out = next_power_of_two(hid);
                const std::size_t stacks_out = (d + w_out - 1) / w_out;
                for (std::size_t s = 0; s < stacks_out; ++s)
                    for (const char* dn : {"d1", "d2", "d3"})
                        add(p + "mlp.out.u" + std::to_string(s) + "." + dn, {w_out}, true,
                            InitKind::diag_near_identity);
                add(p + "mlp.b2", {d}, true, InitKind::zeros);
                plan.structured.push_back({stacks_in * 3 * w_in, 0, hid * d, stacks_in * 6 * w_in});
                plan.structured.push_back(
                    {stacks_out * 3 * w_out, 0, d * hid, stacks_out * 6 * w_out});
                break;
            }
            case MlpKind::block: {
                const std::size_t b = cfg.block_count;
                add(p + "mlp.bd1", {b, d / b, hid / b}, true, InitKind::gauss_proj);
                add(p + "mlp.b1", {hid}, true, InitKind::zeros);
                add(p + "mlp.bd2", {b, hid / b, d / b}, true, InitKind::gauss_resid);
                add(p + "mlp.b2", {d}, true, InitKind::zeros);
                plan.structured.push_back({d * hid / b, 0, d * hid, 2 * d * hid / b});
                plan.structured.push_back({hid * d / b, 0, hid * d, 2 * hid * d / b});
                break;
            }
        }
    }
    add("ln_f.g", {d}, true, InitKind::ones);
    add("ln_f.b", {d}, true, InitKind::zeros);
    return plan;
}

struct Census {
    std::size_t trainable_nonembed = 0;
    std::size_t frozen = 0;
    std::size_t emulated = 0;
    std::size_t embedding = 0;
};

inline Census census_from_plan(const ModelPlan& plan) {
    Census c;
    for (const auto& p : plan.params) {
        if (p.embedding) {
            c.embedding += p.numel();
        } else if (p.trainable) {
            c.trainable_nonembed += p.numel();
        } else {
            c.frozen += p.numel();
        }
    }
    c.emulated = c.trainable_nonembed;
    for (const auto& s : plan.structured) c.emulated += s.emulated - s.trainable;
    return c;
}

inline Census census_from_config(const ModelConfig& cfg) { return census_from_plan(plan_model(cfg)); }

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
    bool embedding = false;
};

template <typename T>
struct Model {
    ModelConfig cfg;
    std::vector<Param<T>> params;
    std::unordered_map<std::string, std::size_t> index;
    std::vector<TransformCensus> structured;

    Param<T>& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw std::invalid_argument("Model: no parameter '" + name + "'");
        return params[it->second];
    }
    const Param<T>& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw std::invalid_argument("Model: no parameter '" + name + "'");
        return params[it->second];
    }
    bool has(const std::string& name) const { return index.count(name) != 0; }

    void zero_grads() {
        for (auto& p : params) p.grad.fill(T{0});
    }
};

// Deterministic construction: every array gets its own seed channel derived
// from cfg.seed and the parameter name, so builds are reproducible per array.
template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
    ModelPlan plan = plan_model(cfg);
    Model<T> m;
    m.cfg = cfg;
    m.structured = plan.structured;
    const double proj_std = 0.02;
    const double resid_std = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    for (const auto& spec : plan.params) {
        Param<T> p;
        p.name = spec.name;
        p.value = Tensor<T>(spec.shape);
        p.grad = Tensor<T>(spec.shape);
        p.trainable = spec.trainable;
        p.embedding = spec.embedding;
        Rng rng(derive_seed(cfg.seed, "init." + spec.name));
        switch (spec.init) {
            case InitKind::zeros: break;
            case InitKind::ones: p.value.fill(T{1}); break;
            case InitKind::gauss_proj:
            case InitKind::gauss_embed:
                for (auto& v : p.value.data) v = static_cast<T>(proj_std * rng.next_normal());
                break;
            case InitKind::gauss_resid:
                for (auto& v : p.value.data) v = static_cast<T>(resid_std * rng.next_normal());
                break;
            case InitKind::diag_near_identity:
                for (auto& v : p.value.data) v = static_cast<T>(1.0 + 0.01 * rng.next_normal());
                break;
        }
        m.index[p.name] = m.params.size();
        m.params.push_back(std::move(p));
    }
    return m;
}

template <typename T>
Census model_census(const Model<T>& m) {
    Census c;
    for (const auto& p : m.params) {
        if (p.embedding) c.embedding += p.value.numel();
        else if (p.trainable) c.trainable_nonembed += p.value.numel();
        else c.frozen += p.value.numel();
    }
    c.emulated = c.trainable_nonembed;
    for (const auto& s : m.structured) c.emulated += s.emulated - s.trainable;
    return c;
}

// Rotary embedding: coordinate pair (2i, 2i+1) at position m rotates by
// m * base^(-2i/d_head). sign = -1 gives the inverse rotation (backward).
template <typename T>
void rope_rotate_inplace(T* vec, std::size_t d_head, std::size_t position, int sign = 1,
                         double base = 10000.0) {
    for (std::size_t i = 0; i * 2 < d_head; ++i) {
        double theta = static_cast<double>(position) *
                       std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
        double c = std::cos(theta), s = std::sin(theta) * sign;
        T x = vec[2 * i], y = vec[2 * i + 1];
        vec[2 * i] = static_cast<T>(c * x - s * y);
        vec[2 * i + 1] = static_cast<T>(s * x + c * y);
    }
}

template <typename T>
Tensor<T> rope_rotate(const Tensor<T>& qk, const std::vector<std::size_t>& positions,
                      double base = 10000.0) {
    detail::require(qk.rank() == 2, "rope_rotate: T x d_head tensor required");
    const std::size_t d_head = qk.shape[1];
    detail::require(d_head % 2 == 0, "rope_rotate: d_head must be even");
    detail::require(positions.size() == qk.shape[0], "rope_rotate: positions length mismatch");
    Tensor<T> out = qk;
    for (std::size_t t = 0; t < qk.shape[0]; ++t)
        rope_rotate_inplace(out.ptr() + t * d_head, d_head, positions[t], 1, base);
    return out;
}

template <typename T>
struct LayerCache {
    Tensor<T> x_in;
    LayerNormCache<T> ln1c;
    Tensor<T> h1;
    Tensor<T> q, k, v;  // q, k post-rope
    Tensor<T> att;      // [B*nh*T, T], causal-masked probabilities
    Tensor<T> att_mask;
    Tensor<T> headout;
    Tensor<T> proj_mask;
    Tensor<T> x_mid;
    LayerNormCache<T> ln2c;  // doubles as the frozen layer's single norm
    Tensor<T> h2;
    Tensor<T> u1, a;  // MLP pre-activation and activation
    Tensor<T> mlp_mask;
};

template <typename T>
struct ForwardCache {
    std::size_t batch = 0, seq = 0;
    std::vector<LayerCache<T>> layers;
    LayerNormCache<T> lnfc;
    Tensor<T> x_final;   // input of the final norm
    Tensor<T> h_final;   // normalized stream feeding the tied head
};

namespace detail {

template <typename T>
void add_bias_rows(Tensor<T>& x, const Tensor<T>& b) {
    const std::size_t n = b.numel();
    const std::size_t rows = x.numel() / n;
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = x.ptr() + r * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += b[j];
    }
}

template <typename T>
void accumulate_bias_grad(Tensor<T>& gb, const Tensor<T>& grad) {
    const std::size_t n = gb.numel();
    const std::size_t rows = grad.numel() / n;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = grad.ptr() + r * n;
        for (std::size_t j = 0; j < n; ++j) gb[j] += row[j];
    }
}

template <typename T>
void dropout_forward(Tensor<T>& x, double rate, Rng& rng, Tensor<T>& mask_out) {
    mask_out = Tensor<T>(x.shape);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < x.numel(); ++i) {
        T m = (rng.next_unit() < rate) ? T{0} : keep_scale;
        mask_out[i] = m;
        x[i] *= m;
    }
}

template <typename T>
void apply_mask(Tensor<T>& g, const Tensor<T>& mask) {
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= mask[i];
}

template <typename T>
FastFoodLayer<T> fastfood_view(const Model<T>& m, const std::string& prefix) {
    FastFoodLayer<T> ff(m.at(prefix + ".d1").value.numel());
    ff.d1 = m.at(prefix + ".d1").value;
    ff.d2 = m.at(prefix + ".d2").value;
    ff.d3 = m.at(prefix + ".d3").value;
    return ff;
}

// shared rect-adapter walk for the fastfood MLP projections
template <typename T>
Tensor<T> ff_stack_forward(const Model<T>& m, const std::string& prefix, std::size_t n_out,
                           const Tensor<T>& x) {
    const std::size_t n_in = x.last_extent();
    const std::size_t w = next_power_of_two(n_in);
    const std::size_t stacks = (n_out + w - 1) / w;
    const std::size_t rows = x.numel() / n_in;
    Tensor<T> padded({rows, w});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n_in; ++j) padded.ptr()[r * w + j] = x.ptr()[r * n_in + j];
    std::vector<std::size_t> oshape = x.shape;
    oshape.back() = n_out;
    Tensor<T> out(oshape);
    for (std::size_t s = 0; s < stacks; ++s) {
        FastFoodLayer<T> ff = fastfood_view(m, prefix + ".u" + std::to_string(s));
        Tensor<T> ys = fastfood_apply(ff, padded);
        const std::size_t base = s * w;
        const std::size_t take = std::min(w, n_out - base);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < take; ++j)
                out.ptr()[r * n_out + base + j] = ys.ptr()[r * w + j];
    }
    return out;
}

template <typename T>
Tensor<T> ff_stack_backward(Model<T>& m, const std::string& prefix, std::size_t n_out,
                            const Tensor<T>& x, const Tensor<T>& grad_out) {
    const std::size_t n_in = x.last_extent();
    const std::size_t w = next_power_of_two(n_in);
    const std::size_t stacks = (n_out + w - 1) / w;
    const std::size_t rows = x.numel() / n_in;
    Tensor<T> padded({rows, w});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n_in; ++j) padded.ptr()[r * w + j] = x.ptr()[r * n_in + j];
    Tensor<T> gx(x.shape);
    for (std::size_t s = 0; s < stacks; ++s) {
        const std::string uprefix = prefix + ".u" + std::to_string(s);
        FastFoodLayer<T> ff = fastfood_view(m, uprefix);
        const std::size_t base = s * w;
        const std::size_t take = std::min(w, n_out - base);
        Tensor<T> gs({rows, w});
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < take; ++j)
                gs.ptr()[r * w + j] = grad_out.ptr()[r * n_out + base + j];
        FastFoodGrads<T> ug = fastfood_backward(ff, padded, gs);
        auto acc = [&](const std::string& dn, const Tensor<T>& g) {
            Tensor<T>& dst = m.at(uprefix + "." + dn).grad;
            for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
        };
        acc("d1", ug.grad_d1);
        acc("d2", ug.grad_d2);
        acc("d3", ug.grad_d3);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n_in; ++j)
                gx.ptr()[r * n_in + j] += ug.grad_x.ptr()[r * w + j];
    }
    return gx;
}

template <typename T>
BlockDiagLayer<T> block_view(const Model<T>& m, const std::string& name) {
    const Tensor<T>& blocks = m.at(name).value;
    BlockDiagLayer<T> bd(blocks.shape[0] * blocks.shape[1], blocks.shape[0] * blocks.shape[2],
                         blocks.shape[0]);
    bd.blocks = blocks;
    return bd;
}

}  // namespace detail

constexpr double kLayerNormEps = 1e-5;

// Causal self-attention + MLP stack over a flat B*T token batch. Returns
// logits [B*T, V]. The cache keeps every intermediate backward needs.
template <typename T>
Tensor<T> model_forward(Model<T>& m, const std::vector<std::size_t>& tokens, std::size_t batch,
                        std::size_t seq, ForwardCache<T>& cache, Rng* dropout_rng = nullptr) {
    const ModelConfig& cfg = m.cfg;
    if (seq > cfg.context) throw std::invalid_argument("model_forward: sequence exceeds context");
    if (tokens.size() != batch * seq)
        throw std::invalid_argument("model_forward: token count != B*T");
    for (std::size_t t : tokens)
        if (t >= cfg.vocab_size)
            throw std::invalid_argument("model_forward: token id " + std::to_string(t) +
                                        " >= vocab " + std::to_string(cfg.vocab_size));
    const std::size_t d = cfg.d_model, nh = cfg.n_heads, hd = cfg.head_dim();
    const std::size_t rows = batch * seq;
    const T eps = static_cast<T>(kLayerNormEps);
    const bool train_mode = dropout_rng != nullptr;

    cache.batch = batch;
    cache.seq = seq;
    cache.layers.assign(cfg.n_layers, LayerCache<T>{});

    const Tensor<T>& emb = m.at("tok_emb").value;
    Tensor<T> x({rows, d});
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = emb.ptr() + tokens[r] * d;
        T* dst = x.ptr() + r * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
    }

    for (std::size_t li = 0; li < cfg.n_layers; ++li) {
        LayerCache<T>& lc = cache.layers[li];
        const std::string p = "L" + std::to_string(li) + ".";
        lc.x_in = x;

        if (cfg.layer_kind(li) == 'F') {
            lc.h2 = layer_norm(x, m.at(p + "ln.g").value, m.at(p + "ln.b").value, eps, &lc.ln2c);
            lc.u1 = matmul(lc.h2, m.at(p + "mlp.w1").value);
            detail::add_bias_rows(lc.u1, m.at(p + "mlp.b1").value);
            lc.a = lc.u1;
            for (auto& v : lc.a.data) v = gelu(v);
            Tensor<T> out = matmul(lc.a, m.at(p + "mlp.w2").value);
            detail::add_bias_rows(out, m.at(p + "mlp.b2").value);
            for (std::size_t i = 0; i < x.numel(); ++i) x[i] += out[i];
            continue;
        }

        // attention
        lc.h1 = layer_norm(x, m.at(p + "ln1.g").value, m.at(p + "ln1.b").value, eps, &lc.ln1c);
        lc.q = matmul(lc.h1, m.at(p + "attn.wq").value);
        detail::add_bias_rows(lc.q, m.at(p + "attn.bq").value);
        lc.k = matmul(lc.h1, m.at(p + "attn.wk").value);
        detail::add_bias_rows(lc.k, m.at(p + "attn.bk").value);
        lc.v = matmul(lc.h1, m.at(p + "attn.wv").value);
        detail::add_bias_rows(lc.v, m.at(p + "attn.bv").value);
        for (std::size_t r = 0; r < rows; ++r) {
            std::size_t pos = r % seq;
            for (std::size_t h = 0; h < nh; ++h) {
                rope_rotate_inplace(lc.q.ptr() + r * d + h * hd, hd, pos);
                rope_rotate_inplace(lc.k.ptr() + r * d + h * hd, hd, pos);
            }
        }

        lc.att = Tensor<T>({batch * nh * seq, seq});
        lc.headout = Tensor<T>({rows, d});
        const T scale = T{1} / std::sqrt(static_cast<T>(hd));
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < nh; ++h) {
                const T* qs = lc.q.ptr() + b * seq * d + h * hd;
                const T* ks = lc.k.ptr() + b * seq * d + h * hd;
                const T* vs = lc.v.ptr() + b * seq * d + h * hd;
                T* att = lc.att.ptr() + (b * nh + h) * seq * seq;
                detail::gemm<T>(false, true, seq, seq, hd, scale, qs, d, ks, d, T{0}, att, seq);
                // causal softmax: row t over columns <= t, zeros elsewhere
                for (std::size_t t = 0; t < seq; ++t) {
                    T* row = att + t * seq;
                    T mx = row[0];
                    for (std::size_t u = 1; u <= t; ++u) mx = std::max(mx, row[u]);
                    T sum = 0;
                    for (std::size_t u = 0; u <= t; ++u) {
                        row[u] = std::exp(row[u] - mx);
                        sum += row[u];
                    }
                    for (std::size_t u = 0; u <= t; ++u) row[u] /= sum;
                    for (std::size_t u = t + 1; u < seq; ++u) row[u] = T{0};
                }
                if (train_mode && cfg.attn_dropout > 0 && lc.att_mask.numel() == 0)
                    lc.att_mask = Tensor<T>(lc.att.shape);
                detail::gemm<T>(false, false, seq, hd, seq, T{1}, att, seq, vs, d, T{0},
                                lc.headout.ptr() + b * seq * d + h * hd, d);
            }
        }
        if (train_mode && cfg.attn_dropout > 0) {
            // dropout over attention probabilities, then recompute head outputs
            detail::dropout_forward(lc.att, cfg.attn_dropout, *dropout_rng, lc.att_mask);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < nh; ++h)
                    detail::gemm<T>(false, false, seq, hd, seq, T{1},
                                    lc.att.ptr() + (b * nh + h) * seq * seq, seq,
                                    lc.v.ptr() + b * seq * d + h * hd, d, T{0},
                                    lc.headout.ptr() + b * seq * d + h * hd, d);
        }
        Tensor<T> proj = matmul(lc.headout, m.at(p + "attn.wo").value);
        detail::add_bias_rows(proj, m.at(p + "attn.bo").value);
        if (train_mode && cfg.dropout > 0)
            detail::dropout_forward(proj, cfg.dropout, *dropout_rng, lc.proj_mask);
        for (std::size_t i = 0; i < x.numel(); ++i) x[i] += proj[i];
        lc.x_mid = x;

        // MLP
        lc.h2 = layer_norm(x, m.at(p + "ln2.g").value, m.at(p + "ln2.b").value, eps, &lc.ln2c);
        const std::size_t hid = cfg.mlp_hidden();
        switch (cfg.mlp_kind) {
            case MlpKind::dense:
                lc.u1 = matmul(lc.h2, m.at(p + "mlp.w1").value);
                break;
            case MlpKind::fastfood:
                lc.u1 = detail::ff_stack_forward(m, p + "mlp.in", hid, lc.h2);
                break;
            case MlpKind::block: {
                BlockDiagLayer<T> bd1 = detail::block_view(m, p + "mlp.bd1");
                Tensor<T> u0 = block_diag_apply(bd1, lc.h2);
                BlockHadamard bh(cfg.block_count, hid / cfg.block_count);
                lc.u1 = block_hadamard_apply(bh, u0);
                break;
            }
        }
        detail::add_bias_rows(lc.u1, m.at(p + "mlp.b1").value);
        lc.a = lc.u1;
        for (auto& v : lc.a.data) v = gelu(v);
        Tensor<T> out;
        switch (cfg.mlp_kind) {
            case MlpKind::dense:
                out = matmul(lc.a, m.at(p + "mlp.w2").value);
                break;
            case MlpKind::fastfood:
                out = detail::ff_stack_forward(m, p + "mlp.out", d, lc.a);
                break;
            case MlpKind::block: {
                BlockDiagLayer<T> bd2 = detail::block_view(m, p + "mlp.bd2");
                out = block_diag_apply(bd2, lc.a);
                break;
            }
        }
        detail::add_bias_rows(out, m.at(p + "mlp.b2").value);
        if (train_mode && cfg.dropout > 0)
            detail::dropout_forward(out, cfg.dropout, *dropout_rng, lc.mlp_mask);
        for (std::size_t i = 0; i < x.numel(); ++i) x[i] += out[i];
    }

    cache.x_final = x;
    cache.h_final = layer_norm(x, m.at("ln_f.g").value, m.at("ln_f.b").value, eps, &cache.lnfc);

    // tied output head: logits = h_final * emb^T
    Tensor<T> logits({rows, cfg.vocab_size});
    detail::gemm<T>(false, true, rows, cfg.vocab_size, d, T{1}, cache.h_final.ptr(), d, emb.ptr(),
                    d, T{0}, logits.ptr(), cfg.vocab_size);
    return logits;
}

// Accumulates parameter gradients into m.params[*].grad for trainable arrays.
template <typename T>
void model_backward(Model<T>& m, const std::vector<std::size_t>& tokens,
                    const Tensor<T>& grad_logits, const ForwardCache<T>& cache) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t d = cfg.d_model, nh = cfg.n_heads, hd = cfg.head_dim();
    const std::size_t batch = cache.batch, seq = cache.seq;
    const std::size_t rows = batch * seq;

    Param<T>& embp = m.at("tok_emb");
    // tied head: dE += gL^T * h_final ; dh = gL * E
    detail::gemm<T>(true, false, cfg.vocab_size, d, rows, T{1}, grad_logits.ptr(), cfg.vocab_size,
                    cache.h_final.ptr(), d, T{1}, embp.grad.ptr(), d);
    Tensor<T> dh({rows, d});
    detail::gemm<T>(false, false, rows, d, cfg.vocab_size, T{1}, grad_logits.ptr(),
                    cfg.vocab_size, embp.value.ptr(), d, T{0}, dh.ptr(), d);

    LayerNormGrads<T> gf = layer_norm_backward(dh, m.at("ln_f.g").value, cache.lnfc);
    for (std::size_t i = 0; i < d; ++i) {
        m.at("ln_f.g").grad[i] += gf.grad_gamma[i];
        m.at("ln_f.b").grad[i] += gf.grad_beta[i];
    }
    Tensor<T> dx = std::move(gf.grad_x);

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const LayerCache<T>& lc = cache.layers[li];
        const std::string p = "L" + std::to_string(li) + ".";

        if (cfg.layer_kind(li) == 'F') {
            // frozen layer: propagate through, no parameter gradients
            const Tensor<T>& w2 = m.at(p + "mlp.w2").value;
            const std::size_t hid = w2.shape[0];
            Tensor<T> da({rows, hid});
            detail::gemm<T>(false, true, rows, hid, d, T{1}, dx.ptr(), d, w2.ptr(), d, T{0},
                            da.ptr(), hid);
            for (std::size_t i = 0; i < da.numel(); ++i) da[i] *= gelu_grad(lc.u1[i]);
            const Tensor<T>& w1 = m.at(p + "mlp.w1").value;
            Tensor<T> dh2({rows, d});
            detail::gemm<T>(false, true, rows, d, w1.shape[1], T{1}, da.ptr(), w1.shape[1],
                            w1.ptr(), w1.shape[1], T{0}, dh2.ptr(), d);
            LayerNormGrads<T> gl = layer_norm_backward(dh2, m.at(p + "ln.g").value, lc.ln2c);
            for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += gl.grad_x[i];
            continue;
        }

        // ---- MLP branch ----
        Tensor<T> dout = dx;
        if (lc.mlp_mask.numel()) detail::apply_mask(dout, lc.mlp_mask);
        detail::accumulate_bias_grad(m.at(p + "mlp.b2").grad, dout);
        Tensor<T> da;
        switch (cfg.mlp_kind) {
            case MlpKind::dense: {
                auto [ga, gw2] = matmul_backward(dout, lc.a, m.at(p + "mlp.w2").value);
                Tensor<T>& w2g = m.at(p + "mlp.w2").grad;
                for (std::size_t i = 0; i < gw2.numel(); ++i) w2g[i] += gw2[i];
                da = std::move(ga);
                break;
            }
            case MlpKind::fastfood:
                da = detail::ff_stack_backward(m, p + "mlp.out", d, lc.a, dout);
                break;
            case MlpKind::block: {
                BlockDiagLayer<T> bd2 = detail::block_view(m, p + "mlp.bd2");
                BlockDiagGrads<T> g2 = block_diag_backward(bd2, lc.a, dout);
                Tensor<T>& bg = m.at(p + "mlp.bd2").grad;
                for (std::size_t i = 0; i < g2.grad_blocks.numel(); ++i) bg[i] += g2.grad_blocks[i];
                da = std::move(g2.grad_x);
                break;
            }
        }
        for (std::size_t i = 0; i < da.numel(); ++i) da[i] *= gelu_grad(lc.u1[i]);
        detail::accumulate_bias_grad(m.at(p + "mlp.b1").grad, da);
        Tensor<T> dh2;
        switch (cfg.mlp_kind) {
            case MlpKind::dense: {
                auto [gh2, gw1] = matmul_backward(da, lc.h2, m.at(p + "mlp.w1").value);
                Tensor<T>& w1g = m.at(p + "mlp.w1").grad;
                for (std::size_t i = 0; i < gw1.numel(); ++i) w1g[i] += gw1[i];
                dh2 = std::move(gh2);
                break;
            }
            case MlpKind::fastfood:
                dh2 = detail::ff_stack_backward(m, p + "mlp.in", cfg.mlp_hidden(), lc.h2, da);
                break;
            case MlpKind::block: {
                BlockHadamard bh(cfg.block_count, cfg.mlp_hidden() / cfg.block_count);
                Tensor<T> du0 = block_hadamard_backward(bh, da);
                BlockDiagLayer<T> bd1 = detail::block_view(m, p + "mlp.bd1");
                BlockDiagGrads<T> g1 = block_diag_backward(bd1, lc.h2, du0);
                Tensor<T>& bg = m.at(p + "mlp.bd1").grad;
                for (std::size_t i = 0; i < g1.grad_blocks.numel(); ++i) bg[i] += g1.grad_blocks[i];
                dh2 = std::move(g1.grad_x);
                break;
            }
        }
        LayerNormGrads<T> g2n = layer_norm_backward(dh2, m.at(p + "ln2.g").value, lc.ln2c);
        for (std::size_t i = 0; i < d; ++i) {
            m.at(p + "ln2.g").grad[i] += g2n.grad_gamma[i];
            m.at(p + "ln2.b").grad[i] += g2n.grad_beta[i];
        }
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += g2n.grad_x[i];

        // ---- attention branch (cotangent of x_mid is now dx) ----
        Tensor<T> dproj = dx;
        if (lc.proj_mask.numel()) detail::apply_mask(dproj, lc.proj_mask);
        detail::accumulate_bias_grad(m.at(p + "attn.bo").grad, dproj);
        auto [dheadout, gwo] = matmul_backward(dproj, lc.headout, m.at(p + "attn.wo").value);
        {
            Tensor<T>& wog = m.at(p + "attn.wo").grad;
            for (std::size_t i = 0; i < gwo.numel(); ++i) wog[i] += gwo[i];
        }

        Tensor<T> dq({rows, d}), dk({rows, d}), dv({rows, d});
        const T scale = T{1} / std::sqrt(static_cast<T>(hd));
        std::vector<T> ds(seq * seq);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < nh; ++h) {
                const T* att = lc.att.ptr() + (b * nh + h) * seq * seq;
                const T* vs = lc.v.ptr() + b * seq * d + h * hd;
                const T* qs = lc.q.ptr() + b * seq * d + h * hd;
                const T* ks = lc.k.ptr() + b * seq * d + h * hd;
                const T* dho = dheadout.ptr() + b * seq * d + h * hd;
                // datt = dho * v^T ; dv += att^T * dho
                std::vector<T> datt(seq * seq);
                detail::gemm<T>(false, true, seq, seq, hd, T{1}, dho, d, vs, d, T{0}, datt.data(),
                                seq);
                detail::gemm<T>(true, false, seq, hd, seq, T{1}, att, seq, dho, d, T{1},
                                dv.ptr() + b * seq * d + h * hd, d);
                if (lc.att_mask.numel()) {
                    const T* msk = lc.att_mask.ptr() + (b * nh + h) * seq * seq;
                    for (std::size_t i = 0; i < seq * seq; ++i) datt[i] *= msk[i];
                }
                // softmax backward per causal row
                for (std::size_t t = 0; t < seq; ++t) {
                    const T* yr = att + t * seq;
                    const T* gr = datt.data() + t * seq;
                    T dot = 0;
                    for (std::size_t u = 0; u <= t; ++u) dot += gr[u] * yr[u];
                    T* dr = ds.data() + t * seq;
                    for (std::size_t u = 0; u <= t; ++u) dr[u] = yr[u] * (gr[u] - dot);
                    for (std::size_t u = t + 1; u < seq; ++u) dr[u] = T{0};
                }
                // dq += scale * ds * k ; dk += scale * ds^T * q
                detail::gemm<T>(false, false, seq, hd, seq, scale, ds.data(), seq, ks, d, T{1},
                                dq.ptr() + b * seq * d + h * hd, d);
                detail::gemm<T>(true, false, seq, hd, seq, scale, ds.data(), seq, qs, d, T{1},
                                dk.ptr() + b * seq * d + h * hd, d);
            }
        }
        // undo the rotation (inverse rope) before the projection backward
        for (std::size_t r = 0; r < rows; ++r) {
            std::size_t pos = r % seq;
            for (std::size_t h = 0; h < nh; ++h) {
                rope_rotate_inplace(dq.ptr() + r * d + h * hd, hd, pos, -1);
                rope_rotate_inplace(dk.ptr() + r * d + h * hd, hd, pos, -1);
            }
        }
        detail::accumulate_bias_grad(m.at(p + "attn.bq").grad, dq);
        detail::accumulate_bias_grad(m.at(p + "attn.bk").grad, dk);
        detail::accumulate_bias_grad(m.at(p + "attn.bv").grad, dv);
        Tensor<T> dh1({rows, d});
        const std::array<std::pair<const char*, Tensor<T>*>, 3> qkv{
            {{"wq", &dq}, {"wk", &dk}, {"wv", &dv}}};
        for (const auto& [wname, gten] : qkv) {
            auto [gh, gw] = matmul_backward(*gten, lc.h1, m.at(p + "attn." + std::string(wname)).value);
            Tensor<T>& wg = m.at(p + "attn." + std::string(wname)).grad;
            for (std::size_t i = 0; i < gw.numel(); ++i) wg[i] += gw[i];
            for (std::size_t i = 0; i < dh1.numel(); ++i) dh1[i] += gh[i];
        }
        LayerNormGrads<T> g1n = layer_norm_backward(dh1, m.at(p + "ln1.g").value, lc.ln1c);
        for (std::size_t i = 0; i < d; ++i) {
            m.at(p + "ln1.g").grad[i] += g1n.grad_gamma[i];
            m.at(p + "ln1.b").grad[i] += g1n.grad_beta[i];
        }
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += g1n.grad_x[i];
    }

    // embedding lookup scatter
    for (std::size_t r = 0; r < rows; ++r) {
        T* dst = embp.grad.ptr() + tokens[r] * d;
        const T* src = dx.ptr() + r * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
}

// forward + cross-entropy + backward in one step; returns nats/token.
template <typename T>
T model_loss_and_grad(Model<T>& m, const std::vector<std::size_t>& inputs,
                      const std::vector<std::size_t>& targets, std::size_t batch, std::size_t seq,
                      Rng* dropout_rng = nullptr) {
    ForwardCache<T> cache;
    Tensor<T> logits = model_forward(m, inputs, batch, seq, cache, dropout_rng);
    Tensor<T> dlogits;
    T loss = cross_entropy(logits, targets, &dlogits);
    model_backward(m, inputs, dlogits, cache);
    return loss;
}

template <typename T>
T model_eval_loss(Model<T>& m, const std::vector<std::size_t>& inputs,
                  const std::vector<std::size_t>& targets, std::size_t batch, std::size_t seq) {
    ForwardCache<T> cache;
    Tensor<T> logits = model_forward(m, inputs, batch, seq, cache, nullptr);
    return cross_entropy<T>(logits, targets, nullptr);
}

}  // namespace slw
