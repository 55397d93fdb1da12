#pragma once

// Structured linear operators: fast Walsh-Hadamard transform, adaptive
// FastFood (D3·H·D2·H·D1), block-diagonal products and block-Hadamard
// mixing. Each operator carries forward, backward, and a parameter census.

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "slw/core.hpp"
#include "slw/ops.hpp"

#if !defined(NDEBUG) && !defined(SLW_COUNT_BUTTERFLIES)
#define SLW_COUNT_BUTTERFLIES 1
#endif

namespace slw {

#ifdef SLW_COUNT_BUTTERFLIES
inline std::size_t& fwht_butterfly_counter() {
    thread_local std::size_t count = 0;
    return count;
}
#endif

namespace detail {

// In-place butterflies over one contiguous vector of power-of-two length.
template <typename T>
void fwht_vec(T* v, std::size_t n) {
    for (std::size_t h = 1; h < n; h <<= 1) {
        for (std::size_t i = 0; i < n; i += h << 1) {
            for (std::size_t j = i; j < i + h; ++j) {
                T x = v[j];
                T y = v[j + h];
                v[j] = x + y;
                v[j + h] = x - y;
#ifdef SLW_COUNT_BUTTERFLIES
                ++fwht_butterfly_counter();
#endif
            }
        }
    }
}

// Butterflies across a strided axis: elements v[j*stride], j in [0, b).
template <typename T>
void fwht_strided(T* v, std::size_t b, std::size_t stride) {
    for (std::size_t h = 1; h < b; h <<= 1) {
        for (std::size_t i = 0; i < b; i += h << 1) {
            for (std::size_t j = i; j < i + h; ++j) {
                T x = v[j * stride];
                T y = v[(j + h) * stride];
                v[j * stride] = x + y;
                v[(j + h) * stride] = x - y;
            }
        }
    }
}

}  // namespace detail

// Walsh-Hadamard transform over the last axis, O(n log n). H is symmetric
// and self-inverse up to a factor n; the backward pass is fwht itself.
template <typename T>
Tensor<T> fwht(const Tensor<T>& x, bool normalize = false) {
    const std::size_t n = x.last_extent();
    if (!is_power_of_two(n))
        throw std::invalid_argument("fwht: width " + std::to_string(n) + " is not a power of two");
    Tensor<T> out = x;
    const std::size_t rows = out.numel() / n;
    for (std::size_t r = 0; r < rows; ++r) detail::fwht_vec(out.ptr() + r * n, n);
    if (normalize) {
        T s = T{1} / std::sqrt(static_cast<T>(n));
        for (auto& v : out.data) v *= s;
    }
    return out;
}

struct TransformCensus {
    std::size_t trainable = 0;
    std::size_t frozen = 0;
    std::size_t emulated = 0;
    std::size_t flop_per_token = 0;  // forward FLOPs; Hadamard stages priced at zero
};

// Adaptive FastFood: y = D3 · H · D2 · H · D1 · x with an overall 1/n factor
// (one 1/sqrt(n) per Hadamard stage). 3n trainable scalars emulate an n x n map.
template <typename T>
struct FastFoodLayer {
    std::size_t n = 0;
    Tensor<T> d1, d2, d3;

    explicit FastFoodLayer(std::size_t width)
        : n(width), d1({width}), d2({width}), d3({width}) {
        if (!is_power_of_two(width))
            throw std::invalid_argument("FastFoodLayer: width must be a power of two");
        d1.fill(T{1});
        d2.fill(T{1});
        d3.fill(T{1});
    }

    TransformCensus census() const {
        return {3 * n, 0, n * n, 6 * n};
    }
};

namespace detail {

template <typename T>
void scale_rows_by_diag(Tensor<T>& x, const Tensor<T>& d) {
    const std::size_t n = d.numel();
    const std::size_t rows = x.numel() / n;
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = x.ptr() + r * n;
        for (std::size_t j = 0; j < n; ++j) row[j] *= d[j];
    }
}

}  // namespace detail

template <typename T>
Tensor<T> fastfood_apply(const FastFoodLayer<T>& layer, const Tensor<T>& x) {
    if (x.last_extent() != layer.n)
        throw std::invalid_argument("fastfood_apply: width mismatch");
    Tensor<T> y = x;
    detail::scale_rows_by_diag(y, layer.d1);
    y = fwht(y, /*normalize=*/true);
    detail::scale_rows_by_diag(y, layer.d2);
    y = fwht(y, /*normalize=*/true);
    detail::scale_rows_by_diag(y, layer.d3);
    return y;
}

template <typename T>
struct FastFoodGrads {
    Tensor<T> grad_x;
    Tensor<T> grad_d1, grad_d2, grad_d3;
};

// The operator factors are diagonal or symmetric, so the cotangent chain is
// the same stages walked in reverse with the same normalized transforms.
template <typename T>
FastFoodGrads<T> fastfood_backward(const FastFoodLayer<T>& layer, const Tensor<T>& x,
                                   const Tensor<T>& grad_out) {
    if (x.last_extent() != layer.n || !grad_out.same_shape(x))
        throw std::invalid_argument("fastfood_backward: shape mismatch");
    const std::size_t n = layer.n;
    const std::size_t rows = x.numel() / n;

    // forward intermediates
    Tensor<T> a = x;  // D1 x
    detail::scale_rows_by_diag(a, layer.d1);
    Tensor<T> ha = fwht(a, true);   // H D1 x
    Tensor<T> b = ha;               // D2 H D1 x
    detail::scale_rows_by_diag(b, layer.d2);
    Tensor<T> hb = fwht(b, true);   // H D2 H D1 x

    FastFoodGrads<T> g{Tensor<T>(x.shape), Tensor<T>({n}), Tensor<T>({n}), Tensor<T>({n})};

    // d3: elementwise against the last pre-diagonal activation
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j)
            g.grad_d3[j] += grad_out.ptr()[r * n + j] * hb.ptr()[r * n + j];

    Tensor<T> u = grad_out;  // D3 g
    detail::scale_rows_by_diag(u, layer.d3);
    u = fwht(u, true);       // H D3 g

    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j)
            g.grad_d2[j] += u.ptr()[r * n + j] * ha.ptr()[r * n + j];

    detail::scale_rows_by_diag(u, layer.d2);
    u = fwht(u, true);       // H D2 H D3 g

    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j)
            g.grad_d1[j] += u.ptr()[r * n + j] * x.ptr()[r * n + j];

    detail::scale_rows_by_diag(u, layer.d1);
    g.grad_x = std::move(u);
    return g;
}

// b dense blocks on the diagonal of an n_in x n_out map.
template <typename T>
struct BlockDiagLayer {
    std::size_t n_in = 0, n_out = 0, b = 0;
    Tensor<T> blocks;  // [b, n_in/b, n_out/b]

    BlockDiagLayer(std::size_t in, std::size_t out, std::size_t blocks_count)
        : n_in(in), n_out(out), b(blocks_count),
          blocks({blocks_count, in / blocks_count, out / blocks_count}) {
        if (b == 0 || in % b != 0 || out % b != 0)
            throw std::invalid_argument("BlockDiagLayer: block count must divide both widths");
    }

    std::size_t in_block() const { return n_in / b; }
    std::size_t out_block() const { return n_out / b; }

    TransformCensus census() const {
        return {n_in * n_out / b, 0, n_in * n_out, 2 * n_in * n_out / b};
    }
};

template <typename T>
Tensor<T> block_diag_apply(const BlockDiagLayer<T>& layer, const Tensor<T>& x) {
    if (x.last_extent() != layer.n_in)
        throw std::invalid_argument("block_diag_apply: width mismatch");
    const std::size_t rows = x.numel() / layer.n_in;
    const std::size_t ib = layer.in_block(), ob = layer.out_block();
    std::vector<std::size_t> oshape = x.shape;
    oshape.back() = layer.n_out;
    Tensor<T> out(oshape);
    // chunk i of every row times block i
    for (std::size_t i = 0; i < layer.b; ++i) {
        detail::gemm<T>(false, false, rows, ob, ib, T{1}, x.ptr() + i * ib, layer.n_in,
                        layer.blocks.ptr() + i * ib * ob, ob, T{0}, out.ptr() + i * ob,
                        layer.n_out);
    }
    return out;
}

template <typename T>
struct BlockDiagGrads {
    Tensor<T> grad_x;
    Tensor<T> grad_blocks;
};

template <typename T>
BlockDiagGrads<T> block_diag_backward(const BlockDiagLayer<T>& layer, const Tensor<T>& x,
                                      const Tensor<T>& grad_out) {
    if (x.last_extent() != layer.n_in || grad_out.last_extent() != layer.n_out)
        throw std::invalid_argument("block_diag_backward: shape mismatch");
    const std::size_t rows = x.numel() / layer.n_in;
    const std::size_t ib = layer.in_block(), ob = layer.out_block();
    BlockDiagGrads<T> g{Tensor<T>(x.shape), Tensor<T>(layer.blocks.shape)};
    for (std::size_t i = 0; i < layer.b; ++i) {
        detail::gemm<T>(false, true, rows, ib, ob, T{1}, grad_out.ptr() + i * ob, layer.n_out,
                        layer.blocks.ptr() + i * ib * ob, ob, T{0}, g.grad_x.ptr() + i * ib,
                        layer.n_in);
        detail::gemm<T>(true, false, ib, ob, rows, T{1}, x.ptr() + i * ib, layer.n_in,
                        grad_out.ptr() + i * ob, layer.n_out, T{0},
                        g.grad_blocks.ptr() + i * ib * ob, ob);
    }
    return g;
}

// Parameter-free mixing across block indices: (H_b kron I_k) / sqrt(b).
struct BlockHadamard {
    std::size_t b = 0, k = 0;

    BlockHadamard(std::size_t block_count, std::size_t block_size) : b(block_count), k(block_size) {
        if (!is_power_of_two(b))
            throw std::invalid_argument("BlockHadamard: block count must be a power of two");
        if (k == 0) throw std::invalid_argument("BlockHadamard: zero block size");
    }

    std::size_t width() const { return b * k; }

    TransformCensus census() const { return {0, 0, 0, 0}; }
};

template <typename T>
Tensor<T> block_hadamard_apply(const BlockHadamard& bh, const Tensor<T>& x) {
    if (x.last_extent() != bh.width())
        throw std::invalid_argument("block_hadamard_apply: width " +
                                    std::to_string(x.last_extent()) + " != b*k");
    Tensor<T> out = x;
    const std::size_t n = bh.width();
    const std::size_t rows = out.numel() / n;
    const T scale = T{1} / std::sqrt(static_cast<T>(bh.b));
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = out.ptr() + r * n;
        for (std::size_t c = 0; c < bh.k; ++c) detail::fwht_strided(row + c, bh.b, bh.k);
        for (std::size_t j = 0; j < n; ++j) row[j] *= scale;
    }
    return out;
}

// Orthonormal and symmetric, so the backward pass is the forward map.
template <typename T>
Tensor<T> block_hadamard_backward(const BlockHadamard& bh, const Tensor<T>& grad_out) {
    return block_hadamard_apply(bh, grad_out);
}

// Rectangular m x n map built from square FastFood units of width
// w = next power of two >= n: zero-pad the input to w, run ceil(m/w)
// independent units, truncate the concatenation to m.
template <typename T>
struct FastFoodAdapter {
    std::size_t n_in = 0, n_out = 0, w = 0;
    std::vector<FastFoodLayer<T>> units;

    FastFoodAdapter(std::size_t out, std::size_t in) : n_in(in), n_out(out) {
        if (in == 0 || out == 0) throw std::invalid_argument("FastFoodAdapter: zero width");
        w = next_power_of_two(in);
        std::size_t stacks = (out + w - 1) / w;
        units.reserve(stacks);
        for (std::size_t s = 0; s < stacks; ++s) units.emplace_back(w);
    }

    std::size_t stacks() const { return units.size(); }

    TransformCensus census() const {
        return {stacks() * 3 * w, 0, n_out * n_in, stacks() * 6 * w};
    }
};

template <typename T>
Tensor<T> fastfood_adapter_apply(const FastFoodAdapter<T>& ad, const Tensor<T>& x,
                                 Tensor<T>* padded_cache = nullptr) {
    if (x.last_extent() != ad.n_in)
        throw std::invalid_argument("fastfood_adapter_apply: width mismatch");
    const std::size_t rows = x.numel() / ad.n_in;
    Tensor<T> padded({rows, ad.w});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < ad.n_in; ++j)
            padded.ptr()[r * ad.w + j] = x.ptr()[r * ad.n_in + j];
    std::vector<std::size_t> oshape = x.shape;
    oshape.back() = ad.n_out;
    Tensor<T> out(oshape);
    for (std::size_t s = 0; s < ad.stacks(); ++s) {
        Tensor<T> ys = fastfood_apply(ad.units[s], padded);
        const std::size_t base = s * ad.w;
        const std::size_t take = std::min(ad.w, ad.n_out - base);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < take; ++j)
                out.ptr()[r * ad.n_out + base + j] = ys.ptr()[r * ad.w + j];
    }
    if (padded_cache) *padded_cache = std::move(padded);
    return out;
}

template <typename T>
struct FastFoodAdapterGrads {
    Tensor<T> grad_x;
    std::vector<FastFoodGrads<T>> unit_grads;
};

template <typename T>
FastFoodAdapterGrads<T> fastfood_adapter_backward(const FastFoodAdapter<T>& ad, const Tensor<T>& x,
                                                  const Tensor<T>& grad_out) {
    if (x.last_extent() != ad.n_in || grad_out.last_extent() != ad.n_out)
        throw std::invalid_argument("fastfood_adapter_backward: shape mismatch");
    const std::size_t rows = x.numel() / ad.n_in;
    Tensor<T> padded({rows, ad.w});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < ad.n_in; ++j)
            padded.ptr()[r * ad.w + j] = x.ptr()[r * ad.n_in + j];

    FastFoodAdapterGrads<T> g;
    g.grad_x = Tensor<T>(x.shape);
    for (std::size_t s = 0; s < ad.stacks(); ++s) {
        const std::size_t base = s * ad.w;
        const std::size_t take = std::min(ad.w, ad.n_out - base);
        Tensor<T> gs({rows, ad.w});
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < take; ++j)
                gs.ptr()[r * ad.w + j] = grad_out.ptr()[r * ad.n_out + base + j];
        FastFoodGrads<T> ug = fastfood_backward(ad.units[s], padded, gs);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < ad.n_in; ++j)
                g.grad_x.ptr()[r * ad.n_in + j] += ug.grad_x.ptr()[r * ad.w + j];
        g.unit_grads.push_back(std::move(ug));
    }
    return g;
}

}  // namespace slw
