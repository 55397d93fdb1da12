#pragma once

// Primitive differentiable operations with hand-derived backward passes.
// f32 is for training runs, f64 for verification; both share one template.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "slw/core.hpp"

#ifndef SLW_NO_BLAS
#include <cblas.h>
#endif

namespace slw {

namespace detail {

template <typename T>
void gemm_naive(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
                const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
                std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) {
                T av = ta ? a[p * lda + i] : a[i * lda + p];
                T bv = tb ? b[j * ldb + p] : b[p * ldb + j];
                acc += av * bv;
            }
            c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
        }
    }
}

// C[m x n] = alpha * op(A) * op(B) + beta * C, row-major.
template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
#ifndef SLW_NO_BLAS
    if constexpr (std::is_same_v<T, float>) {
        cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                    static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                    static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
        return;
    } else if constexpr (std::is_same_v<T, double>) {
        cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                    static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                    static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
        return;
    }
#endif
    gemm_naive(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
    detail::require(a.shape[1] == b.shape[0],
                    "matmul: inner extents differ (" + std::to_string(a.shape[1]) + " vs " +
                        std::to_string(b.shape[0]) + ")");
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor<T> c({m, n});
    detail::gemm<T>(false, false, m, n, k, T{1}, a.ptr(), k, b.ptr(), n, T{0}, c.ptr(), n);
    return c;
}

// grad_a = grad_out * b^T ; grad_b = a^T * grad_out
template <typename T>
std::pair<Tensor<T>, Tensor<T>> matmul_backward(const Tensor<T>& grad_out, const Tensor<T>& a,
                                                const Tensor<T>& b) {
    detail::require(grad_out.rank() == 2 && a.rank() == 2 && b.rank() == 2,
                    "matmul_backward: rank-2 tensors required");
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    detail::require(a.shape[1] == b.shape[0] && grad_out.shape[0] == m && grad_out.shape[1] == n,
                    "matmul_backward: shape mismatch with forward");
    Tensor<T> ga({m, k}), gb({k, n});
    detail::gemm<T>(false, true, m, k, n, T{1}, grad_out.ptr(), n, b.ptr(), n, T{0}, ga.ptr(), k);
    detail::gemm<T>(true, false, k, n, m, T{1}, a.ptr(), k, grad_out.ptr(), n, T{0}, gb.ptr(), n);
    return {std::move(ga), std::move(gb)};
}

// Row-wise softmax with max subtraction. Rejects NaN input.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    detail::require(x.rank() == 2, "softmax_rows: rank-2 tensor required");
    const std::size_t m = x.shape[0], n = x.shape[1];
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = x.ptr() + i * n;
        T* orow = out.ptr() + i * n;
        T mx = row[0];
        for (std::size_t j = 0; j < n; ++j) {
            if (std::isnan(static_cast<double>(row[j])))
                throw std::invalid_argument("softmax_rows: NaN input");
            mx = std::max(mx, row[j]);
        }
        T sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    return out;
}

// d/dx of softmax given y = softmax(x): gx = y * (g - sum(g*y))
template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& grad_out, const Tensor<T>& y) {
    detail::require(grad_out.same_shape(y), "softmax_rows_backward: shape mismatch");
    const std::size_t m = y.shape[0], n = y.shape[1];
    Tensor<T> gx({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* g = grad_out.ptr() + i * n;
        const T* yr = y.ptr() + i * n;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * yr[j];
        T* o = gx.ptr() + i * n;
        for (std::size_t j = 0; j < n; ++j) o[j] = yr[j] * (g[j] - dot);
    }
    return gx;
}

template <typename T>
struct LayerNormCache {
    Tensor<T> xhat;        // normalized input, same shape as x
    std::vector<T> inv_std;  // one per row
};

// Per-row normalization over the last axis, then affine with gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     LayerNormCache<T>* cache = nullptr) {
    detail::require(!x.shape.empty() && x.last_extent() > 0, "layer_norm: empty last axis");
    detail::require(eps > 0, "layer_norm: eps must be positive");
    const std::size_t d = x.last_extent();
    detail::require(gamma.numel() == d && beta.numel() == d, "layer_norm: gamma/beta extent != d");
    const std::size_t rows = x.numel() / d;
    Tensor<T> out(x.shape);
    if (cache) {
        cache->xhat = Tensor<T>(x.shape);
        cache->inv_std.assign(rows, T{0});
    }
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xi = x.ptr() + r * d;
        T* oi = out.ptr() + r * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            T c = xi[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        T inv = T{1} / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            T xh = (xi[j] - mean) * inv;
            if (cache) cache->xhat.ptr()[r * d + j] = xh;
            oi[j] = gamma[j] * xh + beta[j];
        }
        if (cache) cache->inv_std[r] = inv;
    }
    return out;
}

template <typename T>
struct LayerNormGrads {
    Tensor<T> grad_x;
    Tensor<T> grad_gamma;
    Tensor<T> grad_beta;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& grad_out, const Tensor<T>& gamma,
                                      const LayerNormCache<T>& cache) {
    const std::size_t d = grad_out.last_extent();
    const std::size_t rows = grad_out.numel() / d;
    LayerNormGrads<T> g{Tensor<T>(grad_out.shape), Tensor<T>({d}), Tensor<T>({d})};
    for (std::size_t r = 0; r < rows; ++r) {
        const T* go = grad_out.ptr() + r * d;
        const T* xh = cache.xhat.ptr() + r * d;
        T inv = cache.inv_std[r];
        T sum_g = 0, sum_gx = 0;
        for (std::size_t j = 0; j < d; ++j) {
            T gh = go[j] * gamma[j];
            sum_g += gh;
            sum_gx += gh * xh[j];
            g.grad_gamma[j] += go[j] * xh[j];
            g.grad_beta[j] += go[j];
        }
        for (std::size_t j = 0; j < d; ++j) {
            T gh = go[j] * gamma[j];
            g.grad_x.ptr()[r * d + j] =
                inv * (gh - (sum_g + xh[j] * sum_gx) / static_cast<T>(d));
        }
    }
    return g;
}

// Mean negative log-likelihood in nats/token. grad emits (softmax - onehot)/T.
template <typename T>
T cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets,
                Tensor<T>* grad_logits = nullptr) {
    detail::require(logits.rank() == 2, "cross_entropy: logits must be T x V");
    const std::size_t tcnt = logits.shape[0], v = logits.shape[1];
    detail::require(targets.size() == tcnt, "cross_entropy: target count mismatch");
    for (std::size_t t : targets)
        detail::require(t < v, "cross_entropy: target id " + std::to_string(t) + " >= vocab " +
                                   std::to_string(v));
    Tensor<T> probs = softmax_rows(logits);
    T loss = 0;
    for (std::size_t i = 0; i < tcnt; ++i) {
        T p = probs.ptr()[i * v + targets[i]];
        loss -= std::log(std::max(p, std::numeric_limits<T>::min()));
    }
    loss /= static_cast<T>(tcnt);
    if (grad_logits) {
        *grad_logits = std::move(probs);
        T scale = T{1} / static_cast<T>(tcnt);
        for (std::size_t i = 0; i < tcnt; ++i) {
            T* row = grad_logits->ptr() + i * v;
            row[targets[i]] -= T{1};
            for (std::size_t j = 0; j < v; ++j) row[j] *= scale;
        }
    }
    return loss;
}

// exact GELU and its derivative
template <typename T>
T gelu(T x) {
    return static_cast<T>(0.5) * x * (T{1} + std::erf(x * static_cast<T>(0.7071067811865476)));
}

template <typename T>
T gelu_grad(T x) {
    T cdf = static_cast<T>(0.5) * (T{1} + std::erf(x * static_cast<T>(0.7071067811865476)));
    T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(0.3989422804014327);
    return cdf + x * pdf;
}

}  // namespace slw
