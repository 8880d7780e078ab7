#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sprompts/tensor.hpp"

namespace sprompts::gradcore {

namespace detail {

// C[n,m] += sum_k A[n,k] * B[k,m]. The k loop is outermost inside each row,
// so the accumulation order per output element is fixed; the inner m loop
// has no cross-lane reduction and may vectorize freely.
inline void mm_nn_acc(float* c, const float* a, const float* b,
                      std::int64_t n, std::int64_t k, std::int64_t m) {
    for (std::int64_t i = 0; i < n; ++i) {
        float* crow = c + i * m;
        const float* arow = a + i * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const float s = arow[kk];
            const float* brow = b + kk * m;
            for (std::int64_t j = 0; j < m; ++j) crow[j] += s * brow[j];
        }
    }
}

// C[k,m] += sum_n A[n,k] * B[n,m]  (A used transposed; outer-product form,
// deterministic because n advances sequentially).
inline void mm_tn_acc(float* c, const float* a, const float* b,
                      std::int64_t n, std::int64_t k, std::int64_t m) {
    for (std::int64_t i = 0; i < n; ++i) {
        const float* arow = a + i * k;
        const float* brow = b + i * m;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const float s = arow[kk];
            float* crow = c + kk * m;
            for (std::int64_t j = 0; j < m; ++j) crow[j] += s * brow[j];
        }
    }
}

inline std::vector<float> transpose2d(const float* a, std::int64_t rows,
                                      std::int64_t cols) {
    std::vector<float> t(static_cast<std::size_t>(rows * cols));
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
    return t;
}

} // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("add", a.shape(), b.shape());
    std::vector<float> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto pa = a.impl(), pb = b.impl();
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorImpl& self) {
        if (self.grad.empty()) return;
        const auto& gy = self.grad;
        if (pa->needs_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
        }
        if (pb->needs_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul", a.shape(), b.shape());
    std::vector<float> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto pa = a.impl(), pb = b.impl();
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, [pa, pb](TensorImpl& self) {
        if (self.grad.empty()) return;
        const auto& gy = self.grad;
        if (pa->needs_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * pb->data[i];
        }
        if (pb->needs_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * pa->data[i];
        }
    });
}

inline Tensor scale(const Tensor& a, float s) {
    std::vector<float> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
    auto pa = a.impl();
    return Tensor::from_op(a.shape(), std::move(out), {a}, [pa, s](TensorImpl& self) {
        if (self.grad.empty() || !pa->needs_grad) return;
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    });
}

inline Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.values()) acc += v;
    auto pa = a.impl();
    return Tensor::from_op({1}, {static_cast<float>(acc)}, {a}, [pa](TensorImpl& self) {
        if (self.grad.empty() || !pa->needs_grad) return;
        const float gy = self.grad[0];
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy;
    });
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul", a.shape(), b.shape());
    const std::int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<float> out(static_cast<std::size_t>(n * m), 0.0f);
    detail::mm_nn_acc(out.data(), a.values().data(), b.values().data(), n, k, m);
    auto pa = a.impl(), pb = b.impl();
    return Tensor::from_op({n, m}, std::move(out), {a, b},
                           [pa, pb, n, k, m](TensorImpl& self) {
        if (self.grad.empty()) return;
        const float* gy = self.grad.data();
        if (pa->needs_grad) {
            auto bt = detail::transpose2d(pb->data.data(), k, m);
            detail::mm_nn_acc(pa->grad_buffer().data(), gy, bt.data(), n, m, k);
        }
        if (pb->needs_grad)
            detail::mm_tn_acc(pb->grad_buffer().data(), pa->data.data(), gy, n, k, m);
    });
}

// Batched matmul over leading dim: [G,N,K] x [G,K,M] -> [G,N,M].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(0) != b.dim(0) ||
        a.dim(2) != b.dim(1))
        throw ShapeError("bmm", a.shape(), b.shape());
    const std::int64_t g = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
    std::vector<float> out(static_cast<std::size_t>(g * n * m), 0.0f);
    for (std::int64_t s = 0; s < g; ++s)
        detail::mm_nn_acc(out.data() + s * n * m, a.values().data() + s * n * k,
                          b.values().data() + s * k * m, n, k, m);
    auto pa = a.impl(), pb = b.impl();
    return Tensor::from_op({g, n, m}, std::move(out), {a, b},
                           [pa, pb, g, n, k, m](TensorImpl& self) {
        if (self.grad.empty()) return;
        for (std::int64_t s = 0; s < g; ++s) {
            const float* gy = self.grad.data() + s * n * m;
            if (pa->needs_grad) {
                auto bt = detail::transpose2d(pb->data.data() + s * k * m, k, m);
                detail::mm_nn_acc(pa->grad_buffer().data() + s * n * k, gy, bt.data(),
                                  n, m, k);
            }
            if (pb->needs_grad)
                detail::mm_tn_acc(pb->grad_buffer().data() + s * k * m,
                                  pa->data.data() + s * n * k, gy, n, k, m);
        }
    });
}

// Batched matmul with the second operand transposed: [G,N,K] x [G,M,K] -> [G,N,M].
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(0) != b.dim(0) ||
        a.dim(2) != b.dim(2))
        throw ShapeError("bmm_nt", a.shape(), b.shape());
    const std::int64_t g = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(1);
    std::vector<float> out(static_cast<std::size_t>(g * n * m), 0.0f);
    for (std::int64_t s = 0; s < g; ++s) {
        auto bt = detail::transpose2d(b.values().data() + s * m * k, m, k);
        detail::mm_nn_acc(out.data() + s * n * m, a.values().data() + s * n * k,
                          bt.data(), n, k, m);
    }
    auto pa = a.impl(), pb = b.impl();
    return Tensor::from_op({g, n, m}, std::move(out), {a, b},
                           [pa, pb, g, n, k, m](TensorImpl& self) {
        if (self.grad.empty()) return;
        for (std::int64_t s = 0; s < g; ++s) {
            const float* gy = self.grad.data() + s * n * m;
            // dA[g] = gy[g] * B[g]  ([N,M] x [M,K])
            if (pa->needs_grad)
                detail::mm_nn_acc(pa->grad_buffer().data() + s * n * k, gy,
                                  pb->data.data() + s * m * k, n, m, k);
            // dB[g] = gy[g]^T * A[g]  ([M,N] x [N,K])
            if (pb->needs_grad)
                detail::mm_tn_acc(pb->grad_buffer().data() + s * m * k,
                                  gy, pa->data.data() + s * n * k, n, m, k);
        }
    });
}

inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (x.shape().size() != 2 || bias.shape().size() != 1 || x.dim(1) != bias.dim(0))
        throw ShapeError("add_bias", x.shape(), bias.shape());
    const std::int64_t n = x.dim(0), m = x.dim(1);
    std::vector<float> out(x.values().size());
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < m; ++j)
            out[i * m + j] = x.values()[i * m + j] + bias.values()[j];
    auto px = x.impl(), pb = bias.impl();
    return Tensor::from_op(x.shape(), std::move(out), {x, bias},
                           [px, pb, n, m](TensorImpl& self) {
        if (self.grad.empty()) return;
        const float* gy = self.grad.data();
        if (px->needs_grad) {
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
        }
        if (pb->needs_grad) {
            auto& g = pb->grad_buffer();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < m; ++j) g[j] += gy[i * m + j];
        }
    });
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_bias(matmul(x, w), b);
}

// x: [B*R, D], rows: [R, D]; adds rows to every batch replica. Row grads
// accumulate over the batch in replica order.
inline Tensor add_tiled_rows(const Tensor& x, const Tensor& rows, std::int64_t batch) {
    if (x.shape().size() != 2 || rows.shape().size() != 2 || x.dim(1) != rows.dim(1) ||
        batch <= 0 || x.dim(0) != batch * rows.dim(0))
        throw ShapeError("add_tiled_rows", x.shape(), rows.shape());
    const std::int64_t r = rows.dim(0), m = rows.dim(1);
    std::vector<float> out(x.values().size());
    for (std::int64_t b = 0; b < batch; ++b) {
        const float* src = x.values().data() + b * r * m;
        float* dst = out.data() + b * r * m;
        for (std::int64_t i = 0; i < r * m; ++i) dst[i] = src[i] + rows.values()[i];
    }
    auto px = x.impl(), pr = rows.impl();
    return Tensor::from_op(x.shape(), std::move(out), {x, rows},
                           [px, pr, batch, r, m](TensorImpl& self) {
        if (self.grad.empty()) return;
        const float* gy = self.grad.data();
        if (px->needs_grad) {
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
        }
        if (pr->needs_grad) {
            auto& g = pr->grad_buffer();
            for (std::int64_t b = 0; b < batch; ++b) {
                const float* src = gy + b * r * m;
                for (std::int64_t i = 0; i < r * m; ++i) g[i] += src[i];
            }
        }
    });
}

// ---- nonlinearities and normalization ----

inline Tensor gelu(const Tensor& x) {
    std::vector<float> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.values()[i];
        out[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244)));
    }
    auto px = x.impl();
    return Tensor::from_op(x.shape(), std::move(out), {x}, [px](TensorImpl& self) {
        if (self.grad.empty() || !px->needs_grad) return;
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = px->data[i];
            const double d = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244)) +
                             v * 0.3989422804014326779 * std::exp(-0.5 * v * v);
            g[i] += self.grad[i] * static_cast<float>(d);
        }
    });
}

// Row softmax over the last dimension; every leading dimension is a row.
inline Tensor softmax_lastdim(const Tensor& x) {
    if (x.shape().empty()) throw ShapeError("softmax_lastdim", "scalar input");
    const std::int64_t m = x.shape().back();
    const std::int64_t n = x.numel() / m;
    std::vector<float> out(x.values().size());
    for (std::int64_t i = 0; i < n; ++i) {
        const float* row = x.values().data() + i * m;
        float mx = row[0];
        for (std::int64_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < m; ++j) {
            const double e = std::exp(static_cast<double>(row[j]) - mx);
            out[i * m + j] = static_cast<float>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < m; ++j)
            out[i * m + j] = static_cast<float>(out[i * m + j] * inv);
    }
    auto px = x.impl();
    return Tensor::from_op(x.shape(), std::move(out), {x}, [px, n, m](TensorImpl& self) {
        if (self.grad.empty() || !px->needs_grad) return;
        auto& g = px->grad_buffer();
        for (std::int64_t i = 0; i < n; ++i) {
            const float* p = self.data.data() + i * m;
            const float* gy = self.grad.data() + i * m;
            double dot = 0.0;
            for (std::int64_t j = 0; j < m; ++j) dot += static_cast<double>(gy[j]) * p[j];
            for (std::int64_t j = 0; j < m; ++j)
                g[i * m + j] += static_cast<float>(p[j] * (gy[j] - dot));
        }
    });
}

// Per-row normalization with learned scale and shift; statistics accumulate
// in double so row order never affects the result.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         float eps = 1e-5f) {
    if (x.shape().size() != 2) throw ShapeError("layer_norm", "input must be 2-d");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
        throw ShapeError("layer_norm", x.shape(), gamma.shape());
    std::vector<float> out(x.values().size());
    auto mean = std::make_shared<std::vector<double>>(n);
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (std::int64_t i = 0; i < n; ++i) {
        const float* row = x.values().data() + i * d;
        double mu = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*mean)[i] = mu;
        (*inv_std)[i] = inv;
        for (std::int64_t j = 0; j < d; ++j)
            out[i * d + j] = static_cast<float>(
                (row[j] - mu) * inv * gamma.values()[j] + beta.values()[j]);
    }
    auto px = x.impl(), pg = gamma.impl(), pb = beta.impl();
    return Tensor::from_op(x.shape(), std::move(out), {x, gamma, beta},
                           [px, pg, pb, mean, inv_std, n, d](TensorImpl& self) {
        if (self.grad.empty()) return;
        for (std::int64_t i = 0; i < n; ++i) {
            const float* row = px->data.data() + i * d;
            const float* gy = self.grad.data() + i * d;
            const double mu = (*mean)[i], inv = (*inv_std)[i];
            if (px->needs_grad) {
                double s1 = 0.0, s2 = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const double xh = (row[j] - mu) * inv;
                    const double gh = static_cast<double>(gy[j]) * pg->data[j];
                    s1 += gh;
                    s2 += gh * xh;
                }
                auto& g = px->grad_buffer();
                for (std::int64_t j = 0; j < d; ++j) {
                    const double xh = (row[j] - mu) * inv;
                    const double gh = static_cast<double>(gy[j]) * pg->data[j];
                    g[i * d + j] += static_cast<float>(inv * (gh - s1 / d - xh * s2 / d));
                }
            }
            if (pg->needs_grad) {
                auto& g = pg->grad_buffer();
                for (std::int64_t j = 0; j < d; ++j)
                    g[j] += static_cast<float>(gy[j] * (row[j] - mu) * inv);
            }
            if (pb->needs_grad) {
                auto& g = pb->grad_buffer();
                for (std::int64_t j = 0; j < d; ++j) g[j] += gy[j];
            }
        }
    });
}

// ---- shape movement ----

// Gathers rows of a 2-d tensor; duplicate indices accumulate gradient.
inline Tensor take_rows(const Tensor& x, std::vector<std::int64_t> indices) {
    if (x.shape().size() != 2) throw ShapeError("take_rows", "input must be 2-d");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    for (auto idx : indices)
        if (idx < 0 || idx >= n)
            throw ShapeError("take_rows", "index " + std::to_string(idx) +
                                              " out of range for " + shape_str(x.shape()));
    const std::int64_t k = static_cast<std::int64_t>(indices.size());
    std::vector<float> out(static_cast<std::size_t>(k * d));
    for (std::int64_t i = 0; i < k; ++i)
        std::copy_n(x.values().data() + indices[i] * d, d, out.data() + i * d);
    auto px = x.impl();
    auto idx = std::make_shared<std::vector<std::int64_t>>(std::move(indices));
    return Tensor::from_op({k, d}, std::move(out), {x}, [px, idx, d](TensorImpl& self) {
        if (self.grad.empty() || !px->needs_grad) return;
        auto& g = px->grad_buffer();
        for (std::size_t i = 0; i < idx->size(); ++i) {
            const float* gy = self.grad.data() + static_cast<std::int64_t>(i) * d;
            float* dst = g.data() + (*idx)[i] * d;
            for (std::int64_t j = 0; j < d; ++j) dst[j] += gy[j];
        }
    });
}

// [B*T, D] -> [B*H, T, D/H]
inline Tensor split_heads(const Tensor& x, std::int64_t batch, std::int64_t tokens,
                          std::int64_t heads) {
    if (x.shape().size() != 2 || x.dim(0) != batch * tokens || x.dim(1) % heads != 0)
        throw ShapeError("split_heads", "input " + shape_str(x.shape()) +
                                            " incompatible with batch " + std::to_string(batch) +
                                            " tokens " + std::to_string(tokens) + " heads " +
                                            std::to_string(heads));
    const std::int64_t d = x.dim(1), dh = d / heads;
    std::vector<float> out(x.values().size());
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t t = 0; t < tokens; ++t)
            for (std::int64_t h = 0; h < heads; ++h)
                std::copy_n(x.values().data() + (b * tokens + t) * d + h * dh, dh,
                            out.data() + (((b * heads + h) * tokens) + t) * dh);
    auto px = x.impl();
    return Tensor::from_op({batch * heads, tokens, dh}, std::move(out), {x},
                           [px, batch, tokens, heads, d, dh](TensorImpl& self) {
        if (self.grad.empty() || !px->needs_grad) return;
        auto& g = px->grad_buffer();
        for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t t = 0; t < tokens; ++t)
                for (std::int64_t h = 0; h < heads; ++h) {
                    const float* gy =
                        self.grad.data() + (((b * heads + h) * tokens) + t) * dh;
                    float* dst = g.data() + (b * tokens + t) * d + h * dh;
                    for (std::int64_t j = 0; j < dh; ++j) dst[j] += gy[j];
                }
    });
}

// [B*H, T, D/H] -> [B*T, D]
inline Tensor merge_heads(const Tensor& x, std::int64_t batch, std::int64_t tokens,
                          std::int64_t heads) {
    if (x.shape().size() != 3 || x.dim(0) != batch * heads || x.dim(1) != tokens)
        throw ShapeError("merge_heads", "input " + shape_str(x.shape()) +
                                            " incompatible with batch " + std::to_string(batch) +
                                            " tokens " + std::to_string(tokens) + " heads " +
                                            std::to_string(heads));
    const std::int64_t dh = x.dim(2), d = dh * heads;
    std::vector<float> out(x.values().size());
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t t = 0; t < tokens; ++t)
            for (std::int64_t h = 0; h < heads; ++h)
                std::copy_n(x.values().data() + (((b * heads + h) * tokens) + t) * dh, dh,
                            out.data() + (b * tokens + t) * d + h * dh);
    auto px = x.impl();
    return Tensor::from_op({batch * tokens, d}, std::move(out), {x},
                           [px, batch, tokens, heads, d, dh](TensorImpl& self) {
        if (self.grad.empty() || !px->needs_grad) return;
        auto& g = px->grad_buffer();
        for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t t = 0; t < tokens; ++t)
                for (std::int64_t h = 0; h < heads; ++h) {
                    const float* gy = self.grad.data() + (b * tokens + t) * d + h * dh;
                    float* dst = g.data() + (((b * heads + h) * tokens) + t) * dh;
                    for (std::int64_t j = 0; j < dh; ++j) dst[j] += gy[j];
                }
    });
}

// One segment of a token sequence. A shared part holds its rows once and is
// replicated across the batch (its gradient sums over samples); a per-sample
// part holds batch * rows_per_sample rows.
struct TokenPart {
    Tensor t;
    bool shared = false;
};

// Concatenates token segments along the row axis for every sample in the
// batch. All parts are [rows, D]; output is [batch * total_rows, D].
inline Tensor concat_token_batch(const std::vector<TokenPart>& parts,
                                 std::int64_t batch) {
    if (parts.empty()) throw ShapeError("concat_token_batch", "no parts");
    const std::int64_t d = parts[0].t.dim(1);
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.t.shape().size() != 2 || p.t.dim(1) != d)
            throw ShapeError("concat_token_batch", parts[0].t.shape(), p.t.shape());
        if (!p.shared && p.t.dim(0) % batch != 0)
            throw ShapeError("concat_token_batch",
                             "per-sample part rows " + std::to_string(p.t.dim(0)) +
                                 " not divisible by batch " + std::to_string(batch));
        total += p.shared ? p.t.dim(0) : p.t.dim(0) / batch;
    }
    std::vector<float> out(static_cast<std::size_t>(batch * total * d));
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const std::int64_t rows = p.shared ? p.t.dim(0) : p.t.dim(0) / batch;
        for (std::int64_t b = 0; b < batch; ++b) {
            const float* src = p.shared ? p.t.values().data()
                                        : p.t.values().data() + b * rows * d;
            std::copy_n(src, rows * d, out.data() + (b * total + offset) * d);
        }
        offset += rows;
    }
    std::vector<Tensor> tensors;
    std::vector<std::pair<std::shared_ptr<TensorImpl>, bool>> impls;
    for (const auto& p : parts) {
        tensors.push_back(p.t);
        impls.emplace_back(p.t.impl(), p.shared);
    }
    return Tensor::from_op({batch * total, d}, std::move(out), std::move(tensors),
                           [impls, batch, total, d](TensorImpl& self) {
        if (self.grad.empty()) return;
        std::int64_t offset = 0;
        for (const auto& [pi, shared] : impls) {
            const std::int64_t rows = shared ? pi->shape[0] : pi->shape[0] / batch;
            if (pi->needs_grad) {
                auto& g = pi->grad_buffer();
                for (std::int64_t b = 0; b < batch; ++b) {
                    const float* gy = self.grad.data() + (b * total + offset) * d;
                    float* dst = shared ? g.data() : g.data() + b * rows * d;
                    for (std::int64_t j = 0; j < rows * d; ++j) dst[j] += gy[j];
                }
            }
            offset += rows;
        }
    });
}

// Plain row-axis concatenation of 2-d tensors.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    std::vector<TokenPart> tp;
    for (const auto& t : parts) tp.push_back({t, false});
    return concat_token_batch(tp, 1);
}

// ---- similarity and loss ----

// Cosine similarity of every row of f against every row of g: [N,D],[C,D] ->
// [N,C]. Internals run in double and the result is rounded to float once, so
// positive rescaling of any row cannot move the rounded value. Zero-norm rows
// are a hard error rather than a silent epsilon.
inline Tensor cosine_rows(const Tensor& f, const Tensor& g) {
    if (f.shape().size() != 2 || g.shape().size() != 2 || f.dim(1) != g.dim(1))
        throw ShapeError("cosine_rows", f.shape(), g.shape());
    const std::int64_t n = f.dim(0), c = g.dim(0), d = f.dim(1);
    auto row_norms = [d](const std::vector<float>& v, std::int64_t rows,
                         const char* side) {
        std::vector<double> out(rows);
        for (std::int64_t i = 0; i < rows; ++i) {
            double s = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double x = v[i * d + j];
                s += x * x;
            }
            if (s == 0.0)
                throw ShapeError("cosine_rows", std::string("zero-norm ") + side +
                                                    " row " + std::to_string(i));
            out[i] = std::sqrt(s);
        }
        return out;
    };
    auto nf = std::make_shared<std::vector<double>>(row_norms(f.values(), n, "lhs"));
    auto ng = std::make_shared<std::vector<double>>(row_norms(g.values(), c, "rhs"));
    std::vector<float> out(static_cast<std::size_t>(n * c));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            double dot = 0.0;
            for (std::int64_t k = 0; k < d; ++k)
                dot += static_cast<double>(f.values()[i * d + k]) * g.values()[j * d + k];
            const double cosv = std::clamp(dot / ((*nf)[i] * (*ng)[j]), -1.0, 1.0);
            out[i * c + j] = static_cast<float>(cosv);
        }
    auto pf = f.impl(), pg = g.impl();
    return Tensor::from_op({n, c}, std::move(out), {f, g},
                           [pf, pg, nf, ng, n, c, d](TensorImpl& self) {
        if (self.grad.empty()) return;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < c; ++j) {
                const double gy = self.grad[i * c + j];
                if (gy == 0.0) continue;
                const double cosv = self.data[i * c + j];
                const double inv = 1.0 / ((*nf)[i] * (*ng)[j]);
                if (pf->needs_grad) {
                    auto& gf = pf->grad_buffer();
                    const double invf2 = cosv / ((*nf)[i] * (*nf)[i]);
                    for (std::int64_t k = 0; k < d; ++k)
                        gf[i * d + k] += static_cast<float>(
                            gy * (pg->data[j * d + k] * inv - pf->data[i * d + k] * invf2));
                }
                if (pg->needs_grad) {
                    auto& gg = pg->grad_buffer();
                    const double invg2 = cosv / ((*ng)[j] * (*ng)[j]);
                    for (std::int64_t k = 0; k < d; ++k)
                        gg[j * d + k] += static_cast<float>(
                            gy * (pf->data[i * d + k] * inv - pg->data[j * d + k] * invg2));
                }
            }
    });
}

// Mean cross-entropy over rows of logits, fused with log-sum-exp so no
// intermediate probabilities are materialized in the forward value.
inline Tensor cross_entropy_mean(const Tensor& logits,
                                 const std::vector<std::int64_t>& labels) {
    if (logits.shape().size() != 2)
        throw ShapeError("cross_entropy_mean", "logits must be 2-d");
    const std::int64_t n = logits.dim(0), c = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw ShapeError("cross_entropy_mean",
                         "label count " + std::to_string(labels.size()) +
                             " does not match rows " + std::to_string(n));
    for (auto y : labels)
        if (y < 0 || y >= c)
            throw ShapeError("cross_entropy_mean", "label " + std::to_string(y) +
                                                       " out of range for " +
                                                       std::to_string(c) + " classes");
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const float* row = logits.values().data() + i * c;
        float mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < c; ++j)
            sum += std::exp(static_cast<double>(row[j]) - mx);
        total += (mx + std::log(sum)) - row[labels[i]];
    }
    auto pl = logits.impl();
    auto lab = std::make_shared<std::vector<std::int64_t>>(labels);
    return Tensor::from_op({1}, {static_cast<float>(total / n)}, {logits},
                           [pl, lab, n, c](TensorImpl& self) {
        if (self.grad.empty() || !pl->needs_grad) return;
        const double gy = static_cast<double>(self.grad[0]) / n;
        auto& g = pl->grad_buffer();
        for (std::int64_t i = 0; i < n; ++i) {
            const float* row = pl->data.data() + i * c;
            float mx = row[0];
            for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (std::int64_t j = 0; j < c; ++j)
                sum += std::exp(static_cast<double>(row[j]) - mx);
            const double inv = 1.0 / sum;
            for (std::int64_t j = 0; j < c; ++j) {
                const double p = std::exp(static_cast<double>(row[j]) - mx) * inv;
                g[i * c + j] += static_cast<float>(gy * (p - ((*lab)[i] == j ? 1.0 : 0.0)));
            }
        }
    });
}

} // namespace sprompts::gradcore
