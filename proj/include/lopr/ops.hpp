// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lopr/autograd.hpp"
#include "lopr/kernels.hpp"
#include "lopr/tensor.hpp"

namespace lopr {

namespace detail {

template <typename S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
    if (!(a.value().shape() == b.value().shape())) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

inline std::int64_t leading_rows(const Shape& shape, int trailing_dims) {
    std::int64_t rows = 1;
    for (std::size_t i = 0; i + trailing_dims < shape.size(); ++i) {
        rows *= shape[i];
    }
    return rows;
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<S> out(a.shape());
    const S* pa = a.value().data();
    const S* pb = b.value().data();
    S* po = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = pa[i] + pb[i];
    }
    return detail::make_op<S>("add", std::move(out), {a, b}, [](Node<S>& self) {
        for (int which = 0; which < 2; ++which) {
            Node<S>& p = *self.parents[which];
            if (p.requires_grad) {
                detail::accumulate(p, self.grad);
            }
        }
    });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<S> out(a.shape());
    const S* pa = a.value().data();
    const S* pb = b.value().data();
    S* po = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = pa[i] * pb[i];
    }
    return detail::make_op<S>("mul", std::move(out), {a, b}, [](Node<S>& self) {
        const std::int64_t n = self.value.numel();
        for (int which = 0; which < 2; ++which) {
            Node<S>& p = *self.parents[which];
            if (!p.requires_grad) {
                continue;
            }
            const S* other = self.parents[1 - which]->value.data();
            S* dst = p.ensure_grad().data();
            const S* g = self.grad.data();
            for (std::int64_t i = 0; i < n; ++i) {
                dst[i] += g[i] * other[i];
            }
        }
    });
}

template <typename S>
Var<S> scale(const Var<S>& x, S c) {
    Tensor<S> out(x.shape());
    const S* px = x.value().data();
    S* po = out.data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = c * px[i];
    }
    return detail::make_op<S>("scale", std::move(out), {x}, [c](Node<S>& self) {
        Node<S>& p = *self.parents[0];
        if (!p.requires_grad) {
            return;
        }
        S* dst = p.ensure_grad().data();
        const S* g = self.grad.data();
        const std::int64_t n = self.value.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            dst[i] += c * g[i];
        }
    });
}

// bias over the last dimension, broadcast across leading dims
template <typename S>
Var<S> add_bias(const Var<S>& x, const Var<S>& b) {
    const int d = x.shape().back();
    if (b.value().rank() != 1 || b.shape()[0] != d) {
        throw ShapeError("add_bias: bias shape " + shape_str(b.shape()) + " does not match last dim of " +
                         shape_str(x.shape()));
    }
    Tensor<S> out(x.shape());
    const std::int64_t rows = detail::leading_rows(x.shape(), 1);
    const S* px = x.value().data();
    const S* pb = b.value().data();
    S* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int j = 0; j < d; ++j) {
            po[r * d + j] = px[r * d + j] + pb[j];
        }
    }
    return detail::make_op<S>("add_bias", std::move(out), {x, b}, [d, rows](Node<S>& self) {
        const S* g = self.grad.data();
        Node<S>& px = *self.parents[0];
        if (px.requires_grad) {
            detail::accumulate(px, self.grad);
        }
        Node<S>& pb = *self.parents[1];
        if (pb.requires_grad) {
            S* db = pb.ensure_grad().data();
            for (std::int64_t r = 0; r < rows; ++r) {
                for (int j = 0; j < d; ++j) {
                    db[j] += g[r * d + j];
                }
            }
        }
    });
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
    Tensor<S> out(x.shape());
    const S* px = x.value().data();
    S* po = out.data();
    const std::int64_t n = out.numel();
    const S inv_sqrt2 = S(0.70710678118654752440);
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = S(0.5) * px[i] * (S(1) + kern::fast_erf(px[i] * inv_sqrt2));
    }
    return detail::make_op<S>("gelu", std::move(out), {x}, [](Node<S>& self) {
        Node<S>& p = *self.parents[0];
        if (!p.requires_grad) {
            return;
        }
        const S inv_sqrt2 = S(0.70710678118654752440);
        const S inv_sqrt2pi = S(0.39894228040143267794);
        const S* xv = p.value.data();
        const S* g = self.grad.data();
        S* dst = p.ensure_grad().data();
        const std::int64_t n = self.value.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const S cdf = S(0.5) * (S(1) + kern::fast_erf(xv[i] * inv_sqrt2));
            const S pdf = inv_sqrt2pi * kern::fast_exp(S(-0.5) * xv[i] * xv[i]);
            dst[i] += g[i] * (cdf + xv[i] * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum_all(const Var<S>& x) {
    S acc = S(0);
    const S* px = x.value().data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        acc += px[i];
    }
    return detail::make_op<S>("sum", Tensor<S>::scalar(acc), {x}, [](Node<S>& self) {
        Node<S>& p = *self.parents[0];
        if (!p.requires_grad) {
            return;
        }
        const S g = self.grad[0];
        S* dst = p.ensure_grad().data();
        const std::int64_t n = p.value.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            dst[i] += g;
        }
    });
}

template <typename S>
Var<S> mean_all(const Var<S>& x) {
    return scale(sum_all(x), S(1) / static_cast<S>(x.numel()));
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

// plain 2-d product: [m,k] x [k,n] -> [m,n]
template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor<S> out({m, n});
    kern::gemm_nn(a.value().data(), b.value().data(), out.data(), m, n, k);
    return detail::make_op<S>("matmul", std::move(out), {a, b}, [m, n, k](Node<S>& self) {
        Node<S>& pa = *self.parents[0];
        Node<S>& pb = *self.parents[1];
        const S* g = self.grad.data();
        if (pa.requires_grad) {
            // dA = dY * B^T
            kern::gemm_nt(g, pb.value.data(), pa.ensure_grad().data(), m, k, n, /*accumulate=*/true);
        }
        if (pb.requires_grad) {
            // dB = A^T * dY
            kern::gemm_tn(pa.value.data(), g, pb.ensure_grad().data(), m, n, k, /*accumulate=*/true);
        }
    });
}

// dense layer product: x [..., k] times w [n, k] -> [..., n]
template <typename S>
Var<S> linear_nt(const Var<S>& x, const Var<S>& w) {
    const int k = x.shape().back();
    if (w.value().rank() != 2 || w.shape()[1] != k) {
        throw ShapeError("linear: weight " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()));
    }
    const int n = w.shape()[0];
    const std::int64_t rows = detail::leading_rows(x.shape(), 1);
    Shape out_shape = x.shape();
    out_shape.back() = n;
    Tensor<S> out(std::move(out_shape));
    kern::gemm_nt(x.value().data(), w.value().data(), out.data(), static_cast<int>(rows), n, k);
    return detail::make_op<S>("linear", std::move(out), {x, w}, [rows, n, k](Node<S>& self) {
        Node<S>& px = *self.parents[0];
        Node<S>& pw = *self.parents[1];
        const S* g = self.grad.data();
        if (px.requires_grad) {
            // dX = dY * W
            kern::gemm_nn(g, pw.value.data(), px.ensure_grad().data(), static_cast<int>(rows), k, n,
                          /*accumulate=*/true);
        }
        if (pw.requires_grad) {
            // dW[n,k] = dY^T * X
            kern::gemm_tn(g, px.value.data(), pw.ensure_grad().data(), static_cast<int>(rows), k, n,
                          /*accumulate=*/true);
        }
    });
}

namespace detail {
template <typename S>
void require_bmm_compatible(const Var<S>& a, const Var<S>& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != sb.size() || sa.size() < 2) {
        throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    }
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) {
        if (sa[i] != sb[i]) {
            throw ShapeError(std::string(op) + ": leading dims differ " + shape_str(sa) + " vs " +
                             shape_str(sb));
        }
    }
}
} // namespace detail

// grouped product: a [..., m, k] x b [..., n, k] -> [..., m, n]
template <typename S>
Var<S> bmm_nt(const Var<S>& a, const Var<S>& b) {
    detail::require_bmm_compatible(a, b, "bmm_nt");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const int m = sa[sa.size() - 2], k = sa.back(), n = sb[sb.size() - 2];
    if (sb.back() != k) {
        throw ShapeError("bmm_nt: inner dims differ " + shape_str(sa) + " vs " + shape_str(sb));
    }
    const std::int64_t groups = detail::leading_rows(sa, 2);
    Shape out_shape(sa.begin(), sa.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<S> out(std::move(out_shape));
    for (std::int64_t gix = 0; gix < groups; ++gix) {
        kern::gemm_nt(a.value().data() + gix * m * k, b.value().data() + gix * n * k,
                      out.data() + gix * m * n, m, n, k);
    }
    return detail::make_op<S>("bmm_nt", std::move(out), {a, b}, [groups, m, n, k](Node<S>& self) {
        Node<S>& pa = *self.parents[0];
        Node<S>& pb = *self.parents[1];
        const S* g = self.grad.data();
        if (pa.requires_grad) {
            S* da = pa.ensure_grad().data();
            for (std::int64_t gix = 0; gix < groups; ++gix) {
                // dA = dY * B
                kern::gemm_nn(g + gix * m * n, pb.value.data() + gix * n * k, da + gix * m * k, m, k, n,
                              /*accumulate=*/true);
            }
        }
        if (pb.requires_grad) {
            S* db = pb.ensure_grad().data();
            for (std::int64_t gix = 0; gix < groups; ++gix) {
                // dB[n,k] = dY^T * A
                kern::gemm_tn(g + gix * m * n, pa.value.data() + gix * m * k, db + gix * n * k, m, k, n,
                              /*accumulate=*/true);
            }
        }
    });
}

// grouped product: a [..., m, k] x b [..., k, n] -> [..., m, n]
template <typename S>
Var<S> bmm_nn(const Var<S>& a, const Var<S>& b) {
    detail::require_bmm_compatible(a, b, "bmm_nn");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const int m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
    if (sb[sb.size() - 2] != k) {
        throw ShapeError("bmm_nn: inner dims differ " + shape_str(sa) + " vs " + shape_str(sb));
    }
    const std::int64_t groups = detail::leading_rows(sa, 2);
    Shape out_shape(sa.begin(), sa.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<S> out(std::move(out_shape));
    for (std::int64_t gix = 0; gix < groups; ++gix) {
        kern::gemm_nn(a.value().data() + gix * m * k, b.value().data() + gix * k * n,
                      out.data() + gix * m * n, m, n, k);
    }
    return detail::make_op<S>("bmm_nn", std::move(out), {a, b}, [groups, m, n, k](Node<S>& self) {
        Node<S>& pa = *self.parents[0];
        Node<S>& pb = *self.parents[1];
        const S* g = self.grad.data();
        if (pa.requires_grad) {
            S* da = pa.ensure_grad().data();
            for (std::int64_t gix = 0; gix < groups; ++gix) {
                // dA = dY * B^T
                kern::gemm_nt(g + gix * m * n, pb.value.data() + gix * k * n, da + gix * m * k, m, k, n,
                              /*accumulate=*/true);
            }
        }
        if (pb.requires_grad) {
            S* db = pb.ensure_grad().data();
            for (std::int64_t gix = 0; gix < groups; ++gix) {
                // dB = A^T * dY
                kern::gemm_tn(pa.value.data() + gix * m * k, g + gix * m * n, db + gix * k * n, m, n, k,
                              /*accumulate=*/true);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// shape movement
// ---------------------------------------------------------------------------

template <typename S>
Var<S> reshape(const Var<S>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel()) {
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(new_shape));
    }
    Tensor<S> out(std::move(new_shape), x.value().vec());
    return detail::make_op<S>("reshape", std::move(out), {x}, [](Node<S>& self) {
        Node<S>& p = *self.parents[0];
        if (p.requires_grad) {
            detail::accumulate(p, self.grad);
        }
    });
}

// [B, L, d] -> [B, h, L, d/h]
template <typename S>
Var<S> split_heads(const Var<S>& x, int heads) {
    if (x.value().rank() != 3 || x.shape()[2] % heads != 0) {
        throw ShapeError("split_heads: bad input " + shape_str(x.shape()));
    }
    const int B = x.shape()[0], L = x.shape()[1], d = x.shape()[2], dh = d / heads;
    Tensor<S> out({B, heads, L, dh});
    const S* px = x.value().data();
    S* po = out.data();
    for (int b = 0; b < B; ++b) {
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < heads; ++h) {
                const S* src = px + (static_cast<std::int64_t>(b) * L + l) * d + h * dh;
                S* dst = po + ((static_cast<std::int64_t>(b) * heads + h) * L + l) * dh;
                std::copy(src, src + dh, dst);
            }
        }
    }
    return detail::make_op<S>("split_heads", std::move(out), {x}, [B, L, heads, dh, d](Node<S>& self) {
        Node<S>& p = *self.parents[0];
        if (!p.requires_grad) {
            return;
        }
        const S* g = self.grad.data();
        S* dst = p.ensure_grad().data();
        for (int b = 0; b < B; ++b) {
            for (int l = 0; l < L; ++l) {
                for (int h = 0; h < heads; ++h) {
                    const S* src = g + ((static_cast<std::int64_t>(b) * heads + h) * L + l) * dh;
                    S* d0 = dst + (static_cast<std::int64_t>(b) * L + l) * d + h * dh;
                    for (int e = 0; e < dh; ++e) {
                        d0[e] += src[e];
                    }
                }
            }
        }
    });
}

// [B, h, L, dh] -> [B, L, h*dh]
template <typename S>
Var<S> merge_heads(const Var<S>& x) {
    if (x.value().rank() != 4) {
        throw ShapeError("merge_heads: bad input " + shape_str(x.shape()));
    }
    const int B = x.shape()[0], heads = x.shape()[1], L = x.shape()[2], dh = x.shape()[3];
    const int d = heads * dh;
    Tensor<S> out({B, L, d});
    const S* px = x.value().data();
    S* po = out.data();
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < heads; ++h) {
            for (int l = 0; l < L; ++l) {
                const S* src = px + ((static_cast<std::int64_t>(b) * heads + h) * L + l) * dh;
                S* dst = po + (static_cast<std::int64_t>(b) * L + l) * d + h * dh;
                std::copy(src, src + dh, dst);
            }
        }
    }
    return detail::make_op<S>("merge_heads", std::move(out), {x}, [B, L, heads, dh, d](Node<S>& self) {
        Node<S>& p = *self.parents[0];
        if (!p.requires_grad) {
            return;
        }
        const S* g = self.grad.data();
        S* dst = p.ensure_grad().data();
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < heads; ++h) {
                for (int l = 0; l < L; ++l) {
                    const S* src = g + (static_cast<std::int64_t>(b) * L + l) * d + h * dh;
                    S* d0 = dst + ((static_cast<std::int64_t>(b) * heads + h) * L + l) * dh;
                    for (int e = 0; e < dh; ++e) {
                        d0[e] += src[e];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// softmax / normalization
// ---------------------------------------------------------------------------

namespace detail {
// softmax over x[0:len) with max subtraction; zeros x[len:width)
template <typename S>
void row_softmax(const S* x, S* out, int len, int width) {
    S mx = x[0];
    for (int j = 1; j < len; ++j) {
        mx = std::max(mx, x[j]);
    }
    S sum = S(0);
    for (int j = 0; j < len; ++j) {
        out[j] = kern::fast_exp(x[j] - mx);
        sum += out[j];
    }
    const S inv = S(1) / sum;
    for (int j = 0; j < len; ++j) {
        out[j] *= inv;
    }
    for (int j = len; j < width; ++j) {
        out[j] = S(0);
    }
}

// dx = p .* (dy - sum(dy .* p)) over the first len entries
template <typename S>
void row_softmax_backward(const S* p, const S* dy, S* dx, int len) {
    S dot = S(0);
    for (int j = 0; j < len; ++j) {
        dot += dy[j] * p[j];
    }
    for (int j = 0; j < len; ++j) {
        dx[j] += p[j] * (dy[j] - dot);
    }
}
} // namespace detail

template <typename S>
Var<S> softmax_lastdim(const Var<S>& x) {
    const int d = x.shape().back();
    const std::int64_t rows = detail::leading_rows(x.shape(), 1);
    Tensor<S> out(x.shape());
    const S* px = x.value().data();
    S* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        detail::row_softmax(px + r * d, po + r * d, d, d);
    }
    return detail::make_op<S>("softmax", std::move(out), {x}, [rows, d](Node<S>& self) {
        Node<S>& p = *self.parents[0];
        if (!p.requires_grad) {
            return;
        }
        const S* prob = self.value.data();
        const S* g = self.grad.data();
        S* dst = p.ensure_grad().data();
        for (std::int64_t r = 0; r < rows; ++r) {
            detail::row_softmax_backward(prob + r * d, g + r * d, dst + r * d, d);
        }
    });
}

// Attention mask. Valid keys form a contiguous prefix per row: right-padded
// sources plus an optional causal bound. Query rows past query_len are dead
// (padding); their outputs are zeroed and never reach the loss. Not a
// differentiable input.
struct AttnMask {
    std::vector<int> key_len;   // per-batch valid key prefix; empty = all keys
    std::vector<int> query_len; // per-batch live query rows; empty = all rows
    bool causal = false;
    int causal_offset = 0; // query row i attends keys j <= i + offset

    int allowed(int b, int row, int total_keys) const {
        int len = total_keys;
        if (!key_len.empty()) {
            len = std::min(len, key_len[static_cast<std::size_t>(b)]);
        }
        if (causal) {
            len = std::min(len, row + 1 + causal_offset);
        }
        return len;
    }

    int live_rows(int b, int total_rows) const {
        if (query_len.empty()) {
            return total_rows;
        }
        return std::min(total_rows, query_len[static_cast<std::size_t>(b)]);
    }
};

// softmax over the allowed key prefix of scores [B, h, Lq, Lk];
// masked positions get exactly zero weight and are never read.
template <typename S>
Var<S> attention_softmax(const Var<S>& x, AttnMask mask) {
    if (x.value().rank() != 4) {
        throw ShapeError("attention_softmax: expected rank-4 scores, got " + shape_str(x.shape()));
    }
    const int B = x.shape()[0], H = x.shape()[1], Lq = x.shape()[2], Lk = x.shape()[3];
    if (!mask.key_len.empty() && static_cast<int>(mask.key_len.size()) != B) {
        throw ShapeError("attention_softmax: key_len size does not match batch");
    }
    Tensor<S> out(x.shape());
    const S* px = x.value().data();
    S* po = out.data();
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < Lq; ++i) {
                const int len = mask.allowed(b, i, Lk);
                if (len < 1) {
                    throw ShapeError("attention_softmax: empty attention row");
                }
                const std::int64_t off = ((static_cast<std::int64_t>(b) * H + h) * Lq + i) * Lk;
                detail::row_softmax(px + off, po + off, len, Lk);
            }
        }
    }
    return detail::make_op<S>(
        "attention_softmax", std::move(out), {x}, [B, H, Lq, Lk, mask](Node<S>& self) {
            Node<S>& p = *self.parents[0];
            if (!p.requires_grad) {
                return;
            }
            const S* prob = self.value.data();
            const S* g = self.grad.data();
            S* dst = p.ensure_grad().data();
            for (int b = 0; b < B; ++b) {
                for (int h = 0; h < H; ++h) {
                    for (int i = 0; i < Lq; ++i) {
                        const int len = mask.allowed(b, i, Lk);
                        const std::int64_t off = ((static_cast<std::int64_t>(b) * H + h) * Lq + i) * Lk;
                        detail::row_softmax_backward(prob + off, g + off, dst + off, len);
                    }
                }
            }
        });
}

// Multi-head scaled dot-product attention in one op: q [B,Lq,d] against
// k/v [B,Lk,d] with `heads` slices of width d/heads. Masked keys are never
// read, dead query rows produce zeros, and softmax weights are cached for
// the backward sweep. Scale is 1/sqrt(d/heads).
template <typename S>
Var<S> fused_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads, AttnMask mask) {
    if (q.value().rank() != 3 || k.value().rank() != 3 || v.value().rank() != 3) {
        throw ShapeError("attention: q/k/v must be rank 3");
    }
    const int B = q.shape()[0], Lq = q.shape()[1], d = q.shape()[2];
    const int Lk = k.shape()[1];
    if (k.shape()[0] != B || v.shape()[0] != B || k.shape()[2] != d || v.shape()[2] != d ||
        v.shape()[1] != Lk) {
        throw ShapeError("attention: shape mismatch q=" + shape_str(q.shape()) + " k=" +
                         shape_str(k.shape()) + " v=" + shape_str(v.shape()));
    }
    if (heads < 1 || d % heads != 0) {
        throw ShapeError("attention: head count must divide the model width");
    }
    if (!mask.key_len.empty() && static_cast<int>(mask.key_len.size()) != B) {
        throw ShapeError("attention: key_len size does not match batch");
    }
    if (!mask.query_len.empty() && static_cast<int>(mask.query_len.size()) != B) {
        throw ShapeError("attention: query_len size does not match batch");
    }
    const int dh = d / heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));

    // allowed() is non-decreasing in the row index, so checking row 0 of
    // every live batch item validates the whole mask before going parallel
    for (int b = 0; b < B; ++b) {
        if (mask.live_rows(b, Lq) > 0 && mask.allowed(b, 0, Lk) < 1) {
            throw ShapeError("attention: empty attention row");
        }
    }
    Tensor<S> out({B, Lq, d}, S(0));
    Tensor<S> probs({B, heads, Lq, Lk}, S(0));
    const S* pq = q.value().data();
    const S* pk = k.value().data();
    const S* pv = v.value().data();
    S* po = out.data();
    S* pp = probs.data();
    kern::parallel_ranges(B, 1, [&](std::int64_t b0, std::int64_t b1) {
        std::vector<S> srow(static_cast<std::size_t>(Lk));
        for (std::int64_t b = b0; b < b1; ++b) {
            const int rows = mask.live_rows(static_cast<int>(b), Lq);
            for (int h = 0; h < heads; ++h) {
                const int off = h * dh;
                for (int i = 0; i < rows; ++i) {
                    const int la = mask.allowed(static_cast<int>(b), i, Lk);
                    const S* qrow = pq + (b * Lq + i) * d + off;
                    for (int j = 0; j < la; ++j) {
                        srow[static_cast<std::size_t>(j)] =
                            kern::dot(qrow, pk + (b * Lk + j) * d + off, dh) * scale;
                    }
                    S* prow = pp + ((b * heads + h) * Lq + i) * Lk;
                    detail::row_softmax(srow.data(), prow, la, la);
                    S* orow = po + (b * Lq + i) * d + off;
                    for (int j = 0; j < la; ++j) {
                        const S w = prow[j];
                        const S* vrow = pv + (b * Lk + j) * d + off;
                        for (int e = 0; e < dh; ++e) {
                            orow[e] += w * vrow[e];
                        }
                    }
                }
            }
        }
    });
    return detail::make_op<S>(
        "attention", std::move(out), {q, k, v},
        [B, Lq, Lk, d, dh, heads, scale, mask, probs = std::move(probs)](Node<S>& self) {
            Node<S>& nq = *self.parents[0];
            Node<S>& nk = *self.parents[1];
            Node<S>& nv = *self.parents[2];
            const bool need_q = nq.requires_grad;
            const bool need_k = nk.requires_grad;
            const bool need_v = nv.requires_grad;
            const S* pq = nq.value.data();
            const S* pk = nk.value.data();
            const S* pv = nv.value.data();
            S* dq = need_q ? nq.ensure_grad().data() : nullptr;
            S* dk = need_k ? nk.ensure_grad().data() : nullptr;
            S* dv = need_v ? nv.ensure_grad().data() : nullptr;
            const S* g = self.grad.data();
            const S* pp = probs.data();
            kern::parallel_ranges(B, 1, [&](std::int64_t b0, std::int64_t b1) {
                std::vector<S> dprow(static_cast<std::size_t>(Lk));
                for (std::int64_t b = b0; b < b1; ++b) {
                    const int rows = mask.live_rows(static_cast<int>(b), Lq);
                    for (int h = 0; h < heads; ++h) {
                        const int off = h * dh;
                        for (int i = 0; i < rows; ++i) {
                            const int la = mask.allowed(static_cast<int>(b), i, Lk);
                            const S* grow = g + (b * Lq + i) * d + off;
                            const S* prow = pp + ((b * heads + h) * Lq + i) * Lk;
                            // dp_j = dot(dout, v_j); dv_j += p_j * dout
                            for (int j = 0; j < la; ++j) {
                                const std::int64_t voff = (b * Lk + j) * d + off;
                                dprow[static_cast<std::size_t>(j)] = kern::dot(grow, pv + voff, dh);
                                if (need_v) {
                                    const S w = prow[j];
                                    S* dvrow = dv + voff;
                                    for (int e = 0; e < dh; ++e) {
                                        dvrow[e] += w * grow[e];
                                    }
                                }
                            }
                            if (!need_q && !need_k) {
                                continue;
                            }
                            // softmax backward on the allowed prefix
                            S mix = S(0);
                            for (int j = 0; j < la; ++j) {
                                mix += dprow[static_cast<std::size_t>(j)] * prow[j];
                            }
                            const S* qrow = pq + (b * Lq + i) * d + off;
                            S* dqrow = need_q ? dq + (b * Lq + i) * d + off : nullptr;
                            for (int j = 0; j < la; ++j) {
                                const S ds =
                                    prow[j] * (dprow[static_cast<std::size_t>(j)] - mix) * scale;
                                const std::int64_t koff = (b * Lk + j) * d + off;
                                if (need_q) {
                                    const S* krow = pk + koff;
                                    for (int e = 0; e < dh; ++e) {
                                        dqrow[e] += ds * krow[e];
                                    }
                                }
                                if (need_k) {
                                    S* dkrow = dk + koff;
                                    for (int e = 0; e < dh; ++e) {
                                        dkrow[e] += ds * qrow[e];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        });
}

// layer normalization over the last dimension; epsilon inside the sqrt
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps) {
    const int d = x.shape().back();
    if (gamma.value().rank() != 1 || gamma.shape()[0] != d || beta.value().rank() != 1 ||
        beta.shape()[0] != d) {
        throw ShapeError("layer_norm: affine shape mismatch for input " + shape_str(x.shape()));
    }
    const std::int64_t rows = detail::leading_rows(x.shape(), 1);
    Tensor<S> out(x.shape());
    Tensor<S> xhat(x.shape());
    Tensor<S> inv_std({static_cast<int>(rows)});
    const S* px = x.value().data();
    const S* pg = gamma.value().data();
    const S* pb = beta.value().data();
    S* po = out.data();
    S* ph = xhat.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = px + r * d;
        S mean = S(0);
        for (int j = 0; j < d; ++j) {
            mean += row[j];
        }
        mean /= static_cast<S>(d);
        S var = S(0);
        for (int j = 0; j < d; ++j) {
            const S c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S inv = S(1) / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (int j = 0; j < d; ++j) {
            ph[r * d + j] = (row[j] - mean) * inv;
            po[r * d + j] = pg[j] * ph[r * d + j] + pb[j];
        }
    }
    return detail::make_op<S>(
        "layer_norm", std::move(out), {x, gamma, beta},
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& self) {
            Node<S>& px = *self.parents[0];
            Node<S>& pg = *self.parents[1];
            Node<S>& pb = *self.parents[2];
            const S* g = self.grad.data();
            const S* gam = pg.value.data();
            const S* h = xhat.data();
            if (pg.requires_grad) {
                S* dg = pg.ensure_grad().data();
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (int j = 0; j < d; ++j) {
                        dg[j] += g[r * d + j] * h[r * d + j];
                    }
                }
            }
            if (pb.requires_grad) {
                S* db = pb.ensure_grad().data();
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (int j = 0; j < d; ++j) {
                        db[j] += g[r * d + j];
                    }
                }
            }
            if (px.requires_grad) {
                S* dx = px.ensure_grad().data();
                for (std::int64_t r = 0; r < rows; ++r) {
                    S mean_gy = S(0), mean_gyh = S(0);
                    for (int j = 0; j < d; ++j) {
                        const S gy = g[r * d + j] * gam[j];
                        mean_gy += gy;
                        mean_gyh += gy * h[r * d + j];
                    }
                    mean_gy /= static_cast<S>(d);
                    mean_gyh /= static_cast<S>(d);
                    for (int j = 0; j < d; ++j) {
                        const S gy = g[r * d + j] * gam[j];
                        dx[r * d + j] += inv_std[r] * (gy - mean_gy - h[r * d + j] * mean_gyh);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// embeddings and loss
// ---------------------------------------------------------------------------

// table [V, d] gathered by ids [rows, cols] -> [rows, cols, d]
template <typename S>
Var<S> embedding(const Var<S>& table, const IdMatrix& ids) {
    if (table.value().rank() != 2) {
        throw ShapeError("embedding: table must be rank 2");
    }
    const int V = table.shape()[0], d = table.shape()[1];
    Tensor<S> out({ids.rows, ids.cols, d});
    const S* pt = table.value().data();
    S* po = out.data();
    for (int r = 0; r < ids.rows; ++r) {
        for (int c = 0; c < ids.cols; ++c) {
            const int id = ids.at(r, c);
            if (id < 0 || id >= V) {
                throw ShapeError("embedding: id " + std::to_string(id) + " out of range [0," +
                                 std::to_string(V) + ")");
            }
            const S* src = pt + static_cast<std::int64_t>(id) * d;
            std::copy(src, src + d, po + (static_cast<std::int64_t>(r) * ids.cols + c) * d);
        }
    }
    return detail::make_op<S>("embedding", std::move(out), {table}, [ids, d](Node<S>& self) {
        Node<S>& p = *self.parents[0];
        if (!p.requires_grad) {
            return;
        }
        const S* g = self.grad.data();
        S* dst = p.ensure_grad().data();
        for (int r = 0; r < ids.rows; ++r) {
            for (int c = 0; c < ids.cols; ++c) {
                const int id = ids.at(r, c);
                const S* src = g + (static_cast<std::int64_t>(r) * ids.cols + c) * d;
                S* row = dst + static_cast<std::int64_t>(id) * d;
                for (int j = 0; j < d; ++j) {
                    row[j] += src[j];
                }
            }
        }
    });
}

// mean token-level cross-entropy over non-pad target positions;
// logits [B, T, V], targets [B, T]; pad_id < 0 disables padding
template <typename S>
Var<S> cross_entropy_mean(const Var<S>& logits, const IdMatrix& targets, int pad_id) {
    if (logits.value().rank() != 3) {
        throw ShapeError("cross_entropy: logits must be [batch, len, vocab]");
    }
    const int B = logits.shape()[0], T = logits.shape()[1], V = logits.shape()[2];
    if (targets.rows != B || targets.cols != T) {
        throw ShapeError("cross_entropy: target matrix does not match logits");
    }
    std::int64_t count = 0;
    S loss = S(0);
    const S* pl = logits.value().data();
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < T; ++t) {
            const int tgt = targets.at(b, t);
            if (tgt == pad_id) {
                continue;
            }
            if (tgt < 0 || tgt >= V) {
                throw ShapeError("cross_entropy: target id " + std::to_string(tgt) + " out of range");
            }
            const S* row = pl + (static_cast<std::int64_t>(b) * T + t) * V;
            S mx = row[0];
            for (int v = 1; v < V; ++v) {
                mx = std::max(mx, row[v]);
            }
            S sum = S(0);
            for (int v = 0; v < V; ++v) {
                sum += std::exp(row[v] - mx);
            }
            loss += (mx + std::log(sum)) - row[tgt];
            ++count;
        }
    }
    if (count == 0) {
        throw ConfigError("cross_entropy: every target position is padding");
    }
    loss /= static_cast<S>(count);
    return detail::make_op<S>(
        "cross_entropy", Tensor<S>::scalar(loss), {logits}, [targets, pad_id, B, T, V, count](Node<S>& self) {
            Node<S>& p = *self.parents[0];
            if (!p.requires_grad) {
                return;
            }
            const S g = self.grad[0] / static_cast<S>(count);
            const S* pl = p.value.data();
            S* dst = p.ensure_grad().data();
            for (int b = 0; b < B; ++b) {
                for (int t = 0; t < T; ++t) {
                    const int tgt = targets.at(b, t);
                    if (tgt == pad_id) {
                        continue;
                    }
                    const std::int64_t off = (static_cast<std::int64_t>(b) * T + t) * V;
                    const S* row = pl + off;
                    S mx = row[0];
                    for (int v = 1; v < V; ++v) {
                        mx = std::max(mx, row[v]);
                    }
                    S sum = S(0);
                    for (int v = 0; v < V; ++v) {
                        sum += std::exp(row[v] - mx);
                    }
                    const S inv = S(1) / sum;
                    for (int v = 0; v < V; ++v) {
                        const S prob = std::exp(row[v] - mx) * inv;
                        dst[off + v] += g * (prob - (v == tgt ? S(1) : S(0)));
                    }
                }
            }
        });
}

} // namespace lopr
