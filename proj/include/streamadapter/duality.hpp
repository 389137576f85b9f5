// Numerical check of the exact identity between single-head linear-attention
// in-context conditioning and an additive weight update, plus its fine-tuning
// dual form. Test/diagnostic only; not on any inference path.

#pragma once

#include <vector>

#include "streamadapter/tensor.hpp"

namespace streamadapter {

struct LinearAttnLayer {
    Tensor w_q, w_k, w_v;  // [d x d], single head, no softmax, no scaling

    static LinearAttnLayer random(int d, std::mt19937_64& rng) {
        LinearAttnLayer l;
        l.w_q = Tensor::randn({d, d}, rng, 1.0);
        l.w_k = Tensor::randn({d, d}, rng, 1.0);
        l.w_v = Tensor::randn({d, d}, rng, 1.0);
        return l;
    }
};

struct FinetuneDelta {
    Tensor dw_k, dw_v;  // [d x d]
};

struct TwoForms {
    Tensor lhs;  // [d x 1]
    Tensor rhs;
    double max_abs_diff = 0.0;
};

namespace detail {
inline double max_abs_diff_of(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}
}  // namespace detail

// Columns convention: x_i is [d x 1], context rows X' are [m x d].
// lhs evaluates W_v [X', x_i] (W_k [X', x_i])^T W_q x_i directly; rhs evaluates
// (W_0 + dW_icl) W_q x_i with W_0 = W_v x_i (W_k x_i)^T and
// dW_icl = (W_v X'^T)(W_k X'^T)^T.
inline TwoForms icl_two_forms(const Tensor& x_i, const Tensor& ctx, const LinearAttnLayer& layer) {
    int d = layer.w_q.dim(0);
    if (x_i.ndim() != 2 || x_i.dim(0) != d || x_i.dim(1) != 1)
        throw std::invalid_argument("icl_two_forms: x_i must be [d x 1]");
    int m = ctx.defined() ? ctx.dim(0) : 0;
    if (m > 0 && ctx.dim(1) != d) throw std::invalid_argument("icl_two_forms: context must be [m x d]");

    Tensor q = matmul(layer.w_q, x_i);  // [d x 1]

    // direct form over the concatenated sequence [X', x_i]
    Tensor keys_seq, vals_seq;  // [d x (m+1)]
    {
        Tensor kx = matmul(layer.w_k, x_i), vx = matmul(layer.w_v, x_i);
        if (m > 0) {
            Tensor ctx_t = transpose(ctx);  // [d x m]
            keys_seq = concat_cols({matmul(layer.w_k, ctx_t), kx});
            vals_seq = concat_cols({matmul(layer.w_v, ctx_t), vx});
        } else {
            keys_seq = kx;
            vals_seq = vx;
        }
    }
    TwoForms out;
    out.lhs = matmul(vals_seq, matmul(transpose(keys_seq), q));

    Tensor w0 = matmul(matmul(layer.w_v, x_i), transpose(matmul(layer.w_k, x_i)));
    Tensor total = w0;
    if (m > 0) {
        Tensor ctx_t = transpose(ctx);
        Tensor dw_icl = matmul(matmul(layer.w_v, ctx_t), transpose(matmul(layer.w_k, ctx_t)));
        total = add(w0, dw_icl);
    }
    out.rhs = matmul(total, q);
    out.max_abs_diff = detail::max_abs_diff_of(out.lhs, out.rhs);
    return out;
}

// The accumulated-update context term alone: dW_icl = (W_v X'^T)(W_k X'^T)^T.
inline Tensor icl_delta(const Tensor& ctx, const LinearAttnLayer& layer) {
    Tensor ctx_t = transpose(ctx);
    return matmul(matmul(layer.w_v, ctx_t), transpose(matmul(layer.w_k, ctx_t)));
}

// dW_ft = dW_v x_i (W_k x_i)^T + W_v x_i (dW_k x_i)^T + dW_v x_i (dW_k x_i)^T.
inline Tensor finetune_delta_expansion(const Tensor& x_i, const LinearAttnLayer& layer, const FinetuneDelta& delta) {
    Tensor t1 = matmul(matmul(delta.dw_v, x_i), transpose(matmul(layer.w_k, x_i)));
    Tensor t2 = matmul(matmul(layer.w_v, x_i), transpose(matmul(delta.dw_k, x_i)));
    Tensor t3 = matmul(matmul(delta.dw_v, x_i), transpose(matmul(delta.dw_k, x_i)));
    return add(add(t1, t2), t3);
}

// lhs = (W_v + dW_v) x_i x_i^T (W_k + dW_k)^T W_q x_i computed with the
// updated projections; rhs = (W_0 + dW_ft) W_q x_i with dW_ft expanded as the
// cross terms of the product.
inline TwoForms finetune_two_forms(const Tensor& x_i, const LinearAttnLayer& layer, const FinetuneDelta& delta) {
    int d = layer.w_q.dim(0);
    if (x_i.ndim() != 2 || x_i.dim(0) != d || x_i.dim(1) != 1)
        throw std::invalid_argument("finetune_two_forms: x_i must be [d x 1]");
    if (delta.dw_k.shape() != layer.w_k.shape() || delta.dw_v.shape() != layer.w_v.shape())
        throw std::invalid_argument("finetune_two_forms: delta shape mismatch");

    Tensor q = matmul(layer.w_q, x_i);
    Tensor wk_new = add(layer.w_k, delta.dw_k);
    Tensor wv_new = add(layer.w_v, delta.dw_v);

    TwoForms out;
    out.lhs = matmul(matmul(matmul(wv_new, x_i), transpose(matmul(wk_new, x_i))), q);

    Tensor w0 = matmul(matmul(layer.w_v, x_i), transpose(matmul(layer.w_k, x_i)));
    Tensor dw_ft = finetune_delta_expansion(x_i, layer, delta);
    out.rhs = matmul(add(w0, dw_ft), q);
    out.max_abs_diff = detail::max_abs_diff_of(out.lhs, out.rhs);
    return out;
}

}  // namespace streamadapter
