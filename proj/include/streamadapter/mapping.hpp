// Context mapping: learnable per-site queries summarize KV-cache chunks with
// multi-head cross-attention, and a data-dependent gated recurrence condenses
// the chunk summaries into a constant-size context state h.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "streamadapter/tensor.hpp"

namespace streamadapter {

struct MappingConfig {
    int chunk_size = 32;  // C; 0 selects no-chunking (whole cache in one pass)
    int n_queries = 4;    // r
    int down_dim = 8;     // d', so d_kv' = H * d'
    double tau = 16.0;

    void validate() const {
        if (chunk_size < 0) throw std::invalid_argument("MappingConfig: chunk_size must be >= 0");
        if (n_queries < 1 || down_dim < 1) throw std::invalid_argument("MappingConfig: r and d' must be >= 1");
        if (!(tau > 0.0)) throw std::invalid_argument("MappingConfig: tau must be positive");
    }
    int d_kv_prime(int n_heads) const { return n_heads * down_dim; }
};

// Learnable mapping parameters of one adapter site.
struct AdapterSiteMapping {
    Tensor query;    // [H x r x d]
    Tensor w_down;   // [H x d x d']
    Tensor w_alpha;  // [d_kv' x 1]
    Tensor b_alpha;  // [1]

    static AdapterSiteMapping init(int n_heads, int head_dim, const MappingConfig& cfg, std::mt19937_64& rng) {
        AdapterSiteMapping m;
        double sq = 1.0 / std::sqrt(static_cast<double>(head_dim));
        m.query = Tensor::randn({n_heads, cfg.n_queries, head_dim}, rng, sq).set_requires_grad(true);
        m.w_down = Tensor::randn({n_heads, head_dim, cfg.down_dim}, rng, sq).set_requires_grad(true);
        m.w_alpha = Tensor::zeros({cfg.d_kv_prime(n_heads), 1}).set_requires_grad(true);
        m.b_alpha = Tensor::zeros({1}).set_requires_grad(true);
        return m;
    }
};

// Running recurrent state plus the buffered partial chunk of raw K/V rows.
struct ContextState {
    Tensor h;  // [r x d_kv']
    int64_t chunks_consumed = 0;
    std::vector<std::vector<double>> res_k;  // per head, res_len * d values
    std::vector<std::vector<double>> res_v;
    int64_t res_len = 0;

    static ContextState make(int n_heads, const MappingConfig& cfg) {
        ContextState s;
        s.h = Tensor::zeros({cfg.n_queries, cfg.d_kv_prime(n_heads)});
        s.chunks_consumed = 0;
        s.res_k.assign(n_heads, {});
        s.res_v.assign(n_heads, {});
        s.res_len = 0;
        return s;
    }
    void reset(int n_heads, const MappingConfig& cfg) { *this = make(n_heads, cfg); }
    bool is_zero() const { return chunks_consumed == 0 && res_len == 0; }
};

// V' = V W_down, per head. V: [H x L x d], W_down: [H x d x d'] -> [H x L x d'].
inline Tensor down_project_values(const Tensor& v, const Tensor& w_down) {
    if (v.ndim() != 3 || w_down.ndim() != 3 || v.dim(0) != w_down.dim(0) || v.dim(2) != w_down.dim(1))
        throw std::invalid_argument("down_project_values: shape mismatch " + shape_str(v.shape()) + " vs " +
                                    shape_str(w_down.shape()));
    int H = v.dim(0);
    std::vector<Tensor> planes;
    planes.reserve(H);
    for (int h = 0; h < H; ++h) planes.push_back(matmul(slice_plane(v, h), slice_plane(w_down, h)));
    return stack_planes(planes);
}

// Multi-head cross-attention between the site queries and one chunk.
// Scaling uses sqrt(d) of the full key head-dim, not d'. S: [r x H*d'].
inline Tensor summarize_chunk(const Tensor& query, const Tensor& k_chunk, const Tensor& v_chunk) {
    if (query.ndim() != 3 || k_chunk.ndim() != 3 || v_chunk.ndim() != 3)
        throw std::invalid_argument("summarize_chunk: expected 3-D tensors");
    int H = query.dim(0), d = query.dim(2);
    if (k_chunk.dim(0) != H || k_chunk.dim(2) != d || v_chunk.dim(0) != H || v_chunk.dim(1) != k_chunk.dim(1))
        throw std::invalid_argument("summarize_chunk: head/shape mismatch");
    if (k_chunk.dim(1) == 0) throw std::invalid_argument("summarize_chunk: empty chunk");
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Tensor> heads;
    heads.reserve(H);
    for (int h = 0; h < H; ++h) {
        Tensor qh = slice_plane(query, h);
        Tensor attn = softmax_rows(scale(matmul(qh, transpose(slice_plane(k_chunk, h))), inv_sqrt_d));
        heads.push_back(matmul(attn, slice_plane(v_chunk, h)));
    }
    return concat_cols(heads);
}

// alpha = sigmoid(S W_alpha + b_alpha)^(1/tau), one scalar per query. [r x 1].
inline Tensor gate_factor(const Tensor& summary, const Tensor& w_alpha, const Tensor& b_alpha, double tau) {
    return sigmoid_pow(add_scalar(matmul(summary, w_alpha), b_alpha), tau);
}

// h_i = alpha_i (*) h_{i-1} + S_i, alpha broadcast across the d_kv' axis.
inline void recur_step(ContextState& state, const Tensor& summary, const Tensor& alpha) {
    state.h = add(colwise_scale(alpha, state.h), summary);
    state.chunks_consumed += 1;
}

namespace detail {

// One full pipeline step on a [H x c x d] chunk pair.
inline void consume_chunk(ContextState& state, const Tensor& k_chunk, const Tensor& v_chunk,
                          const AdapterSiteMapping& site, const MappingConfig& cfg) {
    Tensor vp = down_project_values(v_chunk, site.w_down);
    Tensor s = summarize_chunk(site.query, k_chunk, vp);
    Tensor alpha = gate_factor(s, site.w_alpha, site.b_alpha, cfg.tau);
    recur_step(state, s, alpha);
}

inline Tensor rows_to_tensor(const std::vector<std::vector<double>>& heads, int64_t r0, int64_t r1, int d) {
    int H = static_cast<int>(heads.size());
    std::vector<double> out;
    out.reserve(static_cast<size_t>(H) * (r1 - r0) * d);
    for (const auto& hb : heads)
        out.insert(out.end(), hb.begin() + r0 * d, hb.begin() + r1 * d);
    return Tensor::from({H, static_cast<int>(r1 - r0), d}, std::move(out));
}

}  // namespace detail

// Streams an incoming K/V slice into the state. Full chunks are consumed in
// order; the trailing partial chunk stays buffered until finalize_state, so
// streaming and one-shot consumption agree exactly.
inline void map_cache(ContextState& state, const Tensor& k, const Tensor& v, const AdapterSiteMapping& site,
                      const MappingConfig& cfg) {
    cfg.validate();
    int H = site.query.dim(0), d = site.query.dim(2);
    if (k.ndim() != 3 || v.ndim() != 3) throw std::invalid_argument("map_cache: expected [H x L x d] tensors");
    if (k.dim(0) != H || k.dim(2) != d || v.dim(0) != H || v.dim(2) != d || v.dim(1) != k.dim(1))
        throw std::invalid_argument("map_cache: cache shape " + shape_str(k.shape()) +
                                    " does not match site (H=" + std::to_string(H) + ", d=" + std::to_string(d) + ")");
    int64_t L = k.dim(1);
    if (L == 0) return;

    // append incoming rows to the per-head buffers
    size_t plane = static_cast<size_t>(L) * d;
    for (int h = 0; h < H; ++h) {
        state.res_k[h].insert(state.res_k[h].end(), k.data().begin() + h * plane, k.data().begin() + (h + 1) * plane);
        state.res_v[h].insert(state.res_v[h].end(), v.data().begin() + h * plane, v.data().begin() + (h + 1) * plane);
    }
    state.res_len += L;

    if (cfg.chunk_size == 0) return;  // no-chunking mode buffers until finalize

    int64_t c = cfg.chunk_size;
    int64_t full = state.res_len / c;
    for (int64_t i = 0; i < full; ++i) {
        Tensor kc = detail::rows_to_tensor(state.res_k, i * c, (i + 1) * c, d);
        Tensor vc = detail::rows_to_tensor(state.res_v, i * c, (i + 1) * c, d);
        detail::consume_chunk(state, kc, vc, site, cfg);
    }
    if (full > 0) {
        for (int h = 0; h < H; ++h) {
            state.res_k[h].erase(state.res_k[h].begin(), state.res_k[h].begin() + full * c * d);
            state.res_v[h].erase(state.res_v[h].begin(), state.res_v[h].begin() + full * c * d);
        }
        state.res_len -= full * c;
    }
}

// End-of-stream flush: the buffered remainder (< C tokens) is processed as one
// extra chunk. In no-chunking mode the whole buffered cache becomes a single
// cross-attention pass with no recurrence gating applied to a prior state.
inline void finalize_state(ContextState& state, const AdapterSiteMapping& site, const MappingConfig& cfg) {
    if (state.res_len == 0) return;
    int d = site.query.dim(2);
    Tensor kc = detail::rows_to_tensor(state.res_k, 0, state.res_len, d);
    Tensor vc = detail::rows_to_tensor(state.res_v, 0, state.res_len, d);
    detail::consume_chunk(state, kc, vc, site, cfg);
    for (auto& b : state.res_k) b.clear();
    for (auto& b : state.res_v) b.clear();
    state.res_len = 0;
}

}  // namespace streamadapter
