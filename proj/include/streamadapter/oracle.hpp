// Self-contained numerical verification suites: the two exact-identity checks,
// streamed-vs-one-shot recurrence equivalence, and finite-difference gradient
// checks over every adapter parameter group.

#pragma once

#include <random>
#include <vector>

#include "streamadapter/absorption.hpp"
#include "streamadapter/duality.hpp"
#include "streamadapter/model.hpp"

namespace streamadapter {

struct OracleReport {
    double duality_icl_max = 0.0;
    double duality_ft_max = 0.0;
    double recurrence_max = 0.0;
    double grad_max = 0.0;
    double duality_tol = 1e-12;
    double recurrence_tol = 1e-10;
    double grad_tol = 1e-5;

    bool pass() const {
        return duality_icl_max < duality_tol && duality_ft_max < duality_tol && recurrence_max < recurrence_tol &&
               grad_max < grad_tol;
    }
};

// Both identity forms, d=8, m in {0,1,3,16,64}, 20 seeds.
inline void run_duality_suite(OracleReport& r) {
    int d = 8;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 rng(seed);
        auto layer = LinearAttnLayer::random(d, rng);
        for (int m : {0, 1, 3, 16, 64}) {
            Tensor x = Tensor::randn({d, 1}, rng, 1.0);
            Tensor ctx = m > 0 ? Tensor::randn({m, d}, rng, 1.0) : Tensor();
            TwoForms tf = icl_two_forms(x, ctx, layer);
            double scale_ref = 1.0;
            for (double v : tf.lhs.data()) scale_ref = std::max(scale_ref, std::abs(v));
            r.duality_icl_max = std::max(r.duality_icl_max, tf.max_abs_diff / scale_ref);
        }
        FinetuneDelta delta{Tensor::randn({d, d}, rng, 0.5), Tensor::randn({d, d}, rng, 0.5)};
        Tensor x = Tensor::randn({d, 1}, rng, 1.0);
        TwoForms tf = finetune_two_forms(x, layer, delta);
        double scale_ref = 1.0;
        for (double v : tf.lhs.data()) scale_ref = std::max(scale_ref, std::abs(v));
        r.duality_ft_max = std::max(r.duality_ft_max, tf.max_abs_diff / scale_ref);
    }
}

// Streamed (slice-fed) vs one-shot vs unrolled closed-form recurrent state,
// up to 64 chunks, 10 seeds, including ragged remainder finalization.
inline void run_recurrence_suite(OracleReport& r) {
    int H = 2, dh = 8;
    MappingConfig mc;
    mc.chunk_size = 4;
    mc.n_queries = 3;
    mc.down_dim = 4;
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        std::mt19937_64 rng(seed);
        auto map = AdapterSiteMapping::init(H, dh, mc, rng);
        for (int chunks : {1, 3, 16, 64}) {
            int extra = static_cast<int>(seed % static_cast<uint64_t>(mc.chunk_size));  // ragged tail
            int L = chunks * mc.chunk_size + extra;
            Tensor k = Tensor::randn({H, L, dh}, rng, 1.0);
            Tensor v = Tensor::randn({H, L, dh}, rng, 1.0);

            ContextState one = ContextState::make(H, mc);
            map_cache(one, k, v, map, mc);
            finalize_state(one, map, mc);

            ContextState streamed = ContextState::make(H, mc);
            int fed = 0;
            std::uniform_int_distribution<int> sd(1, 2 * mc.chunk_size);
            while (fed < L) {
                int n = std::min(sd(rng), L - fed);
                auto take = [&](const Tensor& t) {
                    std::vector<Tensor> heads;
                    for (int h = 0; h < H; ++h)
                        heads.push_back(slice_rows(slice_plane(t, h), fed, fed + n));
                    return stack_planes(heads);
                };
                map_cache(streamed, take(k), take(v), map, mc);
                fed += n;
            }
            finalize_state(streamed, map, mc);

            // closed form: h = sum_i (prod_{j>i} alpha_j) o S_i
            Tensor vp = down_project_values(v, map.w_down);
            int n_chunks = chunks + (extra > 0 ? 1 : 0);
            Tensor closed = Tensor::zeros(one.h.shape());
            std::vector<Tensor> s_list, a_list;
            for (int c = 0; c < n_chunks; ++c) {
                int c0 = c * mc.chunk_size, c1 = std::min(L, c0 + mc.chunk_size);
                auto kt = [&](const Tensor& t) {
                    std::vector<Tensor> heads;
                    for (int h = 0; h < H; ++h) heads.push_back(slice_rows(slice_plane(t, h), c0, c1));
                    return stack_planes(heads);
                };
                Tensor s = summarize_chunk(map.query, kt(k), kt(vp));
                s_list.push_back(s);
                a_list.push_back(gate_factor(s, map.w_alpha, map.b_alpha, mc.tau));
            }
            for (int i = 0; i < n_chunks; ++i) {
                Tensor term = s_list[i];
                for (int j = i + 1; j < n_chunks; ++j) term = colwise_scale(a_list[j], term);
                closed = add(closed, term);
            }

            for (size_t i = 0; i < one.h.data().size(); ++i) {
                r.recurrence_max = std::max(r.recurrence_max, std::abs(one.h.data()[i] - streamed.h.data()[i]));
                r.recurrence_max = std::max(r.recurrence_max, std::abs(one.h.data()[i] - closed.data()[i]));
            }
        }
    }
}

// Finite differences through the chunk-summary -> recurrence -> gating ->
// low-rank-delta composition for every adapter parameter group.
inline void run_gradient_suite(OracleReport& r) {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.head_dim = 8;
    cfg.n_blocks = 2;
    cfg.ffn_hidden = 32;
    cfg.max_positions = 256;
    Model m = Model::init(cfg, 91);
    MappingConfig mc;
    mc.chunk_size = 4;
    mc.n_queries = 3;
    mc.down_dim = 4;
    AdaptedModel a = AdaptedModel::init(m, mc, 92);
    std::mt19937_64 rng(93);
    for (auto& s : a.sites) s.abs.w2 = Tensor::randn({mc.n_queries, s.d_o}, rng, 0.5).set_requires_grad(true);
    std::uniform_int_distribution<int> td(0, cfg.vocab_size - 1);
    std::vector<int> ctx(14);
    for (auto& t : ctx) t = td(rng);
    KVCache cache = m.prefill(ctx).second;

    SiteAdapter& s0 = a.sites[0];
    SiteAdapter& s9 = a.sites[9];
    Tensor probe0 = Tensor::randn({s0.d_i, s0.d_o}, rng, 1.0);
    Tensor probe9 = Tensor::randn({s9.d_i, s9.d_o}, rng, 1.0);
    auto run = [&] {
        a.reset_states();
        a.map_full_cache(cache);
        a.finalize_states();
        Tensor l0 = sum_all(mul(delta_weight(s0.state.h, s0.abs), probe0));
        Tensor l9 = sum_all(mul(delta_weight(s9.state.h, s9.abs), probe9));
        return add(l0, l9);
    };
    std::vector<std::pair<Tensor*, double>> groups = {
        {&s0.map.query, 1e-5}, {&s0.map.w_down, 5e-5}, {&s0.map.w_alpha, 1e-5}, {&s0.map.b_alpha, 1e-5},
        {&s0.abs.w1, 1e-5},    {&s0.abs.w2, 1e-5},     {&s9.abs.w1, 1e-5},      {&s9.map.query, 1e-5},
    };
    uint64_t fd_seed = 1;
    for (auto& [p, eps] : groups)
        r.grad_max = std::max(r.grad_max, finite_diff_check(run, *p, eps, 64, fd_seed++));
}

inline OracleReport run_oracle_suites() {
    OracleReport r;
    run_duality_suite(r);
    run_recurrence_suite(r);
    run_gradient_suite(r);
    return r;
}

}  // namespace streamadapter
