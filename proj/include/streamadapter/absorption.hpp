// Weight absorption: W' = W + W1 h^T W2, merged once per adaptation so the
// adapted model decodes at frozen-base cost, plus the absorb/restore lifecycle.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "streamadapter/mapping.hpp"
#include "streamadapter/model.hpp"

namespace streamadapter {

struct AbsorptionSite {
    Tensor w1;  // [d_i x d_kv']
    Tensor w2;  // [r x d_o], zero-initialized so the fresh adapter is a no-op
    std::string site_name;
    Tensor merged_delta;  // defined iff the site is currently adapted

    static AbsorptionSite init(int d_i, int d_o, int d_kv_prime, int r, const std::string& name,
                               std::mt19937_64& rng) {
        AbsorptionSite s;
        s.w1 = Tensor::randn({d_i, d_kv_prime}, rng, 1.0 / std::sqrt(static_cast<double>(d_i))).set_requires_grad(true);
        s.w2 = Tensor::zeros({r, d_o}).set_requires_grad(true);
        s.site_name = name;
        return s;
    }
};

// dW = W1 h^T W2; rank <= min(r, d_kv').
inline Tensor delta_weight(const Tensor& h, const AbsorptionSite& site) {
    if (h.ndim() != 2 || h.dim(1) != site.w1.dim(1) || h.dim(0) != site.w2.dim(0))
        throw std::invalid_argument("delta_weight: h shape " + shape_str(h.shape()) + " does not match site " +
                                    site.site_name);
    return matmul(matmul(site.w1, transpose(h)), site.w2);
}

// One adapted linear layer: mapping parameters, absorption factors, and the
// per-session recurrent state, tied to the block whose KV cache feeds it.
struct SiteAdapter {
    std::string name;
    int block = 0;
    int d_i = 0, d_o = 0;
    AdapterSiteMapping map;
    AbsorptionSite abs;
    ContextState state;
};

class AdaptedModel {
  public:
    Model* base = nullptr;
    MappingConfig mcfg;
    std::vector<SiteAdapter> sites;

    static AdaptedModel init(Model& base, const MappingConfig& mcfg, uint64_t seed) {
        mcfg.validate();
        AdaptedModel a;
        a.base = &base;
        a.mcfg = mcfg;
        std::mt19937_64 rng(seed);
        const auto& cfg = base.cfg;
        int dkv = mcfg.d_kv_prime(cfg.n_heads);
        for (int b = 0; b < cfg.n_blocks; ++b) {
            for (const auto& kind : linear_site_kinds()) {
                SiteAdapter s;
                s.name = base.site_name(b, kind);
                s.block = b;
                if (kind == "ffn_up") {
                    s.d_i = cfg.d_model;
                    s.d_o = cfg.ffn_hidden;
                } else if (kind == "ffn_down") {
                    s.d_i = cfg.ffn_hidden;
                    s.d_o = cfg.d_model;
                } else {
                    s.d_i = cfg.d_model;
                    s.d_o = cfg.d_model;
                }
                s.map = AdapterSiteMapping::init(cfg.n_heads, cfg.head_dim, mcfg, rng);
                s.abs = AbsorptionSite::init(s.d_i, s.d_o, dkv, mcfg.n_queries, s.name, rng);
                s.state = ContextState::make(cfg.n_heads, mcfg);
                a.sites.push_back(std::move(s));
            }
        }
        return a;
    }

    std::vector<Parameter> parameters() {
        std::vector<Parameter> ps;
        for (auto& s : sites) {
            std::string p = "adapter." + s.name + ".";
            ps.push_back({p + "query", s.map.query});
            ps.push_back({p + "w_down", s.map.w_down});
            ps.push_back({p + "w_alpha", s.map.w_alpha});
            ps.push_back({p + "b_alpha", s.map.b_alpha});
            ps.push_back({p + "w1", s.abs.w1});
            ps.push_back({p + "w2", s.abs.w2});
        }
        return ps;
    }

    void reset_states() {
        for (auto& s : sites) s.state.reset(base->cfg.n_heads, mcfg);
    }

    // Streams one evicted slice through every site of every block.
    void map_evicted(const EvictedSlices& ev) {
        for (auto& s : sites) map_cache(s.state, ev.k[s.block], ev.v[s.block], s.map, mcfg);
    }

    // Maps a whole cache (e.g. a prefill of demonstrations) and flushes it.
    void map_full_cache(const KVCache& cache) {
        if (cache.length() == 0) return;
        std::vector<Tensor> ks, vs;
        for (int b = 0; b < base->cfg.n_blocks; ++b) {
            ks.push_back(cache.block_tensor(b, true));
            vs.push_back(cache.block_tensor(b, false));
        }
        for (auto& s : sites) map_cache(s.state, ks[s.block], vs[s.block], s.map, mcfg);
    }

    void finalize_states() {
        for (auto& s : sites) finalize_state(s.state, s.map, mcfg);
    }

    bool absorbed() const { return absorbed_; }

    // Materializes W' = W + dW once per site from the current states.
    void absorb() {
        if (absorbed_) throw std::logic_error("absorb: already absorbed; restore first");
        NoGradGuard ng;
        for (auto& s : sites) {
            Tensor dw = delta_weight(s.state.h.detach(), s.abs);
            s.abs.merged_delta = dw;
            merged_[s.name] = add(base_weight(s.name), dw);
        }
        absorbed_ = true;
    }

    void restore() {
        if (!absorbed_) throw std::logic_error("restore: model is not adapted");
        merged_.clear();
        for (auto& s : sites) s.abs.merged_delta = Tensor();
        absorbed_ = false;
    }

    // Resolver for inference under the merged weights.
    WeightResolver inference_resolver() const {
        return [this](const std::string& site, const Tensor& base_w) -> Tensor {
            auto it = merged_.find(site);
            return it == merged_.end() ? base_w : it->second;
        };
    }

    // Resolver for training: effective weights recomputed from the current
    // (taped) states so gradients reach every adapter parameter.
    WeightResolver taped_resolver() const {
        auto overlay = std::make_shared<std::map<std::string, Tensor>>();
        for (const auto& s : sites) (*overlay)[s.name] = add(base_weight(s.name), delta_weight(s.state.h, s.abs));
        return [overlay](const std::string& site, const Tensor& base_w) -> Tensor {
            auto it = overlay->find(site);
            return it == overlay->end() ? base_w : it->second;
        };
    }

    Tensor base_weight(const std::string& site) const {
        for (int b = 0; b < base->cfg.n_blocks; ++b) {
            if (site == base->site_name(b, "wq")) return base->blocks[b].wq;
            if (site == base->site_name(b, "wk")) return base->blocks[b].wk;
            if (site == base->site_name(b, "wv")) return base->blocks[b].wv;
            if (site == base->site_name(b, "wo")) return base->blocks[b].wo;
            if (site == base->site_name(b, "ffn_up")) return base->blocks[b].w_up;
            if (site == base->site_name(b, "ffn_down")) return base->blocks[b].w_down;
        }
        throw std::invalid_argument("base_weight: unknown site " + site);
    }

  private:
    bool absorbed_ = false;
    std::map<std::string, Tensor> merged_;
};

}  // namespace streamadapter
