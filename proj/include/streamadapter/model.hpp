// Tiny decoder-only transformer: pre-norm blocks with multi-head causal
// attention (rotary positions) and a GELU MLP, byte-level vocabulary, and an
// explicit per-block KV cache. The base weights stay frozen once adapter
// training starts; adapted runs swap in effective weights through a resolver.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "streamadapter/tensor.hpp"

namespace streamadapter {

struct ModelConfig {
    int vocab_size = 259;  // 256 bytes + BOS/EOS/PAD
    int d_model = 64;
    int n_heads = 4;
    int head_dim = 16;
    int n_blocks = 4;
    int ffn_hidden = 256;
    int max_positions = 4096;
    double rope_base = 10000.0;

    void validate() const {
        if (d_model != n_heads * head_dim)
            throw std::invalid_argument("ModelConfig: d_model must equal n_heads * head_dim");
        if (vocab_size < 3) throw std::invalid_argument("ModelConfig: vocab_size must be >= 3");
        if (d_model <= 0 || n_heads <= 0 || head_dim <= 0 || n_blocks <= 0 || ffn_hidden <= 0 || max_positions <= 0)
            throw std::invalid_argument("ModelConfig: all extents must be positive");
        if (head_dim % 2 != 0) throw std::invalid_argument("ModelConfig: head_dim must be even for rotary");
    }
};

constexpr int kTokenBOS = 256;
constexpr int kTokenEOS = 257;
constexpr int kTokenPAD = 258;

// Raw double buffer that participates in the live-value counter.
class CountedBuf {
  public:
    CountedBuf() = default;
    ~CountedBuf() { live_values::sub(static_cast<int64_t>(v_.size())); }
    CountedBuf(const CountedBuf& o) : v_(o.v_) { live_values::add(static_cast<int64_t>(v_.size())); }
    CountedBuf(CountedBuf&& o) noexcept : v_(std::move(o.v_)) { o.v_.clear(); }
    CountedBuf& operator=(const CountedBuf& o) {
        if (this != &o) {
            live_values::sub(static_cast<int64_t>(v_.size()));
            v_ = o.v_;
            live_values::add(static_cast<int64_t>(v_.size()));
        }
        return *this;
    }
    CountedBuf& operator=(CountedBuf&& o) noexcept {
        if (this != &o) {
            live_values::sub(static_cast<int64_t>(v_.size()));
            v_ = std::move(o.v_);
            o.v_.clear();
        }
        return *this;
    }

    void append(const double* p, size_t n) {
        v_.insert(v_.end(), p, p + n);
        live_values::add(static_cast<int64_t>(n));
    }
    void remove_front(size_t n) {
        v_.erase(v_.begin(), v_.begin() + n);
        live_values::sub(static_cast<int64_t>(n));
    }
    void clear() {
        live_values::sub(static_cast<int64_t>(v_.size()));
        v_.clear();
    }
    const std::vector<double>& get() const { return v_; }
    size_t size() const { return v_.size(); }

  private:
    std::vector<double> v_;
};

// Per-block, per-head key/value sequences. Keys are stored post-rotary, so
// retained entries keep their absolute phases after eviction.
struct KVCache {
    int n_heads = 0;
    int head_dim = 0;
    struct Block {
        std::vector<CountedBuf> k;  // per head, L*d values each
        std::vector<CountedBuf> v;
    };
    std::vector<Block> blocks;
    std::vector<int64_t> positions;  // absolute, strictly increasing
    int64_t next_position = 0;

    static KVCache make(const ModelConfig& cfg) {
        KVCache c;
        c.n_heads = cfg.n_heads;
        c.head_dim = cfg.head_dim;
        c.blocks.resize(cfg.n_blocks);
        for (auto& b : c.blocks) {
            b.k.resize(cfg.n_heads);
            b.v.resize(cfg.n_heads);
        }
        return c;
    }

    int64_t length() const { return static_cast<int64_t>(positions.size()); }

    // [H x L x d] constant view of one block's keys or values.
    Tensor block_tensor(int block, bool keys) const {
        const Block& b = blocks.at(block);
        int64_t L = length();
        if (L == 0) throw std::invalid_argument("KVCache: empty block tensor");
        std::vector<double> out;
        out.reserve(static_cast<size_t>(n_heads) * L * head_dim);
        for (int h = 0; h < n_heads; ++h) {
            const auto& buf = keys ? b.k[h].get() : b.v[h].get();
            out.insert(out.end(), buf.begin(), buf.end());
        }
        return Tensor::from({n_heads, static_cast<int>(L), head_dim}, std::move(out));
    }
};

// KV rows removed from a cache by evict_oldest, in block order.
struct EvictedSlices {
    std::vector<Tensor> k;  // per block, [H x n x d]
    std::vector<Tensor> v;
    std::vector<int64_t> positions;
    int64_t count() const { return static_cast<int64_t>(positions.size()); }
};

inline EvictedSlices evict_oldest(KVCache& cache, int64_t n) {
    if (n < 0 || n > cache.length())
        throw std::invalid_argument("evict_oldest: n=" + std::to_string(n) + " exceeds cache length " +
                                    std::to_string(cache.length()));
    EvictedSlices ev;
    ev.positions.assign(cache.positions.begin(), cache.positions.begin() + n);
    if (n == 0) return ev;
    size_t rows = static_cast<size_t>(n) * cache.head_dim;
    for (auto& b : cache.blocks) {
        std::vector<double> kd, vd;
        kd.reserve(cache.n_heads * rows);
        vd.reserve(cache.n_heads * rows);
        for (int h = 0; h < cache.n_heads; ++h) {
            kd.insert(kd.end(), b.k[h].get().begin(), b.k[h].get().begin() + rows);
            vd.insert(vd.end(), b.v[h].get().begin(), b.v[h].get().begin() + rows);
            b.k[h].remove_front(rows);
            b.v[h].remove_front(rows);
        }
        ev.k.push_back(Tensor::from({cache.n_heads, static_cast<int>(n), cache.head_dim}, std::move(kd)));
        ev.v.push_back(Tensor::from({cache.n_heads, static_cast<int>(n), cache.head_dim}, std::move(vd)));
    }
    cache.positions.erase(cache.positions.begin(), cache.positions.begin() + n);
    return ev;
}

// Maps a site name to the effective weight used in the forward pass.
// The default resolver returns the base weight unchanged.
using WeightResolver = std::function<Tensor(const std::string& site, const Tensor& base)>;

inline Tensor identity_resolver(const std::string&, const Tensor& base) { return base; }

struct BlockWeights {
    Tensor attn_norm;  // [d_model]
    Tensor wq, wk, wv, wo;  // [d_model x d_model]
    Tensor ffn_norm;   // [d_model]
    Tensor w_up;       // [d_model x ffn_hidden]
    Tensor w_down;     // [ffn_hidden x d_model]
};

// Names of the per-block linear layers StreamAdapter can attach to.
inline const std::vector<std::string>& linear_site_kinds() {
    static const std::vector<std::string> kinds = {"wq", "wk", "wv", "wo", "ffn_up", "ffn_down"};
    return kinds;
}

class Model {
  public:
    ModelConfig cfg;
    Tensor embedding;   // [V x d_model]
    std::vector<BlockWeights> blocks;
    Tensor final_norm;  // [d_model]
    Tensor lm_head;     // [d_model x V]

    static Model init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        std::mt19937_64 rng(seed);
        double s = 0.02;
        m.embedding = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, s);
        for (int b = 0; b < cfg.n_blocks; ++b) {
            BlockWeights w;
            w.attn_norm = Tensor::full({cfg.d_model}, 1.0);
            w.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s);
            w.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s);
            w.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s);
            w.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s);
            w.ffn_norm = Tensor::full({cfg.d_model}, 1.0);
            w.w_up = Tensor::randn({cfg.d_model, cfg.ffn_hidden}, rng, s);
            w.w_down = Tensor::randn({cfg.ffn_hidden, cfg.d_model}, rng, s);
            m.blocks.push_back(std::move(w));
        }
        m.final_norm = Tensor::full({cfg.d_model}, 1.0);
        m.lm_head = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng, s);
        return m;
    }

    std::vector<Parameter> parameters() {
        std::vector<Parameter> ps;
        ps.push_back({"base.embedding", embedding});
        for (size_t b = 0; b < blocks.size(); ++b) {
            std::string p = "base.block." + std::to_string(b) + ".";
            ps.push_back({p + "attn_norm", blocks[b].attn_norm});
            ps.push_back({p + "wq", blocks[b].wq});
            ps.push_back({p + "wk", blocks[b].wk});
            ps.push_back({p + "wv", blocks[b].wv});
            ps.push_back({p + "wo", blocks[b].wo});
            ps.push_back({p + "ffn_norm", blocks[b].ffn_norm});
            ps.push_back({p + "ffn_up", blocks[b].w_up});
            ps.push_back({p + "ffn_down", blocks[b].w_down});
        }
        ps.push_back({"base.final_norm", final_norm});
        ps.push_back({"base.lm_head", lm_head});
        return ps;
    }

    void set_trainable(bool v) {
        for (auto& p : parameters()) p.tensor.set_requires_grad(v);
    }

    std::string site_name(int block, const std::string& kind) const {
        return "block." + std::to_string(block) + "." + kind;
    }

    // Core forward. Feeds `tokens` after whatever `cache` already holds; when
    // `cache` is non-null the new tokens' (detached) K/V rows are appended.
    // Position t of the output depends only on cached context and tokens[0..t].
    Tensor forward(const std::vector<int>& tokens, KVCache* cache,
                   const WeightResolver& resolve = identity_resolver) const {
        int n = static_cast<int>(tokens.size());
        if (n == 0) throw std::invalid_argument("forward: empty token sequence");
        for (int t : tokens)
            if (t < 0 || t >= cfg.vocab_size)
                throw std::invalid_argument("forward: token id " + std::to_string(t) + " out of range");
        int64_t cache_len = cache ? cache->length() : 0;
        if (cache_len + n > cfg.max_positions)
            throw std::invalid_argument("forward: cache length " + std::to_string(cache_len) + " + " +
                                        std::to_string(n) + " tokens exceeds max_positions");
        std::vector<int64_t> new_pos(n);
        int64_t p0 = cache ? cache->next_position : 0;
        for (int i = 0; i < n; ++i) new_pos[i] = p0 + i;

        int H = cfg.n_heads, d = cfg.head_dim;
        double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

        Tensor x = gather_rows(embedding, tokens);
        for (int b = 0; b < cfg.n_blocks; ++b) {
            const BlockWeights& w = blocks[b];
            Tensor xn = rms_norm(x, w.attn_norm);
            Tensor q = matmul(xn, resolve(site_name(b, "wq"), w.wq));
            Tensor k = matmul(xn, resolve(site_name(b, "wk"), w.wk));
            Tensor v = matmul(xn, resolve(site_name(b, "wv"), w.wv));

            // additive causal mask over [cache | new] columns
            int total = static_cast<int>(cache_len) + n;
            std::vector<double> maskd(static_cast<size_t>(n) * total, 0.0);
            double neg_inf = -std::numeric_limits<double>::infinity();
            for (int i = 0; i < n; ++i)
                for (int j = i + 1; j < n; ++j) maskd[static_cast<size_t>(i) * total + cache_len + j] = neg_inf;
            Tensor mask = Tensor::from({n, total}, std::move(maskd));

            std::vector<Tensor> head_outs;
            head_outs.reserve(H);
            for (int h = 0; h < H; ++h) {
                Tensor qh = rope(slice_cols(q, h * d, (h + 1) * d), new_pos, cfg.rope_base);
                Tensor kh = rope(slice_cols(k, h * d, (h + 1) * d), new_pos, cfg.rope_base);
                Tensor vh = slice_cols(v, h * d, (h + 1) * d);
                Tensor keys = kh, vals = vh;
                if (cache_len > 0) {
                    Tensor kc = Tensor::from({static_cast<int>(cache_len), d},
                                             std::vector<double>(cache->blocks[b].k[h].get()));
                    Tensor vc = Tensor::from({static_cast<int>(cache_len), d},
                                             std::vector<double>(cache->blocks[b].v[h].get()));
                    keys = concat_rows({kc, kh});
                    vals = concat_rows({vc, vh});
                }
                Tensor scores = scale(matmul(qh, transpose(keys)), inv_sqrt_d);
                Tensor attn = softmax_rows(scores, &mask);
                head_outs.push_back(matmul(attn, vals));
                if (cache) {
                    cache->blocks[b].k[h].append(kh.data().data(), kh.data().size());
                    cache->blocks[b].v[h].append(vh.data().data(), vh.data().size());
                }
            }
            Tensor attn_out = matmul(concat_cols(head_outs), resolve(site_name(b, "wo"), w.wo));
            x = add(x, attn_out);

            Tensor fn = rms_norm(x, w.ffn_norm);
            Tensor up = gelu(matmul(fn, resolve(site_name(b, "ffn_up"), w.w_up)));
            Tensor down = matmul(up, resolve(site_name(b, "ffn_down"), w.w_down));
            x = add(x, down);
        }
        if (cache) {
            cache->positions.insert(cache->positions.end(), new_pos.begin(), new_pos.end());
            cache->next_position = p0 + n;
        }
        return matmul(rms_norm(x, final_norm), lm_head);
    }

    // One-shot training/eval forward without any cache. logits: [n x V].
    Tensor forward_train(const std::vector<int>& tokens, const WeightResolver& resolve = identity_resolver) const {
        return forward(tokens, nullptr, resolve);
    }

    std::pair<Tensor, KVCache> prefill(const std::vector<int>& tokens,
                                       const WeightResolver& resolve = identity_resolver) const {
        KVCache cache = KVCache::make(cfg);
        if (tokens.empty()) return {Tensor(), std::move(cache)};
        Tensor logits = forward(tokens, &cache, resolve);
        return {std::move(logits), std::move(cache)};
    }

    // logits for the next token; appends one entry per block. [1 x V].
    Tensor decode_step(int token, KVCache& cache, const WeightResolver& resolve = identity_resolver) const {
        return forward({token}, &cache, resolve);
    }
};

}  // namespace streamadapter
