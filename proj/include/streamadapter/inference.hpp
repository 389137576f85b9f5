// Hybrid inference: split demonstrations between absorbed weight updates and
// retained context for classification, stream long generations under a bounded
// window with eviction-driven adaptation, and score windowed perplexity.

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamadapter/absorption.hpp"
#include "streamadapter/model.hpp"

namespace streamadapter {

enum class InferenceMode { understanding, generation, full_context, naive_window };

struct HybridConfig {
    InferenceMode mode = InferenceMode::understanding;
    double ratio = 0.8;  // fraction of demonstrations absorbed into weights
    int64_t window = 1024;
    int64_t stride = 512;
    int64_t max_new_tokens = 128;
    bool greedy = true;

    void validate(const MappingConfig& mcfg) const {
        if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("HybridConfig: ratio must be in [0,1]");
        if (window <= 0 || stride <= 0) throw std::invalid_argument("HybridConfig: window/stride must be positive");
        if (stride >= window) throw std::invalid_argument("HybridConfig: stride must be smaller than window");
        if (mcfg.chunk_size > 0 && stride % mcfg.chunk_size != 0)
            throw std::invalid_argument("HybridConfig: stride must be a multiple of the mapping chunk size");
        if (max_new_tokens < 0) throw std::invalid_argument("HybridConfig: max_new_tokens must be >= 0");
    }
};

struct EvalRecord {
    std::string task;
    int64_t n_shots = 0;
    double ratio = 0.0;
    std::string template_id;
    std::string metric;
    double value = 0.0;
    double wall_clock_s = 0.0;
    int64_t peak_live_values = 0;
};

// One classification query: demonstrations in prompt order (last = most
// recent), the query tokens, the candidate completions for every label, and
// the index of the correct one.
struct ClassificationExample {
    std::vector<std::vector<int>> demos;
    std::vector<int> query;
    std::vector<std::vector<int>> options;
    int correct = 0;
};

namespace detail {

inline std::vector<int> concat_tokens(const std::vector<std::vector<int>>& parts, size_t from, size_t to) {
    std::vector<int> out;
    for (size_t i = from; i < to; ++i) out.insert(out.end(), parts[i].begin(), parts[i].end());
    return out;
}

// Mean log-probability per completion token given (cache context + query).
inline double option_score(const Model& m, KVCache cache, const std::vector<int>& query,
                           const std::vector<int>& option, const WeightResolver& resolve) {
    std::vector<int> full = query;
    full.insert(full.end(), option.begin(), option.end());
    Tensor logits = m.forward(full, &cache, resolve);
    int q = static_cast<int>(query.size());
    int V = logits.dim(1);
    double total = 0.0;
    for (size_t t = 0; t < option.size(); ++t) {
        const double* row = logits.data().data() + (q - 1 + t) * V;
        double mx = *std::max_element(row, row + V);
        double lse = 0.0;
        for (int j = 0; j < V; ++j) lse += std::exp(row[j] - mx);
        total += row[option[t]] - mx - std::log(lse);
    }
    return total / static_cast<double>(option.size());
}

}  // namespace detail

// Scores one example under the absorbed/retained split and returns the index
// of the best-scoring option. The model is left exactly as found.
inline int classify_hybrid(AdaptedModel& a, const ClassificationExample& ex, double ratio) {
    const Model& m = *a.base;
    if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("classify_hybrid: ratio must be in [0,1]");
    if (ex.options.size() < 2) throw std::invalid_argument("classify_hybrid: need at least two options");
    if (ex.query.empty()) throw std::invalid_argument("classify_hybrid: empty query");
    for (const auto& o : ex.options)
        if (o.empty()) throw std::invalid_argument("classify_hybrid: empty option");

    NoGradGuard ng;
    size_t k = ex.demos.size();
    size_t n_abs = static_cast<size_t>(std::ceil(ratio * static_cast<double>(k) - 1e-12));
    n_abs = std::min(n_abs, k);

    bool did_absorb = false;
    if (n_abs > 0) {
        std::vector<int> absorbed_ctx = detail::concat_tokens(ex.demos, 0, n_abs);
        if (!absorbed_ctx.empty()) {
            KVCache cache = m.prefill(absorbed_ctx).second;
            a.reset_states();
            a.map_full_cache(cache);
            a.finalize_states();
            a.absorb();
            did_absorb = true;
        }
    }
    WeightResolver resolve = did_absorb ? a.inference_resolver() : identity_resolver;

    KVCache retained = KVCache::make(m.cfg);
    std::vector<int> retained_ctx = detail::concat_tokens(ex.demos, n_abs, k);
    if (!retained_ctx.empty()) retained = m.prefill(retained_ctx, resolve).second;

    int best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < ex.options.size(); ++i) {
        double s = detail::option_score(m, retained, ex.query, ex.options[i], resolve);
        if (s > best_score) {
            best_score = s;
            best = static_cast<int>(i);
        }
    }
    if (did_absorb) {
        a.restore();
        a.reset_states();
    }
    return best;
}

inline double eval_understanding(AdaptedModel& a, const std::vector<ClassificationExample>& examples, double ratio) {
    if (examples.empty()) throw std::invalid_argument("eval_understanding: no examples");
    int64_t hits = 0;
    for (const auto& ex : examples)
        if (classify_hybrid(a, ex, ratio) == ex.correct) ++hits;
    return static_cast<double>(hits) / static_cast<double>(examples.size());
}

// Evicts `stride` tokens from the cache into the adapter states and refreshes
// the merged weights from the cumulative state.
inline void evict_and_adapt(AdaptedModel& a, KVCache& cache, int64_t stride) {
    EvictedSlices ev = evict_oldest(cache, static_cast<int>(stride));
    a.map_evicted(ev);
    if (a.absorbed()) a.restore();
    a.absorb();
}

// Greedy decoding with a bounded cache: whenever the window is full, the
// oldest stride is evicted into the adapter and the weights are re-merged.
inline std::vector<int> generate_streaming(AdaptedModel& a, const std::vector<int>& prompt, const HybridConfig& cfg) {
    cfg.validate(a.mcfg);
    const Model& m = *a.base;
    if (prompt.empty()) throw std::invalid_argument("generate_streaming: empty prompt");
    if (cfg.window > m.cfg.max_positions)
        throw std::invalid_argument("generate_streaming: window exceeds max_positions");

    NoGradGuard ng;
    a.reset_states();
    bool was_absorbed = a.absorbed();
    if (was_absorbed) a.restore();

    KVCache cache = KVCache::make(m.cfg);
    a.absorb();  // fresh state: merged weights start at the base

    Tensor last_logits;
    size_t fed = 0;
    while (fed < prompt.size()) {
        int64_t room = cfg.window - cache.length();
        if (room <= 0) {
            evict_and_adapt(a, cache, cfg.stride);
            room = cfg.stride;
        }
        size_t n = std::min(static_cast<size_t>(room), prompt.size() - fed);
        std::vector<int> piece(prompt.begin() + fed, prompt.begin() + fed + n);
        last_logits = m.forward(piece, &cache, a.inference_resolver());
        fed += n;
    }

    std::vector<int> out;
    int V = m.cfg.vocab_size;
    const double* row = last_logits.data().data() + (last_logits.dim(0) - 1) * V;
    int next = static_cast<int>(std::max_element(row, row + V) - row);
    for (int64_t t = 0; t < cfg.max_new_tokens; ++t) {
        out.push_back(next);
        if (cache.length() >= cfg.window) evict_and_adapt(a, cache, cfg.stride);
        Tensor logits = m.decode_step(next, cache, a.inference_resolver());
        next = static_cast<int>(std::max_element(logits.data().begin(), logits.data().end()) - logits.data().begin());
        if (cache.length() > cfg.window) throw std::logic_error("generate_streaming: cache bound violated");
    }

    a.restore();
    a.reset_states();
    return out;
}

// Unbounded-cache greedy baseline; the whole history stays in attention.
inline std::vector<int> generate_full_context(const Model& m, const std::vector<int>& prompt, int64_t max_new_tokens,
                                              const WeightResolver& resolve = identity_resolver) {
    if (prompt.empty()) throw std::invalid_argument("generate_full_context: empty prompt");
    NoGradGuard ng;
    KVCache cache;
    Tensor logits;
    std::tie(logits, cache) = m.prefill(prompt, resolve);
    int V = m.cfg.vocab_size;
    const double* row = logits.data().data() + (logits.dim(0) - 1) * V;
    int next = static_cast<int>(std::max_element(row, row + V) - row);
    std::vector<int> out;
    for (int64_t t = 0; t < max_new_tokens; ++t) {
        out.push_back(next);
        Tensor step = m.decode_step(next, cache, resolve);
        next = static_cast<int>(std::max_element(step.data().begin(), step.data().end()) - step.data().begin());
    }
    return out;
}

// Sliding-window perplexity scored on incoming-stride tokens only. In adapted
// mode each evicted stride feeds the adapter before the next stride is scored;
// naive mode discards evicted tokens.
inline double eval_window_ppl(AdaptedModel& a, const std::vector<int>& text, int64_t window, int64_t stride,
                              bool adapted) {
    const Model& m = *a.base;
    if (window <= 0 || stride <= 0 || stride > window)
        throw std::invalid_argument("eval_window_ppl: invalid window/stride");
    if (adapted && a.mcfg.chunk_size > 0 && stride % a.mcfg.chunk_size != 0)
        throw std::invalid_argument("eval_window_ppl: stride must be a multiple of the mapping chunk size");
    int64_t L = static_cast<int64_t>(text.size());
    if (L <= window + stride) throw std::invalid_argument("eval_window_ppl: text shorter than window + stride");

    NoGradGuard ng;
    bool was_absorbed = a.absorbed();
    if (was_absorbed) a.restore();
    a.reset_states();
    a.absorb();

    KVCache cache;
    {
        std::vector<int> head(text.begin(), text.begin() + window);
        cache = m.prefill(head, adapted ? a.inference_resolver() : identity_resolver).second;
    }

    double total_nll = 0.0;
    int64_t scored = 0;
    for (int64_t at = window; at < L; at += stride) {
        if (adapted) {
            evict_and_adapt(a, cache, stride);
        } else {
            evict_oldest(cache, static_cast<int>(stride));
        }
        int64_t end = std::min(at + stride, L);
        std::vector<int> incoming(text.begin() + at, text.begin() + end);
        Tensor logits =
            m.forward(incoming, &cache, adapted ? a.inference_resolver() : identity_resolver);
        int64_t n_targets = std::min(end + 1, L) - (at + 1);
        if (n_targets <= 0) continue;
        std::vector<int> targets(text.begin() + at + 1, text.begin() + at + 1 + n_targets);
        Tensor nll = cross_entropy(slice_rows(logits, 0, static_cast<int>(n_targets)), targets);
        total_nll += nll.item() * static_cast<double>(n_targets);
        scored += n_targets;
    }

    a.restore();
    a.reset_states();
    if (scored == 0) throw std::logic_error("eval_window_ppl: nothing scored");
    return std::exp(total_nll / static_cast<double>(scored));
}

}  // namespace streamadapter
