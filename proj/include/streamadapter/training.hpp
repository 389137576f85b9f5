// Optimizer and the three training loops: base-model pretraining, sliding-
// window adapter training over long sequences, and the two-forward-one-backward
// in-context adapter training. The base model is frozen during adapter runs.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamadapter/absorption.hpp"
#include "streamadapter/model.hpp"

namespace streamadapter {

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double eps = 1e-8;
    int64_t warmup_steps = 0;
    int64_t epochs = 1;

    void validate() const {
        if (lr <= 0.0) throw std::invalid_argument("OptimizerConfig: lr must be positive");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw std::invalid_argument("OptimizerConfig: betas must lie in [0,1)");
        if (weight_decay < 0.0) throw std::invalid_argument("OptimizerConfig: weight_decay must be >= 0");
        if (warmup_steps < 0) throw std::invalid_argument("OptimizerConfig: warmup_steps must be >= 0");
        if (epochs < 1) throw std::invalid_argument("OptimizerConfig: epochs must be >= 1");
    }
};

// AdamW with decoupled weight decay and a linear-warmup-then-cosine schedule
// that starts at zero and decays back to zero over total_steps.
class AdamW {
  public:
    AdamW(const OptimizerConfig& cfg, int64_t total_steps) : cfg_(cfg), total_steps_(total_steps) {
        cfg.validate();
        if (total_steps < 1) throw std::invalid_argument("AdamW: total_steps must be >= 1");
        if (cfg.warmup_steps > total_steps) throw std::invalid_argument("AdamW: warmup exceeds total_steps");
    }

    int64_t step_count() const { return step_; }

    // Schedule value for 0-based step index s.
    double lr_at(int64_t s) const {
        if (cfg_.warmup_steps > 0 && s < cfg_.warmup_steps)
            return cfg_.lr * static_cast<double>(s) / static_cast<double>(cfg_.warmup_steps);
        int64_t decay_span = total_steps_ - cfg_.warmup_steps;
        if (decay_span <= 0) return cfg_.lr;
        double t = static_cast<double>(s - cfg_.warmup_steps) / static_cast<double>(decay_span);
        t = std::min(1.0, std::max(0.0, t));
        return cfg_.lr * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
    }

    // Applies one update from the accumulated gradients, then advances the
    // schedule. Gradients are left untouched; call zero_grad afterwards.
    void step(std::vector<Parameter>& params) {
        double lr = lr_at(step_);
        ++step_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& p : params) {
            const auto& g = p.tensor.grad();
            auto& st = state_[p.name];
            if (st.m.empty()) {
                st.m.assign(g.size(), 0.0);
                st.v.assign(g.size(), 0.0);
            }
            if (st.m.size() != g.size())
                throw std::invalid_argument("AdamW: parameter " + p.name + " changed size between steps");
            auto& w = p.tensor.mutable_data();
            for (size_t i = 0; i < g.size(); ++i) {
                if (!std::isfinite(g[i]))
                    throw std::runtime_error("AdamW: non-finite gradient in " + p.name + " at step " +
                                             std::to_string(step_ - 1));
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                double mhat = st.m[i] / bc1;
                double vhat = st.v[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
            }
        }
    }

    static void zero_grad(std::vector<Parameter>& params) {
        for (auto& p : params) p.tensor.zero_grad();
    }

  private:
    struct Moments {
        std::vector<double> m, v;
    };
    OptimizerConfig cfg_;
    int64_t total_steps_;
    int64_t step_ = 0;
    std::map<std::string, Moments> state_;
};

// One JSON-lines record per optimizer step; hooked up by the CLI.
using StepCallback = std::function<void(int64_t step, double lr, double loss)>;

inline double sequence_loss(const Model& m, const std::vector<int>& seq, const WeightResolver& resolve,
                            bool compute_grad) {
    std::vector<int> inputs(seq.begin(), seq.end() - 1);
    std::vector<int> targets(seq.begin() + 1, seq.end());
    Tensor loss = cross_entropy(m.forward_train(inputs, resolve), targets);
    if (compute_grad) backward(loss);
    return loss.item();
}

struct PretrainResult {
    std::vector<double> step_losses;
    double heldout_loss_init = 0.0;
    double heldout_loss_final = 0.0;
};

inline double mean_heldout_loss(const Model& m, const std::vector<std::vector<int>>& heldout) {
    NoGradGuard ng;
    double total = 0.0;
    int64_t n = 0;
    for (const auto& seq : heldout) {
        if (seq.size() < 2) continue;
        total += sequence_loss(m, seq, identity_resolver, false) * static_cast<double>(seq.size() - 1);
        n += static_cast<int64_t>(seq.size()) - 1;
    }
    if (n == 0) throw std::invalid_argument("mean_heldout_loss: no scoreable tokens");
    return total / static_cast<double>(n);
}

// Next-token training of the base model itself; afterwards the weights are
// frozen so adapter training can never touch them.
inline PretrainResult pretrain_base(Model& m, const std::vector<std::vector<int>>& train_seqs,
                                    const std::vector<std::vector<int>>& heldout_seqs, const OptimizerConfig& opt,
                                    uint64_t seed, const StepCallback& on_step = nullptr) {
    opt.validate();
    if (train_seqs.empty()) throw std::invalid_argument("pretrain_base: empty corpus");
    for (const auto& s : train_seqs)
        if (s.size() < 2) throw std::invalid_argument("pretrain_base: sequences need >= 2 tokens");

    PretrainResult res;
    res.heldout_loss_init = heldout_seqs.empty() ? 0.0 : mean_heldout_loss(m, heldout_seqs);

    m.set_trainable(true);
    auto params = m.parameters();
    int64_t total_steps = opt.epochs * static_cast<int64_t>(train_seqs.size());
    AdamW optimizer(opt, total_steps);
    std::mt19937_64 rng(seed);
    std::vector<size_t> order(train_seqs.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int64_t e = 0; e < opt.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t idx : order) {
            AdamW::zero_grad(params);
            double loss = sequence_loss(m, train_seqs[idx], identity_resolver, true);
            if (!std::isfinite(loss))
                throw std::runtime_error("pretrain_base: loss diverged to " + std::to_string(loss) + " at step " +
                                         std::to_string(optimizer.step_count()));
            double lr = optimizer.lr_at(optimizer.step_count());
            optimizer.step(params);
            res.step_losses.push_back(loss);
            if (on_step) on_step(optimizer.step_count() - 1, lr, loss);
        }
    }
    AdamW::zero_grad(params);
    m.set_trainable(false);
    res.heldout_loss_final = heldout_seqs.empty() ? 0.0 : mean_heldout_loss(m, heldout_seqs);
    return res;
}

struct SlidingWindowPlan {
    int64_t seq_len = 8192;
    int64_t window = 1024;  // C'
    int64_t stride = 512;   // delta

    void validate(const MappingConfig& mcfg) const {
        if (window <= 0 || stride <= 0 || seq_len <= 0)
            throw std::invalid_argument("SlidingWindowPlan: all fields must be positive");
        if (mcfg.chunk_size > 0 && window <= mcfg.chunk_size)
            throw std::invalid_argument("SlidingWindowPlan: window must exceed the mapping chunk size");
        if (stride > window) throw std::invalid_argument("SlidingWindowPlan: stride must not exceed window");
        if (mcfg.chunk_size > 0 && stride % mcfg.chunk_size != 0)
            throw std::invalid_argument("SlidingWindowPlan: stride must be a multiple of the chunk size");
        if (seq_len <= window) throw std::invalid_argument("SlidingWindowPlan: seq_len must exceed window");
    }

    int64_t strides_per_sequence() const { return (seq_len - window + stride - 1) / stride; }
};

// Consumes one long sequence: prefill the first C' tokens, then repeatedly
// evict delta tokens into the adapter states, recompute effective weights from
// the cumulative state, and score the next delta incoming tokens. Returns the
// accumulated (taped) loss summed over strides plus the scored token count.
inline std::pair<Tensor, int64_t> sliding_window_sequence_loss(AdaptedModel& a, const std::vector<int>& seq,
                                                              const SlidingWindowPlan& plan) {
    const Model& m = *a.base;
    if (static_cast<int64_t>(seq.size()) != plan.seq_len)
        throw std::invalid_argument("sliding_window_sequence_loss: sequence length does not match plan");
    a.reset_states();

    KVCache cache;
    {
        NoGradGuard ng;
        std::vector<int> head(seq.begin(), seq.begin() + plan.window);
        cache = m.prefill(head).second;
    }

    Tensor total;
    int64_t scored = 0;
    int64_t L = plan.seq_len;
    for (int64_t at = plan.window; at < L; at += plan.stride) {
        EvictedSlices ev = evict_oldest(cache, static_cast<int>(plan.stride));
        a.map_evicted(ev);
        int64_t end = std::min(at + plan.stride, L);
        std::vector<int> incoming(seq.begin() + at, seq.begin() + end);
        Tensor logits = m.forward(incoming, &cache, a.taped_resolver());
        int64_t n_targets = std::min(end + 1, L) - (at + 1);
        if (n_targets <= 0) continue;
        std::vector<int> targets(seq.begin() + at + 1, seq.begin() + at + 1 + n_targets);
        Tensor stride_loss = cross_entropy(slice_rows(logits, 0, static_cast<int>(n_targets)), targets);
        stride_loss = scale(stride_loss, static_cast<double>(n_targets));
        total = total.defined() ? add(total, stride_loss) : stride_loss;
        scored += n_targets;
    }
    return {total, scored};
}

// One optimizer step per sequence on the loss accumulated across its strides.
inline std::vector<double> train_sliding_window(AdaptedModel& a, const std::vector<std::vector<int>>& seqs,
                                                const SlidingWindowPlan& plan, const OptimizerConfig& opt,
                                                uint64_t seed, const StepCallback& on_step = nullptr) {
    opt.validate();
    plan.validate(a.mcfg);
    if (seqs.empty()) throw std::invalid_argument("train_sliding_window: no sequences");
    if (a.absorbed()) throw std::logic_error("train_sliding_window: restore the model before training");

    auto params = a.parameters();
    int64_t total_steps = opt.epochs * static_cast<int64_t>(seqs.size());
    AdamW optimizer(opt, total_steps);
    std::mt19937_64 rng(seed);
    std::vector<size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), size_t{0});

    std::vector<double> losses;
    for (int64_t e = 0; e < opt.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t idx : order) {
            AdamW::zero_grad(params);
            auto [total, scored] = sliding_window_sequence_loss(a, seqs[idx], plan);
            Tensor mean_loss = scale(total, 1.0 / static_cast<double>(scored));
            backward(mean_loss);
            double loss = mean_loss.item();
            if (!std::isfinite(loss))
                throw std::runtime_error("train_sliding_window: loss diverged at step " +
                                         std::to_string(optimizer.step_count()));
            double lr = optimizer.lr_at(optimizer.step_count());
            optimizer.step(params);
            losses.push_back(loss);
            if (on_step) on_step(optimizer.step_count() - 1, lr, loss);
        }
    }
    AdamW::zero_grad(params);
    a.reset_states();
    return losses;
}

struct ICLTrainPlan {
    int64_t k = 10;  // demonstrations sampled per training example

    void validate() const {
        if (k < 1) throw std::invalid_argument("ICLTrainPlan: k must be >= 1");
    }
};

// One training example: a pool of rendered demonstrations, plus the query and
// its answer tokens the loss is computed on.
struct ICLTrainSample {
    std::vector<std::vector<int>> demos;
    std::vector<int> query;
    std::vector<int> answer;
};

// Two forward passes, one backward: pass 1 prefills k demonstrations with the
// tape off; pass 2 maps that cache into the adapter states, recomputes the
// effective weights, and scores the answer given only the query (the
// demonstrations exist solely as the weight update).
inline Tensor icl_sample_loss(AdaptedModel& a, const ICLTrainSample& s, const ICLTrainPlan& plan,
                              std::mt19937_64& rng) {
    const Model& m = *a.base;
    if (static_cast<int64_t>(s.demos.size()) < plan.k)
        throw std::invalid_argument("icl_sample_loss: fewer demonstrations than k");
    if (s.query.empty() || s.answer.empty())
        throw std::invalid_argument("icl_sample_loss: query and answer must be non-empty");
    for (const auto& d : s.demos)
        if (d.empty()) throw std::invalid_argument("icl_sample_loss: empty demonstration");

    std::vector<size_t> pick(s.demos.size());
    std::iota(pick.begin(), pick.end(), size_t{0});
    std::shuffle(pick.begin(), pick.end(), rng);

    KVCache cache;
    {
        NoGradGuard ng;
        std::vector<int> ctx;
        for (int64_t i = 0; i < plan.k; ++i)
            ctx.insert(ctx.end(), s.demos[pick[i]].begin(), s.demos[pick[i]].end());
        cache = m.prefill(ctx).second;
    }

    a.reset_states();
    a.map_full_cache(cache);
    a.finalize_states();

    std::vector<int> full = s.query;
    full.insert(full.end(), s.answer.begin(), s.answer.end());
    std::vector<int> inputs(full.begin(), full.end() - 1);
    Tensor logits = m.forward_train(inputs, a.taped_resolver());
    int q = static_cast<int>(s.query.size());
    Tensor ans_logits = slice_rows(logits, q - 1, static_cast<int>(inputs.size()));
    return cross_entropy(ans_logits, s.answer);
}

inline std::vector<double> train_in_context(AdaptedModel& a, const std::vector<ICLTrainSample>& samples,
                                            const ICLTrainPlan& plan, const OptimizerConfig& opt, uint64_t seed,
                                            const StepCallback& on_step = nullptr) {
    opt.validate();
    plan.validate();
    if (samples.empty()) throw std::invalid_argument("train_in_context: no samples");
    if (a.absorbed()) throw std::logic_error("train_in_context: restore the model before training");

    auto params = a.parameters();
    int64_t total_steps = opt.epochs * static_cast<int64_t>(samples.size());
    AdamW optimizer(opt, total_steps);
    std::mt19937_64 rng(seed);
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), size_t{0});

    std::vector<double> losses;
    for (int64_t e = 0; e < opt.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t idx : order) {
            AdamW::zero_grad(params);
            Tensor loss_t = icl_sample_loss(a, samples[idx], plan, rng);
            backward(loss_t);
            double loss = loss_t.item();
            if (!std::isfinite(loss))
                throw std::runtime_error("train_in_context: loss diverged at step " +
                                         std::to_string(optimizer.step_count()));
            double lr = optimizer.lr_at(optimizer.step_count());
            optimizer.step(params);
            losses.push_back(loss);
            if (on_step) on_step(optimizer.step_count() - 1, lr, loss);
        }
    }
    AdamW::zero_grad(params);
    a.reset_states();
    return losses;
}

}  // namespace streamadapter
