// Latency/memory benchmark: per-token generation wall-clock and peak
// live-value counts across prefill lengths, for the streaming-adapted mode and
// the full-context baseline.

#pragma once

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "streamadapter/inference.hpp"

namespace streamadapter {

struct BenchCell {
    int64_t prefill_len = 0;
    std::string mode;  // "adapted" | "full"
    double median_per_token_s = 0.0;
    double min_per_token_s = 0.0;
    double max_per_token_s = 0.0;
    int64_t peak_live_values = 0;
    int64_t gen_tokens = 0;
};

namespace bench_detail {

inline double time_generation(AdaptedModel& a, const std::vector<int>& prompt, const std::string& mode,
                              const HybridConfig& cfg, int64_t new_tokens) {
    HybridConfig c = cfg;
    c.max_new_tokens = new_tokens;
    auto t0 = std::chrono::steady_clock::now();
    if (mode == "adapted") {
        generate_streaming(a, prompt, c);
    } else {
        generate_full_context(*a.base, prompt, c.max_new_tokens);
    }
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count();
}

// Steady-state decode cost per token: time runs producing g and 2g tokens from
// the same prompt and divide the difference, so the shared prefill cancels.
inline double per_token_decode_s(AdaptedModel& a, const std::vector<int>& prompt, const std::string& mode,
                                 const HybridConfig& cfg) {
    double t_short = time_generation(a, prompt, mode, cfg, cfg.max_new_tokens);
    double t_long = time_generation(a, prompt, mode, cfg, 2 * cfg.max_new_tokens);
    return std::max(0.0, t_long - t_short) / static_cast<double>(cfg.max_new_tokens);
}

}  // namespace bench_detail

// Median-of-repeats per-token decode latency (prefill excluded via the
// difference of a short and a long run), with a warmup run excluded, plus the
// peak live-value count across the measured runs.
inline std::vector<BenchCell> bench_latency(AdaptedModel& a, const std::vector<int64_t>& prefill_lengths,
                                            const std::vector<std::string>& modes, const HybridConfig& cfg,
                                            int repeats = 5, uint64_t prompt_seed = 1234) {
    if (repeats < 1) throw std::invalid_argument("bench_latency: repeats must be >= 1");
    std::vector<BenchCell> out;
    for (const auto& mode : modes) {
        if (mode != "adapted" && mode != "full") throw std::invalid_argument("bench_latency: unknown mode " + mode);
        for (int64_t len : prefill_lengths) {
            std::mt19937_64 rng(prompt_seed + static_cast<uint64_t>(len));
            std::uniform_int_distribution<int> d(0, a.base->cfg.vocab_size - 1);
            std::vector<int> prompt(len);
            for (auto& t : prompt) t = d(rng);

            bench_detail::time_generation(a, prompt, mode, cfg, cfg.max_new_tokens);  // warmup, excluded

            live_values::reset_peak();
            std::vector<double> times;
            for (int r = 0; r < repeats; ++r) times.push_back(bench_detail::per_token_decode_s(a, prompt, mode, cfg));
            int64_t peak = live_values::peak().load();

            std::sort(times.begin(), times.end());
            BenchCell cell;
            cell.prefill_len = len;
            cell.mode = mode;
            cell.median_per_token_s = times[times.size() / 2];
            cell.min_per_token_s = times.front();
            cell.max_per_token_s = times.back();
            cell.peak_live_values = peak;
            cell.gen_tokens = cfg.max_new_tokens;
            out.push_back(cell);
        }
    }
    return out;
}

}  // namespace streamadapter
