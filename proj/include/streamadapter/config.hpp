// One structured JSON document configures a run end to end. Unknown keys are
// rejected with their full path so typos never silently fall back to defaults.

#pragma once

#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "streamadapter/data.hpp"
#include "streamadapter/inference.hpp"
#include "streamadapter/model.hpp"
#include "streamadapter/training.hpp"

namespace streamadapter {

struct DataConfig {
    uint64_t task_seed = 1;
    int n_train = 64;
    int n_test = 32;
    uint64_t corpus_seed = 1;
    int pretrain_seqs = 96;
    int pretrain_len = 256;
    PretrainMix mix;
};

struct RunConfig {
    ModelConfig model;
    MappingConfig mapping;
    SlidingWindowPlan sliding_window;
    ICLTrainPlan icl;
    OptimizerConfig optimizer;
    HybridConfig hybrid;
    RecallParams recall;
    DataConfig data;
    uint64_t seed = 0;
    std::string out_dir = "out";
    std::string base_checkpoint;
    std::string adapter_checkpoint;
};

namespace cfg_detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw std::invalid_argument("config: " + path + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw std::invalid_argument("config: unknown key " + (path.empty() ? it.key() : path + "." + it.key()));
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void parse_model(const json& j, ModelConfig& m) {
    check_keys(j, "model",
               {"vocab_size", "d_model", "n_heads", "head_dim", "n_blocks", "ffn_hidden", "max_positions",
                "rope_base"});
    read(j, "vocab_size", m.vocab_size);
    read(j, "d_model", m.d_model);
    read(j, "n_heads", m.n_heads);
    read(j, "head_dim", m.head_dim);
    read(j, "n_blocks", m.n_blocks);
    read(j, "ffn_hidden", m.ffn_hidden);
    read(j, "max_positions", m.max_positions);
    read(j, "rope_base", m.rope_base);
}

inline void parse_mapping(const json& j, MappingConfig& m) {
    check_keys(j, "mapping", {"chunk_size", "n_queries", "down_dim", "tau"});
    read(j, "chunk_size", m.chunk_size);
    read(j, "n_queries", m.n_queries);
    read(j, "down_dim", m.down_dim);
    read(j, "tau", m.tau);
}

inline void parse_sliding_window(const json& j, SlidingWindowPlan& p) {
    check_keys(j, "sliding_window", {"seq_len", "window", "stride"});
    read(j, "seq_len", p.seq_len);
    read(j, "window", p.window);
    read(j, "stride", p.stride);
}

inline void parse_icl(const json& j, ICLTrainPlan& p) {
    check_keys(j, "icl", {"k"});
    read(j, "k", p.k);
}

inline void parse_optimizer(const json& j, OptimizerConfig& o) {
    check_keys(j, "optimizer", {"lr", "beta1", "beta2", "weight_decay", "eps", "warmup_steps", "epochs"});
    read(j, "lr", o.lr);
    read(j, "beta1", o.beta1);
    read(j, "beta2", o.beta2);
    read(j, "weight_decay", o.weight_decay);
    read(j, "eps", o.eps);
    read(j, "warmup_steps", o.warmup_steps);
    read(j, "epochs", o.epochs);
}

inline InferenceMode mode_from_string(const std::string& s) {
    if (s == "understanding") return InferenceMode::understanding;
    if (s == "generation") return InferenceMode::generation;
    if (s == "full_context") return InferenceMode::full_context;
    if (s == "naive_window") return InferenceMode::naive_window;
    throw std::invalid_argument("config: hybrid.mode has unknown value " + s);
}

inline std::string mode_to_string(InferenceMode m) {
    switch (m) {
        case InferenceMode::understanding: return "understanding";
        case InferenceMode::generation: return "generation";
        case InferenceMode::full_context: return "full_context";
        case InferenceMode::naive_window: return "naive_window";
    }
    return "understanding";
}

inline void parse_hybrid(const json& j, HybridConfig& h) {
    check_keys(j, "hybrid", {"mode", "ratio", "window", "stride", "max_new_tokens", "greedy"});
    if (j.contains("mode")) h.mode = mode_from_string(j.at("mode").get<std::string>());
    read(j, "ratio", h.ratio);
    read(j, "window", h.window);
    read(j, "stride", h.stride);
    read(j, "max_new_tokens", h.max_new_tokens);
    read(j, "greedy", h.greedy);
}

inline void parse_recall(const json& j, RecallParams& r) {
    check_keys(j, "recall", {"n_tokens", "n_keys", "n_values", "gap_min", "gap_max", "queries_per_doc"});
    read(j, "n_tokens", r.n_tokens);
    read(j, "n_keys", r.n_keys);
    read(j, "n_values", r.n_values);
    read(j, "gap_min", r.gap_min);
    read(j, "gap_max", r.gap_max);
    read(j, "queries_per_doc", r.queries_per_doc);
}

inline void parse_data(const json& j, DataConfig& d) {
    check_keys(j, "data", {"task_seed", "n_train", "n_test", "corpus_seed", "pretrain_seqs", "pretrain_len",
                           "mix_filler", "mix_recall", "mix_copy", "mix_episode"});
    read(j, "task_seed", d.task_seed);
    read(j, "n_train", d.n_train);
    read(j, "n_test", d.n_test);
    read(j, "corpus_seed", d.corpus_seed);
    read(j, "pretrain_seqs", d.pretrain_seqs);
    read(j, "pretrain_len", d.pretrain_len);
    read(j, "mix_filler", d.mix.filler);
    read(j, "mix_recall", d.mix.recall);
    read(j, "mix_copy", d.mix.copy);
    read(j, "mix_episode", d.mix.episode);
}

}  // namespace cfg_detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using namespace cfg_detail;
    check_keys(j, "",
               {"model", "mapping", "sliding_window", "icl", "optimizer", "hybrid", "recall", "data", "seed",
                "out_dir", "base_checkpoint", "adapter_checkpoint"});
    RunConfig c;
    if (j.contains("model")) parse_model(j.at("model"), c.model);
    if (j.contains("mapping")) parse_mapping(j.at("mapping"), c.mapping);
    if (j.contains("sliding_window")) parse_sliding_window(j.at("sliding_window"), c.sliding_window);
    if (j.contains("icl")) parse_icl(j.at("icl"), c.icl);
    if (j.contains("optimizer")) parse_optimizer(j.at("optimizer"), c.optimizer);
    if (j.contains("hybrid")) parse_hybrid(j.at("hybrid"), c.hybrid);
    if (j.contains("recall")) parse_recall(j.at("recall"), c.recall);
    if (j.contains("data")) parse_data(j.at("data"), c.data);
    read(j, "seed", c.seed);
    read(j, "out_dir", c.out_dir);
    read(j, "base_checkpoint", c.base_checkpoint);
    read(j, "adapter_checkpoint", c.adapter_checkpoint);
    return c;
}

// The fully-resolved document written next to every run's outputs.
inline nlohmann::json run_config_to_json(const RunConfig& c) {
    using cfg_detail::mode_to_string;
    return {
        {"model",
         {{"vocab_size", c.model.vocab_size},
          {"d_model", c.model.d_model},
          {"n_heads", c.model.n_heads},
          {"head_dim", c.model.head_dim},
          {"n_blocks", c.model.n_blocks},
          {"ffn_hidden", c.model.ffn_hidden},
          {"max_positions", c.model.max_positions},
          {"rope_base", c.model.rope_base}}},
        {"mapping",
         {{"chunk_size", c.mapping.chunk_size},
          {"n_queries", c.mapping.n_queries},
          {"down_dim", c.mapping.down_dim},
          {"tau", c.mapping.tau}}},
        {"sliding_window",
         {{"seq_len", c.sliding_window.seq_len},
          {"window", c.sliding_window.window},
          {"stride", c.sliding_window.stride}}},
        {"icl", {{"k", c.icl.k}}},
        {"optimizer",
         {{"lr", c.optimizer.lr},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"weight_decay", c.optimizer.weight_decay},
          {"eps", c.optimizer.eps},
          {"warmup_steps", c.optimizer.warmup_steps},
          {"epochs", c.optimizer.epochs}}},
        {"hybrid",
         {{"mode", mode_to_string(c.hybrid.mode)},
          {"ratio", c.hybrid.ratio},
          {"window", c.hybrid.window},
          {"stride", c.hybrid.stride},
          {"max_new_tokens", c.hybrid.max_new_tokens},
          {"greedy", c.hybrid.greedy}}},
        {"recall",
         {{"n_tokens", c.recall.n_tokens},
          {"n_keys", c.recall.n_keys},
          {"n_values", c.recall.n_values},
          {"gap_min", c.recall.gap_min},
          {"gap_max", c.recall.gap_max},
          {"queries_per_doc", c.recall.queries_per_doc}}},
        {"data",
         {{"task_seed", c.data.task_seed},
          {"n_train", c.data.n_train},
          {"n_test", c.data.n_test},
          {"corpus_seed", c.data.corpus_seed},
          {"pretrain_seqs", c.data.pretrain_seqs},
          {"pretrain_len", c.data.pretrain_len},
          {"mix_filler", c.data.mix.filler},
          {"mix_recall", c.data.mix.recall},
          {"mix_copy", c.data.mix.copy},
          {"mix_episode", c.data.mix.episode}}},
        {"seed", c.seed},
        {"out_dir", c.out_dir},
        {"base_checkpoint", c.base_checkpoint},
        {"adapter_checkpoint", c.adapter_checkpoint},
    };
}

}  // namespace streamadapter
