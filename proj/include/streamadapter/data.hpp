// Seeded synthetic data: byte-level toy classification families with
// seen/unseen splits and multiple surface templates, a long-range key-value
// recall corpus, and a pretraining mixture that teaches the episode format.

#pragma once

#include <algorithm>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamadapter/inference.hpp"
#include "streamadapter/training.hpp"

namespace streamadapter {

inline std::vector<int> byte_tokens(const std::string& s) {
    std::vector<int> t;
    t.reserve(s.size());
    for (unsigned char c : s) t.push_back(static_cast<int>(c));
    return t;
}

struct TaskTemplate {
    std::string id;
    std::string prefix;
    std::string suffix;
};

struct TaskExample {
    std::string input;
    int label = 0;  // index into TaskFamily::labels
};

struct TaskFamily {
    std::string id;
    bool seen = true;
    bool episode_relabel = false;  // labels only meaningful relative to the episode
    std::vector<std::string> labels;
    std::vector<TaskTemplate> templates;
    std::vector<TaskExample> train;
    std::vector<TaskExample> test;

    const TaskTemplate& find_template(const std::string& tid) const {
        for (const auto& t : templates)
            if (t.id == tid) return t;
        throw std::invalid_argument("TaskFamily " + id + ": unknown template " + tid);
    }
};

// Query rendering stops exactly where the label is scored.
inline std::vector<int> render_query(const TaskFamily& f, const TaskExample& ex, const std::string& template_id) {
    const TaskTemplate& t = f.find_template(template_id);
    return byte_tokens(t.prefix + ex.input + t.suffix);
}

inline std::vector<int> render_demo(const TaskFamily& f, const TaskExample& ex, const std::string& template_id) {
    std::vector<int> q = render_query(f, ex, template_id);
    std::vector<int> lbl = byte_tokens(f.labels.at(ex.label));
    q.insert(q.end(), lbl.begin(), lbl.end());
    q.push_back('\n');
    return q;
}

namespace taskgen {

inline const std::string kFiller = "acde";

inline std::string filler(std::mt19937_64& rng, int n) {
    std::uniform_int_distribution<size_t> d(0, kFiller.size() - 1);
    std::string s;
    for (int i = 0; i < n; ++i) s.push_back(kFiller[d(rng)]);
    return s;
}

// T1 scores the label right after the input's last character (the cheapest
// lookup circuit); T2 interposes a bracket so the same rule must survive one
// token of separation.
inline std::vector<TaskTemplate> default_templates() {
    return {{"T1", "#", ""}, {"T2", "[", "]"}};
}

// Trailing marker x/y; the marker-to-label pairing is fixed only within an
// episode, so the stored labels use the canonical pairing. The marker ends
// the input so it sits right before the label position.
inline TaskFamily gen_label_remap(std::mt19937_64& rng, int n_train, int n_test) {
    TaskFamily f;
    f.id = "label_remap";
    f.seen = true;
    f.episode_relabel = true;
    f.labels = {"P", "Q"};
    f.templates = default_templates();
    std::set<std::string> used;
    auto gen = [&](int n, std::vector<TaskExample>& out) {
        std::uniform_int_distribution<int> coin(0, 1);
        while (static_cast<int>(out.size()) < n) {
            int m = coin(rng);
            std::string s = filler(rng, 5);
            s[4] = m == 0 ? 'x' : 'y';
            if (!used.insert(s).second) continue;
            out.push_back({s, m});
        }
    };
    gen(n_train, f.train);
    gen(n_test, f.test);
    return f;
}

// Trailing keyword g -> P, b -> Q; the rule is fixed across episodes but never
// appears in pretraining, so it must be read off the demonstrations.
inline TaskFamily gen_keyword(std::mt19937_64& rng, int n_train, int n_test) {
    TaskFamily f;
    f.id = "keyword";
    f.seen = true;
    f.labels = {"P", "Q"};
    f.templates = default_templates();
    std::set<std::string> used;
    auto gen = [&](int n, std::vector<TaskExample>& out) {
        std::uniform_int_distribution<int> coin(0, 1);
        while (static_cast<int>(out.size()) < n) {
            int m = coin(rng);
            std::string s = filler(rng, 5);
            s[4] = m == 0 ? 'g' : 'b';
            if (!used.insert(s).second) continue;
            out.push_back({s, m});
        }
    };
    gen(n_train, f.train);
    gen(n_test, f.test);
    return f;
}

// Trailing '*' vs trailing '**' decide the label; the assignment flips per
// episode so a frozen reader with no demonstrations is at chance by
// construction.
inline TaskFamily gen_parity(std::mt19937_64& rng, int n_train, int n_test) {
    TaskFamily f;
    f.id = "parity";
    f.seen = true;
    f.episode_relabel = true;
    f.labels = {"P", "Q"};
    f.templates = default_templates();
    std::set<std::string> used;
    auto gen = [&](int n, std::vector<TaskExample>& out) {
        std::uniform_int_distribution<int> coin(0, 1);
        while (static_cast<int>(out.size()) < n) {
            int m = coin(rng);
            std::string s = filler(rng, 5);
            for (int i = 0; i <= m; ++i) s[4 - i] = '*';
            if (!used.insert(s).second) continue;
            out.push_back({s, m});
        }
    };
    gen(n_train, f.train);
    gen(n_test, f.test);
    return f;
}

// Unseen family: a trailing fresh marker u/w decides the label; same filler
// vocabulary as the seen families, different rule and markers.
inline TaskFamily gen_copy_transform(std::mt19937_64& rng, int n_train, int n_test) {
    TaskFamily f;
    f.id = "copy_transform";
    f.seen = false;
    f.episode_relabel = true;
    f.labels = {"P", "Q"};
    f.templates = default_templates();
    std::set<std::string> used;
    auto gen = [&](int n, std::vector<TaskExample>& out) {
        std::uniform_int_distribution<int> coin(0, 1);
        while (static_cast<int>(out.size()) < n) {
            int m = coin(rng);
            std::string s = filler(rng, 4) + "-" + (m == 0 ? "u" : "w");
            if (!used.insert(s).second) continue;
            out.push_back({s, m});
        }
    };
    gen(n_train, f.train);
    gen(n_test, f.test);
    return f;
}

// Unseen family: balanced parenthesis string -> P, unbalanced -> Q.
inline TaskFamily gen_brackets(std::mt19937_64& rng, int n_train, int n_test) {
    TaskFamily f;
    f.id = "brackets";
    f.seen = false;
    f.labels = {"P", "Q"};
    f.templates = default_templates();
    std::set<std::string> used;
    auto balanced = [](const std::string& s) {
        int depth = 0;
        for (char c : s) {
            depth += c == '(' ? 1 : -1;
            if (depth < 0) return false;
        }
        return depth == 0;
    };
    auto gen = [&](int n, std::vector<TaskExample>& out) {
        std::uniform_int_distribution<int> coin(0, 1), len(1, 5);
        int want = 0;  // alternate so labels stay balanced
        while (static_cast<int>(out.size()) < n) {
            std::string s;
            int m = 2 + 2 * len(rng);  // even lengths 4..12 keep balance possible
            for (int i = 0; i < m; ++i) s.push_back(coin(rng) == 0 ? '(' : ')');
            int lbl = balanced(s) ? 0 : 1;
            if (lbl != want) continue;
            if (!used.insert(s).second) continue;
            out.push_back({s, lbl});
            want = 1 - want;
        }
    };
    gen(n_train, f.train);
    gen(n_test, f.test);
    return f;
}

}  // namespace taskgen

inline std::vector<TaskFamily> gen_task_families(uint64_t seed, int n_train = 64, int n_test = 32) {
    std::mt19937_64 rng(seed);
    std::vector<TaskFamily> out;
    out.push_back(taskgen::gen_label_remap(rng, n_train, n_test));
    out.push_back(taskgen::gen_keyword(rng, n_train, n_test));
    out.push_back(taskgen::gen_parity(rng, n_train, n_test));
    out.push_back(taskgen::gen_copy_transform(rng, n_train, n_test));
    out.push_back(taskgen::gen_brackets(rng, n_train, n_test));
    return out;
}

// Builds one k-shot episode: demonstrations from the train split, the query
// from the requested split, labels flipped together for episode-relabel
// families. Demo and query templates may differ (robustness analysis).
inline ClassificationExample make_episode(const TaskFamily& f, int k, bool query_from_test, std::mt19937_64& rng,
                                          const std::string& demo_template, const std::string& query_template) {
    if (k < 0) throw std::invalid_argument("make_episode: k must be >= 0");
    const auto& demo_pool = f.train;
    const auto& query_pool = query_from_test ? f.test : f.train;
    if (static_cast<int>(demo_pool.size()) < k + (query_from_test ? 0 : 1))
        throw std::invalid_argument("make_episode: demonstration pool too small for k");

    std::uniform_int_distribution<size_t> qd(0, query_pool.size() - 1);
    size_t qi = qd(rng);
    const TaskExample& query = query_pool[qi];

    std::vector<size_t> pick(demo_pool.size());
    std::iota(pick.begin(), pick.end(), size_t{0});
    std::shuffle(pick.begin(), pick.end(), rng);

    int flip = 0;
    if (f.episode_relabel) flip = static_cast<int>(rng() & 1u);

    ClassificationExample ex;
    int taken = 0;
    for (size_t idx : pick) {
        if (taken == k) break;
        if (!query_from_test && idx == qi) continue;  // split hygiene
        TaskExample d = demo_pool[idx];
        d.label ^= flip;
        ex.demos.push_back(render_demo(f, d, demo_template));
        ++taken;
    }
    if (taken != k) throw std::logic_error("make_episode: could not draw k distinct demonstrations");
    ex.query = render_query(f, query, query_template);
    for (const auto& l : f.labels) ex.options.push_back(byte_tokens(l));
    ex.correct = query.label ^ flip;
    return ex;
}

// `n_context` extra demonstrations are folded into the target sequence ahead
// of the query. At mixed absorb/retain ratios the scored query follows
// retained demonstrations in the attention window; training on samples with
// the same shape keeps the adapter's readout query-local instead of letting
// it key on aggregate context statistics that flip sign once demonstrations
// share the window with the query.
inline ICLTrainSample make_icl_train_sample(const TaskFamily& f, int pool_size, std::mt19937_64& rng,
                                            const std::string& template_id, int n_context = 0) {
    if (n_context < 0) throw std::invalid_argument("make_icl_train_sample: n_context must be >= 0");
    ClassificationExample ex = make_episode(f, pool_size + n_context, false, rng, template_id, template_id);
    ICLTrainSample s;
    s.demos.assign(ex.demos.begin(), ex.demos.begin() + pool_size);
    for (int i = pool_size; i < pool_size + n_context; ++i)
        s.query.insert(s.query.end(), ex.demos[i].begin(), ex.demos[i].end());
    s.query.insert(s.query.end(), ex.query.begin(), ex.query.end());
    s.answer = ex.options.at(ex.correct);
    return s;
}

// ---- long-range recall corpus ----

struct RecallParams {
    int64_t n_tokens = 1 << 16;
    int n_keys = 4;               // keys 'A'..'A'+n_keys-1
    int n_values = 8;             // values '0'..'0'+n_values-1
    int64_t gap_min = 96;         // filler tokens between definition and query
    int64_t gap_max = 192;
    int64_t queries_per_doc = 4;

    void validate() const {
        if (n_tokens < 64) throw std::invalid_argument("RecallParams: corpus too small");
        if (n_keys < 1 || n_keys > 26) throw std::invalid_argument("RecallParams: n_keys out of range");
        if (n_values < 2 || n_values > 10) throw std::invalid_argument("RecallParams: n_values out of range");
        if (gap_min < 1 || gap_max < gap_min) throw std::invalid_argument("RecallParams: bad gap range");
        if (queries_per_doc < 1) throw std::invalid_argument("RecallParams: queries_per_doc must be >= 1");
    }
};

namespace recallgen {

// Low-entropy filler from a 2nd-order cycle so value tokens dominate the
// perplexity difference between memory and no-memory models.
inline void emit_filler(std::string& out, std::mt19937_64& rng, int64_t n) {
    static const std::string cyc = "lmnop";
    std::uniform_int_distribution<int> jump(0, 9);
    size_t at = rng() % cyc.size();
    for (int64_t i = 0; i < n; ++i) {
        out.push_back(cyc[at]);
        at = (at + (jump(rng) == 0 ? 2 : 1)) % cyc.size();
    }
}

}  // namespace recallgen

// Documents declare `K=v;` once per key near the start, then query `K?v;` at
// sampled gaps. A reader that remembers the register achieves near-zero loss
// on the value byte after `K?`; a reader whose window lost the definition
// cannot do better than the value marginal.
inline std::vector<int> gen_recall_corpus(uint64_t seed, const RecallParams& p) {
    p.validate();
    std::mt19937_64 rng(seed);
    std::string out;
    std::uniform_int_distribution<int> vd(0, p.n_values - 1);
    std::uniform_int_distribution<int64_t> gd(p.gap_min, p.gap_max);
    std::uniform_int_distribution<int> kd(0, p.n_keys - 1);
    while (static_cast<int64_t>(out.size()) < p.n_tokens) {
        std::vector<char> value(p.n_keys);
        for (int i = 0; i < p.n_keys; ++i) value[i] = static_cast<char>('0' + vd(rng));
        for (int i = 0; i < p.n_keys; ++i) {
            out.push_back(static_cast<char>('A' + i));
            out.push_back('=');
            out.push_back(value[i]);
            out.push_back(';');
        }
        for (int64_t q = 0; q < p.queries_per_doc; ++q) {
            recallgen::emit_filler(out, rng, gd(rng));
            int k = kd(rng);
            out.push_back(static_cast<char>('A' + k));
            out.push_back('?');
            out.push_back(value[k]);
            out.push_back(';');
        }
        out.push_back('\n');
    }
    out.resize(p.n_tokens);
    return byte_tokens(out);
}

// Positions of the predictable value byte (the token right after 'K?').
inline std::vector<int64_t> recall_value_positions(const std::vector<int>& corpus) {
    std::vector<int64_t> pos;
    for (size_t i = 2; i < corpus.size(); ++i)
        if (corpus[i - 1] == '?' && corpus[i - 2] >= 'A' && corpus[i - 2] <= 'Z') pos.push_back(static_cast<int64_t>(i));
    return pos;
}

// ---- pretraining mixture ----

// Teaches byte statistics, the episode format, and in-episode induction: each
// episode pairs fresh markers with labels at random, so the pairing can only
// be resolved by looking it up earlier in the sequence.
// Relative document frequencies in the pretraining stream. Copy documents
// (repeated random segments) induce the content-agnostic copy circuit that
// underlies both in-context task lookup and key-value recall; that circuit
// only emerges when its gradient is not swamped by the local statistics of
// the other document kinds, so a copy-only warm-up phase followed by the full
// mixture is the most reliable recipe.
struct PretrainMix {
    int filler = 1;
    int recall = 1;
    int copy = 4;
    int episode = 2;

    void validate() const {
        if (filler < 0 || recall < 0 || copy < 0 || episode < 0 || filler + recall + copy + episode == 0)
            throw std::invalid_argument("PretrainMix: weights must be non-negative and not all zero");
    }
};

inline std::vector<std::vector<int>> gen_pretrain_sequences(uint64_t seed, int n_seqs, int seq_len,
                                                            const PretrainMix& mix = {}) {
    if (n_seqs < 1 || seq_len < 16) throw std::invalid_argument("gen_pretrain_sequences: bad sizes");
    mix.validate();
    std::mt19937_64 rng(seed);
    const std::string markers = "xygb*uw";
    const std::string labels = "PQRS";
    std::vector<std::vector<int>> seqs;
    std::uniform_int_distribution<int> kd(0, mix.filler + mix.recall + mix.copy + mix.episode - 1);
    RecallParams rp;
    rp.n_tokens = std::max<int64_t>(64, seq_len);
    rp.gap_min = 4;
    rp.gap_max = std::max<int64_t>(8, seq_len / 8);
    rp.queries_per_doc = 3;
    for (int s = 0; s < n_seqs; ++s) {
        std::string text;
        int k = kd(rng);
        int kind = k < mix.filler                         ? 0
                   : k < mix.filler + mix.recall          ? 1
                   : k < mix.filler + mix.recall + mix.copy ? 2
                                                           : 3;
        switch (kind) {
            case 0: {  // filler only
                recallgen::emit_filler(text, rng, seq_len);
                break;
            }
            case 1: {  // recall-style document
                auto toks = gen_recall_corpus(rng(), rp);
                seqs.emplace_back(toks.begin(), toks.begin() + seq_len);
                continue;
            }
            case 2: {  // repeated random segment: after one pass over the
                       // segment, every token's successor is predictable by
                       // matching its previous occurrence, which drives the
                       // formation of a content-agnostic copy circuit
                std::uniform_int_distribution<int> seg_len(24, 64), cd(0, 63);
                const std::string alpha =
                    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789*#";
                std::string seg;
                int n = seg_len(rng);
                for (int i = 0; i < n; ++i) seg.push_back(alpha[static_cast<size_t>(cd(rng))]);
                while (static_cast<int>(text.size()) < seq_len) text += seg;
                break;
            }
            default: {  // one induction episode, in the task surface format,
                        // spanning the whole sequence: a single marker/label
                        // pairing per context, so lookups never hit stale rules
                std::uniform_int_distribution<size_t> md(0, markers.size() - 1);
                std::uniform_int_distribution<size_t> ld(0, labels.size() - 1);
                std::uniform_int_distribution<int> td(0, 1), coin(0, 1);
                char m1 = markers[md(rng)];
                char m2 = markers[md(rng)];
                while (m2 == m1) m2 = markers[md(rng)];
                char l1 = labels[ld(rng)];
                char l2 = labels[ld(rng)];
                while (l2 == l1) l2 = labels[ld(rng)];
                int tpl = td(rng);
                while (static_cast<int>(text.size()) < seq_len) {
                    int which = coin(rng);
                    std::string body = taskgen::filler(rng, 5);
                    body[4] = which == 0 ? m1 : m2;
                    std::string pre = tpl == 0 ? "#" : "[";
                    std::string suf = tpl == 0 ? "" : "]";
                    text += pre + body + suf;
                    text.push_back(which == 0 ? l1 : l2);
                    text.push_back('\n');
                }
                break;
            }
        }
        text.resize(seq_len);
        seqs.push_back(byte_tokens(text));
    }
    return seqs;
}

}  // namespace streamadapter
