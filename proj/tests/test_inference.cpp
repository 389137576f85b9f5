#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "streamadapter/inference.hpp"

using namespace streamadapter;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.vocab_size = 32;
    c.d_model = 16;
    c.n_heads = 2;
    c.head_dim = 8;
    c.n_blocks = 2;
    c.ffn_hidden = 32;
    c.max_positions = 512;
    return c;
}

MappingConfig map_cfg() {
    MappingConfig c;
    c.chunk_size = 4;
    c.n_queries = 3;
    c.down_dim = 4;
    return c;
}

std::vector<int> rand_tokens(int n, uint64_t seed, int vocab = 32) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(0, vocab - 1);
    std::vector<int> t(n);
    for (auto& x : t) x = d(rng);
    return t;
}

ClassificationExample make_example(uint64_t seed, int k) {
    ClassificationExample ex;
    for (int i = 0; i < k; ++i) ex.demos.push_back(rand_tokens(5, seed * 100 + i));
    ex.query = rand_tokens(4, seed * 100 + 50);
    ex.options = {rand_tokens(2, seed * 100 + 60), rand_tokens(2, seed * 100 + 61)};
    ex.correct = 0;
    return ex;
}

// Plain ICL scoring used as an independent oracle for the ratio=0 path.
int classify_icl_oracle(const Model& m, const ClassificationExample& ex) {
    NoGradGuard ng;
    std::vector<int> ctx;
    for (const auto& d : ex.demos) ctx.insert(ctx.end(), d.begin(), d.end());
    int best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < ex.options.size(); ++i) {
        std::vector<int> full = ctx;
        full.insert(full.end(), ex.query.begin(), ex.query.end());
        full.insert(full.end(), ex.options[i].begin(), ex.options[i].end());
        Tensor logits = m.forward_train(full);
        int V = logits.dim(1);
        int start = static_cast<int>(full.size() - ex.options[i].size());
        double total = 0.0;
        for (size_t t = 0; t < ex.options[i].size(); ++t) {
            const double* row = logits.data().data() + (start - 1 + t) * V;
            double mx = *std::max_element(row, row + V);
            double lse = 0.0;
            for (int j = 0; j < V; ++j) lse += std::exp(row[j] - mx);
            total += row[ex.options[i][t]] - mx - std::log(lse);
        }
        double s = total / static_cast<double>(ex.options[i].size());
        if (s > best_score) {
            best_score = s;
            best = static_cast<int>(i);
        }
    }
    return best;
}

}  // namespace

TEST_CASE("hybrid config validation") {
    MappingConfig mc = map_cfg();
    HybridConfig h;
    h.window = 16;
    h.stride = 8;
    CHECK_NOTHROW(h.validate(mc));
    h.ratio = 1.5;
    CHECK_THROWS_AS(h.validate(mc), std::invalid_argument);
    h = HybridConfig{};
    h.window = 16;
    h.stride = 16;
    CHECK_THROWS_AS(h.validate(mc), std::invalid_argument);
    h.stride = 6;  // not a multiple of chunk 4
    CHECK_THROWS_AS(h.validate(mc), std::invalid_argument);
}

TEST_CASE("ratio 0 classification matches the plain in-context oracle") {
    Model m = Model::init(tiny_cfg(), 1);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 2);
    for (uint64_t s = 1; s <= 6; ++s) {
        auto ex = make_example(s, 4);
        CHECK(classify_hybrid(a, ex, 0.0) == classify_icl_oracle(m, ex));
    }
}

TEST_CASE("ratio 1 with an untrained adapter equals zero-shot") {
    Model m = Model::init(tiny_cfg(), 3);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 4);
    for (uint64_t s = 1; s <= 6; ++s) {
        auto ex = make_example(s, 4);
        auto zero_shot = ex;
        zero_shot.demos.clear();
        CHECK(classify_hybrid(a, ex, 1.0) == classify_hybrid(a, zero_shot, 0.0));
    }
}

TEST_CASE("absorbed/retained split sizes follow the ceiling rule") {
    // ratio 0.5 with k=4 -> 2 absorbed; non-trivial adapter changes merged
    // weights, so the split can be observed through state bookkeeping
    Model m = Model::init(tiny_cfg(), 5);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 6);
    auto ex = make_example(9, 4);  // each demo is 5 tokens
    classify_hybrid(a, ex, 0.5);
    // classify restores + resets; re-run the mapping half manually to count
    std::vector<int> absorbed_ctx;
    for (int i = 0; i < 2; ++i) absorbed_ctx.insert(absorbed_ctx.end(), ex.demos[i].begin(), ex.demos[i].end());
    auto [l, cache] = m.prefill(absorbed_ctx);
    CHECK(cache.length() == 10);  // 2 demos of 5 tokens feed the adapter
}

TEST_CASE("restore hygiene: probe output identical before and after evaluation") {
    Model m = Model::init(tiny_cfg(), 7);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 8);
    std::mt19937_64 wrng(9);
    for (auto& s : a.sites) s.abs.w2 = Tensor::randn({a.mcfg.n_queries, s.d_o}, wrng, 0.3).set_requires_grad(true);
    auto probe = rand_tokens(7, 10);
    Tensor before = m.forward_train(probe);
    std::vector<ClassificationExample> exs = {make_example(1, 3), make_example(2, 3)};
    eval_understanding(a, exs, 0.8);
    Tensor after = m.forward_train(probe);
    CHECK(before.data() == after.data());
    CHECK_FALSE(a.absorbed());
}

TEST_CASE("eval_understanding input validation") {
    Model m = Model::init(tiny_cfg(), 11);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 12);
    CHECK_THROWS_AS(eval_understanding(a, {}, 0.5), std::invalid_argument);
    ClassificationExample bad = make_example(1, 2);
    bad.options.pop_back();
    CHECK_THROWS_AS(classify_hybrid(a, bad, 0.5), std::invalid_argument);
    bad = make_example(1, 2);
    bad.query.clear();
    CHECK_THROWS_AS(classify_hybrid(a, bad, 0.5), std::invalid_argument);
}

TEST_CASE("streaming generation without eviction matches full-context bitwise") {
    Model m = Model::init(tiny_cfg(), 13);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 14);
    HybridConfig h;
    h.window = 64;
    h.stride = 8;
    h.max_new_tokens = 10;
    auto prompt = rand_tokens(12, 15);
    auto streamed = generate_streaming(a, prompt, h);
    auto full = generate_full_context(m, prompt, 10);
    CHECK(streamed == full);
}

TEST_CASE("streaming generation keeps the cache bounded over a long run") {
    ModelConfig mc = tiny_cfg();
    Model m = Model::init(mc, 16);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 17);
    HybridConfig h;
    h.window = 16;
    h.stride = 8;
    h.max_new_tokens = 64;  // 4x the window
    auto prompt = rand_tokens(40, 18);  // longer than the window
    auto out = generate_streaming(a, prompt, h);
    CHECK(out.size() == 64);
    // internal bound assertion inside generate_streaming would have thrown
}

TEST_CASE("streaming generation is deterministic") {
    Model m = Model::init(tiny_cfg(), 19);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 20);
    std::mt19937_64 wrng(21);
    for (auto& s : a.sites) s.abs.w2 = Tensor::randn({a.mcfg.n_queries, s.d_o}, wrng, 0.2).set_requires_grad(true);
    HybridConfig h;
    h.window = 16;
    h.stride = 8;
    h.max_new_tokens = 24;
    auto prompt = rand_tokens(30, 22);
    auto g1 = generate_streaming(a, prompt, h);
    auto g2 = generate_streaming(a, prompt, h);
    CHECK(g1 == g2);
}

TEST_CASE("untrained adapter: adapted windowed perplexity equals naive exactly") {
    Model m = Model::init(tiny_cfg(), 23);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 24);
    auto text = rand_tokens(64, 25);
    double naive = eval_window_ppl(a, text, 16, 8, false);
    double adapted = eval_window_ppl(a, text, 16, 8, true);
    CHECK(adapted == naive);
    CHECK(naive > 0.0);
}

TEST_CASE("trained-looking adapter changes adapted ppl but not naive ppl") {
    Model m = Model::init(tiny_cfg(), 26);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 27);
    auto text = rand_tokens(64, 28);
    double naive_before = eval_window_ppl(a, text, 16, 8, false);
    std::mt19937_64 wrng(29);
    for (auto& s : a.sites) s.abs.w2 = Tensor::randn({a.mcfg.n_queries, s.d_o}, wrng, 0.3).set_requires_grad(true);
    double naive_after = eval_window_ppl(a, text, 16, 8, false);
    double adapted = eval_window_ppl(a, text, 16, 8, true);
    CHECK(naive_before == naive_after);
    CHECK(adapted != naive_after);
}

TEST_CASE("eval_window_ppl validation") {
    Model m = Model::init(tiny_cfg(), 30);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 31);
    CHECK_THROWS_AS(eval_window_ppl(a, rand_tokens(20, 1), 16, 8, false), std::invalid_argument);  // too short
    CHECK_THROWS_AS(eval_window_ppl(a, rand_tokens(64, 1), 16, 32, false), std::invalid_argument);
    CHECK_THROWS_AS(eval_window_ppl(a, rand_tokens(64, 1), 16, 6, true), std::invalid_argument);  // chunk multiple
}
