#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "streamadapter/bench.hpp"
#include "streamadapter/checkpoint.hpp"
#include "streamadapter/config.hpp"

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

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& p) : path("/tmp/streamadapter_test_" + p) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("checkpoint: save-load-save round trip is bitwise identical") {
    Model m = Model::init(tiny_cfg(), 1);
    TempFile f1("ckpt1.bin"), f2("ckpt2.bin");
    auto ps = m.parameters();
    save_checkpoint(f1.path, ps);
    Model m2 = Model::init(tiny_cfg(), 2);
    auto ps2 = m2.parameters();
    save_checkpoint(f2.path, ps2);
    CHECK(read_file(f1.path) != read_file(f2.path));
    load_checkpoint(f1.path, ps2);
    for (size_t i = 0; i < ps.size(); ++i) CHECK(ps[i].tensor.data() == ps2[i].tensor.data());
    save_checkpoint(f2.path, ps2);
    CHECK(read_file(f1.path) == read_file(f2.path));
}

TEST_CASE("checkpoint: manifest is lexicographic and versioned") {
    Model m = Model::init(tiny_cfg(), 3);
    TempFile f("ckpt3.bin");
    auto ps = m.parameters();
    save_checkpoint(f.path, ps);
    std::string blob = read_file(f.path);
    uint64_t hlen = ckpt_detail::get_u64_le(reinterpret_cast<const unsigned char*>(blob.data()));
    auto manifest = nlohmann::json::parse(blob.substr(8, hlen));
    CHECK(manifest.at("format_version") == kCheckpointFormatVersion);
    uint64_t prev_offset = 0;
    std::string prev_name;
    for (auto it = manifest.at("tensors").begin(); it != manifest.at("tensors").end(); ++it) {
        CHECK(prev_name < it.key());  // json object iteration is sorted; offsets must follow
        CHECK(it.value().at("offset").get<uint64_t>() >= prev_offset);
        prev_offset = it.value().at("offset").get<uint64_t>();
        prev_name = it.key();
    }
}

TEST_CASE("checkpoint: truncated body and shape mismatch are rejected atomically") {
    Model m = Model::init(tiny_cfg(), 4);
    TempFile f("ckpt4.bin");
    auto ps = m.parameters();
    save_checkpoint(f.path, ps);

    std::string blob = read_file(f.path);
    {
        std::ofstream out(f.path, std::ios::binary | std::ios::trunc);
        out.write(blob.data(), static_cast<std::streamsize>(blob.size() - 16));
    }
    Model victim = Model::init(tiny_cfg(), 5);
    auto vp = victim.parameters();
    auto before = vp[0].tensor.data();
    auto before_last = vp.back().tensor.data();
    CHECK_THROWS_AS(load_checkpoint(f.path, vp), std::runtime_error);
    CHECK(vp[0].tensor.data() == before);  // nothing partially loaded
    CHECK(vp.back().tensor.data() == before_last);

    // shape mismatch
    ModelConfig other = tiny_cfg();
    other.ffn_hidden = 48;
    Model m3 = Model::init(other, 6);
    auto p3 = m3.parameters();
    TempFile g("ckpt5.bin");
    save_checkpoint(g.path, p3);
    CHECK_THROWS_AS(load_checkpoint(g.path, vp), std::runtime_error);
    CHECK(vp[0].tensor.data() == before);
}

TEST_CASE("checkpoint: missing tensor name rejected") {
    Model m = Model::init(tiny_cfg(), 7);
    TempFile f("ckpt6.bin");
    auto ps = m.parameters();
    save_checkpoint(f.path, ps);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 8);
    auto ap = a.parameters();
    CHECK_THROWS_AS(load_checkpoint(f.path, ap), std::runtime_error);
}

TEST_CASE("adapter checkpoints round-trip through the same container") {
    Model m = Model::init(tiny_cfg(), 9);
    AdaptedModel a1 = AdaptedModel::init(m, map_cfg(), 10);
    AdaptedModel a2 = AdaptedModel::init(m, map_cfg(), 11);
    TempFile f("ckpt7.bin");
    auto p1 = a1.parameters();
    auto p2 = a2.parameters();
    save_checkpoint(f.path, p1);
    load_checkpoint(f.path, p2);
    for (size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].tensor.data() == p2[i].tensor.data());
}

TEST_CASE("run config: defaults, overrides, round trip") {
    RunConfig def;
    auto j = run_config_to_json(def);
    RunConfig back = parse_run_config(j);
    CHECK(run_config_to_json(back) == j);

    nlohmann::json over = {{"model", {{"d_model", 16}, {"n_heads", 2}, {"head_dim", 8}}},
                           {"seed", 99},
                           {"hybrid", {{"mode", "generation"}, {"ratio", 0.5}}}};
    RunConfig c = parse_run_config(over);
    CHECK(c.model.d_model == 16);
    CHECK(c.model.vocab_size == 259);  // untouched default
    CHECK(c.seed == 99);
    CHECK(c.hybrid.mode == InferenceMode::generation);
    CHECK(c.hybrid.ratio == 0.5);
}

TEST_CASE("run config: unknown keys are rejected with their path") {
    nlohmann::json bad = {{"model", {{"d_modle", 16}}}};
    try {
        parse_run_config(bad);
        FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("model.d_modle") != std::string::npos);
    }
    nlohmann::json bad_top = {{"modle", nlohmann::json::object()}};
    CHECK_THROWS_AS(parse_run_config(bad_top), std::invalid_argument);
    nlohmann::json bad_mode = {{"hybrid", {{"mode", "turbo"}}}};
    CHECK_THROWS_AS(parse_run_config(bad_mode), std::invalid_argument);
}

TEST_CASE("bench_latency produces a full grid with sane values") {
    Model m = Model::init(tiny_cfg(), 12);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 13);
    HybridConfig h;
    h.window = 16;
    h.stride = 8;
    h.max_new_tokens = 4;
    auto cells = bench_latency(a, {8, 24}, {"adapted", "full"}, h, 2);
    REQUIRE(cells.size() == 4);
    for (const auto& c : cells) {
        CHECK(c.median_per_token_s > 0.0);
        CHECK(c.min_per_token_s <= c.median_per_token_s);
        CHECK(c.median_per_token_s <= c.max_per_token_s);
        CHECK(c.peak_live_values > 0);
        CHECK(c.gen_tokens == 4);
    }
    CHECK_THROWS_AS(bench_latency(a, {8}, {"warp"}, h, 1), std::invalid_argument);
}

TEST_CASE("full-context peak live values grow with prefill; adapted stays flat") {
    Model m = Model::init(tiny_cfg(), 14);
    AdaptedModel a = AdaptedModel::init(m, map_cfg(), 15);
    HybridConfig h;
    h.window = 16;
    h.stride = 8;
    h.max_new_tokens = 4;
    auto cells = bench_latency(a, {16, 128}, {"adapted", "full"}, h, 1);
    // order: adapted@16, adapted@128, full@16, full@128
    REQUIRE(cells.size() == 4);
    double adapted_growth =
        static_cast<double>(cells[1].peak_live_values) / static_cast<double>(cells[0].peak_live_values);
    double full_growth = static_cast<double>(cells[3].peak_live_values) / static_cast<double>(cells[2].peak_live_values);
    CHECK(full_growth > adapted_growth);
}
