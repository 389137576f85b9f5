// Command-line driver: data generation, training, evaluation, verification
// suites, benchmarks, and sweeps. Every subcommand reads one JSON run config,
// writes JSON-lines results plus a summary, and exits 0 on success, 1 on
// configuration errors, 2 on numerical failures.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "streamadapter/bench.hpp"
#include "streamadapter/checkpoint.hpp"
#include "streamadapter/config.hpp"
#include "streamadapter/data.hpp"
#include "streamadapter/inference.hpp"
#include "streamadapter/oracle.hpp"
#include "streamadapter/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace streamadapter;

namespace {

struct CliError : std::runtime_error {
    int code;
    CliError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

RunConfig load_config(const std::string& path, int64_t seed_flag) {
    RunConfig c;
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw CliError(1, "cannot open config file " + path);
        json j;
        try {
            j = json::parse(f);
        } catch (const json::exception& e) {
            throw CliError(1, std::string("config parse error: ") + e.what());
        }
        try {
            c = parse_run_config(j);
        } catch (const std::invalid_argument& e) {
            throw CliError(1, e.what());
        }
    }
    if (const char* env = std::getenv("STREAMADAPTER_SEED")) c.seed = std::strtoull(env, nullptr, 10);
    if (seed_flag >= 0) c.seed = static_cast<uint64_t>(seed_flag);
    return c;
}

struct OutDir {
    fs::path dir;
    json summary = json::object();
    std::vector<std::string> files;

    explicit OutDir(const RunConfig& c) : dir(c.out_dir) {
        fs::create_directories(dir);
        write_json("config.json", run_config_to_json(c));
    }
    fs::path path(const std::string& name) const { return dir / name; }
    void write_json(const std::string& name, const json& j) {
        std::ofstream f(path(name));
        f << j.dump(2) << "\n";
        files.push_back(name);
    }
    std::ofstream open_jsonl(const std::string& name) {
        files.push_back(name);
        return std::ofstream(path(name));
    }
    void finish(const std::string& subcommand) {
        summary["subcommand"] = subcommand;
        summary["files"] = files;
        write_json("summary.json", summary);
    }
};

void write_corpus_i32(const fs::path& path, const std::vector<int>& tokens) {
    std::ofstream f(path, std::ios::binary);
    for (int t : tokens) {
        unsigned char b[4] = {static_cast<unsigned char>(t & 0xff), static_cast<unsigned char>((t >> 8) & 0xff),
                              static_cast<unsigned char>((t >> 16) & 0xff),
                              static_cast<unsigned char>((t >> 24) & 0xff)};
        f.write(reinterpret_cast<const char*>(b), 4);
    }
}

Model load_base(const RunConfig& c) {
    c.model.validate();
    Model m = Model::init(c.model, c.seed);
    if (!c.base_checkpoint.empty()) {
        auto ps = m.parameters();
        load_checkpoint(c.base_checkpoint, ps);
    }
    m.set_trainable(false);
    return m;
}

AdaptedModel load_adapted(Model& m, const RunConfig& c) {
    AdaptedModel a = AdaptedModel::init(m, c.mapping, c.seed + 1);
    if (!c.adapter_checkpoint.empty()) {
        auto ps = a.parameters();
        load_checkpoint(c.adapter_checkpoint, ps);
    }
    return a;
}

std::vector<std::vector<int>> recall_training_sequences(const RunConfig& c) {
    auto corpus = gen_recall_corpus(c.data.corpus_seed, c.recall);
    std::vector<std::vector<int>> seqs;
    int64_t L = c.sliding_window.seq_len;
    for (int64_t at = 0; at + L <= static_cast<int64_t>(corpus.size()); at += L)
        seqs.emplace_back(corpus.begin() + at, corpus.begin() + at + L);
    if (seqs.empty()) throw CliError(1, "recall corpus shorter than one training sequence");
    return seqs;
}

std::vector<ICLTrainSample> icl_training_set(const RunConfig& c, int samples_per_family) {
    auto fams = gen_task_families(c.data.task_seed, c.data.n_train, c.data.n_test);
    std::mt19937_64 rng(c.seed + 7);
    std::vector<ICLTrainSample> out;
    for (const auto& f : fams) {
        if (!f.seen) continue;
        std::uniform_int_distribution<int> n_ctx(0, 3);
        for (int i = 0; i < samples_per_family; ++i) {
            const std::string tpl = f.templates[i % f.templates.size()].id;
            out.push_back(make_icl_train_sample(f, static_cast<int>(c.icl.k), rng, tpl, n_ctx(rng)));
        }
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

double family_accuracy(AdaptedModel& a, const TaskFamily& f, int k, double ratio, int n_episodes, uint64_t seed,
                       const std::string& demo_tpl, const std::string& query_tpl) {
    std::mt19937_64 rng(seed);
    std::vector<ClassificationExample> eps;
    for (int i = 0; i < n_episodes; ++i) eps.push_back(make_episode(f, k, true, rng, demo_tpl, query_tpl));
    return eval_understanding(a, eps, ratio);
}

// ---- subcommands ----

int cmd_pretrain(const RunConfig& c) {
    OutDir out(c);
    auto seqs = gen_pretrain_sequences(c.data.corpus_seed, c.data.pretrain_seqs, c.data.pretrain_len, c.data.mix);
    size_t n_held = std::max<size_t>(1, seqs.size() / 10);
    std::vector<std::vector<int>> held(seqs.end() - n_held, seqs.end());
    seqs.resize(seqs.size() - n_held);
    {
        std::vector<int> flat;
        for (const auto& s : seqs) flat.insert(flat.end(), s.begin(), s.end());
        write_corpus_i32(out.path("pretrain_corpus.bin"), flat);
        out.files.push_back("pretrain_corpus.bin");
    }
    Model m = Model::init(c.model, c.seed);
    if (!c.base_checkpoint.empty()) {  // continue training from a checkpoint
        auto ps = m.parameters();
        load_checkpoint(c.base_checkpoint, ps);
    }
    auto log = out.open_jsonl("train_log.jsonl");
    auto res = pretrain_base(m, seqs, held, c.optimizer, c.seed, [&](int64_t step, double lr, double loss) {
        log << json{{"step", step}, {"lr", lr}, {"loss", loss}}.dump() << "\n";
    });
    auto ps = m.parameters();
    save_checkpoint(out.path("base.ckpt").string(), ps);
    out.files.push_back("base.ckpt");
    out.summary["heldout_loss_init"] = res.heldout_loss_init;
    out.summary["heldout_loss_final"] = res.heldout_loss_final;
    out.summary["final_train_loss"] = res.step_losses.back();
    out.finish("pretrain");
    return 0;
}

int cmd_train_sw(const RunConfig& c) {
    OutDir out(c);
    Model m = load_base(c);
    AdaptedModel a = load_adapted(m, c);
    auto seqs = recall_training_sequences(c);
    auto log = out.open_jsonl("train_log.jsonl");
    auto losses = train_sliding_window(a, seqs, c.sliding_window, c.optimizer, c.seed,
                                       [&](int64_t step, double lr, double loss) {
                                           log << json{{"step", step}, {"lr", lr}, {"loss", loss}}.dump() << "\n";
                                       });
    auto ps = a.parameters();
    save_checkpoint(out.path("adapter.ckpt").string(), ps);
    out.files.push_back("adapter.ckpt");
    out.summary["first_loss"] = losses.front();
    out.summary["final_loss"] = losses.back();
    out.summary["n_steps"] = losses.size();
    out.finish("train-sw");
    return 0;
}

int cmd_train_icl(const RunConfig& c) {
    OutDir out(c);
    Model m = load_base(c);
    AdaptedModel a = load_adapted(m, c);
    auto samples = icl_training_set(c, std::max(1, static_cast<int>(c.data.n_train / 2)));
    auto log = out.open_jsonl("train_log.jsonl");
    auto losses = train_in_context(a, samples, c.icl, c.optimizer, c.seed,
                                   [&](int64_t step, double lr, double loss) {
                                       log << json{{"step", step}, {"lr", lr}, {"loss", loss}}.dump() << "\n";
                                   });
    auto ps = a.parameters();
    save_checkpoint(out.path("adapter.ckpt").string(), ps);
    out.files.push_back("adapter.ckpt");
    out.summary["first_loss"] = losses.front();
    out.summary["final_loss"] = losses.back();
    out.summary["n_steps"] = losses.size();
    out.finish("train-icl");
    return 0;
}

int cmd_eval_ppl(const RunConfig& c) {
    OutDir out(c);
    Model m = load_base(c);
    AdaptedModel a = load_adapted(m, c);
    auto corpus = gen_recall_corpus(c.data.corpus_seed + 1, c.recall);  // held-out stream
    auto results = out.open_jsonl("results.jsonl");
    double naive = eval_window_ppl(a, corpus, c.hybrid.window, c.hybrid.stride, false);
    double adapted = eval_window_ppl(a, corpus, c.hybrid.window, c.hybrid.stride, true);
    results << json{{"mode", "naive_window"}, {"ppl", naive}}.dump() << "\n";
    results << json{{"mode", "adapted"}, {"ppl", adapted}}.dump() << "\n";
    out.summary["naive_ppl"] = naive;
    out.summary["adapted_ppl"] = adapted;
    out.finish("eval-ppl");
    return 0;
}

int cmd_eval_task(const RunConfig& c) {
    OutDir out(c);
    Model m = load_base(c);
    AdaptedModel a = load_adapted(m, c);
    auto fams = gen_task_families(c.data.task_seed, c.data.n_train, c.data.n_test);
    {
        auto tasks = out.open_jsonl("tasks.jsonl");
        for (const auto& f : fams)
            for (const auto& [split, pool] : {std::pair{"train", &f.train}, {"test", &f.test}})
                for (const auto& ex : *pool)
                    tasks << json{{"input", ex.input}, {"label", f.labels[ex.label]}, {"family", f.id},
                                  {"split", split}}
                                 .dump()
                          << "\n";
    }
    auto results = out.open_jsonl("results.jsonl");
    int episodes = std::max(8, c.data.n_test / 2);
    for (const auto& f : fams) {
        for (const auto& [label, k, ratio] :
             std::vector<std::tuple<std::string, int, double>>{{"zero_shot", 0, 0.0},
                                                               {"full_icl", static_cast<int>(c.icl.k), 0.0},
                                                               {"hybrid", static_cast<int>(c.icl.k), c.hybrid.ratio}}) {
            double acc = family_accuracy(a, f, k, ratio, episodes, c.seed + 100, "T1", "T1");
            results << json{{"task", f.id},   {"seen", f.seen},     {"setting", label},
                            {"n_shots", k},   {"ratio", ratio},     {"template", "T1"},
                            {"metric", "accuracy"}, {"value", acc}}
                           .dump()
                    << "\n";
            out.summary[f.id + "." + label] = acc;
        }
    }
    out.finish("eval-task");
    return 0;
}

int cmd_oracle(const RunConfig& c) {
    OutDir out(c);
    OracleReport r = run_oracle_suites();
    json j = {{"duality_icl_max", r.duality_icl_max}, {"duality_ft_max", r.duality_ft_max},
              {"recurrence_max", r.recurrence_max},   {"grad_max", r.grad_max},
              {"duality_tol", r.duality_tol},         {"recurrence_tol", r.recurrence_tol},
              {"grad_tol", r.grad_tol},               {"pass", r.pass()}};
    out.write_json("oracle.json", j);
    out.summary = j;
    out.finish("oracle");
    std::cout << j.dump(2) << "\n";
    if (!r.pass()) throw CliError(2, "oracle tolerances exceeded");
    return 0;
}

int cmd_bench(const RunConfig& c) {
    OutDir out(c);
    Model m = load_base(c);
    AdaptedModel a = load_adapted(m, c);
    std::vector<int64_t> lengths = {2 * c.hybrid.window, 4 * c.hybrid.window, 8 * c.hybrid.window,
                                    16 * c.hybrid.window};
    for (int64_t len : lengths)
        if (len + c.hybrid.max_new_tokens > c.model.max_positions)
            throw CliError(1, "bench: max_positions too small for full-context mode at prefill " +
                                  std::to_string(len));
    auto cells = bench_latency(a, lengths, {"adapted", "full"}, c.hybrid, 5, c.seed + 5);
    auto results = out.open_jsonl("results.jsonl");
    std::ofstream csv(out.path("bench.csv"));
    out.files.push_back("bench.csv");
    csv << "mode,prefill_len,median_per_token_s,min_per_token_s,max_per_token_s,peak_live_values,gen_tokens\n";
    for (const auto& cell : cells) {
        results << json{{"mode", cell.mode},
                        {"prefill_len", cell.prefill_len},
                        {"median_per_token_s", cell.median_per_token_s},
                        {"min_per_token_s", cell.min_per_token_s},
                        {"max_per_token_s", cell.max_per_token_s},
                        {"peak_live_values", cell.peak_live_values},
                        {"gen_tokens", cell.gen_tokens}}
                       .dump()
                << "\n";
        csv << cell.mode << "," << cell.prefill_len << "," << cell.median_per_token_s << "," << cell.min_per_token_s
            << "," << cell.max_per_token_s << "," << cell.peak_live_values << "," << cell.gen_tokens << "\n";
    }
    out.finish("bench");
    return 0;
}

int cmd_sweep_ratio(const RunConfig& c) {
    OutDir out(c);
    Model m = load_base(c);
    AdaptedModel a = load_adapted(m, c);
    auto fams = gen_task_families(c.data.task_seed, c.data.n_train, c.data.n_test);
    auto results = out.open_jsonl("results.jsonl");
    int episodes = std::max(8, c.data.n_test / 2);
    for (const auto& f : fams) {
        if (!f.seen) continue;
        for (int r10 = 0; r10 <= 10; ++r10) {
            double ratio = r10 / 10.0;
            double acc = family_accuracy(a, f, static_cast<int>(c.icl.k), ratio, episodes, c.seed + 200, "T1", "T1");
            results << json{{"task", f.id}, {"ratio", ratio}, {"n_shots", c.icl.k}, {"metric", "accuracy"},
                            {"value", acc}}
                           .dump()
                    << "\n";
        }
    }
    out.finish("sweep-ratio");
    return 0;
}

int cmd_sweep_ablate(const RunConfig& c) {
    OutDir out(c);
    Model m = load_base(c);
    auto results = out.open_jsonl("results.jsonl");
    int C = c.mapping.chunk_size;
    int r = c.mapping.n_queries;
    auto samples = icl_training_set(c, std::max(1, c.data.n_train / 4));
    auto fams = gen_task_families(c.data.task_seed, c.data.n_train, c.data.n_test);
    int episodes = std::max(8, c.data.n_test / 4);

    auto run_cell = [&](MappingConfig mc, const std::string& row) {
        AdaptedModel a = AdaptedModel::init(m, mc, c.seed + 3);
        auto losses = train_in_context(a, samples, c.icl, c.optimizer, c.seed);
        double acc_sum = 0.0;
        int n = 0;
        for (const auto& f : fams) {
            if (!f.seen) continue;
            acc_sum += family_accuracy(a, f, static_cast<int>(c.icl.k), c.hybrid.ratio, episodes, c.seed + 300,
                                       "T1", "T1");
            ++n;
        }
        results << json{{"row", row},
                        {"chunk_size", mc.chunk_size},
                        {"n_queries", mc.n_queries},
                        {"final_loss", losses.back()},
                        {"mean_seen_accuracy", acc_sum / n}}
                       .dump()
                << "\n";
    };

    for (int chunk : {0, C / 2, C, 2 * C}) {
        if (chunk < 0) continue;
        MappingConfig mc = c.mapping;
        mc.chunk_size = chunk;
        run_cell(mc, "chunk_sweep");
    }
    for (int q : {std::max(1, r / 2), r, 2 * r}) {
        MappingConfig mc = c.mapping;
        mc.n_queries = q;
        run_cell(mc, "query_sweep");
    }
    // fixed context-tokens-per-query: scale the chunk with the query count
    for (int q : {std::max(1, r / 2), r, 2 * r}) {
        MappingConfig mc = c.mapping;
        mc.n_queries = q;
        mc.chunk_size = std::max(1, C * q / r);
        run_cell(mc, "fixed_tokens_per_query");
    }
    out.finish("sweep-ablate");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"streamadapter: context-to-weight-update toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    int64_t seed_flag = -1;
    app.add_option("--config", config_path, "path to the JSON run config")->capture_default_str();
    app.add_option("--seed", seed_flag, "seed override");

    std::map<std::string, std::function<int(const RunConfig&)>> commands = {
        {"pretrain", cmd_pretrain},       {"train-sw", cmd_train_sw},   {"train-icl", cmd_train_icl},
        {"eval-ppl", cmd_eval_ppl},       {"eval-task", cmd_eval_task}, {"oracle", cmd_oracle},
        {"bench", cmd_bench},             {"sweep-ratio", cmd_sweep_ratio},
        {"sweep-ablate", cmd_sweep_ablate},
    };
    std::map<std::string, std::string> help = {
        {"pretrain", "train the frozen host model on the synthetic mixture"},
        {"train-sw", "train the adapter with the sliding-window objective"},
        {"train-icl", "train the adapter with the two-forward-one-backward objective"},
        {"eval-ppl", "windowed perplexity, naive vs adapted"},
        {"eval-task", "classification accuracy per family and setting"},
        {"oracle", "run the identity/recurrence/gradient verification suites"},
        {"bench", "latency and peak-live-values across prefill lengths"},
        {"sweep-ratio", "accuracy across adaptation ratios 0.0..1.0"},
        {"sweep-ablate", "chunk-size and query-count ablation grid"},
    };
    for (auto& [name, fn] : commands) app.add_subcommand(name, help[name]);

    CLI11_PARSE(app, argc, argv);

    const std::string sub = app.get_subcommands().front()->get_name();
    try {
        RunConfig c = load_config(config_path, seed_flag);
        return commands.at(sub)(c);
    } catch (const CliError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    }
}
