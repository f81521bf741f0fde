#include "kvpacket/cli.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <map>
#include <utility>

#include <CLI11.hpp>
#include <json.hpp>

#include "kvpacket/baselines.hpp"
#include "kvpacket/error.hpp"
#include "kvpacket/io.hpp"
#include "kvpacket/store.hpp"

namespace kvp {

namespace {

namespace fs = std::filesystem;

ModelWeights load_model_at(const fs::path& p) {
    if (!fs::exists(p)) throw ConfigError("missing model checkpoint: " + p.string());
    return load_model(p);
}

AdapterParams load_adapters_checked(const fs::path& p, const Sha256& mh, const char* cmd) {
    if (!fs::exists(p))
        throw ConfigError(std::string(cmd) + ": missing adapter checkpoint " + p.string());
    auto loaded = load_adapters(p);
    if (loaded.model_hash != mh)
        throw ConfigError(std::string(cmd) + ": adapters in " + p.string() +
                          " were trained against a different model");
    return std::move(loaded.adapters);
}

class CsvFile {
public:
    CsvFile(const fs::path& path, const char* header) : path_(path) {
        f_ = std::fopen(path.string().c_str(), "w");
        if (!f_) throw FormatError("cannot open " + path.string() + " for write");
        std::fprintf(f_, "%s\n", header);
    }
    ~CsvFile() {
        if (f_) std::fclose(f_);
    }
    CsvFile(const CsvFile&) = delete;
    CsvFile& operator=(const CsvFile&) = delete;

    template <class... Args>
    void row(const char* fmt, Args... args) {
        std::fprintf(f_, fmt, args...);
        std::fputc('\n', f_);
    }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
    std::FILE* f_ = nullptr;
};

void write_pretrain_logs(const RunConfig& run, const PretrainLog& log) {
    fs::create_directories(run.out_dir);
    CsvFile loss(run.out_dir / "pretrain_loss.csv", "step,loss,lr");
    for (size_t i = 0; i < log.loss.size(); ++i)
        loss.row("%zu,%.9g,%.9g", i, log.loss[i], log.lr[i]);
    CsvFile eval(run.out_dir / "pretrain_eval.csv", "step,needle_acc,bio_acc,hop_acc");
    for (size_t i = 0; i < log.eval_steps.size(); ++i)
        eval.row("%d,%.4f,%.4f,%.4f", log.eval_steps[i], log.needle_acc[i], log.bio_acc[i],
                 log.hop_acc[i]);
}

std::string row_label(const EvalRow& r) {
    return r.policy_params.empty() ? r.strategy : r.strategy + "(" + r.policy_params + ")";
}

[[noreturn]] void bench_violation(const std::string& name, const EvalRow& r) {
    throw InvariantError("bench: " + name + " violated (strategy " + row_label(r) +
                         ", domain " + r.domain + ", instance " +
                         std::to_string(r.instance_id) + ")");
}

// Hard gates behind exit code 0: additivity, F1 bounds, the packet prep
// zero-check, full's unit relative cost, and the forward-flops ordering
// none == packet < selective < full wherever the row set pins it.
void check_bench_invariants(const RunConfig& run, std::span<const EvalRow> rows) {
    for (const auto& r : rows) {
        if (r.flops.total !=
            r.flops.realign_ops + r.flops.forward_flops + r.flops.selection_flops)
            bench_violation("FLOPs additivity", r);
        if (!(r.f1 >= 0.0 && r.f1 <= 1.0)) bench_violation("F1 bounds", r);
        if (r.strategy == "packet" && r.flops.forward_flops != 0)
            bench_violation("packet prep forward-FLOPs zero-check", r);
        if (r.strategy == "packet" && r.flops.selection_flops != 0)
            bench_violation("packet prep selection-FLOPs zero-check", r);
        if (r.strategy == "full" && r.flops.relative_to_full != 1.0)
            bench_violation("full relative_flops == 1", r);
    }

    std::map<std::pair<std::string, int>, std::map<std::string, const EvalRow*>> groups;
    for (const auto& r : rows) groups[{r.domain, r.instance_id}][row_label(r)] = &r;

    for (const auto& [key, by_label] : groups) {
        auto find = [&](const std::string& label) -> const EvalRow* {
            auto it = by_label.find(label);
            return it == by_label.end() ? nullptr : it->second;
        };
        const EvalRow* full = find("full");
        const EvalRow* none = find("none");
        const EvalRow* packet = find("packet");
        if (packet && none && packet->flops.forward_flops != none->flops.forward_flops)
            bench_violation("none == packet forward-FLOPs", *packet);

        for (const auto& s : run.strategies) {
            if (s.kind != EvalStrategy::Kind::recompute) continue;
            if (s.policy.kind == PolicyKind::full || s.policy.kind == PolicyKind::none)
                continue;
            const EvalRow* row = find(strategy_label(s));
            if (!row) continue;
            bool boundary = s.policy.kind == PolicyKind::boundary_anchor;
            bool positive = boundary ? s.policy.anchor_tokens > 0 : s.policy.ratio > 0;
            // A proper subset is guaranteed only below ratio 1 (or anchors
            // shorter than a document); at the top the cost may tie full.
            bool proper = boundary ? s.policy.anchor_tokens < run.task.doc_tokens
                                   : s.policy.ratio < 1.0;
            if (none && positive && !(row->flops.forward_flops > none->flops.forward_flops))
                bench_violation("selective > none forward-FLOPs", *row);
            if (full && !(row->flops.forward_flops <= full->flops.forward_flops))
                bench_violation("selective <= full forward-FLOPs", *row);
            if (full && proper && positive &&
                !(row->flops.forward_flops < full->flops.forward_flops))
                bench_violation("selective < full forward-FLOPs", *row);
        }
    }
}

void emit_matrix(const RunConfig& run, const ModelWeights& w, const Sha256& mh) {
    static constexpr const char* kSets[] = {"needle", "kv_biography", "multihop", "mixture"};
    std::vector<AdapterSet> sets;
    for (const char* name : kSets) {
        auto loaded = load_adapters_checked(run.matrix_adapters.at(name), mh, "bench");
        sets.push_back({name, std::move(loaded)});
    }
    auto m = cross_domain_f1(w, sets, run.domains, run.matrix_instances, run.task, run.seed);

    std::string header = "train_set";
    for (Domain d : run.domains) header += "," + std::string(domain_name(d));
    CsvFile csv(run.out_dir / "matrix.csv", header.c_str());
    for (size_t i = 0; i < sets.size(); ++i) {
        std::string line = sets[i].name;
        for (double v : m[i]) line += "," + std::to_string(v);
        csv.row("%s", line.c_str());
    }

    auto row_min = [&](size_t i) {
        double lo = 1.0;
        for (double v : m[i]) lo = std::min(lo, v);
        return lo;
    };
    double worst_single = 0.0;
    for (size_t i = 0; i + 1 < sets.size(); ++i) worst_single = std::max(worst_single, row_min(i));
    std::printf("matrix -> %s (mixture min F1 %.3f vs best single-set min %.3f)\n",
                csv.path().string().c_str(), row_min(sets.size() - 1), worst_single);
}

} // namespace

void save_probe(const GoldenProbe& p, const fs::path& path) {
    ByteWriter bw;
    bw.magic("KVPG");
    bw.u32(1);
    bw.i32_array(p.ids);
    bw.u64(p.logits.size());
    bw.f32_array(p.logits);
    bw.write_file(path);
}

GoldenProbe load_probe(const fs::path& path) {
    auto br = ByteReader::from_file(path);
    br.expect_magic("KVPG");
    if (uint32_t v = br.u32(); v != 1)
        throw FormatError("probe " + path.string() + ": version " + std::to_string(v));
    GoldenProbe p;
    p.ids = br.i32_array();
    p.logits = br.f32_array(br.u64());
    if (!br.at_end()) throw FormatError("probe " + path.string() + ": trailing bytes");
    return p;
}

bool probe_matches(const ModelWeights& w, const GoldenProbe& p, float tol) {
    ForwardOptions opt;
    opt.logits_last_only = true;
    auto res = prefill(w, embedding_rows(w.embedding, p.ids), 0, nullptr, opt);
    const auto& v = res.logits.value();
    if (static_cast<size_t>(v.size()) != p.logits.size()) return false;
    for (int64_t i = 0; i < v.size(); ++i)
        if (std::abs(v[i] - p.logits[static_cast<size_t>(i)]) > tol) return false;
    return true;
}

RunConfig resolve_config(const fs::path& config_path, const CliOptions& opt) {
    RunConfig run = load_run_config(config_path);
    if (opt.seed) run.seed = *opt.seed;
    if (opt.out) run.out_dir = *opt.out;
    if (!opt.strategies.empty()) {
        run.strategies.clear();
        for (const auto& s : opt.strategies) run.strategies.push_back(parse_strategy(s));
    }
    if (!opt.domains.empty()) {
        run.domains.clear();
        for (const auto& d : opt.domains) run.domains.push_back(parse_domain(d));
    }
    run.validate();
    return run;
}

int cmd_pretrain(const RunConfig& run) {
    PretrainConfig pc = run.pretrain;
    pc.eval_params = run.task;
    PretrainLog log;
    ModelWeights w;
    try {
        w = pretrain_toy_model(run.model, pc, run.seed, &log);
    } catch (const TrainingError&) {
        write_pretrain_logs(run, log);
        throw;
    }
    write_pretrain_logs(run, log);
    save_model(w, run.model_path);

    auto probe_rng = Rng(run.seed).stream("golden-probe");
    auto inst = sample_instance(Domain::needle, run.task, probe_rng);
    GoldenProbe probe;
    probe.ids = flatten(inst);
    ForwardOptions opt;
    opt.logits_last_only = true;
    auto res = prefill(w, embedding_rows(w.embedding, probe.ids), 0, nullptr, opt);
    const auto& v = res.logits.value();
    probe.logits.assign(v.data(), v.data() + v.size());
    fs::path probe_path = run.model_path;
    probe_path += ".probe";
    save_probe(probe, probe_path);

    if (!probe_matches(load_model(run.model_path), load_probe(probe_path)))
        throw InvariantError("pretrain: reloaded checkpoint fails the golden probe");

    std::printf("model %s -> %s\n", hex(model_hash(w)).c_str(),
                run.model_path.string().c_str());
    std::printf("stopped at step %d; needle %.2f bio %.2f hop %.2f\n", log.stopped_at,
                log.needle_acc.empty() ? 0.f : log.needle_acc.back(),
                log.bio_acc.empty() ? 0.f : log.bio_acc.back(),
                log.hop_acc.empty() ? 0.f : log.hop_acc.back());
    return 0;
}

int cmd_build_cache(const RunConfig& run, bool overwrite) {
    auto w = load_model_at(run.model_path);
    auto mh = model_hash(w);
    bool wrapped = !run.adapters_path.empty() && fs::exists(run.adapters_path);
    AdapterParams a;
    if (wrapped) a = load_adapters_checked(run.adapters_path, mh, "build-cache");

    CacheStore store(run.store_dir);
    auto rng = Rng(run.seed).stream("corpus");
    std::vector<std::vector<int>> docs;
    while (static_cast<int>(docs.size()) < run.corpus_docs)
        for (Domain d : run.domains) {
            if (static_cast<int>(docs.size()) >= run.corpus_docs) break;
            for (auto& doc : sample_instance(d, run.task, rng).documents) {
                if (static_cast<int>(docs.size()) >= run.corpus_docs) break;
                docs.push_back(std::move(doc));
            }
        }

    for (size_t i = 0; i < docs.size(); ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "doc-%04zu", i);
        if (wrapped) {
            store.put(to_cache_entry(wrap(w, a, mh, id, docs[i])), overwrite);
        } else {
            ForwardOptions opt;
            opt.want_logits = false;
            CacheEntry e;
            e.doc_id = id;
            e.cache = prefill(w, embedding_rows(w.embedding, docs[i]), 0, nullptr, opt).cache;
            e.token_count = static_cast<int64_t>(docs[i].size());
            store.put(e, overwrite);
        }
    }
    std::printf("%zu %s entries -> %s\n", docs.size(), wrapped ? "packet" : "plain",
                store.root().string().c_str());
    return 0;
}

int cmd_train_adapters(const RunConfig& run) {
    auto w = load_model_at(run.model_path);
    auto mh = model_hash(w);
    TrainConfig tc = run.train;
    tc.seed = run.seed;
    tc.validate();

    Rng root(run.seed);
    auto arng = root.stream("adapters-init");
    auto adapters = init_adapters(w, run.n_header, run.n_trailer, arng);

    std::vector<std::vector<DistillSample>> sets;
    for (Domain d : run.domains) {
        auto srng = root.stream("distill-samples").stream(domain_name(d));
        sets.push_back(build_samples(w, d, run.task, tc, srng));
    }
    TrainResult result = run.domains.size() == 1 ? train(sets.front(), adapters, w, tc)
                                                 : train_mixture(sets, adapters, w, tc);

    save_adapters(adapters, mh, run.adapters_path);
    fs::create_directories(run.out_dir);
    CsvFile loss(run.out_dir / "adapter_loss.csv", "step,lr,loss");
    for (const auto& s : result.history) loss.row("%d,%.9g,%.9g", s.step, s.lr, s.loss);

    std::printf("adapters %s -> %s (%zu steps, final loss %.5f)\n",
                hex(adapter_fingerprint(adapters, mh)).c_str(),
                run.adapters_path.string().c_str(), result.history.size(),
                result.history.empty() ? 0.f : result.history.back().loss);
    return 0;
}

int cmd_bench(const RunConfig& run) {
    auto w = load_model_at(run.model_path);
    auto mh = model_hash(w);
    bool wants_packet = false;
    for (const auto& s : run.strategies)
        if (s.kind == EvalStrategy::Kind::packet) wants_packet = true;
    AdapterParams a;
    if (wants_packet) a = load_adapters_checked(run.adapters_path, mh, "bench");

    CacheStore store(run.store_dir);
    BenchConfig bc;
    bc.strategies = run.strategies;
    bc.domains = run.domains;
    bc.instances_per_domain = run.instances_per_domain;
    bc.params = run.task;
    bc.bandwidth_gb_s = run.bandwidth_gb_s;
    bc.ttft_reps = run.ttft_reps;
    bc.seed = run.seed;

    auto rows = run_suite(w, wants_packet ? &a : nullptr, store, bc);
    fs::create_directories(run.out_dir);
    write_results_csv(run.out_dir / "results.csv", rows);
    auto sum = summarize(rows);
    write_summary_json(run.out_dir / "summary.json", sum);

    for (const auto& s : sum)
        std::printf("%-24s %-13s n=%-4d F1 %.3f flops x%.3g ttft %.4fs\n", s.strategy.c_str(),
                    s.domain.c_str(), s.n, s.mean_f1, s.mean_relative_flops, s.mean_ttft_s);
    std::printf("results -> %s\n", (run.out_dir / "results.csv").string().c_str());

    check_bench_invariants(run, rows);
    if (!run.matrix_adapters.empty()) emit_matrix(run, w, mh);
    return 0;
}

int cmd_attn_report(const RunConfig& run) {
    auto w = load_model_at(run.model_path);
    auto mh = model_hash(w);
    auto a = load_adapters_checked(run.adapters_path, mh, "attn-report");

    Domain d = run.domains.front();
    auto rng = Rng(run.seed).stream("attn-tasks").stream(domain_name(d));
    auto instances = gen_tasks(w, d, run.instances_per_domain, run.task, rng);

    std::vector<AttnProfile> profiles{attn_profile(w, "packet", &a, instances),
                                      attn_profile(w, "none", &a, instances)};
    fs::create_directories(run.out_dir);
    write_attn_csv(run.out_dir / "attn.csv", profiles);

    nlohmann::json js;
    for (const auto& p : profiles) {
        auto s = summarize_profile(p);

        // Recompute each region mean straight from the dump; the summary must
        // be reproducible from the CSV alone.
        std::map<std::string, std::pair<double, int>> acc;
        std::pair<double, int> first{0, 0}, interior{0, 0};
        for (size_t i = 0; i < p.position.size(); ++i) {
            auto& slot = acc[p.region[i]];
            slot.first += p.mean_score[i];
            ++slot.second;
            if (p.region[i] == "document") {
                auto& side = p.block_first[i] ? first : interior;
                side.first += p.mean_score[i];
                ++side.second;
            }
        }
        auto mean = [](const std::pair<double, int>& s) {
            return s.second ? s.first / s.second : 0.0;
        };
        double checks[][2] = {{s.document_mean, mean(acc["document"])},
                              {s.header_mean, mean(acc["header"])},
                              {s.trailer_mean, mean(acc["trailer"])},
                              {s.prompt_mean, mean(acc["prompt"])},
                              {s.doc_first_mean, mean(first)},
                              {s.doc_interior_mean, mean(interior)}};
        for (auto& c : checks)
            if (std::abs(c[0] - c[1]) > 1e-9)
                throw InvariantError("attn-report: summary disagrees with the raw dump for " +
                                     p.strategy);

        js[p.strategy] = {{"doc_first_mean", s.doc_first_mean},
                          {"doc_interior_mean", s.doc_interior_mean},
                          {"header_mean", s.header_mean},
                          {"trailer_mean", s.trailer_mean},
                          {"document_mean", s.document_mean},
                          {"prompt_mean", s.prompt_mean}};
        std::printf("%-7s block-first %.5f interior %.5f header %.5f trailer %.5f\n",
                    p.strategy.c_str(), s.doc_first_mean, s.doc_interior_mean, s.header_mean,
                    s.trailer_mean);
    }
    ByteWriter bw;
    auto text = js.dump(2);
    text.push_back('\n');
    bw.bytes({reinterpret_cast<const uint8_t*>(text.data()), text.size()});
    bw.write_file(run.out_dir / "attn_summary.json");
    std::printf("profiles -> %s\n", (run.out_dir / "attn.csv").string().c_str());
    return 0;
}

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"KV packet pipeline: precomputed document caches behind trained adapters"};
    app.require_subcommand(1);

    std::string config_path;
    CliOptions opt;
    uint64_t seed_val = 0;
    std::string out_dir;
    app.add_option("--config", config_path, "run config JSON")->required();
    auto* seed_opt = app.add_option("--seed", seed_val, "override the config seed");
    auto* out_opt = app.add_option("--out", out_dir, "override the output directory");
    app.add_option("--strategy", opt.strategies, "strategy to bench (repeatable)");
    app.add_option("--domain", opt.domains, "task domain (repeatable)");
    app.add_flag("--overwrite", opt.overwrite, "replace existing store entries");

    auto* c_pre = app.add_subcommand("pretrain", "train and checkpoint the toy base model");
    auto* c_cache = app.add_subcommand("build-cache", "populate the document cache store");
    auto* c_train = app.add_subcommand("train-adapters", "distill header/trailer adapters");
    auto* c_bench = app.add_subcommand("bench", "run the strategy benchmark suite");
    auto* c_attn = app.add_subcommand("attn-report", "emit aligned attention profiles");
    for (auto* s : {c_pre, c_cache, c_train, c_bench, c_attn}) s->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    if (seed_opt->count()) opt.seed = seed_val;
    if (out_opt->count()) opt.out = out_dir;

    try {
        RunConfig run = resolve_config(config_path, opt);
        if (c_pre->parsed()) return cmd_pretrain(run);
        if (c_cache->parsed()) return cmd_build_cache(run, opt.overwrite);
        if (c_train->parsed()) return cmd_train_adapters(run);
        if (c_bench->parsed()) return cmd_bench(run);
        return cmd_attn_report(run);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const InvariantError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

} // namespace kvp
