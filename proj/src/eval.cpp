#include "kvpacket/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "kvpacket/error.hpp"
#include "kvpacket/store.hpp"

namespace kvp {

namespace {

template <class F>
double median_seconds(int reps, F&& work) {
    std::vector<double> t(static_cast<size_t>(reps));
    for (auto& v : t) {
        auto t0 = std::chrono::steady_clock::now();
        work();
        v = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    std::sort(t.begin(), t.end());
    return t[t.size() / 2];
}

void query_forward(const ModelWeightsT<float>& w, std::span<const int> query,
                   const KVCache* ctx) {
    const int64_t base = ctx ? ctx->base_position + ctx->n_tokens : 0;
    std::vector<int64_t> qpos(query.size());
    for (size_t i = 0; i < qpos.size(); ++i) qpos[i] = base + static_cast<int64_t>(i);
    ForwardOptions opt;
    opt.logits_last_only = true;
    forward_tokens(w, embedding_rows(w.embedding, query), qpos, ctx, opt);
}

// [H; doc; T] packets realigned onto the shared line, no store round-trip.
KVCache compose_packets_direct(const ModelWeightsT<float>& w, const AdapterParams& a,
                               std::span<const std::vector<int>> documents) {
    std::vector<KVCache> parts;
    parts.reserve(documents.size());
    int64_t offset = 0;
    for (const auto& doc : documents) {
        auto wrapped = wrap_cache<float>(w, a, doc);
        parts.push_back(realign(wrapped, offset, w.config));
        offset += wrapped.n_tokens;
    }
    return concat(parts);
}

std::vector<int> packet_answer_direct(const ModelWeightsT<float>& w, const AdapterParams& a,
                                      const TaskInstance& inst, int max_new_tokens) {
    KVCache ctx = compose_packets_direct(w, a, inst.documents);
    const int64_t base = ctx.n_tokens;
    std::vector<int64_t> qpos(inst.query.size());
    for (size_t i = 0; i < qpos.size(); ++i) qpos[i] = base + static_cast<int64_t>(i);
    ForwardOptions opt;
    opt.logits_last_only = true;
    auto res = forward_tokens(w, embedding_rows(w.embedding, inst.query), qpos, &ctx, opt);
    append_cache(ctx, res.cache);
    return greedy_decode(w, std::move(ctx), res.logits, max_new_tokens, vocab::kStop).ids;
}

struct InstanceFixture {
    std::vector<int> flat_docs;
    std::vector<KVCache> doc_caches; // offline artifact of the stale strategies
    uint64_t stale_bytes = 0;
    BaselineRun full_run;
    uint64_t full_total = 0;
};

InstanceFixture build_fixture(const ModelWeightsT<float>& w, const TaskInstance& inst,
                              int max_new_tokens) {
    InstanceFixture fx;
    for (const auto& d : inst.documents) fx.flat_docs.insert(fx.flat_docs.end(), d.begin(), d.end());
    Rng unused(0);
    fx.full_run = run_baseline(w, RecomputePolicy::full(), inst.documents, inst.query,
                               max_new_tokens, unused, vocab::kStop);
    fx.full_total = fx.full_run.flops.total();
    fx.doc_caches = build_document_caches(w, inst.documents);
    for (size_t j = 0; j < fx.doc_caches.size(); ++j) {
        CacheEntry e;
        e.doc_id = "raw-" + std::to_string(j);
        e.cache = fx.doc_caches[j];
        e.token_count = fx.doc_caches[j].n_tokens;
        fx.stale_bytes += cache_entry_bytes(e);
    }
    return fx;
}

EvalRow eval_packet(const ModelWeightsT<float>& w, const AdapterParams& a, const Sha256& mh,
                    CacheStore& store, const TaskInstance& inst, const InstanceFixture& fx,
                    const BenchConfig& cfg) {
    EvalRow row;
    uint64_t bytes = 0;
    std::vector<std::string> ids;
    for (size_t j = 0; j < inst.documents.size(); ++j) {
        auto p = wrap(w, a, mh, "pkt-" + std::to_string(j), inst.documents[j]);
        auto e = to_cache_entry(p);
        bytes += cache_entry_bytes(e);
        store.put(e, true);
        ids.push_back(p.doc_id);
    }

    FlopsMeter meter;
    ComposedContext ctx;
    {
        MeterScope scope(meter);
        PhaseScope phase(Phase::Forward); // any leaked forward work must show up
        ctx = compose(store, ids, a, mh, w.config);
    }
    row.flops = make_flops_report(meter.snapshot(), fx.full_total);

    auto gen = answer(w, ctx, inst.query, cfg.params.max_answer_tokens, vocab::kStop);
    row.f1 = f1_score(extract_answer(gen.ids), inst.gold_answer);

    row.ttft.load_s = static_cast<double>(bytes) / (cfg.bandwidth_gb_s * 1e9);
    row.ttft.prep_s = median_seconds(cfg.ttft_reps,
                                     [&] { compose(store, ids, a, mh, w.config); });
    row.ttft.query_s =
        median_seconds(cfg.ttft_reps, [&] { query_forward(w, inst.query, &ctx.cache); });
    row.ttft.ttft_s = row.ttft.load_s + row.ttft.prep_s + row.ttft.query_s;
    return row;
}

EvalRow eval_no_cache(const ModelWeightsT<float>& w, const TaskInstance& inst,
                      const InstanceFixture& fx, const BenchConfig& cfg) {
    EvalRow row;
    row.flops = make_flops_report({}, fx.full_total);
    auto gen = generate(w, inst.query, cfg.params.max_answer_tokens, vocab::kStop);
    row.f1 = f1_score(extract_answer(gen.ids), inst.gold_answer);
    row.ttft.query_s =
        median_seconds(cfg.ttft_reps, [&] { query_forward(w, inst.query, nullptr); });
    row.ttft.ttft_s = row.ttft.query_s;
    return row;
}

EvalRow eval_recompute(const ModelWeightsT<float>& w, const RecomputePolicy& pol,
                       const TaskInstance& inst, const InstanceFixture& fx,
                       const BenchConfig& cfg, Rng sel_rng) {
    EvalRow row;
    BaselineRun run;
    if (pol.kind == PolicyKind::full)
        run = fx.full_run;
    else
        run = run_baseline(w, pol, inst.documents, inst.query, cfg.params.max_answer_tokens,
                           sel_rng, vocab::kStop);
    row.flops = make_flops_report(run.flops, fx.full_total);
    row.f1 = f1_score(extract_answer(run.ids), inst.gold_answer);

    row.ttft.load_s = pol.kind == PolicyKind::full
                          ? 0.0
                          : static_cast<double>(fx.stale_bytes) / (cfg.bandwidth_gb_s * 1e9);
    KVCache prepared;
    auto prep = [&] {
        if (pol.kind == PolicyKind::full) {
            ForwardOptions opt;
            opt.want_logits = false;
            prepared = prefill(w, embedding_rows(w.embedding, fx.flat_docs), 0, nullptr, opt).cache;
            return;
        }
        auto stale = compose_stale(w.config, fx.doc_caches);
        if (pol.kind == PolicyKind::none) {
            prepared = std::move(stale);
            return;
        }
        // Probe policies re-select so their forward cost lands in the timing;
        // the cheap selectors reuse the committed pick.
        SelectionResult sel;
        switch (pol.kind) {
            case PolicyKind::deviation:
                sel = select_deviation(w, inst.documents, stale, pol.ratio);
                break;
            case PolicyKind::attention_topk:
                sel = select_attention_topk(w, inst.documents, inst.query, stale, pol.ratio);
                break;
            default:
                sel = run.selection;
                break;
        }
        prepared = repair_context(w, inst.documents, stale, sel);
    };
    row.ttft.prep_s = median_seconds(cfg.ttft_reps, prep);
    row.ttft.query_s =
        median_seconds(cfg.ttft_reps, [&] { query_forward(w, inst.query, &prepared); });
    row.ttft.ttft_s = row.ttft.load_s + row.ttft.prep_s + row.ttft.query_s;
    return row;
}

void append_csv(std::string& out, const char* fmt, ...) {
    char buf[256];
    va_list args;
    va_start(args, fmt);
    std::vsnprintf(buf, sizeof buf, fmt, args);
    va_end(args);
    out += buf;
}

} // namespace

double f1_score(std::span<const int> prediction, std::span<const int> gold) {
    if (prediction.empty() && gold.empty()) return 1.0;
    if (prediction.empty() || gold.empty()) return 0.0;
    std::unordered_map<int, int> counts;
    for (int g : gold) ++counts[g];
    int64_t overlap = 0;
    for (int p : prediction) {
        auto it = counts.find(p);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    double precision = static_cast<double>(overlap) / static_cast<double>(prediction.size());
    double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

FlopsReport make_flops_report(const FlopsSnapshot& s, uint64_t full_total) {
    FlopsReport r;
    r.realign_ops = s.realign_ops;
    r.forward_flops = s.forward_flops;
    r.selection_flops = s.selection_flops;
    r.total = s.total();
    r.relative_to_full =
        full_total ? static_cast<double>(r.total) / static_cast<double>(full_total) : 0.0;
    return r;
}

EvalStrategy parse_strategy(std::string_view text) {
    if (text == "packet") return EvalStrategy::packet();
    if (text == "no_cache") return EvalStrategy::no_cache();
    return EvalStrategy::recompute(parse_policy(text));
}

std::string strategy_name(const EvalStrategy& s) {
    switch (s.kind) {
        case EvalStrategy::Kind::packet: return "packet";
        case EvalStrategy::Kind::no_cache: return "no_cache";
        case EvalStrategy::Kind::recompute: return std::string(policy_kind_name(s.policy.kind));
    }
    throw ConfigError("unknown strategy kind");
}

std::string strategy_params(const EvalStrategy& s) {
    if (s.kind != EvalStrategy::Kind::recompute) return "";
    switch (s.policy.kind) {
        case PolicyKind::full:
        case PolicyKind::none:
            return "";
        case PolicyKind::boundary_anchor:
            return std::to_string(s.policy.anchor_tokens);
        default: {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%g", s.policy.ratio);
            return buf;
        }
    }
}

std::string strategy_label(const EvalStrategy& s) {
    if (s.kind == EvalStrategy::Kind::recompute) return policy_label(s.policy);
    return strategy_name(s);
}

void BenchConfig::validate() const {
    if (strategies.empty()) throw ConfigError("bench: no strategies");
    if (domains.empty()) throw ConfigError("bench: no domains");
    if (instances_per_domain < 1) throw ConfigError("bench: instances_per_domain must be >= 1");
    if (bandwidth_gb_s <= 0) throw ConfigError("bench: bandwidth must be positive");
    if (ttft_reps < 1) throw ConfigError("bench: ttft_reps must be >= 1");
    for (const auto& s : strategies) {
        if (s.kind == EvalStrategy::Kind::recompute) s.policy.validate();
    }
    for (Domain d : domains) params.validate(d);
}

std::vector<EvalRow> run_suite(const ModelWeightsT<float>& w, const AdapterParams* adapters,
                               CacheStore& store, const BenchConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    std::vector<DomainInstances> tasks;
    for (Domain d : cfg.domains) {
        auto task_rng = root.stream("eval-tasks").stream(domain_name(d));
        tasks.push_back({d, gen_tasks(w, d, cfg.instances_per_domain, cfg.params, task_rng)});
    }
    return run_suite(w, adapters, store, cfg, tasks);
}

std::vector<EvalRow> run_suite(const ModelWeightsT<float>& w, const AdapterParams* adapters,
                               CacheStore& store, const BenchConfig& cfg,
                               std::span<const DomainInstances> tasks) {
    cfg.validate();
    const bool wants_packet =
        std::any_of(cfg.strategies.begin(), cfg.strategies.end(),
                    [](const EvalStrategy& s) { return s.kind == EvalStrategy::Kind::packet; });
    if (wants_packet && !adapters)
        throw ConfigError("bench: packet strategy listed but no adapters provided");
    if (adapters) adapters->validate(w.config);
    const Sha256 mh = model_hash(w);

    Rng root(cfg.seed);
    std::vector<EvalRow> rows;
    for (const auto& block : tasks) {
        const Domain d = block.domain;
        const auto& instances = block.instances;
        for (size_t i = 0; i < instances.size(); ++i) {
            const auto& inst = instances[i];
            auto fx = build_fixture(w, inst, cfg.params.max_answer_tokens);
            for (const auto& s : cfg.strategies) {
                EvalRow row;
                switch (s.kind) {
                    case EvalStrategy::Kind::packet:
                        row = eval_packet(w, *adapters, mh, store, inst, fx, cfg);
                        break;
                    case EvalStrategy::Kind::no_cache:
                        row = eval_no_cache(w, inst, fx, cfg);
                        break;
                    case EvalStrategy::Kind::recompute: {
                        auto sel_rng = root.stream("eval-select")
                                           .stream(policy_label(s.policy))
                                           .stream(domain_name(d))
                                           .stream(static_cast<uint64_t>(i));
                        row = eval_recompute(w, s.policy, inst, fx, cfg, sel_rng);
                        break;
                    }
                }
                row.strategy = strategy_name(s);
                row.policy_params = strategy_params(s);
                row.domain = domain_name(d);
                row.instance_id = static_cast<int>(i);
                rows.push_back(std::move(row));
            }
        }
    }
    return rows;
}

std::vector<SummaryRow> summarize(std::span<const EvalRow> rows) {
    std::vector<SummaryRow> out;
    std::unordered_map<std::string, size_t> index;
    for (const auto& r : rows) {
        std::string label =
            r.policy_params.empty() ? r.strategy : r.strategy + "(" + r.policy_params + ")";
        std::string key = label + "\n" + r.domain;
        auto [it, fresh] = index.try_emplace(key, out.size());
        if (fresh) {
            SummaryRow s;
            s.strategy = label;
            s.domain = r.domain;
            out.push_back(std::move(s));
        }
        auto& s = out[it->second];
        s.n += 1;
        s.mean_f1 += r.f1;
        s.mean_total_flops += static_cast<double>(r.flops.total);
        s.mean_relative_flops += r.flops.relative_to_full;
        s.mean_load_s += r.ttft.load_s;
        s.mean_prep_s += r.ttft.prep_s;
        s.mean_query_s += r.ttft.query_s;
        s.mean_ttft_s += r.ttft.ttft_s;
    }
    for (auto& s : out) {
        double n = s.n;
        s.mean_f1 /= n;
        s.mean_total_flops /= n;
        s.mean_relative_flops /= n;
        s.mean_load_s /= n;
        s.mean_prep_s /= n;
        s.mean_query_s /= n;
        s.mean_ttft_s /= n;
    }
    return out;
}

void write_results_csv(const std::filesystem::path& path, std::span<const EvalRow> rows) {
    std::string out = "strategy,policy_params,domain,instance_id,f1,realign_ops,forward_flops,"
                      "selection_flops,total_flops,relative_flops,load_s,prep_s,query_s,ttft_s\n";
    for (const auto& r : rows) {
        out += r.strategy + "," + r.policy_params + "," + r.domain + ",";
        append_csv(out, "%d,%.6f,%llu,%llu,%llu,%llu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.instance_id,
                   r.f1, static_cast<unsigned long long>(r.flops.realign_ops),
                   static_cast<unsigned long long>(r.flops.forward_flops),
                   static_cast<unsigned long long>(r.flops.selection_flops),
                   static_cast<unsigned long long>(r.flops.total), r.flops.relative_to_full,
                   r.ttft.load_s, r.ttft.prep_s, r.ttft.query_s, r.ttft.ttft_s);
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot open for write: " + path.string());
    f << out;
}

void write_summary_json(const std::filesystem::path& path, std::span<const SummaryRow> rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : rows) {
        arr.push_back({{"strategy", s.strategy},
                       {"domain", s.domain},
                       {"n", s.n},
                       {"mean_f1", s.mean_f1},
                       {"mean_total_flops", s.mean_total_flops},
                       {"mean_relative_flops", s.mean_relative_flops},
                       {"mean_load_s", s.mean_load_s},
                       {"mean_prep_s", s.mean_prep_s},
                       {"mean_query_s", s.mean_query_s},
                       {"mean_ttft_s", s.mean_ttft_s}});
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot open for write: " + path.string());
    f << arr.dump(2) << "\n";
}

AttnProfile attn_profile(const ModelWeightsT<float>& w, std::string_view strategy,
                         const AdapterParams* adapters,
                         std::span<const TaskInstance> instances) {
    bool packet;
    if (strategy == "packet") packet = true;
    else if (strategy == "none") packet = false;
    else throw ConfigError("attn_profile: strategy must be none or packet");
    if (!adapters) throw ConfigError("attn_profile: adapters define the aligned coordinate");
    if (instances.empty()) throw ShapeError("attn_profile: no instances");
    adapters->validate(w.config);

    const auto& first = instances.front();
    const size_t n_docs = first.documents.size();
    std::vector<int64_t> lens;
    for (const auto& d : first.documents) lens.push_back(static_cast<int64_t>(d.size()));
    const int64_t n_query = static_cast<int64_t>(first.query.size());
    for (const auto& inst : instances) {
        if (inst.documents.size() != n_docs ||
            static_cast<int64_t>(inst.query.size()) != n_query)
            throw ShapeError("attn_profile: instances must share one geometry");
        for (size_t j = 0; j < n_docs; ++j)
            if (static_cast<int64_t>(inst.documents[j].size()) != lens[j])
                throw ShapeError("attn_profile: instances must share one geometry");
    }

    const int64_t nh = adapters->n_header(), nt = adapters->n_trailer();
    std::vector<int64_t> block_base(n_docs);
    int64_t aligned_ctx = 0;
    for (size_t j = 0; j < n_docs; ++j) {
        block_base[j] = aligned_ctx;
        aligned_ctx += nh + lens[j] + nt;
    }
    const int64_t n_aligned = aligned_ctx + n_query;

    // Raw attention column -> aligned coordinate.
    std::vector<int64_t> col_map;
    if (packet) {
        col_map.resize(static_cast<size_t>(n_aligned));
        for (int64_t k = 0; k < n_aligned; ++k) col_map[static_cast<size_t>(k)] = k;
    } else {
        for (size_t j = 0; j < n_docs; ++j)
            for (int64_t t = 0; t < lens[j]; ++t)
                col_map.push_back(block_base[j] + nh + t);
        for (int64_t q = 0; q < n_query; ++q)
            col_map.push_back(aligned_ctx + q);
    }

    std::vector<double> sums(static_cast<size_t>(n_aligned), 0.0);
    int64_t rows_seen = 0;
    for (const auto& inst : instances) {
        KVCache ctx = packet
                          ? compose_packets_direct(w, *adapters, inst.documents)
                          : compose_stale(w.config, build_document_caches(w, inst.documents));
        std::vector<int64_t> qpos(static_cast<size_t>(n_query));
        for (int64_t q = 0; q < n_query; ++q)
            qpos[static_cast<size_t>(q)] = ctx.n_tokens + q;
        ForwardOptions opt;
        opt.want_logits = false;
        opt.want_attn = true;
        auto res = forward_tokens(w, embedding_rows(w.embedding, inst.query), qpos, &ctx, opt);

        for (const auto& heads : res.attn->probs)
            for (const auto& h : heads)
                for (int64_t r = 0; r < h.rows(); ++r) {
                    double sum = h.row(r).template cast<double>().sum();
                    if (std::abs(sum - 1.0) > 1e-5)
                        throw InvariantError("attn_profile: attention row sums to " +
                                             std::to_string(sum));
                    for (int64_t k = 0; k < h.cols(); ++k)
                        sums[static_cast<size_t>(col_map[static_cast<size_t>(k)])] +=
                            static_cast<double>(h(r, k));
                    ++rows_seen;
                }
    }

    AttnProfile prof;
    prof.strategy = packet ? "packet" : "none";
    for (int64_t pos = 0; pos < n_aligned; ++pos) {
        std::string region = "prompt";
        bool first_of_block = false;
        bool present = true;
        if (pos < aligned_ctx) {
            size_t j = n_docs - 1;
            while (block_base[j] > pos) --j;
            int64_t rel = pos - block_base[j];
            if (rel < nh) {
                region = "header";
                present = packet;
            } else if (rel < nh + lens[j]) {
                region = "document";
                first_of_block = rel == nh;
            } else {
                region = "trailer";
                present = packet;
            }
        }
        if (!present) continue;
        prof.position.push_back(pos);
        prof.region.push_back(std::move(region));
        prof.block_first.push_back(first_of_block ? 1 : 0);
        prof.mean_score.push_back(sums[static_cast<size_t>(pos)] /
                                  static_cast<double>(rows_seen));
    }
    return prof;
}

AttnSummary summarize_profile(const AttnProfile& p) {
    AttnSummary s;
    double n_first = 0, n_interior = 0, n_header = 0, n_trailer = 0, n_doc = 0, n_prompt = 0;
    for (size_t i = 0; i < p.position.size(); ++i) {
        double v = p.mean_score[i];
        const std::string& r = p.region[i];
        if (r == "header") { s.header_mean += v; ++n_header; }
        else if (r == "trailer") { s.trailer_mean += v; ++n_trailer; }
        else if (r == "prompt") { s.prompt_mean += v; ++n_prompt; }
        else {
            s.document_mean += v;
            ++n_doc;
            if (p.block_first[i]) { s.doc_first_mean += v; ++n_first; }
            else { s.doc_interior_mean += v; ++n_interior; }
        }
    }
    if (n_first > 0) s.doc_first_mean /= n_first;
    if (n_interior > 0) s.doc_interior_mean /= n_interior;
    if (n_header > 0) s.header_mean /= n_header;
    if (n_trailer > 0) s.trailer_mean /= n_trailer;
    if (n_doc > 0) s.document_mean /= n_doc;
    if (n_prompt > 0) s.prompt_mean /= n_prompt;
    return s;
}

void write_attn_csv(const std::filesystem::path& path, std::span<const AttnProfile> profiles) {
    std::string out = "position,region,mean_score,strategy\n";
    for (const auto& p : profiles)
        for (size_t i = 0; i < p.position.size(); ++i) {
            append_csv(out, "%lld,%s,%.9g,%s\n", static_cast<long long>(p.position[i]),
                       p.region[i].c_str(), p.mean_score[i], p.strategy.c_str());
        }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot open for write: " + path.string());
    f << out;
}

std::vector<std::vector<double>> cross_domain_f1(const ModelWeightsT<float>& w,
                                                 std::span<const AdapterSet> sets,
                                                 std::span<const Domain> domains, int n,
                                                 const TaskParams& params, uint64_t seed) {
    if (sets.empty()) throw ConfigError("cross_domain_f1: no adapter sets");
    if (domains.empty()) throw ConfigError("cross_domain_f1: no domains");
    if (n < 1) throw ConfigError("cross_domain_f1: n must be >= 1");
    for (const auto& set : sets) set.adapters.validate(w.config);

    std::vector<std::vector<double>> out(sets.size(),
                                         std::vector<double>(domains.size(), 0.0));
    Rng root(seed);
    for (size_t dj = 0; dj < domains.size(); ++dj) {
        auto rng = root.stream("cross-tasks").stream(domain_name(domains[dj]));
        auto instances = gen_tasks(w, domains[dj], n, params, rng);
        for (size_t si = 0; si < sets.size(); ++si) {
            double sum = 0;
            for (const auto& inst : instances) {
                auto ids = packet_answer_direct(w, sets[si].adapters, inst,
                                                params.max_answer_tokens);
                sum += f1_score(extract_answer(ids), inst.gold_answer);
            }
            out[si][dj] = sum / static_cast<double>(instances.size());
        }
    }
    return out;
}

} // namespace kvp
