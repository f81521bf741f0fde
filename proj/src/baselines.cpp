#include "kvpacket/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "kvpacket/error.hpp"
#include "kvpacket/store.hpp"

namespace kvp {

namespace {

Tensor gather_rows(const Tensor& t, const std::vector<int64_t>& rows) {
    const int64_t c = t.cols();
    Tensor::Array out(static_cast<int64_t>(rows.size()) * c);
    for (size_t i = 0; i < rows.size(); ++i)
        out.segment(static_cast<int64_t>(i) * c, c) = t.value().segment(rows[i] * c, c);
    return tensor_from_array<float>(std::move(out), {static_cast<int64_t>(rows.size()), c});
}

// ceil(r * n) with a guard against float crumbs pushing past an exact product.
int64_t ceil_frac(double r, int64_t n) {
    auto v = static_cast<int64_t>(std::ceil(r * static_cast<double>(n) - 1e-9));
    return std::clamp<int64_t>(v, 0, n);
}

std::vector<int64_t> doc_lengths(std::span<const std::vector<int>> documents) {
    std::vector<int64_t> lens;
    lens.reserve(documents.size());
    for (const auto& d : documents) {
        if (d.empty()) throw ShapeError("baseline: empty document");
        lens.push_back(static_cast<int64_t>(d.size()));
    }
    return lens;
}

std::vector<int64_t> doc_offsets(std::span<const int64_t> lens) {
    std::vector<int64_t> off(lens.size() + 1, 0);
    for (size_t i = 0; i < lens.size(); ++i) off[i + 1] = off[i] + lens[i];
    return off;
}

// Top n rows of (score desc, position asc), returned position-sorted.
std::vector<int64_t> top_by_score(std::span<const float> scores, int64_t n) {
    std::vector<int64_t> order(scores.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        float sa = scores[static_cast<size_t>(a)], sb = scores[static_cast<size_t>(b)];
        return sa > sb || (sa == sb && a < b);
    });
    order.resize(static_cast<size_t>(std::min<int64_t>(n, static_cast<int64_t>(order.size()))));
    std::sort(order.begin(), order.end());
    return order;
}

SelectionResult select_all(std::span<const int64_t> doc_lens) {
    SelectionResult sel;
    for (int64_t len : doc_lens) {
        std::vector<int64_t> all(static_cast<size_t>(len));
        for (int64_t i = 0; i < len; ++i) all[static_cast<size_t>(i)] = i;
        sel.doc_indices.push_back(std::move(all));
    }
    return sel;
}

} // namespace

void RecomputePolicy::validate() const {
    switch (kind) {
        case PolicyKind::full:
        case PolicyKind::none:
            return;
        case PolicyKind::boundary_anchor:
            if (anchor_tokens < 0) throw ConfigError("boundary_anchor: k must be >= 0");
            return;
        case PolicyKind::random_ratio:
            if (ratio < 0.0 || ratio > 1.0)
                throw ConfigError("random_ratio: r must be in [0, 1]");
            return;
        case PolicyKind::deviation:
        case PolicyKind::attention_topk:
            if (ratio <= 0.0 || ratio > 1.0)
                throw ConfigError(std::string(policy_kind_name(kind)) +
                                  ": r must be in (0, 1]");
            return;
    }
    throw ConfigError("unknown policy kind");
}

std::string_view policy_kind_name(PolicyKind k) {
    switch (k) {
        case PolicyKind::full: return "full";
        case PolicyKind::none: return "none";
        case PolicyKind::random_ratio: return "random_ratio";
        case PolicyKind::boundary_anchor: return "boundary_anchor";
        case PolicyKind::deviation: return "deviation";
        case PolicyKind::attention_topk: return "attention_topk";
    }
    throw ConfigError("unknown policy kind");
}

std::string policy_label(const RecomputePolicy& p) {
    switch (p.kind) {
        case PolicyKind::full:
        case PolicyKind::none:
            return std::string(policy_kind_name(p.kind));
        case PolicyKind::boundary_anchor:
            return "boundary_anchor(" + std::to_string(p.anchor_tokens) + ")";
        default: {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%g", p.ratio);
            return std::string(policy_kind_name(p.kind)) + "(" + buf + ")";
        }
    }
}

RecomputePolicy parse_policy(std::string_view text) {
    std::string_view name = text;
    std::string_view param;
    if (auto colon = text.find(':'); colon != std::string_view::npos) {
        name = text.substr(0, colon);
        param = text.substr(colon + 1);
    } else if (auto paren = text.find('('); paren != std::string_view::npos) {
        // policy_label form, so results files round-trip
        if (text.back() != ')') throw ConfigError("bad policy syntax: " + std::string(text));
        name = text.substr(0, paren);
        param = text.substr(paren + 1, text.size() - paren - 2);
    }

    RecomputePolicy p;
    if (name == "full") p = RecomputePolicy::full();
    else if (name == "none") p = RecomputePolicy::none();
    else if (name == "random_ratio") p.kind = PolicyKind::random_ratio;
    else if (name == "boundary_anchor") p.kind = PolicyKind::boundary_anchor;
    else if (name == "deviation") p.kind = PolicyKind::deviation;
    else if (name == "attention_topk") p.kind = PolicyKind::attention_topk;
    else throw ConfigError("unknown policy: " + std::string(text));

    bool wants_param = p.kind != PolicyKind::full && p.kind != PolicyKind::none;
    if (wants_param == param.empty())
        throw ConfigError("policy " + std::string(name) +
                          (wants_param ? " needs a parameter" : " takes no parameter"));
    if (!param.empty()) {
        try {
            if (p.kind == PolicyKind::boundary_anchor)
                p.anchor_tokens = std::stoi(std::string(param));
            else
                p.ratio = std::stod(std::string(param));
        } catch (const std::exception&) {
            throw ConfigError("bad policy parameter: " + std::string(text));
        }
    }
    p.validate();
    return p;
}

int64_t SelectionResult::total() const {
    int64_t n = 0;
    for (const auto& d : doc_indices) n += static_cast<int64_t>(d.size());
    return n;
}

SelectionResult select_random(std::span<const int64_t> doc_lengths, double r, Rng& rng) {
    if (r < 0.0 || r > 1.0) throw RangeError("select_random: r must be in [0, 1]");
    SelectionResult sel;
    for (int64_t len : doc_lengths) {
        auto n = ceil_frac(r, len);
        auto pick = rng.sample_without_replacement(static_cast<int>(len), static_cast<int>(n));
        std::vector<int64_t> idx(pick.begin(), pick.end());
        std::sort(idx.begin(), idx.end());
        sel.doc_indices.push_back(std::move(idx));
    }
    return sel;
}

SelectionResult select_boundary(std::span<const int64_t> doc_lengths, int k) {
    if (k < 0) throw RangeError("select_boundary: k must be >= 0");
    SelectionResult sel;
    for (int64_t len : doc_lengths) {
        int64_t n = std::min<int64_t>(k, len);
        std::vector<int64_t> idx(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        sel.doc_indices.push_back(std::move(idx));
    }
    return sel;
}

SelectionResult select_deviation(const ModelWeightsT<float>& w,
                                 std::span<const std::vector<int>> documents,
                                 const KVCache& stale_context, double r) {
    if (r <= 0.0 || r > 1.0) throw RangeError("select_deviation: r must be in (0, 1]");
    auto lens = doc_lengths(documents);
    auto off = doc_offsets(lens);
    const int64_t total = off.back();
    if (stale_context.n_tokens != total)
        throw InvalidCacheError("select_deviation: stale context spans " +
                                std::to_string(stale_context.n_tokens) + " tokens, documents " +
                                std::to_string(total));

    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(total));
    for (const auto& d : documents) flat.insert(flat.end(), d.begin(), d.end());
    std::vector<int64_t> positions(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) positions[static_cast<size_t>(i)] = i;

    // Staleness first appears in the K/V the second layer derives from
    // context-mixed states; the first layer's are context-free.
    const int probe_layer = std::min(1, w.config.n_layers - 1);
    ForwardOptions opt;
    opt.want_logits = false;
    opt.max_layers = probe_layer + 1;
    KVCache fresh;
    {
        PhaseScope phase(Phase::Selection);
        fresh = forward_tokens(w, embedding_rows(w.embedding, flat), positions, nullptr, opt).cache;
    }

    const auto& fk = fresh.layers[static_cast<size_t>(probe_layer)].keys.value();
    const auto& fv = fresh.layers[static_cast<size_t>(probe_layer)].values.value();
    const auto& sk = stale_context.layers[static_cast<size_t>(probe_layer)].keys.value();
    const auto& sv = stale_context.layers[static_cast<size_t>(probe_layer)].values.value();
    const int64_t d = w.config.d_model;

    std::vector<float> dev(static_cast<size_t>(total));
    for (int64_t t = 0; t < total; ++t)
        dev[static_cast<size_t>(t)] =
            std::sqrt((fk.segment(t * d, d) - sk.segment(t * d, d)).square().sum() +
                      (fv.segment(t * d, d) - sv.segment(t * d, d)).square().sum());

    SelectionResult sel;
    for (size_t i = 0; i < documents.size(); ++i) {
        std::span<const float> doc_dev{dev.data() + off[i], static_cast<size_t>(lens[i])};
        sel.doc_indices.push_back(top_by_score(doc_dev, ceil_frac(r, lens[i])));
    }
    return sel;
}

SelectionResult select_attention_topk(const ModelWeightsT<float>& w,
                                      std::span<const std::vector<int>> documents,
                                      std::span<const int> query,
                                      const KVCache& stale_context, double r) {
    if (r <= 0.0 || r > 1.0) throw RangeError("select_attention_topk: r must be in (0, 1]");
    if (query.empty()) throw ShapeError("select_attention_topk: empty query");
    auto lens = doc_lengths(documents);
    auto off = doc_offsets(lens);
    const int64_t total = off.back();

    std::vector<int64_t> qpos(query.size());
    for (size_t i = 0; i < qpos.size(); ++i)
        qpos[i] = total + static_cast<int64_t>(i);

    ForwardOptions opt;
    opt.want_logits = false;
    opt.want_attn = true;
    opt.max_layers = 1;
    ForwardResultT<float> probe;
    {
        PhaseScope phase(Phase::Selection);
        probe = forward_tokens(w, embedding_rows(w.embedding, query), qpos, &stale_context, opt);
    }

    // Mean over heads and query rows; the query's own keys sit past `total`.
    std::vector<float> score(static_cast<size_t>(total), 0.0f);
    const auto& heads = probe.attn->probs[0];
    for (const auto& h : heads)
        for (int64_t q = 0; q < h.rows(); ++q)
            for (int64_t t = 0; t < total; ++t)
                score[static_cast<size_t>(t)] += h(q, t);
    const float norm = 1.0f / static_cast<float>(heads.size() * query.size());
    for (auto& s : score) s *= norm;

    SelectionResult sel;
    for (size_t i = 0; i < documents.size(); ++i) {
        std::span<const float> doc_score{score.data() + off[i], static_cast<size_t>(lens[i])};
        sel.doc_indices.push_back(top_by_score(doc_score, ceil_frac(r, lens[i])));
    }
    return sel;
}

std::vector<KVCache> build_document_caches(const ModelWeightsT<float>& w,
                                           std::span<const std::vector<int>> documents) {
    if (documents.empty()) throw ShapeError("baseline: no documents");
    ForwardOptions opt;
    opt.want_logits = false;
    std::vector<KVCache> caches;
    caches.reserve(documents.size());
    PhaseScope phase(Phase::Off);
    for (const auto& d : documents) {
        if (d.empty()) throw ShapeError("baseline: empty document");
        caches.push_back(prefill(w, embedding_rows(w.embedding, d), 0, nullptr, opt).cache);
    }
    return caches;
}

KVCache compose_stale(const ModelConfig& config, const std::vector<KVCache>& caches) {
    if (caches.empty()) throw ShapeError("compose_stale: no caches");
    std::vector<KVCache> moved;
    moved.reserve(caches.size());
    int64_t offset = 0;
    for (const auto& c : caches) {
        moved.push_back(realign(c, offset - c.base_position, config));
        offset += c.n_tokens;
    }
    return concat(moved);
}

KVCache repair_context(const ModelWeightsT<float>& w,
                       std::span<const std::vector<int>> documents,
                       const KVCache& stale_context, const SelectionResult& selection) {
    auto lens = doc_lengths(documents);
    auto off = doc_offsets(lens);
    const int64_t total = off.back();
    if (stale_context.n_tokens != total)
        throw InvalidCacheError("repair_context: stale context spans " +
                                std::to_string(stale_context.n_tokens) + " tokens, documents " +
                                std::to_string(total));
    if (selection.doc_indices.size() != documents.size())
        throw ShapeError("repair_context: selection covers " +
                         std::to_string(selection.doc_indices.size()) + " documents, have " +
                         std::to_string(documents.size()));

    std::vector<int> sel_ids;
    std::vector<int64_t> sel_pos;
    std::vector<uint8_t> selected(static_cast<size_t>(total), 0);
    for (size_t i = 0; i < documents.size(); ++i)
        for (int64_t idx : selection.doc_indices[i]) {
            if (idx < 0 || idx >= lens[i])
                throw RangeError("repair_context: index " + std::to_string(idx) +
                                 " outside document of " + std::to_string(lens[i]) + " tokens");
            int64_t pos = off[i] + idx;
            if (selected[static_cast<size_t>(pos)])
                throw InvariantError("repair_context: duplicate selection at " + std::to_string(pos));
            selected[static_cast<size_t>(pos)] = 1;
            sel_ids.push_back(documents[i][static_cast<size_t>(idx)]);
            sel_pos.push_back(pos);
        }
    if (sel_ids.empty()) return stale_context;

    std::vector<int64_t> unsel;
    for (int64_t t = 0; t < total; ++t)
        if (!selected[static_cast<size_t>(t)]) unsel.push_back(t);

    KVCache prefix;
    if (!unsel.empty()) {
        prefix.base_position = stale_context.base_position;
        prefix.n_tokens = stale_context.n_tokens;
        for (const auto& l : stale_context.layers) {
            LayerKV nl;
            nl.keys = gather_rows(l.keys, unsel);
            nl.values = gather_rows(l.values, unsel);
            for (int64_t t : unsel) nl.positions.push_back(l.positions[static_cast<size_t>(t)]);
            prefix.layers.push_back(std::move(nl));
        }
    }

    ForwardOptions opt;
    opt.want_logits = false;
    KVCache fresh;
    {
        PhaseScope phase(Phase::Forward);
        fresh = forward_tokens(w, embedding_rows(w.embedding, sel_ids), sel_pos,
                               unsel.empty() ? nullptr : &prefix, opt).cache;
    }

    // Splice fresh rows over stale ones, keeping position order.
    std::vector<int64_t> merged_rows(static_cast<size_t>(total));
    int64_t rank = 0;
    for (int64_t t = 0; t < total; ++t)
        merged_rows[static_cast<size_t>(t)] = selected[static_cast<size_t>(t)] ? total + rank++ : t;

    KVCache merged;
    merged.base_position = stale_context.base_position;
    merged.n_tokens = total;
    for (size_t l = 0; l < stale_context.layers.size(); ++l) {
        std::vector<Tensor> kparts{stale_context.layers[l].keys, fresh.layers[l].keys};
        std::vector<Tensor> vparts{stale_context.layers[l].values, fresh.layers[l].values};
        LayerKV nl;
        nl.keys = gather_rows(concat_rows<float>(kparts), merged_rows);
        nl.values = gather_rows(concat_rows<float>(vparts), merged_rows);
        nl.positions = stale_context.layers[l].positions;
        merged.layers.push_back(std::move(nl));
    }
    return merged;
}

BaselineRun run_baseline(const ModelWeightsT<float>& w, const RecomputePolicy& policy,
                         std::span<const std::vector<int>> documents,
                         std::span<const int> query, int max_new_tokens, Rng& rng,
                         int stop_token) {
    policy.validate();
    if (documents.empty()) throw ShapeError("run_baseline: no documents");
    if (query.empty()) throw ShapeError("run_baseline: empty query");
    auto lens = doc_lengths(documents);
    const int64_t total = doc_offsets(lens).back();

    FlopsMeter meter;
    MeterScope scope(meter);

    BaselineRun run;
    KVCache context;
    if (policy.kind == PolicyKind::full) {
        run.selection = select_all(lens);
        std::vector<int> flat;
        for (const auto& d : documents) flat.insert(flat.end(), d.begin(), d.end());
        ForwardOptions opt;
        opt.want_logits = false;
        PhaseScope phase(Phase::Forward);
        context = prefill(w, embedding_rows(w.embedding, flat), 0, nullptr, opt).cache;
    } else {
        auto caches = build_document_caches(w, documents);
        context = compose_stale(w.config, caches);
        switch (policy.kind) {
            case PolicyKind::none: break;
            case PolicyKind::random_ratio:
                run.selection = select_random(lens, policy.ratio, rng);
                break;
            case PolicyKind::boundary_anchor:
                run.selection = select_boundary(lens, policy.anchor_tokens);
                break;
            case PolicyKind::deviation:
                run.selection = select_deviation(w, documents, context, policy.ratio);
                break;
            case PolicyKind::attention_topk:
                run.selection = select_attention_topk(w, documents, query, context, policy.ratio);
                break;
            case PolicyKind::full: break;
        }
        if (run.selection.doc_indices.empty())
            run.selection.doc_indices.resize(documents.size());
        context = repair_context(w, documents, context, run.selection);
    }

    {
        PhaseScope phase(Phase::Off);
        std::vector<int64_t> qpos(query.size());
        for (size_t i = 0; i < qpos.size(); ++i) qpos[i] = total + static_cast<int64_t>(i);
        ForwardOptions opt;
        opt.logits_last_only = true;
        auto res = forward_tokens(w, embedding_rows(w.embedding, query), qpos, &context, opt);
        append_cache(context, res.cache);
        run.ids = greedy_decode(w, std::move(context), res.logits, max_new_tokens, stop_token).ids;
    }

    run.flops = meter.snapshot();
    return run;
}

} // namespace kvp
