#include "kvpacket/tasks.hpp"

#include <algorithm>

#include "kvpacket/error.hpp"

namespace kvp {

namespace {

using namespace vocab;

int min_doc_tokens(Domain d, const TaskParams& p) {
    switch (d) {
        case Domain::needle: return 4;                      // bos + key is value
        case Domain::kv_biography: return 2 + 4 * p.bio_attrs;
        case Domain::multihop: return 1 + 4 * p.hop_links;
    }
    throw ConfigError("unknown domain");
}

int filler(Rng& rng) { return kFillerBase + rng.uniform_int(0, kFillerCount - 1); }

std::vector<int> filler_doc(int len, Rng& rng) {
    std::vector<int> doc(static_cast<size_t>(len));
    doc[0] = kBos;
    for (int i = 1; i < len; ++i) doc[static_cast<size_t>(i)] = filler(rng);
    return doc;
}

void pad_with_filler(std::vector<int>& doc, int len, Rng& rng) {
    while (static_cast<int>(doc.size()) < len) doc.push_back(filler(rng));
}

TaskInstance sample_needle(const TaskParams& p, Rng& rng) {
    auto keys = rng.sample_without_replacement(kKeyCount, p.n_docs);
    auto values = rng.sample_without_replacement(kValueCount, p.n_docs);
    int target = rng.uniform_int(0, p.n_docs - 1);

    TaskInstance inst;
    inst.domain = Domain::needle;
    for (int d = 0; d < p.n_docs; ++d) {
        auto doc = filler_doc(p.doc_tokens, rng);
        int at = rng.uniform_int(1, p.doc_tokens - 3);
        doc[static_cast<size_t>(at)] = kKeyBase + keys[static_cast<size_t>(d)];
        doc[static_cast<size_t>(at) + 1] = kIs;
        doc[static_cast<size_t>(at) + 2] = kValueBase + values[static_cast<size_t>(d)];
        inst.documents.push_back(std::move(doc));
    }
    inst.query = {kQuery, kKeyBase + keys[static_cast<size_t>(target)], kAnswer};
    inst.gold_answer = {kValueBase + values[static_cast<size_t>(target)]};
    return inst;
}

TaskInstance sample_biography(const TaskParams& p, Rng& rng) {
    auto entities = rng.sample_without_replacement(kEntityCount, p.n_docs);
    auto values = rng.sample_without_replacement(kValueCount, p.n_docs * p.bio_attrs);
    int target_doc = rng.uniform_int(0, p.n_docs - 1);
    int target_attr = rng.uniform_int(0, p.bio_attrs - 1);

    TaskInstance inst;
    inst.domain = Domain::kv_biography;
    for (int d = 0; d < p.n_docs; ++d) {
        auto attrs = rng.sample_without_replacement(kAttrCount, p.bio_attrs);
        std::vector<int> doc{kBos, kEntityBase + entities[static_cast<size_t>(d)]};
        for (int a = 0; a < p.bio_attrs; ++a) {
            doc.push_back(kAttrBase + attrs[static_cast<size_t>(a)]);
            doc.push_back(kIs);
            doc.push_back(kValueBase + values[static_cast<size_t>(d * p.bio_attrs + a)]);
            doc.push_back(kSep);
        }
        pad_with_filler(doc, p.doc_tokens, rng);
        if (d == target_doc) {
            inst.query = {kQuery, kEntityBase + entities[static_cast<size_t>(d)],
                          kAttrBase + attrs[static_cast<size_t>(target_attr)], kAnswer};
            inst.gold_answer = {kValueBase +
                                values[static_cast<size_t>(d * p.bio_attrs + target_attr)]};
        }
        inst.documents.push_back(std::move(doc));
    }
    return inst;
}

TaskInstance sample_multihop(const TaskParams& p, Rng& rng) {
    auto keys = rng.sample_without_replacement(kKeyCount, p.hop_links);
    auto bridges = rng.sample_without_replacement(kBridgeCount, p.hop_links);
    auto values = rng.sample_without_replacement(kValueCount, p.hop_links);
    int target = rng.uniform_int(0, p.hop_links - 1);

    std::vector<int> link_doc{kBos};
    std::vector<int> fact_doc{kBos};
    auto link_order = rng.sample_without_replacement(p.hop_links, p.hop_links);
    auto fact_order = rng.sample_without_replacement(p.hop_links, p.hop_links);
    for (int i = 0; i < p.hop_links; ++i) {
        int l = link_order[static_cast<size_t>(i)];
        link_doc.insert(link_doc.end(), {kKeyBase + keys[static_cast<size_t>(l)], kLink,
                                         kBridgeBase + bridges[static_cast<size_t>(l)], kSep});
        int f = fact_order[static_cast<size_t>(i)];
        fact_doc.insert(fact_doc.end(), {kBridgeBase + bridges[static_cast<size_t>(f)], kIs,
                                         kValueBase + values[static_cast<size_t>(f)], kSep});
    }
    pad_with_filler(link_doc, p.doc_tokens, rng);
    pad_with_filler(fact_doc, p.doc_tokens, rng);

    // Content docs land at two random slots; link-before-fact only half the
    // time so composition never keys on document order.
    auto slots = rng.sample_without_replacement(p.n_docs, 2);
    int link_slot = slots[0], fact_slot = slots[1];

    TaskInstance inst;
    inst.domain = Domain::multihop;
    for (int d = 0; d < p.n_docs; ++d) {
        if (d == link_slot) inst.documents.push_back(link_doc);
        else if (d == fact_slot) inst.documents.push_back(fact_doc);
        else inst.documents.push_back(filler_doc(p.doc_tokens, rng));
    }
    inst.query = {kQuery, kKeyBase + keys[static_cast<size_t>(target)], kAnswer};
    inst.gold_answer = {kValueBase + values[static_cast<size_t>(target)]};
    return inst;
}

// Indices of the two multihop content documents (link, fact).
std::pair<int, int> multihop_content_docs(const TaskInstance& inst) {
    int link = -1, fact = -1;
    for (size_t d = 0; d < inst.documents.size(); ++d) {
        const auto& doc = inst.documents[d];
        for (size_t i = 0; i + 1 < doc.size(); ++i) {
            if (doc[i + 1] == kLink) { link = static_cast<int>(d); break; }
            if (doc[i + 1] == kIs && doc[i] >= kBridgeBase &&
                doc[i] < kBridgeBase + kBridgeCount) {
                fact = static_cast<int>(d);
                break;
            }
        }
    }
    if (link < 0 || fact < 0) throw InvariantError("multihop instance lacks content docs");
    return {link, fact};
}

} // namespace

std::string_view domain_name(Domain d) {
    switch (d) {
        case Domain::needle: return "needle";
        case Domain::kv_biography: return "kv_biography";
        case Domain::multihop: return "multihop";
    }
    throw ConfigError("unknown domain");
}

Domain parse_domain(std::string_view name) {
    for (Domain d : kAllDomains)
        if (domain_name(d) == name) return d;
    throw ConfigError("unknown domain: " + std::string(name));
}

void TaskParams::validate(Domain d) const {
    if (n_docs < 1) throw ConfigError("n_docs must be >= 1");
    if (d == Domain::multihop && n_docs < 2)
        throw ConfigError("multihop needs at least 2 documents");
    if (bio_attrs < 1 || bio_attrs > kAttrCount)
        throw ConfigError("bio_attrs out of range");
    if (hop_links < 2 || hop_links > kBridgeCount)
        throw ConfigError("hop_links out of range");
    if (max_answer_tokens < 1) throw ConfigError("max_answer_tokens must be >= 1");
    if (n_docs > kKeyCount || n_docs > kEntityCount)
        throw ConfigError("n_docs exceeds content vocabulary");
    if (n_docs * bio_attrs > kValueCount)
        throw ConfigError("biography values exceed vocabulary");
    if (doc_tokens < min_doc_tokens(d, *this))
        throw ConfigError("doc_tokens too small for domain " + std::string(domain_name(d)));
}

std::vector<int> flatten(const TaskInstance& inst) {
    std::vector<int> out;
    for (const auto& doc : inst.documents) out.insert(out.end(), doc.begin(), doc.end());
    out.insert(out.end(), inst.query.begin(), inst.query.end());
    return out;
}

TaskInstance sample_instance(Domain d, const TaskParams& p, Rng& rng) {
    p.validate(d);
    switch (d) {
        case Domain::needle: return sample_needle(p, rng);
        case Domain::kv_biography: return sample_biography(p, rng);
        case Domain::multihop: return sample_multihop(p, rng);
    }
    throw ConfigError("unknown domain");
}

std::vector<int> extract_answer(std::span<const int> generated) {
    std::vector<int> out;
    for (int t : generated) {
        if (t == kStop) break;
        if (t != kPad) out.push_back(t);
    }
    return out;
}

std::vector<int> answer_full_prefill(const ModelWeightsT<float>& w,
                                     const TaskInstance& inst, int max_answer_tokens) {
    auto gen = generate(w, flatten(inst), max_answer_tokens, kStop);
    return extract_answer(gen.ids);
}

std::vector<TaskInstance> gen_tasks(const ModelWeightsT<float>& w, Domain d, int n,
                                    const TaskParams& p, Rng& rng) {
    if (n < 1) throw ConfigError("gen_tasks: n must be >= 1");
    p.validate(d);

    std::vector<TaskInstance> accepted;
    int attempts = 0;
    const int max_attempts = 2 * n;
    while (static_cast<int>(accepted.size()) < n && attempts < max_attempts) {
        ++attempts;
        auto inst = sample_instance(d, p, rng);
        if (answer_full_prefill(w, inst, p.max_answer_tokens) == inst.gold_answer)
            accepted.push_back(std::move(inst));
    }
    double rate = static_cast<double>(accepted.size()) / attempts;
    if (static_cast<int>(accepted.size()) < n || rate < 0.9)
        throw InvariantError("gen_tasks(" + std::string(domain_name(d)) +
                             "): answerable rate " + std::to_string(rate) + " below 0.9");

    if (d == Domain::multihop) {
        int both_fail = 0;
        for (const auto& inst : accepted) {
            auto [link, fact] = multihop_content_docs(inst);
            bool fails_both = true;
            for (int drop : {link, fact}) {
                TaskInstance masked = inst;
                masked.documents.erase(masked.documents.begin() + drop);
                if (answer_full_prefill(w, masked, p.max_answer_tokens) == inst.gold_answer) {
                    fails_both = false;
                    break;
                }
            }
            both_fail += fails_both ? 1 : 0;
        }
        double fail_rate = static_cast<double>(both_fail) / accepted.size();
        if (fail_rate < 0.8)
            throw InvariantError("gen_tasks(multihop): masked-document failure rate " +
                                 std::to_string(fail_rate) + " below 0.8");
    }
    return accepted;
}

PretrainSequence make_pretrain_sequence(Domain d, const TaskParams& p, Rng& rng) {
    auto inst = sample_instance(d, p, rng);
    PretrainSequence s;
    s.ids = flatten(inst);
    s.prompt_tokens = static_cast<int64_t>(s.ids.size());
    s.ids.insert(s.ids.end(), inst.gold_answer.begin(), inst.gold_answer.end());
    s.ids.push_back(kStop);
    return s;
}

} // namespace kvp
