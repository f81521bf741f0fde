#include "kvpacket/pretrain.hpp"

#include <algorithm>
#include <string>

#include "kvpacket/error.hpp"

namespace kvp {

namespace {

Domain draw_domain(Rng& rng) {
    double u = rng.uniform();
    if (u < 0.3) return Domain::needle;
    if (u < 0.6) return Domain::kv_biography;
    return Domain::multihop;
}

// Geometry varies per sequence; doc_tokens clamps up to the domain minimum.
PretrainSequence draw_sequence(const PretrainConfig& pc, Rng& rng) {
    Domain d = draw_domain(rng);
    TaskParams p = pc.eval_params;
    p.n_docs = rng.uniform_int(pc.min_docs, pc.max_docs);
    if (d == Domain::multihop) p.n_docs = std::max(p.n_docs, 2);
    int lo = pc.min_doc_tokens;
    switch (d) {
        case Domain::needle: lo = std::max(lo, 4); break;
        case Domain::kv_biography: lo = std::max(lo, 2 + 4 * p.bio_attrs); break;
        case Domain::multihop: lo = std::max(lo, 1 + 4 * p.hop_links); break;
    }
    p.doc_tokens = rng.uniform_int(lo, std::max(lo, pc.max_doc_tokens));
    return make_pretrain_sequence(d, p, rng);
}

} // namespace

void PretrainConfig::validate() const {
    if (max_steps < 1) throw ConfigError("pretrain: max_steps must be >= 1");
    if (batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");
    if (lr <= 0) throw ConfigError("pretrain: lr must be positive");
    if (eval_every < 1) throw ConfigError("pretrain: eval_every must be >= 1");
    if (eval_instances < 1) throw ConfigError("pretrain: eval_instances must be >= 1");
    if (min_doc_tokens < 4 || max_doc_tokens < min_doc_tokens)
        throw ConfigError("pretrain: bad doc_tokens range");
    if (min_docs < 1 || max_docs < min_docs) throw ConfigError("pretrain: bad docs range");
}

float domain_accuracy(const ModelWeightsT<float>& w, Domain d, const TaskParams& p,
                      int n, Rng& rng) {
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        auto inst = sample_instance(d, p, rng);
        if (answer_full_prefill(w, inst, p.max_answer_tokens) == inst.gold_answer) ++hits;
    }
    return static_cast<float>(hits) / static_cast<float>(n);
}

ModelWeightsT<float> pretrain_toy_model(const ModelConfig& mc, const PretrainConfig& pc,
                                        uint64_t seed, PretrainLog* log) {
    mc.validate();
    pc.validate();

    Rng root(seed);
    auto init_rng = root.stream("pretrain-init");
    auto data_rng = root.stream("pretrain-data");

    auto w = init_model<float>(mc, init_rng);
    AdamWConfig oc;
    oc.lr = pc.lr;
    AdamW opt(w.parameters(), oc);

    float needle = 0, bio = 0, hop = 0;
    int step = 0;
    bool reached = false;
    for (; step < pc.max_steps; ++step) {
        float lr = lr_schedule(pc.lr, step, pc.max_steps, pc.warmup_steps);
        opt.set_lr(lr);
        opt.zero_grad();

        float batch_loss = 0;
        for (int b = 0; b < pc.batch_size; ++b) {
            auto seq = draw_sequence(pc, data_rng);
            int64_t n = static_cast<int64_t>(seq.ids.size());
            // CE over the answer span only: filler tokens are iid noise whose
            // entropy floor would drown the retrieval gradient.
            std::vector<int> targets(seq.ids.begin() + seq.prompt_tokens, seq.ids.end());

            Tape tape;
            TapeScope scope(tape);
            auto logits = prefill(w, embedding_rows(w.embedding, seq.ids), 0).logits;
            auto pred = slice_rows(logits, seq.prompt_tokens - 1, n - seq.prompt_tokens);
            auto loss = scale(cross_entropy_rows(pred, targets),
                              1.0f / static_cast<float>(pc.batch_size));
            float v = loss.item();
            if (!std::isfinite(v))
                throw TrainingError("pretrain: non-finite loss at step " + std::to_string(step));
            batch_loss += v;
            tape.backward(loss);
        }
        opt.step();

        if (log) {
            log->loss.push_back(batch_loss);
            log->lr.push_back(lr);
        }

        if ((step + 1) % pc.eval_every == 0) {
            // Fresh substream per probe: held out from training data, stable
            // across the run so the gate is a fixed yardstick.
            auto eval_rng = root.stream("pretrain-eval");
            needle = domain_accuracy(w, Domain::needle, pc.eval_params, pc.eval_instances,
                                     eval_rng);
            bio = domain_accuracy(w, Domain::kv_biography, pc.eval_params, pc.eval_instances,
                                  eval_rng);
            hop = domain_accuracy(w, Domain::multihop, pc.eval_params, pc.eval_instances,
                                  eval_rng);
            if (log) {
                log->eval_steps.push_back(step + 1);
                log->needle_acc.push_back(needle);
                log->bio_acc.push_back(bio);
                log->hop_acc.push_back(hop);
            }
            if (needle >= pc.needle_accuracy && bio >= pc.aux_accuracy && hop >= pc.aux_accuracy) {
                reached = true;
                if (log) log->stopped_at = step + 1;
                break;
            }
        }
    }

    if (!reached)
        throw TrainingError("pretrain: accuracy gate not reached in " +
                            std::to_string(pc.max_steps) + " steps (needle " +
                            std::to_string(needle) + ", kv_biography " + std::to_string(bio) +
                            ", multihop " + std::to_string(hop) + ")");

    w.set_requires_grad(false);
    return w;
}

} // namespace kvp
