#include "kvpacket/distill.hpp"

#include <algorithm>
#include <cmath>

#include "kvpacket/error.hpp"
#include "kvpacket/io.hpp"
#include "kvpacket/optim.hpp"

namespace kvp {

namespace {

constexpr uint32_t kSamplesVersion = 1;

// Positional shift on tape: rotating every key by a constant delta is the
// same rotation rope applies at position delta, so its gradient is exact.
template <class S>
KVCacheT<S> shift_cache_taped(const KVCacheT<S>& c, int64_t delta, const ModelConfig& cfg) {
    if (delta == 0) return c;
    KVCacheT<S> out;
    out.base_position = c.base_position + delta;
    out.n_tokens = c.n_tokens;
    for (const auto& l : c.layers) {
        std::vector<int64_t> dvec(static_cast<size_t>(l.keys.rows()), delta);
        LayerKVT<S> nl;
        nl.keys = rope_rows(l.keys, dvec, cfg.n_heads, static_cast<S>(cfg.rope_theta));
        nl.values = l.values;
        nl.positions.reserve(l.positions.size());
        for (int64_t p : l.positions) nl.positions.push_back(p + delta);
        out.layers.push_back(std::move(nl));
    }
    return out;
}

float tensor_norm(const Tensor& t) {
    return t.numel() == 0 ? 0.f : std::sqrt(t.grad().square().sum());
}

struct BatchPlan {
    // per batch, per set: how many samples to draw
    std::vector<std::vector<int>> counts;
};

// Largest-remainder split of each batch across sets, so every batch holds
// each set's proportional share within one sample.
BatchPlan plan_batches(const std::vector<int>& set_sizes, int batch_size) {
    int remaining_total = 0;
    for (int s : set_sizes) remaining_total += s;
    std::vector<int> remaining = set_sizes;

    BatchPlan plan;
    while (remaining_total > 0) {
        int slots = std::min(batch_size, remaining_total);
        std::vector<int> take(remaining.size(), 0);
        std::vector<std::pair<double, size_t>> frac;
        int assigned = 0;
        for (size_t d = 0; d < remaining.size(); ++d) {
            double ideal = static_cast<double>(slots) * remaining[d] / remaining_total;
            take[d] = static_cast<int>(ideal);
            assigned += take[d];
            frac.emplace_back(ideal - take[d], d);
        }
        std::sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) {
            return a.first > b.first || (a.first == b.first && a.second < b.second);
        });
        for (size_t i = 0; assigned < slots; ++i) {
            size_t d = frac[i % frac.size()].second;
            if (take[d] < remaining[d]) {
                ++take[d];
                ++assigned;
            }
        }
        for (size_t d = 0; d < remaining.size(); ++d) {
            remaining[d] -= take[d];
            remaining_total -= take[d];
        }
        plan.counts.push_back(std::move(take));
    }
    return plan;
}

TrainResult train_core(const std::vector<std::span<const DistillSample>>& sets,
                       AdapterParams& adapters, const ModelWeightsT<float>& w,
                       const TrainConfig& tc) {
    tc.validate();
    int total_samples = 0;
    for (const auto& s : sets) total_samples += static_cast<int>(s.size());
    if (total_samples == 0) throw ConfigError("train: no samples");
    for (const auto& s : sets)
        if (s.empty()) throw ConfigError("train: a sample set is empty");

    if (tc.epochs == 0) return {};

    adapters.set_requires_grad(true);
    AdamWConfig oc;
    oc.lr = tc.lr;
    AdamW opt(adapters.parameters(), oc);

    std::vector<int> set_sizes;
    for (const auto& s : sets) set_sizes.push_back(static_cast<int>(s.size()));
    auto plan = plan_batches(set_sizes, tc.batch_size);
    const int64_t steps_per_epoch = static_cast<int64_t>(plan.counts.size());
    const int64_t total_steps = steps_per_epoch * tc.epochs;

    Rng order_rng = Rng(tc.seed).stream("distill-order");
    TrainResult result;
    int step = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        std::vector<std::vector<const DistillSample*>> queues(sets.size());
        for (size_t d = 0; d < sets.size(); ++d) {
            for (const auto& s : sets[d]) queues[d].push_back(&s);
            order_rng.shuffle(queues[d]);
        }
        std::vector<size_t> cursor(sets.size(), 0);

        for (const auto& batch_take : plan.counts) {
            float lr = lr_schedule(tc.lr, step, total_steps);
            opt.set_lr(lr);
            opt.zero_grad();

            int batch_n = 0;
            for (int c : batch_take) batch_n += c;
            float batch_loss = 0;
            for (size_t d = 0; d < sets.size(); ++d)
                for (int i = 0; i < batch_take[d]; ++i) {
                    const DistillSample& s = *queues[d][cursor[d]++];
                    Tape tape;
                    TapeScope scope(tape);
                    auto loss = scale(distill_sample_loss<float>(w, adapters, s.documents,
                                                                 s.query, s.continuation,
                                                                 s.teacher),
                                      1.0f / static_cast<float>(batch_n));
                    float v = loss.item();
                    if (!std::isfinite(v))
                        throw TrainingError(
                            "distill: non-finite loss at step " + std::to_string(step) +
                            " (lr " + std::to_string(lr) + ", |dH| " +
                            std::to_string(tensor_norm(adapters.header)) + ", |dT| " +
                            std::to_string(tensor_norm(adapters.trailer)) + ")");
                    batch_loss += v;
                    tape.backward(loss);
                }
            opt.step();
            result.history.push_back({step, lr, batch_loss});
            ++step;
        }
    }
    adapters.set_requires_grad(false);
    return result;
}

} // namespace

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (lr <= 0) throw ConfigError("train: lr must be positive");
    if (n_samples < 1) throw ConfigError("train: n_samples must be >= 1");
    if (max_continuation < 1) throw ConfigError("train: max_continuation must be >= 1");
    if (min_docs < 1 || max_docs < min_docs) throw ConfigError("train: bad docs range");
}

std::vector<DistillSample> build_samples(const ModelWeightsT<float>& w, Domain domain,
                                         const TaskParams& base, const TrainConfig& tc,
                                         Rng& rng) {
    tc.validate();
    std::vector<DistillSample> samples;
    samples.reserve(static_cast<size_t>(tc.n_samples));
    for (int i = 0; i < tc.n_samples; ++i) {
        TaskParams p = base;
        p.n_docs = rng.uniform_int(tc.min_docs, tc.max_docs);
        if (domain == Domain::multihop) p.n_docs = std::max(p.n_docs, 2);
        auto inst = sample_instance(domain, p, rng);

        auto gen = generate(w, flatten(inst), tc.max_continuation, vocab::kStop);
        if (gen.ids.empty()) throw TrainingError("build_samples: teacher produced no tokens");

        DistillSample s;
        s.documents = std::move(inst.documents);
        s.query = std::move(inst.query);
        s.continuation = std::move(gen.ids);
        s.teacher = gen.dists;
        samples.push_back(std::move(s));
    }
    return samples;
}

void save_samples(std::span<const DistillSample> samples, const std::filesystem::path& path) {
    ByteWriter bw;
    bw.magic("KVDS");
    bw.u32(kSamplesVersion);
    bw.u64(samples.size());
    for (const auto& s : samples) {
        bw.u32(static_cast<uint32_t>(s.documents.size()));
        for (const auto& doc : s.documents) bw.i32_array(doc);
        bw.i32_array(s.query);
        bw.i32_array(s.continuation);
        bw.u64(static_cast<uint64_t>(s.teacher.rows()));
        bw.u64(static_cast<uint64_t>(s.teacher.cols()));
        bw.f32_array({s.teacher.value().data(), static_cast<size_t>(s.teacher.numel())});
    }
    bw.write_file(path);
}

std::vector<DistillSample> load_samples(const std::filesystem::path& path) {
    auto br = ByteReader::from_file(path);
    br.expect_magic("KVDS");
    uint32_t version = br.u32();
    if (version != kSamplesVersion)
        throw FormatError("samples " + path.string() + ": version " + std::to_string(version));
    uint64_t n = br.u64();
    std::vector<DistillSample> samples;
    samples.reserve(n);
    for (uint64_t i = 0; i < n; ++i) {
        DistillSample s;
        uint32_t n_docs = br.u32();
        for (uint32_t d = 0; d < n_docs; ++d) s.documents.push_back(br.i32_array());
        s.query = br.i32_array();
        s.continuation = br.i32_array();
        int64_t rows = static_cast<int64_t>(br.u64());
        int64_t cols = static_cast<int64_t>(br.u64());
        s.teacher = tensor_from<float>(br.f32_array(static_cast<size_t>(rows * cols)),
                                       {rows, cols});
        samples.push_back(std::move(s));
    }
    if (!br.at_end()) throw FormatError("samples " + path.string() + ": trailing bytes");
    return samples;
}

template <class S>
TensorT<S> student_forward(const ModelWeightsT<S>& w, const AdapterParamsT<S>& a,
                           std::span<const std::vector<int>> documents,
                           std::span<const int> query, std::span<const int> continuation) {
    if (documents.empty()) throw ShapeError("student_forward: no documents");
    if (query.empty()) throw ShapeError("student_forward: empty query");
    if (continuation.empty()) throw ShapeError("student_forward: empty continuation");

    std::vector<KVCacheT<S>> parts;
    int64_t offset = 0;
    for (const auto& doc : documents) {
        auto c = wrap_cache(w, a, doc);
        parts.push_back(shift_cache_taped(c, offset, w.config));
        offset += c.n_tokens;
    }

    KVCacheT<S> merged;
    merged.base_position = 0;
    merged.n_tokens = offset;
    const size_t L = parts[0].layers.size();
    for (size_t l = 0; l < L; ++l) {
        std::vector<TensorT<S>> ks, vs;
        LayerKVT<S> nl;
        for (const auto& p : parts) {
            ks.push_back(p.layers[l].keys);
            vs.push_back(p.layers[l].values);
            nl.positions.insert(nl.positions.end(), p.layers[l].positions.begin(),
                                p.layers[l].positions.end());
        }
        nl.keys = concat_rows<S>(ks);
        nl.values = concat_rows<S>(vs);
        merged.layers.push_back(std::move(nl));
    }

    std::vector<int> qg(query.begin(), query.end());
    qg.insert(qg.end(), continuation.begin(), continuation.end());
    std::vector<int64_t> positions(qg.size());
    for (size_t i = 0; i < positions.size(); ++i)
        positions[i] = offset + static_cast<int64_t>(i);

    auto res = forward_tokens(w, embedding_rows(w.embedding, qg), positions, &merged);
    auto g_rows = slice_rows(res.logits, static_cast<int64_t>(query.size()) - 1,
                             static_cast<int64_t>(continuation.size()));
    return softmax_rows(g_rows);
}

template <class S>
TensorT<S> distill_sample_loss(const ModelWeightsT<S>& w, const AdapterParamsT<S>& a,
                               std::span<const std::vector<int>> documents,
                               std::span<const int> query, std::span<const int> continuation,
                               const TensorT<S>& teacher) {
    auto student = student_forward(w, a, documents, query, continuation);
    return kl_divergence(teacher, student);
}

TrainResult train(std::span<const DistillSample> samples, AdapterParams& adapters,
                  const ModelWeightsT<float>& w, const TrainConfig& tc) {
    return train_core({samples}, adapters, w, tc);
}

TrainResult train_mixture(std::span<const std::vector<DistillSample>> sample_sets,
                          AdapterParams& adapters, const ModelWeightsT<float>& w,
                          const TrainConfig& tc) {
    if (sample_sets.empty()) throw ConfigError("train_mixture: no sample sets");
    std::vector<std::span<const DistillSample>> sets;
    for (const auto& s : sample_sets) sets.emplace_back(s);
    return train_core(sets, adapters, w, tc);
}

#define KVP_INSTANTIATE_DISTILL(S)                                                          \
    template TensorT<S> student_forward<S>(const ModelWeightsT<S>&, const AdapterParamsT<S>&, \
                                           std::span<const std::vector<int>>,               \
                                           std::span<const int>, std::span<const int>);     \
    template TensorT<S> distill_sample_loss<S>(                                             \
        const ModelWeightsT<S>&, const AdapterParamsT<S>&, std::span<const std::vector<int>>, \
        std::span<const int>, std::span<const int>, const TensorT<S>&);

KVP_INSTANTIATE_DISTILL(float)
KVP_INSTANTIATE_DISTILL(double)

} // namespace kvp
