#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "kvpacket/packet.hpp"
#include "kvpacket/tasks.hpp"

namespace kvp {

struct DistillSample {
    std::vector<std::vector<int>> documents;
    std::vector<int> query;
    std::vector<int> continuation; // G, greedy teacher output
    Tensor teacher;                // [|G| x V], each row the teacher softmax
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 64;
    float lr = 5e-4f; // linearly decayed to zero over all steps
    int n_samples = 256;
    int max_continuation = 16;
    int min_docs = 2, max_docs = 4;
    uint64_t seed = 0;

    void validate() const;
};

// Teacher passes run once: sample task instances, generate greedily, record
// the full distribution at every generated step.
std::vector<DistillSample> build_samples(const ModelWeightsT<float>& w, Domain domain,
                                         const TaskParams& base, const TrainConfig& tc,
                                         Rng& rng);

void save_samples(std::span<const DistillSample> samples, const std::filesystem::path& path);
std::vector<DistillSample> load_samples(const std::filesystem::path& path);

// Packet-composed student pass: every document wrapped independently under
// the adapters, realigned onto one position line, concatenated, then a
// teacher-forced [Q, G] forward. Returns the per-step distributions over G's
// positions. Differentiable end to end; adapters are the only trainables.
template <class S>
TensorT<S> student_forward(const ModelWeightsT<S>& w, const AdapterParamsT<S>& a,
                           std::span<const std::vector<int>> documents,
                           std::span<const int> query, std::span<const int> continuation);

// Mean KL(teacher || student) over continuation steps.
template <class S>
TensorT<S> distill_sample_loss(const ModelWeightsT<S>& w, const AdapterParamsT<S>& a,
                               std::span<const std::vector<int>> documents,
                               std::span<const int> query, std::span<const int> continuation,
                               const TensorT<S>& teacher);

struct TrainStep {
    int step = 0;
    float lr = 0;
    float loss = 0;
};

struct TrainResult {
    std::vector<TrainStep> history; // one entry per optimizer step
};

// AdamW over {H, T} with gradient accumulation to batch_size and linear lr
// decay. The model stays frozen; TrainingError on non-finite loss.
TrainResult train(std::span<const DistillSample> samples, AdapterParams& adapters,
                  const ModelWeightsT<float>& w, const TrainConfig& tc);

// Same loop with per-batch domain interleaving: every batch carries each
// sample set's proportional share within one sample.
TrainResult train_mixture(std::span<const std::vector<DistillSample>> sample_sets,
                          AdapterParams& adapters, const ModelWeightsT<float>& w,
                          const TrainConfig& tc);

} // namespace kvp
