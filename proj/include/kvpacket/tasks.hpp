#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "kvpacket/model.hpp"
#include "kvpacket/rng.hpp"

namespace kvp {

// Fixed synthetic vocabulary. Structural tokens first, then disjoint content
// ranges; every id below kSize is valid for the default 512-token config.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;     // starts every document block
inline constexpr int kSep = 2;
inline constexpr int kQuery = 3;
inline constexpr int kAnswer = 4;  // generation begins after this marker
inline constexpr int kStop = 5;
inline constexpr int kIs = 6;      // key -> value
inline constexpr int kLink = 7;    // key -> bridge entity

inline constexpr int kAttrBase = 8, kAttrCount = 8;
inline constexpr int kKeyBase = 16, kKeyCount = 128;
inline constexpr int kValueBase = 144, kValueCount = 128;
inline constexpr int kEntityBase = 272, kEntityCount = 64;
inline constexpr int kBridgeBase = 336, kBridgeCount = 64;
inline constexpr int kFillerBase = 400, kFillerCount = 112;
inline constexpr int kSize = 512;
} // namespace vocab

enum class Domain { needle, kv_biography, multihop };

std::string_view domain_name(Domain d);
Domain parse_domain(std::string_view name); // ConfigError on unknown name
inline constexpr Domain kAllDomains[] = {Domain::needle, Domain::kv_biography,
                                         Domain::multihop};

struct TaskParams {
    int n_docs = 4;
    int doc_tokens = 64;
    int bio_attrs = 4;   // records per biography document
    int hop_links = 5;   // link/fact triples per multihop document
    int max_answer_tokens = 4;

    void validate(Domain d) const; // ConfigError if a document cannot fit
};

struct TaskInstance {
    Domain domain = Domain::needle;
    std::vector<std::vector<int>> documents;
    std::vector<int> query;       // ends with the answer marker
    std::vector<int> gold_answer; // single value token
};

// Documents in order followed by the query: the full-attention prompt.
std::vector<int> flatten(const TaskInstance& inst);

// One unverified draw from the domain's generative grammar.
TaskInstance sample_instance(Domain d, const TaskParams& p, Rng& rng);

// Greedy full-prefill answer, stop-token stripped.
std::vector<int> answer_full_prefill(const ModelWeightsT<float>& w,
                                     const TaskInstance& inst,
                                     int max_answer_tokens);

// Strip everything from the first stop token on, and any pads.
std::vector<int> extract_answer(std::span<const int> generated);

// Verified generation: draws candidates, keeps those the full-prefill model
// answers exactly, and enforces an acceptance rate >= 0.9. For multihop it
// additionally measures the masked-document oracle (the model must fail when
// either content document is removed) and requires >= 0.8 of emitted
// instances to fail both ways. InvariantError when either gate misses.
std::vector<TaskInstance> gen_tasks(const ModelWeightsT<float>& w, Domain d,
                                    int n, const TaskParams& p, Rng& rng);

// Pretraining stream: a flattened instance with its gold answer and stop
// token appended. prompt_tokens marks where the supervised span begins.
struct PretrainSequence {
    std::vector<int> ids;
    int64_t prompt_tokens = 0;
};
PretrainSequence make_pretrain_sequence(Domain d, const TaskParams& p, Rng& rng);

} // namespace kvp
