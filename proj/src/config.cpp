#include "kvpacket/config.hpp"

#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include <json.hpp>

#include "kvpacket/error.hpp"

namespace kvp {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& scope, const std::string& msg) {
    throw ConfigError("config: " + (scope.empty() ? msg : scope + ": " + msg));
}

void check_keys(const json& j, const std::string& scope,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) fail(scope, "expected an object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            if (item.key() == a) known = true;
        if (!known) fail(scope, "unknown key '" + item.key() + "'");
    }
}

template <class T>
void read(const json& j, const std::string& scope, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(scope, std::string("bad value for '") + key + "'");
    }
}

void read_path(const json& j, const std::string& scope, const char* key,
               std::filesystem::path& out) {
    std::string s = out.string();
    read(j, scope, key, s);
    out = s;
}

void parse_model(const json& j, ModelConfig& m) {
    check_keys(j, "model", {"vocab_size", "d_model", "n_layers", "n_heads", "head_dim",
                            "ffn_dim", "rope_theta", "max_position"});
    read(j, "model", "vocab_size", m.vocab_size);
    read(j, "model", "d_model", m.d_model);
    read(j, "model", "n_layers", m.n_layers);
    read(j, "model", "n_heads", m.n_heads);
    read(j, "model", "head_dim", m.head_dim);
    read(j, "model", "ffn_dim", m.ffn_dim);
    read(j, "model", "rope_theta", m.rope_theta);
    read(j, "model", "max_position", m.max_position);
}

void parse_task(const json& j, TaskParams& t) {
    check_keys(j, "task",
               {"n_docs", "doc_tokens", "bio_attrs", "hop_links", "max_answer_tokens"});
    read(j, "task", "n_docs", t.n_docs);
    read(j, "task", "doc_tokens", t.doc_tokens);
    read(j, "task", "bio_attrs", t.bio_attrs);
    read(j, "task", "hop_links", t.hop_links);
    read(j, "task", "max_answer_tokens", t.max_answer_tokens);
}

void parse_pretrain(const json& j, PretrainConfig& p) {
    check_keys(j, "pretrain",
               {"max_steps", "batch_size", "lr", "warmup_steps", "eval_every",
                "eval_instances", "needle_accuracy", "aux_accuracy", "min_doc_tokens",
                "max_doc_tokens", "min_docs", "max_docs"});
    read(j, "pretrain", "max_steps", p.max_steps);
    read(j, "pretrain", "batch_size", p.batch_size);
    read(j, "pretrain", "lr", p.lr);
    read(j, "pretrain", "warmup_steps", p.warmup_steps);
    read(j, "pretrain", "eval_every", p.eval_every);
    read(j, "pretrain", "eval_instances", p.eval_instances);
    read(j, "pretrain", "needle_accuracy", p.needle_accuracy);
    read(j, "pretrain", "aux_accuracy", p.aux_accuracy);
    read(j, "pretrain", "min_doc_tokens", p.min_doc_tokens);
    read(j, "pretrain", "max_doc_tokens", p.max_doc_tokens);
    read(j, "pretrain", "min_docs", p.min_docs);
    read(j, "pretrain", "max_docs", p.max_docs);
}

void parse_train(const json& j, TrainConfig& t) {
    check_keys(j, "train", {"epochs", "batch_size", "lr", "n_samples", "max_continuation",
                            "min_docs", "max_docs"});
    read(j, "train", "epochs", t.epochs);
    read(j, "train", "batch_size", t.batch_size);
    read(j, "train", "lr", t.lr);
    read(j, "train", "n_samples", t.n_samples);
    read(j, "train", "max_continuation", t.max_continuation);
    read(j, "train", "min_docs", t.min_docs);
    read(j, "train", "max_docs", t.max_docs);
}

void parse_adapters(const json& j, RunConfig& r) {
    check_keys(j, "adapters", {"n_header", "n_trailer"});
    read(j, "adapters", "n_header", r.n_header);
    read(j, "adapters", "n_trailer", r.n_trailer);
}

void parse_matrix(const json& j, RunConfig& r) {
    check_keys(j, "matrix_adapters", {"needle", "kv_biography", "multihop", "mixture"});
    for (const auto& item : j.items()) {
        if (!item.value().is_string())
            fail("matrix_adapters", "bad value for '" + item.key() + "'");
        r.matrix_adapters[item.key()] = item.value().get<std::string>();
    }
}

} // namespace

void RunConfig::validate() const {
    model.validate();
    pretrain.validate();
    train.validate();
    if (domains.empty()) throw ConfigError("config: domains must be non-empty");
    if (strategies.empty()) throw ConfigError("config: strategies must be non-empty");
    for (Domain d : domains) task.validate(d);
    for (const auto& s : strategies)
        if (s.kind == EvalStrategy::Kind::recompute) s.policy.validate();
    if (n_header < 0 || n_trailer < 0)
        throw ConfigError("config: adapter token counts must be >= 0");
    if (instances_per_domain < 1)
        throw ConfigError("config: instances_per_domain must be >= 1");
    if (ttft_reps < 1) throw ConfigError("config: ttft_reps must be >= 1");
    if (bandwidth_gb_s <= 0) throw ConfigError("config: bandwidth_gb_s must be > 0");
    if (corpus_docs < 1) throw ConfigError("config: corpus_docs must be >= 1");
    if (matrix_instances < 1) throw ConfigError("config: matrix_instances must be >= 1");
    if (model_path.empty() || store_dir.empty() || out_dir.empty())
        throw ConfigError("config: model_path, store_dir, out_dir must be non-empty");
    if (!matrix_adapters.empty())
        for (const char* k : {"needle", "kv_biography", "multihop", "mixture"})
            if (!matrix_adapters.contains(k))
                throw ConfigError(std::string("config: matrix_adapters missing '") + k +
                                  "' (all four train sets or none)");
}

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }
    check_keys(j, "",
               {"model", "task", "pretrain", "train", "adapters", "model_path",
                "adapters_path", "store_dir", "out_dir", "domains", "strategies",
                "instances_per_domain", "ttft_reps", "bandwidth_gb_s", "corpus_docs",
                "seed", "matrix_adapters", "matrix_instances"});

    RunConfig r;
    if (j.contains("model")) parse_model(j.at("model"), r.model);
    if (j.contains("task")) parse_task(j.at("task"), r.task);
    if (j.contains("pretrain")) parse_pretrain(j.at("pretrain"), r.pretrain);
    if (j.contains("train")) parse_train(j.at("train"), r.train);
    if (j.contains("adapters")) parse_adapters(j.at("adapters"), r);
    if (j.contains("matrix_adapters")) parse_matrix(j.at("matrix_adapters"), r);

    read_path(j, "", "model_path", r.model_path);
    read_path(j, "", "adapters_path", r.adapters_path);
    read_path(j, "", "store_dir", r.store_dir);
    read_path(j, "", "out_dir", r.out_dir);
    read(j, "", "instances_per_domain", r.instances_per_domain);
    read(j, "", "ttft_reps", r.ttft_reps);
    read(j, "", "bandwidth_gb_s", r.bandwidth_gb_s);
    read(j, "", "corpus_docs", r.corpus_docs);
    read(j, "", "seed", r.seed);
    read(j, "", "matrix_instances", r.matrix_instances);

    if (j.contains("domains")) {
        std::vector<std::string> names;
        read(j, "", "domains", names);
        r.domains.clear();
        for (const auto& n : names) r.domains.push_back(parse_domain(n));
    }
    if (j.contains("strategies")) {
        std::vector<std::string> names;
        read(j, "", "strategies", names);
        r.strategies.clear();
        for (const auto& n : names) r.strategies.push_back(parse_strategy(n));
    }
    return r;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    auto r = parse_run_config(buf.str());
    if (const char* env = std::getenv("KVP_STORE"); env && *env) r.store_dir = env;
    return r;
}

} // namespace kvp
