#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "emofuse/data.hpp"
#include "emofuse/metrics.hpp"
#include "emofuse/training.hpp"

namespace emofuse {

enum class Family { baseline, intermediate, fusion, cross_task };

inline const char* to_string(Family f) {
    switch (f) {
        case Family::baseline: return "baseline";
        case Family::intermediate: return "intermediate";
        case Family::fusion: return "fusion";
        case Family::cross_task: return "cross_task";
    }
    return "?";
}

inline Family parse_family(const std::string& s) {
    if (s == "baseline") return Family::baseline;
    if (s == "intermediate") return Family::intermediate;
    if (s == "fusion") return Family::fusion;
    if (s == "cross_task") return Family::cross_task;
    throw ConfigError("unknown experiment family '" + s + "'");
}

// One table row on one HMC dataset.
struct PlanSpec {
    std::string model;  // row label, e.g. "BERT_HMC + BERT_GE"
    Family family = Family::baseline;
    std::string hmc;
    std::optional<std::string> emotion;
    std::optional<NegativePreset> negative_subset;
    std::optional<std::string> source_hmc;
    // Fusion prerequisites (plan ids); resolved from the suite when empty.
    std::optional<std::string> hmc_from;
    std::optional<std::string> emotion_from;
    bool scratch_branches = false;

    // Filesystem-safe "<model>__<hmc>".
    std::string id() const {
        std::string out;
        for (char c : model + "__" + hmc) {
            const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
            if (keep) out += c;
            else if (c == '+') out += "plus";
            else if (!out.empty() && out.back() != '_') out += '_';
        }
        return out;
    }

    void validate() const {
        if (model.empty() || hmc.empty()) throw ConfigError("plan needs a model name and an hmc dataset");
        const bool needs_emotion = family == Family::intermediate || family == Family::fusion;
        if (needs_emotion && !emotion) throw ConfigError("plan " + id() + ": " + to_string(family) + " needs an emotion dataset");
        if (family == Family::cross_task) {
            if (!source_hmc) throw ConfigError("plan " + id() + ": cross_task needs source_hmc");
            if (*source_hmc == hmc) throw ConfigError("plan " + id() + ": cross_task source and target are both " + hmc);
        }
        if (negative_subset && !needs_emotion) throw ConfigError("plan " + id() + ": negative_subset without emotion data");
    }
};

struct DatasetEntry {
    std::string name;
    TaskKind kind = TaskKind::single;
    std::optional<std::filesystem::path> path;
    std::optional<std::filesystem::path> label_map;
    std::optional<std::string> schema;  // delimited HMC export, see hmc_schema()
    std::optional<SyntheticSpec> synthetic;
    std::string part = "hmc";  // which half of the synthetic corpus
};

struct Suite {
    std::string name = "suite";
    std::map<std::string, DatasetEntry> datasets;
    std::size_t vocab_size = 2000;
    std::uint64_t split_seed = 1;
    EncoderConfig encoder;
    TrainConfig train;
    TrainConfig emotion_train;
    TrainConfig fusion_train;  // joint stage of fusion plans
    std::vector<std::uint64_t> seeds = kDefaultSeeds;
    std::vector<PlanSpec> plans;
    std::string baseline = "BERT_HMC";
    bool save_checkpoints = true;
    nlohmann::json raw;  // effective plan document (after overrides)

    const PlanSpec& plan(const std::string& id) const {
        for (const auto& p : plans)
            if (p.id() == id) return p;
        throw ConfigError("no plan with id '" + id + "'");
    }
};

// ---------------------------------------------------------------------------
// Plan file parsing
// ---------------------------------------------------------------------------

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw ConfigError(where + ": missing \"" + key + "\"");
    return j.at(key);
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("plan key \"") + key + "\": " + e.what());
    }
}

inline TaskKind parse_task(const std::string& s) {
    if (s == "single") return TaskKind::single;
    if (s == "multi") return TaskKind::multi;
    throw ConfigError("task must be \"single\" or \"multi\", got \"" + s + "\"");
}

inline std::vector<std::string> parse_emotion_labels(const nlohmann::json& j) {
    if (j.is_string()) {
        if (j == "GE") return kGoEmotionsLabels;
        if (j == "SE") return kSemEvalLabels;
        throw ConfigError("emotion_labels preset must be \"GE\" or \"SE\"");
    }
    return j.get<std::vector<std::string>>();
}

}  // namespace detail

inline SyntheticSpec synthetic_from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    s.n = detail::get_or<std::size_t>(j, "n", s.n);
    s.num_hmc_labels = detail::get_or<std::size_t>(j, "num_hmc_labels", s.num_hmc_labels);
    if (j.contains("emotion_labels")) s.emotion_labels = detail::parse_emotion_labels(j["emotion_labels"]);
    s.rho = detail::get_or<double>(j, "rho", s.rho);
    s.vocab_themes = detail::get_or<std::size_t>(j, "vocab_themes", s.vocab_themes);
    s.seed = detail::get_or<std::uint64_t>(j, "seed", s.seed);
    s.theme_purity = detail::get_or<double>(j, "theme_purity", s.theme_purity);
    s.emotion_n = detail::get_or<std::size_t>(j, "emotion_n", s.emotion_n);
    s.words_per_emotion = detail::get_or<std::size_t>(j, "words_per_emotion", s.words_per_emotion);
    if (j.contains("links")) s.links = j["links"].get<std::vector<std::vector<std::string>>>();
    return s;
}

inline EncoderConfig encoder_from_json(const nlohmann::json& j, EncoderConfig c = {}) {
    c.num_layers = detail::get_or(j, "num_layers", c.num_layers);
    c.hidden_dim = detail::get_or(j, "hidden_dim", c.hidden_dim);
    c.num_heads = detail::get_or(j, "num_heads", c.num_heads);
    c.ffn_dim = detail::get_or(j, "ffn_dim", c.ffn_dim);
    c.vocab_size = detail::get_or(j, "vocab_size", c.vocab_size);
    c.max_len = detail::get_or(j, "max_len", c.max_len);
    c.dropout_rate = detail::get_or(j, "dropout_rate", c.dropout_rate);
    return c;
}

inline TrainConfig train_from_json(const nlohmann::json& j, TrainConfig c = {}) {
    c.epochs = detail::get_or(j, "epochs", c.epochs);
    c.batch_size = detail::get_or(j, "batch_size", c.batch_size);
    c.lr = detail::get_or(j, "lr", c.lr);
    c.shuffle = detail::get_or(j, "shuffle", c.shuffle);
    return c;
}

inline Suite parse_suite(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
    if (!j.is_object()) throw ConfigError("plan file must hold a JSON object");
    const int version = detail::get_or<int>(j, "version", 1);
    if (version != 1) throw ConfigError("unsupported plan file version " + std::to_string(version));
    Suite s;
    s.raw = j;
    s.name = detail::get_or<std::string>(j, "suite", s.name);
    s.vocab_size = detail::get_or(j, "vocab_size", s.vocab_size);
    s.split_seed = detail::get_or(j, "split_seed", s.split_seed);
    s.baseline = detail::get_or(j, "baseline", s.baseline);
    s.save_checkpoints = detail::get_or(j, "save_checkpoints", s.save_checkpoints);
    if (j.contains("encoder")) s.encoder = encoder_from_json(j["encoder"]);
    if (j.contains("train")) s.train = train_from_json(j["train"]);
    s.emotion_train = j.contains("emotion_train") ? train_from_json(j["emotion_train"], s.train) : s.train;
    s.fusion_train = j.contains("fusion_train") ? train_from_json(j["fusion_train"], s.train) : s.train;
    if (j.contains("seeds")) s.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (s.seeds.empty()) throw ConfigError("plan file: seeds must be non-empty");
    s.encoder.validate();
    s.train.validate();
    s.emotion_train.validate();
    s.fusion_train.validate();

    for (const auto& [name, d] : detail::require(j, "datasets", "plan file").items()) {
        DatasetEntry e;
        e.name = name;
        e.kind = detail::parse_task(detail::get_or<std::string>(d, "task", "single"));
        if (d.contains("path")) e.path = base_dir / d["path"].get<std::string>();
        if (d.contains("label_map")) e.label_map = base_dir / d["label_map"].get<std::string>();
        if (d.contains("schema")) e.schema = d["schema"].get<std::string>();
        if (d.contains("synthetic")) {
            e.synthetic = synthetic_from_json(d["synthetic"]);
            e.part = detail::get_or<std::string>(d, "part", e.kind == TaskKind::multi ? "emotion" : "hmc");
            if (e.part != "hmc" && e.part != "emotion") throw ConfigError("dataset " + name + ": part must be hmc or emotion");
        }
        if (!e.path && !e.synthetic) throw ConfigError("dataset " + name + " needs \"path\" or \"synthetic\"");
        s.datasets[name] = std::move(e);
    }

    for (const auto& pj : detail::require(j, "plans", "plan file")) {
        PlanSpec p;
        p.model = detail::require(pj, "model", "plan").get<std::string>();
        p.family = parse_family(detail::require(pj, "family", "plan " + p.model).get<std::string>());
        p.hmc = detail::require(pj, "hmc", "plan " + p.model).get<std::string>();
        if (pj.contains("emotion")) p.emotion = pj["emotion"].get<std::string>();
        if (pj.contains("negative_subset")) {
            auto preset = parse_negative_preset(pj["negative_subset"].get<std::string>());
            if (!preset) throw ConfigError("plan " + p.model + ": negative_subset must be GE-neg or SE-neg");
            p.negative_subset = preset;
        }
        if (pj.contains("source_hmc")) p.source_hmc = pj["source_hmc"].get<std::string>();
        if (pj.contains("hmc_from")) p.hmc_from = pj["hmc_from"].get<std::string>();
        if (pj.contains("emotion_from")) p.emotion_from = pj["emotion_from"].get<std::string>();
        p.scratch_branches = detail::get_or(pj, "scratch_branches", false);
        p.validate();
        auto check_ds = [&](const std::string& name, TaskKind kind) {
            auto it = s.datasets.find(name);
            if (it == s.datasets.end()) throw ConfigError("plan " + p.id() + ": unknown dataset '" + name + "'");
            if (it->second.kind != kind) {
                throw ConfigError("plan " + p.id() + ": dataset " + name + " is " + to_string(it->second.kind) +
                                  "-label, expected " + to_string(kind));
            }
        };
        check_ds(p.hmc, TaskKind::single);
        if (p.emotion) check_ds(*p.emotion, TaskKind::multi);
        if (p.source_hmc) check_ds(*p.source_hmc, TaskKind::single);
        for (const auto& q : s.plans)
            if (q.id() == p.id()) throw ConfigError("duplicate plan id " + p.id());
        s.plans.push_back(std::move(p));
    }
    if (s.plans.empty()) throw ConfigError("plan file: no plans");

    // Fusion prerequisites default to the baseline on the same HMC data and
    // the intermediate plan that trained on the same emotion data.
    for (auto& p : s.plans) {
        if (p.family != Family::fusion || p.scratch_branches) continue;
        if (!p.hmc_from) {
            for (const auto& q : s.plans)
                if (q.family == Family::baseline && q.hmc == p.hmc) p.hmc_from = q.id();
        }
        if (!p.emotion_from) {
            for (const auto& q : s.plans)
                if (q.family == Family::intermediate && q.emotion == p.emotion && q.negative_subset == p.negative_subset) {
                    p.emotion_from = q.id();
                    break;
                }
        }
        if (!p.hmc_from) throw ConfigError("fusion plan " + p.id() + " needs a baseline plan on " + p.hmc);
        if (!p.emotion_from) {
            throw ConfigError("fusion plan " + p.id() + " needs an intermediate plan on " + *p.emotion +
                              (p.negative_subset ? std::string(" (") + to_string(*p.negative_subset) + ")" : ""));
        }
        const auto& a = s.plan(*p.hmc_from);
        const auto& b = s.plan(*p.emotion_from);
        if (a.family != Family::baseline) throw ConfigError("fusion plan " + p.id() + ": hmc_from must name a baseline plan");
        if (b.family != Family::intermediate) throw ConfigError("fusion plan " + p.id() + ": emotion_from must name an intermediate plan");
    }
    return s;
}

// Applies "a.b.c=value"; the key must already exist. Values parse as JSON,
// falling back to a plain string.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    std::string pointer;
    std::size_t start = 0;
    while (start <= key.size()) {
        const auto dot = key.find('.', start);
        pointer += "/" + key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    const nlohmann::json::json_pointer ptr(pointer);
    if (!doc.contains(ptr)) throw ConfigError("override key '" + key + "' does not exist in the plan");
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        value = text;
    }
    doc[ptr] = value;
}

inline Suite load_suite(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read plan file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    for (const auto& o : overrides) apply_override(j, o);
    return parse_suite(j, path.parent_path());
}

// FNV-1a over the compact dump of a JSON value (keys are sorted by nlohmann::json).
inline std::string config_hash(const nlohmann::json& j) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

// Everything that determines one cell's numbers.
inline nlohmann::json cell_config(const Suite& suite, const PlanSpec& plan, std::uint64_t seed) {
    nlohmann::json j;
    j["suite"] = suite.raw;
    j["suite"].erase("plans");
    j["suite"].erase("seeds");
    for (const auto& pj : suite.raw.at("plans"))
        if (pj.value("model", "") == plan.model && pj.value("hmc", "") == plan.hmc) j["plan"] = pj;
    j["seed"] = seed;
    return j;
}

// ---------------------------------------------------------------------------
// Prepared data shared by all cells of a suite
// ---------------------------------------------------------------------------

struct PreparedDataset {
    LabeledDataset full;
    SplitDataset split;
    EncodedDataset train, validation, test;
};

struct SuiteData {
    Vocabulary vocab;
    EncoderConfig encoder;  // vocab_size set to the built vocabulary
    std::map<std::string, PreparedDataset> datasets;

    const PreparedDataset& at(const std::string& name) const {
        auto it = datasets.find(name);
        if (it == datasets.end()) throw ConfigError("dataset '" + name + "' not prepared");
        return it->second;
    }
};

inline LabeledDataset materialize(const DatasetEntry& e) {
    LabeledDataset ds;
    if (e.synthetic) {
        auto corpus = make_synthetic(*e.synthetic);
        ds = e.part == "hmc" ? std::move(corpus.hmc) : std::move(corpus.emotion);
    } else if (e.schema) {
        auto mapping = hmc_schema(*e.schema);
        if (!mapping) throw ConfigError("dataset " + e.name + ": unknown schema '" + *e.schema + "'");
        ds = convert_delimited(*e.path, *mapping, e.name);
    } else {
        std::optional<std::vector<std::string>> map;
        if (e.label_map) map = load_label_map(*e.label_map);
        ds = load_dataset(*e.path, e.kind, map, e.name);
    }
    ds.name = e.name;
    if (ds.kind != e.kind) throw ConfigError("dataset " + e.name + ": task kind mismatch");
    return ds;
}

// Splits every dataset with the suite's split seed and trains one shared
// vocabulary on the union of the training splits.
inline SuiteData prepare_suite(const Suite& suite, const std::optional<Vocabulary>& fixed_vocab = std::nullopt) {
    SuiteData data;
    std::vector<std::string> corpus;
    for (const auto& [name, entry] : suite.datasets) {
        PreparedDataset p;
        p.full = materialize(entry);
        p.split = split_dataset(p.full, suite.split_seed);
        for (const auto& ex : p.split.train.examples) corpus.push_back(ex.text);
        data.datasets[name] = std::move(p);
    }
    data.vocab = fixed_vocab ? *fixed_vocab : build_vocab(corpus, suite.vocab_size);
    data.encoder = suite.encoder;
    data.encoder.vocab_size = data.vocab.size();
    data.encoder.validate();
    for (auto& [name, p] : data.datasets) {
        p.train = encode_dataset(p.split.train, data.vocab, data.encoder.max_len);
        p.validation = encode_dataset(p.split.validation, data.vocab, data.encoder.max_len);
        p.test = encode_dataset(p.split.test, data.vocab, data.encoder.max_len);
    }
    return data;
}

// ---------------------------------------------------------------------------
// Cells
// ---------------------------------------------------------------------------

struct ClassReport {
    std::string label;
    ClassScores scores;
};

struct RunResult {
    std::string plan_id;
    std::string model;
    Family family = Family::baseline;
    std::size_t plan_index = 0;
    std::map<std::string, std::string> datasets;  // role -> name
    std::uint64_t seed = 0;
    double macro_f1 = 0.0;
    double validation_macro_f1 = 0.0;
    std::vector<ClassReport> per_class;
    std::string config_hash;
    std::map<std::string, double> timings;  // stage -> seconds
};

inline nlohmann::ordered_json to_json(const RunResult& r) {
    nlohmann::ordered_json j;
    j["plan_id"] = r.plan_id;
    j["model"] = r.model;
    j["family"] = to_string(r.family);
    j["plan_index"] = r.plan_index;
    j["datasets"] = r.datasets;
    j["seed"] = r.seed;
    j["macro_f1"] = r.macro_f1;
    j["validation_macro_f1"] = r.validation_macro_f1;
    auto pc = nlohmann::ordered_json::array();
    for (const auto& c : r.per_class) {
        pc.push_back({{"label", c.label},
                      {"precision", c.scores.precision},
                      {"recall", c.scores.recall},
                      {"f1", c.scores.f1},
                      {"support", c.scores.support}});
    }
    j["per_class"] = pc;
    j["config_hash"] = r.config_hash;
    j["timings"] = r.timings;
    return j;
}

inline RunResult result_from_json(const nlohmann::json& j) {
    RunResult r;
    r.plan_id = j.at("plan_id").get<std::string>();
    r.model = j.at("model").get<std::string>();
    r.family = parse_family(j.at("family").get<std::string>());
    r.plan_index = j.value("plan_index", std::size_t{0});
    r.datasets = j.at("datasets").get<std::map<std::string, std::string>>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    r.validation_macro_f1 = j.value("validation_macro_f1", 0.0);
    for (const auto& c : j.at("per_class")) {
        r.per_class.push_back({c.at("label").get<std::string>(),
                               {c.at("precision").get<double>(), c.at("recall").get<double>(), c.at("f1").get<double>(),
                                c.at("support").get<std::size_t>()}});
    }
    r.config_hash = j.at("config_hash").get<std::string>();
    r.timings = j.value("timings", std::map<std::string, double>{});
    return r;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write " + tmp);
        out << j.dump(2) << '\n';
    }
    std::filesystem::rename(tmp, path);
}

inline std::filesystem::path cell_dir(const std::filesystem::path& root, const std::string& plan_id, std::uint64_t seed) {
    return root / plan_id / std::to_string(seed);
}

// Fresh encoder + head; streams "init:<stage>" and "head:<stage>".
inline Classifier fresh_classifier(const EncoderConfig& cfg, std::size_t num_labels, TaskKind kind, std::uint64_t seed,
                                   const std::string& stage) {
    Rng init = make_stream(seed, "init:" + stage);
    Rng head = make_stream(seed, "head:" + stage);
    return {init_encoder(cfg, init), init_head(cfg.hidden_dim, num_labels, head), kind};
}

// Stage-2 initialization: the whole encoder is copied, the previous head is
// discarded and a new one drawn for the target label space.
inline Classifier transfer_classifier(const EncoderParams& stage1, std::size_t num_labels, std::uint64_t seed,
                                      const std::string& stage) {
    Rng head = make_stream(seed, "head:" + stage);
    return {stage1, init_head(stage1.config.hidden_dim, num_labels, head), TaskKind::single};
}

inline FusionClassifier make_fusion(EncoderParams hmc_branch, EncoderParams emotion_branch, std::size_t num_labels,
                                    std::uint64_t seed) {
    Rng head = make_stream(seed, "head:fusion");
    const std::size_t in = hmc_branch.config.hidden_dim + emotion_branch.config.hidden_dim;
    return {std::move(hmc_branch), std::move(emotion_branch), init_head(in, num_labels, head), TaskKind::single};
}

template <class Model>
void evaluate(const Model& model, const PreparedDataset& ds, RunResult& r) {
    auto score = [&](const EncodedDataset& e) {
        const auto preds = argmax_labels(predict(model, e.sequences));
        return std::pair{macro_f1(preds, e.single, e.num_labels), per_class_scores(confusion_counts(preds, e.single, e.num_labels))};
    };
    auto [f1, per_class] = score(ds.test);
    r.macro_f1 = f1;
    r.per_class.clear();
    for (std::size_t k = 0; k < per_class.size(); ++k) r.per_class.push_back({ds.full.label_names[k], per_class[k]});
    r.validation_macro_f1 = ds.validation.size() ? score(ds.validation).first : 0.0;
}

struct CellContext {
    const Suite& suite;
    const SuiteData& data;
    std::filesystem::path root;
};

namespace detail {

class StageTimer {
   public:
    explicit StageTimer(RunResult& r, std::string stage) : r_(r), stage_(std::move(stage)) {}
    ~StageTimer() { r_.timings[stage_] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

   private:
    RunResult& r_;
    std::string stage_;
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

inline void save_classifier(const CellContext& ctx, const std::filesystem::path& path, const EncoderParams& enc,
                            const HeadParams& head) {
    if (!ctx.suite.save_checkpoints) return;
    std::vector<Tensor> trailing{head.weight, head.bias};
    save_checkpoint(path, enc, trailing);
}

inline EncoderParams load_prerequisite(const CellContext& ctx, const std::string& plan_id, std::uint64_t seed,
                                       const std::string& role) {
    const auto path = cell_dir(ctx.root, plan_id, seed) / "stage1.ckpt";
    if (!std::filesystem::exists(path)) {
        throw Error("missing " + role + " checkpoint " + path.string() + "; run plan '" + plan_id + "' with seed " +
                    std::to_string(seed) + " first");
    }
    auto ck = load_checkpoint(path);
    return std::move(ck.encoder);
}

}  // namespace detail

// Trains and evaluates one (plan, seed) cell, writing checkpoints, loss logs
// and result.json under <root>/<plan-id>/<seed>/.
inline RunResult run_cell(const CellContext& ctx, const PlanSpec& plan, std::uint64_t seed) {
    const auto dir = cell_dir(ctx.root, plan.id(), seed);
    std::filesystem::create_directories(dir);
    std::filesystem::remove(dir / "failure.json");

    RunResult r;
    r.plan_id = plan.id();
    r.model = plan.model;
    r.family = plan.family;
    for (std::size_t i = 0; i < ctx.suite.plans.size(); ++i)
        if (ctx.suite.plans[i].id() == plan.id()) r.plan_index = i;
    r.seed = seed;
    r.datasets["hmc"] = plan.hmc;
    if (plan.emotion) r.datasets["emotion"] = *plan.emotion;
    if (plan.negative_subset) r.datasets["negative_subset"] = to_string(*plan.negative_subset);
    if (plan.source_hmc) r.datasets["source_hmc"] = *plan.source_hmc;
    r.config_hash = config_hash(cell_config(ctx.suite, plan, seed));

    const auto& cfg = ctx.data.encoder;
    const auto& target = ctx.data.at(plan.hmc);
    TrainConfig hmc_train = ctx.suite.train;
    hmc_train.seed = seed;
    TrainConfig emo_train = ctx.suite.emotion_train;
    emo_train.seed = seed;
    TrainConfig fusion_train = ctx.suite.fusion_train;
    fusion_train.seed = seed;

    auto emotion_data = [&]() {
        const auto& e = ctx.data.at(*plan.emotion);
        if (!plan.negative_subset) return e.train;
        auto filtered = filter_negative_emotions(e.split.train, *plan.negative_subset);
        return encode_dataset(filtered, ctx.data.vocab, cfg.max_len);
    };

    switch (plan.family) {
        case Family::baseline: {
            auto model = fresh_classifier(cfg, target.full.num_labels(), TaskKind::single, seed, "hmc");
            {
                detail::StageTimer t(r, "stage1");
                write_loss_log(dir / "stage1_loss.csv", train(model, target.train, hmc_train, "hmc"));
            }
            detail::save_classifier(ctx, dir / "stage1.ckpt", model.encoder, model.head);
            evaluate(model, target, r);
            break;
        }
        case Family::intermediate:
        case Family::cross_task: {
            Classifier stage1;
            if (plan.family == Family::intermediate) {
                const auto data = emotion_data();
                stage1 = fresh_classifier(cfg, data.num_labels, TaskKind::multi, seed, "emotion");
                detail::StageTimer t(r, "stage1");
                write_loss_log(dir / "stage1_loss.csv", train(stage1, data, emo_train, "emotion"));
            } else {
                const auto& source = ctx.data.at(*plan.source_hmc);
                stage1 = fresh_classifier(cfg, source.full.num_labels(), TaskKind::single, seed, "source");
                detail::StageTimer t(r, "stage1");
                write_loss_log(dir / "stage1_loss.csv", train(stage1, source.train, hmc_train, "source"));
            }
            detail::save_classifier(ctx, dir / "stage1.ckpt", stage1.encoder, stage1.head);
            auto stage2 = transfer_classifier(stage1.encoder, target.full.num_labels(), seed, "hmc");
            {
                detail::StageTimer t(r, "stage2");
                write_loss_log(dir / "stage2_loss.csv", train(stage2, target.train, hmc_train, "hmc"));
            }
            detail::save_classifier(ctx, dir / "stage2.ckpt", stage2.encoder, stage2.head);
            evaluate(stage2, target, r);
            break;
        }
        case Family::fusion: {
            EncoderParams a, b;
            if (plan.scratch_branches) {
                Rng ia = make_stream(seed, "init:fusion:hmc");
                Rng ib = make_stream(seed, "init:fusion:emotion");
                a = init_encoder(cfg, ia);
                b = init_encoder(cfg, ib);
            } else {
                a = detail::load_prerequisite(ctx, *plan.hmc_from, seed, "HMC branch");
                b = detail::load_prerequisite(ctx, *plan.emotion_from, seed, "emotion branch");
                if (!(a.config == cfg) || !(b.config == cfg)) {
                    throw ConfigError("fusion plan " + plan.id() + ": prerequisite checkpoints use a different encoder config");
                }
            }
            auto model = make_fusion(std::move(a), std::move(b), target.full.num_labels(), seed);
            {
                detail::StageTimer t(r, "stage2");
                write_loss_log(dir / "stage2_loss.csv", train(model, target.train, fusion_train, "fusion"));
            }
            detail::save_classifier(ctx, dir / "stage2.ckpt", model.hmc_encoder, model.head);
            if (ctx.suite.save_checkpoints) save_checkpoint(dir / "stage2.emotion.ckpt", model.emotion_encoder);
            evaluate(model, target, r);
            break;
        }
    }
    write_json_file(dir / "result.json", to_json(r));
    return r;
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

struct CellOutcome {
    std::string plan_id;
    std::string model;
    std::string hmc;
    std::size_t plan_index = 0;
    std::uint64_t seed = 0;
    std::optional<RunResult> result;
    std::string error;

    bool ok() const { return result.has_value(); }
};

struct MatrixResult {
    std::vector<CellOutcome> cells;

    bool all_ok() const {
        for (const auto& c : cells)
            if (!c.ok()) return false;
        return true;
    }
};

inline void write_failure(const std::filesystem::path& root, const CellOutcome& c) {
    const auto dir = cell_dir(root, c.plan_id, c.seed);
    std::filesystem::create_directories(dir);
    std::filesystem::remove(dir / "result.json");
    nlohmann::ordered_json j;
    j["plan_id"] = c.plan_id;
    j["model"] = c.model;
    j["plan_index"] = c.plan_index;
    j["datasets"] = {{"hmc", c.hmc}};
    j["seed"] = c.seed;
    j["error"] = c.error;
    write_json_file(dir / "failure.json", j);
}

// Runs every (plan, seed) cell in two waves, fusion plans last since they
// read the checkpoints of the first wave. A failing cell is recorded with
// its identity and does not stop the others.
inline MatrixResult run_matrix(const CellContext& ctx, const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1,
                               const std::function<void(const CellOutcome&)>& on_done = {}) {
    if (ctx.suite.plans.empty()) throw ConfigError("run_matrix: no plans");
    if (seeds.empty()) throw ConfigError("run_matrix: no seeds");
    jobs = std::max<std::size_t>(1, jobs);
    std::filesystem::create_directories(ctx.root);
    MatrixResult out;
    std::mutex mu;
    for (int wave = 0; wave < 2; ++wave) {
        std::vector<CellOutcome> todo;
        for (std::size_t i = 0; i < ctx.suite.plans.size(); ++i) {
            const auto& p = ctx.suite.plans[i];
            if ((p.family == Family::fusion) != (wave == 1)) continue;
            for (auto s : seeds) todo.push_back({p.id(), p.model, p.hmc, i, s, std::nullopt, ""});
        }
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t k = next++; k < todo.size(); k = next++) {
                auto& cell = todo[k];
                try {
                    cell.result = run_cell(ctx, ctx.suite.plans[cell.plan_index], cell.seed);
                } catch (const std::exception& e) {
                    cell.error = e.what();
                    try {
                        write_failure(ctx.root, cell);
                    } catch (const std::exception&) {
                    }
                }
                if (on_done) {
                    std::lock_guard lock(mu);
                    on_done(cell);
                }
            }
        };
        std::vector<std::thread> pool;
        for (std::size_t t = 1; t < std::min(jobs, todo.size()); ++t) pool.emplace_back(worker);
        worker();
        for (auto& t : pool) t.join();
        for (auto& c : todo) out.cells.push_back(std::move(c));
    }
    std::sort(out.cells.begin(), out.cells.end(), [](const CellOutcome& a, const CellOutcome& b) {
        return std::tie(a.plan_index, a.seed) < std::tie(b.plan_index, b.seed);
    });
    return out;
}

}  // namespace emofuse
