#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "emofuse/errors.hpp"
#include "emofuse/heads.hpp"
#include "emofuse/random.hpp"
#include "emofuse/tokenizer.hpp"
#include "emofuse/training.hpp"

namespace emofuse {

// Ekman groups plus neutral, as used for the GoEmotions variant.
inline const std::vector<std::string> kGoEmotionsLabels = {"anger", "disgust", "fear", "joy",
                                                           "sadness", "surprise", "neutral"};
inline const std::vector<std::string> kSemEvalLabels = {"anger", "anticipation", "disgust", "fear",
                                                        "joy", "love", "optimism", "pessimism",
                                                        "sadness", "surprise", "trust"};
inline const std::vector<std::string> kGoEmotionsNegative = {"anger", "disgust", "fear", "sadness", "neutral"};
inline const std::vector<std::string> kSemEvalNegative = {"anger", "disgust", "fear", "pessimism", "sadness"};

struct Example {
    std::string text;
    std::vector<std::size_t> labels;

    friend bool operator==(const Example&, const Example&) = default;
};

struct LabeledDataset {
    std::string name;
    TaskKind kind = TaskKind::single;
    std::vector<std::string> label_names;  // id -> name
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
    std::size_t num_labels() const { return label_names.size(); }

    std::optional<std::size_t> label_id(std::string_view label) const {
        auto it = std::find(label_names.begin(), label_names.end(), label);
        if (it == label_names.end()) return std::nullopt;
        return static_cast<std::size_t>(it - label_names.begin());
    }

    void validate() const {
        for (std::size_t i = 0; i < examples.size(); ++i) {
            const auto& ex = examples[i];
            if (kind == TaskKind::single && ex.labels.size() != 1) {
                throw DataError(name + ": example " + std::to_string(i) + " must carry exactly one label");
            }
            for (auto id : ex.labels) {
                if (id >= label_names.size()) {
                    throw DataError(name + ": example " + std::to_string(i) + " has label id " + std::to_string(id) +
                                    " outside the label map");
                }
            }
        }
    }

    std::vector<std::string> texts() const {
        std::vector<std::string> out;
        out.reserve(examples.size());
        for (const auto& ex : examples) out.push_back(ex.text);
        return out;
    }

    friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

// ---------------------------------------------------------------------------
// JSON-lines ingestion.
//   single-label: {"text": "...", "label": "..."}
//   multi-label:  {"text": "...", "labels": ["...", ...]}
// Label maps are JSON objects name -> id with ids 0..n-1.
// ---------------------------------------------------------------------------

inline std::vector<std::string> label_map_from_json(const nlohmann::json& j, const std::string& origin) {
    if (!j.is_object()) throw DataError(origin + ": label map must be a JSON object");
    std::vector<std::string> names(j.size());
    std::vector<bool> seen(j.size(), false);
    for (const auto& [name, id] : j.items()) {
        if (!id.is_number_unsigned() || id.get<std::size_t>() >= names.size() || seen[id.get<std::size_t>()]) {
            throw DataError(origin + ": label ids must be a permutation of 0.." + std::to_string(names.size() - 1));
        }
        names[id.get<std::size_t>()] = name;
        seen[id.get<std::size_t>()] = true;
    }
    return names;
}

inline std::vector<std::string> load_label_map(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read label map " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return label_map_from_json(j, path.string());
}

inline void save_label_map(std::span<const std::string> names, const std::filesystem::path& path) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < names.size(); ++i) j[names[i]] = i;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write label map " + path.string());
    out << j.dump(2) << '\n';
}

// Without a fixed label map, labels are inferred and ordered by name.
inline LabeledDataset load_dataset(const std::filesystem::path& path, TaskKind kind,
                                   std::optional<std::vector<std::string>> label_map = std::nullopt,
                                   std::string name = "") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read dataset " + path.string());
    struct Raw {
        std::string text;
        std::vector<std::string> labels;
    };
    std::vector<Raw> raw;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + ": malformed JSON (" + e.what() + ")");
        }
        if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
            throw DataError(where + ": expected an object with a string \"text\"");
        }
        Raw r{j["text"].get<std::string>(), {}};
        if (kind == TaskKind::single) {
            if (!j.contains("label") || !j["label"].is_string()) {
                throw DataError(where + ": single-label rows need a string \"label\"");
            }
            r.labels.push_back(j["label"].get<std::string>());
        } else {
            if (!j.contains("labels") || !j["labels"].is_array()) {
                throw DataError(where + ": multi-label rows need a \"labels\" array");
            }
            for (const auto& l : j["labels"]) {
                if (!l.is_string()) throw DataError(where + ": labels must be strings");
                r.labels.push_back(l.get<std::string>());
            }
        }
        raw.push_back(std::move(r));
    }

    LabeledDataset ds;
    ds.name = name.empty() ? path.stem().string() : std::move(name);
    ds.kind = kind;
    if (label_map) {
        ds.label_names = *label_map;
    } else {
        std::set<std::string> names;
        for (const auto& r : raw) names.insert(r.labels.begin(), r.labels.end());
        ds.label_names.assign(names.begin(), names.end());
    }
    std::map<std::string, std::size_t> ids;
    for (std::size_t i = 0; i < ds.label_names.size(); ++i) ids[ds.label_names[i]] = i;
    std::set<std::string> unknown;
    for (const auto& r : raw) {
        Example ex{r.text, {}};
        for (const auto& l : r.labels) {
            auto it = ids.find(l);
            if (it == ids.end()) {
                unknown.insert(l);
                continue;
            }
            ex.labels.push_back(it->second);
        }
        ds.examples.push_back(std::move(ex));
    }
    if (!unknown.empty()) {
        std::string list;
        for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
        throw DataError(path.string() + ": labels not in the label map: " + list);
    }
    ds.validate();
    return ds;
}

inline void save_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write dataset " + path.string());
    for (const auto& ex : ds.examples) {
        nlohmann::ordered_json j;
        j["text"] = ex.text;
        if (ds.kind == TaskKind::single) {
            j["label"] = ds.label_names.at(ex.labels.at(0));
        } else {
            auto arr = nlohmann::ordered_json::array();
            for (auto id : ex.labels) arr.push_back(ds.label_names.at(id));
            j["labels"] = arr;
        }
        out << j.dump() << '\n';
    }
}

// Delimited-text converter onto the JSONL form: picks the text and label
// columns by header name and optionally renames label values.
struct ColumnMapping {
    std::string text_column = "text";
    std::string label_column = "label";
    char delimiter = '\t';
    std::map<std::string, std::string> rename;
};

// Documented column mappings for the five HMC corpora (header names as
// distributed in their TSV exports; label values mapped to class names).
inline std::optional<ColumnMapping> hmc_schema(std::string_view dataset) {
    if (dataset == "FLU2013") return ColumnMapping{"text", "label", '\t', {{"1", "infection"}, {"0", "awareness"}}};
    if (dataset == "PHM2017")
        return ColumnMapping{"tweet", "label", '\t',
                             {{"0", "non_health"}, {"1", "awareness"}, {"2", "other_mention"}, {"3", "self_mention"}}};
    if (dataset == "SELF2020")
        return ColumnMapping{"text", "label", '\t', {{"0", "no_disclosure"}, {"1", "possible"}, {"2", "clear"}}};
    if (dataset == "ILL2021") return ColumnMapping{"text", "label", '\t', {{"0", "negative"}, {"1", "positive"}}};
    if (dataset == "RHMD2022")
        return ColumnMapping{"text", "label", '\t', {{"0", "non_health"}, {"1", "health"}, {"2", "figurative"}}};
    return std::nullopt;
}

inline std::vector<std::string> split_delimited(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (c == '"') {
            if (quoted && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else {
                quoted = !quoted;
            }
        } else if (c == delim && !quoted) {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline LabeledDataset convert_delimited(const std::filesystem::path& path, const ColumnMapping& mapping,
                                        std::string name = "") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
    auto header = split_delimited(line, mapping.delimiter);
    auto col = [&](const std::string& n) {
        auto it = std::find(header.begin(), header.end(), n);
        if (it == header.end()) throw DataError(path.string() + ": missing column '" + n + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto tc = col(mapping.text_column);
    const auto lc = col(mapping.label_column);
    std::vector<std::pair<std::string, std::string>> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto cells = split_delimited(line, mapping.delimiter);
        if (cells.size() <= std::max(tc, lc)) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": too few columns");
        }
        std::string label = cells[lc];
        if (auto it = mapping.rename.find(label); it != mapping.rename.end()) label = it->second;
        rows.emplace_back(cells[tc], label);
    }
    LabeledDataset ds;
    ds.name = name.empty() ? path.stem().string() : std::move(name);
    ds.kind = TaskKind::single;
    std::set<std::string> names;
    for (const auto& r : rows) names.insert(r.second);
    ds.label_names.assign(names.begin(), names.end());
    for (auto& [text, label] : rows) ds.examples.push_back({text, {*ds.label_id(label)}});
    return ds;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitIndices {
    std::vector<std::size_t> train, validation, test;

    friend bool operator==(const SplitIndices&, const SplitIndices&) = default;
};

struct SplitDataset {
    LabeledDataset train, validation, test;
    SplitIndices indices;
    std::uint64_t seed = 0;
};

inline LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> rows, const std::string& suffix) {
    LabeledDataset out{ds.name + suffix, ds.kind, ds.label_names, {}};
    out.examples.reserve(rows.size());
    for (auto r : rows) out.examples.push_back(ds.examples.at(r));
    return out;
}

// train = round(0.8 N), validation = round(0.1 N), test = the remainder
// (halves round up).
inline std::array<std::size_t, 3> split_sizes(std::size_t n) {
    const std::size_t train = (8 * n + 5) / 10;
    const std::size_t validation = (n + 5) / 10;
    return {train, validation, n - train - validation};
}

inline SplitIndices split_indices(std::size_t n, std::uint64_t seed) {
    if (n < 10) throw ContractError("split_dataset: need at least 10 examples, got " + std::to_string(n));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_stream(seed, "split");
    std::shuffle(order.begin(), order.end(), rng);
    const auto [tr, va, te] = split_sizes(n);
    SplitIndices s;
    s.train.assign(order.begin(), order.begin() + tr);
    s.validation.assign(order.begin() + tr, order.begin() + tr + va);
    s.test.assign(order.begin() + tr + va, order.end());
    return s;
}

// Optional stratified variant: the same size rule applied within each
// single-label class.
inline SplitIndices stratified_split_indices(const LabeledDataset& ds, std::uint64_t seed) {
    if (ds.size() < 10) throw ContractError("split_dataset: need at least 10 examples");
    if (ds.kind != TaskKind::single) throw ContractError("stratified split needs a single-label dataset");
    Rng rng = make_stream(seed, "split");
    std::vector<std::vector<std::size_t>> by_class(ds.num_labels());
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.examples[i].labels[0]].push_back(i);
    SplitIndices s;
    for (auto& rows : by_class) {
        std::shuffle(rows.begin(), rows.end(), rng);
        const auto [tr, va, te] = split_sizes(rows.size());
        s.train.insert(s.train.end(), rows.begin(), rows.begin() + tr);
        s.validation.insert(s.validation.end(), rows.begin() + tr, rows.begin() + tr + va);
        s.test.insert(s.test.end(), rows.begin() + tr + va, rows.end());
    }
    return s;
}

inline SplitDataset split_dataset(const LabeledDataset& ds, std::uint64_t seed, bool stratified = false) {
    SplitDataset out;
    out.seed = seed;
    out.indices = stratified ? stratified_split_indices(ds, seed) : split_indices(ds.size(), seed);
    out.train = subset(ds, out.indices.train, "/train");
    out.validation = subset(ds, out.indices.validation, "/validation");
    out.test = subset(ds, out.indices.test, "/test");
    return out;
}

// ---------------------------------------------------------------------------
// Negative-emotion subsets
// ---------------------------------------------------------------------------

enum class NegativePreset { ge_neg, se_neg };

inline const std::vector<std::string>& negative_labels(NegativePreset p) {
    return p == NegativePreset::ge_neg ? kGoEmotionsNegative : kSemEvalNegative;
}

inline std::optional<NegativePreset> parse_negative_preset(std::string_view s) {
    if (s == "GE-neg") return NegativePreset::ge_neg;
    if (s == "SE-neg") return NegativePreset::se_neg;
    return std::nullopt;
}

inline const char* to_string(NegativePreset p) { return p == NegativePreset::ge_neg ? "GE-neg" : "SE-neg"; }

// Keeps examples with at least one allowed label, strips the others and
// re-indexes against the reduced label map (original order preserved).
inline LabeledDataset filter_negative_emotions(const LabeledDataset& ds, std::span<const std::string> allowed) {
    std::set<std::string> allow(allowed.begin(), allowed.end());
    for (const auto& a : allow) {
        if (!ds.label_id(a)) throw DataError("negative subset label '" + a + "' is not in " + ds.name + "'s label map");
    }
    LabeledDataset out;
    out.name = ds.name + "-neg";
    out.kind = ds.kind;
    std::vector<std::optional<std::size_t>> remap(ds.num_labels());
    for (std::size_t i = 0; i < ds.num_labels(); ++i) {
        if (allow.contains(ds.label_names[i])) {
            remap[i] = out.label_names.size();
            out.label_names.push_back(ds.label_names[i]);
        }
    }
    for (const auto& ex : ds.examples) {
        Example kept{ex.text, {}};
        for (auto id : ex.labels)
            if (remap[id]) kept.labels.push_back(*remap[id]);
        if (!kept.labels.empty()) out.examples.push_back(std::move(kept));
    }
    return out;
}

inline LabeledDataset filter_negative_emotions(const LabeledDataset& ds, NegativePreset preset) {
    auto out = filter_negative_emotions(ds, negative_labels(preset));
    out.name = ds.name + "-" + (preset == NegativePreset::ge_neg ? "GE-neg" : "SE-neg");
    return out;
}

// ---------------------------------------------------------------------------
// Tokenized form consumed by the trainer
// ---------------------------------------------------------------------------

inline EncodedDataset encode_dataset(const LabeledDataset& ds, const Vocabulary& vocab, std::size_t max_len) {
    ds.validate();
    EncodedDataset out;
    out.kind = ds.kind;
    out.num_labels = ds.num_labels();
    out.sequences.reserve(ds.size());
    for (const auto& ex : ds.examples) {
        out.sequences.push_back(encode(ex.text, vocab, max_len));
        if (ds.kind == TaskKind::single) {
            out.single.push_back(ex.labels.at(0));
        } else {
            std::vector<double> row(ds.num_labels(), 0.0);
            for (auto id : ex.labels) row[id] = 1.0;
            out.multi.insert(out.multi.end(), row.begin(), row.end());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

namespace synthetic {

inline const std::vector<std::string>& filler_words() {
    static const std::vector<std::string> w = {
        "the",   "a",     "today", "really", "my",    "just",  "about", "so",    "with",  "after",
        "this",  "week",  "feel",  "got",    "now",   "again", "still", "people", "everyone", "news",
        "going", "around", "day",  "night",  "time",  "new",   "some",  "been",  "have",  "had",
        "was",   "is",    "and",   "for",    "on",    "at",    "in",    "out",   "up",    "all"};
    return w;
}

inline const std::vector<std::string>& disease_keywords() {
    static const std::vector<std::string> w = {"flu",   "cancer",   "stroke", "asthma",
                                               "diabetes", "migraine", "fever",  "parkinsons"};
    return w;
}

// Made-up three-syllable words. Ids are scattered by an invertible affine
// map mod 24^3 so words with neighbouring ids share no syllables by accident.
inline std::string pseudo_word(std::size_t id) {
    static const char* syl[24] = {"ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pa", "se", "du", "fo",
                                  "gi", "ha", "ju", "be", "xo", "wy", "qe", "ci", "yo", "no", "ri", "sa"};
    constexpr std::size_t space = 24 * 24 * 24;
    const std::size_t v = (id * 7919 + 101) % space;
    return std::string(syl[v / 576]) + syl[(v / 24) % 24] + syl[v % 24];
}

// Lexicon id blocks; larger lexicons would run into the next label's block.
inline constexpr std::size_t kLexiconStride = 128;

inline std::size_t emotion_slot(const std::string& label) {
    static const std::vector<std::string> known = {"anger", "disgust", "fear",     "joy",       "sadness", "surprise",
                                                   "neutral", "anticipation", "love", "optimism", "pessimism", "trust"};
    auto it = std::find(known.begin(), known.end(), label);
    if (it != known.end()) return static_cast<std::size_t>(it - known.begin());
    return known.size() + fnv1a64(label) % 40;
}

// Marker words for one emotion label; identical across corpora that share the label.
inline std::vector<std::string> emotion_lexicon(const std::string& label, std::size_t count) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(pseudo_word(6000 + emotion_slot(label) * kLexiconStride + i));
    return out;
}

inline std::vector<std::string> theme_lexicon(std::size_t hmc_label, std::size_t count) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(pseudo_word(1000 + hmc_label * kLexiconStride + i));
    return out;
}

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
    return v[uniform_index(rng, v.size())];
}

inline std::string join_shuffled(std::vector<std::string> words, Rng& rng) {
    std::shuffle(words.begin(), words.end(), rng);
    std::string out;
    for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
    return out;
}

}  // namespace synthetic

struct SyntheticSpec {
    std::size_t n = 2000;
    std::size_t num_hmc_labels = 2;
    std::vector<std::string> emotion_labels = kGoEmotionsLabels;
    double rho = 0.8;              // probability the emotion word follows the HMC label
    std::size_t vocab_themes = 6;  // theme words per HMC label
    std::uint64_t seed = 7;
    double theme_purity = 1.0;  // probability the theme word comes from the gold label's list
    std::size_t emotion_n = 2000;
    std::size_t words_per_emotion = 8;
    // Emotion labels each HMC label triggers; empty = round-robin over emotion_labels.
    std::vector<std::vector<std::string>> links;
};

struct SyntheticCorpus {
    LabeledDataset hmc;
    LabeledDataset emotion;
};

inline std::vector<std::vector<std::string>> resolve_links(const SyntheticSpec& spec) {
    if (!spec.links.empty()) {
        if (spec.links.size() != spec.num_hmc_labels) throw ConfigError("synthetic: one link list per HMC label required");
        for (const auto& group : spec.links) {
            if (group.empty()) throw ConfigError("synthetic: empty link list");
            for (const auto& l : group)
                if (std::find(spec.emotion_labels.begin(), spec.emotion_labels.end(), l) == spec.emotion_labels.end())
                    throw ConfigError("synthetic: linked emotion '" + l + "' not among emotion_labels");
        }
        return spec.links;
    }
    std::vector<std::vector<std::string>> links(spec.num_hmc_labels);
    for (std::size_t i = 0; i < spec.emotion_labels.size(); ++i)
        links[i % spec.num_hmc_labels].push_back(spec.emotion_labels[i]);
    for (std::size_t k = 0; k < links.size(); ++k)
        if (links[k].empty()) links[k].push_back(spec.emotion_labels[k % spec.emotion_labels.size()]);
    return links;
}

// Multi-label emotion corpus: each text carries one (70%) or two distinct
// emotion markers among filler words, sometimes a disease keyword or theme word.
inline LabeledDataset make_synthetic_emotion(const std::vector<std::string>& labels, std::size_t n,
                                             std::uint64_t seed, std::size_t words_per_emotion = 8,
                                             std::size_t num_hmc_labels = 2, std::size_t vocab_themes = 6,
                                             std::string name = "synthetic-emotion") {
    if (labels.empty()) throw ConfigError("synthetic emotion corpus needs labels");
    using namespace synthetic;
    Rng rng = make_stream(seed, "synthetic:emotion:" + name);
    std::vector<std::vector<std::string>> lex;
    for (const auto& l : labels) lex.push_back(emotion_lexicon(l, words_per_emotion));
    LabeledDataset ds{name, TaskKind::multi, labels, {}};
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> ids{uniform_index(rng, labels.size())};
        if (labels.size() > 1 && uniform01(rng) < 0.3) {
            std::size_t second;
            do second = uniform_index(rng, labels.size());
            while (second == ids[0]);
            ids.push_back(second);
            std::sort(ids.begin(), ids.end());
        }
        std::vector<std::string> words;
        for (auto id : ids) words.push_back(pick(lex[id], rng));
        const std::size_t fill = 3 + uniform_index(rng, 4);
        for (std::size_t f = 0; f < fill; ++f) words.push_back(pick(filler_words(), rng));
        if (uniform01(rng) < 0.5) words.push_back(pick(disease_keywords(), rng));
        if (uniform01(rng) < 0.3) words.push_back(pick(theme_lexicon(uniform_index(rng, num_hmc_labels), vocab_themes), rng));
        ds.examples.push_back({join_shuffled(std::move(words), rng), std::move(ids)});
    }
    return ds;
}

// HMC corpus: a theme word predicts the label (with probability theme_purity,
// otherwise drawn from a random label); with probability rho the single
// emotion word comes from an emotion linked to the label, otherwise from a
// uniformly random emotion. Paired with an emotion corpus over the same words.
inline SyntheticCorpus make_synthetic(const SyntheticSpec& spec) {
    if (!(spec.rho >= 0.0 && spec.rho <= 1.0)) throw ConfigError("synthetic: rho must lie in [0, 1]");
    if (!(spec.theme_purity >= 0.0 && spec.theme_purity <= 1.0)) throw ConfigError("synthetic: theme_purity must lie in [0, 1]");
    if (spec.num_hmc_labels < 2 || spec.vocab_themes == 0 || spec.words_per_emotion == 0 || spec.emotion_labels.empty()) {
        throw ConfigError("synthetic: need >= 2 HMC labels and non-empty lexicons");
    }
    if (spec.vocab_themes > synthetic::kLexiconStride || spec.words_per_emotion > synthetic::kLexiconStride || spec.num_hmc_labels > 36) {
        throw ConfigError("synthetic: at most 36 HMC labels and 128 words per theme or emotion lexicon");
    }
    using namespace synthetic;
    const auto links = resolve_links(spec);
    Rng rng = make_stream(spec.seed, "synthetic:hmc");
    std::vector<std::vector<std::string>> themes;
    for (std::size_t k = 0; k < spec.num_hmc_labels; ++k) themes.push_back(theme_lexicon(k, spec.vocab_themes));

    SyntheticCorpus out;
    out.hmc.name = "synthetic-hmc";
    out.hmc.kind = TaskKind::single;
    for (std::size_t k = 0; k < spec.num_hmc_labels; ++k) out.hmc.label_names.push_back("class_" + std::to_string(k));
    for (std::size_t i = 0; i < spec.n; ++i) {
        const std::size_t y = uniform_index(rng, spec.num_hmc_labels);
        std::vector<std::string> words;
        const std::size_t fill = 3 + uniform_index(rng, 4);
        for (std::size_t f = 0; f < fill; ++f) words.push_back(pick(filler_words(), rng));
        words.push_back(pick(disease_keywords(), rng));
        const std::size_t theme_label = uniform01(rng) < spec.theme_purity ? y : uniform_index(rng, spec.num_hmc_labels);
        words.push_back(pick(themes[theme_label], rng));
        const std::string& emotion =
            uniform01(rng) < spec.rho ? pick(links[y], rng) : pick(spec.emotion_labels, rng);
        words.push_back(pick(emotion_lexicon(emotion, spec.words_per_emotion), rng));
        out.hmc.examples.push_back({join_shuffled(std::move(words), rng), {y}});
    }
    out.emotion = make_synthetic_emotion(spec.emotion_labels, spec.emotion_n, spec.seed, spec.words_per_emotion,
                                         spec.num_hmc_labels, spec.vocab_themes);
    return out;
}

}  // namespace emofuse
