#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emofuse/experiments.hpp"
#include "emofuse/metrics.hpp"

namespace emofuse {

struct CellSamples {
    std::vector<std::pair<std::uint64_t, double>> seeds;  // (seed, macro-F1), sorted by seed
    std::vector<std::uint64_t> failed_seeds;

    std::vector<double> values() const {
        std::vector<double> v;
        for (const auto& s : seeds) v.push_back(s.second);
        return v;
    }
    bool failed() const { return !failed_seeds.empty(); }
};

// Models x datasets grid of per-seed scores. Row and column order is the
// order of first appearance.
struct ResultTable {
    std::vector<std::string> models;
    std::vector<std::string> datasets;
    std::map<std::pair<std::string, std::string>, CellSamples> cells;

    void add(const std::string& model, const std::string& dataset, std::uint64_t seed, std::optional<double> f1) {
        if (std::find(models.begin(), models.end(), model) == models.end()) models.push_back(model);
        if (std::find(datasets.begin(), datasets.end(), dataset) == datasets.end()) datasets.push_back(dataset);
        auto& c = cells[{model, dataset}];
        if (f1) {
            c.seeds.emplace_back(seed, *f1);
            std::sort(c.seeds.begin(), c.seeds.end());
        } else {
            c.failed_seeds.push_back(seed);
            std::sort(c.failed_seeds.begin(), c.failed_seeds.end());
        }
    }

    const CellSamples* find(const std::string& model, const std::string& dataset) const {
        auto it = cells.find({model, dataset});
        return it == cells.end() ? nullptr : &it->second;
    }

    std::size_t max_seeds() const {
        std::size_t n = 0;
        for (const auto& [k, c] : cells) n = std::max(n, c.seeds.size());
        return n;
    }
};

struct StoredCell {
    std::string model;
    std::string dataset;
    std::size_t plan_index = 0;
    std::uint64_t seed = 0;
    std::optional<double> macro_f1;
};

inline ResultTable table_from_cells(std::vector<StoredCell> cells) {
    std::stable_sort(cells.begin(), cells.end(), [](const StoredCell& a, const StoredCell& b) {
        return std::tie(a.plan_index, a.seed) < std::tie(b.plan_index, b.seed);
    });
    ResultTable t;
    for (const auto& c : cells) t.add(c.model, c.dataset, c.seed, c.macro_f1);
    return t;
}

inline ResultTable table_from_matrix(const MatrixResult& m) {
    std::vector<StoredCell> cells;
    for (const auto& c : m.cells) {
        cells.push_back({c.model, c.hmc, c.plan_index, c.seed,
                         c.result ? std::optional<double>(c.result->macro_f1) : std::nullopt});
    }
    return table_from_cells(std::move(cells));
}

// Reads <root>/<plan-id>/<seed>/{result,failure}.json.
inline ResultTable load_runs(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw DataError("runs directory " + root.string() + " does not exist");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
        const auto name = e.path().filename();
        if (e.is_regular_file() && (name == "result.json" || name == "failure.json")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<StoredCell> cells;
    for (const auto& f : files) {
        std::ifstream in(f);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw DataError(f.string() + ": " + e.what());
        }
        StoredCell c;
        c.model = j.at("model").get<std::string>();
        c.dataset = j.at("datasets").at("hmc").get<std::string>();
        c.plan_index = j.value("plan_index", std::size_t{0});
        c.seed = j.at("seed").get<std::uint64_t>();
        if (f.filename() == "result.json") c.macro_f1 = j.at("macro_f1").get<double>();
        cells.push_back(std::move(c));
    }
    if (cells.empty()) throw DataError("no result.json files under " + root.string());
    return table_from_cells(std::move(cells));
}

// ---------------------------------------------------------------------------
// CSV (long format). Missing cells are written as rows with empty seed and
// score so row and column order survive a round trip.
// ---------------------------------------------------------------------------

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

inline std::string to_csv(const ResultTable& t) {
    std::ostringstream out;
    out << "model,dataset,seed,macro_f1\n";
    char buf[64];
    for (const auto& m : t.models) {
        for (const auto& d : t.datasets) {
            const auto* c = t.find(m, d);
            if (!c) {
                out << csv_field(m) << ',' << csv_field(d) << ",,\n";
                continue;
            }
            for (const auto& [seed, f1] : c->seeds) {
                std::snprintf(buf, sizeof buf, "%.17g", f1);
                out << csv_field(m) << ',' << csv_field(d) << ',' << seed << ',' << buf << '\n';
            }
            for (auto seed : c->failed_seeds) out << csv_field(m) << ',' << csv_field(d) << ',' << seed << ",FAILED\n";
        }
    }
    return out.str();
}

inline ResultTable table_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "model,dataset,seed,macro_f1") throw DataError("results CSV: bad header");
    ResultTable t;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_delimited(line, ',');
        if (f.size() != 4) throw DataError("results CSV line " + std::to_string(lineno) + ": expected 4 fields");
        if (std::find(t.models.begin(), t.models.end(), f[0]) == t.models.end()) t.models.push_back(f[0]);
        if (std::find(t.datasets.begin(), t.datasets.end(), f[1]) == t.datasets.end()) t.datasets.push_back(f[1]);
        if (f[2].empty()) continue;
        try {
            const auto seed = std::stoull(f[2]);
            if (f[3] == "FAILED") t.add(f[0], f[1], seed, std::nullopt);
            else t.add(f[0], f[1], seed, std::stod(f[3]));
        } catch (const std::logic_error&) {
            throw DataError("results CSV line " + std::to_string(lineno) + ": bad number");
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Markdown
// ---------------------------------------------------------------------------

struct ReportOptions {
    std::string baseline = "BERT_HMC";
    bool stars = true;
    TTestOptions test;
    // Adds a row holding, per dataset, the better of two models.
    std::optional<std::pair<std::string, std::string>> best_of;
    std::string best_of_label = "BERT_emotion";
};

struct Report {
    std::string markdown;
    std::vector<std::string> warnings;
};

inline std::string format_score(double mean) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * mean);
    return buf;
}

inline Report render_markdown(ResultTable table, const ReportOptions& opt = {}) {
    Report rep;
    if (opt.best_of) {
        const auto& [a, b] = *opt.best_of;
        for (const auto& d : table.datasets) {
            const auto* ca = table.find(a, d);
            const auto* cb = table.find(b, d);
            const CellSamples* best = nullptr;
            for (const auto* c : {ca, cb}) {
                if (!c || c->failed() || c->seeds.empty()) continue;
                if (!best || aggregate_seeds(c->values()).mean > aggregate_seeds(best->values()).mean) best = c;
            }
            if (best) {
                CellSamples copy = *best;
                for (const auto& [seed, f1] : copy.seeds) table.add(opt.best_of_label, d, seed, f1);
            }
        }
    }
    const bool have_baseline = std::find(table.models.begin(), table.models.end(), opt.baseline) != table.models.end();
    if (opt.stars && !have_baseline) {
        throw ConfigError("report: baseline row '" + opt.baseline + "' not found (needed for significance stars)");
    }
    const std::size_t n_seeds = table.max_seeds();
    bool stars = opt.stars;
    if (stars && n_seeds < 2) {
        rep.warnings.push_back("significance marks omitted: the t-test needs at least 2 seeds per cell");
        stars = false;
    }

    std::ostringstream out;
    out << "| Model |";
    for (const auto& d : table.datasets) out << ' ' << d << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < table.datasets.size(); ++i) out << "---:|";
    out << '\n';

    // Column maxima compared at printed precision so visible ties all bold.
    std::map<std::string, std::string> best;
    for (const auto& d : table.datasets) {
        double top = -1.0;
        for (const auto& m : table.models) {
            const auto* c = table.find(m, d);
            if (c && !c->failed() && !c->seeds.empty())
                top = std::max(top, std::stod(format_score(aggregate_seeds(c->values()).mean)));
        }
        if (top >= 0.0) best[d] = format_score(top / 100.0);
    }

    for (const auto& m : table.models) {
        out << "| " << m << " |";
        for (const auto& d : table.datasets) {
            const auto* c = table.find(m, d);
            if (!c) {
                out << " - |";
                continue;
            }
            if (c->failed()) {
                out << " FAILED |";
                continue;
            }
            const std::string s = format_score(aggregate_seeds(c->values()).mean);
            std::string cell = s == best[d] ? "**" + s + "**" : s;
            if (stars && m != opt.baseline) {
                const auto* base = table.find(opt.baseline, d);
                if (base && !base->failed() && base->seeds.size() >= 2 && c->seeds.size() >= 2) {
                    try {
                        if (t_test(c->values(), base->values(), opt.test).significant) cell += "\\*";
                    } catch (const NumericError& e) {
                        rep.warnings.push_back(m + " on " + d + ": " + e.what());
                    }
                }
            }
            out << ' ' << cell << " |";
        }
        out << '\n';
    }
    out << "\nScores are macro-F1 x 100, mean over " << n_seeds << (n_seeds == 1 ? " seed" : " seeds")
        << ". Bold marks the column maximum.";
    if (stars) {
        out << " \\* marks p < 0.05 against " << opt.baseline << " ("
            << (opt.test.pairing == Pairing::paired ? "paired" : "two-sample") << ' '
            << (opt.test.variance == VarianceMode::welch ? "Welch" : "pooled-variance") << " t-test).";
    }
    out << '\n';
    rep.markdown = out.str();
    return rep;
}

}  // namespace emofuse
