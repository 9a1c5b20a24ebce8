// emofuse: dataset preparation, single runs, experiment matrices and reports.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "emofuse/emofuse.hpp"

namespace fs = std::filesystem;
using namespace emofuse;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

int verbosity = 1;

void info(const std::string& msg) {
    if (verbosity > 0) std::cerr << msg << '\n';
}

fs::path runs_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("EMOFUSE_RUNS_DIR"); env && *env) return env;
    return "runs";
}

// "5" -> {1..5}; "1,3,7" -> {1,3,7}.
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> out;
    if (text.find(',') == std::string::npos) {
        const auto n = std::stoull(text);
        if (n == 0) throw ConfigError("--seeds must be positive");
        for (std::uint64_t s = 1; s <= n; ++s) out.push_back(s);
        return out;
    }
    for (const auto& part : split_delimited(text, ',')) out.push_back(std::stoull(part));
    return out;
}

nlohmann::ordered_json split_json(const SplitIndices& s) {
    return {{"train", s.train}, {"validation", s.validation}, {"test", s.test}};
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

struct PrepareArgs {
    std::vector<std::string> synthetic;
    std::string input;
    std::string task = "single";
    std::string label_map;
    std::string schema;
    std::string name;
    std::string output_dir = "data";
    std::uint64_t split_seed = 1;
    bool stratified = false;
};

int cmd_prepare(const PrepareArgs& a) {
    if (a.synthetic.empty() == a.input.empty()) throw ConfigError("prepare needs exactly one of --synthetic or --input");
    fs::create_directories(a.output_dir);
    nlohmann::ordered_json manifest;
    manifest["split_seed"] = a.split_seed;
    manifest["stratified"] = a.stratified;
    std::vector<LabeledDataset> sets;
    if (!a.synthetic.empty()) {
        nlohmann::json spec = nlohmann::json::object();
        for (const auto& kv : a.synthetic) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--synthetic expects key=value, got '" + kv + "'");
            const auto key = kv.substr(0, eq);
            const auto val = kv.substr(eq + 1);
            const std::vector<std::string> keys = {"n", "num_hmc_labels", "emotion_labels", "rho", "vocab_themes", "seed",
                                                   "theme_purity", "emotion_n", "words_per_emotion", "links"};
            if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ConfigError("unknown synthetic key '" + key + "'");
            try {
                spec[key] = nlohmann::json::parse(val);
            } catch (const nlohmann::json::exception&) {
                spec[key] = val;
            }
        }
        auto corpus = make_synthetic(synthetic_from_json(spec));
        manifest["synthetic"] = spec;
        sets.push_back(std::move(corpus.hmc));
        sets.push_back(std::move(corpus.emotion));
    } else {
        LabeledDataset ds;
        const fs::path in = a.input;
        if (!a.schema.empty()) {
            auto mapping = hmc_schema(a.schema);
            if (!mapping) throw ConfigError("unknown schema '" + a.schema + "'");
            ds = convert_delimited(in, *mapping, a.name.empty() ? a.schema : a.name);
        } else {
            std::optional<std::vector<std::string>> map;
            if (!a.label_map.empty()) map = load_label_map(a.label_map);
            ds = load_dataset(in, detail::parse_task(a.task), map, a.name);
        }
        sets.push_back(std::move(ds));
    }
    for (const auto& ds : sets) {
        const auto file = ds.name + ".jsonl";
        save_dataset(ds, fs::path(a.output_dir) / file);
        save_label_map(ds.label_names, fs::path(a.output_dir) / (ds.name + ".labels.json"));
        const auto split = a.stratified ? stratified_split_indices(ds, a.split_seed) : split_indices(ds.size(), a.split_seed);
        manifest["datasets"][ds.name] = {{"file", file},
                                         {"label_map", ds.name + ".labels.json"},
                                         {"task", to_string(ds.kind)},
                                         {"size", ds.size()},
                                         {"split", split_json(split)}};
        info(ds.name + ": " + std::to_string(ds.size()) + " examples, " + std::to_string(split.train.size()) + "/" +
             std::to_string(split.validation.size()) + "/" + std::to_string(split.test.size()));
    }
    write_json_file(fs::path(a.output_dir) / "manifest.json", manifest);
    return kExitOk;
}

struct RunArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string output_dir;
    std::string seeds;
    std::string plan;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    std::string baseline;
    std::string best_of;
};

// Prepares the suite and records the effective plan and vocabulary at the root.
SuiteData prepare_runs(const Suite& suite, const fs::path& root) {
    fs::create_directories(root);
    info("preparing datasets and vocabulary");
    auto data = prepare_suite(suite);
    data.vocab.save(root / "vocab.txt");
    write_json_file(root / "suite.json", nlohmann::ordered_json::parse(suite.raw.dump()));
    return data;
}

std::string describe(const CellOutcome& c) {
    std::string s = c.plan_id + " seed " + std::to_string(c.seed) + ": ";
    if (!c.ok()) return s + "FAILED: " + c.error;
    char buf[64];
    std::snprintf(buf, sizeof buf, "macro-F1 %.4f", c.result->macro_f1);
    return s + buf;
}

ReportOptions report_options(const std::string& baseline, const std::string& best_of, const Suite* suite) {
    ReportOptions opt;
    if (!baseline.empty()) opt.baseline = baseline;
    else if (suite) opt.baseline = suite->baseline;
    if (!best_of.empty()) {
        const auto parts = split_delimited(best_of, ',');
        if (parts.size() != 2) throw ConfigError("--best-of expects two model names separated by a comma");
        opt.best_of = std::pair{parts[0], parts[1]};
    }
    return opt;
}

int cmd_train(const RunArgs& a) {
    const auto suite = load_suite(a.config, a.overrides);
    const auto root = runs_root(a.output_dir);
    const PlanSpec* plan = nullptr;
    for (const auto& p : suite.plans)
        if (p.id() == a.plan || (a.plan.empty() && suite.plans.size() == 1)) plan = &p;
    if (!plan) {
        std::string ids;
        for (const auto& p : suite.plans) ids += "\n  " + p.id();
        throw ConfigError("--plan must name one of:" + ids);
    }
    const auto data = prepare_runs(suite, root);
    const std::uint64_t seed = a.seed ? a.seed : suite.seeds.front();
    const auto r = run_cell({suite, data, root}, *plan, seed);
    std::cout << describe({r.plan_id, r.model, plan->hmc, r.plan_index, seed, r, ""}) << '\n';
    return kExitOk;
}

int cmd_experiment(const RunArgs& a) {
    const auto suite = load_suite(a.config, a.overrides);
    const auto root = runs_root(a.output_dir);
    const auto seeds = a.seeds.empty() ? suite.seeds : parse_seeds(a.seeds);
    const auto data = prepare_runs(suite, root);
    const auto m = run_matrix({suite, data, root}, seeds, a.jobs, [](const CellOutcome& c) { info(describe(c)); });
    const auto table = table_from_matrix(m);
    auto opt = report_options(a.baseline, a.best_of, &suite);
    opt.stars = std::find(table.models.begin(), table.models.end(), opt.baseline) != table.models.end();
    if (!opt.stars) info("warning: no baseline row '" + opt.baseline + "'; significance marks omitted");
    const auto rep = render_markdown(table, opt);
    for (const auto& w : rep.warnings) info("warning: " + w);
    write_text(root / "report.md", rep.markdown);
    write_text(root / "results.csv", to_csv(table));
    std::cout << rep.markdown;
    if (!m.all_ok()) {
        info("one or more cells failed; see failure.json files under " + root.string());
        return kExitFailure;
    }
    return kExitOk;
}

struct ReportArgs {
    std::string runs_dir;
    std::string from_csv;
    std::string format = "md";
    std::string baseline;
    std::string best_of;
    bool no_stars = false;
    bool pooled = false;
    bool paired = false;
};

int cmd_report(const ReportArgs& a) {
    ResultTable table;
    if (!a.from_csv.empty()) {
        std::ifstream in(a.from_csv, std::ios::binary);
        if (!in) throw DataError("cannot read " + a.from_csv);
        std::stringstream ss;
        ss << in.rdbuf();
        table = table_from_csv(ss.str());
    } else {
        table = load_runs(runs_root(a.runs_dir));
    }
    if (a.format == "csv") {
        std::cout << to_csv(table);
        return kExitOk;
    }
    auto opt = report_options(a.baseline, a.best_of, nullptr);
    opt.stars = !a.no_stars;
    if (a.pooled) opt.test.variance = VarianceMode::pooled;
    if (a.paired) opt.test.pairing = Pairing::paired;
    const auto rep = render_markdown(table, opt);
    for (const auto& w : rep.warnings) info("warning: " + w);
    std::cout << rep.markdown;
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Emotion-aware health mention classification experiments"};
    app.fallthrough();
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "Only print results");

    PrepareArgs prep;
    auto* p = app.add_subcommand("prepare", "Write JSONL datasets, label maps and a split manifest");
    p->add_option("--synthetic", prep.synthetic, "Generator settings, e.g. n=2000 rho=0.8 seed=7")->expected(1, -1);
    p->add_option("--input", prep.input, "Dataset file (JSONL, or delimited with --schema)");
    p->add_option("--task", prep.task, "single or multi")->check(CLI::IsMember({"single", "multi"}));
    p->add_option("--label-map", prep.label_map, "JSON label map name -> id");
    p->add_option("--schema", prep.schema, "Delimited HMC export: FLU2013, PHM2017, SELF2020, ILL2021, RHMD2022");
    p->add_option("--name", prep.name, "Dataset name (default: file stem)");
    p->add_option("-o,--output-dir", prep.output_dir, "Output directory");
    p->add_option("--split-seed", prep.split_seed, "Seed for the 80/10/10 split");
    p->add_flag("--stratified", prep.stratified, "Split within each class");

    RunArgs train_args;
    auto* t = app.add_subcommand("train", "Run one plan for one seed");
    t->add_option("-c,--config", train_args.config, "Plan file")->required()->check(CLI::ExistingFile);
    t->add_option("--plan", train_args.plan, "Plan id (model__dataset)");
    t->add_option("--seed", train_args.seed, "Seed (default: first suite seed)");
    t->add_option("--override", train_args.overrides, "key=value applied to the plan file");
    t->add_option("-o,--output-dir", train_args.output_dir, "Runs root (default $EMOFUSE_RUNS_DIR or ./runs)");

    RunArgs exp_args;
    auto* e = app.add_subcommand("experiment", "Run every plan x seed cell and write a report");
    e->add_option("-c,--config", exp_args.config, "Plan file")->required()->check(CLI::ExistingFile);
    e->add_option("--seeds", exp_args.seeds, "N for seeds 1..N, or a comma list");
    e->add_option("--override", exp_args.overrides, "key=value applied to the plan file");
    e->add_option("-j,--jobs", exp_args.jobs, "Parallel cells")->check(CLI::PositiveNumber);
    e->add_option("-o,--output-dir", exp_args.output_dir, "Runs root (default $EMOFUSE_RUNS_DIR or ./runs)");
    e->add_option("--baseline", exp_args.baseline, "Row used for significance marks");
    e->add_option("--best-of", exp_args.best_of, "Two models combined into a best-of row, e.g. BERT_GE,BERT_SE");

    ReportArgs rep;
    auto* r = app.add_subcommand("report", "Rebuild the results table from stored runs");
    r->add_option("--runs-dir", rep.runs_dir, "Runs root (default $EMOFUSE_RUNS_DIR or ./runs)");
    r->add_option("--from-csv", rep.from_csv, "Read a results CSV instead of a runs directory");
    r->add_option("--format", rep.format, "md or csv")->check(CLI::IsMember({"md", "csv"}));
    r->add_option("--baseline", rep.baseline, "Row used for significance marks (default BERT_HMC)");
    r->add_option("--best-of", rep.best_of, "Two models combined into a best-of row");
    r->add_flag("--no-stars", rep.no_stars, "Skip significance marks");
    r->add_flag("--pooled", rep.pooled, "Pooled-variance t-test instead of Welch");
    r->add_flag("--paired", rep.paired, "Paired t-test over seeds");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kExitOk : kExitUsage;
    }
    verbosity = quiet ? 0 : 1;

    try {
        if (*p) return cmd_prepare(prep);
        if (*t) return cmd_train(train_args);
        if (*e) return cmd_experiment(exp_args);
        if (*r) return cmd_report(rep);
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}
