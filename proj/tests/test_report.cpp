#include <gtest/gtest.h>

#include <fstream>

#include "helpers.hpp"

using namespace emofuse;

namespace {

ResultTable sample_table() {
    ResultTable t;
    const std::vector<double> base = {0.80, 0.81, 0.79, 0.80, 0.82};
    const std::vector<double> better = {0.86, 0.87, 0.88, 0.86, 0.87};
    const std::vector<double> close = {0.80, 0.83, 0.78, 0.81, 0.80};
    const std::vector<double> phm = {0.70, 0.71, 0.69, 0.70, 0.70};
    for (std::uint64_t s = 1; s <= 5; ++s) {
        t.add("BERT_HMC", "FLU2013", s, base[s - 1]);
        t.add("BERT_GE", "FLU2013", s, close[s - 1]);
        t.add("BERT_HMC + BERT_GE", "FLU2013", s, better[s - 1]);
        t.add("BERT_HMC", "PHM2017", s, phm[s - 1]);
        t.add("BERT_GE", "PHM2017", s, phm[5 - s]);
    }
    return t;
}

std::string row_of(const std::string& md, const std::string& model) {
    std::istringstream in(md);
    std::string line;
    while (std::getline(in, line))
        if (line.starts_with("| " + model + " |")) return line;
    return "";
}

}  // namespace

TEST(ResultTable, KeepsFirstAppearanceOrderAndSortsSeeds) {
    ResultTable t;
    t.add("B", "d2", 3, 0.5);
    t.add("A", "d1", 1, 0.25);
    t.add("B", "d2", 1, 0.75);
    EXPECT_EQ(t.models, (std::vector<std::string>{"B", "A"}));
    EXPECT_EQ(t.datasets, (std::vector<std::string>{"d2", "d1"}));
    EXPECT_EQ(t.find("B", "d2")->seeds.front().first, 1u);
    EXPECT_EQ(t.find("A", "d2"), nullptr);
    EXPECT_EQ(t.max_seeds(), 2u);
}

TEST(Csv, RoundTripIsExact) {
    auto t = sample_table();
    t.add("Broken", "FLU2013", 1, std::nullopt);
    const auto csv = to_csv(t);
    EXPECT_TRUE(csv.starts_with("model,dataset,seed,macro_f1\n"));
    EXPECT_NE(csv.find("BERT_HMC + BERT_GE,PHM2017,,"), std::string::npos) << "missing cell row expected";
    EXPECT_NE(csv.find("Broken,FLU2013,1,FAILED"), std::string::npos);
    auto back = table_from_csv(csv);
    EXPECT_EQ(back.models, t.models);
    EXPECT_EQ(back.datasets, t.datasets);
    EXPECT_EQ(to_csv(back), csv);
    EXPECT_EQ(back.find("BERT_HMC", "FLU2013")->seeds[1].second, 0.81);
}

TEST(Csv, BadInputIsDataError) {
    EXPECT_THROW(table_from_csv("wrong header\n"), DataError);
    EXPECT_THROW(table_from_csv("model,dataset,seed,macro_f1\na,b,c\n"), DataError);
    EXPECT_THROW(table_from_csv("model,dataset,seed,macro_f1\na,b,1,xyz\n"), DataError);
}

TEST(Markdown, MeansBoldAndStars) {
    auto rep = render_markdown(sample_table());
    EXPECT_TRUE(rep.warnings.empty());
    EXPECT_EQ(row_of(rep.markdown, "BERT_HMC"), "| BERT_HMC | 80.40 | **70.00** |");
    EXPECT_EQ(row_of(rep.markdown, "BERT_HMC + BERT_GE"), "| BERT_HMC + BERT_GE | **86.80**\\* | - |");
    // BERT_GE on FLU2013 is not significantly different from the baseline.
    EXPECT_EQ(row_of(rep.markdown, "BERT_GE"), "| BERT_GE | 80.40 | **70.00** |");
    EXPECT_NE(rep.markdown.find("mean over 5 seeds"), std::string::npos);
    EXPECT_NE(rep.markdown.find("Welch"), std::string::npos);
}

TEST(Markdown, TiesAtPrintedPrecisionAreAllBold) {
    ResultTable t;
    for (std::uint64_t s = 1; s <= 2; ++s) {
        t.add("BERT_HMC", "D", s, 0.50001 + 0.01 * s);
        t.add("Other", "D", s, 0.50002 + 0.01 * s);
    }
    auto rep = render_markdown(t);
    EXPECT_NE(row_of(rep.markdown, "BERT_HMC").find("**51.50**"), std::string::npos);
    EXPECT_NE(row_of(rep.markdown, "Other").find("**51.50**"), std::string::npos);
}

TEST(Markdown, BestOfRowAndOptions) {
    ReportOptions opt;
    opt.best_of = std::pair{std::string("BERT_GE"), std::string("BERT_HMC")};
    opt.best_of_label = "Best";
    auto rep = render_markdown(sample_table(), opt);
    EXPECT_EQ(row_of(rep.markdown, "Best"), "| Best | 80.40 | **70.00** |");

    opt = {};
    opt.baseline = "Missing";
    EXPECT_THROW(render_markdown(sample_table(), opt), ConfigError);
    opt.stars = false;
    EXPECT_NO_THROW(render_markdown(sample_table(), opt));
}

TEST(Markdown, SingleSeedOmitsStarsWithWarning) {
    ResultTable t;
    t.add("BERT_HMC", "D", 1, 0.5);
    t.add("X", "D", 1, 0.9);
    auto rep = render_markdown(t);
    ASSERT_EQ(rep.warnings.size(), 1u);
    EXPECT_EQ(rep.markdown.find("\\*"), std::string::npos);
}

TEST(Markdown, FailedCellsAndDegenerateVariance) {
    ResultTable t;
    for (std::uint64_t s = 1; s <= 3; ++s) {
        t.add("BERT_HMC", "D", s, 0.5);
        t.add("Const", "D", s, 0.6);
    }
    t.add("Broken", "D", 1, std::nullopt);
    auto rep = render_markdown(t);
    EXPECT_EQ(row_of(rep.markdown, "Broken"), "| Broken | FAILED |");
    EXPECT_EQ(rep.warnings.size(), 1u);  // both samples constant
}

TEST(LoadRuns, ReadsResultAndFailureFiles) {
    auto root = testing_helpers::scratch_dir("load_runs");
    RunResult r;
    r.plan_id = "BERT_HMC__D";
    r.model = "BERT_HMC";
    r.datasets = {{"hmc", "D"}};
    r.seed = 2;
    r.macro_f1 = 0.625;
    std::filesystem::create_directories(cell_dir(root, r.plan_id, 2));
    write_json_file(cell_dir(root, r.plan_id, 2) / "result.json", to_json(r));
    CellOutcome bad{"X__D", "X", "D", 1, 1, std::nullopt, "boom"};
    write_failure(root, bad);
    auto t = load_runs(root);
    EXPECT_EQ(t.models, (std::vector<std::string>{"BERT_HMC", "X"}));
    EXPECT_EQ(t.find("BERT_HMC", "D")->seeds[0].second, 0.625);
    EXPECT_TRUE(t.find("X", "D")->failed());
    EXPECT_THROW(load_runs(root / "nope"), DataError);
    EXPECT_THROW(load_runs(testing_helpers::scratch_dir("load_runs_empty")), DataError);
}
