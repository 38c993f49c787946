#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace exameval;
using namespace testkit;

// --- decimal ----------------------------------------------------------------

TEST(Decimal, ParsesAndRendersExactly) {
    EXPECT_EQ(Decimal::parse("1035.5").to_string(), "1035.5");
    EXPECT_EQ(Decimal::parse("1,25").to_string(), "1.25");
    EXPECT_EQ(Decimal::parse("-0.5").to_string(1), "-0.5");
    EXPECT_EQ(Decimal::parse("3").to_string(1), "3.0");
    EXPECT_EQ(Decimal::from_half_units(3).to_string(), "1.5");
    EXPECT_THROW(Decimal::parse("abc"), InputError);
    EXPECT_THROW(Decimal::parse(""), InputError);
}

TEST(Decimal, HalfPointSumsHaveNoDrift) {
    Decimal total;
    for (int i = 0; i < 2071; ++i) total += Decimal::parse("0.5");
    EXPECT_EQ(total, Decimal::parse("1035.5"));
    EXPECT_EQ(total.half_units(), 2071);
    EXPECT_TRUE(Decimal::parse("2.5").is_half_multiple());
    EXPECT_FALSE(Decimal::parse("0.3").is_half_multiple());
}

TEST(Decimal, PercentUsesExactIntegers) {
    EXPECT_EQ(render_pct(percent_of(Decimal::parse("294.0"), Decimal::parse("1035.5"))), "28.39");
    EXPECT_THROW(percent_of(Decimal::from_int(1), Decimal{}), InputError);
}

// --- rng --------------------------------------------------------------------

TEST(Rng, SubstreamsAreDeterministicAndDistinct) {
    const Seed s{123};
    Rng a = Rng::substream(s, 5), b = Rng::substream(s, 5), c = Rng::substream(s, 6);
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    EXPECT_NE(x, c.next());
}

TEST(Rng, RejectsUnknownAlgorithm) {
    Seed s{1, "pcg32"};
    EXPECT_THROW(Rng::substream(s, 0), ConfigError);
}

TEST(Rng, BelowIsRoughlyUniform) {
    Rng r(9);
    std::vector<int> counts(6);
    for (int i = 0; i < 60000; ++i) ++counts[r.below(6)];
    for (int c : counts) EXPECT_NEAR(c, 10000, 500);
    EXPECT_THROW(r.below(0), InputError);
}

TEST(Rng, ShuffleIsAPermutation) {
    Rng r(3);
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    auto w = v;
    r.shuffle(w);
    EXPECT_NE(v, w);
    std::sort(w.begin(), w.end());
    EXPECT_EQ(v, w);
}

// --- io ---------------------------------------------------------------------

TEST(Io, Sha256KnownVector) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Io, CsvRoundTripWithQuotes) {
    const std::string text = "a,b\n\"x, y\",\"he said \"\"hi\"\"\"\n";
    const auto t = parse_csv(text);
    ASSERT_EQ(t.size(), 2u);
    EXPECT_EQ(t[1][0], "x, y");
    EXPECT_EQ(t[1][1], "he said \"hi\"");
    EXPECT_EQ(csv_escape("x, y"), "\"x, y\"");
}

TEST(Io, JsonlReportsLineOfBadRow) {
    try {
        parse_jsonl("{\"a\":1}\n{broken\n", "f.jsonl");
        FAIL();
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
    }
}

TEST(Io, YamlAndJsonConfigsLoadToSameDocument) {
    const auto dir = temp_dir("cfg");
    write_file(dir / "c.yaml", "name: m\ntemperature: 0.5\nlist: [1, 2]\nnested:\n  flag: true\n");
    write_file(dir / "c.json", R"({"name":"m","temperature":0.5,"list":[1,2],"nested":{"flag":true}})");
    EXPECT_EQ(load_config_file(dir / "c.yaml"), load_config_file(dir / "c.json"));
}

TEST(Io, NormalizeTextFoldsCaseAndWhitespace) { EXPECT_EQ(normalize_text("  Hello \t WORLD\n"), "hello world"); }

// --- benchcore --------------------------------------------------------------

namespace {
Benchmark tiny() {
    Benchmark b;
    b.name = "tiny";
    b.questions.push_back(Question{"q1", "E", "SS20", "vat", "text", "ref", {{"s1", "a", pts(1)}, {"s2", "b", pts(2.5)}}});
    b.questions.push_back(Question{"q2", "E", "SS20", "income_tax", "text", "ref", {{"s1", "c", pts(0.5)}}});
    return b;
}
}  // namespace

TEST(Benchcore, FixtureCompositionMatchesCategoryTable) {
    const Benchmark b = load_benchmark(fixtures() / "benchmark.json");
    const ValidationReport r = validate(b);
    EXPECT_TRUE(r.ok());
    EXPECT_EQ(r.questions, 115u);
    EXPECT_EQ(r.statements, 752u);
    EXPECT_EQ(r.max_points, pts(1035.5));
    const std::map<std::string, std::tuple<std::size_t, std::size_t, double>> expected = {
        {"corporate_tax", {44, 241, 261.5}}, {"fiscal_code", {3, 76, 129.0}},   {"fundamentals", {56, 268, 269.0}},
        {"income_tax", {4, 55, 189.0}},      {"partnerships", {4, 26, 66.0}},   {"vat", {4, 86, 121.0}}};
    for (const auto& [cat, e] : expected) {
        const auto& t = r.per_category.at(cat);
        EXPECT_EQ(t.questions, std::get<0>(e)) << cat;
        EXPECT_EQ(t.statements, std::get<1>(e)) << cat;
        EXPECT_EQ(t.max_points, pts(std::get<2>(e))) << cat;
    }
}

TEST(Benchcore, DuplicateQuestionIdReported) {
    Benchmark b = tiny();
    b.questions[1].id = "q1";
    const auto r = validate(b);
    ASSERT_FALSE(r.ok());
    EXPECT_NE(r.errors[0].find("duplicate id"), std::string::npos);
}

TEST(Benchcore, GranularityViolationReported) {
    Benchmark b = tiny();
    b.questions[0].statements[0].max_points = pts(0.3);
    const auto r = validate(b);
    ASSERT_FALSE(r.ok());
    EXPECT_NE(r.errors[0].find("granularity"), std::string::npos);
}

TEST(Benchcore, DeclaredTotalMismatchIsAnError) {
    Benchmark b = tiny();
    b.declared_total_max = pts(10);
    EXPECT_FALSE(validate(b).ok());
    b.declared_total_max = pts(4);
    EXPECT_TRUE(validate(b).ok());
}

TEST(Benchcore, ValidationIsPure) {
    const Benchmark b = tiny();
    const Benchmark copy = b;
    EXPECT_EQ(validate(b), validate(b));
    EXPECT_EQ(b, copy);
}

TEST(Benchcore, RoundTripsThroughJson) {
    Gen g(1);
    for (int i = 0; i < 50; ++i) {
        Benchmark b = random_benchmark(g);
        b.declared_total_max = b.total_max();
        b.questions[0].modality_excluded = g.chance(0.5);
        const auto dir = temp_dir("rt");
        save_benchmark(b, dir / "b.json");
        EXPECT_EQ(load_benchmark(dir / "b.json"), b);
        fs::remove_all(dir);
    }
}

TEST(Benchcore, SchemaErrorsNameTheJsonPath) {
    json doc = to_json(tiny());
    doc["questions"][1]["statements"][0].erase("max_points");
    try {
        parse_benchmark(doc);
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_NE(std::string(e.what()).find("$.questions[1].statements[0].max_points"), std::string::npos);
    }
    json bad = to_json(tiny());
    bad["questions"][0]["statements"][0]["max_points"] = 0.3;
    EXPECT_THROW(parse_benchmark(bad), ValidationError);
    EXPECT_NO_THROW(parse_benchmark(bad, false));
}

TEST(Benchcore, CategoryTotalsPartitionTotal) {
    Gen g(2);
    for (int i = 0; i < 200; ++i) {
        const Benchmark b = random_benchmark(g);
        const auto r = validate(b);
        Decimal sum;
        std::size_t stmts = 0;
        for (const auto& [c, t] : r.per_category) {
            sum += t.max_points;
            stmts += t.statements;
        }
        EXPECT_EQ(sum, b.total_max());
        EXPECT_EQ(stmts, b.statement_count());
    }
}

// --- scorebook --------------------------------------------------------------

TEST(Scorebook, FixtureGradebooksScoreToTargets) {
    const Benchmark b = load_benchmark(fixtures() / "benchmark.json");
    const auto a = total_score(load_gradebook(fixtures() / "gradebook_model-a.jsonl"), b, "model-a");
    EXPECT_EQ(a.earned_total, pts(294.0));
    EXPECT_EQ(a.max_total, pts(1035.5));
    EXPECT_EQ(render_pct(a.score_pct), "28.39");
    const auto bb = total_score(load_gradebook(fixtures() / "gradebook_model-b.jsonl"), b, "model-b");
    EXPECT_EQ(bb.earned_total, pts(399.0));
    EXPECT_EQ(render_pct(bb.score_pct), "38.53");
}

TEST(Scorebook, MissingEntryIsIncomplete) {
    const Benchmark b = tiny();
    GradeBook gb;
    gb.entries.push_back(entry("m", "q1", "s1", pts(1), pts(1)));
    EXPECT_THROW(total_score(gb, b, "m"), IncompleteError);
}

TEST(Scorebook, PropertyCategoryPartitionIsExact) {
    Gen g(42);
    for (int i = 0; i < 1000; ++i) {
        const Benchmark b = random_benchmark(g);
        const GradeBook gb = random_gradebook(g, b, {"m"});
        const ModelScore s = total_score(gb, b, "m");
        Decimal a, m;
        for (const auto& [c, cs] : s.per_category) {
            a += cs.earned;
            m += cs.max;
        }
        ASSERT_EQ(a, s.earned_total);
        ASSERT_EQ(m, s.max_total);
        ASSERT_EQ(m, b.total_max());
        ASSERT_GE(s.score_pct, 0.0);
        ASSERT_LE(s.score_pct, 100.0);
        for (const auto& q : s.per_question) {
            ASSERT_GE(q.earned, Decimal{});
            ASSERT_LE(q.earned, q.max);
        }
    }
}

TEST(Scorebook, PropertyPermutationInvariance) {
    Gen g(7);
    for (int i = 0; i < 200; ++i) {
        Benchmark b = random_benchmark(g);
        const GradeBook gb = random_gradebook(g, b, {"m"});
        const double before = total_score(gb, b, "m").score_pct;
        std::shuffle(b.questions.begin(), b.questions.end(), g.eng);
        for (auto& q : b.questions) std::shuffle(q.statements.begin(), q.statements.end(), g.eng);
        GradeBook shuffled = gb;
        std::shuffle(shuffled.entries.begin(), shuffled.entries.end(), g.eng);
        ASSERT_EQ(total_score(shuffled, b, "m").score_pct, before);
    }
}

TEST(Scorebook, CsvHasCategoryTriples) {
    const Benchmark b = tiny();
    GradeBook gb;
    gb.entries = {entry("m", "q1", "s1", pts(1), pts(1)), entry("m", "q1", "s2", pts(1.25), pts(2.5)), entry("m", "q2", "s1", pts(0), pts(0.5))};
    const std::string csv = scores_to_csv(score_all(gb, b));
    EXPECT_NE(csv.find("model,A_total,M_total,score_pct,income_tax_A,income_tax_M,income_tax_pct,vat_A"), std::string::npos);
    EXPECT_NE(csv.find("m,2.25,4.0,56.25,0.0,0.5,0.00,2.25,3.5,64.29"), std::string::npos);
}

namespace {
Benchmark one_category(const std::string& cat, double max, const std::string& exam = "E1") {
    Benchmark b;
    b.questions.push_back(Question{"q1", exam, "SS23", cat, "t", "r", {{"s1", "x", pts(max)}}});
    return b;
}
GradeBook award(double earned, double max) {
    GradeBook gb;
    gb.entries.push_back(entry("m", "q1", "s1", pts(earned), pts(max)));
    return gb;
}
}  // namespace

TEST(Scorebook, StudentComparisonAboveLowestBelowAverage) {
    const Benchmark b = one_category("fundamentals", 100);
    const auto score = total_score(award(49.2, 100), b, "m");
    const auto stats = parse_student_stats_csv("category,exam,n_students,lowest,average,highest,unit\nfundamentals,all,431,9.6,56.9,,pct\n");
    const auto c = student_comparison(score, b, stats);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_NEAR(c[0].model_pct, 49.2, 1e-9);
    EXPECT_TRUE(c[0].above_lowest);
    EXPECT_TRUE(c[0].below_average);
    EXPECT_FALSE(c[0].below_lowest);
}

TEST(Scorebook, StudentComparisonBelowLowest) {
    const Benchmark b = one_category("partnerships", 100);
    const auto score = total_score(award(23.5, 100), b, "m");
    const auto stats = parse_student_stats_csv("category,exam,lowest,average,unit\npartnerships,PersG,46.2,60.2,pct\n");
    const auto c = student_comparison(score, b, stats);
    EXPECT_TRUE(c[0].below_lowest);
    EXPECT_FALSE(c[0].above_lowest);
}

TEST(Scorebook, ModalityExcludedRaisesDenominatorToHighestStudent) {
    Benchmark b;
    b.questions.push_back(Question{"q1", "UnternehmenSt", "SS23", "corporate_tax", "t", "r", {{"s1", "x", pts(40)}}});
    b.questions.push_back(Question{"q2", "UnternehmenSt", "SS23", "corporate_tax", "t", "r", {{"s1", "x", pts(6)}}, true});
    GradeBook gb;
    gb.entries = {entry("m", "q1", "s1", pts(20), pts(40)), entry("m", "q2", "s1", pts(6), pts(6))};
    const auto score = total_score(gb, b, "m");
    const auto stats = parse_student_stats_csv(
        "category,exam,n_students,lowest,average,highest,unit\ncorporate_tax,UnternehmenSt,89,0.5,30.5,62.0,points\n");
    const auto c = student_comparison(score, b, stats);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_DOUBLE_EQ(c[0].denominator, 62.0);
    EXPECT_EQ(c[0].model_earned, pts(20));  // the excluded question counts 0
    EXPECT_NEAR(c[0].model_pct, 100.0 * 20 / 62, 1e-9);
    EXPECT_NEAR(*c[0].student_avg_pct, 100.0 * 30.5 / 62, 1e-9);
}

TEST(Scorebook, MissingStudentStatsIsNA) {
    const Benchmark b = one_category("vat", 10);
    const auto c = student_comparison(total_score(award(5, 10), b, "m"), b, StudentStats{});
    EXPECT_FALSE(c[0].student_low_pct.has_value());
    EXPECT_FALSE(c[0].above_lowest);
    EXPECT_EQ(to_json(c[0])["student_low_pct"], "N/A");
}

TEST(Scorebook, StudentCsvRejectsBadUnit) {
    EXPECT_THROW(parse_student_stats_csv("category,exam,lowest,average,unit\nvat,x,1,2,percent\n"), InputError);
    EXPECT_THROW(parse_student_stats_csv("category,exam\nvat,x\n"), InputError);
}

// --- manifest ---------------------------------------------------------------

TEST(Manifest, RunIdDependsOnInputsAndConfig) {
    const std::vector<FileDigest> in = {{"a", "00"}};
    EXPECT_EQ(derive_run_id(in, json{{"x", 1}}), derive_run_id(in, json{{"x", 1}}));
    EXPECT_NE(derive_run_id(in, json{{"x", 1}}), derive_run_id(in, json{{"x", 2}}));
    EXPECT_EQ(derive_run_id(in, json{}).rfind("run-", 0), 0u);
}

TEST(Manifest, WrittenNextToOutput) {
    const auto dir = temp_dir("manifest");
    write_file(dir / "out.jsonl", "{}\n");
    RunManifest m;
    m.run_id = "run-x";
    m.command = "test";
    m.outputs = {digest_file(dir / "out.jsonl")};
    const auto p = write_manifest(m, dir / "out.jsonl");
    const json j = json::parse(read_file(p));
    EXPECT_EQ(j["run_id"], "run-x");
    EXPECT_EQ(j["outputs"][0]["sha256"], sha256_hex("{}\n"));
}
