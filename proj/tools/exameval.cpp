// exameval command-line tool.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "exameval.hpp"

namespace fs = std::filesystem;
using namespace exameval;

namespace {

/// Model config from a YAML/JSON file; a relative "mock:" script path is
/// resolved against the config file's directory.
ModelConfig model_config_from(const json& j, const fs::path& base_dir) {
    json copy = j;
    if (copy.is_object() && copy.contains("endpoint_url")) {
        std::string url = copy["endpoint_url"].get<std::string>();
        if (url.rfind("mock:", 0) == 0) {
            fs::path script = url.substr(5);
            if (script.is_relative()) script = base_dir / script;
            copy["endpoint_url"] = "mock:" + script.lexically_normal().string();
        }
    }
    return model_config_from_json(copy);
}

ModelConfig load_model_config(const fs::path& path) {
    return model_config_from(load_config_file(path), path.parent_path());
}

void emit(const std::string& text, const std::string& out) {
    if (out.empty() || out == "-") {
        std::fwrite(text.data(), 1, text.size(), stdout);
    } else {
        write_file(out, text);
    }
}

/// Uses the given seed, or draws one and says so on stderr; either way the
/// value ends up in the output.
Seed resolve_seed(const std::optional<std::uint64_t>& given) {
    Seed s;
    if (given) {
        s.value = *given;
    } else {
        std::random_device rd;
        s.value = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
        std::cerr << json{{"notice", "no --seed given; generated seed recorded in output"}, {"seed", s.value}}.dump()
                  << "\n";
    }
    return s;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        std::size_t end = s.find(',', start);
        if (end == std::string::npos) end = s.size();
        const auto part = trim(std::string_view(s).substr(start, end - start));
        if (!part.empty()) out.emplace_back(part);
        start = end + 1;
    }
    return out;
}

struct OutcomeInputs {
    std::string outcomes;
    std::string gradebook;
    std::string benchmark;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--outcomes", outcomes, "Per-question outcomes JSON");
        cmd->add_option("--gradebook", gradebook, "GradeBook JSONL");
        cmd->add_option("--benchmark", benchmark, "Benchmark JSON");
    }

    std::vector<QuestionOutcome> load(std::vector<FileDigest>& digests) const {
        if (!outcomes.empty()) {
            digests.push_back(digest_file(outcomes));
            try {
                return outcomes_from_json(json::parse(read_file(outcomes)));
            } catch (const json::parse_error& e) {
                throw InputError(outcomes + ": " + e.what());
            }
        }
        if (gradebook.empty() || benchmark.empty())
            throw ConfigError("give --outcomes, or both --gradebook and --benchmark");
        digests.push_back(digest_file(benchmark));
        digests.push_back(digest_file(gradebook));
        return outcomes_from(load_gradebook(gradebook), load_benchmark(benchmark));
    }
};

std::vector<std::string> models_in(const std::vector<QuestionOutcome>& outcomes) {
    std::vector<std::string> out;
    for (const auto& o : outcomes)
        for (const auto& [m, _] : o.earned)
            if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
    return out;
}

PermutationMode parse_mode(const std::string& s) {
    if (s == "auto") return PermutationMode::automatic;
    if (s == "monte_carlo" || s == "mc") return PermutationMode::monte_carlo;
    if (s == "exact") return PermutationMode::exact;
    throw ConfigError("unknown permutation mode '" + s + "'");
}

std::string rows_to_jsonl_with_run_id(std::vector<json> rows, const std::string& run_id) {
    for (auto& r : rows) r["run_id"] = run_id;
    return to_jsonl(rows);
}

// ---------------------------------------------------------------------------
// Fountain config: {fountain: {...}, generator: {...} | "path", querygen?,
// retrieval: {canned: path} | {searxng_url: url}, embeddings: {hash_dim} | {endpoint: {...}}}
// ---------------------------------------------------------------------------

struct FountainSetup {
    FountainConfig cfg;
    std::unique_ptr<Retriever> retriever;
    std::unique_ptr<Embedder> embedder;
    std::unique_ptr<ChatClient> generator;
    std::unique_ptr<ChatClient> querygen;
    json snapshot;
};

ModelConfig model_section(const json& v, const fs::path& base) {
    if (v.is_string()) {
        fs::path p = v.get<std::string>();
        if (p.is_relative()) p = base / p;
        return load_model_config(p);
    }
    return model_config_from(v, base);
}

FountainSetup load_fountain_setup(const fs::path& path, std::optional<std::uint64_t> seed_override) {
    const json doc = load_config_file(path);
    const fs::path base = path.parent_path();
    FountainSetup s;
    s.cfg = fountain_config_from_json(doc.value("fountain", json::object()));
    if (seed_override) s.cfg.seed.value = *seed_override;
    if (!doc.contains("generator")) throw ConfigError("fountain config: 'generator' section is required");
    s.generator = std::make_unique<ChatClient>(model_section(doc["generator"], base));
    if (doc.contains("querygen") && !doc["querygen"].is_null())
        s.querygen = std::make_unique<ChatClient>(model_section(doc["querygen"], base));
    const json retrieval = doc.value("retrieval", json::object());
    if (retrieval.contains("canned")) {
        fs::path p = retrieval["canned"].get<std::string>();
        if (p.is_relative()) p = base / p;
        s.retriever = std::make_unique<CannedRetriever>(CannedRetriever::load(p));
    } else if (retrieval.contains("searxng_url")) {
        s.retriever = std::make_unique<SearxngRetriever>(retrieval["searxng_url"].get<std::string>());
    } else {
        throw ConfigError("fountain config: retrieval needs 'canned' or 'searxng_url'");
    }
    const json emb = doc.value("embeddings", json{{"hash_dim", 64}});
    if (emb.contains("endpoint")) s.embedder = std::make_unique<EndpointEmbedder>(model_section(emb["endpoint"], base));
    else s.embedder = std::make_unique<HashEmbedder>(emb.value("hash_dim", std::size_t{64}));
    s.snapshot = {{"fountain", to_json(s.cfg)},
                  {"generator", to_json(s.generator->config())},
                  {"querygen", s.querygen ? to_json(s.querygen->config()) : json(nullptr)},
                  {"retrieval", retrieval},
                  {"embedder", s.embedder->name()}};
    return s;
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
    CLI::App app{"Exam benchmark evaluation toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));
    int exit_status = 0;

    // validate ---------------------------------------------------------------
    auto* validate_cmd = app.add_subcommand("validate", "Check a benchmark file against every invariant");
    std::string v_bench;
    validate_cmd->add_option("benchmark", v_bench, "Benchmark JSON")->required();
    validate_cmd->callback([&] {
        const std::string text = read_file(v_bench);
        json doc;
        try {
            doc = json::parse(text);
        } catch (const json::parse_error& e) {
            throw LoadError(v_bench + ": not valid JSON: " + e.what());
        }
        const ValidationReport r = validate(parse_benchmark(doc, false));
        std::cout << to_json(r).dump(2) << "\n";
        exit_status = r.ok() ? 0 : static_cast<int>(ExitCode::validation_failure);
    });

    // answer -----------------------------------------------------------------
    auto* answer_cmd = app.add_subcommand("answer", "Collect one answer per question from a model");
    std::string a_bench, a_cfg, a_out, a_run_id;
    answer_cmd->add_option("--benchmark", a_bench)->required();
    answer_cmd->add_option("--model-config", a_cfg)->required();
    answer_cmd->add_option("--out", a_out)->required();
    answer_cmd->add_option("--run-id", a_run_id);
    answer_cmd->callback([&] {
        RunManifest m;
        m.command = "answer";
        m.started_at = now_iso8601();
        const Benchmark b = load_benchmark(a_bench);
        const ModelConfig cfg = load_model_config(a_cfg);
        m.inputs = {digest_file(a_bench), digest_file(a_cfg)};
        m.config = to_json(cfg);
        m.run_id = a_run_id.empty() ? derive_run_id(m.inputs, m.config) : a_run_id;
        ChatClient client(cfg);
        const AnswerRun r = run_answers(b, client);
        std::vector<json> rows;
        for (const auto& rec : r.records) rows.push_back(to_json(rec));
        write_file(a_out, rows_to_jsonl_with_run_id(rows, m.run_id));
        m.outputs = {digest_file(a_out)};
        write_manifest(m, a_out);
        std::cout << json{{"run_id", m.run_id},
                          {"model", cfg.name},
                          {"answered", r.records.size() - r.failures.size()},
                          {"failures", r.failures}}
                         .dump()
                  << "\n";
        if (!r.records.empty() && r.failures.size() == r.records.size())
            exit_status = static_cast<int>(ExitCode::transport_failure);
    });

    // grade ------------------------------------------------------------------
    auto* grade_cmd = app.add_subcommand("grade", "Grade answers statement by statement");
    std::vector<std::string> g_answers;
    std::string g_bench, g_cfg, g_out, g_run_id;
    int g_retries = 2;
    bool g_self = false;
    grade_cmd->add_option("--answers", g_answers, "Answer JSONL (repeatable)")->required();
    grade_cmd->add_option("--benchmark", g_bench)->required();
    grade_cmd->add_option("--evaluator-config", g_cfg)->required();
    grade_cmd->add_option("--out", g_out)->required();
    grade_cmd->add_option("--run-id", g_run_id);
    grade_cmd->add_option("--parse-retries", g_retries, "Retries with a stricter reminder on unparseable replies");
    grade_cmd->add_flag("--allow-self-grading", g_self);
    grade_cmd->callback([&] {
        RunManifest m;
        m.command = "grade";
        m.started_at = now_iso8601();
        const Benchmark b = load_benchmark(g_bench);
        const ModelConfig cfg = load_model_config(g_cfg);
        std::vector<AnswerRecord> answers;
        m.inputs.push_back(digest_file(g_bench));
        m.inputs.push_back(digest_file(g_cfg));
        for (const auto& p : g_answers) {
            auto part = load_answers(p);
            answers.insert(answers.end(), part.begin(), part.end());
            m.inputs.push_back(digest_file(p));
        }
        m.config = {{"evaluator", to_json(cfg)}, {"parse_retry_budget", g_retries}, {"allow_self_grading", g_self}};
        m.run_id = g_run_id.empty() ? derive_run_id(m.inputs, m.config) : g_run_id;
        ChatClient client(cfg);
        GradingOptions opts;
        opts.parse_retry_budget = g_retries;
        opts.allow_self_grading = g_self;
        opts.run_id = m.run_id;
        const GradeBook gb = grade_answer_set(answers, b, client, opts);
        save_gradebook(gb, g_out);
        m.outputs = {digest_file(g_out)};
        write_manifest(m, g_out);
        std::size_t unparseable = 0, no_answer = 0, clamped = 0;
        for (const auto& e : gb.entries) {
            unparseable += e.unparseable;
            no_answer += e.no_answer;
            clamped += e.clamped;
        }
        std::cout << json{{"run_id", m.run_id},
                          {"entries", gb.entries.size()},
                          {"unparseable", unparseable},
                          {"no_answer", no_answer},
                          {"clamped", clamped}}
                         .dump()
                  << "\n";
    });

    // score ------------------------------------------------------------------
    auto* score_cmd = app.add_subcommand("score", "Aggregate a GradeBook into normalized scores");
    std::string s_gb, s_bench, s_students, s_format = "json", s_out;
    score_cmd->add_option("--gradebook", s_gb)->required();
    score_cmd->add_option("--benchmark", s_bench)->required();
    score_cmd->add_option("--students", s_students, "Student statistics CSV");
    score_cmd->add_option("--format", s_format)->check(CLI::IsMember({"json", "csv"}));
    score_cmd->add_option("--out", s_out);
    score_cmd->callback([&] {
        const Benchmark b = load_benchmark(s_bench);
        const GradeBook gb = load_gradebook(s_gb);
        const auto scores = score_all(gb, b);
        if (s_format == "csv") return emit(scores_to_csv(scores), s_out);
        json arr = json::array();
        for (const auto& s : scores) arr.push_back(to_json(s));
        json out = {{"run_id", gb.run_id},
                    {"evaluator", gb.evaluator_model},
                    {"benchmark", {{"questions", b.questions.size()}, {"M_total", decimal_to_json(b.total_max())}}},
                    {"scores", arr}};
        if (!s_students.empty()) {
            const StudentStats stats = parse_student_stats_csv(read_file(s_students));
            json cmp = json::object();
            for (const auto& s : scores) {
                json rows = json::array();
                for (const auto& c : student_comparison(s, b, stats)) rows.push_back(to_json(c));
                cmp[s.model] = rows;
            }
            out["student_comparison"] = cmp;
        }
        emit(out.dump(2) + "\n", s_out);
    });

    // stats ------------------------------------------------------------------
    auto* stats_cmd = app.add_subcommand("stats", "Bootstrap intervals, permutation tests, shift table");
    stats_cmd->require_subcommand(1);
    OutcomeInputs st_in;
    std::optional<std::uint64_t> st_seed;
    int st_B = 1000, st_restart_cap = 1000, st_nperm = 10000;
    std::string st_models, st_category, st_out, st_mode = "auto", st_format = "md";
    bool st_reps = false;

    auto* st_outcomes = stats_cmd->add_subcommand("outcomes", "Export per-question outcomes");
    st_in.add_to(st_outcomes);
    st_outcomes->add_option("--out", st_out);
    st_outcomes->callback([&] {
        std::vector<FileDigest> d;
        emit(outcomes_to_json(st_in.load(d)).dump(2) + "\n", st_out);
    });

    auto* st_boot = stats_cmd->add_subcommand("bootstrap", "Points-constrained bootstrap per model");
    st_in.add_to(st_boot);
    st_boot->add_option("--seed", st_seed);
    st_boot->add_option("--B", st_B, "Replicates")->check(CLI::PositiveNumber);
    st_boot->add_option("--restart-cap", st_restart_cap);
    st_boot->add_option("--models", st_models, "Comma-separated subset");
    st_boot->add_option("--category", st_category, "Restrict to one category (T = its maximum)");
    st_boot->add_flag("--with-replicates", st_reps);
    st_boot->add_option("--out", st_out);
    st_boot->callback([&] {
        std::vector<FileDigest> digests;
        auto outcomes = st_in.load(digests);
        if (!st_category.empty()) outcomes = outcomes_in_category(outcomes, st_category);
        if (outcomes.empty()) throw InputError("no questions selected");
        StatReport rep;
        rep.seed = resolve_seed(st_seed);
        const Decimal T = total_max_of(outcomes);
        const auto models = st_models.empty() ? models_in(outcomes) : split_list(st_models);
        for (const auto& m : models) {
            BootstrapSummary s = constrained_bootstrap(outcomes, m, T, st_B, rep.seed, st_restart_cap);
            if (!st_category.empty()) s.scope = st_category;
            rep.bootstrap.push_back(std::move(s));
        }
        json j = to_json(rep, st_reps);
        j["run_id"] = derive_run_id(digests, json{{"cmd", "bootstrap"}, {"B", st_B}, {"seed", rep.seed.value}});
        emit(j.dump(2) + "\n", st_out);
    });

    auto* st_perm = stats_cmd->add_subcommand("permute", "Paired sign-flip tests for every model pair, BH-adjusted");
    st_in.add_to(st_perm);
    st_perm->add_option("--seed", st_seed);
    st_perm->add_option("--n-perm", st_nperm)->check(CLI::PositiveNumber);
    st_perm->add_option("--mode", st_mode)->check(CLI::IsMember({"auto", "monte_carlo", "mc", "exact"}));
    st_perm->add_option("--models", st_models, "Comma-separated models; a single name is compared with itself");
    st_perm->add_option("--out", st_out);
    st_perm->callback([&] {
        std::vector<FileDigest> digests;
        const auto outcomes = st_in.load(digests);
        StatReport rep;
        rep.seed = resolve_seed(st_seed);
        auto models = st_models.empty() ? models_in(outcomes) : split_list(st_models);
        if (models.size() == 1) models.push_back(models.front());
        rep.permutation = pairwise_permutation(outcomes, models, st_nperm, rep.seed, parse_mode(st_mode));
        json j = to_json(rep);
        j["run_id"] = derive_run_id(digests, json{{"cmd", "permute"}, {"n_perm", st_nperm}, {"seed", rep.seed.value}});
        emit(j.dump(2) + "\n", st_out);
    });

    auto* st_shift = stats_cmd->add_subcommand("shift-table", "Observed vs bootstrap mean per model");
    st_in.add_to(st_shift);
    st_shift->add_option("--seed", st_seed);
    st_shift->add_option("--B", st_B)->check(CLI::PositiveNumber);
    st_shift->add_option("--restart-cap", st_restart_cap);
    st_shift->add_option("--format", st_format)->check(CLI::IsMember({"md", "csv", "json"}));
    st_shift->add_option("--out", st_out);
    st_shift->callback([&] {
        std::vector<FileDigest> digests;
        const auto outcomes = st_in.load(digests);
        StatReport rep;
        rep.seed = resolve_seed(st_seed);
        const Decimal T = total_max_of(outcomes);
        for (const auto& m : models_in(outcomes))
            rep.bootstrap.push_back(constrained_bootstrap(outcomes, m, T, st_B, rep.seed, st_restart_cap));
        if (st_format == "md") emit(shift_table_markdown(rep.bootstrap), st_out);
        else if (st_format == "csv") emit(shift_table_csv(rep.bootstrap), st_out);
        else emit(to_json(rep).dump(2) + "\n", st_out);
    });

    // study ------------------------------------------------------------------
    auto* study_cmd = app.add_subcommand("study", "Human rater study");
    study_cmd->require_subcommand(1);
    std::string sy_gb, sy_bench, sy_design, sy_study, sy_out, sy_log, sy_csv, sy_ui, sy_host = "127.0.0.1",
                                                                           sy_exclude, sy_format = "md";
    std::vector<std::string> sy_answers;
    std::optional<std::uint64_t> sy_seed;
    int sy_port = 8080, sy_B = 10000;

    auto* sy_sample = study_cmd->add_subcommand("sample", "Stratified item sample (assigns raters if listed)");
    sy_sample->add_option("--gradebook", sy_gb)->required();
    sy_sample->add_option("--benchmark", sy_bench)->required();
    sy_sample->add_option("--design", sy_design, "Study design YAML/JSON")->required();
    sy_sample->add_option("--seed", sy_seed, "Overrides the design's seed");
    sy_sample->add_option("--out", sy_out)->required();
    sy_sample->callback([&] {
        StudyDesign design = study_design_from_json(load_config_file(sy_design));
        if (sy_seed) design.seed.value = *sy_seed;
        const Benchmark b = load_benchmark(sy_bench);
        const GradeBook gb = load_gradebook(sy_gb);
        Study s = sample_study(gb, b, score_all(gb, b), design);
        if (!design.raters.empty()) assign_raters(s);
        save_study(s, sy_out);
        for (const auto& w : s.warnings) std::cerr << json{{"warning", w}}.dump() << "\n";
        std::cout << json{{"items", s.items.size()}, {"warnings", s.warnings.size()}}.dump() << "\n";
    });

    auto* sy_assign = study_cmd->add_subcommand("assign", "Assign raters to study items");
    sy_assign->add_option("--study", sy_study)->required();
    sy_assign->add_option("--out", sy_out, "Defaults to rewriting --study");
    sy_assign->callback([&] {
        Study s = load_study(sy_study);
        assign_raters(s);
        save_study(s, sy_out.empty() ? sy_study : sy_out);
        std::size_t overlap = 0;
        for (const auto& it : s.items) overlap += it.overlap;
        std::cout << json{{"items", s.items.size()}, {"overlap", overlap}}.dump() << "\n";
    });

    auto* sy_serve = study_cmd->add_subcommand("serve", "Serve the study HTTP API and static UI");
    sy_serve->add_option("--study", sy_study)->required();
    sy_serve->add_option("--benchmark", sy_bench);
    sy_serve->add_option("--answers", sy_answers);
    sy_serve->add_option("--log", sy_log, "Append-only score event log")->required();
    sy_serve->add_option("--ui-dir", sy_ui);
    sy_serve->add_option("--host", sy_host);
    sy_serve->add_option("--port", sy_port);
    sy_serve->callback([&] {
        StudyStore store(load_study(sy_study), sy_log);
        std::optional<Benchmark> b;
        StudyContext ctx;
        if (!sy_bench.empty()) {
            b = load_benchmark(sy_bench);
            ctx.benchmark = &*b;
        }
        for (const auto& p : sy_answers) ctx.add_answers(load_answers(p));
        StudyServer server(store, ctx, sy_host, sy_ui);
        std::cerr << json{{"listening", "http://" + sy_host + ":" + std::to_string(sy_port)}}.dump() << "\n";
        server.run(sy_port);
    });

    auto* sy_import = study_cmd->add_subcommand("import", "Import rater scores from CSV into the event log");
    sy_import->add_option("--study", sy_study)->required();
    sy_import->add_option("--csv", sy_csv)->required();
    sy_import->add_option("--log", sy_log)->required();
    sy_import->callback([&] {
        StudyStore store(load_study(sy_study), sy_log);
        const auto recs = records_from_csv(read_file(sy_csv), &store.study());
        for (const auto& r : recs) store.put_score(r.item_id, r.rater, r.points, SavedVia::import);
        std::cout << json{{"imported", recs.size()}}.dump() << "\n";
    });

    auto* sy_export = study_cmd->add_subcommand("export", "Export current scores as CSV");
    sy_export->add_option("--study", sy_study)->required();
    sy_export->add_option("--log", sy_log)->required();
    sy_export->add_option("--out", sy_out);
    sy_export->callback([&] {
        StudyStore store(load_study(sy_study), sy_log);
        emit(records_to_csv(store.records()), sy_out);
    });

    auto* sy_report = study_cmd->add_subcommand("report", "Inter-rater and human-vs-evaluator agreement");
    sy_report->add_option("--study", sy_study)->required();
    sy_report->add_option("--gradebook", sy_gb)->required();
    sy_report->add_option("--log", sy_log, "Score event log");
    sy_report->add_option("--csv", sy_csv, "Score CSV (instead of --log)");
    sy_report->add_option("--exclude", sy_exclude, "Comma-separated item ids");
    sy_report->add_option("--seed", sy_seed);
    sy_report->add_option("--B", sy_B)->check(CLI::PositiveNumber);
    sy_report->add_option("--format", sy_format)->check(CLI::IsMember({"md", "json"}));
    sy_report->add_option("--out", sy_out);
    sy_report->callback([&] {
        const Study s = load_study(sy_study);
        std::vector<RaterRecord> records;
        if (!sy_csv.empty()) records = records_from_csv(read_file(sy_csv), &s);
        else if (!sy_log.empty()) records = StudyStore(s, sy_log).records();
        else throw ConfigError("give --log or --csv");
        AgreementOptions opts;
        opts.B = sy_B;
        opts.seed = resolve_seed(sy_seed);
        const auto rep = agreement_report(records, s, load_gradebook(sy_gb), split_list(sy_exclude), opts);
        if (sy_format == "md") {
            emit(agreement_markdown(rep), sy_out);
        } else {
            json j = to_json(rep);
            j["rng"] = {{"algorithm", opts.seed.algorithm_id}, {"seed", opts.seed.value}};
            emit(j.dump(2) + "\n", sy_out);
        }
    });

    // fountain ---------------------------------------------------------------
    auto* fountain_cmd = app.add_subcommand("fountain", "Synthetic QA generation and cleansing");
    fountain_cmd->require_subcommand(1);
    std::string f_config, f_seeds, f_out, f_dataset, f_flag = kDefaultFlag, f_report;
    std::optional<std::uint64_t> f_seed;
    int f_smin = 3;

    auto* f_run = fountain_cmd->add_subcommand("run", "Iterate retrieve, pack, generate, gate, diversify");
    f_run->add_option("--config", f_config)->required();
    f_run->add_option("--seeds", f_seeds, "Seed questions (JSON array or JSONL)")->required();
    f_run->add_option("--seed", f_seed, "Overrides the config's RNG seed");
    f_run->add_option("--out", f_out, "Dataset JSONL")->required();
    f_run->callback([&] {
        RunManifest m;
        m.command = "fountain run";
        m.started_at = now_iso8601();
        FountainSetup setup = load_fountain_setup(f_config, f_seed);
        const auto seeds = load_seeds(f_seeds);
        FountainServices svc;
        svc.retriever = setup.retriever.get();
        svc.embedder = setup.embedder.get();
        svc.generator = setup.generator.get();
        svc.querygen = setup.querygen.get();
        const FountainRun r = run_fountain(setup.cfg, seeds, svc);
        m.inputs = {digest_file(f_config), digest_file(f_seeds)};
        m.config = setup.snapshot;
        m.seeds = {{"rng", setup.cfg.seed.algorithm_id}, {"seed", setup.cfg.seed.value}};
        m.run_id = derive_run_id(m.inputs, m.config);
        std::vector<json> rows;
        for (const auto& t : r.dataset) rows.push_back(to_json(t));
        write_file(f_out, rows_to_jsonl_with_run_id(rows, m.run_id));
        json fm = fountain_manifest(r, setup.cfg, svc);
        fm["run_id"] = m.run_id;
        write_file(f_out + ".fountain.json", fm.dump(2) + "\n");
        m.outputs = {digest_file(f_out), digest_file(f_out + ".fountain.json")};
        write_manifest(m, f_out);
        std::cout << json{{"run_id", m.run_id},
                          {"pool_sizes", r.pool_sizes},
                          {"dataset_size", r.dataset.size()},
                          {"stop_reason", r.stop_reason}}
                         .dump()
                  << "\n";
    });

    auto* f_cleanse = fountain_cmd->add_subcommand("cleanse", "Four-stage dataset cleansing");
    f_cleanse->add_option("--dataset", f_dataset)->required();
    f_cleanse->add_option("--seeds", f_seeds, "Seed questions for overlap removal");
    f_cleanse->add_option("--config", f_config, "Take flag_string and S_min from a fountain config");
    f_cleanse->add_option("--flag", f_flag);
    f_cleanse->add_option("--s-min", f_smin);
    f_cleanse->add_option("--out", f_out)->required();
    f_cleanse->add_option("--report", f_report, "Markdown report path (JSON goes to stdout)");
    f_cleanse->callback([&] {
        std::string flag = f_flag;
        int smin = f_smin;
        if (!f_config.empty()) {
            const json doc = load_config_file(f_config).value("fountain", json::object());
            if (!f_cleanse->count("--flag")) flag = doc.value("flag_string", flag);
            if (!f_cleanse->count("--s-min")) smin = doc.value("S_min", smin);
        }
        std::vector<std::string> seeds;
        if (!f_seeds.empty())
            for (const auto& s : load_seeds(f_seeds)) seeds.push_back(s.text);
        const auto r = cleanse(load_tuples(f_dataset), seeds, flag, smin);
        save_tuples(r.kept, f_out);
        if (!f_report.empty()) write_file(f_report, cleansing_report_markdown(r.report, flag));
        std::cout << to_json(r.report).dump(2) << "\n";
    });

    // report -----------------------------------------------------------------
    auto* report_cmd = app.add_subcommand("report", "Score tables");
    report_cmd->require_subcommand(1);
    std::string r_gb, r_bench, r_ref, r_format = "md", r_out, r_mode = "auto";
    std::optional<std::uint64_t> r_seed;
    int r_B = 1000, r_nperm = 10000;
    auto add_table_opts = [&](CLI::App* c) {
        c->add_option("--gradebook", r_gb)->required();
        c->add_option("--benchmark", r_bench)->required();
        c->add_option("--seed", r_seed);
        c->add_option("--B", r_B)->check(CLI::PositiveNumber);
        c->add_option("--format", r_format)->check(CLI::IsMember({"md", "csv", "json"}));
        c->add_option("--out", r_out);
    };
    auto* t2 = report_cmd->add_subcommand("table2", "Overall scores with intervals, points and p-values");
    add_table_opts(t2);
    t2->add_option("--reference", r_ref, "Model the p-values are computed against")->required();
    t2->add_option("--n-perm", r_nperm)->check(CLI::PositiveNumber);
    t2->add_option("--mode", r_mode)->check(CLI::IsMember({"auto", "monte_carlo", "mc", "exact"}));
    t2->callback([&] {
        TableOptions o{r_B, r_nperm, resolve_seed(r_seed), parse_mode(r_mode)};
        const Table2 t = build_table2(load_gradebook(r_gb), load_benchmark(r_bench), r_ref, o);
        if (r_format == "md") emit(table2_markdown(t), r_out);
        else if (r_format == "csv") emit(table2_csv(t), r_out);
        else {
            json j = to_json(t);
            j["rng"] = {{"algorithm", o.seed.algorithm_id}, {"seed", o.seed.value}};
            emit(j.dump(2) + "\n", r_out);
        }
    });
    auto* t3 = report_cmd->add_subcommand("table3", "Per-category scores with intervals");
    add_table_opts(t3);
    t3->callback([&] {
        TableOptions o{r_B, r_nperm, resolve_seed(r_seed), PermutationMode::automatic};
        const Table3 t = build_table3(load_gradebook(r_gb), load_benchmark(r_bench), o);
        if (r_format == "md") emit(table3_markdown(t), r_out);
        else if (r_format == "csv") emit(table3_csv(t), r_out);
        else {
            json j = to_json(t);
            j["rng"] = {{"algorithm", o.seed.algorithm_id}, {"seed", o.seed.value}};
            emit(j.dump(2) + "\n", r_out);
        }
    });

    // mock -------------------------------------------------------------------
    auto* mock_cmd = app.add_subcommand("mock", "Mock chat-completions endpoint");
    mock_cmd->require_subcommand(1);
    std::string m_script, m_host = "127.0.0.1";
    int m_port = 8089;
    auto* m_serve = mock_cmd->add_subcommand("serve", "Serve a mock script over HTTP");
    m_serve->add_option("--script", m_script)->required();
    m_serve->add_option("--host", m_host);
    m_serve->add_option("--port", m_port);
    m_serve->callback([&] {
        MockServer server(std::make_shared<MockScript>(MockScript::load(m_script)), m_host);
        std::cerr << json{{"listening", "http://" + m_host + ":" + std::to_string(m_port) + "/v1"}}.dump() << "\n";
        server.run(m_port);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json{{"error", {{"kind", "usage_error"}, {"message", e.what()}}}}.dump() << "\n";
        return static_cast<int>(ExitCode::config_error);
    }
    return exit_status;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const exameval::Error& e) {
        std::cerr << json{{"error", {{"kind", e.kind()}, {"message", e.what()}}}}.dump() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        std::cerr << json{{"error", {{"kind", "internal_error"}, {"message", e.what()}}}}.dump() << "\n";
        return static_cast<int>(ExitCode::validation_failure);
    }
}
