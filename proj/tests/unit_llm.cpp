#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>

#include "test_support.hpp"

using namespace exameval;
using namespace testkit;

namespace {

ModelConfig mock_config(const std::string& name, int concurrency = 4) {
    ModelConfig c;
    c.name = name;
    c.endpoint_url = "mock:unused";
    c.concurrency_limit = concurrency;
    c.max_retries = 2;
    c.retry_base_ms = 1;
    c.retry_cap_ms = 2;
    return c;
}

std::shared_ptr<InProcessMockTransport> transport(MockScript s) {
    return std::make_shared<InProcessMockTransport>(std::make_shared<MockScript>(std::move(s)));
}

Benchmark two_by_three() {
    Benchmark b;
    for (int i = 1; i <= 2; ++i) {
        Question q;
        q.id = "q" + std::to_string(i);
        q.category = "vat";
        q.text = "Question " + std::to_string(i);
        q.reference_solution = "SENTINEL-REFERENCE-" + std::to_string(i);
        for (int j = 1; j <= 3; ++j)
            q.statements.push_back(Statement{"s" + std::to_string(j), "stmt", pts(j == 3 ? 2.0 : 1.0)});
        b.questions.push_back(q);
    }
    return b;
}

std::string grade_json(const std::string& sid, double awarded, double max = 1.0) {
    return json{{"awarded_points", awarded}, {"max_points", max}, {"statement_id", sid}, {"justification", "ok"}}.dump();
}

}  // namespace

// --- llmgate ----------------------------------------------------------------

TEST(ModelConfig, RejectsInvalidValues) {
    auto base = json{{"name", "m"}, {"endpoint_url", "http://x"}};
    EXPECT_NO_THROW(model_config_from_json(base));
    for (auto [k, v] : std::vector<std::pair<std::string, json>>{
             {"temperature", -0.1}, {"max_tokens", 0}, {"concurrency_limit", 0}, {"max_retries", -1}}) {
        json j = base;
        j[k] = v;
        EXPECT_THROW(model_config_from_json(j), ConfigError) << k;
    }
    EXPECT_THROW(model_config_from_json(json{{"name", "m"}}), ConfigError);
}

TEST(ModelConfig, SnapshotNeverContainsKeyMaterial) {
    ::setenv("EXAMEVAL_TEST_SECRET", "sk-very-secret", 1);
    auto c = model_config_from_json(json{{"name", "m"}, {"endpoint_url", "http://127.0.0.1:9"}, {"api_key_env", "EXAMEVAL_TEST_SECRET"}});
    EXPECT_EQ(to_json(c).dump().find("sk-very-secret"), std::string::npos);
    EXPECT_EQ(to_json(c)["api_key_env"], "EXAMEVAL_TEST_SECRET");
}

TEST(ModelConfig, MissingKeyVariableIsConfigError) {
    ::unsetenv("EXAMEVAL_TEST_UNSET");
    auto c = model_config_from_json(json{{"name", "m"}, {"endpoint_url", "http://127.0.0.1:9"}, {"api_key_env", "EXAMEVAL_TEST_UNSET"}});
    EXPECT_THROW(ChatClient{c}, ConfigError);
}

TEST(MockScript, LookupOrderKeyThenRulesThenDefault) {
    MockScript s;
    s.add_response("exact prompt", "by-key").add_rule({"alpha", "beta"}, "by-rule").set_default("fallback");
    ChatClient c(mock_config("m"), transport(s));
    EXPECT_EQ(c.complete({std::nullopt, "exact prompt"}).response_text, "by-key");
    EXPECT_EQ(c.complete({std::nullopt, "beta and alpha"}).response_text, "by-rule");
    EXPECT_EQ(c.complete({std::nullopt, "alpha only"}).response_text, "fallback");
}

TEST(MockScript, UnscriptedPromptIs404TransportError) {
    ChatClient c(mock_config("m"), transport(MockScript{}));
    try {
        c.complete({std::nullopt, "nothing"});
        FAIL();
    } catch (const TransportError& e) {
        EXPECT_EQ(e.exit_code(), ExitCode::transport_failure);
    }
}

TEST(ChatClient, RetriesServerErrorsWithinBudget) {
    MockScript s;
    s.set_default("fine").set_fail_first({503, 500});
    ChatClient c(mock_config("m"), transport(s));
    const auto ex = c.complete({std::nullopt, "x"});
    EXPECT_EQ(ex.response_text, "fine");
    EXPECT_EQ(ex.attempt_count, 3);
}

TEST(ChatClient, GivesUpAfterMaxRetries) {
    MockScript s;
    s.set_default("never").set_fail_first({503, 503, 503, 503});
    ChatClient c(mock_config("m"), transport(s));
    EXPECT_THROW(c.complete({std::nullopt, "x"}), TransportError);
}

TEST(ChatClient, ClientErrorsAreNotRetried) {
    MockScript s;
    s.set_default("never").set_fail_first({400, 503});
    ChatClient c(mock_config("m"), transport(s));
    EXPECT_THROW(c.complete({std::nullopt, "x"}), TransportError);
    EXPECT_EQ(c.complete({std::nullopt, "x"}).attempt_count, 2);  // 503 left for the next call
}

TEST(ChatClient, BackoffDoublesWithJitterAndCap) {
    ModelConfig cfg = mock_config("m");
    cfg.retry_base_ms = 1000;
    cfg.retry_cap_ms = 60000;
    ChatClient c(cfg, transport(MockScript{}));
    for (int attempt = 1; attempt <= 8; ++attempt) {
        const double nominal = 1000.0 * std::ldexp(1.0, attempt - 1);
        const auto d = c.backoff_delay(attempt).count();
        EXPECT_GE(d, std::min(0.8 * nominal, 60000.0) - 1);
        EXPECT_LE(d, std::min(1.2 * nominal, 60000.0));
    }
}

TEST(ChatClient, RequestShape) {
    ModelConfig cfg = mock_config("m");
    cfg.wire_model = "wire-id";
    cfg.temperature = 0.25;
    cfg.max_tokens = 77;
    ChatClient c(cfg, transport(MockScript{}));
    const json r = c.build_request({std::string("sys"), "user text"});
    EXPECT_EQ(r["model"], "wire-id");
    EXPECT_EQ(r["temperature"], 0.25);
    EXPECT_EQ(r["max_tokens"], 77);
    ASSERT_EQ(r["messages"].size(), 2u);
    EXPECT_EQ(r["messages"][0]["role"], "system");
    EXPECT_EQ(r["messages"][1]["content"], "user text");
}

TEST(ChatClient, FinishReasonLengthIsReported) {
    MockScript s = MockScript::from_json(json{{"default", {{"content", "cut"}, {"finish_reason", "length"}}}});
    ChatClient c(mock_config("m"), transport(s));
    EXPECT_EQ(c.complete({std::nullopt, "x"}).finish_reason, FinishReason::length);
}

TEST(MockServerHttp, ServesChatAndEmbeddingsOverHttp) {
    auto script = std::make_shared<MockScript>();
    script->set_default("over the wire");
    MockServer server(script);
    server.start();
    ModelConfig cfg = mock_config("m");
    cfg.endpoint_url = server.base_url();
    ChatClient c(cfg);
    EXPECT_EQ(c.complete({std::nullopt, "hello"}).response_text, "over the wire");

    httplib::Client http("127.0.0.1", server.port());
    auto res = http.Post("/v1/embeddings", R"({"input":["a b","c"]})", "application/json");
    ASSERT_TRUE(res);
    const json j = json::parse(res->body);
    ASSERT_EQ(j["data"].size(), 2u);
    EXPECT_EQ(j["data"][0]["embedding"].size(), 64u);
    server.stop();
}

TEST(MockServerHttp, ConcurrencyLimitBoundsInFlightRequests) {
    auto script = std::make_shared<MockScript>();
    script->set_default("slow").set_latency_ms(20);
    MockServer server(script);
    server.start();
    ModelConfig cfg = mock_config("m", 3);
    cfg.endpoint_url = server.base_url();
    ChatClient c(cfg);
    parallel_for(24, 12, [&](std::size_t i) { c.complete({std::nullopt, "q" + std::to_string(i)}); });
    EXPECT_LE(server.gauge().peak(), 3);
    EXPECT_GE(server.gauge().peak(), 2);
    EXPECT_EQ(server.gauge().total(), 24);
    server.stop();
}

TEST(HttpTransport, SendsBearerKeyFromEnvironment) {
    httplib::Server srv;
    std::string seen_auth;
    srv.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"ok"},"finish_reason":"stop"}]})",
                        "application/json");
    });
    const int port = srv.bind_to_any_port("127.0.0.1");
    std::thread t([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    ::setenv("EXAMEVAL_TEST_KEY", "k-123", 1);
    ModelConfig cfg = mock_config("m");
    cfg.endpoint_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
    cfg.api_key_env = "EXAMEVAL_TEST_KEY";
    ChatClient c(cfg);
    EXPECT_EQ(c.complete({std::nullopt, "x"}).response_text, "ok");
    EXPECT_EQ(seen_auth, "Bearer k-123");
    srv.stop();
    t.join();
}

TEST(HttpTransport, ConnectionRefusedIsTransportError) {
    ModelConfig cfg = mock_config("m");
    cfg.endpoint_url = "http://127.0.0.1:1/v1";
    cfg.max_retries = 1;
    cfg.request_timeout_s = 1;
    ChatClient c(cfg);
    EXPECT_THROW(c.complete({std::nullopt, "x"}), TransportError);
}

TEST(HttpTransport, MalformedBodyIsProtocolError) {
    httplib::Server srv;
    srv.Post("/v1/chat/completions", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"nope":1})", "application/json");
    });
    const int port = srv.bind_to_any_port("127.0.0.1");
    std::thread t([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    ModelConfig cfg = mock_config("m");
    cfg.endpoint_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
    ChatClient c(cfg);
    EXPECT_THROW(c.complete({std::nullopt, "x"}), ProtocolError);
    srv.stop();
    t.join();
}

// --- answering --------------------------------------------------------------

TEST(StripReasoning, Examples) {
    auto a = strip_reasoning("<think>step 1</think>Answer: X");
    EXPECT_EQ(a.final_text, "Answer: X");
    EXPECT_TRUE(a.trace_removed);
    auto b = strip_reasoning("plain answer");
    EXPECT_EQ(b.final_text, "plain answer");
    EXPECT_FALSE(b.trace_removed);
    auto c = strip_reasoning("<think>still thinking (cut off)");
    EXPECT_EQ(c.final_text, "");
    EXPECT_TRUE(c.truncated);
}

TEST(StripReasoning, CustomDelimiters) {
    TracePolicy p{{TraceDelimiters{"<reasoning>", "</reasoning>"}}};
    EXPECT_EQ(strip_reasoning("<reasoning>r</reasoning> final", p).final_text, "final");
}

TEST(StripReasoning, PropertyIdempotent) {
    Gen g(11);
    const std::vector<std::string> parts = {"<think>", "</think>", "a", "b c", " ", "\n", "Answer"};
    for (int i = 0; i < 2000; ++i) {
        std::string s;
        const int n = g.integer(0, 10);
        for (int k = 0; k < n; ++k) s += g.pick(parts);
        const auto once = strip_reasoning(s);
        ASSERT_EQ(strip_reasoning(once.final_text).final_text, once.final_text) << s;
    }
}

TEST(Answering, PromptCarriesNoReferenceSolution) {
    const Benchmark b = two_by_three();
    for (const auto& q : b.questions) {
        const auto p = build_answer_prompt(q, mock_config("m"));
        EXPECT_EQ(p.user.find("SENTINEL-REFERENCE"), std::string::npos);
        EXPECT_FALSE(p.system.has_value());
        EXPECT_NE(p.user.find(q.text), std::string::npos);
    }
}

TEST(Answering, RunIsDeterministicAndOrdered) {
    const Benchmark b = two_by_three();
    MockScript s;
    s.add_rule({"Question 1"}, "<think>t</think>A1").add_rule({"Question 2"}, "A2");
    auto run = [&] {
        ChatClient c(mock_config("m"), transport(s));
        std::vector<AnswerRecord> r = run_answers(b, c).records;
        std::vector<json> rows;
        for (auto& x : r) rows.push_back(to_json(x));
        return to_jsonl(rows);
    };
    const std::string first = run();
    EXPECT_EQ(first, run());
    const auto rows = parse_jsonl(first);
    EXPECT_EQ(rows[0]["question_id"], "q1");
    EXPECT_EQ(rows[0]["final_text"], "A1");
    EXPECT_EQ(rows[0]["raw_text"], "<think>t</think>A1");
    EXPECT_EQ(rows[0]["trace_removed"], true);
}

TEST(Answering, TransportFailureRecordedNotThrown) {
    const Benchmark b = two_by_three();
    MockScript s;
    s.add_rule({"Question 1"}, "A1");
    ChatClient c(mock_config("m"), transport(s));
    const auto run = run_answers(b, c);
    ASSERT_EQ(run.failures, std::vector<std::string>{"q2"});
    EXPECT_TRUE(run.records[1].failed);
    EXPECT_FALSE(run.ok());
}

TEST(Answering, RecordsRoundTripJsonl) {
    const auto dir = temp_dir("answers");
    AnswerRecord r;
    r.model = "m";
    r.question_id = "q1";
    r.raw_text = "<think>x</think>y";
    r.final_text = "y";
    r.trace_removed = true;
    save_answers({r}, dir / "a.jsonl");
    const auto back = load_answers(dir / "a.jsonl");
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(to_json(back[0]), to_json(r));
}

// --- grading ----------------------------------------------------------------

namespace {
MockScript scripted_grades(const std::map<std::pair<std::string, std::string>, double>& awards) {
    MockScript s;
    for (const auto& [key, v] : awards)
        s.add_rule({"Question ID: " + key.first + "\n", "Statement ID: " + key.second + "\n"},
                   grade_json(key.second, v, key.second == "s3" ? 2.0 : 1.0));
    return s;
}
std::vector<AnswerRecord> answers_for(const std::string& model, const Benchmark& b) {
    std::vector<AnswerRecord> out;
    for (const auto& q : b.questions) {
        AnswerRecord a;
        a.model = model;
        a.question_id = q.id;
        a.raw_text = a.final_text = "answer to " + q.id;
        out.push_back(a);
    }
    return out;
}
}  // namespace

TEST(Grading, PromptSectionsInFixedOrder) {
    const Benchmark b = two_by_three();
    const auto a = answers_for("m", b);
    const auto p = build_grading_prompt(b.questions[0], a[0], b.questions[0].statements[2]).user;
    const auto q = p.find(kSectionQuestion), r = p.find(kSectionReference), ans = p.find(kSectionAnswer),
               st = p.find(kSectionStatement), mx = p.find(kSectionMaxPoints);
    EXPECT_LT(q, r);
    EXPECT_LT(r, ans);
    EXPECT_LT(ans, st);
    EXPECT_LT(st, mx);
    EXPECT_NE(p.find("maximum points: 2.0"), std::string::npos);
    EXPECT_NE(p.find("SENTINEL-REFERENCE-1"), std::string::npos);
}

TEST(Grading, TwoQuestionsThreeStatementsMatchHandSum) {
    const Benchmark b = two_by_three();
    const std::map<std::pair<std::string, std::string>, double> awards = {
        {{"q1", "s1"}, 1.0}, {{"q1", "s2"}, 0.5}, {{"q1", "s3"}, 1.25},
        {{"q2", "s1"}, 0.0}, {{"q2", "s2"}, 1.0}, {{"q2", "s3"}, 2.0}};
    ChatClient judge(mock_config("judge"), transport(scripted_grades(awards)));
    const GradeBook gb = grade_answer_set(answers_for("m", b), b, judge);
    ASSERT_EQ(gb.entries.size(), 6u);
    Decimal sum;
    for (const auto& e : gb.entries) {
        sum += e.awarded;
        EXPECT_FALSE(e.unparseable);
    }
    EXPECT_EQ(sum, pts(1.0 + 0.5 + 1.25 + 0.0 + 1.0 + 2.0));
    EXPECT_EQ(total_score(gb, b, "m").earned_total, pts(5.75));
}

TEST(Grading, SelfGradingRefusedWithoutOverride) {
    const Benchmark b = two_by_three();
    ChatClient judge(mock_config("m"), transport(MockScript{}));
    try {
        grade_answer_set(answers_for("m", b), b, judge);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("evaluator must differ"), std::string::npos);
    }
    MockScript s;
    s.set_default(grade_json("s1", 1));
    ChatClient judge2(mock_config("m"), transport(s));
    GradingOptions o;
    o.allow_self_grading = true;
    EXPECT_NO_THROW(grade_answer_set({answers_for("m", b)[0]}, b, judge2, o));
}

TEST(Grading, UnparseableAfterRetriesRecordedAsZero) {
    const Benchmark b = two_by_three();
    std::map<std::pair<std::string, std::string>, double> awards;
    for (const auto& q : b.questions)
        for (const auto& s : q.statements) awards[{q.id, s.id}] = 1.0;
    awards.erase({"q2", "s2"});
    MockScript s = scripted_grades(awards);
    s.set_default("I refuse to answer in JSON");
    ChatClient judge(mock_config("judge"), transport(s));
    const GradeBook gb = grade_answer_set(answers_for("m", b), b, judge);
    ASSERT_EQ(gb.entries.size(), 6u);
    const auto* bad = gb.find("m", "q2", "s2");
    ASSERT_NE(bad, nullptr);
    EXPECT_TRUE(bad->unparseable);
    EXPECT_EQ(bad->awarded, Decimal{});
    EXPECT_EQ(bad->parse_retries, 2);
}

TEST(Grading, StrictReminderRecoversOnRetry) {
    const Benchmark b = two_by_three();
    MockScript s;
    s.add_rule({"REMINDER", "Statement ID: s1\n"}, grade_json("s1", 1));
    s.add_rule({"REMINDER", "Statement ID: s2\n"}, grade_json("s2", 1));
    s.add_rule({"REMINDER", "Statement ID: s3\n"}, grade_json("s3", 2, 2));
    s.set_default("prose only");
    ChatClient judge(mock_config("judge"), transport(s));
    const GradeBook gb = grade_answer_set(answers_for("m", b), b, judge);
    for (const auto& e : gb.entries) {
        EXPECT_FALSE(e.unparseable);
        EXPECT_EQ(e.parse_retries, 1);
    }
}

TEST(Grading, ParseGradeClampsAndFlags) {
    const ExpectedStatement exp{"s1", pts(1)};
    auto over = parse_grade(grade_json("s1", 1.5), exp);
    EXPECT_EQ(over.awarded, pts(1));
    EXPECT_TRUE(over.clamped);
    auto under = parse_grade(grade_json("s1", -1), exp);
    EXPECT_EQ(under.awarded, Decimal{});
    EXPECT_TRUE(under.clamped);
    auto fine = parse_grade("Here you go: " + grade_json("s1", 0.37) + " thanks", exp);
    EXPECT_EQ(fine.awarded, pts(0.37));
    EXPECT_FALSE(fine.clamped);
    EXPECT_THROW(parse_grade(grade_json("s2", 1), exp), GradeParseError);
    EXPECT_THROW(parse_grade(R"({"awarded_points":1,"statement_id":"s1","justification":""})", exp), GradeParseError);
    EXPECT_THROW(parse_grade("no json", exp), GradeParseError);
}

TEST(Grading, PropertyAwardsAlwaysWithinBounds) {
    Gen g(5);
    const Benchmark b = two_by_three();
    for (int round = 0; round < 20; ++round) {
        std::map<std::pair<std::string, std::string>, double> awards;
        for (const auto& q : b.questions)
            for (const auto& s : q.statements) awards[{q.id, s.id}] = g.real(-2, 4);
        ChatClient judge(mock_config("judge"), transport(scripted_grades(awards)));
        const GradeBook gb = grade_answer_set(answers_for("m", b), b, judge);
        ASSERT_EQ(gb.entries.size(), b.statement_count());
        for (const auto& e : gb.entries) {
            ASSERT_GE(e.awarded, Decimal{});
            ASSERT_LE(e.awarded, e.max_points);
        }
    }
}

TEST(Grading, NoAnswerGradedZeroWithoutCallingEvaluator) {
    const Benchmark b = two_by_three();
    auto answers = answers_for("m", b);
    answers[0].final_text.clear();
    answers[0].truncated_in_trace = true;
    MockScript s;
    s.set_default(grade_json("s1", 1));
    auto t = transport(s);
    ChatClient judge(mock_config("judge"), t);
    const GradeBook gb = grade_answer_set({answers[0]}, b, judge);
    EXPECT_EQ(t->gauge().total(), 0);
    for (const auto& e : gb.entries) {
        EXPECT_TRUE(e.no_answer);
        EXPECT_EQ(e.awarded, Decimal{});
    }
}

TEST(Grading, RegradingIsByteIdentical) {
    const Benchmark b = load_benchmark(fixtures() / "benchmark.json");
    const auto run = [&] {
        ModelConfig ac = model_config_from_json(load_config_file(fixtures() / "configs" / "model-b.json"));
        ac.endpoint_url = "mock:" + (fixtures() / "mock" / "answer_model-b.json").string();
        ChatClient answerer(ac);
        const auto answers = run_answers(b, answerer).records;
        ModelConfig jc = model_config_from_json(load_config_file(fixtures() / "configs" / "evaluator.json"));
        jc.endpoint_url = "mock:" + (fixtures() / "mock" / "evaluator.json").string();
        ChatClient judge(jc);
        GradingOptions o;
        o.run_id = "fixed";
        return gradebook_to_jsonl(grade_answer_set(answers, b, judge, o));
    };
    const std::string first = run();
    EXPECT_EQ(first, run());
    const GradeBook gb = gradebook_from_rows(parse_jsonl(first));
    EXPECT_EQ(gb.entries.size(), 752u);
    EXPECT_EQ(total_score(gb, b, "model-b").earned_total, pts(399.0));
}

TEST(Grading, GradebookRoundTrip) {
    const GradeBook gb = load_gradebook(fixtures() / "gradebook.jsonl");
    EXPECT_EQ(gb.entries.size(), 1504u);
    EXPECT_EQ(gradebook_to_jsonl(gradebook_from_rows(parse_jsonl(gradebook_to_jsonl(gb)))), gradebook_to_jsonl(gb));
}
