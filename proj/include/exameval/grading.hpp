#pragma once

#include <algorithm>
#include <filesystem>
#include <set>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "exameval/answering.hpp"
#include "exameval/benchcore.hpp"
#include "exameval/llmgate.hpp"

namespace exameval {

struct GradedStatement {
    std::string model;
    std::string question_id;
    std::string statement_id;
    Decimal awarded;
    Decimal max_points;
    std::string justification;
    bool clamped = false;
    int parse_retries = 0;
    bool unparseable = false;
    /// The answer had no gradable final text (failed, or truncated in trace).
    bool no_answer = false;
    std::vector<std::string> warnings;
};

struct GradeBook {
    std::vector<GradedStatement> entries;
    std::string evaluator_model;
    std::string run_id;

    const GradedStatement* find(std::string_view model, std::string_view question_id,
                                std::string_view statement_id) const {
        for (const auto& e : entries)
            if (e.model == model && e.question_id == question_id && e.statement_id == statement_id) return &e;
        return nullptr;
    }

    /// Distinct models in first-appearance order.
    std::vector<std::string> models() const {
        std::vector<std::string> out;
        for (const auto& e : entries)
            if (std::find(out.begin(), out.end(), e.model) == out.end()) out.push_back(e.model);
        return out;
    }
};

inline constexpr const char* kSectionQuestion = "### QUESTION";
inline constexpr const char* kSectionReference = "### REFERENCE SOLUTION";
inline constexpr const char* kSectionAnswer = "### MODEL ANSWER";
inline constexpr const char* kSectionStatement = "### STATEMENT TO GRADE";
inline constexpr const char* kSectionMaxPoints = "### MAXIMUM POINTS";

inline constexpr const char* kGradingInstructions =
    "You are an examiner grading a written exam answer against the official reference solution.\n"
    "Grade exactly one statement of the reference solution. Judge semantic and legal equivalence, not wording.\n"
    "Award full points if the substance of the statement is correctly present in the answer, partial points if\n"
    "it is only partly correct or incomplete (for example the right qualification without the required\n"
    "statutory citation), and 0 if it is missing or wrong. Awarded points must lie between 0 and the\n"
    "maximum points of the statement.\n"
    "Respond with a single JSON object and nothing else:\n"
    "{\"awarded_points\": <number>, \"max_points\": <number>, \"statement_id\": \"<id>\", "
    "\"justification\": \"<one sentence>\"}";

inline constexpr const char* kStrictReminder =
    "\n\nREMINDER: your previous reply could not be parsed. Output ONLY the JSON object with the keys "
    "awarded_points, max_points, statement_id and justification. No prose, no code fences.";

/// Renders maximum points with at least one decimal ("1.0", "2.5").
inline std::string render_points(Decimal d) { return d.to_string(1); }

/// Grading prompt for one (question, statement) pair. Sections appear in a
/// fixed order: question, reference solution, final answer, statement, max.
inline ChatPrompt build_grading_prompt(const Question& q, const AnswerRecord& answer, const Statement& s) {
    if (answer.question_id != q.id)
        throw InputError("answer for '" + answer.question_id + "' passed with question '" + q.id + "'");
    std::string user;
    user += kGradingInstructions;
    user += "\n\n";
    user += kSectionQuestion;
    user += "\nQuestion ID: " + q.id + "\n" + q.text + "\n\n";
    user += kSectionReference;
    user += "\n" + q.reference_solution + "\n\n";
    user += kSectionAnswer;
    user += "\n" + answer.final_text + "\n\n";
    user += kSectionStatement;
    user += "\nStatement ID: " + s.id + "\n" + s.text + "\n\n";
    user += kSectionMaxPoints;
    user += "\nmaximum points: " + render_points(s.max_points) + "\n";
    return ChatPrompt{std::nullopt, std::move(user)};
}

/// First balanced {...} object in `text`, honoring JSON string escapes.
inline std::optional<std::string> extract_json_object(std::string_view text) {
    for (std::size_t start = text.find('{'); start != std::string_view::npos; start = text.find('{', start + 1)) {
        int depth = 0;
        bool in_string = false;
        bool escaped = false;
        for (std::size_t i = start; i < text.size(); ++i) {
            const char c = text[i];
            if (in_string) {
                if (escaped) escaped = false;
                else if (c == '\\') escaped = true;
                else if (c == '"') in_string = false;
                continue;
            }
            if (c == '"') in_string = true;
            else if (c == '{') ++depth;
            else if (c == '}' && --depth == 0) {
                std::string candidate(text.substr(start, i - start + 1));
                if (json::accept(candidate)) return candidate;
                break;
            }
        }
    }
    return std::nullopt;
}

struct ExpectedStatement {
    std::string statement_id;
    Decimal max_points;
};

/// Parses one evaluator reply. Awards outside [0, max] are clamped and
/// flagged; a statement id mismatch or missing field throws GradeParseError.
inline GradedStatement parse_grade(std::string_view reply, const ExpectedStatement& expected) {
    const auto obj_text = extract_json_object(reply);
    if (!obj_text) throw GradeParseError("no JSON object in evaluator reply");
    const json j = json::parse(*obj_text);
    for (const char* key : {"awarded_points", "statement_id", "justification"})
        if (!j.contains(key)) throw GradeParseError(std::string("evaluator reply missing '") + key + "'");

    GradedStatement g;
    const json& sid = j["statement_id"];
    g.statement_id = sid.is_string() ? sid.get<std::string>() : sid.dump();
    if (g.statement_id != expected.statement_id)
        throw GradeParseError("statement_id mismatch: expected '" + expected.statement_id + "', got '" +
                              g.statement_id + "'");
    try {
        g.awarded = decimal_from_json(j["awarded_points"]);
    } catch (const Error& e) {
        throw GradeParseError(std::string("awarded_points: ") + e.what());
    }
    if (!j["justification"].is_string() || trim(j["justification"].get<std::string>()).empty())
        throw GradeParseError("justification must be a non-empty string");
    g.justification = j["justification"].get<std::string>();

    g.max_points = expected.max_points;
    if (auto it = j.find("max_points"); it != j.end()) {
        try {
            const Decimal reported = decimal_from_json(*it);
            if (reported != expected.max_points)
                g.warnings.push_back("evaluator reported max_points " + reported.to_string() + ", benchmark has " +
                                     expected.max_points.to_string());
        } catch (const Error&) {
            g.warnings.push_back("evaluator max_points unreadable");
        }
    }
    if (g.awarded < Decimal{}) {
        g.awarded = Decimal{};
        g.clamped = true;
    } else if (g.awarded > g.max_points) {
        g.awarded = g.max_points;
        g.clamped = true;
    }
    return g;
}

inline json to_json(const GradedStatement& g, const GradeBook& book) {
    json j = {{"run_id", book.run_id},
              {"evaluator", book.evaluator_model},
              {"model", g.model},
              {"question_id", g.question_id},
              {"statement_id", g.statement_id},
              {"awarded", decimal_to_json(g.awarded)},
              {"max_points", decimal_to_json(g.max_points)},
              {"justification", g.justification},
              {"clamped", g.clamped},
              {"parse_retries", g.parse_retries},
              {"unparseable", g.unparseable},
              {"no_answer", g.no_answer}};
    if (!g.warnings.empty()) j["warnings"] = g.warnings;
    return j;
}

inline std::string gradebook_to_jsonl(const GradeBook& gb) {
    std::vector<json> rows;
    rows.reserve(gb.entries.size());
    for (const auto& e : gb.entries) rows.push_back(to_json(e, gb));
    return to_jsonl(rows);
}

inline void save_gradebook(const GradeBook& gb, const std::filesystem::path& path) {
    write_file(path, gradebook_to_jsonl(gb));
}

inline GradeBook gradebook_from_rows(const std::vector<json>& rows) {
    GradeBook gb;
    for (const auto& j : rows) {
        try {
            GradedStatement g;
            g.model = j.at("model").get<std::string>();
            g.question_id = j.at("question_id").get<std::string>();
            g.statement_id = j.at("statement_id").get<std::string>();
            g.awarded = decimal_from_json(j.at("awarded"));
            g.max_points = decimal_from_json(j.at("max_points"));
            g.justification = j.value("justification", std::string{});
            g.clamped = j.value("clamped", false);
            g.parse_retries = j.value("parse_retries", 0);
            g.unparseable = j.value("unparseable", false);
            g.no_answer = j.value("no_answer", false);
            if (j.contains("warnings")) g.warnings = j["warnings"].get<std::vector<std::string>>();
            if (g.awarded < Decimal{} || g.awarded > g.max_points)
                throw InputError("gradebook entry " + g.model + "/" + g.question_id + "/" + g.statement_id +
                                 ": awarded outside [0, max_points]");
            if (gb.run_id.empty()) gb.run_id = j.value("run_id", std::string{});
            if (gb.evaluator_model.empty()) gb.evaluator_model = j.value("evaluator", std::string{});
            gb.entries.push_back(std::move(g));
        } catch (const json::exception& e) {
            throw InputError(std::string("gradebook row: ") + e.what());
        }
    }
    return gb;
}

inline GradeBook load_gradebook(const std::filesystem::path& path) { return gradebook_from_rows(read_jsonl(path)); }

struct GradingOptions {
    int parse_retry_budget = 2;
    bool allow_self_grading = false;
    std::string run_id;
};

/// Grades every statement of every answered question against the evaluator.
/// Entries come out in (answer order, statement order), independent of the
/// order in which concurrent requests finish.
inline GradeBook grade_answer_set(const std::vector<AnswerRecord>& answers, const Benchmark& b,
                                  ChatClient& evaluator, const GradingOptions& opts = {}) {
    const std::string& evaluator_name = evaluator.config().name;
    if (!opts.allow_self_grading)
        for (const auto& a : answers)
            if (a.model == evaluator_name)
                throw ConfigError("evaluator must differ from the evaluated model ('" + a.model + "')");

    struct Job {
        const Question* q;
        const AnswerRecord* a;
        const Statement* s;
    };
    std::vector<Job> jobs;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& a : answers) {
        const Question* q = b.find_question(a.question_id);
        if (!q) throw InputError("answer references unknown question '" + a.question_id + "'");
        if (!seen.emplace(a.model, a.question_id).second)
            throw InputError("duplicate answer for " + a.model + "/" + a.question_id);
        for (const auto& s : q->statements) jobs.push_back(Job{q, &a, &s});
    }

    GradeBook gb;
    gb.evaluator_model = evaluator_name;
    gb.run_id = opts.run_id;
    gb.entries.resize(jobs.size());
    parallel_for(jobs.size(), evaluator.config().concurrency_limit, [&](std::size_t i) {
        const Job& job = jobs[i];
        GradedStatement& out = gb.entries[i];
        const ExpectedStatement expected{job.s->id, job.s->max_points};
        auto fill_zero = [&](std::string why) {
            out.awarded = Decimal{};
            out.max_points = job.s->max_points;
            out.justification = std::move(why);
        };
        if (job.a->no_final_answer()) {
            fill_zero(job.a->failed ? "no answer: answering request failed"
                                    : (job.a->truncated_in_trace ? "no final answer: output truncated inside reasoning trace"
                                                                 : "empty final answer"));
            out.no_answer = true;
        } else {
            const ChatPrompt base = build_grading_prompt(*job.q, *job.a, *job.s);
            std::string last_problem;
            bool done = false;
            for (int attempt = 0; attempt <= opts.parse_retry_budget && !done; ++attempt) {
                ChatPrompt p = base;
                if (attempt > 0) p.user += kStrictReminder;
                try {
                    const ChatExchange ex = evaluator.complete(p);
                    out = parse_grade(ex.response_text, expected);
                    out.parse_retries = attempt;
                    done = true;
                } catch (const GradeParseError& e) {
                    last_problem = e.what();
                } catch (const json::exception& e) {
                    last_problem = e.what();
                } catch (const Error& e) {
                    last_problem = e.what();
                    break;  // transport problems are not retried here; the client already did
                }
            }
            if (!done) {
                fill_zero("unparseable evaluator output: " + last_problem);
                out.unparseable = true;
                out.parse_retries = opts.parse_retry_budget;
            }
        }
        out.model = job.a->model;
        out.question_id = job.q->id;
        out.statement_id = job.s->id;
    });
    return gb;
}

}  // namespace exameval
