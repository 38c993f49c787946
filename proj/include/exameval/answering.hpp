#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "exameval/benchcore.hpp"
#include "exameval/llmgate.hpp"
#include "exameval/parallel.hpp"

namespace exameval {

struct TracePolicy {
    std::vector<TraceDelimiters> delimiters = {TraceDelimiters{}};
};

struct StrippedAnswer {
    std::string final_text;
    bool trace_removed = false;
    bool truncated = false;
};

/// Removes reasoning segments and keeps only the text after the last closing
/// delimiter. An opening delimiter that is never closed means the model ran
/// out of budget inside its trace: the final text is empty.
///
/// A closing delimiter without a matching opener counts as a trace too (some
/// servers drop the opening tag from the returned content).
inline StrippedAnswer strip_reasoning(std::string_view raw, const TracePolicy& policy = {}) {
    // Position just past the last close delimiter, over all delimiter pairs.
    std::size_t after_last_close = 0;
    bool any_close = false;
    for (const auto& d : policy.delimiters) {
        const auto pos = raw.rfind(d.close);
        if (pos != std::string_view::npos) {
            any_close = true;
            after_last_close = std::max(after_last_close, pos + d.close.size());
        }
    }
    const std::string_view tail = raw.substr(after_last_close);
    for (const auto& d : policy.delimiters) {
        if (tail.find(d.open) != std::string_view::npos) return StrippedAnswer{{}, true, true};
    }
    if (!any_close) return StrippedAnswer{std::string(raw), false, false};
    return StrippedAnswer{std::string(trim(tail)), true, false};
}

struct AnswerRecord {
    std::string model;
    std::string question_id;
    std::string raw_text;
    std::string final_text;
    bool trace_removed = false;
    bool truncated_in_trace = false;
    std::string finish_reason = "stop";
    bool failed = false;
    std::string error;

    /// Nothing gradable was produced.
    bool no_final_answer() const { return failed || truncated_in_trace || trim(final_text).empty(); }
};

inline json to_json(const AnswerRecord& r) {
    json j = {{"model", r.model},
              {"question_id", r.question_id},
              {"raw_text", r.raw_text},
              {"final_text", r.final_text},
              {"trace_removed", r.trace_removed},
              {"truncated_in_trace", r.truncated_in_trace},
              {"finish_reason", r.finish_reason},
              {"failed", r.failed}};
    if (r.failed) j["error"] = r.error;
    return j;
}

inline AnswerRecord answer_record_from_json(const json& j) {
    try {
        AnswerRecord r;
        r.model = j.at("model").get<std::string>();
        r.question_id = j.at("question_id").get<std::string>();
        r.raw_text = j.value("raw_text", std::string{});
        r.final_text = j.value("final_text", std::string{});
        r.trace_removed = j.value("trace_removed", false);
        r.truncated_in_trace = j.value("truncated_in_trace", false);
        r.finish_reason = j.value("finish_reason", std::string("stop"));
        r.failed = j.value("failed", false);
        r.error = j.value("error", std::string{});
        return r;
    } catch (const json::exception& e) {
        throw InputError(std::string("answer record: ") + e.what());
    }
}

inline void save_answers(const std::vector<AnswerRecord>& records, const std::filesystem::path& path) {
    std::vector<json> rows;
    rows.reserve(records.size());
    for (const auto& r : records) rows.push_back(to_json(r));
    write_file(path, to_jsonl(rows));
}

inline std::vector<AnswerRecord> load_answers(const std::filesystem::path& path) {
    std::vector<AnswerRecord> out;
    for (const auto& j : read_jsonl(path)) out.push_back(answer_record_from_json(j));
    return out;
}

/// The answer prompt is the raw question text and nothing else.
inline ChatPrompt build_answer_prompt(const Question& q, const ModelConfig& cfg) {
    return ChatPrompt{cfg.system_prompt, q.text};
}

struct AnswerRun {
    std::vector<AnswerRecord> records;  // benchmark order
    std::vector<std::string> failures;  // question ids

    bool ok() const { return failures.empty(); }
};

/// Answers every question once. Transport failures are recorded on the
/// record (failed = true) and listed in the run summary; the run continues.
inline AnswerRun run_answers(const Benchmark& b, ChatClient& client) {
    const ModelConfig& cfg = client.config();
    const TracePolicy policy{cfg.trace_delimiters};
    AnswerRun run;
    run.records.resize(b.questions.size());
    parallel_for(b.questions.size(), cfg.concurrency_limit, [&](std::size_t i) {
        const Question& q = b.questions[i];
        AnswerRecord& rec = run.records[i];
        rec.model = cfg.name;
        rec.question_id = q.id;
        try {
            const ChatExchange ex = client.complete(build_answer_prompt(q, cfg));
            rec.raw_text = ex.response_text;
            rec.finish_reason = to_string(ex.finish_reason);
            const StrippedAnswer s = strip_reasoning(rec.raw_text, policy);
            rec.final_text = s.final_text;
            rec.trace_removed = s.trace_removed;
            rec.truncated_in_trace = s.truncated;
        } catch (const Error& e) {
            rec.failed = true;
            rec.finish_reason = to_string(FinishReason::error);
            rec.error = e.what();
        }
    });
    for (const auto& r : run.records)
        if (r.failed) run.failures.push_back(r.question_id);
    return run;
}

}  // namespace exameval
