#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "exameval/decimal.hpp"
#include "exameval/error.hpp"
#include "exameval/io.hpp"

namespace exameval {

/// Category keys are open-ended strings; these six ship as the default set.
inline const std::vector<std::string>& default_categories() {
    static const std::vector<std::string> cats = {"corporate_tax", "fiscal_code", "fundamentals",
                                                  "income_tax",    "partnerships", "vat"};
    return cats;
}

/// One atomic graded statement of a reference solution.
struct Statement {
    std::string id;
    std::string text;
    Decimal max_points;
};

struct Question {
    std::string id;
    std::string exam;
    std::string semester;
    std::string category;
    std::string text;
    std::string reference_solution;
    std::vector<Statement> statements;
    bool modality_excluded = false;

    /// M_q: sum of statement maxima.
    Decimal max_score() const {
        Decimal total;
        for (const auto& s : statements) total += s.max_points;
        return total;
    }

    const Statement* find_statement(std::string_view statement_id) const {
        for (const auto& s : statements)
            if (s.id == statement_id) return &s;
        return nullptr;
    }
};

struct Benchmark {
    std::string name;
    std::vector<Question> questions;
    std::optional<Decimal> declared_total_max;

    Decimal total_max() const {
        Decimal total;
        for (const auto& q : questions) total += q.max_score();
        return total;
    }

    const Question* find_question(std::string_view question_id) const {
        for (const auto& q : questions)
            if (q.id == question_id) return &q;
        return nullptr;
    }

    std::size_t statement_count() const {
        std::size_t n = 0;
        for (const auto& q : questions) n += q.statements.size();
        return n;
    }
};

struct CategoryTotals {
    std::size_t questions = 0;
    std::size_t statements = 0;
    Decimal max_points;
    friend bool operator==(const CategoryTotals&, const CategoryTotals&) = default;
};

struct ValidationReport {
    std::vector<std::string> errors;
    std::vector<std::string> warnings;
    std::size_t questions = 0;
    std::size_t statements = 0;
    Decimal max_points;
    std::map<std::string, CategoryTotals> per_category;

    bool ok() const { return errors.empty(); }
    friend bool operator==(const ValidationReport&, const ValidationReport&) = default;
};

/// Checks every data-model invariant. Pure: never mutates, never throws on
/// bad data (findings go into the report).
inline ValidationReport validate(const Benchmark& b) {
    ValidationReport r;
    if (b.questions.empty()) r.errors.push_back("no questions");

    std::set<std::string> qids;
    for (std::size_t qi = 0; qi < b.questions.size(); ++qi) {
        const Question& q = b.questions[qi];
        const std::string where = "questions[" + std::to_string(qi) + "] (" + q.id + ")";
        if (q.id.empty()) r.errors.push_back(where + ": empty question id");
        if (!qids.insert(q.id).second) r.errors.push_back(where + ": duplicate id '" + q.id + "'");
        if (q.category.empty()) r.errors.push_back(where + ": missing category");
        if (q.text.empty()) r.warnings.push_back(where + ": empty question text");
        if (q.reference_solution.empty()) r.warnings.push_back(where + ": empty reference solution");
        if (q.statements.empty()) r.errors.push_back(where + ": question has no statements");

        std::set<std::string> sids;
        for (std::size_t si = 0; si < q.statements.size(); ++si) {
            const Statement& s = q.statements[si];
            const std::string swhere = where + ".statements[" + std::to_string(si) + "] (" + s.id + ")";
            if (s.id.empty()) r.errors.push_back(swhere + ": empty statement id");
            if (!sids.insert(s.id).second)
                r.errors.push_back(swhere + ": duplicate id '" + s.id + "' within question");
            if (s.max_points <= Decimal{})
                r.errors.push_back(swhere + ": max_points must be > 0, got " + s.max_points.to_string());
            else if (!s.max_points.is_half_multiple())
                r.errors.push_back(swhere + ": max_points " + s.max_points.to_string() +
                                   " violates half-point granularity");
        }

        ++r.questions;
        r.statements += q.statements.size();
        const Decimal mq = q.max_score();
        r.max_points += mq;
        auto& cat = r.per_category[q.category];
        ++cat.questions;
        cat.statements += q.statements.size();
        cat.max_points += mq;
    }

    if (b.declared_total_max && *b.declared_total_max != r.max_points)
        r.errors.push_back("declared_total_max " + b.declared_total_max->to_string() +
                           " differs from sum of statement maxima " + r.max_points.to_string());
    for (const auto& [cat, totals] : r.per_category) {
        const auto& defaults = default_categories();
        if (std::find(defaults.begin(), defaults.end(), cat) == defaults.end() && !cat.empty())
            r.warnings.push_back("non-default category '" + cat + "'");
    }
    return r;
}

inline json to_json(const ValidationReport& r) {
    json per = json::object();
    for (const auto& [cat, t] : r.per_category)
        per[cat] = {{"questions", t.questions}, {"statements", t.statements},
                    {"max_points", decimal_to_json(t.max_points)}};
    return {{"ok", r.ok()},
            {"errors", r.errors},
            {"warnings", r.warnings},
            {"totals",
             {{"questions", r.questions},
              {"statements", r.statements},
              {"max_points", decimal_to_json(r.max_points)},
              {"per_category", per}}}};
}

namespace detail {

inline const json& require(const json& obj, const char* key, const std::string& path) {
    if (!obj.is_object()) throw LoadError(path + ": expected object");
    auto it = obj.find(key);
    if (it == obj.end()) throw LoadError(path + "." + key + ": missing required field");
    return *it;
}

inline std::string require_string(const json& obj, const char* key, const std::string& path) {
    const json& v = require(obj, key, path);
    if (!v.is_string()) throw LoadError(path + "." + key + ": expected string");
    return v.get<std::string>();
}

inline std::string optional_string(const json& obj, const char* key, const std::string& path) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return {};
    if (!it->is_string()) throw LoadError(path + "." + key + ": expected string");
    return it->get<std::string>();
}

inline Decimal require_points(const json& obj, const char* key, const std::string& path) {
    const json& v = require(obj, key, path);
    if (!v.is_number()) throw LoadError(path + "." + key + ": expected number");
    try {
        return decimal_from_json(v);
    } catch (const Error& e) {
        throw LoadError(path + "." + key + ": " + e.what());
    }
}

}  // namespace detail

/// Parses the benchmark JSON document. Schema errors throw LoadError naming
/// the JSON path; invariant violations (duplicate ids, bad points) throw
/// ValidationError with every finding joined.
inline Benchmark parse_benchmark(const json& doc, bool require_valid = true) {
    using namespace detail;
    if (!doc.is_object()) throw LoadError("$: expected object");
    Benchmark b;
    b.name = optional_string(doc, "name", "$");
    if (auto it = doc.find("declared_total_max"); it != doc.end() && !it->is_null())
        b.declared_total_max = require_points(doc, "declared_total_max", "$");
    const json& qs = require(doc, "questions", "$");
    if (!qs.is_array()) throw LoadError("$.questions: expected array");
    for (std::size_t qi = 0; qi < qs.size(); ++qi) {
        const std::string qpath = "$.questions[" + std::to_string(qi) + "]";
        const json& jq = qs[qi];
        Question q;
        q.id = require_string(jq, "id", qpath);
        q.exam = optional_string(jq, "exam", qpath);
        q.semester = optional_string(jq, "semester", qpath);
        q.category = require_string(jq, "category", qpath);
        q.text = require_string(jq, "text", qpath);
        q.reference_solution = require_string(jq, "reference_solution", qpath);
        if (auto it = jq.find("modality_excluded"); it != jq.end() && !it->is_null()) {
            if (!it->is_boolean()) throw LoadError(qpath + ".modality_excluded: expected boolean");
            q.modality_excluded = it->get<bool>();
        }
        const json& ss = require(jq, "statements", qpath);
        if (!ss.is_array()) throw LoadError(qpath + ".statements: expected array");
        for (std::size_t si = 0; si < ss.size(); ++si) {
            const std::string spath = qpath + ".statements[" + std::to_string(si) + "]";
            Statement s;
            s.id = require_string(ss[si], "id", spath);
            s.text = require_string(ss[si], "text", spath);
            s.max_points = require_points(ss[si], "max_points", spath);
            q.statements.push_back(std::move(s));
        }
        b.questions.push_back(std::move(q));
    }
    if (require_valid) {
        const ValidationReport r = validate(b);
        if (!r.ok()) {
            std::string msg = "benchmark failed validation:";
            for (const auto& e : r.errors) msg += "\n  " + e;
            throw ValidationError(msg);
        }
    }
    return b;
}

inline Benchmark load_benchmark(const std::filesystem::path& path, bool require_valid = true) {
    const std::string text = read_file(path);
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw LoadError(path.string() + ": not valid JSON: " + e.what());
    }
    return parse_benchmark(doc, require_valid);
}

inline json to_json(const Benchmark& b) {
    json qs = json::array();
    for (const auto& q : b.questions) {
        json ss = json::array();
        for (const auto& s : q.statements)
            ss.push_back({{"id", s.id}, {"text", s.text}, {"max_points", decimal_to_json(s.max_points)}});
        json jq = {{"id", q.id},
                   {"exam", q.exam},
                   {"semester", q.semester},
                   {"category", q.category},
                   {"text", q.text},
                   {"reference_solution", q.reference_solution},
                   {"modality_excluded", q.modality_excluded},
                   {"statements", std::move(ss)}};
        qs.push_back(std::move(jq));
    }
    json doc = {{"name", b.name}, {"questions", std::move(qs)}};
    if (b.declared_total_max) doc["declared_total_max"] = decimal_to_json(*b.declared_total_max);
    return doc;
}

inline void save_benchmark(const Benchmark& b, const std::filesystem::path& path) {
    write_file(path, to_json(b).dump(2) + "\n");
}

inline bool operator==(const Statement& a, const Statement& b) {
    return a.id == b.id && a.text == b.text && a.max_points == b.max_points;
}
inline bool operator==(const Question& a, const Question& b) {
    return a.id == b.id && a.exam == b.exam && a.semester == b.semester && a.category == b.category &&
           a.text == b.text && a.reference_solution == b.reference_solution &&
           a.modality_excluded == b.modality_excluded && a.statements == b.statements;
}
inline bool operator==(const Benchmark& a, const Benchmark& b) {
    return a.name == b.name && a.declared_total_max == b.declared_total_max && a.questions == b.questions;
}

}  // namespace exameval
