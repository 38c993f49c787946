#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "exameval/benchcore.hpp"
#include "exameval/grading.hpp"

namespace exameval {

struct QuestionScore {
    std::string question_id;
    std::string category;
    Decimal earned;  // A_q
    Decimal max;     // M_q
    double pct = 0;
};

struct CategoryScore {
    Decimal earned;  // A_c
    Decimal max;     // M_c
    double pct = 0;
};

struct ModelScore {
    std::string model;
    Decimal earned_total;  // A_total
    Decimal max_total;     // M_total
    double score_pct = 0;
    std::map<std::string, CategoryScore> per_category;
    std::vector<QuestionScore> per_question;  // benchmark order
};

/// Renders a percentage with fixed decimals; the only place rounding happens.
inline std::string render_pct(double pct, int decimals = 2) { return fmt::format("{:.{}f}", pct, decimals); }

/// Keyed view over a GradeBook for O(1) lookups.
class GradeIndex {
public:
    explicit GradeIndex(const GradeBook& gb) {
        for (const auto& e : gb.entries) {
            auto [it, inserted] = index_.emplace(key(e.model, e.question_id, e.statement_id), &e);
            if (!inserted)
                throw InputError("gradebook has two entries for " + e.model + "/" + e.question_id + "/" +
                                 e.statement_id);
        }
    }

    const GradedStatement* find(const std::string& model, const std::string& qid, const std::string& sid) const {
        auto it = index_.find(key(model, qid, sid));
        return it == index_.end() ? nullptr : it->second;
    }

private:
    static std::string key(const std::string& m, const std::string& q, const std::string& s) {
        return m + '\x1f' + q + '\x1f' + s;
    }
    std::map<std::string, const GradedStatement*> index_;
};

inline QuestionScore question_score(const GradeIndex& idx, const Question& q, const std::string& model) {
    QuestionScore qs;
    qs.question_id = q.id;
    qs.category = q.category;
    for (const auto& s : q.statements) {
        const GradedStatement* g = idx.find(model, q.id, s.id);
        if (!g) throw IncompleteError("gradebook has no entry for (" + model + ", " + q.id + ", " + s.id + ")");
        qs.earned += g->awarded;
        qs.max += s.max_points;
    }
    qs.pct = percent_of(qs.earned, qs.max);
    return qs;
}

inline QuestionScore question_score(const GradeBook& gb, const Question& q, const std::string& model) {
    return question_score(GradeIndex(gb), q, model);
}

/// Totals, normalized score and the category decomposition for one model.
inline ModelScore total_score(const GradeIndex& idx, const Benchmark& b, const std::string& model) {
    ModelScore ms;
    ms.model = model;
    for (const auto& q : b.questions) {
        if (q.category.empty()) throw InputError("question '" + q.id + "' is not in any category");
        QuestionScore qs = question_score(idx, q, model);
        ms.earned_total += qs.earned;
        ms.max_total += qs.max;
        auto& c = ms.per_category[q.category];
        c.earned += qs.earned;
        c.max += qs.max;
        ms.per_question.push_back(std::move(qs));
    }
    ms.score_pct = percent_of(ms.earned_total, ms.max_total);
    for (auto& [_, c] : ms.per_category) c.pct = percent_of(c.earned, c.max);
    return ms;
}

inline ModelScore total_score(const GradeBook& gb, const Benchmark& b, const std::string& model) {
    return total_score(GradeIndex(gb), b, model);
}

/// Scores every model in the GradeBook, in first-appearance order.
inline std::vector<ModelScore> score_all(const GradeBook& gb, const Benchmark& b) {
    const GradeIndex idx(gb);
    std::vector<ModelScore> out;
    for (const auto& m : gb.models()) out.push_back(total_score(idx, b, m));
    return out;
}

inline json to_json(const ModelScore& s) {
    json cats = json::object();
    for (const auto& [c, v] : s.per_category)
        cats[c] = {{"A_c", decimal_to_json(v.earned)}, {"M_c", decimal_to_json(v.max)}, {"pct", std::stod(render_pct(v.pct))}};
    json qs = json::array();
    for (const auto& q : s.per_question)
        qs.push_back({{"question_id", q.question_id},
                      {"category", q.category},
                      {"A_q", decimal_to_json(q.earned)},
                      {"M_q", decimal_to_json(q.max)},
                      {"pct", std::stod(render_pct(q.pct))}});
    return {{"model", s.model},
            {"A_total", decimal_to_json(s.earned_total)},
            {"M_total", decimal_to_json(s.max_total)},
            {"score_pct", std::stod(render_pct(s.score_pct))},
            {"per_category", cats},
            {"per_question", qs}};
}

/// CSV with columns model, A_total, M_total, score_pct, then an
/// (A, M, pct) triple per category in sorted category order.
inline std::string scores_to_csv(const std::vector<ModelScore>& scores) {
    std::vector<std::string> cats;
    for (const auto& s : scores)
        for (const auto& [c, _] : s.per_category)
            if (std::find(cats.begin(), cats.end(), c) == cats.end()) cats.push_back(c);
    std::sort(cats.begin(), cats.end());
    std::string out = "model,A_total,M_total,score_pct";
    for (const auto& c : cats) out += "," + c + "_A," + c + "_M," + c + "_pct";
    out += "\n";
    for (const auto& s : scores) {
        out += csv_escape(s.model) + "," + s.earned_total.to_string(1) + "," + s.max_total.to_string(1) + "," +
               render_pct(s.score_pct);
        for (const auto& c : cats) {
            auto it = s.per_category.find(c);
            if (it == s.per_category.end()) out += ",,,";
            else
                out += "," + it->second.earned.to_string(1) + "," + it->second.max.to_string(1) + "," +
                       render_pct(it->second.pct);
        }
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Student comparison
// ---------------------------------------------------------------------------

/// One row of the optional student statistics file.
///
/// unit = points: raw exam points (lowest/average/highest) for one exam.
/// unit = pct:    pre-aggregated category percentages, used as-is.
struct StudentStatsRow {
    std::string category;
    std::string exam;
    std::optional<double> n_students;
    std::optional<double> lowest;
    std::optional<double> average;
    std::optional<double> highest;
    bool is_pct = false;
};

struct StudentStats {
    std::vector<StudentStatsRow> rows;
};

/// Parses the student CSV: header `category,exam,n_students,lowest,average,highest[,unit]`.
/// Empty cells and "N/A" mean unavailable.
inline StudentStats parse_student_stats_csv(std::string_view text) {
    const auto table = parse_csv(text);
    if (table.empty()) throw InputError("student stats: empty file");
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < table[0].size(); ++i) col[std::string(trim(table[0][i]))] = i;
    for (const char* required : {"category", "exam", "lowest", "average"})
        if (!col.count(required)) throw InputError(std::string("student stats: missing column '") + required + "'");
    auto cell = [&](const std::vector<std::string>& row, const char* name) -> std::string {
        auto it = col.find(name);
        if (it == col.end() || it->second >= row.size()) return {};
        return std::string(trim(row[it->second]));
    };
    auto number = [&](const std::vector<std::string>& row, const char* name) -> std::optional<double> {
        const std::string v = cell(row, name);
        if (v.empty() || v == "N/A" || v == "NA") return std::nullopt;
        return Decimal::parse(v).to_double();
    };
    StudentStats stats;
    for (std::size_t r = 1; r < table.size(); ++r) {
        const auto& row = table[r];
        StudentStatsRow s;
        s.category = cell(row, "category");
        s.exam = cell(row, "exam");
        s.n_students = number(row, "n_students");
        s.lowest = number(row, "lowest");
        s.average = number(row, "average");
        s.highest = number(row, "highest");
        const std::string unit = cell(row, "unit");
        if (!unit.empty() && unit != "points" && unit != "pct")
            throw InputError("student stats row " + std::to_string(r) + ": unit must be 'points' or 'pct'");
        s.is_pct = unit == "pct";
        if (s.category.empty()) throw InputError("student stats row " + std::to_string(r) + ": missing category");
        stats.rows.push_back(std::move(s));
    }
    return stats;
}

struct StudentComparison {
    std::string category;
    std::optional<double> student_low_pct;
    std::optional<double> student_avg_pct;
    double model_pct = 0;
    Decimal model_earned;
    double denominator = 0;
    bool above_lowest = false;
    bool below_lowest = false;
    bool below_average = false;
    std::vector<std::string> normalization_notes;
};

/// Category-level model vs student percentages.
///
/// For an exam that contains modality-excluded questions, the model earns 0
/// on those questions and the exam's reference maximum becomes
/// max(benchmark maximum of the exam, highest observed student score).
inline std::vector<StudentComparison> student_comparison(const ModelScore& score, const Benchmark& b,
                                                         const StudentStats& stats) {
    std::map<std::string, const QuestionScore*> by_id;
    for (const auto& q : score.per_question) by_id[q.question_id] = &q;

    struct ExamAgg {
        Decimal earned;
        Decimal max;
        bool has_excluded = false;
    };
    std::map<std::string, std::map<std::string, ExamAgg>> exams;  // category -> exam -> agg
    for (const auto& q : b.questions) {
        auto it = by_id.find(q.id);
        if (it == by_id.end()) throw IncompleteError("model score lacks question '" + q.id + "'");
        ExamAgg& e = exams[q.category][q.exam];
        e.max += q.max_score();
        if (q.modality_excluded) e.has_excluded = true;
        else e.earned += it->second->earned;
    }

    std::vector<StudentComparison> out;
    for (const auto& [cat, exam_map] : exams) {
        StudentComparison sc;
        sc.category = cat;
        double denom = 0;
        double low = 0;
        bool have_low = false;
        double avg_weighted = 0;
        double avg_weight = 0;
        for (const auto& [exam, agg] : exam_map) {
            const StudentStatsRow* row = nullptr;
            for (const auto& r : stats.rows)
                if (!r.is_pct && r.category == cat && r.exam == exam) row = &r;
            double exam_denom = agg.max.to_double();
            if (agg.has_excluded) {
                if (row && row->highest && *row->highest > exam_denom) {
                    sc.normalization_notes.push_back(fmt::format(
                        "{}: modality-excluded questions; reference max raised from {} to highest student score {}",
                        exam, agg.max.to_string(1), *row->highest));
                    exam_denom = *row->highest;
                } else {
                    sc.normalization_notes.push_back(
                        exam + ": modality-excluded questions scored 0; benchmark maximum kept");
                }
            }
            sc.model_earned += agg.earned;
            denom += exam_denom;
            if (row && row->lowest) {
                const double p = 100.0 * *row->lowest / exam_denom;
                low = have_low ? std::min(low, p) : p;
                have_low = true;
            }
            if (row && row->average) {
                const double w = row->n_students.value_or(1.0);
                avg_weighted += w * 100.0 * *row->average / exam_denom;
                avg_weight += w;
            }
        }
        sc.denominator = denom;
        sc.model_pct = denom > 0 ? 100.0 * sc.model_earned.to_double() / denom : 0.0;
        if (have_low) sc.student_low_pct = low;
        if (avg_weight > 0) sc.student_avg_pct = avg_weighted / avg_weight;
        for (const auto& r : stats.rows)
            if (r.is_pct && r.category == cat) {
                if (r.lowest) sc.student_low_pct = *r.lowest;
                if (r.average) sc.student_avg_pct = *r.average;
                sc.normalization_notes.push_back("student percentages taken pre-aggregated");
            }
        if (!sc.student_low_pct && !sc.student_avg_pct) sc.normalization_notes.push_back("student statistics N/A");
        if (sc.student_low_pct) {
            sc.above_lowest = sc.model_pct > *sc.student_low_pct;
            sc.below_lowest = sc.model_pct < *sc.student_low_pct;
        }
        if (sc.student_avg_pct) sc.below_average = sc.model_pct < *sc.student_avg_pct;
        out.push_back(std::move(sc));
    }
    return out;
}

inline json to_json(const StudentComparison& c) {
    auto opt = [](const std::optional<double>& v) {
        return v ? json(std::stod(render_pct(*v))) : json("N/A");
    };
    return {{"category", c.category},
            {"model_pct", std::stod(render_pct(c.model_pct))},
            {"student_low_pct", opt(c.student_low_pct)},
            {"student_avg_pct", opt(c.student_avg_pct)},
            {"above_lowest", c.above_lowest},
            {"below_lowest", c.below_lowest},
            {"below_average", c.below_average},
            {"normalization_notes", c.normalization_notes}};
}

}  // namespace exameval
