#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "exameval/benchcore.hpp"
#include "exameval/grading.hpp"
#include "exameval/scorebook.hpp"
#include "exameval/statlab.hpp"

namespace exameval {

inline std::string category_label(const std::string& key) {
    static const std::map<std::string, std::string> labels = {
        {"corporate_tax", "Corporate tax"},
        {"fiscal_code", "Fiscal code"},
        {"fundamentals", "Fundamentals of tax law"},
        {"income_tax", "Income tax"},
        {"partnerships", "Taxation of partnerships"},
        {"vat", "Value-added tax (VAT)"},
    };
    auto it = labels.find(key);
    return it == labels.end() ? key : it->second;
}

struct Table2Row {
    std::string model;
    BootstrapSummary boot;
    Decimal earned;
    std::optional<PermutationResult> vs_reference;  // BH-adjusted over the family
};

struct Table2 {
    std::string reference;
    Decimal total_max;
    std::vector<Table2Row> rows;
};

struct TableOptions {
    int B = 1000;
    int n_perm = 10000;
    Seed seed;
    PermutationMode mode = PermutationMode::automatic;
};

/// Overall scores: observed percentage with bootstrap sd and interval,
/// total points, and the paired test against the reference model with BH
/// adjustment across all comparisons to it.
inline Table2 build_table2(const GradeBook& gb, const Benchmark& b, const std::string& reference,
                           const TableOptions& opt) {
    const auto outcomes = outcomes_from(gb, b);
    const auto models = gb.models();
    if (std::find(models.begin(), models.end(), reference) == models.end())
        throw InputError("reference model '" + reference + "' is not in the gradebook");
    Table2 t;
    t.reference = reference;
    t.total_max = b.total_max();
    const auto scores = score_all(gb, b);
    std::vector<double> raw;
    for (std::size_t i = 0; i < models.size(); ++i) {
        Table2Row row;
        row.model = models[i];
        row.boot = constrained_bootstrap(outcomes, models[i], t.total_max, opt.B, opt.seed);
        row.earned = scores[i].earned_total;
        if (models[i] != reference) {
            row.vs_reference = paired_permutation_test(outcomes, models[i], reference, opt.n_perm, opt.seed, opt.mode);
            raw.push_back(row.vs_reference->p_two_sided);
        }
        t.rows.push_back(std::move(row));
    }
    const auto adj = bh_adjust(raw);
    std::size_t k = 0;
    for (auto& row : t.rows)
        if (row.vs_reference) row.vs_reference->p_adjusted = adj[k++];
    return t;
}

/// "28 ± 2 [24–33]"; rounding to integers happens only here.
inline std::string mean_sd_ci_cell(double pct, double sd, std::pair<double, double> ci, std::string_view sep = "–") {
    return fmt::format("{:.0f} ± {:.0f} [{:.0f}{}{:.0f}]", pct, sd, ci.first, sep, ci.second);
}

inline std::string table2_markdown(const Table2& t) {
    std::string out = fmt::format(
        "| Model name | Score (normalized to percent) | Total points (out of {}) | P-value (w.r.t. {}) |\n"
        "|---|---|---|---|\n",
        t.total_max.to_string(1), t.reference);
    for (const auto& r : t.rows) {
        const std::string p = r.vs_reference ? fmt::format("{:.4f}", r.vs_reference->p_adjusted.value_or(r.vs_reference->p_two_sided)) : "N/A";
        out += fmt::format("| {} | {} | {} | {} |\n", r.model, mean_sd_ci_cell(r.boot.observed_pct, r.boot.sd, r.boot.ci95),
                           r.earned.to_string(1), p);
    }
    return out;
}

inline std::string table2_csv(const Table2& t) {
    std::string out = "model,score_pct,bootstrap_sd,ci_lo,ci_hi,total_points,total_max,p_raw,p_adjusted\n";
    for (const auto& r : t.rows) {
        out += fmt::format("{},{:.2f},{:.2f},{:.2f},{:.2f},{},{},", csv_escape(r.model), r.boot.observed_pct, r.boot.sd,
                           r.boot.ci95.first, r.boot.ci95.second, r.earned.to_string(1), t.total_max.to_string(1));
        if (r.vs_reference)
            out += fmt::format("{:.4f},{:.4f}\n", r.vs_reference->p_two_sided,
                               r.vs_reference->p_adjusted.value_or(r.vs_reference->p_two_sided));
        else
            out += "N/A,N/A\n";
    }
    return out;
}

inline json to_json(const Table2& t) {
    json rows = json::array();
    for (const auto& r : t.rows) {
        json j = {{"model", r.model}, {"bootstrap", to_json(r.boot)}, {"total_points", decimal_to_json(r.earned)}};
        j["vs_reference"] = r.vs_reference ? to_json(*r.vs_reference) : json(nullptr);
        rows.push_back(std::move(j));
    }
    return {{"reference", t.reference}, {"total_max", decimal_to_json(t.total_max)}, {"rows", rows}};
}

struct Table3 {
    std::vector<std::string> categories;  // column order
    std::map<std::string, Decimal> category_max;
    std::vector<std::string> models;
    std::map<std::pair<std::string, std::string>, BootstrapSummary> cells;  // (model, category)
};

/// Per-category constrained bootstrap with T = the category's maximum.
inline Table3 build_table3(const GradeBook& gb, const Benchmark& b, const TableOptions& opt) {
    const auto outcomes = outcomes_from(gb, b);
    Table3 t;
    t.models = gb.models();
    for (const auto& q : b.questions)
        if (std::find(t.categories.begin(), t.categories.end(), q.category) == t.categories.end())
            t.categories.push_back(q.category);
    std::sort(t.categories.begin(), t.categories.end());
    for (const auto& c : t.categories) {
        const auto sub = outcomes_in_category(outcomes, c);
        t.category_max[c] = total_max_of(sub);
        for (const auto& m : t.models) {
            BootstrapSummary s = constrained_bootstrap(sub, m, t.category_max[c], opt.B, opt.seed);
            s.scope = c;
            t.cells[{m, c}] = std::move(s);
        }
    }
    return t;
}

inline std::string table3_markdown(const Table3& t) {
    std::string out = "| Model name |";
    for (const auto& c : t.categories) out += " " + category_label(c) + " |";
    out += "\n|---|";
    for (std::size_t i = 0; i < t.categories.size(); ++i) out += "---|";
    out += "\n";
    for (const auto& m : t.models) {
        out += "| " + m + " |";
        for (const auto& c : t.categories) {
            const auto& s = t.cells.at({m, c});
            out += " " + mean_sd_ci_cell(s.observed_pct, s.sd, s.ci95, ", ") + " |";
        }
        out += "\n";
    }
    out += "\nMaximum points per category:";
    for (const auto& c : t.categories) out += " " + category_label(c) + " (" + t.category_max.at(c).to_string(1) + ")";
    out += "\n";
    return out;
}

inline std::string table3_csv(const Table3& t) {
    std::string out = "model,category,category_max,score_pct,bootstrap_sd,ci_lo,ci_hi\n";
    for (const auto& m : t.models)
        for (const auto& c : t.categories) {
            const auto& s = t.cells.at({m, c});
            out += fmt::format("{},{},{},{:.2f},{:.2f},{:.2f},{:.2f}\n", csv_escape(m), c,
                               t.category_max.at(c).to_string(1), s.observed_pct, s.sd, s.ci95.first, s.ci95.second);
        }
    return out;
}

inline json to_json(const Table3& t) {
    json cells = json::array();
    for (const auto& m : t.models)
        for (const auto& c : t.categories) cells.push_back(to_json(t.cells.at({m, c})));
    json maxes = json::object();
    for (const auto& [c, v] : t.category_max) maxes[c] = decimal_to_json(v);
    return {{"categories", t.categories}, {"category_max", maxes}, {"models", t.models}, {"cells", cells}};
}

}  // namespace exameval
