#pragma once

#include <array>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <httplib.h>

#include "exameval/answering.hpp"
#include "exameval/benchcore.hpp"
#include "exameval/grading.hpp"
#include "exameval/rng.hpp"
#include "exameval/scorebook.hpp"
#include "exameval/statlab.hpp"

namespace exameval {

enum class Tertile { low, medium, high };

inline const char* to_string(Tertile t) {
    switch (t) {
        case Tertile::low: return "low";
        case Tertile::medium: return "medium";
        case Tertile::high: return "high";
    }
    return "?";
}

inline Tertile tertile_from_string(std::string_view s) {
    if (s == "low") return Tertile::low;
    if (s == "medium") return Tertile::medium;
    if (s == "high") return Tertile::high;
    throw InputError("unknown tertile '" + std::string(s) + "'");
}

struct StudyItem {
    std::string item_id;
    std::string model;
    std::string question_id;
    std::string statement_id;
    Tertile tertile = Tertile::low;
    double llm_award_pct = 0;
    Decimal llm_awarded;
    Decimal max_points;
    std::vector<std::string> assigned_raters;
    bool overlap = false;
};

enum class SavedVia { ui, import };

struct RaterRecord {
    std::string item_id;
    std::string rater;
    Decimal points;
    Decimal max_points;
    std::string timestamp;
    SavedVia saved_via = SavedVia::ui;

    double pct() const { return normalize_human_score(points, max_points); }
};

struct StudyDesign {
    Seed seed;
    int n_items_total = 0;  // split evenly over models unless items_per_model names one
    int n_overlap = 0;
    std::vector<std::string> raters;
    double partial_lo_pct = 5;
    double partial_hi_pct = 95;
    int questions_per_model = 7;
    std::map<std::string, int> items_per_model;
    std::vector<std::string> models;  // empty: every model in the GradeBook
    bool distinct_questions = true;   // a question is sampled for at most one model
    Decimal score_step = Decimal::from_half_units(1);  // 0 disables the grid check

    void check() const {
        if (n_overlap < 0 || n_items_total < 0) throw ConfigError("study design: negative item counts");
        if (questions_per_model < 1) throw ConfigError("study design: questions_per_model must be >= 1");
        if (!(partial_lo_pct >= 0 && partial_lo_pct <= partial_hi_pct && partial_hi_pct <= 100))
            throw ConfigError("study design: partial window must satisfy 0 <= lo <= hi <= 100");
        if (n_items_total > 0 && n_overlap > n_items_total)
            throw ConfigError("study design: n_overlap exceeds n_items_total");
        std::set<std::string> seen;
        for (const auto& r : raters)
            if (r.empty() || !seen.insert(r).second) throw ConfigError("study design: rater ids must be unique");
    }
};

inline json to_json(const StudyDesign& d) {
    return {{"seed", d.seed.value},
            {"rng", d.seed.algorithm_id},
            {"n_items_total", d.n_items_total},
            {"n_overlap", d.n_overlap},
            {"raters", d.raters},
            {"partial_window", {d.partial_lo_pct, d.partial_hi_pct}},
            {"questions_per_model", d.questions_per_model},
            {"items_per_model", d.items_per_model},
            {"models", d.models},
            {"distinct_questions", d.distinct_questions},
            {"score_step", decimal_to_json(d.score_step)}};
}

inline StudyDesign study_design_from_json(const json& j) {
    try {
        StudyDesign d;
        d.seed.value = j.value("seed", std::uint64_t{0});
        d.seed.algorithm_id = j.value("rng", std::string(kRngAlgorithm));
        d.n_items_total = j.value("n_items_total", 0);
        d.n_overlap = j.value("n_overlap", 0);
        d.raters = j.value("raters", std::vector<std::string>{});
        if (auto it = j.find("partial_window"); it != j.end()) {
            if (!it->is_array() || it->size() != 2) throw ConfigError("partial_window must be [lo, hi]");
            d.partial_lo_pct = (*it)[0].get<double>();
            d.partial_hi_pct = (*it)[1].get<double>();
        }
        d.questions_per_model = j.value("questions_per_model", 7);
        d.items_per_model = j.value("items_per_model", std::map<std::string, int>{});
        d.models = j.value("models", std::vector<std::string>{});
        d.distinct_questions = j.value("distinct_questions", true);
        if (j.contains("score_step")) d.score_step = decimal_from_json(j["score_step"]);
        d.check();
        return d;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("study design: ") + e.what());
    }
}

inline json to_json(const StudyItem& it) {
    return {{"item_id", it.item_id},
            {"model", it.model},
            {"question_id", it.question_id},
            {"statement_id", it.statement_id},
            {"tertile", to_string(it.tertile)},
            {"llm_award_pct", it.llm_award_pct},
            {"llm_awarded", decimal_to_json(it.llm_awarded)},
            {"max_points", decimal_to_json(it.max_points)},
            {"assigned_raters", it.assigned_raters},
            {"overlap", it.overlap}};
}

inline StudyItem study_item_from_json(const json& j) {
    try {
        StudyItem it;
        it.item_id = j.at("item_id").get<std::string>();
        it.model = j.at("model").get<std::string>();
        it.question_id = j.at("question_id").get<std::string>();
        it.statement_id = j.at("statement_id").get<std::string>();
        it.tertile = tertile_from_string(j.at("tertile").get<std::string>());
        it.llm_award_pct = j.at("llm_award_pct").get<double>();
        it.llm_awarded = decimal_from_json(j.at("llm_awarded"));
        it.max_points = decimal_from_json(j.at("max_points"));
        it.assigned_raters = j.value("assigned_raters", std::vector<std::string>{});
        it.overlap = j.value("overlap", false);
        return it;
    } catch (const json::exception& e) {
        throw InputError(std::string("study item: ") + e.what());
    }
}

struct Study {
    StudyDesign design;
    std::vector<StudyItem> items;
    std::vector<std::string> warnings;

    const StudyItem* find(std::string_view id) const {
        for (const auto& it : items)
            if (it.item_id == id) return &it;
        return nullptr;
    }
};

inline json to_json(const Study& s) {
    json items = json::array();
    for (const auto& it : s.items) items.push_back(to_json(it));
    return {{"design", to_json(s.design)}, {"items", items}, {"warnings", s.warnings}};
}

inline Study study_from_json(const json& j) {
    Study s;
    s.design = study_design_from_json(j.value("design", json::object()));
    for (const auto& it : j.value("items", json::array())) s.items.push_back(study_item_from_json(it));
    s.warnings = j.value("warnings", std::vector<std::string>{});
    return s;
}

inline void save_study(const Study& s, const std::filesystem::path& path) { write_file(path, to_json(s).dump(2) + "\n"); }

inline Study load_study(const std::filesystem::path& path) {
    try {
        return study_from_json(json::parse(read_file(path)));
    } catch (const json::parse_error& e) {
        throw LoadError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Sizes of three strata over n ranked elements; remainders go low first.
inline std::array<std::size_t, 3> strata_sizes(std::size_t n) {
    std::array<std::size_t, 3> s{n / 3, n / 3, n / 3};
    for (std::size_t i = 0; i < n % 3; ++i) ++s[i];
    return s;
}

/// Question id -> tertile for one model, ranked by ascending pct
/// (ties keep benchmark order).
inline std::map<std::string, Tertile> tertiles_of(const ModelScore& score) {
    std::vector<std::size_t> order(score.per_question.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return score.per_question[a].pct < score.per_question[b].pct;
    });
    const auto sizes = strata_sizes(order.size());
    std::map<std::string, Tertile> out;
    std::size_t pos = 0;
    for (int t = 0; t < 3; ++t)
        for (std::size_t i = 0; i < sizes[static_cast<std::size_t>(t)]; ++i, ++pos)
            out[score.per_question[order[pos]].question_id] = static_cast<Tertile>(t);
    return out;
}

/// Stratified, seeded study sample. Per model: questions ranked by pct are
/// split into tertiles and sampled evenly across them; within the sampled
/// questions, statements whose automated award lies in the partial-credit
/// window are preferred, topped up with extreme awards to reach the target.
inline Study sample_study(const GradeBook& gb, const Benchmark& b, const std::vector<ModelScore>& scores,
                          const StudyDesign& design) {
    design.check();
    Study study;
    study.design = design;
    const GradeIndex idx(gb);

    std::vector<const ModelScore*> chosen;
    if (design.models.empty()) {
        for (const auto& s : scores) chosen.push_back(&s);
    } else {
        for (const auto& m : design.models) {
            auto it = std::find_if(scores.begin(), scores.end(), [&](const ModelScore& s) { return s.model == m; });
            if (it == scores.end()) throw InputError("study design names unknown model '" + m + "'");
            chosen.push_back(&*it);
        }
    }
    if (chosen.empty()) throw InputError("sample_study: no models to sample");

    // Item targets: explicit per model, otherwise an even split of the total.
    std::vector<int> targets(chosen.size(), 0);
    {
        int unnamed = 0, named_sum = 0;
        for (std::size_t m = 0; m < chosen.size(); ++m) {
            auto it = design.items_per_model.find(chosen[m]->model);
            if (it != design.items_per_model.end()) {
                targets[m] = it->second;
                named_sum += it->second;
            } else {
                targets[m] = -1;
                ++unnamed;
            }
        }
        const int rest = std::max(0, design.n_items_total - named_sum);
        int k = 0;
        for (std::size_t m = 0; m < chosen.size(); ++m)
            if (targets[m] < 0) {
                targets[m] = rest / unnamed + (k < rest % unnamed ? 1 : 0);
                ++k;
            }
    }

    std::set<std::string> used_questions;
    const auto q_split = strata_sizes(static_cast<std::size_t>(design.questions_per_model));

    for (std::size_t m = 0; m < chosen.size(); ++m) {
        const ModelScore& score = *chosen[m];
        Rng rng = Rng::substream(design.seed, m);
        const auto tert = tertiles_of(score);

        std::array<std::vector<std::string>, 3> strata;
        for (const auto& q : b.questions) {
            auto it = tert.find(q.id);
            if (it != tert.end()) strata[static_cast<std::size_t>(it->second)].push_back(q.id);
        }

        std::set<std::string> picked;
        for (std::size_t t = 0; t < 3; ++t) {
            auto pool = strata[t];
            rng.shuffle(pool);
            std::size_t taken = 0;
            for (const auto& qid : pool) {
                if (taken == q_split[t]) break;
                if (design.distinct_questions && used_questions.count(qid)) continue;
                picked.insert(qid);
                ++taken;
            }
            if (taken < q_split[t])
                study.warnings.push_back(fmt::format("model {}: {} stratum has only {} of {} requested questions",
                                                     score.model, to_string(static_cast<Tertile>(t)), taken,
                                                     q_split[t]));
        }
        for (const auto& q : picked) used_questions.insert(q);

        // Candidate statements in benchmark order.
        std::vector<StudyItem> partial, extreme;
        for (const auto& q : b.questions) {
            if (!picked.count(q.id)) continue;
            for (const auto& s : q.statements) {
                const GradedStatement* g = idx.find(score.model, q.id, s.id);
                if (!g) throw IncompleteError("gradebook has no entry for (" + score.model + ", " + q.id + ", " + s.id + ")");
                StudyItem it;
                it.model = score.model;
                it.question_id = q.id;
                it.statement_id = s.id;
                it.tertile = tert.at(q.id);
                it.llm_awarded = g->awarded;
                it.max_points = s.max_points;
                it.llm_award_pct = percent_of(g->awarded, s.max_points);
                const bool in_window =
                    it.llm_award_pct >= design.partial_lo_pct && it.llm_award_pct <= design.partial_hi_pct;
                (in_window ? partial : extreme).push_back(std::move(it));
            }
        }
        rng.shuffle(partial);
        rng.shuffle(extreme);

        const auto target = static_cast<std::size_t>(targets[m]);
        std::vector<StudyItem> take;
        for (auto& it : partial)
            if (take.size() < target) take.push_back(std::move(it));
        std::size_t from_extremes = 0;
        for (auto& it : extreme)
            if (take.size() < target) {
                take.push_back(std::move(it));
                ++from_extremes;
            }
        if (from_extremes > 0)
            study.warnings.push_back(fmt::format("model {}: {} of {} items taken outside the partial-credit window",
                                                 score.model, from_extremes, take.size()));
        if (take.size() < target)
            study.warnings.push_back(fmt::format("model {}: only {} statements available for a target of {}",
                                                 score.model, take.size(), target));

        // Present items in benchmark order regardless of draw order.
        auto position = [&](const StudyItem& it) {
            for (std::size_t qi = 0; qi < b.questions.size(); ++qi)
                if (b.questions[qi].id == it.question_id)
                    for (std::size_t si = 0; si < b.questions[qi].statements.size(); ++si)
                        if (b.questions[qi].statements[si].id == it.statement_id) return std::make_pair(qi, si);
            return std::make_pair(b.questions.size(), std::size_t{0});
        };
        std::sort(take.begin(), take.end(),
                  [&](const StudyItem& a, const StudyItem& c) { return position(a) < position(c); });
        for (auto& it : take) study.items.push_back(std::move(it));
    }

    for (std::size_t i = 0; i < study.items.size(); ++i) study.items[i].item_id = fmt::format("item-{:03d}", i + 1);
    return study;
}

/// Seeded overlap choice plus round-robin for the rest.
inline void assign_raters(std::vector<StudyItem>& items, const StudyDesign& design) {
    if (design.raters.empty()) throw ConfigError("assign_raters: no raters");
    if (design.n_overlap < 0 || static_cast<std::size_t>(design.n_overlap) > items.size())
        throw ConfigError(fmt::format("assign_raters: n_overlap {} exceeds {} items", design.n_overlap, items.size()));
    Rng rng = Rng::substream(design.seed, std::uint64_t{1} << 32);
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    const bool multi = design.raters.size() > 1;
    const std::size_t n_overlap = multi ? static_cast<std::size_t>(design.n_overlap) : 0;
    std::size_t rr = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        StudyItem& it = items[order[k]];
        if (k < n_overlap) {
            it.assigned_raters = design.raters;
            it.overlap = true;
        } else {
            it.assigned_raters = {design.raters[rr++ % design.raters.size()]};
            it.overlap = false;
        }
    }
}

inline void assign_raters(Study& s) { assign_raters(s.items, s.design); }

// ---------------------------------------------------------------------------
// Score persistence: append-only event log, last write wins
// ---------------------------------------------------------------------------

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    return fmt::format("{:%Y-%m-%dT%H:%M:%S}.{:03d}Z", fmt::gmtime(std::chrono::system_clock::to_time_t(now)), ms);
}

inline const char* to_string(SavedVia v) { return v == SavedVia::ui ? "ui" : "import"; }

inline json to_json(const RaterRecord& r) {
    return {{"item_id", r.item_id},
            {"rater", r.rater},
            {"points", decimal_to_json(r.points)},
            {"max_points", decimal_to_json(r.max_points)},
            {"timestamp", r.timestamp},
            {"saved_via", to_string(r.saved_via)}};
}

inline constexpr const char* kExportHeader = "item_id,rater,points,max_points,pct,timestamp";

inline std::string records_to_csv(const std::vector<RaterRecord>& records) {
    std::string out = std::string(kExportHeader) + "\n";
    for (const auto& r : records)
        out += fmt::format("{},{},{},{},{},{}\n", csv_escape(r.item_id), csv_escape(r.rater), r.points.to_string(1),
                           r.max_points.to_string(1), render_pct(r.pct()), csv_escape(r.timestamp));
    return out;
}

/// Reads the export CSV back; rows are validated against the study if given.
inline std::vector<RaterRecord> records_from_csv(std::string_view text, const Study* study = nullptr) {
    const auto table = parse_csv(text);
    if (table.empty()) throw InputError("rater CSV: empty file");
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < table[0].size(); ++i) col[std::string(trim(table[0][i]))] = i;
    for (const char* c : {"item_id", "rater", "points", "max_points"})
        if (!col.count(c)) throw InputError(std::string("rater CSV: missing column '") + c + "'");
    std::vector<RaterRecord> out;
    for (std::size_t r = 1; r < table.size(); ++r) {
        const auto& row = table[r];
        if (row.size() == 1 && trim(row[0]).empty()) continue;
        auto get = [&](const char* name) -> std::string {
            auto it = col.find(name);
            return it == col.end() || it->second >= row.size() ? std::string{} : std::string(trim(row[it->second]));
        };
        RaterRecord rec;
        rec.item_id = get("item_id");
        rec.rater = get("rater");
        try {
            rec.points = Decimal::parse(get("points"));
            rec.max_points = Decimal::parse(get("max_points"));
        } catch (const Error& e) {
            throw InputError(fmt::format("rater CSV line {}: {}", r + 1, e.what()));
        }
        rec.timestamp = get("timestamp");
        rec.saved_via = SavedVia::import;
        if (rec.max_points <= Decimal{} || rec.points < Decimal{} || rec.points > rec.max_points)
            throw InputError(fmt::format("rater CSV line {}: points {} outside [0, {}]", r + 1,
                                         rec.points.to_string(), rec.max_points.to_string()));
        if (study) {
            const StudyItem* it = study->find(rec.item_id);
            if (!it) throw InputError(fmt::format("rater CSV line {}: unknown item '{}'", r + 1, rec.item_id));
            if (it->max_points != rec.max_points)
                throw InputError(fmt::format("rater CSV line {}: max_points {} differs from item's {}", r + 1,
                                             rec.max_points.to_string(), it->max_points.to_string()));
        }
        out.push_back(std::move(rec));
    }
    return out;
}

/// Thread-safe score store over an append-only JSONL event log.
/// Events: score (last write per (item, rater) wins), reveal, clear.
class StudyStore {
public:
    using Clock = std::function<std::string()>;

    StudyStore(Study study, std::filesystem::path log_path = {}, Clock clock = utc_timestamp)
        : study_(std::move(study)), log_path_(std::move(log_path)), clock_(std::move(clock)) {
        if (!log_path_.empty() && std::filesystem::exists(log_path_))
            for (const auto& ev : read_jsonl(log_path_)) apply(ev);
    }

    const Study& study() const { return study_; }

    /// Validates and records a score. Throws InputError on bad input.
    RaterRecord put_score(const std::string& item_id, const std::string& rater, Decimal points,
                          SavedVia via = SavedVia::ui) {
        const StudyItem* it = study_.find(item_id);
        if (!it) throw InputError("unknown item '" + item_id + "'");
        if (std::find(it->assigned_raters.begin(), it->assigned_raters.end(), rater) == it->assigned_raters.end())
            throw InputError("rater '" + rater + "' is not assigned to " + item_id);
        if (points < Decimal{} || points > it->max_points)
            throw InputError("points " + points.to_string() + " outside [0, " + it->max_points.to_string() + "]");
        const Decimal step = study_.design.score_step;
        if (step > Decimal{} && points.micros() % step.micros() != 0)
            throw InputError("points " + points.to_string() + " not on the " + step.to_string() + " grid");
        RaterRecord rec{item_id, rater, points, it->max_points, clock_(), via};
        json ev = to_json(rec);
        ev["type"] = "score";
        std::lock_guard lk(mu_);
        persist(ev);
        apply_locked(ev);
        return rec;
    }

    void log_reveal(const std::string& item_id, const std::string& rater) {
        json ev = {{"type", "reveal"}, {"item_id", item_id}, {"rater", rater}, {"timestamp", clock_()}};
        std::lock_guard lk(mu_);
        persist(ev);
        reveals_.push_back(ev);
    }

    /// Removes every score (or one rater's). The clear itself is logged.
    void clear(const std::optional<std::string>& rater = std::nullopt) {
        json ev = {{"type", "clear"}, {"timestamp", clock_()}};
        if (rater) ev["rater"] = *rater;
        std::lock_guard lk(mu_);
        persist(ev);
        apply_locked(ev);
    }

    /// Snapshot ordered by item position, then rater id.
    std::vector<RaterRecord> records() const {
        std::lock_guard lk(mu_);
        std::vector<RaterRecord> out;
        for (const auto& item : study_.items)
            for (auto it = records_.lower_bound({item.item_id, ""});
                 it != records_.end() && it->first.first == item.item_id; ++it)
                out.push_back(it->second);
        return out;
    }

    std::optional<RaterRecord> record(const std::string& item_id, const std::string& rater) const {
        std::lock_guard lk(mu_);
        auto it = records_.find({item_id, rater});
        if (it == records_.end()) return std::nullopt;
        return it->second;
    }

    std::vector<const StudyItem*> queue(const std::string& rater) const {
        std::vector<const StudyItem*> out;
        for (const auto& it : study_.items)
            if (std::find(it.assigned_raters.begin(), it.assigned_raters.end(), rater) != it.assigned_raters.end())
                out.push_back(&it);
        return out;
    }

    bool has_rater(const std::string& rater) const {
        const auto& r = study_.design.raters;
        return std::find(r.begin(), r.end(), rater) != r.end();
    }

    std::size_t reveal_count() const {
        std::lock_guard lk(mu_);
        return reveals_.size();
    }

private:
    void persist(const json& ev) {
        if (!log_path_.empty()) append_line(log_path_, ev.dump());
    }

    void apply(const json& ev) {
        std::lock_guard lk(mu_);
        apply_locked(ev);
    }

    void apply_locked(const json& ev) {
        const std::string type = ev.value("type", std::string{});
        if (type == "score") {
            RaterRecord r;
            r.item_id = ev.at("item_id").get<std::string>();
            r.rater = ev.at("rater").get<std::string>();
            r.points = decimal_from_json(ev.at("points"));
            r.max_points = decimal_from_json(ev.at("max_points"));
            r.timestamp = ev.value("timestamp", std::string{});
            r.saved_via = ev.value("saved_via", std::string("ui")) == "import" ? SavedVia::import : SavedVia::ui;
            records_[{r.item_id, r.rater}] = std::move(r);
        } else if (type == "clear") {
            if (ev.contains("rater")) {
                const std::string who = ev["rater"].get<std::string>();
                for (auto it = records_.begin(); it != records_.end();)
                    it = it->first.second == who ? records_.erase(it) : std::next(it);
            } else {
                records_.clear();
            }
        } else if (type == "reveal") {
            reveals_.push_back(ev);
        } else {
            throw InputError("study log: unknown event type '" + type + "'");
        }
    }

    Study study_;
    std::filesystem::path log_path_;
    Clock clock_;
    mutable std::mutex mu_;
    std::map<std::pair<std::string, std::string>, RaterRecord> records_;
    std::vector<json> reveals_;
};

// ---------------------------------------------------------------------------
// Agreement report
// ---------------------------------------------------------------------------

struct CompositionCounts {
    std::size_t unique_items = 0;
    std::size_t valid_items = 0;  // human rating(s) present and not excluded
    std::size_t excluded = 0;
    std::size_t questions = 0;
};

struct RaterPairCorrelation {
    std::string rater_a;
    std::string rater_b;
    AgreementResult rho;
};

struct AgreementReport {
    CompositionCounts overall;
    std::vector<std::pair<std::string, CompositionCounts>> per_model;  // sample order
    std::size_t overlap_items = 0;           // overlap items with every assigned rater's score
    std::vector<std::string> overlap_raters;
    std::optional<AgreementResult> icc;
    std::optional<std::size_t> perfect_agreement;
    std::optional<double> mean_range_pct;
    std::optional<double> mean_within_sd_pct;
    std::optional<double> mean_abs_diff_pct;
    std::vector<RaterPairCorrelation> spearman;
    std::optional<AgreementResult> tau_overall;
    std::vector<std::pair<std::string, std::optional<AgreementResult>>> tau_per_model;
    std::vector<std::string> notices;
};

struct AgreementOptions {
    int B = 10000;
    Seed seed;
};

/// Inter-rater statistics on complete overlap items and human-vs-automated
/// Kendall tau_b on every rated, non-excluded item. Excluded items still
/// count for inter-rater statistics.
inline AgreementReport agreement_report(const std::vector<RaterRecord>& records, const Study& study,
                                        const GradeBook& gb, const std::vector<std::string>& exclusions,
                                        const AgreementOptions& opts = {}) {
    AgreementReport rep;
    const std::set<std::string> excluded(exclusions.begin(), exclusions.end());
    std::map<std::string, std::map<std::string, double>> pct;  // item -> rater -> pct
    for (const auto& r : records) {
        if (!study.find(r.item_id)) throw InputError("rating for unknown item '" + r.item_id + "'");
        pct[r.item_id][r.rater] = r.pct();
    }

    auto llm_pct = [&](const StudyItem& it) {
        if (const GradedStatement* g = gb.find(it.model, it.question_id, it.statement_id))
            return percent_of(g->awarded, it.max_points);
        return it.llm_award_pct;
    };

    // Composition.
    std::vector<std::string> models;
    std::map<std::string, std::set<std::string>> questions_by_model;
    std::set<std::string> all_questions;
    std::map<std::string, CompositionCounts> counts;
    for (const auto& it : study.items) {
        if (std::find(models.begin(), models.end(), it.model) == models.end()) models.push_back(it.model);
        auto& c = counts[it.model];
        ++c.unique_items;
        ++rep.overall.unique_items;
        questions_by_model[it.model].insert(it.question_id);
        all_questions.insert(it.question_id);
        const bool rated = pct.count(it.item_id) > 0;
        if (excluded.count(it.item_id)) {
            ++c.excluded;
            ++rep.overall.excluded;
        } else if (rated) {
            ++c.valid_items;
            ++rep.overall.valid_items;
        }
    }
    rep.overall.questions = all_questions.size();
    for (const auto& m : models) {
        counts[m].questions = questions_by_model[m].size();
        rep.per_model.emplace_back(m, counts[m]);
    }

    // Inter-rater block: overlap items where every assigned rater scored.
    std::vector<std::vector<double>> matrix;
    for (const auto& it : study.items) {
        if (!it.overlap || it.assigned_raters.size() < 2) continue;
        if (rep.overlap_raters.empty()) rep.overlap_raters = it.assigned_raters;
        if (it.assigned_raters != rep.overlap_raters) {
            rep.notices.push_back("overlap item " + it.item_id + " has a different rater set; skipped");
            continue;
        }
        auto found = pct.find(it.item_id);
        if (found == pct.end()) continue;
        std::vector<double> row;
        for (const auto& r : rep.overlap_raters) {
            auto c = found->second.find(r);
            if (c == found->second.end()) break;
            row.push_back(c->second);
        }
        if (row.size() == rep.overlap_raters.size()) matrix.push_back(std::move(row));
    }
    rep.overlap_items = matrix.size();
    if (matrix.size() < 2) {
        rep.notices.push_back(fmt::format("ICC skipped: {} complete overlap item(s), need at least 2", matrix.size()));
    } else {
        std::size_t perfect = 0;
        double sum_range = 0, sum_sd = 0, sum_mad = 0;
        for (const auto& row : matrix) {
            const auto [mn, mx] = std::minmax_element(row.begin(), row.end());
            if (*mn == *mx) ++perfect;
            sum_range += *mx - *mn;
            sum_sd += sd_of(row);
            double pair_sum = 0;
            std::size_t pairs = 0;
            for (std::size_t a = 0; a < row.size(); ++a)
                for (std::size_t c = a + 1; c < row.size(); ++c, ++pairs) pair_sum += std::abs(row[a] - row[c]);
            sum_mad += pair_sum / static_cast<double>(pairs);
        }
        const auto n = static_cast<double>(matrix.size());
        rep.perfect_agreement = perfect;
        rep.mean_range_pct = sum_range / n;
        rep.mean_within_sd_pct = sum_sd / n;
        rep.mean_abs_diff_pct = sum_mad / n;
        try {
            rep.icc = icc_2_1(matrix);
        } catch (const StatError& e) {
            rep.notices.push_back(std::string("ICC skipped: ") + e.what());
        }
        for (std::size_t a = 0; a < rep.overlap_raters.size(); ++a)
            for (std::size_t c = a + 1; c < rep.overlap_raters.size(); ++c) {
                std::vector<double> xa, xc;
                for (const auto& row : matrix) {
                    xa.push_back(row[a]);
                    xc.push_back(row[c]);
                }
                try {
                    rep.spearman.push_back({rep.overlap_raters[a], rep.overlap_raters[c], spearman_rho(xa, xc)});
                } catch (const Error& e) {
                    rep.notices.push_back(fmt::format("Spearman {} vs {} skipped: {}", rep.overlap_raters[a],
                                                      rep.overlap_raters[c], e.what()));
                }
            }
    }

    // Human vs automated evaluator.
    std::map<std::string, std::vector<std::pair<double, double>>> by_model;
    std::vector<std::pair<double, double>> pooled;
    for (const auto& it : study.items) {
        if (excluded.count(it.item_id)) continue;
        auto found = pct.find(it.item_id);
        if (found == pct.end()) continue;
        std::vector<double> hs;
        for (const auto& [_, v] : found->second) hs.push_back(v);
        const std::pair<double, double> p{mean_human(hs), llm_pct(it)};
        pooled.push_back(p);
        by_model[it.model].push_back(p);
    }
    auto tau = [&](const std::vector<std::pair<double, double>>& pairs, const std::string& label)
        -> std::optional<AgreementResult> {
        try {
            return bootstrap_ci_tau(pairs, opts.B, opts.seed);
        } catch (const Error& e) {
            rep.notices.push_back(fmt::format("Kendall tau ({}) skipped: {}", label, e.what()));
            return std::nullopt;
        }
    };
    rep.tau_overall = tau(pooled, "overall");
    for (const auto& m : models) rep.tau_per_model.emplace_back(m, tau(by_model[m], m));
    return rep;
}

inline json to_json(const AgreementReport& r) {
    auto comp = [](const CompositionCounts& c) {
        return json{{"unique_items", c.unique_items},
                    {"valid_items", c.valid_items},
                    {"excluded", c.excluded},
                    {"questions", c.questions}};
    };
    json per = json::object();
    for (const auto& [m, c] : r.per_model) per[m] = comp(c);
    json inter = {{"overlap_items", r.overlap_items}, {"raters", r.overlap_raters}};
    inter["icc_2_1"] = r.icc ? to_json(*r.icc) : json(nullptr);
    inter["perfect_agreement"] = r.perfect_agreement ? json(*r.perfect_agreement) : json(nullptr);
    inter["mean_range_pct"] = r.mean_range_pct ? json(*r.mean_range_pct) : json(nullptr);
    inter["mean_within_sd_pct"] = r.mean_within_sd_pct ? json(*r.mean_within_sd_pct) : json(nullptr);
    inter["mean_abs_diff_pct"] = r.mean_abs_diff_pct ? json(*r.mean_abs_diff_pct) : json(nullptr);
    json sp = json::array();
    for (const auto& s : r.spearman) {
        json j = to_json(s.rho);
        j["rater_a"] = s.rater_a;
        j["rater_b"] = s.rater_b;
        sp.push_back(std::move(j));
    }
    inter["spearman"] = sp;
    json taus = json::object();
    for (const auto& [m, t] : r.tau_per_model) taus[m] = t ? to_json(*t) : json(nullptr);
    return {{"composition", {{"overall", comp(r.overall)}, {"per_model", per}}},
            {"inter_rater", inter},
            {"human_vs_llm", {{"overall", r.tau_overall ? to_json(*r.tau_overall) : json(nullptr)}, {"per_model", taus}}},
            {"notices", r.notices}};
}

/// Markdown table with one Overall column and one column per model.
inline std::string agreement_markdown(const AgreementReport& r) {
    const std::string na = "N/A";
    std::vector<std::string> header = {"Metric", "Overall"};
    for (const auto& [m, _] : r.per_model) header.push_back(m);
    const std::size_t ncols = header.size();
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
        out += "|";
        for (std::size_t i = 0; i < ncols; ++i) out += " " + (i < cells.size() ? cells[i] : na) + " |";
        out += "\n";
    };
    auto overall_only = [&](const std::string& label, const std::string& v) { line({label, v}); };
    line(header);
    out += "|";
    for (std::size_t i = 0; i < ncols; ++i) out += "---|";
    out += "\n";

    std::vector<std::string> row = {"Unique statement-level items [n]", std::to_string(r.overall.unique_items)};
    for (const auto& [_, c] : r.per_model) row.push_back(std::to_string(c.unique_items));
    line(row);
    row = {"Items with valid human + LLM score [n]", std::to_string(r.overall.valid_items)};
    for (const auto& [_, c] : r.per_model) row.push_back(std::to_string(c.valid_items));
    line(row);
    row = {"Items excluded due to malformed model output [n]", std::to_string(r.overall.excluded)};
    for (const auto& [_, c] : r.per_model) row.push_back(std::to_string(c.excluded));
    line(row);
    const std::string k = std::to_string(r.overlap_raters.size());
    overall_only("Overlap items graded by all " + k + " raters [n]", std::to_string(r.overlap_items));
    overall_only("ICC(2,1) (absolute agreement)", r.icc ? fmt::format("{:.3f}", r.icc->value) : na);
    overall_only("Perfect agreement among all " + k + " raters [n (%)]",
                 r.perfect_agreement && r.overlap_items
                     ? fmt::format("{} ({:.1f}%)", *r.perfect_agreement,
                                   100.0 * static_cast<double>(*r.perfect_agreement) /
                                       static_cast<double>(r.overlap_items))
                     : na);
    overall_only("Mean score range across raters [%]", r.mean_range_pct ? fmt::format("{:.2f}", *r.mean_range_pct) : na);
    overall_only("Mean within-item SD across raters [%]",
                 r.mean_within_sd_pct ? fmt::format("{:.2f}", *r.mean_within_sd_pct) : na);
    overall_only("Mean absolute difference across raters [%]",
                 r.mean_abs_diff_pct ? fmt::format("{:.2f}", *r.mean_abs_diff_pct) : na);
    for (const auto& s : r.spearman)
        overall_only(fmt::format("Spearman rho ({} vs. {})", s.rater_a, s.rater_b),
                     fmt::format("{:.3f} (P={:.4f})", s.rho.value, s.rho.p.value_or(1.0)));
    auto tau_cell = [&](const std::optional<AgreementResult>& t) { return t ? fmt::format("{:.3f}", t->value) : na; };
    auto ci_cell = [&](const std::optional<AgreementResult>& t) {
        return t && t->ci95 ? fmt::format("[{:.3f}, {:.3f}]", t->ci95->first, t->ci95->second) : na;
    };
    row = {"Kendall's tau", tau_cell(r.tau_overall)};
    for (const auto& [_, t] : r.tau_per_model) row.push_back(tau_cell(t));
    line(row);
    row = {"95% CI for tau", ci_cell(r.tau_overall)};
    for (const auto& [_, t] : r.tau_per_model) row.push_back(ci_cell(t));
    line(row);
    return out;
}

// ---------------------------------------------------------------------------
// HTTP API
// ---------------------------------------------------------------------------

/// Content the item view needs beyond the study itself.
struct StudyContext {
    const Benchmark* benchmark = nullptr;
    std::map<std::pair<std::string, std::string>, std::string> final_answers;  // (model, question) -> text

    void add_answers(const std::vector<AnswerRecord>& answers) {
        for (const auto& a : answers) final_answers[{a.model, a.question_id}] = a.final_text;
    }
};

inline constexpr const char* kClearConfirmation = "DELETE ALL";

/// Serves the study API (and optionally a static UI directory).
class StudyServer {
public:
    StudyServer(StudyStore& store, StudyContext ctx, std::string host = "127.0.0.1",
                std::filesystem::path static_dir = {})
        : store_(store), ctx_(std::move(ctx)), host_(std::move(host)) {
        if (!static_dir.empty() && !server_.set_mount_point("/", static_dir.string()))
            throw ConfigError("study server: cannot serve static files from " + static_dir.string());
        routes();
    }
    ~StudyServer() { stop(); }
    StudyServer(const StudyServer&) = delete;
    StudyServer& operator=(const StudyServer&) = delete;

    int start(int port = 0) {
        port_ = port == 0 ? server_.bind_to_any_port(host_) : (server_.bind_to_port(host_, port) ? port : -1);
        if (port_ <= 0) throw ConfigError("study server: cannot bind " + host_ + ":" + std::to_string(port));
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    void run(int port) {
        if (!server_.bind_to_port(host_, port))
            throw ConfigError("study server: cannot bind " + host_ + ":" + std::to_string(port));
        port_ = port;
        server_.listen_after_bind();
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const { return port_; }

private:
    static void send(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }
    static void fail(httplib::Response& res, int status, const std::string& msg) {
        send(res, status, json{{"error", msg}});
    }

    json item_view(const StudyItem& it, const std::string& rater, bool reveal) {
        json j = {{"item_id", it.item_id},
                  {"model", it.model},
                  {"tertile", to_string(it.tertile)},
                  {"question_id", it.question_id},
                  {"statement_id", it.statement_id},
                  {"max_points", decimal_to_json(it.max_points)},
                  {"overlap", it.overlap}};
        if (ctx_.benchmark) {
            if (const Question* q = ctx_.benchmark->find_question(it.question_id)) {
                j["exam"] = q->exam;
                j["question_text"] = q->text;
                j["reference_solution"] = q->reference_solution;
                for (std::size_t i = 0; i < q->statements.size(); ++i)
                    if (q->statements[i].id == it.statement_id) {
                        j["statement_index"] = i + 1;
                        j["statement_count"] = q->statements.size();
                        j["statement_text"] = q->statements[i].text;
                    }
            }
        }
        auto a = ctx_.final_answers.find({it.model, it.question_id});
        j["final_answer"] = a == ctx_.final_answers.end() ? json(nullptr) : json(a->second);
        if (!rater.empty()) {
            auto rec = store_.record(it.item_id, rater);
            j["points"] = rec ? decimal_to_json(rec->points) : json(nullptr);
        }
        if (reveal) {
            store_.log_reveal(it.item_id, rater);
            j["llm_award"] = decimal_to_json(it.llm_awarded);
            j["llm_award_pct"] = it.llm_award_pct;
        }
        return j;
    }

    void routes() {
        server_.Get(R"(/api/raters/([^/]+)/queue)", [this](const httplib::Request& req, httplib::Response& res) {
            const std::string rater = req.matches[1];
            if (!store_.has_rater(rater)) return fail(res, 404, "unknown rater '" + rater + "'");
            json items = json::array();
            std::size_t graded = 0;
            for (const StudyItem* it : store_.queue(rater)) {
                auto rec = store_.record(it->item_id, rater);
                if (rec) ++graded;
                items.push_back({{"item_id", it->item_id},
                                 {"graded", rec.has_value()},
                                 {"points", rec ? decimal_to_json(rec->points) : json(nullptr)},
                                 {"max_points", decimal_to_json(it->max_points)}});
            }
            send(res, 200, json{{"rater", rater}, {"total", items.size()}, {"graded", graded}, {"items", items}});
        });

        server_.Get(R"(/api/items/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            const StudyItem* it = store_.study().find(req.matches[1].str());
            if (!it) return fail(res, 404, "unknown item");
            const std::string rater = req.get_param_value("rater");
            const std::string reveal = req.get_param_value("reveal");
            send(res, 200, item_view(*it, rater, reveal == "1" || reveal == "true"));
        });

        server_.Put(R"(/api/items/([^/]+)/score)", [this](const httplib::Request& req, httplib::Response& res) {
            const std::string item_id = req.matches[1];
            if (!store_.study().find(item_id)) return fail(res, 404, "unknown item");
            json body;
            try {
                body = json::parse(req.body);
            } catch (const json::parse_error&) {
                return fail(res, 400, "body is not valid JSON");
            }
            if (!body.is_object() || !body.contains("rater") || !body["rater"].is_string() ||
                !body.contains("points") || !(body["points"].is_number() || body["points"].is_string()))
                return fail(res, 400, "body must be {\"rater\": string, \"points\": number}");
            try {
                const Decimal pts = body["points"].is_string() ? Decimal::parse(body["points"].get<std::string>())
                                                               : decimal_from_json(body["points"]);
                const RaterRecord rec = store_.put_score(item_id, body["rater"].get<std::string>(), pts);
                send(res, 200, to_json(rec));
            } catch (const Error& e) {
                fail(res, 422, e.what());
            }
        });

        server_.Get("/api/export.csv", [this](const httplib::Request&, httplib::Response& res) {
            res.status = 200;
            res.set_content(records_to_csv(store_.records()), "text/csv");
        });

        server_.Delete("/api/scores", [this](const httplib::Request& req, httplib::Response& res) {
            if (req.get_param_value("confirm") != kClearConfirmation)
                return fail(res, 400, std::string("clearing requires confirm=") + kClearConfirmation);
            std::optional<std::string> rater;
            if (req.has_param("rater")) rater = req.get_param_value("rater");
            store_.clear(rater);
            send(res, 200, json{{"cleared", true}});
        });

        server_.Get("/api/study", [this](const httplib::Request&, httplib::Response& res) {
            const auto& s = store_.study();
            send(res, 200, json{{"items", s.items.size()}, {"raters", s.design.raters},
                                {"score_step", decimal_to_json(s.design.score_step)}});
        });
    }

    StudyStore& store_;
    StudyContext ctx_;
    std::string host_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
};

}  // namespace exameval
