#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>

#include "exameval/benchcore.hpp"
#include "exameval/grading.hpp"
#include "exameval/parallel.hpp"
#include "exameval/rng.hpp"
#include "exameval/scorebook.hpp"

namespace exameval {

struct QuestionOutcome {
    std::string question_id;
    std::string category;
    Decimal max_points;
    std::map<std::string, Decimal> earned;  // model -> A_q
};

/// Per-question earned points for every model in the GradeBook.
inline std::vector<QuestionOutcome> outcomes_from(const GradeBook& gb, const Benchmark& b) {
    const GradeIndex idx(gb);
    const auto models = gb.models();
    std::vector<QuestionOutcome> out;
    out.reserve(b.questions.size());
    for (const auto& q : b.questions) {
        QuestionOutcome o{q.id, q.category, q.max_score(), {}};
        for (const auto& m : models) o.earned[m] = question_score(idx, q, m).earned;
        out.push_back(std::move(o));
    }
    return out;
}

inline json outcomes_to_json(const std::vector<QuestionOutcome>& outcomes) {
    json arr = json::array();
    for (const auto& o : outcomes) {
        json earned = json::object();
        for (const auto& [m, v] : o.earned) earned[m] = decimal_to_json(v);
        arr.push_back({{"question_id", o.question_id},
                       {"category", o.category},
                       {"max_points", decimal_to_json(o.max_points)},
                       {"earned", earned}});
    }
    return arr;
}

/// Reads the outcomes array; checks 0 <= earned <= max_points.
inline std::vector<QuestionOutcome> outcomes_from_json(const json& arr) {
    if (!arr.is_array()) throw InputError("outcomes: expected a JSON array");
    std::vector<QuestionOutcome> out;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const json& j = arr[i];
        try {
            QuestionOutcome o;
            o.question_id = j.at("question_id").get<std::string>();
            o.category = j.value("category", std::string{});
            o.max_points = decimal_from_json(j.at("max_points"));
            for (const auto& [m, v] : j.at("earned").items()) {
                const Decimal e = decimal_from_json(v);
                if (e < Decimal{} || e > o.max_points)
                    throw InputError(fmt::format("outcomes[{}]: earned {} for '{}' outside [0, {}]", i, e.to_string(),
                                                 m, o.max_points.to_string()));
                o.earned[m] = e;
            }
            out.push_back(std::move(o));
        } catch (const json::exception& e) {
            throw InputError(fmt::format("outcomes[{}]: {}", i, e.what()));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Descriptive helpers
// ---------------------------------------------------------------------------

/// Linear-interpolation percentile over sorted data, q in [0, 100].
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw StatError("percentile of empty sample");
    const double h = (static_cast<double>(sorted.size()) - 1) * q / 100.0;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw StatError("mean of empty sample");
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
inline double sd_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------------------
// Points-constrained bootstrap
// ---------------------------------------------------------------------------

struct BootstrapSummary {
    std::string model;
    std::string scope = "overall";  // or a category key
    int B = 0;
    Decimal target_T;
    std::vector<double> replicate_pcts;
    double mean = 0;
    double sd = 0;
    std::pair<double, double> ci95{0, 0};
    double observed_pct = 0;
    double shift_pp = 0;
    std::uint64_t restarts = 0;  // dead ends over all replicates
};

/// Draws one replicate: a multiset of question indices whose half-unit
/// weights sum to exactly `target_half`. Returns indices in draw order.
/// `order` lists question indices sorted by ascending weight so the feasible
/// set for a given remaining budget is always a prefix.
inline std::vector<std::size_t> draw_constrained_replicate(const std::vector<std::int64_t>& weights_half,
                                                           const std::vector<std::size_t>& order,
                                                           std::int64_t target_half, Rng& rng, int restart_cap,
                                                           std::uint64_t* restarts = nullptr) {
    std::vector<std::int64_t> sorted_w(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) sorted_w[i] = weights_half[order[i]];
    std::vector<std::size_t> picks;
    for (int attempt = 0;; ++attempt) {
        picks.clear();
        std::int64_t remaining = target_half;
        while (remaining > 0) {
            const auto feasible = static_cast<std::uint64_t>(
                std::upper_bound(sorted_w.begin(), sorted_w.end(), remaining) - sorted_w.begin());
            if (feasible == 0) break;
            const std::size_t q = order[rng.below(feasible)];
            picks.push_back(q);
            remaining -= weights_half[q];
        }
        if (remaining == 0) return picks;
        if (restarts) ++*restarts;
        if (attempt >= restart_cap)
            throw StatError(fmt::format("constrained bootstrap infeasible: no exact fill of T after {} restarts",
                                        restart_cap));
    }
}

/// Resamples questions with replacement until the summed maxima hit T
/// exactly; replicate score = 100 * sum(earned) / T. Replicate r draws from
/// Rng::substream(seed, r), so results do not depend on thread scheduling.
inline BootstrapSummary constrained_bootstrap(const std::vector<QuestionOutcome>& outcomes, const std::string& model,
                                              Decimal T, int B, const Seed& seed, int restart_cap = 1000,
                                              int workers = default_workers()) {
    if (outcomes.empty()) throw StatError("constrained bootstrap: no questions");
    if (B < 1) throw StatError("constrained bootstrap: B must be >= 1");
    if (restart_cap < 0) throw StatError("constrained bootstrap: restart_cap must be >= 0");
    if (!T.is_half_multiple() || T <= Decimal{})
        throw StatError("constrained bootstrap: T must be a positive multiple of 0.5, got " + T.to_string());

    std::vector<std::int64_t> w(outcomes.size());
    std::vector<std::int64_t> earned(outcomes.size());
    Decimal observed_earned, observed_max;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        const auto& o = outcomes[i];
        if (!o.max_points.is_half_multiple() || o.max_points <= Decimal{})
            throw StatError("question '" + o.question_id + "' has a max_points off the half-point grid");
        auto it = o.earned.find(model);
        if (it == o.earned.end()) throw StatError("no outcome for model '" + model + "' on " + o.question_id);
        w[i] = o.max_points.half_units();
        earned[i] = it->second.micros();
        observed_earned += it->second;
        observed_max += o.max_points;
    }
    if (T < Decimal::from_half_units(*std::min_element(w.begin(), w.end())))
        throw StatError("constrained bootstrap: T is below the smallest question weight");

    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] < w[b]; });

    BootstrapSummary s;
    s.model = model;
    s.B = B;
    s.target_T = T;
    s.replicate_pcts.resize(static_cast<std::size_t>(B));
    std::vector<std::uint64_t> restarts(static_cast<std::size_t>(B), 0);
    const std::int64_t target_half = T.half_units();
    const auto t_micros = static_cast<double>(T.micros());

    parallel_for(static_cast<std::size_t>(B), workers, [&](std::size_t r) {
        Rng rng = Rng::substream(seed, r);
        const auto picks = draw_constrained_replicate(w, order, target_half, rng, restart_cap, &restarts[r]);
        std::int64_t sum = 0;
        for (std::size_t q : picks) sum += earned[q];
        s.replicate_pcts[r] = 100.0 * static_cast<double>(sum) / t_micros;
    });

    for (auto n : restarts) s.restarts += n;
    std::vector<double> sorted = s.replicate_pcts;
    std::sort(sorted.begin(), sorted.end());
    s.mean = mean_of(s.replicate_pcts);
    s.sd = sd_of(s.replicate_pcts);
    s.ci95 = {percentile_sorted(sorted, 2.5), percentile_sorted(sorted, 97.5)};
    s.observed_pct = percent_of(observed_earned, observed_max);
    s.shift_pp = s.mean - s.observed_pct;
    return s;
}

/// Keeps only the questions of one category; used for per-category intervals.
inline std::vector<QuestionOutcome> outcomes_in_category(const std::vector<QuestionOutcome>& all,
                                                         const std::string& category) {
    std::vector<QuestionOutcome> out;
    for (const auto& o : all)
        if (o.category == category) out.push_back(o);
    return out;
}

inline Decimal total_max_of(const std::vector<QuestionOutcome>& outcomes) {
    Decimal t;
    for (const auto& o : outcomes) t += o.max_points;
    return t;
}

// ---------------------------------------------------------------------------
// Paired sign-flip permutation test
// ---------------------------------------------------------------------------

enum class PermutationMode { automatic, monte_carlo, exact };

struct PermutationResult {
    std::string model_a;
    std::string model_b;
    double observed_stat = 0;  // percentage-point difference
    int n_perm = 0;
    double p_two_sided = 1;
    std::optional<double> p_adjusted;
    bool exact = false;  // p from full enumeration of the 2^n sign patterns
    std::size_t n_questions = 0;
};

/// Largest n for which exact enumeration is attempted in any mode.
inline constexpr std::size_t kMaxExactQuestions = 30;

/// Two-sided paired test on per-question differences d_q = A_q(a) - A_q(b).
///
/// Monte Carlo: p = (#{|T*| >= |T_obs|} + 1) / (n_perm + 1).
/// Exact: p = #{|T*| >= |T_obs|} / 2^n over every sign pattern. In automatic
/// mode the exact path runs when 2^n <= n_perm, i.e. when sampling n_perm
/// random patterns would cost at least as much as enumerating them all.
/// Comparisons run on integer micro-points so ties are decided exactly.
inline PermutationResult paired_permutation_test(const std::vector<QuestionOutcome>& outcomes,
                                                 const std::string& model_a, const std::string& model_b,
                                                 int n_perm, const Seed& seed,
                                                 PermutationMode mode = PermutationMode::automatic) {
    if (n_perm < 1) throw StatError("permutation test: n_perm must be >= 1");
    if (outcomes.empty()) throw StatError("permutation test: no questions");
    std::vector<std::int64_t> d;
    d.reserve(outcomes.size());
    Decimal total_max;
    for (const auto& o : outcomes) {
        auto ia = o.earned.find(model_a);
        auto ib = o.earned.find(model_b);
        if (ia == o.earned.end() || ib == o.earned.end())
            throw StatError("pairing error: question '" + o.question_id + "' is not scored for both '" + model_a +
                            "' and '" + model_b + "'");
        d.push_back(ia->second.micros() - ib->second.micros());
        total_max += o.max_points;
    }
    if (total_max <= Decimal{}) throw StatError("permutation test: zero total max points");

    std::int64_t obs = 0;
    for (auto x : d) obs += x;
    const std::int64_t abs_obs = obs < 0 ? -obs : obs;
    const std::size_t n = d.size();

    PermutationResult r;
    r.model_a = model_a;
    r.model_b = model_b;
    r.n_perm = n_perm;
    r.n_questions = n;
    r.observed_stat = 100.0 * static_cast<double>(obs) / static_cast<double>(total_max.micros());

    const bool exact_possible = n <= kMaxExactQuestions;
    bool use_exact = false;
    if (mode == PermutationMode::exact) {
        if (!exact_possible)
            throw StatError(fmt::format("exact permutation test limited to {} questions", kMaxExactQuestions));
        use_exact = true;
    } else if (mode == PermutationMode::automatic) {
        use_exact = exact_possible && (std::uint64_t{1} << n) <= static_cast<std::uint64_t>(n_perm);
    }

    if (use_exact) {
        // Gray-code walk: each step flips one sign, so the sum updates in O(1).
        std::int64_t sum = 0;
        for (auto x : d) sum += x;
        std::uint64_t count = 0;
        const std::uint64_t patterns = std::uint64_t{1} << n;
        std::vector<bool> negative(n, false);
        for (std::uint64_t k = 0; k < patterns; ++k) {
            if (k > 0) {
                const auto bit = static_cast<std::size_t>(__builtin_ctzll(k));
                sum += negative[bit] ? 2 * d[bit] : -2 * d[bit];
                negative[bit] = !negative[bit];
            }
            if ((sum < 0 ? -sum : sum) >= abs_obs) ++count;
        }
        r.exact = true;
        r.p_two_sided = static_cast<double>(count) / static_cast<double>(patterns);
        return r;
    }

    Rng rng = Rng::substream(seed, 0);
    std::uint64_t count = 0;
    for (int p = 0; p < n_perm; ++p) {
        std::int64_t sum = 0;
        std::uint64_t bits = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (i % 64 == 0) bits = rng.next();
            sum += (bits & 1) ? -d[i] : d[i];
            bits >>= 1;
        }
        if ((sum < 0 ? -sum : sum) >= abs_obs) ++count;
    }
    r.p_two_sided = static_cast<double>(count + 1) / static_cast<double>(n_perm + 1);
    return r;
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
inline std::vector<double> bh_adjust(const std::vector<double>& p) {
    for (double x : p)
        if (!(x >= 0.0 && x <= 1.0)) throw InputError(fmt::format("p-value {} outside [0, 1]", x));
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> adj(m);
    double running = 1.0;
    for (std::size_t k = m; k-- > 0;) {
        const double v = p[order[k]] * static_cast<double>(m) / static_cast<double>(k + 1);
        running = std::min(running, v);
        adj[order[k]] = std::min(running, 1.0);
    }
    return adj;
}

/// Every unordered model pair, BH-adjusted across the whole family.
inline std::vector<PermutationResult> pairwise_permutation(const std::vector<QuestionOutcome>& outcomes,
                                                           const std::vector<std::string>& models, int n_perm,
                                                           const Seed& seed,
                                                           PermutationMode mode = PermutationMode::automatic) {
    std::vector<PermutationResult> out;
    for (std::size_t i = 0; i < models.size(); ++i)
        for (std::size_t j = i + 1; j < models.size(); ++j)
            out.push_back(paired_permutation_test(outcomes, models[i], models[j], n_perm, seed, mode));
    std::vector<double> raw;
    for (const auto& r : out) raw.push_back(r.p_two_sided);
    const auto adj = bh_adjust(raw);
    for (std::size_t i = 0; i < out.size(); ++i) out[i].p_adjusted = adj[i];
    return out;
}

// ---------------------------------------------------------------------------
// Agreement statistics
// ---------------------------------------------------------------------------

enum class AgreementKind { kendall_tau_b, spearman_rho, icc_2_1 };

inline const char* to_string(AgreementKind k) {
    switch (k) {
        case AgreementKind::kendall_tau_b: return "kendall_tau_b";
        case AgreementKind::spearman_rho: return "spearman_rho";
        case AgreementKind::icc_2_1: return "icc_2_1";
    }
    return "?";
}

struct AgreementResult {
    AgreementKind kind = AgreementKind::kendall_tau_b;
    double value = 0;
    std::optional<std::pair<double, double>> ci95;
    std::size_t n = 0;
    std::optional<double> p;
    std::string p_method;        // set when p is present
    int B = 0;                   // bootstrap replicates requested, if any
    int skipped_replicates = 0;  // degenerate bootstrap replicates
};

struct PairCounts {
    std::int64_t concordant = 0;
    std::int64_t discordant = 0;
    std::int64_t tied_x_only = 0;  // T_h
    std::int64_t tied_y_only = 0;  // T_a
    std::int64_t tied_both = 0;
};

namespace detail {

inline std::int64_t tie_pairs(std::int64_t t) { return t * (t - 1) / 2; }

// Counts inversions of v[lo, hi) while merge sorting it; equal values are not inversions.
inline std::int64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::int64_t inv = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            inv += static_cast<std::int64_t>(mid - i);
            buf[k++] = v[j++];
        } else {
            buf[k++] = v[i++];
        }
    }
    while (i < mid) buf[k++] = v[i++];
    while (j < hi) buf[k++] = v[j++];
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return inv;
}

}  // namespace detail

/// Pair classification in O(n log n) (Knight's algorithm).
inline PairCounts kendall_pair_counts(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw InputError("kendall: x and y differ in length");
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return x[a] != x[b] ? x[a] < x[b] : y[a] < y[b];
    });

    std::int64_t n1 = 0, n3 = 0;  // tied in x; tied in both
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && x[idx[j]] == x[idx[i]]) ++j;
        n1 += detail::tie_pairs(static_cast<std::int64_t>(j - i));
        for (std::size_t a = i; a < j;) {
            std::size_t b = a;
            while (b < j && y[idx[b]] == y[idx[a]]) ++b;
            n3 += detail::tie_pairs(static_cast<std::int64_t>(b - a));
            a = b;
        }
        i = j;
    }

    std::vector<double> ys(n), buf(n);
    for (std::size_t i = 0; i < n; ++i) ys[i] = y[idx[i]];
    const std::int64_t swaps = detail::merge_count(ys, buf, 0, n);

    std::int64_t n2 = 0;  // tied in y
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && ys[j] == ys[i]) ++j;
        n2 += detail::tie_pairs(static_cast<std::int64_t>(j - i));
        i = j;
    }

    const std::int64_t n0 = detail::tie_pairs(static_cast<std::int64_t>(n));
    PairCounts c;
    c.discordant = swaps;
    c.concordant = n0 - n1 - n2 + n3 - swaps;
    c.tied_x_only = n1 - n3;
    c.tied_y_only = n2 - n3;
    c.tied_both = n3;
    return c;
}

/// tau_b = (C - D) / sqrt((C + D + T_h)(C + D + T_a)); pairs tied in both
/// coordinates are left out of all four counts.
inline AgreementResult kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw InputError("kendall_tau_b: x and y differ in length");
    if (x.size() < 2) throw InputError("kendall_tau_b: need at least 2 pairs");
    const PairCounts c = kendall_pair_counts(x, y);
    const std::int64_t cd = c.concordant + c.discordant;
    const std::int64_t fx = cd + c.tied_x_only;
    const std::int64_t fy = cd + c.tied_y_only;
    if (fx == 0 || fy == 0) throw StatError("kendall_tau_b undefined: one input is constant");
    AgreementResult r;
    r.kind = AgreementKind::kendall_tau_b;
    r.n = x.size();
    r.value = static_cast<double>(c.concordant - c.discordant) /
              std::sqrt(static_cast<double>(fx) * static_cast<double>(fy));
    r.value = std::clamp(r.value, -1.0, 1.0);
    return r;
}

/// Point estimate plus a percentile bootstrap CI over resampled pairs.
/// Degenerate replicates are skipped and counted; more than half degenerate
/// means the estimate is unstable.
inline AgreementResult bootstrap_ci_tau(const std::vector<std::pair<double, double>>& pairs, int B, const Seed& seed,
                                        int workers = default_workers()) {
    if (pairs.size() < 3) throw InputError("bootstrap_ci_tau: need at least 3 pairs");
    if (B < 1) throw StatError("bootstrap_ci_tau: B must be >= 1");
    std::vector<double> x, y;
    for (const auto& [h, a] : pairs) {
        x.push_back(h);
        y.push_back(a);
    }
    AgreementResult r = kendall_tau_b(x, y);
    r.B = B;

    const std::size_t n = pairs.size();
    std::vector<std::optional<double>> reps(static_cast<std::size_t>(B));
    parallel_for(reps.size(), workers, [&](std::size_t b) {
        Rng rng = Rng::substream(seed, b);
        std::vector<double> xs(n), ys(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(rng.below(n));
            xs[i] = x[k];
            ys[i] = y[k];
        }
        try {
            reps[b] = kendall_tau_b(xs, ys).value;
        } catch (const StatError&) {
            reps[b].reset();
        }
    });

    std::vector<double> ok;
    for (const auto& v : reps)
        if (v) ok.push_back(*v);
    r.skipped_replicates = B - static_cast<int>(ok.size());
    if (2 * r.skipped_replicates > B)
        throw StatError(fmt::format("bootstrap_ci_tau unstable: {} of {} replicates degenerate",
                                    r.skipped_replicates, B));
    std::sort(ok.begin(), ok.end());
    r.ci95 = std::make_pair(percentile_sorted(ok, 2.5), percentile_sorted(ok, 97.5));
    return r;
}

/// ICC(2,1): two-way random effects, absolute agreement, single rater.
/// Rows are subjects, columns raters; every cell must be present.
inline AgreementResult icc_2_1(const std::vector<std::vector<std::optional<double>>>& ratings) {
    const std::size_t n = ratings.size();
    if (n < 2) throw InputError("icc_2_1: need at least 2 subjects");
    const std::size_t k = ratings[0].size();
    if (k < 2) throw InputError("icc_2_1: need at least 2 raters");
    std::vector<std::vector<double>> x(n, std::vector<double>(k));
    for (std::size_t i = 0; i < n; ++i) {
        if (ratings[i].size() != k) throw InputError("icc_2_1: ragged rating matrix");
        for (std::size_t j = 0; j < k; ++j) {
            if (!ratings[i][j])
                throw InputError(fmt::format("icc_2_1: missing rating at subject {}, rater {}", i, j));
            x[i][j] = *ratings[i][j];
        }
    }
    double grand = 0;
    std::vector<double> rm(n, 0), cm(k, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            rm[i] += x[i][j];
            cm[j] += x[i][j];
            grand += x[i][j];
        }
    const double dn = static_cast<double>(n), dk = static_cast<double>(k);
    for (auto& v : rm) v /= dk;
    for (auto& v : cm) v /= dn;
    grand /= dn * dk;

    double ssr = 0, ssc = 0, sse = 0, sst = 0;
    for (std::size_t i = 0; i < n; ++i) ssr += (rm[i] - grand) * (rm[i] - grand);
    ssr *= dk;
    for (std::size_t j = 0; j < k; ++j) ssc += (cm[j] - grand) * (cm[j] - grand);
    ssc *= dn;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const double e = x[i][j] - rm[i] - cm[j] + grand;
            sse += e * e;
            sst += (x[i][j] - grand) * (x[i][j] - grand);
        }
    if (sst == 0) throw StatError("icc_2_1 undefined: zero total variance");

    const double msr = ssr / (dn - 1);
    const double msc = ssc / (dk - 1);
    const double mse = sse / ((dn - 1) * (dk - 1));
    const double denom = msr + (dk - 1) * mse + dk * (msc - mse) / dn;
    if (denom == 0) throw StatError("icc_2_1 undefined: zero denominator");
    AgreementResult r;
    r.kind = AgreementKind::icc_2_1;
    r.n = n;
    r.value = (msr - mse) / denom;
    return r;
}

inline AgreementResult icc_2_1(const std::vector<std::vector<double>>& ratings) {
    std::vector<std::vector<std::optional<double>>> m;
    for (const auto& row : ratings) m.emplace_back(row.begin(), row.end());
    return icc_2_1(m);
}

/// Average (mid) ranks, 1-based.
inline std::vector<double> mid_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && v[idx[j]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
        for (std::size_t t = i; t < j; ++t) r[idx[t]] = avg;
        i = j;
    }
    return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double mx = mean_of(x), my = mean_of(y);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) throw StatError("correlation undefined: zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline constexpr const char* kSpearmanPMethod = "t-approximation, df = n - 2";

/// Spearman rho as Pearson on mid-ranks; two-sided p from Student t.
inline AgreementResult spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw InputError("spearman_rho: x and y differ in length");
    if (x.size() < 3) throw InputError("spearman_rho: need at least 3 pairs");
    AgreementResult r;
    r.kind = AgreementKind::spearman_rho;
    r.n = x.size();
    try {
        r.value = pearson(mid_ranks(x), mid_ranks(y));
    } catch (const StatError&) {
        throw StatError("spearman_rho undefined: zero rank variance");
    }
    const double df = static_cast<double>(r.n) - 2;
    if (std::abs(r.value) >= 1.0) {
        r.p = 0.0;
    } else {
        const double t = r.value * std::sqrt(df / (1 - r.value * r.value));
        boost::math::students_t dist(df);
        r.p = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    }
    r.p_method = kSpearmanPMethod;
    return r;
}

/// 100 * points / max.
inline double normalize_human_score(Decimal points, Decimal max_points) {
    if (max_points <= Decimal{}) throw InputError("normalize_human_score: max_points must be > 0");
    if (points < Decimal{} || points > max_points)
        throw InputError("normalize_human_score: points " + points.to_string() + " outside [0, " +
                         max_points.to_string() + "]");
    return percent_of(points, max_points);
}

/// Mean over the available raters' normalized scores for one statement.
inline double mean_human(const std::vector<double>& pcts) {
    if (pcts.empty()) throw InputError("mean_human: no ratings");
    return mean_of(pcts);
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

inline json to_json(const BootstrapSummary& s, bool with_replicates = false) {
    json j = {{"model", s.model},
              {"scope", s.scope},
              {"B", s.B},
              {"target_T", decimal_to_json(s.target_T)},
              {"mean", s.mean},
              {"sd", s.sd},
              {"ci95", {s.ci95.first, s.ci95.second}},
              {"observed_pct", s.observed_pct},
              {"shift_pp", s.shift_pp},
              {"restarts", s.restarts}};
    if (with_replicates) j["replicate_pcts"] = s.replicate_pcts;
    return j;
}

inline json to_json(const PermutationResult& r) {
    json j = {{"model_a", r.model_a},         {"model_b", r.model_b},
              {"observed_stat", r.observed_stat}, {"n_perm", r.n_perm},
              {"p_two_sided", r.p_two_sided}, {"exact", r.exact},
              {"n_questions", r.n_questions}};
    j["p_adjusted"] = r.p_adjusted ? json(*r.p_adjusted) : json(nullptr);
    return j;
}

inline json to_json(const AgreementResult& r) {
    json j = {{"kind", to_string(r.kind)}, {"value", r.value}, {"n", r.n}};
    if (r.ci95) j["ci95"] = {r.ci95->first, r.ci95->second};
    if (r.p) {
        j["p"] = *r.p;
        j["p_method"] = r.p_method;
    }
    if (r.B > 0) {
        j["B"] = r.B;
        j["skipped_replicates"] = r.skipped_replicates;
    }
    return j;
}

struct StatReport {
    Seed seed;
    std::vector<BootstrapSummary> bootstrap;
    std::vector<PermutationResult> permutation;
    std::vector<std::pair<std::string, AgreementResult>> agreement;  // label, result
};

inline json to_json(const StatReport& r, bool with_replicates = false) {
    json boot = json::array(), perm = json::array(), agree = json::array();
    for (const auto& b : r.bootstrap) boot.push_back(to_json(b, with_replicates));
    for (const auto& p : r.permutation) perm.push_back(to_json(p));
    for (const auto& [label, a] : r.agreement) {
        json j = to_json(a);
        j["label"] = label;
        agree.push_back(std::move(j));
    }
    return {{"rng", {{"algorithm", r.seed.algorithm_id}, {"seed", r.seed.value}}},
            {"bootstrap", boot},
            {"permutation", perm},
            {"agreement", agree}};
}

/// Observed vs. bootstrap mean per model, most negative shift first.
inline std::vector<BootstrapSummary> shift_order(std::vector<BootstrapSummary> rows) {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const BootstrapSummary& a, const BootstrapSummary& b) { return a.shift_pp < b.shift_pp; });
    return rows;
}

inline std::string shift_table_markdown(const std::vector<BootstrapSummary>& rows) {
    std::string out = "| Model | Observed accuracy [%] | Bootstrap mean accuracy [%] | Shift (pp) |\n"
                      "|---|---|---|---|\n";
    for (const auto& s : shift_order(rows))
        out += fmt::format("| {} | {:.2f} | {:.2f} | {:+.2f} |\n", s.model, s.observed_pct, s.mean, s.shift_pp);
    return out;
}

inline std::string shift_table_csv(const std::vector<BootstrapSummary>& rows) {
    std::string out = "model,observed_pct,bootstrap_mean_pct,shift_pp\n";
    for (const auto& s : shift_order(rows))
        out += fmt::format("{},{:.2f},{:.2f},{:+.2f}\n", csv_escape(s.model), s.observed_pct, s.mean, s.shift_pp);
    return out;
}

}  // namespace exameval
