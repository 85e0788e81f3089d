#pragma once

// Two-stage LM-Wald search for omitted parameters.
//
// Stage one ranks every admissible fixed parameter by its LM statistic, takes
// the top_k and filters out candidates that break temporal order or conflict
// with the model, duplicate an existing relation, have a small EPC, or cause
// refit problems when added alone. Stage two adds the survivors one by one in LM order and keeps those
// with a significant Wald test.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "panelwald/estimator.hpp"
#include "panelwald/model_dsl.hpp"
#include "panelwald/parallel.hpp"
#include "panelwald/score_wald.hpp"

namespace panelwald {

struct TwoSlwConfig {
    int top_k = 25;
    double epc_min = 0.1;
    double alpha = 0.05;
    bool enforce_temporal = true;
    FitOptions fit_options;
};

enum class FilterReason {
    TemporalOrderViolation,
    ConflictsWithSpec,
    LatentToOwnIndicator,
    RedundantRelation,
    SmallEpc,
    CausesNonConvergence,
    CausesNonPd,
    CausesNegativeVariance,
    BelowTopK,
};

inline std::string_view reason_name(FilterReason r) {
    switch (r) {
        case FilterReason::TemporalOrderViolation: return "TemporalOrderViolation";
        case FilterReason::ConflictsWithSpec: return "ConflictsWithSpec";
        case FilterReason::LatentToOwnIndicator: return "LatentToOwnIndicator";
        case FilterReason::RedundantRelation: return "RedundantRelation";
        case FilterReason::SmallEpc: return "SmallEpc";
        case FilterReason::CausesNonConvergence: return "CausesNonConvergence";
        case FilterReason::CausesNonPd: return "CausesNonPd";
        case FilterReason::CausesNegativeVariance: return "CausesNegativeVariance";
        case FilterReason::BelowTopK: return "BelowTopK";
    }
    return "?";
}

struct FilterDisposition {
    LmCandidate candidate;
    bool kept = false;
    std::optional<FilterReason> reason;
};

namespace detail {

inline std::string stem_of(const std::string& v) {
    std::size_t end = v.size();
    while (end > 0 && std::isdigit(static_cast<unsigned char>(v[end - 1]))) --end;
    return v.substr(0, end);
}

/// True if `u` reaches `v` (or the reverse) through regressions between variables of the same stem.
inline bool ar_linked(const ModelSpec& spec, const std::string& u, const std::string& v) {
    if (stem_of(u) != stem_of(v) || stem_of(u).empty()) return false;
    std::map<std::string, std::vector<std::string>> parents;
    for (const auto& p : spec.params)
        if (p.op == Op::Regression && (p.free || p.value != 0.0) && stem_of(p.lhs) == stem_of(p.rhs))
            parents[p.lhs].push_back(p.rhs);
    auto reaches = [&](const std::string& from, const std::string& to) {
        std::vector<std::string> stack{from};
        std::set<std::string> seen;
        while (!stack.empty()) {
            auto x = stack.back();
            stack.pop_back();
            if (x == to) return true;
            if (!seen.insert(x).second) continue;
            for (const auto& pa : parents[x]) stack.push_back(pa);
        }
        return false;
    };
    return reaches(u, v) || reaches(v, u);
}

inline bool indicator_of(const ModelSpec& spec, const std::string& latent, const std::string& obs) {
    for (const auto& p : spec.params)
        if (p.op == Op::Loading && p.lhs == latent && p.rhs == obs && (p.free || p.value != 0.0)) return true;
    return false;
}

inline bool variance_fixed_zero(const ModelSpec& spec, const std::string& v) {
    auto i = spec.find(v + "~~" + v);
    return i && !spec.params[*i].free && spec.params[*i].value == 0.0;
}

inline bool path_present(const ModelSpec& spec, const std::string& key) {
    auto i = spec.find(key);
    return i && (spec.params[*i].free || spec.params[*i].value != 0.0);
}

/// Any free (or nonzero fixed) regression or covariance between u and v.
inline bool related(const ModelSpec& spec, const std::string& u, const std::string& v) {
    return path_present(spec, u + "~" + v) || path_present(spec, v + "~" + u) ||
           path_present(spec, ParameterSpec::make(u, Op::Covariance, v).key());
}

/// Reasons that follow from the model structure alone.
inline std::optional<FilterReason> structural_reason(const ModelSpec& spec, const ParameterSpec& c, bool temporal) {
    const auto& cat = spec.vars;
    // Temporal order: effects may not run from a later wave to an earlier one.
    if (temporal) {
        std::string from, to;
        if (c.op == Op::Regression) from = c.rhs, to = c.lhs;
        if (c.op == Op::Loading) from = c.lhs, to = c.rhs;
        if (!from.empty()) {
            auto wf = cat.wave(from), wt = cat.wave(to);
            if (wf && wt && *wf > *wt) return FilterReason::TemporalOrderViolation;
        }
    }
    if (c.op == Op::Loading && cat.is_observed(c.rhs) && cat.role(c.rhs) == Role::Indicator)
        return FilterReason::LatentToOwnIndicator;
    if ((c.op == Op::Regression || c.op == Op::Covariance) &&
        (indicator_of(spec, c.lhs, c.rhs) || indicator_of(spec, c.rhs, c.lhs)))
        return FilterReason::LatentToOwnIndicator;
    // A variable whose residual variance is fixed at zero is fully explained by
    // the model; it cannot take on a residual covariance or a new predictor.
    if (c.op == Op::Covariance && (variance_fixed_zero(spec, c.lhs) || variance_fixed_zero(spec, c.rhs)))
        return FilterReason::ConflictsWithSpec;
    if (c.op == Op::Regression && variance_fixed_zero(spec, c.lhs)) return FilterReason::ConflictsWithSpec;
    // Redundant or meaningless relations.
    if (c.lhs == c.rhs) return FilterReason::RedundantRelation;
    if (path_present(spec, c.key())) return FilterReason::RedundantRelation;
    const auto cell = cell_of(c);
    for (const auto& p : spec.params)
        if ((p.free || p.value != 0.0) && p.op != Op::Intercept && cell_of(p) == cell) return FilterReason::RedundantRelation;
    if (c.op == Op::Regression && path_present(spec, c.rhs + "~" + c.lhs)) return FilterReason::RedundantRelation;
    if (c.op == Op::Loading && path_present(spec, c.lhs + "~" + c.rhs)) return FilterReason::RedundantRelation;
    // A residual covariance alongside a regression between the same pair.
    if (c.op == Op::Covariance && (path_present(spec, c.lhs + "~" + c.rhs) || path_present(spec, c.rhs + "~" + c.lhs)))
        return FilterReason::RedundantRelation;
    if (c.op == Op::Covariance && ar_linked(spec, c.lhs, c.rhs)) return FilterReason::RedundantRelation;
    // Relating a variable to an indicator of a factor it is already linked to
    // re-tests that link through the indicator.
    if (c.op == Op::Regression || c.op == Op::Covariance) {
        for (const auto& [u, obs] : {std::pair{c.lhs, c.rhs}, std::pair{c.rhs, c.lhs}}) {
            if (!cat.is_observed(obs)) continue;
            for (const auto& f : cat.latent)
                if (f != u && indicator_of(spec, f, obs) && related(spec, u, f)) return FilterReason::RedundantRelation;
        }
    }
    return std::nullopt;
}

}  // namespace detail

/// Test-adds `c` alone to the model and refits; returns the veto reason if any.
inline std::optional<FilterReason> refit_problem(const ModelSpec& spec, const FitResult& base, const LmCandidate& c,
                                                 const FitOptions& opts) {
    FitOptions o = opts;
    o.start = warm_start(base);
    o.start[c.param.key()] = c.epc;
    try {
        const FitResult f = fit(with_free(spec, c.param), base.moments, o);
        if (!f.converged) return FilterReason::CausesNonConvergence;
        if (f.has(FitWarning::NonPdImplied) && !base.has(FitWarning::NonPdImplied)) return FilterReason::CausesNonPd;
        if (f.has(FitWarning::NegativeVariance) && !base.has(FitWarning::NegativeVariance))
            return FilterReason::CausesNegativeVariance;
    } catch (const Error&) {
        return FilterReason::CausesNonConvergence;
    }
    return std::nullopt;
}

/// One disposition per entry of the ranked LM table, in rank order.
inline std::vector<FilterDisposition> stage_one(const ModelSpec& spec, const FitResult& fit_,
                                                const std::vector<LmCandidate>& lm_table, const TwoSlwConfig& cfg) {
    std::vector<FilterDisposition> out;
    for (const auto& c : lm_table) {
        FilterDisposition d;
        d.candidate = c;
        if (static_cast<int>(out.size()) >= cfg.top_k) {
            d.reason = FilterReason::BelowTopK;
        } else if (auto r = detail::structural_reason(spec, c.param, cfg.enforce_temporal)) {
            d.reason = r;
        } else if (std::abs(c.epc) < cfg.epc_min) {
            d.reason = FilterReason::SmallEpc;
        }
        out.push_back(d);
    }
    // The refit check is the costly one, so it runs last on what is left.
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (!out[i].reason) pending.push_back(i);
    std::vector<std::optional<FilterReason>> verdict(pending.size());
    parallel_for(pending.size(), [&](std::size_t k) {
        verdict[k] = refit_problem(spec, fit_, out[pending[k]].candidate, cfg.fit_options);
    });
    for (std::size_t k = 0; k < pending.size(); ++k) out[pending[k]].reason = verdict[k];
    for (auto& d : out) d.kept = !d.reason;
    return out;
}

inline StepwiseResult stage_two(const ModelSpec& spec, const FitResult& base,
                                const std::vector<FilterDisposition>& stage_one_log, const TwoSlwConfig& cfg) {
    std::vector<ParameterSpec> kept;
    std::map<std::string, double> epc;
    for (const auto& d : stage_one_log) {
        if (!d.kept) continue;
        kept.push_back(d.candidate.param);
        epc[d.candidate.param.key()] = d.candidate.epc;
    }
    // Earlier retentions can make a later survivor redundant.
    const StepAdmissible admissible = [](const ModelSpec& current, const ParameterSpec& c) {
        const auto r = detail::structural_reason(current, c, false);
        return !r || *r != FilterReason::RedundantRelation;
    };
    return forward_stepwise_wald(spec, base, kept, cfg.alpha, epc, cfg.fit_options, admissible);
}

struct CoefficientDelta {
    std::string key;
    double before = 0.0;
    double after = 0.0;
    double diff = 0.0;
};

struct ModelComparison {
    std::vector<CoefficientDelta> deltas;
    double delta_chi2 = 0.0;  // after - before
    int delta_df = 0;
};

/// Free regressions linking consecutive waves: the AR and CL paths.
inline std::vector<std::string> lagged_paths(const ModelSpec& spec) {
    std::vector<std::string> out;
    for (const auto& p : spec.params) {
        if (p.op != Op::Regression || !p.free) continue;
        auto wl = spec.vars.wave(p.lhs), wr = spec.vars.wave(p.rhs);
        if (wl && wr && *wl == *wr + 1) out.push_back(p.key());
    }
    return out;
}

inline ModelComparison compare_models(const FitResult& before, const FitResult& after, const ModelSpec& spec) {
    ModelComparison mc;
    for (const auto& key : lagged_paths(spec)) {
        auto i = before.index_of(key), j = after.index_of(key);
        if (!i || !j) throw LabelMismatch(key);
        CoefficientDelta d{key, before.theta_hat[*i], after.theta_hat[*j], 0.0};
        d.diff = d.after - d.before;
        mc.deltas.push_back(d);
    }
    mc.delta_chi2 = after.T_ml - before.T_ml;
    mc.delta_df = after.df - before.df;
    return mc;
}

struct TwoSlwReport {
    LmScan lm;
    std::vector<FilterDisposition> stage_one;
    std::vector<WaldStep> stage_two;
    std::vector<ParameterSpec> retained;
    ModelSpec improved_spec;
    FitResult baseline_fit;
    FitResult improved_fit;
    FitIndices baseline_indices;
    FitIndices improved_indices;
    ModelComparison comparison;
    TwoSlwConfig config;
};

inline TwoSlwReport run_2slw(const ModelSpec& spec, const SampleMoments& moments, const TwoSlwConfig& cfg = {}) {
    TwoSlwReport rep;
    rep.config = cfg;
    rep.baseline_fit = fit(spec, moments, cfg.fit_options);
    const FitResult independence = fit_independence(rep.baseline_fit.moments);
    rep.baseline_indices = fit_indices(rep.baseline_fit, independence);
    rep.lm = lm_scan(spec, rep.baseline_fit, enumerate_candidates(spec));
    rep.stage_one = stage_one(spec, rep.baseline_fit, rep.lm.candidates, cfg);
    auto sw = stage_two(spec, rep.baseline_fit, rep.stage_one, cfg);
    rep.stage_two = sw.steps;
    for (const auto& s : sw.steps)
        if (s.retained) rep.retained.push_back(s.param);
    rep.improved_spec = sw.final_spec;
    rep.improved_fit = sw.final_fit;
    rep.improved_indices = fit_indices(rep.improved_fit, independence);
    rep.comparison = compare_models(rep.baseline_fit, rep.improved_fit, spec);
    return rep;
}

}  // namespace panelwald
