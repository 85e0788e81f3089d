#pragma once

// Univariate score (LM) tests with expected parameter changes, univariate
// Wald tests, and the forward stepwise Wald search.
//
// For a candidate c fixed at its current value, with g = dF/dtheta at the
// constrained estimate and I the expected information of the augmented model:
//
//   R_c   = I_cc - I_cf I_ff^-1 I_fc     (score variance after estimating theta_f)
//   LM_c  = n g_c^2 / (4 R_c)
//   EPC_c = -g_c / (2 R_c)

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "panelwald/distributions.hpp"
#include "panelwald/errors.hpp"
#include "panelwald/estimator.hpp"
#include "panelwald/model_dsl.hpp"
#include "panelwald/model_matrices.hpp"

namespace panelwald {

struct LmCandidate {
    ParameterSpec param;
    double lm_chi2 = 0.0;
    double epc = 0.0;
    double gradient = 0.0;  // dF/dtheta_c at the constrained estimate
    double schur = 0.0;     // R_c
    int rank = 0;           // 1-based
};

struct LmDropped {
    ParameterSpec param;
    std::string reason;
};

struct LmScan {
    std::vector<LmCandidate> candidates;  // ranked
    std::vector<LmDropped> dropped;
};

namespace detail {

/// Inverse of a symmetric PSD matrix, pseudo-inverting numerically null directions.
inline Eigen::MatrixXd spd_pinv(const Eigen::MatrixXd& m) {
    if (m.rows() == 0) return m;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const auto& lam = es.eigenvalues();
    const double tol = 1e-12 * std::max(1.0, lam.cwiseAbs().maxCoeff());
    Eigen::VectorXd inv(lam.size());
    for (Eigen::Index i = 0; i < lam.size(); ++i) inv[i] = lam[i] > tol ? 1.0 / lam[i] : 0.0;
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Fills `rank` after sorting by LM, then |EPC|, then canonical parameter order.
inline void rank_candidates(std::vector<LmCandidate>& c) {
    std::sort(c.begin(), c.end(), [](const LmCandidate& a, const LmCandidate& b) {
        if (a.lm_chi2 != b.lm_chi2) return a.lm_chi2 > b.lm_chi2;
        if (std::abs(a.epc) != std::abs(b.epc)) return std::abs(a.epc) > std::abs(b.epc);
        return a.param < b.param;
    });
    for (std::size_t i = 0; i < c.size(); ++i) c[i].rank = static_cast<int>(i) + 1;
}

inline LmScan lm_scan(const ModelSpec& spec, const FitResult& fit, const std::vector<ParameterSpec>& candidates) {
    LmScan out;
    // Augment the model with every admissible candidate freed at its current value.
    std::vector<ParameterSpec> params = spec.params;
    std::vector<ParameterSpec> used;
    for (auto c : candidates) {
        c.canonicalize();
        if (spec.is_free(c.key())) {
            out.dropped.push_back({c, "already free"});
            continue;
        }
        if (std::any_of(used.begin(), used.end(), [&](const ParameterSpec& u) { return u.key() == c.key(); })) continue;
        // Evaluate at the value the current model fixes it to.
        double at = c.free ? 0.0 : c.value;
        if (auto i = spec.find(c.key())) at = spec.params[*i].value;
        const ParameterSpec freed = ParameterSpec::make(c.lhs, c.op, c.rhs);
        auto slot = std::find_if(params.begin(), params.end(), [&](const ParameterSpec& q) { return q.key() == freed.key(); });
        if (slot != params.end())
            *slot = freed;
        else
            params.push_back(freed);
        c.free = false;
        c.value = at;
        c.label.reset();
        used.push_back(c);
    }
    if (used.empty()) return out;

    ModelSpec aug = spec;
    aug.params = params;
    aug.vars = build_catalog(aug.params, aug.wave_overrides);
    const RamSystem ram = build_ram(aug);
    const SampleMoments M = select_moments(fit.moments, aug.vars.observed);

    Eigen::VectorXd theta(ram.size());
    std::vector<int> free_idx;
    std::vector<int> cand_idx(used.size(), -1);
    for (int j = 0; j < ram.size(); ++j) {
        const auto& name = ram.theta_names[j];
        auto it = std::find(fit.theta_names.begin(), fit.theta_names.end(), name);
        if (it != fit.theta_names.end()) {
            theta[j] = fit.theta_hat[it - fit.theta_names.begin()];
            free_idx.push_back(j);
            continue;
        }
        for (std::size_t c = 0; c < used.size(); ++c)
            if (used[c].key() == name) {
                theta[j] = used[c].value;
                cand_idx[c] = j;
            }
    }

    Eigen::VectorXd g;
    Eigen::MatrixXd info;
    try {
        RamEvaluation ev(ram, theta);
        g = discrepancy_gradient(ev, M.S);
        info = fisher_information(ev);
    } catch (const Error& e) {
        for (const auto& c : used) out.dropped.push_back({c, std::string("evaluation failed: ") + e.what()});
        return out;
    }

    const int nf = static_cast<int>(free_idx.size());
    Eigen::MatrixXd Iff(nf, nf);
    for (int a = 0; a < nf; ++a)
        for (int b = 0; b < nf; ++b) Iff(a, b) = info(free_idx[a], free_idx[b]);
    const Eigen::MatrixXd Iff_inv = detail::spd_pinv(Iff);
    const double n = static_cast<double>(M.n);

    for (std::size_t c = 0; c < used.size(); ++c) {
        const int j = cand_idx[c];
        if (j < 0) {
            out.dropped.push_back({used[c], "no free parameter slot"});
            continue;
        }
        Eigen::VectorXd Ifc(nf);
        for (int a = 0; a < nf; ++a) Ifc[a] = info(free_idx[a], j);
        const double icc = info(j, j);
        const double schur = icc - Ifc.dot(Iff_inv * Ifc);
        if (!(icc > 0.0) || !(schur > 1e-9 * icc)) {
            out.dropped.push_back({used[c], "numerically singular score variance"});
            continue;
        }
        LmCandidate lc;
        lc.param = used[c];
        lc.gradient = g[j];
        lc.schur = schur;
        lc.lm_chi2 = n * g[j] * g[j] / (4.0 * schur);
        lc.epc = -g[j] / (2.0 * schur);
        if (!std::isfinite(lc.lm_chi2) || !std::isfinite(lc.epc)) {
            out.dropped.push_back({used[c], "non-finite statistic"});
            continue;
        }
        out.candidates.push_back(lc);
    }
    rank_candidates(out.candidates);
    return out;
}

inline double epc_of(const LmCandidate& c) { return c.epc; }

enum class WaldVeto { NoConvergence, NonPdImplied, NegativeVariance, RankDeficient, Redundant };

inline std::string_view veto_name(WaldVeto v) {
    switch (v) {
        case WaldVeto::NoConvergence: return "NoConvergence";
        case WaldVeto::NonPdImplied: return "NonPdImplied";
        case WaldVeto::NegativeVariance: return "NegativeVariance";
        case WaldVeto::RankDeficient: return "RankDeficient";
        case WaldVeto::Redundant: return "Redundant";
    }
    return "?";
}

struct WaldStep {
    ParameterSpec param;
    double estimate = std::numeric_limits<double>::quiet_NaN();
    double se = std::numeric_limits<double>::quiet_NaN();
    double wald = std::numeric_limits<double>::quiet_NaN();
    double p_value = std::numeric_limits<double>::quiet_NaN();
    bool retained = false;
    int step_index = 0;
    std::optional<WaldVeto> veto;
};

/// Veto for a refit, counting only warnings absent from the reference fit.
inline std::optional<WaldVeto> refit_veto(const FitResult& fit, const std::set<FitWarning>& reference) {
    if (!fit.converged) return WaldVeto::NoConvergence;
    auto fresh = [&](FitWarning w) { return fit.has(w) && !reference.count(w); };
    if (fresh(FitWarning::NonPdImplied)) return WaldVeto::NonPdImplied;
    if (fresh(FitWarning::NegativeVariance)) return WaldVeto::NegativeVariance;
    if (fit.has(FitWarning::IllConditionedH)) return WaldVeto::RankDeficient;
    return std::nullopt;
}

/// Wald test of `param`, which must be free in the model that produced `fit`.
inline WaldStep wald_of(const FitResult& fit, const ParameterSpec& param, double alpha = 0.05,
                        const std::set<FitWarning>& reference = {}) {
    WaldStep w;
    w.param = param;
    w.param.canonicalize();
    w.veto = refit_veto(fit, reference);
    if (auto j = fit.index_of(w.param.key())) {
        w.estimate = fit.theta_hat[*j];
        w.se = fit.std_errors[*j];
        if (w.estimate == 0.0) {
            w.wald = 0.0;
        } else {
            const double z = w.estimate / w.se;
            w.wald = z * z;
        }
        w.p_value = chi2_sf(w.wald, 1.0);
    } else {
        w.veto = WaldVeto::NoConvergence;
    }
    if (!std::isfinite(w.wald) && !w.veto) w.veto = WaldVeto::RankDeficient;
    w.retained = !w.veto && std::isfinite(w.p_value) && w.p_value < alpha;
    return w;
}

/// Start values reproducing `fit` (by parameter key and shared label).
inline std::map<std::string, double> warm_start(const FitResult& fit) {
    std::map<std::string, double> s;
    for (const auto& [key, j] : fit.theta_of_key) s[key] = fit.theta_hat[j];
    for (std::size_t j = 0; j < fit.theta_names.size(); ++j) s[fit.theta_names[j]] = fit.theta_hat[static_cast<Eigen::Index>(j)];
    return s;
}

struct StepwiseResult {
    std::vector<WaldStep> steps;
    ModelSpec final_spec;
    FitResult final_fit;
};

/// Decides whether a candidate still adds something to the current model.
using StepAdmissible = std::function<bool(const ModelSpec& current, const ParameterSpec& candidate)>;

/// Adds survivors one at a time in the given order, keeping each iff its Wald
/// p-value is below alpha and the refit raised no new problem. Candidates that
/// `admissible` rejects against the current model are skipped with a Redundant veto.
inline StepwiseResult forward_stepwise_wald(const ModelSpec& spec, const FitResult& base_fit,
                                            const std::vector<ParameterSpec>& survivors, double alpha,
                                            const std::map<std::string, double>& epc = {},
                                            const FitOptions& opts = {}, const StepAdmissible& admissible = {}) {
    StepwiseResult out;
    out.final_spec = spec;
    out.final_fit = base_fit;
    const std::set<FitWarning> reference = base_fit.warnings;
    int step = 0;
    for (const auto& cand : survivors) {
        ParameterSpec c = cand;
        c.canonicalize();
        ++step;
        WaldStep w;
        w.param = c;
        w.step_index = step;
        if (admissible && !admissible(out.final_spec, c)) {
            w.veto = WaldVeto::Redundant;
            out.steps.push_back(w);
            continue;
        }
        const ModelSpec trial = with_free(out.final_spec, c);
        FitOptions o = opts;
        o.start = warm_start(out.final_fit);
        if (auto it = epc.find(c.key()); it != epc.end()) o.start[c.key()] = it->second;
        try {
            FitResult f = fit(trial, base_fit.moments, o);
            w = wald_of(f, c, alpha, reference);
            w.step_index = step;
            if (w.retained) {
                out.final_spec = trial;
                out.final_fit = std::move(f);
            }
        } catch (const Error&) {
            w.veto = WaldVeto::NoConvergence;
            w.retained = false;
        }
        out.steps.push_back(w);
    }
    return out;
}

inline StepwiseResult forward_stepwise_wald(const ModelSpec& spec, const SampleMoments& S,
                                            const std::vector<ParameterSpec>& survivors, double alpha,
                                            const std::map<std::string, double>& epc = {},
                                            const FitOptions& opts = {}) {
    return forward_stepwise_wald(spec, fit(spec, S, opts), survivors, alpha, epc, opts);
}

}  // namespace panelwald
