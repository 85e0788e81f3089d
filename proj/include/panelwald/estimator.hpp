#pragma once

// Normal-theory maximum likelihood for covariance structures.
//
//   F(theta) = log|Sigma| - log|S| + tr(S Sigma^-1) - p,   T = n F(theta_hat)
//
// minimized by BFGS with a strong-Wolfe line search. The inverse Hessian is
// seeded (and reset after a failed search) from the expected information,
// since E[d2F] = 2 I(theta) at the truth.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "panelwald/distributions.hpp"
#include "panelwald/errors.hpp"
#include "panelwald/model_dsl.hpp"
#include "panelwald/model_matrices.hpp"

namespace panelwald {

struct SampleMoments {
    Eigen::MatrixXd S;  // divisor n
    std::size_t n = 0;
    std::vector<std::string> var_names;

    int p() const { return static_cast<int>(S.rows()); }
};

namespace detail {

inline double logdet_pd(const Eigen::MatrixXd& m, const char* which) {
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) throw NotPositiveDefinite(which);
    double ld = 0.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double d = llt.matrixL()(i, i);
        if (!(d > 0.0)) throw NotPositiveDefinite(which);
        ld += 2.0 * std::log(d);
    }
    return ld;
}

}  // namespace detail

/// Moments from a covariance matrix that is already in hand.
inline SampleMoments moments_from_covariance(Eigen::MatrixXd S, std::size_t n, std::vector<std::string> names) {
    if (S.rows() != S.cols() || static_cast<std::size_t>(S.rows()) != names.size())
        throw Error("covariance matrix does not match the variable names");
    if (n < static_cast<std::size_t>(S.rows()) + 1)
        throw Error("need at least p + 1 = " + std::to_string(S.rows() + 1) + " cases, got " + std::to_string(n));
    S = 0.5 * (S + S.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) throw NonPdSampleCovariance();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S, Eigen::EigenvaluesOnly);
    if (!(es.eigenvalues().minCoeff() > 1e-12 * std::max(1.0, es.eigenvalues().maxCoeff())))
        throw NonPdSampleCovariance();
    return {std::move(S), n, std::move(names)};
}

/// Centered cross-products over n (the ML estimator).
inline SampleMoments sample_moments(const Eigen::MatrixXd& data, std::vector<std::string> names) {
    const auto n = static_cast<std::size_t>(data.rows());
    if (n < static_cast<std::size_t>(data.cols()) + 1)
        throw Error("need at least p + 1 = " + std::to_string(data.cols() + 1) + " rows, got " + std::to_string(n));
    const Eigen::MatrixXd centered = data.rowwise() - data.colwise().mean();
    return moments_from_covariance(centered.transpose() * centered / static_cast<double>(n), n, std::move(names));
}

/// Reorders (and subsets) moments to the given variable order.
inline SampleMoments select_moments(const SampleMoments& m, const std::vector<std::string>& names) {
    std::vector<int> idx;
    for (const auto& v : names) {
        auto it = std::find(m.var_names.begin(), m.var_names.end(), v);
        if (it == m.var_names.end()) throw MissingColumn(v);
        idx.push_back(static_cast<int>(it - m.var_names.begin()));
    }
    SampleMoments out;
    out.n = m.n;
    out.var_names = names;
    out.S.resize(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < idx.size(); ++j) out.S(i, j) = m.S(idx[i], idx[j]);
    return out;
}

inline double ml_discrepancy(const ImpliedCovariance& sigma, const SampleMoments& S) {
    if (sigma.sigma.rows() != S.S.rows()) throw Error("Sigma and S differ in dimension");
    if (!sigma.is_pd) throw NotPositiveDefinite("Sigma");
    const double ld_s = detail::logdet_pd(S.S, "S");
    Eigen::LLT<Eigen::MatrixXd> llt(sigma.sigma);
    const double tr = llt.solve(S.S).trace();
    return sigma.logdet - ld_s + tr - static_cast<double>(S.p());
}

/// dF/dtheta_j = tr[(Sigma^-1 - Sigma^-1 S Sigma^-1) dSigma/dtheta_j] for every theta of `ev`.
inline Eigen::VectorXd discrepancy_gradient(const RamEvaluation& ev, const Eigen::MatrixXd& S) {
    if (!ev.implied().is_pd) throw NotPositiveDefinite("Sigma");
    Eigen::LLT<Eigen::MatrixXd> llt(ev.implied().sigma);
    const Eigen::MatrixXd P = llt.solve(Eigen::MatrixXd::Identity(S.rows(), S.cols()));
    const Eigen::MatrixXd W = P - P * S * P;
    const Eigen::MatrixXd M = W * ev.bank();
    const int q = ev.ram().size();
    Eigen::VectorXd g(q);
    for (int j = 0; j < q; ++j) {
        double s = 0.0;
        for (const auto& d : ev.dyads(j)) s += 2.0 * d.coef * ev.bank().col(d.a).dot(M.col(d.b));
        g[j] = s;
    }
    return g;
}

enum class FitWarning { NegativeVariance, NonPdImplied, MaxIterReached, IllConditionedH, LineSearchStalled };

inline std::string_view warning_name(FitWarning w) {
    switch (w) {
        case FitWarning::NegativeVariance: return "NegativeVariance";
        case FitWarning::NonPdImplied: return "NonPdImplied";
        case FitWarning::MaxIterReached: return "MaxIterReached";
        case FitWarning::IllConditionedH: return "IllConditionedH";
        case FitWarning::LineSearchStalled: return "LineSearchStalled";
    }
    return "?";
}

struct FitOptions {
    double grad_tol = 1e-6;
    int max_iter = 500;
    int max_jitter = 10;
    /// Start-value overrides by parameter key ("WFX2~WFX1") or shared label ("@lx").
    std::map<std::string, double> start;
};

struct FitResult {
    std::vector<std::string> theta_names;
    std::map<std::string, int> theta_of_key;
    Eigen::VectorXd theta_hat;
    Eigen::VectorXd gradient;
    Eigen::MatrixXd H;  // expected information per observation
    Eigen::VectorXd std_errors;
    Eigen::MatrixXd sigma;
    double F_min = std::numeric_limits<double>::quiet_NaN();
    double T_ml = std::numeric_limits<double>::quiet_NaN();
    int df = 0;
    double p_value = std::numeric_limits<double>::quiet_NaN();
    bool converged = false;
    int iterations = 0;
    std::set<FitWarning> warnings;
    std::vector<double> f_trace;  // F after each accepted step
    SampleMoments moments;

    std::optional<int> index_of(const std::string& key) const {
        auto it = theta_of_key.find(key);
        if (it == theta_of_key.end()) return std::nullopt;
        return it->second;
    }
    double estimate(const std::string& key) const { return theta_hat[index_of(key).value()]; }
    double se(const std::string& key) const { return std_errors[index_of(key).value()]; }
    bool has(FitWarning w) const { return warnings.count(w) > 0; }
};

namespace detail {

struct Objective {
    const RamSystem& ram;
    const Eigen::MatrixXd& S;
    double logdet_s;

    struct Value {
        bool ok = false;
        double f = std::numeric_limits<double>::infinity();
        Eigen::VectorXd g;
    };

    Value operator()(const Eigen::VectorXd& theta) const {
        Value v;
        try {
            RamEvaluation ev(ram, theta);
            if (!ev.implied().is_pd) return v;
            Eigen::LLT<Eigen::MatrixXd> llt(ev.implied().sigma);
            v.f = ev.implied().logdet - logdet_s + llt.solve(S).trace() - static_cast<double>(S.rows());
            v.g = discrepancy_gradient(ev, S);
            v.ok = std::isfinite(v.f) && v.g.allFinite();
            if (!v.ok) v.f = std::numeric_limits<double>::infinity();
        } catch (const Error&) {
            v.ok = false;
        }
        return v;
    }
};

/// (2 I)^-1, falling back to a scaled identity when the information is singular.
inline Eigen::MatrixXd scoring_inverse(const RamSystem& ram, const Eigen::VectorXd& theta) {
    const int q = ram.size();
    try {
        Eigen::MatrixXd info = 2.0 * fisher_information(ram, theta);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(info);
        const auto& ev = es.eigenvalues();
        if (ev.minCoeff() > 1e-10 * std::max(1.0, ev.maxCoeff()))
            return es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
        const double scale = std::max(1e-8, info.diagonal().maxCoeff());
        return Eigen::MatrixXd::Identity(q, q) / scale;
    } catch (const Error&) {
        return Eigen::MatrixXd::Identity(q, q);
    }
}

struct LineSearchResult {
    bool ok = false;
    double step = 0.0;
    Eigen::VectorXd x;
    Objective::Value val;
};

/// Strong-Wolfe line search (bracketing + zoom with safeguarded quadratic steps).
inline LineSearchResult wolfe_search(const Objective& obj, const Eigen::VectorXd& x, const Objective::Value& v0,
                                     const Eigen::VectorXd& d) {
    constexpr double c1 = 1e-4, c2 = 0.9;
    const double dphi0 = v0.g.dot(d);
    struct Point {
        double a;
        Objective::Value v;
        double dphi;
    };
    auto eval = [&](double a) {
        Point p{a, obj(x + a * d), 0.0};
        p.dphi = p.v.ok ? p.v.g.dot(d) : std::numeric_limits<double>::quiet_NaN();
        return p;
    };
    auto armijo_fails = [&](const Point& p) { return !p.v.ok || p.v.f > v0.f + c1 * p.a * dphi0; };
    auto curvature_ok = [&](const Point& p) { return std::abs(p.dphi) <= -c2 * dphi0; };

    auto done = [&](const Point& p) {
        LineSearchResult r;
        r.ok = true;
        r.step = p.a;
        r.x = x + p.a * d;
        r.val = p.v;
        return r;
    };

    auto zoom = [&](Point lo, Point hi) -> LineSearchResult {
        for (int it = 0; it < 40; ++it) {
            const double width = hi.a - lo.a;
            double a;
            if (hi.v.ok) {
                const double denom = 2.0 * (hi.v.f - lo.v.f - lo.dphi * width);
                a = denom > 0.0 ? lo.a - lo.dphi * width * width / denom : lo.a + 0.5 * width;
            } else {
                a = lo.a + 0.5 * width;
            }
            const double lo_b = lo.a + 0.1 * width, hi_b = hi.a - 0.1 * width;
            a = std::clamp(a, std::min(lo_b, hi_b), std::max(lo_b, hi_b));
            Point p = eval(a);
            if (armijo_fails(p) || p.v.f >= lo.v.f) {
                hi = p;
            } else {
                if (curvature_ok(p)) return done(p);
                if (p.dphi * (hi.a - lo.a) >= 0.0) hi = lo;
                lo = p;
            }
            if (std::abs(hi.a - lo.a) < 1e-14 * std::max(1.0, std::abs(lo.a))) break;
        }
        // Accept sufficient decrease without the curvature condition.
        if (lo.a > 0.0 && lo.v.ok && lo.v.f < v0.f) return done(lo);
        return {};
    };

    Point prev{0.0, v0, dphi0};
    double a = 1.0;
    for (int it = 0; it < 40; ++it) {
        Point p = eval(a);
        if (armijo_fails(p) || (it > 0 && p.v.f >= prev.v.f)) return zoom(prev, p);
        if (curvature_ok(p)) return done(p);
        if (p.dphi >= 0.0) return zoom(p, prev);
        prev = p;
        a *= 2.0;
    }
    if (prev.a > 0.0) return done(prev);
    return {};
}

}  // namespace detail

/// Rebuilds each theta's role from the spec: returns the first parameter bound to it.
inline std::vector<ParameterSpec> theta_params(const ModelSpec& spec, const RamSystem& ram) {
    std::vector<ParameterSpec> out(ram.size());
    std::vector<bool> seen(ram.size(), false);
    for (const auto& p : spec.params) {
        auto it = ram.theta_of_key.find(p.key());
        if (it == ram.theta_of_key.end() || seen[it->second]) continue;
        out[it->second] = p;
        seen[it->second] = true;
    }
    return out;
}

inline Eigen::VectorXd start_values(const ModelSpec& spec, const RamSystem& ram, const SampleMoments& S,
                                    const FitOptions& opts, int jitter = 0) {
    const auto roles = theta_params(spec, ram);
    const double latent_var = 0.25 * S.S.diagonal().mean();
    const double bump = 1.0 + 0.1 * jitter;
    Eigen::VectorXd th(ram.size());
    for (int j = 0; j < ram.size(); ++j) {
        const auto& p = roles[j];
        double v = 0.0;
        if (p.op == Op::Loading) {
            v = 1.0;
        } else if (p.is_variance()) {
            const int idx = ram.var_index(p.lhs);
            v = bump * (idx < ram.n_observed ? 0.5 * S.S(idx, idx) : latent_var);
        }
        if (auto it = opts.start.find(ram.theta_names[j]); it != opts.start.end()) v = it->second;
        if (auto it = opts.start.find(p.key()); it != opts.start.end()) v = it->second;
        th[j] = v;
    }
    return th;
}

/// Heywood-type warnings at theta_hat: negative variance cells of S, non-PD Sigma.
inline std::set<FitWarning> heywood_check(const FitResult& fit, const ModelSpec& spec) {
    std::set<FitWarning> out;
    const RamSystem ram = build_ram(spec);
    if (fit.theta_hat.size() != ram.size() || !fit.theta_hat.allFinite()) {
        out.insert(FitWarning::NonPdImplied);
        return out;
    }
    const Eigen::MatrixXd s = ram.S(fit.theta_hat);
    for (Eigen::Index i = 0; i < s.rows(); ++i)
        if (s(i, i) < 0.0) out.insert(FitWarning::NegativeVariance);
    try {
        if (!implied_sigma_ram(ram, fit.theta_hat).is_pd) out.insert(FitWarning::NonPdImplied);
    } catch (const Error&) {
        out.insert(FitWarning::NonPdImplied);
    }
    return out;
}

inline FitResult fit(const ModelSpec& spec, const SampleMoments& moments_in, const FitOptions& opts = {}) {
    const RamSystem ram = build_ram(spec);
    FitResult res;
    res.moments = select_moments(moments_in, spec.vars.observed);
    const SampleMoments& M = res.moments;
    res.theta_names = ram.theta_names;
    res.theta_of_key = ram.theta_of_key;
    const int q = ram.size();
    const int p = M.p();
    res.df = p * (p + 1) / 2 - q;

    const detail::Objective obj{ram, M.S, detail::logdet_pd(M.S, "S")};

    Eigen::VectorXd x;
    detail::Objective::Value val;
    for (int k = 0;; ++k) {
        x = start_values(spec, ram, M, opts, k);
        val = obj(x);
        if (val.ok) break;
        if (k >= opts.max_jitter) throw StartValueFailure();
    }

    Eigen::MatrixXd Hinv = detail::scoring_inverse(ram, x);
    bool fresh_reset = true;
    int iter = 0;
    for (;;) {
        if (val.g.size() == 0 || val.g.cwiseAbs().maxCoeff() < opts.grad_tol) {
            res.converged = true;
            break;
        }
        if (iter >= opts.max_iter) {
            res.warnings.insert(FitWarning::MaxIterReached);
            break;
        }
        Eigen::VectorXd d = -Hinv * val.g;
        if (!(val.g.dot(d) < 0.0)) {
            Hinv = detail::scoring_inverse(ram, x);
            fresh_reset = true;
            d = -Hinv * val.g;
            if (!(val.g.dot(d) < 0.0)) d = -val.g;
        }
        auto ls = detail::wolfe_search(obj, x, val, d);
        if (!ls.ok) {
            if (fresh_reset) {
                res.warnings.insert(FitWarning::LineSearchStalled);
                break;
            }
            Hinv = detail::scoring_inverse(ram, x);
            fresh_reset = true;
            continue;
        }
        const Eigen::VectorXd s = ls.x - x;
        const Eigen::VectorXd y = ls.val.g - val.g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(q, q);
            Hinv = (I - rho * s * y.transpose()) * Hinv * (I - rho * y * s.transpose()) + rho * s * s.transpose();
        }
        x = ls.x;
        val = ls.val;
        res.f_trace.push_back(val.f);
        fresh_reset = false;
        ++iter;
    }

    res.iterations = iter;
    res.theta_hat = x;
    res.gradient = val.g;
    res.F_min = val.f;
    res.T_ml = static_cast<double>(M.n) * res.F_min;
    res.p_value = res.df > 0 ? chi2_sf(res.T_ml, res.df) : 1.0;

    RamEvaluation ev(ram, x);
    res.sigma = ev.implied().sigma;
    res.std_errors = Eigen::VectorXd::Constant(q, std::numeric_limits<double>::quiet_NaN());
    if (ev.implied().is_pd) {
        res.H = fisher_information(ev);
        if (q > 0) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(res.H);
            const auto& lam = es.eigenvalues();
            if (lam.minCoeff() > 1e-12 * std::max(1.0, lam.maxCoeff())) {
                const Eigen::MatrixXd inv = es.eigenvectors() * lam.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
                res.std_errors = (inv.diagonal() / static_cast<double>(M.n)).cwiseSqrt();
            } else {
                res.warnings.insert(FitWarning::IllConditionedH);
            }
        }
    } else {
        res.H = Eigen::MatrixXd::Constant(q, q, std::numeric_limits<double>::quiet_NaN());
    }
    for (auto w : heywood_check(res, spec)) res.warnings.insert(w);
    return res;
}

/// The independence model (free variances only), solved in closed form.
inline FitResult fit_independence(const SampleMoments& m) {
    FitResult res;
    res.moments = m;
    const int p = m.p();
    res.theta_hat = m.S.diagonal();
    for (int i = 0; i < p; ++i) {
        const std::string key = m.var_names[i] + "~~" + m.var_names[i];
        res.theta_names.push_back(key);
        res.theta_of_key[key] = i;
    }
    res.gradient = Eigen::VectorXd::Zero(p);
    res.sigma = Eigen::MatrixXd(m.S.diagonal().asDiagonal());
    res.F_min = m.S.diagonal().array().log().sum() - detail::logdet_pd(m.S, "S");
    res.T_ml = static_cast<double>(m.n) * res.F_min;
    res.df = p * (p - 1) / 2;
    res.p_value = res.df > 0 ? chi2_sf(res.T_ml, res.df) : 1.0;
    res.H = Eigen::MatrixXd(0.5 * m.S.diagonal().array().square().inverse().matrix().asDiagonal());
    res.std_errors = (m.S.diagonal().array().square() * 2.0 / static_cast<double>(m.n)).sqrt().matrix();
    res.converged = true;
    return res;
}

struct FitIndices {
    double chi2 = 0.0;
    int df = 0;
    double nfi = 1.0;
    double cfi = 1.0;
    double tli = 1.0;
    double rmsea = 0.0;
};

inline FitIndices fit_indices(const FitResult& fit, const FitResult& baseline) {
    FitIndices fi;
    const double tm = fit.T_ml, tb = baseline.T_ml;
    const double dm = fit.df, db = baseline.df;
    const double n = static_cast<double>(fit.moments.n);
    fi.chi2 = tm;
    fi.df = fit.df;
    fi.nfi = tb > 0.0 ? std::clamp((tb - tm) / tb, 0.0, 1.0) : 1.0;
    const double num = std::max(tm - dm, 0.0);
    const double den = std::max({tb - db, tm - dm, 0.0});
    fi.cfi = (fit.df == 0 || den == 0.0) ? 1.0 : std::clamp(1.0 - num / den, 0.0, 1.0);
    if (fit.df == 0 || db == 0.0 || tb / db == 1.0) {
        fi.tli = 1.0;
    } else {
        fi.tli = std::clamp((tb / db - tm / dm) / (tb / db - 1.0), 0.0, 1.0);
    }
    fi.rmsea = (fit.df == 0 || n <= 0.0) ? 0.0 : std::sqrt(num / (dm * n));
    return fi;
}

struct ParameterRow {
    ParameterSpec param;
    int theta = -1;  // -1 for fixed parameters
    double estimate = 0.0;
    double se = std::numeric_limits<double>::quiet_NaN();
    double z = std::numeric_limits<double>::quiet_NaN();
    double p = std::numeric_limits<double>::quiet_NaN();
};

/// One row per (non-intercept) parameter of `spec`, in spec order.
inline std::vector<ParameterRow> parameter_table(const ModelSpec& spec, const FitResult& fit) {
    std::vector<ParameterRow> rows;
    for (const auto& prm : spec.params) {
        if (prm.op == Op::Intercept) continue;
        ParameterRow r;
        r.param = prm;
        if (auto j = fit.index_of(prm.key()); prm.free && j) {
            r.theta = *j;
            r.estimate = fit.theta_hat[*j];
            r.se = fit.std_errors[*j];
            r.z = r.estimate / r.se;
            r.p = normal_two_sided_p(r.z);
        } else {
            r.estimate = prm.value;
        }
        rows.push_back(r);
    }
    return rows;
}

}  // namespace panelwald
