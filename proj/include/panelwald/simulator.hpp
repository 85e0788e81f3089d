#pragma once

// Monte Carlo harness: draw z_i = R eps_i with R R' = Sigma, fit, summarize.
// Replication r draws from Philox stream r under the run seed, and results are
// reduced in replication order, so summaries do not depend on thread count.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "panelwald/errors.hpp"
#include "panelwald/estimator.hpp"
#include "panelwald/parallel.hpp"
#include "panelwald/rng.hpp"
#include "panelwald/scenarios.hpp"
#include "panelwald/twoslw.hpp"

namespace panelwald {

enum class SqrtMethod { Cholesky, Symmetric };

struct Dataset {
    Eigen::MatrixXd values;  // n x p
    std::vector<std::string> names;
};

/// A matrix R with R R' = Sigma.
inline Eigen::MatrixXd covariance_root(const ImpliedCovariance& sigma, SqrtMethod method) {
    if (!sigma.is_pd) throw NotPositiveDefinite("Sigma");
    if (method == SqrtMethod::Cholesky) {
        Eigen::LLT<Eigen::MatrixXd> llt(sigma.sigma);
        if (llt.info() != Eigen::Success) throw NotPositiveDefinite("Sigma");
        return llt.matrixL();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma.sigma);
    if (!(es.eigenvalues().minCoeff() > 0.0)) throw NotPositiveDefinite("Sigma");
    return es.eigenvectors() * es.eigenvalues().cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

/// n rows of N(0, Sigma); standard normals are consumed row by row.
inline Eigen::MatrixXd generate_data(const ImpliedCovariance& sigma, std::size_t n, Philox4x32& rng,
                                     SqrtMethod method = SqrtMethod::Cholesky) {
    const Eigen::MatrixXd R = covariance_root(sigma, method);
    const Eigen::Index p = R.rows();
    Eigen::MatrixXd eps(static_cast<Eigen::Index>(n), p);
    for (Eigen::Index i = 0; i < eps.rows(); ++i)
        for (Eigen::Index j = 0; j < p; ++j) eps(i, j) = rng.normal();
    return eps * R.transpose();
}

inline Dataset generate_dataset(const PopulationScenario& sc, std::size_t n, Philox4x32& rng,
                                SqrtMethod method = SqrtMethod::Cholesky) {
    return {generate_data(sc.sigma(), n, rng, method), sc.population().vars.observed};
}

struct SimulationConfig {
    std::size_t n = 1000;
    int reps = 100;
    std::uint64_t seed = 1;
    double alpha = 0.05;
    SqrtMethod sqrt_method = SqrtMethod::Cholesky;
    TwoSlwConfig twoslw;
    bool keep_records = true;
};

struct ReplicationRecord {
    int rep = 0;
    bool ok = false;
    double chi2 = std::numeric_limits<double>::quiet_NaN();
    int df = 0;
    double p_value = std::numeric_limits<double>::quiet_NaN();
    FitIndices indices;
    std::vector<std::string> retained;  // detection runs only
    std::set<FitWarning> warnings;
};

struct SimulationSummary {
    std::string scenario;
    std::size_t n = 0;
    int reps = 0;
    int failed = 0;
    bool aborted = false;  // more than 10% of replications failed
    int df = 0;
    double mean_chi2 = 0.0;
    double sd_chi2 = 0.0;
    double mean_p = 0.0;
    double rejection_rate = 0.0;
    double mean_nfi = 0.0;
    double mean_cfi = 0.0;
    double mean_tli = 0.0;
    double mean_rmsea = 0.0;
    bool detection = false;
    std::map<std::string, double> detection_rate;   // truth key -> fraction retained
    std::map<std::string, double> distractor_rate;  // distractor key -> fraction retained
    double false_positive_rate = 0.0;               // mean retained non-truth parameters per replication
    double empty_rate = 0.0;                        // fraction of replications retaining nothing
    std::vector<ReplicationRecord> records;
};

namespace detail {

inline void summarize_fit_stats(SimulationSummary& s, const std::vector<ReplicationRecord>& recs, double alpha) {
    int ok = 0;
    double sum = 0.0, sum_p = 0.0, rej = 0.0, nfi = 0.0, cfi = 0.0, tli = 0.0, rmsea = 0.0;
    for (const auto& r : recs) {
        if (!r.ok) continue;
        ++ok;
        s.df = r.df;
        sum += r.chi2;
        sum_p += r.p_value;
        rej += r.p_value < alpha ? 1.0 : 0.0;
        nfi += r.indices.nfi;
        cfi += r.indices.cfi;
        tli += r.indices.tli;
        rmsea += r.indices.rmsea;
    }
    s.failed = static_cast<int>(recs.size()) - ok;
    s.aborted = s.failed * 10 > static_cast<int>(recs.size());
    if (ok == 0) return;
    s.mean_chi2 = sum / ok;
    double ss = 0.0;
    for (const auto& r : recs)
        if (r.ok) ss += (r.chi2 - s.mean_chi2) * (r.chi2 - s.mean_chi2);
    s.sd_chi2 = ok > 1 ? std::sqrt(ss / (ok - 1)) : 0.0;
    s.mean_p = sum_p / ok;
    s.rejection_rate = rej / ok;
    s.mean_nfi = nfi / ok;
    s.mean_cfi = cfi / ok;
    s.mean_tli = tli / ok;
    s.mean_rmsea = rmsea / ok;
}

inline void record_fit(ReplicationRecord& r, const FitResult& f) {
    r.ok = f.converged;
    r.chi2 = f.T_ml;
    r.df = f.df;
    r.p_value = f.p_value;
    r.indices = fit_indices(f, fit_independence(f.moments));
    r.warnings = f.warnings;
}

}  // namespace detail

/// Fits the analysis model to `reps` data sets drawn from the population.
inline SimulationSummary run_calibration(const PopulationScenario& sc, const SimulationConfig& cfg) {
    const ImpliedCovariance sigma = sc.sigma();
    const auto names = sc.population().vars.observed;
    const ModelSpec analysis = sc.analysis();
    std::vector<ReplicationRecord> recs(static_cast<std::size_t>(cfg.reps));
    parallel_for(recs.size(), [&](std::size_t r) {
        auto& rec = recs[r];
        rec.rep = static_cast<int>(r);
        try {
            Philox4x32 rng(cfg.seed, r);
            const auto data = generate_data(sigma, cfg.n, rng, cfg.sqrt_method);
            detail::record_fit(rec, fit(analysis, sample_moments(data, names), cfg.twoslw.fit_options));
        } catch (const Error&) {
            rec.ok = false;
        }
    });
    SimulationSummary s;
    s.scenario = sc.name;
    s.n = cfg.n;
    s.reps = cfg.reps;
    detail::summarize_fit_stats(s, recs, cfg.alpha);
    if (cfg.keep_records) s.records = std::move(recs);
    return s;
}

/// Runs the two-stage search on each replication and tallies what it retains.
inline SimulationSummary run_detection(const PopulationScenario& sc, const SimulationConfig& cfg) {
    const ImpliedCovariance sigma = sc.sigma();
    const auto names = sc.population().vars.observed;
    const ModelSpec analysis = sc.analysis();
    TwoSlwConfig tc = cfg.twoslw;
    tc.alpha = cfg.alpha;
    std::vector<ReplicationRecord> recs(static_cast<std::size_t>(cfg.reps));
    parallel_for(recs.size(), [&](std::size_t r) {
        auto& rec = recs[r];
        rec.rep = static_cast<int>(r);
        try {
            Philox4x32 rng(cfg.seed, r);
            const auto data = generate_data(sigma, cfg.n, rng, cfg.sqrt_method);
            const auto report = run_2slw(analysis, sample_moments(data, names), tc);
            detail::record_fit(rec, report.baseline_fit);
            for (const auto& p : report.retained) rec.retained.push_back(p.key());
        } catch (const Error&) {
            rec.ok = false;
        }
    });
    SimulationSummary s;
    s.scenario = sc.name;
    s.n = cfg.n;
    s.reps = cfg.reps;
    s.detection = true;
    detail::summarize_fit_stats(s, recs, cfg.alpha);
    std::set<std::string> truth;
    for (const auto& t : sc.truth_params()) truth.insert(t.key());
    for (const auto& k : truth) s.detection_rate[k] = 0.0;
    for (const auto& d : sc.distractor_params()) s.distractor_rate[d.key()] = 0.0;
    const int ok = s.reps - s.failed;
    double fp = 0.0, empty = 0.0;
    for (const auto& r : recs) {
        if (!r.ok) continue;
        for (const auto& k : r.retained) {
            if (truth.count(k))
                s.detection_rate[k] += 1.0;
            else
                fp += 1.0;
            if (auto it = s.distractor_rate.find(k); it != s.distractor_rate.end()) it->second += 1.0;
        }
        if (r.retained.empty()) empty += 1.0;
    }
    if (ok > 0) {
        for (auto& [k, v] : s.detection_rate) v /= ok;
        for (auto& [k, v] : s.distractor_rate) v /= ok;
        s.false_positive_rate = fp / ok;
        s.empty_rate = empty / ok;
    }
    if (cfg.keep_records) s.records = std::move(recs);
    return s;
}

}  // namespace panelwald
