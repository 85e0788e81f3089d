// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Pass criterion numbers as arguments to run a subset. Every Monte Carlo run
// uses seed 1.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "panelwald/panelwald.hpp"
#include "test_models.hpp"

using namespace panelwald;

namespace {

constexpr std::uint64_t kSeed = 1;

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        pass = pass && ok;
        if (!detail.empty()) detail += "; ";
        detail += what + (ok ? "" : " [miss]");
    }
};

std::string f3(double v) { return fmt3(v); }

std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

std::string in_range(double v, double lo, double hi) { return f3(v) + " in [" + f3(lo) + ", " + f3(hi) + "]"; }

// Every converged fit made here is checked for W = z^2 in criterion 8.
std::vector<FitResult> g_fits;

void record(const FitResult& f) {
    if (f.converged) g_fits.push_back(f);
}

SimulationSummary calibrate(const std::string& name, std::size_t n, int reps) {
    SimulationConfig cfg;
    cfg.n = n;
    cfg.reps = reps;
    cfg.seed = kSeed;
    return run_calibration(find_scenario(name), cfg);
}

SimulationSummary detect(const std::string& name, std::size_t n, int reps) {
    SimulationConfig cfg;
    cfg.n = n;
    cfg.reps = reps;
    cfg.seed = kSeed;
    return run_detection(find_scenario(name), cfg);
}

SampleMoments draw(const PopulationScenario& sc, std::size_t n, std::uint64_t stream = 0) {
    Philox4x32 rng(kSeed, stream);
    const auto d = generate_dataset(sc, n, rng);
    return sample_moments(d.values, d.names);
}

Outcome calibration(const std::string& name, int reps, double lo, double hi, double rej_lo, double rej_hi,
                    bool sd_and_rmsea) {
    const auto s = calibrate(name, 10000, reps);
    Outcome o;
    o.require(!s.aborted, "failed " + std::to_string(s.failed) + "/" + std::to_string(reps));
    o.require(s.mean_chi2 >= lo && s.mean_chi2 <= hi, "mean chi2 " + in_range(s.mean_chi2, lo, hi));
    if (sd_and_rmsea) o.require(s.sd_chi2 >= 3.8 && s.sd_chi2 <= 4.7, "SD " + in_range(s.sd_chi2, 3.8, 4.7));
    o.require(s.rejection_rate >= rej_lo && s.rejection_rate <= rej_hi,
              "rejection " + in_range(s.rejection_rate, rej_lo, rej_hi));
    if (sd_and_rmsea) o.require(s.mean_rmsea < 0.02, "RMSEA " + f3(s.mean_rmsea) + " < 0.020");
    return o;
}

// ------------------------------------------------------------------ criteria

Outcome c1() { return calibration("Baseline4w", 500, 8.5, 9.5, 0.03, 0.07, true); }
Outcome c2() { return calibration("Baseline5w2i", 200, 165.0, 175.0, 0.03, 0.08, false); }
Outcome c3() { return calibration("CLPM_Baseline", 500, 11.4, 12.6, 0.02, 0.07, false); }

Outcome c4() {
    Outcome o;
    for (const char* name : {"M1_Correlation", "M2_DirectEffect", "M3_Mediation"}) {
        const auto s = detect(name, 2000, 200);
        for (const auto& [k, v] : s.detection_rate) o.require(v >= 0.8, std::string(k) + " " + f3(v) + " >= 0.8");
        o.require(s.false_positive_rate <= 0.5, std::string(name) + " fp " + f3(s.false_positive_rate) + " <= 0.5");
        if (std::string(name) == "M3_Mediation") {
            const double d = s.distractor_rate.at("WFY4~y2");
            o.require(d < 0.3, "WFY4~y2 " + f3(d) + " < 0.3");
        }
    }
    return o;
}

Outcome c5() {
    Outcome o;
    for (const char* name : {"FiveWave_Corr", "CLPM_Corr"}) {
        const auto s = detect(name, 2000, 200);
        for (const auto& [k, v] : s.detection_rate) o.require(v >= 0.8, std::string(k) + " " + f3(v) + " >= 0.8");
    }
    return o;
}

Outcome c6() {
    Outcome o;
    std::mt19937_64 rng(6);
    double worst_sigma = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        const auto cf = testing::random_closed_form(rng);
        const auto ram = build_ram(parse_model(closed_form_model_text(cf)));
        const auto a = implied_sigma_ram(ram, Eigen::VectorXd::Zero(ram.size()));
        const auto b = implied_sigma_closed_form(cf);
        worst_sigma = std::max(worst_sigma, (a.sigma - b.sigma).cwiseAbs().maxCoeff());
    }
    o.require(worst_sigma < 1e-10, "100 draws, max |RAM - closed form| " + sci(worst_sigma) + " < 1e-10");

    const std::vector<std::string> texts = {
        testing::baseline_riclpm_text(3), testing::baseline_riclpm_text(4), testing::measured_riclpm_text(3),
        testing::measured_riclpm_text(4), find_scenario("Baseline5w2i").analysis_text};
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    double worst = 0.0;
    int pairs = 0;
    for (int rep = 0; rep < 10; ++rep)
        for (const auto& text : texts) {
            const auto spec = parse_model(text);
            const auto ram = build_ram(spec);
            Eigen::VectorXd th(ram.size());
            for (int j = 0; j < ram.size(); ++j) {
                const auto& k = ram.theta_names[j];
                const auto c = k.find("~~");
                const bool var = (c != std::string::npos && k.substr(0, c) == k.substr(c + 2)) || k[0] == '@' ||
                                 k == "ex" || k == "ey";
                th[j] = (var ? 1.0 : 0.2) + u(rng);
            }
            const auto sig = implied_sigma_ram(ram, th);
            if (!sig.is_pd) continue;
            const int p = ram.n_observed;
            const auto S = moments_from_covariance(sig.sigma + 0.3 * testing::random_spd(rng, p, 0.0), 500,
                                                   spec.vars.observed);
            const Eigen::VectorXd g = discrepancy_gradient(RamEvaluation(ram, th), S.S);
            auto F = [&](const Eigen::VectorXd& t) { return ml_discrepancy(implied_sigma_ram(ram, t), S); };
            const double h = 1e-5;
            for (int j = 0; j < ram.size(); ++j) {
                Eigen::VectorXd a = th, b = th;
                a[j] += h;
                b[j] -= h;
                const double fd = (F(a) - F(b)) / (2.0 * h);
                worst = std::max(worst, std::abs(fd - g[j]) / std::max(1.0, g.cwiseAbs().maxCoeff()));
            }
            ++pairs;
        }
    o.require(pairs == 50, std::to_string(pairs) + " (spec, theta) pairs");
    o.require(worst < 1e-6, "max relative gradient error " + sci(worst) + " < 1e-6");
    return o;
}

Outcome c7() {
    const auto sc = find_scenario("M2_DirectEffect");
    const auto spec = sc.analysis();
    const auto S = draw(sc, 5000);
    const auto base = fit(spec, S);
    record(base);
    const auto truth = sc.truth_params().front();
    const auto scan = lm_scan(spec, base, {truth});
    const double lm = scan.candidates.at(0).lm_chi2;
    const auto refit = fit(with_free(spec, truth), S);
    record(refit);
    const double delta = base.T_ml - refit.T_ml;
    const double w = wald_of(refit, truth).wald;
    Outcome o;
    const double e_lm = std::abs(lm - delta) / delta, e_w = std::abs(w - delta) / delta;
    o.require(e_lm < 0.15, "LM " + f3(lm) + " vs delta chi2 " + f3(delta) + ", rel " + f3(e_lm) + " < 0.15");
    o.require(e_w < 0.15, "Wald " + f3(w) + " vs delta chi2, rel " + f3(e_w) + " < 0.15");
    return o;
}

Outcome c8() {
    // Add a converged fit of every library scenario's analysis model and of the
    // model improved by the search.
    for (const auto& sc : scenario_library()) {
        const auto S = draw(sc, 2000, 8);
        const auto r = run_2slw(sc.analysis(), S);
        record(r.baseline_fit);
        record(r.improved_fit);
    }
    double worst = 0.0;
    int params = 0;
    for (const auto& f : g_fits) {
        for (int j = 0; j < f.theta_hat.size(); ++j) {
            const auto& key = f.theta_names[j];
            if (key[0] == '@') continue;  // shared labels have no single parameter
            const auto op = key.find("~~") != std::string::npos ? Op::Covariance
                            : key.find("=~") != std::string::npos ? Op::Loading
                                                                  : Op::Regression;
            const auto sym = std::string(op_symbol(op));
            const auto at = key.find(sym);
            const auto w = wald_of(f, ParameterSpec::make(key.substr(0, at), op, key.substr(at + sym.size())));
            const double z = f.theta_hat[j] / f.std_errors[j];
            const double rel = std::abs(w.wald - z * z) / std::max(z * z, 1e-300);
            if (z * z > 0.0) worst = std::max(worst, rel);
            ++params;
        }
    }
    Outcome o;
    o.require(worst < 1e-8, std::to_string(g_fits.size()) + " fits, " + std::to_string(params) +
                                 " parameters, max relative |W - z^2| " + sci(worst) + " < 1e-8");
    return o;
}

// Two-wave single-indicator model; only the cross-lag WFY1 -> WFX2 is free.
std::string single_indicator_text(double l) {
    const std::string a = detail::format_number(l);
    return "WFX1 =~ " + a + "*x1\nWFY1 =~ " + a + "*y1\nWFX2 =~ " + a + "*x2\nWFY2 =~ " + a + "*y2\n" +
           "WFX2 ~ 0.25*WFX1 + WFY1\nWFY2 ~ 0.25*WFY1 + 0.15*WFX1\n"
           "WFX1 ~~ 1*WFX1\nWFY1 ~~ 1*WFY1\nWFX1 ~~ 0.3*WFY1\n"
           "WFX2 ~~ 1*WFX2\nWFY2 ~~ 1*WFY2\nWFX2 ~~ 0.2*WFY2\n"
           "x1 ~~ 1*x1\ny1 ~~ 1*y1\nx2 ~~ 1*x2\ny2 ~~ 1*y2\n";
}

Outcome c9() {
    auto info_at = [](double l) {
        const auto ram = build_ram(parse_model(single_indicator_text(l)));
        Eigen::VectorXd th(1);
        th << 0.15;
        return fisher_information(ram, th)(0, 0);
    };
    const double ratio = info_at(0.1) / info_at(1.0);
    Outcome o;
    o.require(ratio >= 3e-5 && ratio <= 3e-3, "information ratio " + sci(ratio) + " in [3e-5, 3e-3]");
    const auto ram = build_ram(parse_model(testing::measured_riclpm_text(3)));
    const auto id = identification_check(ram, testing::measured_riclpm_theta(ram, 1e-4));
    o.require(id.condition > 1e6, "condition number " + sci(id.condition) + " > 1e6");
    return o;
}

Outcome c10() {
    const auto sc = find_scenario("Baseline4w");
    const auto f = fit(sc.analysis(), draw(sc, 10000, 10));
    record(f);
    Outcome o;
    o.require(f.converged, "converged");
    int ar = 0, cl = 0, ok = 0;
    double worst = 0.0;
    for (int j = 0; j < f.theta_hat.size(); ++j) {
        const auto& k = f.theta_names[j];
        if (k.find("~~") != std::string::npos) continue;
        const bool is_ar = k.compare(0, 3, k, k.find('~') + 1, 3) == 0;
        const double z = std::abs(f.theta_hat[j] - (is_ar ? 0.25 : 0.15)) / f.std_errors[j];
        worst = std::max(worst, z);
        (is_ar ? ar : cl) += 1;
        ok += z <= 3.0;
    }
    o.require(ar == 6 && cl == 6, std::to_string(ar) + " AR and " + std::to_string(cl) + " CL paths");
    o.require(ok == ar + cl, "largest deviation " + f3(worst) + " SE <= 3");
    return o;
}

Outcome c11() {
    const auto s = [] {
        SimulationConfig cfg;
        cfg.n = 1000;
        cfg.reps = 200;
        cfg.seed = kSeed;
        return run_detection(find_scenario("Baseline4w"), cfg);
    }();
    Outcome o;
    o.require(s.empty_rate >= 0.85, "empty in " + f3(s.empty_rate) + " of replications (>= 0.850), " +
                                         f3(s.false_positive_rate) + " spurious per replication");
    return o;
}

std::string without_timestamp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::string line, out;
    while (std::getline(in, line))
        if (line.rfind("# timestamp:", 0) != 0) out += line + "\n";
    return out;
}

Outcome c12() {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / ("panelwald_acceptance_" + std::to_string(::getpid()));
    Outcome o;
    std::string runs[2];
    for (int i = 0; i < 2; ++i) {
        const fs::path dir = root / std::to_string(i);
        const std::string cmd = std::string("\"") + PANELWALD_CLI +
                                "\" simulate M1_Correlation --n 500 --reps 50 --seed 7 --out \"" + dir.string() +
                                "\" > /dev/null";
        const int rc = std::system(cmd.c_str());
        o.require(rc == 0, "run " + std::to_string(i + 1) + " exit " + std::to_string(rc));
        runs[i] = without_timestamp(dir / "summary.csv");
    }
    std::error_code ec;
    fs::remove_all(root, ec);
    o.require(!runs[0].empty() && runs[0] == runs[1],
              "summary.csv identical apart from the timestamp (" + std::to_string(runs[0].size()) + " bytes)");
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"calibration, 4-wave RI-CLPM", c1},
        {"calibration, 5-wave two-indicator RI-CLPM", c2},
        {"calibration, CLPM", c3},
        {"detection, Models 1-3", c4},
        {"detection, 5-wave and CLPM confounders", c5},
        {"oracle equivalence", c6},
        {"test-statistic triangle", c7},
        {"Wald equals squared z", c8},
        {"weak loadings and vanishing within variance", c9},
        {"parameter recovery", c10},
        {"null control", c11},
        {"determinism of simulate", c12},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    // Criterion 8 pools the fits made by the others, so it runs last.
    std::vector<int> order;
    for (int i = 1; i <= 12; ++i)
        if (i != 8) order.push_back(i);
    order.push_back(8);

    int failed = 0;
    for (int i : order) {
        if (!only.empty() && !only.count(i)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[static_cast<std::size_t>(i - 1)].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("error: ") + e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char head[96];
        std::snprintf(head, sizeof head, "%s %2d  %s (%.1f s): ", o.pass ? "PASS" : "FAIL", i,
                      criteria[static_cast<std::size_t>(i - 1)].first, secs);
        std::cout << head << o.detail << std::endl;
        failed += !o.pass;
    }
    std::cout << (failed ? std::to_string(failed) + " criterion(s) failed" : std::string("all criteria passed"))
              << "\n";
    return failed ? 1 : 0;
}
