#pragma once

// Built-in population scenarios. Each pairs a fully fixed population model
// with the (deliberately misspecified) analysis model fitted to its data and
// the omitted parameters a diagnosis should recover.
//
// Scenarios round-trip through a plain-text manifest:
//
//   [scenario]
//   name: M1_Correlation
//   description: ...
//   [population]
//   <model text, all values fixed>
//   [analysis]
//   <model text>
//   [truth]
//   WFX4 ~~ WFY2
//   [distractors]
//   WFY4 ~ y2

#include <Eigen/Dense>

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "panelwald/errors.hpp"
#include "panelwald/model_dsl.hpp"
#include "panelwald/model_matrices.hpp"

namespace panelwald {

struct PopulationScenario {
    std::string name;
    std::string description;
    std::string population_text;
    std::string analysis_text;
    std::vector<std::string> truth;        // parameter statements, e.g. "WFX4 ~~ WFY2"
    std::vector<std::string> distractors;  // omitted-by-design parameters worth tracking

    ModelSpec population() const { return parse_model(population_text, name + "/population"); }
    ModelSpec analysis() const { return parse_model(analysis_text, name + "/analysis"); }

    std::vector<ParameterSpec> truth_params() const { return statements(truth); }
    std::vector<ParameterSpec> distractor_params() const { return statements(distractors); }

    /// Population covariance over the population model's observed variables.
    ImpliedCovariance sigma() const {
        const RamSystem ram = build_ram(population());
        return implied_sigma_ram(ram, Eigen::VectorXd(ram.size()));
    }

    static std::vector<ParameterSpec> statements(const std::vector<std::string>& lines) {
        std::vector<ParameterSpec> out;
        for (const auto& s : lines) {
            const auto spec = parse_model(s);
            for (const auto& p : spec.params)
                if (!p.is_variance()) out.push_back(p);
        }
        return out;
    }
};

struct RiclpmValues {
    double ar = 0.25;
    double cl = 0.15;
    double within_var = 1.0;   // wave-1 and innovation variances
    double within_cov = 0.2;   // wave-1 and innovation covariances
    double icept_var = 1.0;
    double icept_cov = 0.3;
};

namespace detail {

/// "0.25*" in population text, "" in analysis text.
inline std::string fixed(bool population, double v) { return population ? format_number(v) + "*" : ""; }

inline std::string wname(const std::string& stem, int t) { return stem + std::to_string(t); }

}  // namespace detail

/// Bivariate single-indicator RI-CLPM over T waves.
inline std::string riclpm_text(int T, bool population, const RiclpmValues& v = {}) {
    using detail::fixed;
    using detail::wname;
    std::string s = "# between-person random intercepts\nBX =~ ";
    for (int t = 1; t <= T; ++t) s += (t > 1 ? " + 1*" : "1*") + wname("x", t);
    s += "\nBY =~ ";
    for (int t = 1; t <= T; ++t) s += (t > 1 ? " + 1*" : "1*") + wname("y", t);
    s += "\n# within-person deviations\n";
    for (int t = 1; t <= T; ++t) {
        s += wname("WFX", t) + " =~ 1*" + wname("x", t) + "\n";
        s += wname("WFY", t) + " =~ 1*" + wname("y", t) + "\n";
    }
    s += "# autoregressive and cross-lagged paths\n";
    for (int t = 2; t <= T; ++t) {
        s += wname("WFX", t) + " ~ " + fixed(population, v.ar) + wname("WFX", t - 1) + " + " + fixed(population, v.cl) +
             wname("WFY", t - 1) + "\n";
        s += wname("WFY", t) + " ~ " + fixed(population, v.ar) + wname("WFY", t - 1) + " + " + fixed(population, v.cl) +
             wname("WFX", t - 1) + "\n";
    }
    s += "# variances and within-wave covariances\n";
    for (int t = 1; t <= T; ++t) {
        s += wname("WFX", t) + " ~~ " + fixed(population, v.within_var) + wname("WFX", t) + "\n";
        s += wname("WFY", t) + " ~~ " + fixed(population, v.within_var) + wname("WFY", t) + "\n";
        s += wname("WFX", t) + " ~~ " + fixed(population, v.within_cov) + wname("WFY", t) + "\n";
    }
    s += "BX ~~ " + fixed(population, v.icept_var) + "BX\nBY ~~ " + fixed(population, v.icept_var) + "BY\n";
    s += "BX ~~ " + fixed(population, v.icept_cov) + "BY\n";
    for (int t = 1; t <= T; ++t) s += wname("x", t) + " ~~ 0*" + wname("x", t) + "\n" + wname("y", t) + " ~~ 0*" + wname("y", t) + "\n";
    return s;
}

struct TwoIndicatorValues {
    RiclpmValues within;
    double loading = 0.8;         // second indicator
    double unique_var = 0.5;      // indicator residual variance
    double common_var = 0.3;      // variance of the general between factor
    double specific_var = 0.7;    // BX, BY residual variances
};

/// Five-wave RI-CLPM with two indicators per construct and wave. Loadings and
/// indicator residual variances are held equal across waves by labels.
inline std::string two_indicator_text(int T, bool population, const TwoIndicatorValues& v = {}) {
    using detail::fixed;
    using detail::wname;
    const auto lx = population ? detail::format_number(v.loading) + "*" : std::string("lx*");
    const auto ly = population ? detail::format_number(v.loading) + "*" : std::string("ly*");
    std::string s = "# between-person factors\nBX =~ ";
    for (int t = 1; t <= T; ++t) s += (t > 1 ? " + 1*" : "1*") + wname("xa", t) + " + 1*" + wname("xb", t);
    s += "\nBY =~ ";
    for (int t = 1; t <= T; ++t) s += (t > 1 ? " + 1*" : "1*") + wname("ya", t) + " + 1*" + wname("yb", t);
    s += "\nL =~ 1*BX + 1*BY\n# within-person factors\n";
    for (int t = 1; t <= T; ++t) {
        s += wname("WFX", t) + " =~ 1*" + wname("xa", t) + " + " + lx + wname("xb", t) + "\n";
        s += wname("WFY", t) + " =~ 1*" + wname("ya", t) + " + " + ly + wname("yb", t) + "\n";
    }
    s += "# autoregressive and cross-lagged paths\n";
    const auto& w = v.within;
    for (int t = 2; t <= T; ++t) {
        s += wname("WFX", t) + " ~ " + fixed(population, w.ar) + wname("WFX", t - 1) + " + " + fixed(population, w.cl) +
             wname("WFY", t - 1) + "\n";
        s += wname("WFY", t) + " ~ " + fixed(population, w.ar) + wname("WFY", t - 1) + " + " + fixed(population, w.cl) +
             wname("WFX", t - 1) + "\n";
    }
    s += "# variances and covariances\n";
    for (int t = 1; t <= T; ++t) {
        s += wname("WFX", t) + " ~~ " + fixed(population, w.within_var) + wname("WFX", t) + "\n";
        s += wname("WFY", t) + " ~~ " + fixed(population, w.within_var) + wname("WFY", t) + "\n";
        s += wname("WFX", t) + " ~~ " + fixed(population, w.within_cov) + wname("WFY", t) + "\n";
    }
    s += "L ~~ " + fixed(population, v.common_var) + "L\n";
    s += "BX ~~ " + fixed(population, v.specific_var) + "BX\nBY ~~ " + fixed(population, v.specific_var) + "BY\n";
    for (const char* stem : {"xa", "xb", "ya", "yb"}) {
        const std::string lab = population ? detail::format_number(v.unique_var) + "*" : std::string("e") + stem + "*";
        for (int t = 1; t <= T; ++t) s += wname(stem, t) + " ~~ " + lab + wname(stem, t) + "\n";
    }
    return s;
}

struct ClpmValues {
    double ar = 0.5;
    double cl = 0.2;
    double var = 1.0;
    double cov = 0.3;
};

/// Bivariate CLPM on observed variables X1..XT, Y1..YT.
inline std::string clpm_text(int T, bool population, const ClpmValues& v = {}) {
    using detail::fixed;
    using detail::wname;
    std::string s = "# autoregressive and cross-lagged paths\n";
    for (int t = 2; t <= T; ++t) {
        s += wname("X", t) + " ~ " + fixed(population, v.ar) + wname("X", t - 1) + " + " + fixed(population, v.cl) +
             wname("Y", t - 1) + "\n";
        s += wname("Y", t) + " ~ " + fixed(population, v.ar) + wname("Y", t - 1) + " + " + fixed(population, v.cl) +
             wname("X", t - 1) + "\n";
    }
    s += "# variances and within-wave (residual) covariances\n";
    for (int t = 1; t <= T; ++t) {
        s += wname("X", t) + " ~~ " + fixed(population, v.var) + wname("X", t) + "\n";
        s += wname("Y", t) + " ~~ " + fixed(population, v.var) + wname("Y", t) + "\n";
        s += wname("X", t) + " ~~ " + fixed(population, v.cov) + wname("Y", t) + "\n";
    }
    return s;
}

namespace detail {

/// Replaces the statement for the same parameter, or appends it.
inline std::string with_statement(const std::string& text, const std::string& stmt) {
    if (stmt.rfind("#", 0) == 0) return text + stmt + "\n";
    const ParameterSpec target = parse_model(stmt).params.front();
    std::istringstream in(text);
    std::string line, out;
    bool replaced = false;
    while (std::getline(in, line)) {
        std::string body = line.substr(0, line.find('#'));
        if (!replaced && body.find_first_not_of(" \t") != std::string::npos && body.find('+') == std::string::npos &&
            body.find("@wave") == std::string::npos) {
            const auto ps = parse_model(body).params;
            if (!ps.empty() && ps.front().key() == target.key()) {
                out += stmt + "\n";
                replaced = true;
                continue;
            }
        }
        out += line + "\n";
    }
    if (!replaced) out += stmt + "\n";
    return out;
}

inline std::string add_lines(std::string text, const std::vector<std::string>& stmts) {
    for (const auto& s : stmts) text = with_statement(text, s);
    return text;
}

}  // namespace detail

inline std::vector<PopulationScenario> scenario_library() {
    using detail::add_lines;
    std::vector<PopulationScenario> lib;
    const std::string ri_pop = riclpm_text(4, true), ri_ana = riclpm_text(4, false);

    lib.push_back({"Baseline4w", "Four-wave bivariate RI-CLPM, correctly specified (AR .25, CL .15).", ri_pop, ri_ana,
                   {}, {}});

    lib.push_back({"M1_Correlation",
                   "Two unmeasured confounders induce residual correlations .4 between WFX4 and WFY2 and between "
                   "WFX2 and WFY4.",
                   add_lines(ri_pop, {"# confounded residuals", "WFX4 ~~ 0.4*WFY2", "WFX2 ~~ 0.4*WFY4"}), ri_ana,
                   {"WFX4 ~~ WFY2", "WFX2 ~~ WFY4"},
                   {}});

    lib.push_back({"M2_DirectEffect", "An omitted direct path from WFX2 to WFX4.",
                   add_lines(ri_pop, {"# omitted lag-2 effect", "WFX4 ~ 0.3*WFX2"}), ri_ana, {"WFX4 ~ WFX2"},
                   {"WFX4 ~ x2"}});

    lib.push_back(
        {"M3_Mediation",
         "A mediator M, regressed on x1 and WFY2, transmits part of the WFY2 -> WFY4 effect; the analysis model "
         "contains M's own regressions but not its effect on WFY4 or the direct lag-2 path.",
         add_lines(ri_pop, {"# mediator", "M ~ 0.6*x1 + 0.4*WFY2", "M ~~ 1*M", "WFY4 ~ 0.4*M", "WFY4 ~ 0.3*WFY2"}),
         add_lines(ri_ana, {"# mediator", "M ~ x1 + WFY2"}),
         {"WFY4 ~ M", "WFY4 ~ WFY2"},
         {"WFY4 ~ y2"}});

    const std::string fw_pop = two_indicator_text(5, true), fw_ana = two_indicator_text(5, false);
    lib.push_back({"Baseline5w2i",
                   "Five-wave RI-CLPM with two indicators per construct and wave, correctly specified.", fw_pop, fw_ana,
                   {}, {}});
    lib.push_back({"FiveWave_Corr", "Five-wave two-indicator model with residual correlation .4 between WFX4 and WFY2.",
                   add_lines(fw_pop, {"# confounded residuals", "WFX4 ~~ 0.4*WFY2"}), fw_ana, {"WFX4 ~~ WFY2"}, {}});
    lib.push_back({"FiveWave_Direct", "Five-wave two-indicator model with an omitted path from WFX2 to WFX5.",
                   add_lines(fw_pop, {"# omitted lag-3 effect", "WFX5 ~ 0.3*WFX2"}), fw_ana, {"WFX5 ~ WFX2"}, {}});
    lib.push_back({"FiveWave_Med",
                   "Five-wave two-indicator model with a mediator M (regressed on xa1 and WFX2) affecting WFX4.",
                   add_lines(fw_pop, {"# mediator", "M ~ 0.6*xa1 + 0.4*WFX2", "M ~~ 1*M", "WFX4 ~ 0.4*M", "WFX4 ~ 0.3*WFX2"}),
                   add_lines(fw_ana, {"# mediator", "M ~ xa1 + WFX2"}),
                   {"WFX4 ~ M", "WFX4 ~ WFX2"},
                   {}});

    const std::string cl_pop = clpm_text(4, true), cl_ana = clpm_text(4, false);
    lib.push_back({"CLPM_Baseline", "Four-wave CLPM, correctly specified (AR .5, CL .2, residual correlation .3).",
                   cl_pop, cl_ana, {}, {}});
    lib.push_back({"CLPM_Corr", "CLPM with an omitted residual covariance .3 between X4 and Y2.",
                   add_lines(cl_pop, {"# confounded residuals", "X4 ~~ 0.3*Y2"}), cl_ana, {"X4 ~~ Y2"}, {}});
    lib.push_back({"CLPM_Direct", "CLPM with omitted lag-2 paths X2 -> X4 and Y1 -> Y3.",
                   add_lines(cl_pop, {"# omitted lag-2 effects", "X4 ~ 0.3*X2", "Y3 ~ 0.3*Y1"}), cl_ana,
                   {"X4 ~ X2", "Y3 ~ Y1"},
                   {}});
    lib.push_back({"CLPM_Med", "CLPM with a mediator M (regressed on X1 and X2) affecting X4.",
                   add_lines(cl_pop, {"# mediator", "M ~ 0.6*X1 + 0.4*X2", "M ~~ 1*M", "X4 ~ 0.4*M", "X4 ~ 0.3*X2"}),
                   add_lines(cl_ana, {"# mediator", "M ~ X1 + X2"}),
                   {"X4 ~ M", "X4 ~ X2"},
                   {}});
    return lib;
}

inline PopulationScenario find_scenario(const std::string& name) {
    for (auto& s : scenario_library())
        if (s.name == name) return s;
    throw UnknownScenario(name);
}

/// The analysis model with the truth freed, evaluated at the population values.
inline IdentificationReport scenario_identification(const PopulationScenario& sc) {
    ModelSpec spec = sc.analysis();
    for (const auto& t : sc.truth_params()) spec = with_free(spec, t);
    const ModelSpec pop = sc.population();
    const RamSystem ram = build_ram(spec);
    const auto roles = [&] {
        std::vector<std::string> keys(ram.size());
        for (const auto& p : spec.params)
            if (auto it = ram.theta_of_key.find(p.key()); it != ram.theta_of_key.end() && keys[it->second].empty())
                keys[it->second] = p.key();
        return keys;
    }();
    Eigen::VectorXd th = Eigen::VectorXd::Zero(ram.size());
    for (int j = 0; j < ram.size(); ++j)
        if (auto i = pop.find(roles[j])) th[j] = pop.params[*i].value;
    return identification_check(ram, th);
}

inline std::string to_manifest(const PopulationScenario& sc) {
    std::string s = "[scenario]\nname: " + sc.name + "\ndescription: " + sc.description + "\n";
    s += "[population]\n" + sc.population_text;
    s += "[analysis]\n" + sc.analysis_text;
    s += "[truth]\n";
    for (const auto& t : sc.truth) s += t + "\n";
    s += "[distractors]\n";
    for (const auto& t : sc.distractors) s += t + "\n";
    return s;
}

inline PopulationScenario parse_manifest(const std::string& text) {
    PopulationScenario sc;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty() && line.front() == '[' && line.back() == ']') {
            section = line.substr(1, line.size() - 2);
            if (section != "scenario" && section != "population" && section != "analysis" && section != "truth" &&
                section != "distractors")
                throw SyntaxError(line_no, 1, "unknown manifest section [" + section + "]");
            continue;
        }
        if (section == "scenario") {
            auto colon = line.find(':');
            if (colon == std::string::npos) continue;
            std::string key = line.substr(0, colon), val = line.substr(colon + 1);
            val.erase(0, val.find_first_not_of(' '));
            if (key == "name") sc.name = val;
            if (key == "description") sc.description = val;
        } else if (section == "population") {
            sc.population_text += line + "\n";
        } else if (section == "analysis") {
            sc.analysis_text += line + "\n";
        } else if (section == "truth" || section == "distractors") {
            if (line.find_first_not_of(" \t") == std::string::npos || line.front() == '#') continue;
            (section == "truth" ? sc.truth : sc.distractors).push_back(line);
        } else if (line.find_first_not_of(" \t") != std::string::npos) {
            throw SyntaxError(line_no, 1, "text outside of a manifest section");
        }
    }
    if (sc.name.empty()) throw SyntaxError(1, 1, "manifest has no name");
    return sc;
}

}  // namespace panelwald
