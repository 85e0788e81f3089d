// panelwald: fit, diagnose and simulate RI-CLPM style panel models.
//
// Exit codes: 0 success, 1 user error (bad model, data, flags or names),
// 2 numerical failure (no convergence, aborted simulation).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "panelwald/panelwald.hpp"
#include "reference_tables.hpp"

namespace fs = std::filesystem;
using namespace panelwald;

namespace {

constexpr int kOk = 0;
constexpr int kUserError = 1;
constexpr int kNumerical = 2;

struct Options {
    std::string model;
    std::string data;
    std::string scenario;
    std::string table;
    std::string out = ".";
    std::size_t n = 1000;
    int reps = 100;
    std::uint64_t seed = 1;
    double alpha = 0.05;
    int top_k = 25;
    double epc_min = 0.1;
    std::string sqrt = "chol";
    bool dump_matrices = false;
    bool search = false;
    bool raw = false;
};

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write file: " + path.string());
    out << text;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.15g", v);
    return buf;
}

ModelSpec load_model(const std::string& path) {
    if (path.empty()) throw Error("--model is required");
    ModelSpec spec = parse_model(ModelSource{read_text(path), path});
    if (spec.params.empty()) throw Error(path + ": model has no parameters");
    return spec;
}

SampleMoments load_data(const std::string& path, const ModelSpec& spec) {
    if (path.empty()) throw Error("--data is required");
    const CsvData d = read_csv_file(path, spec.vars.observed);
    if (d.dropped > 0) std::cerr << "warning: dropped " << d.dropped << " incomplete row(s)\n";
    return sample_moments(d.values, d.names);
}

TwoSlwConfig search_config(const Options& o) {
    TwoSlwConfig c;
    c.top_k = o.top_k;
    c.epc_min = o.epc_min;
    c.alpha = o.alpha;
    return c;
}

SqrtMethod sqrt_method(const Options& o) {
    if (o.sqrt == "chol") return SqrtMethod::Cholesky;
    if (o.sqrt == "sym") return SqrtMethod::Symmetric;
    throw Error("--sqrt must be chol or sym");
}

RunManifest manifest(const std::string& command, const Options& o) {
    RunManifest m;
    m.command = command;
    m.model_path = o.model;
    m.data_path = o.data;
    m.scenario = o.scenario;
    m.seed = o.seed;
    m.output_dir = o.out;
    m.timestamp = RunManifest::now();
    return m;
}

void dump_matrices(const fs::path& dir, const RunManifest& m, const ModelSpec& spec, const FitResult& f) {
    const RamSystem ram = build_ram(spec);
    const RamEvaluation ev(ram, f.theta_hat);
    const auto& vars = ram.variables;
    const std::vector<std::string> obs(vars.begin(), vars.begin() + ram.n_observed);
    write_text(dir / "matrix_A.csv", matrix_csv(ram.A(f.theta_hat), vars, vars).str(m));
    write_text(dir / "matrix_S.csv", matrix_csv(ram.S(f.theta_hat), vars, vars).str(m));
    write_text(dir / "matrix_F.csv", matrix_csv(ram.F, obs, vars).str(m));
    write_text(dir / "implied_sigma.csv", matrix_csv(ev.implied().sigma, obs, obs).str(m));
    write_text(dir / "sample_cov.csv", matrix_csv(f.moments.S, obs, obs).str(m));
    write_text(dir / "information.csv", matrix_csv(f.H, f.theta_names, f.theta_names).str(m));
}

PopulationScenario load_scenario(const std::string& name_or_path) {
    if (name_or_path.empty()) throw Error("a scenario name or manifest path is required");
    if (fs::is_regular_file(name_or_path)) return parse_manifest(read_text(name_or_path));
    return find_scenario(name_or_path);
}

// ------------------------------------------------------------------ commands

int cmd_validate(const Options& o) {
    const ModelSpec spec = load_model(o.model);
    const RamSystem ram = build_ram(spec);
    const int p = static_cast<int>(spec.vars.observed.size());
    const int q = ram.size();
    std::cout << "model: " << o.model << "\n";
    std::cout << "observed variables: " << p << ", latent variables: " << spec.vars.latent.size() << "\n";
    std::cout << "free parameters: " << q << "\n";
    std::cout << "df = " << p * (p + 1) / 2 - q << "\n";

    for (const auto& prm : spec.params) {
        if (!prm.free || prm.op != Op::Regression) continue;
        auto wl = spec.vars.wave(prm.lhs), wr = spec.vars.wave(prm.rhs);
        if (wl && wr && *wl < *wr)
            std::cout << "note: " << prm.key() << " runs backward in time (TemporalOrderViolation as a candidate)\n";
    }

    // Identification at the default start values, using a unit sample covariance.
    const SampleMoments unit = moments_from_covariance(Eigen::MatrixXd::Identity(p, p), 1000, spec.vars.observed);
    const Eigen::VectorXd theta = start_values(spec, ram, unit, FitOptions{});
    bool clean = true;
    try {
        const auto id = identification_check(ram, theta);
        std::cout << "identification: rank " << id.rank << " of " << q << ", condition " << num(id.condition) << "\n";
        if (!id.deficient.empty()) {
            clean = false;
            std::cout << "not identified; parameters in the null direction:";
            for (int j : id.deficient) std::cout << " " << ram.theta_names[static_cast<std::size_t>(j)];
            std::cout << "\n";
        }
    } catch (const Error& e) {
        clean = false;
        std::cout << "identification check failed at start values: " << e.what() << "\n";
    }
    if (p * (p + 1) / 2 - q < 0) clean = false;
    std::cout << "candidate parameters: " << enumerate_candidates(spec).size() << "\n";
    return clean ? kOk : kUserError;
}

int cmd_fit(const Options& o) {
    const ModelSpec spec = load_model(o.model);
    const SampleMoments S = load_data(o.data, spec);
    const FitResult f = fit(spec, S);
    const FitIndices fi = fit_indices(f, fit_independence(S));
    const RunManifest m = manifest("fit", o);
    const fs::path dir = o.out;
    write_text(dir / "parameters.csv", parameter_csv(spec, f).str(m));
    write_text(dir / "fit.csv", fit_block_csv(f, fi).str(m));
    write_text(dir / "fit.json", json_document(m, fit_json(spec, f, fi)));
    if (o.dump_matrices) dump_matrices(dir, m, spec, f);

    std::cout << "chi2 = " << fmt3(f.T_ml) << ", df = " << f.df << ", p = " << fmt3(f.p_value) << "\n";
    std::cout << "CFI = " << fmt3(fi.cfi) << ", NFI = " << fmt3(fi.nfi) << ", TLI = " << fmt3(fi.tli)
              << ", RMSEA = " << fmt3(fi.rmsea) << "\n";
    for (auto w : f.warnings) std::cout << "warning: " << warning_name(w) << "\n";
    return f.converged ? kOk : kNumerical;
}

int cmd_diagnose(const Options& o) {
    const ModelSpec spec = load_model(o.model);
    const SampleMoments S = load_data(o.data, spec);
    const TwoSlwReport r = run_2slw(spec, S, search_config(o));
    RunManifest m = manifest("diagnose", o);
    m.overrides = {{"alpha", num(o.alpha)}, {"top_k", std::to_string(o.top_k)}, {"epc_min", num(o.epc_min)}};
    const fs::path dir = o.out;
    write_text(dir / "lm_table.csv", lm_table_csv(r).str(m));
    write_text(dir / "stage_log.csv", stage_log_csv(r).str(m));
    write_text(dir / "deltas.csv", deltas_csv(r).str(m));
    write_text(dir / "report.json", json_document(m, report_json(spec, r)));
    if (o.dump_matrices) dump_matrices(dir, m, spec, r.baseline_fit);

    if (!r.baseline_fit.converged) {
        std::cerr << "error: the baseline model did not converge\n";
        return kNumerical;
    }
    if (r.retained.empty()) std::cout << "no parameters retained\n";
    for (const auto& p : r.retained) std::cout << p.key() << "\n";
    return kOk;
}

SimulationConfig sim_config(const Options& o) {
    SimulationConfig c;
    c.n = o.n;
    c.reps = o.reps;
    c.seed = o.seed;
    c.alpha = o.alpha;
    c.sqrt_method = sqrt_method(o);
    c.twoslw = search_config(o);
    return c;
}

void sim_overrides(RunManifest& m, const Options& o) {
    m.overrides = {{"n", std::to_string(o.n)},         {"reps", std::to_string(o.reps)},
                   {"alpha", num(o.alpha)},             {"top_k", std::to_string(o.top_k)},
                   {"epc_min", num(o.epc_min)},         {"sqrt", o.sqrt}};
}

int cmd_simulate(const Options& o) {
    const PopulationScenario sc = load_scenario(o.scenario);
    const SimulationConfig cfg = sim_config(o);
    const bool search = o.search || !sc.truth.empty();
    const SimulationSummary s = search ? run_detection(sc, cfg) : run_calibration(sc, cfg);
    RunManifest m = manifest("simulate", o);
    sim_overrides(m, o);
    const fs::path dir = o.out;
    write_text(dir / "summary.csv", summary_csv({s}).str(m));
    write_text(dir / "summary.json", json_document(m, summary_json(s)));
    if (o.raw) write_text(dir / "replications.csv", replications_csv(s).str(m));

    std::cout << sc.name << ": n = " << s.n << ", reps = " << s.reps << ", failed = " << s.failed << "\n";
    std::cout << "mean chi2 = " << fmt3(s.mean_chi2) << " (df " << s.df << "), SD = " << fmt3(s.sd_chi2)
              << ", rejection rate = " << fmt3(s.rejection_rate) << "\n";
    for (const auto& [k, v] : s.detection_rate) std::cout << "detected " << k << ": " << fmt3(v) << "\n";
    if (s.detection) std::cout << "false positives per replication: " << fmt3(s.false_positive_rate) << "\n";
    if (s.aborted) {
        std::cerr << "error: more than 10% of replications failed\n";
        return kNumerical;
    }
    return kOk;
}

int replicate_fit_table(const reference::FitTable& t, const Options& o, bool reps_given) {
    const PopulationScenario sc = find_scenario(t.scenario);
    Options oo = o;
    if (!reps_given) oo.reps = 500;
    RunManifest m = manifest("replicate-table", oo);
    m.scenario = sc.name;
    sim_overrides(m, oo);
    m.overrides.erase("n");
    m.overrides["table"] = t.id;

    std::vector<SimulationSummary> summaries;
    bool aborted = false;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        SimulationConfig cfg = sim_config(oo);
        cfg.n = static_cast<std::size_t>(t.rows[i].n);
        cfg.seed = oo.seed + 1000003ULL * i;  // a separate key for every sample size
        cfg.keep_records = false;
        summaries.push_back(run_calibration(sc, cfg));
        aborted = aborted || summaries.back().aborted;
        std::cerr << "n = " << cfg.n << " done\n";
    }
    CsvTable side({"n", "paper_chi2", "ours_chi2", "paper_sd", "ours_sd", "paper_p", "ours_p", "paper_rej", "ours_rej",
                   "paper_nfi", "ours_nfi", "paper_cfi", "ours_cfi", "paper_rmsea", "ours_rmsea", "ours_failed"});
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& p = t.rows[i];
        const auto& s = summaries[i];
        side.row().add(p.n).add(p.chi2).add(s.mean_chi2).add(p.sd).add(s.sd_chi2).add(p.p_value).add(s.mean_p);
        side.add(p.rej_rate).add(s.rejection_rate).add(p.nfi).add(s.mean_nfi).add(p.cfi).add(s.mean_cfi);
        side.add(p.rmsea).add(s.mean_rmsea).add(s.failed);
    }
    const fs::path dir = o.out;
    write_text(dir / "paper_vs_ours.csv", side.str(m));
    write_text(dir / "summary.csv", summary_csv(summaries).str(m));
    std::cout << side.str(m);
    return aborted ? kNumerical : kOk;
}

int replicate_search_table(const reference::SearchTable& t, const Options& o, bool reps_given, bool n_given) {
    const PopulationScenario sc = find_scenario(t.scenario);
    Options oo = o;
    if (!reps_given) oo.reps = 200;
    if (!n_given) oo.n = 2000;
    RunManifest m = manifest("replicate-table", oo);
    m.scenario = sc.name;
    sim_overrides(m, oo);
    m.overrides["table"] = t.id;

    const ImpliedCovariance sigma = sc.sigma();
    const auto names = sc.population().vars.observed;
    const ModelSpec analysis = sc.analysis();
    const TwoSlwConfig tc = search_config(oo);
    const SqrtMethod sq = sqrt_method(oo);
    std::vector<std::optional<TwoSlwReport>> reports(static_cast<std::size_t>(oo.reps));
    parallel_for(reports.size(), [&](std::size_t r) {
        try {
            Philox4x32 rng(oo.seed, r);
            reports[r] = run_2slw(analysis, sample_moments(generate_data(sigma, oo.n, rng, sq), names), tc);
        } catch (const Error&) {
        }
    });

    CsvTable side({"lhs", "op", "rhs", "truth", "paper_lm", "ours_lm", "paper_epc", "ours_epc", "paper_wald",
                   "ours_wald", "paper_p", "ours_p", "ours_rank", "ours_stage1_kept", "ours_retained"});
    for (const auto& row : t.rows) {
        const std::string key = ParameterSpec::make(row.lhs, *op_from_symbol(row.op), row.rhs).key();
        double lm = 0, epc = 0, rank = 0, wald = 0, pv = 0, kept = 0, retained = 0;
        int seen = 0, tested = 0, ok = 0;
        for (const auto& rep : reports) {
            if (!rep) continue;
            ++ok;
            for (const auto& d : rep->stage_one)
                if (d.candidate.param.key() == key) {
                    ++seen;
                    lm += d.candidate.lm_chi2;
                    epc += d.candidate.epc;
                    rank += d.candidate.rank;
                    kept += d.kept;
                }
            for (const auto& w : rep->stage_two)
                if (w.param.key() == key && !std::isnan(w.wald)) {
                    ++tested;
                    wald += w.wald;
                    pv += w.p_value;
                    retained += w.retained;
                }
        }
        const double nan = std::nan("");
        side.row().add(row.lhs).add(row.op).add(row.rhs).add(row.truth);
        side.add(row.lm).add(seen ? lm / seen : nan).add(row.epc).add(seen ? epc / seen : nan);
        side.add(row.wald).add(tested ? wald / tested : nan).add(row.p_value).add(tested ? pv / tested : nan);
        side.add(seen ? rank / seen : nan).add(ok ? kept / ok : nan).add(ok ? retained / ok : nan);
    }
    const fs::path dir = o.out;
    write_text(dir / "paper_vs_ours.csv", side.str(m));
    SimulationConfig cfg = sim_config(oo);
    cfg.keep_records = false;
    write_text(dir / "summary.csv", summary_csv({run_detection(sc, cfg)}).str(m));
    std::cout << side.str(m);
    return kOk;
}

int cmd_replicate(const Options& o, bool reps_given, bool n_given) {
    for (const auto& t : reference::fit_tables())
        if (t.id == o.table) return replicate_fit_table(t, o, reps_given);
    for (const auto& t : reference::search_tables())
        if (t.id == o.table) return replicate_search_table(t, o, reps_given, n_given);
    throw Error("unknown table id '" + o.table + "' (expected T1, A1, A8, T2, T3 or T4)");
}

bool numerical(const Error& e) {
    return dynamic_cast<const StartValueFailure*>(&e) ||
           dynamic_cast<const SingularSystem*>(&e) || dynamic_cast<const UnstableProcess*>(&e) ||
           dynamic_cast<const NonFiniteParameter*>(&e) || dynamic_cast<const NotPositiveDefinite*>(&e);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage LM-Wald diagnosis of panel models"};
    app.set_version_flag("--version", std::string(tool_version));
    app.require_subcommand(1);
    Options o;

    auto model_flag = [&](CLI::App* c) {
        c->add_option("model,--model", o.model, "Model file");
    };
    auto search_flags = [&](CLI::App* c) {
        c->add_option("--alpha", o.alpha, "Wald significance level")->check(CLI::Range(0.0, 1.0));
        c->add_option("--top-k", o.top_k, "LM candidates passed to the filters")->check(CLI::PositiveNumber);
        c->add_option("--epc-min", o.epc_min, "Smallest |EPC| kept by the filters")->check(CLI::NonNegativeNumber);
    };
    auto sim_flags = [&](CLI::App* c) {
        c->add_option("--n", o.n, "Sample size")->check(CLI::PositiveNumber);
        c->add_option("--reps", o.reps, "Replications")->check(CLI::PositiveNumber);
        c->add_option("--seed", o.seed, "Run seed");
        c->add_option("--sqrt", o.sqrt, "Square root of Sigma")->check(CLI::IsMember({"chol", "sym"}));
    };

    auto* validate = app.add_subcommand("validate", "Parse a model and check its identification");
    model_flag(validate);

    auto* fitc = app.add_subcommand("fit", "Fit a model to CSV data");
    model_flag(fitc);
    fitc->add_option("--data", o.data, "CSV data with a header row");
    fitc->add_option("--out", o.out, "Output directory");
    fitc->add_flag("--dump-matrices", o.dump_matrices, "Also write the RAM matrices at the estimate");

    auto* diag = app.add_subcommand("diagnose", "Run the two-stage LM-Wald search");
    model_flag(diag);
    diag->add_option("--data", o.data, "CSV data with a header row");
    diag->add_option("--out", o.out, "Output directory");
    diag->add_flag("--dump-matrices", o.dump_matrices, "Also write the RAM matrices at the baseline estimate");
    search_flags(diag);

    auto* sim = app.add_subcommand("simulate", "Monte Carlo runs for a scenario");
    sim->add_option("scenario,--scenario", o.scenario, "Scenario name or manifest file");
    sim->add_option("--out", o.out, "Output directory");
    sim->add_flag("--search", o.search, "Run the LM-Wald search even when the scenario has no truth");
    sim->add_flag("--raw", o.raw, "Also write one row per replication");
    sim_flags(sim);
    search_flags(sim);

    auto* rep = app.add_subcommand("replicate-table", "Reproduce a published table side by side");
    rep->add_option("table", o.table, "T1, A1, A8, T2, T3 or T4")->required();
    rep->add_option("--out", o.out, "Output directory");
    sim_flags(rep);
    search_flags(rep);

    auto* data_sim = app.add_subcommand("generate", "Write one simulated data set as CSV");
    data_sim->add_option("scenario,--scenario", o.scenario, "Scenario name or manifest file");
    data_sim->add_option("--out", o.out, "Output CSV file")->required();
    sim_flags(data_sim);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUserError;
    }

    try {
        if (*validate) return cmd_validate(o);
        if (*fitc) return cmd_fit(o);
        if (*diag) return cmd_diagnose(o);
        if (*sim) return cmd_simulate(o);
        if (*rep) return cmd_replicate(o, rep->count("--reps") > 0, rep->count("--n") > 0);
        if (*data_sim) {
            const PopulationScenario sc = load_scenario(o.scenario);
            Philox4x32 rng(o.seed, 0);
            const Dataset d = generate_dataset(sc, o.n, rng, sqrt_method(o));
            write_text(o.out, dataset_csv(d.values, d.names));
            return kOk;
        }
    } catch (const SyntaxError& e) {
        std::cerr << (o.model.empty() ? std::string() : o.model + ": ") << e.what() << "\n";
        return kUserError;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return numerical(e) ? kNumerical : kUserError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUserError;
    }
    return kOk;
}
