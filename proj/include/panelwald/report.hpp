#pragma once

// Serialization of fits, 2SLW reports and simulation summaries.
//
// CSV tables use three decimals and start with the run manifest as "# key: value"
// comment lines, so every file says which command, model, seed and version made
// it. The timestamp is the only line that changes between identical runs. JSON
// keeps full double precision.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "panelwald/errors.hpp"
#include "panelwald/estimator.hpp"
#include "panelwald/model_matrices.hpp"
#include "panelwald/simulator.hpp"
#include "panelwald/twoslw.hpp"

namespace panelwald {

#ifndef PANELWALD_VERSION
#define PANELWALD_VERSION "0.0.0"
#endif

inline constexpr const char* tool_version = PANELWALD_VERSION;

struct RunManifest {
    std::string command;
    std::string model_path;
    std::string data_path;
    std::string scenario;
    std::map<std::string, std::string> overrides;  // effective option values
    std::uint64_t seed = 0;
    std::string output_dir;
    std::string tool_version = panelwald::tool_version;
    std::string timestamp;  // UTC, ISO 8601

    static std::string now() {
        const std::time_t t = std::time(nullptr);
        std::tm tm{};
        gmtime_r(&t, &tm);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
        return buf;
    }
};

inline nlohmann::ordered_json to_json(const RunManifest& m) {
    nlohmann::ordered_json j;
    j["command"] = m.command;
    j["model_path"] = m.model_path;
    j["data_path"] = m.data_path;
    j["scenario"] = m.scenario;
    j["overrides"] = m.overrides;
    j["seed"] = m.seed;
    j["output_dir"] = m.output_dir;
    j["tool_version"] = m.tool_version;
    j["timestamp"] = m.timestamp;
    return j;
}

// ---------------------------------------------------------------- CSV

/// Fixed three-decimal rendering; NaN becomes NA and negative zero loses its sign.
inline std::string fmt3(double v) {
    if (std::isnan(v)) return "NA";
    if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    std::string s = buf;
    if (s == "-0.000") s = "0.000";
    return s;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

    CsvTable& row() {
        rows_.emplace_back();
        return *this;
    }
    CsvTable& add(const std::string& s) {
        rows_.back().push_back(csv_field(s));
        return *this;
    }
    CsvTable& add(const char* s) { return add(std::string(s)); }
    CsvTable& add(double v) {
        rows_.back().push_back(fmt3(v));
        return *this;
    }
    CsvTable& add(int v) {
        rows_.back().push_back(std::to_string(v));
        return *this;
    }
    CsvTable& add(std::size_t v) {
        rows_.back().push_back(std::to_string(v));
        return *this;
    }
    CsvTable& add(bool v) {
        rows_.back().push_back(v ? "1" : "0");
        return *this;
    }

    std::size_t size() const { return rows_.size(); }

    std::string str(const RunManifest& m) const {
        std::ostringstream out;
        out << "# panelwald " << m.tool_version << "\n";
        out << "# command: " << m.command << "\n";
        if (!m.model_path.empty()) out << "# model: " << m.model_path << "\n";
        if (!m.data_path.empty()) out << "# data: " << m.data_path << "\n";
        if (!m.scenario.empty()) out << "# scenario: " << m.scenario << "\n";
        out << "# seed: " << m.seed << "\n";
        for (const auto& [k, v] : m.overrides) out << "# " << k << ": " << v << "\n";
        out << "# timestamp: " << m.timestamp << "\n";
        write_line(out, header_);
        for (const auto& r : rows_) write_line(out, r);
        return out.str();
    }

private:
    static void write_line(std::ostream& out, const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
        out << "\n";
    }

    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

inline std::string op_text(const ParameterSpec& p) { return std::string(op_symbol(p.op)); }

inline CsvTable parameter_csv(const ModelSpec& spec, const FitResult& f) {
    CsvTable t({"lhs", "op", "rhs", "free", "estimate", "se", "z", "p_value"});
    for (const auto& r : parameter_table(spec, f))
        t.row().add(r.param.lhs).add(op_text(r.param)).add(r.param.rhs).add(r.theta >= 0).add(r.estimate).add(r.se).add(
            r.z).add(r.p);
    return t;
}

inline CsvTable fit_block_csv(const FitResult& f, const FitIndices& fi) {
    CsvTable t({"chi2", "df", "p_value", "cfi", "nfi", "tli", "rmsea", "n", "converged", "iterations"});
    t.row().add(f.T_ml).add(f.df).add(f.p_value).add(fi.cfi).add(fi.nfi).add(fi.tli).add(fi.rmsea).add(f.moments.n).add(
        f.converged).add(f.iterations);
    return t;
}

/// LM table with stage-one dispositions and, where tested, the stage-two Wald result.
inline CsvTable lm_table_csv(const TwoSlwReport& r) {
    std::map<std::string, const WaldStep*> wald;
    for (const auto& w : r.stage_two) wald[w.param.key()] = &w;
    CsvTable t({"rank", "lhs", "op", "rhs", "lm_chi2", "epc", "wald", "p_value", "disposition", "veto"});
    for (const auto& d : r.stage_one) {
        const auto& c = d.candidate;
        const WaldStep* w = nullptr;
        if (auto it = wald.find(c.param.key()); it != wald.end()) w = it->second;
        std::string disposition = d.reason ? std::string(reason_name(*d.reason)) : "Kept";
        if (w) disposition = w->retained ? "Retained" : "NotRetained";
        t.row().add(c.rank).add(c.param.lhs).add(op_text(c.param)).add(c.param.rhs).add(c.lm_chi2).add(c.epc);
        t.add(w ? w->wald : std::nan("")).add(w ? w->p_value : std::nan("")).add(disposition);
        t.add(w && w->veto ? std::string(veto_name(*w->veto)) : std::string());
    }
    return t;
}

inline CsvTable stage_log_csv(const TwoSlwReport& r) {
    CsvTable t({"step", "lhs", "op", "rhs", "estimate", "se", "wald", "p_value", "retained", "veto"});
    for (const auto& w : r.stage_two)
        t.row().add(w.step_index).add(w.param.lhs).add(op_text(w.param)).add(w.param.rhs).add(w.estimate).add(w.se).add(
            w.wald).add(w.p_value).add(w.retained).add(w.veto ? std::string(veto_name(*w.veto)) : std::string());
    return t;
}

inline CsvTable deltas_csv(const TwoSlwReport& r) {
    CsvTable t({"parameter", "before", "after", "diff"});
    for (const auto& d : r.comparison.deltas) t.row().add(d.key).add(d.before).add(d.after).add(d.diff);
    t.row().add("chi2").add(r.baseline_fit.T_ml).add(r.improved_fit.T_ml).add(r.comparison.delta_chi2);
    t.row().add("df").add(static_cast<double>(r.baseline_fit.df)).add(static_cast<double>(r.improved_fit.df)).add(
        static_cast<double>(r.comparison.delta_df));
    return t;
}

inline std::vector<std::string> summary_header(const SimulationSummary& s) {
    std::vector<std::string> h = {"scenario", "n",   "reps", "failed", "df",  "chi2", "sd",
                                  "p_value",  "rej_rate", "nfi",  "cfi",    "tli", "rmsea"};
    if (s.detection) {
        h.push_back("empty_rate");
        h.push_back("false_positives");
        for (const auto& [k, v] : s.detection_rate) h.push_back("detect:" + k);
        for (const auto& [k, v] : s.distractor_rate) h.push_back("distractor:" + k);
    }
    return h;
}

inline void summary_row(CsvTable& t, const SimulationSummary& s) {
    t.row().add(s.scenario).add(s.n).add(s.reps).add(s.failed).add(s.df).add(s.mean_chi2).add(s.sd_chi2).add(s.mean_p);
    t.add(s.rejection_rate).add(s.mean_nfi).add(s.mean_cfi).add(s.mean_tli).add(s.mean_rmsea);
    if (s.detection) {
        t.add(s.empty_rate).add(s.false_positive_rate);
        for (const auto& [k, v] : s.detection_rate) t.add(v);
        for (const auto& [k, v] : s.distractor_rate) t.add(v);
    }
}

inline CsvTable summary_csv(const std::vector<SimulationSummary>& rows) {
    CsvTable t(rows.empty() ? std::vector<std::string>{} : summary_header(rows.front()));
    for (const auto& s : rows) summary_row(t, s);
    return t;
}

inline CsvTable replications_csv(const SimulationSummary& s) {
    CsvTable t({"rep", "ok", "chi2", "df", "p_value", "nfi", "cfi", "tli", "rmsea", "warnings", "retained"});
    for (const auto& r : s.records) {
        std::string warn, kept;
        for (auto w : r.warnings) warn += (warn.empty() ? "" : ";") + std::string(warning_name(w));
        for (const auto& k : r.retained) kept += (kept.empty() ? "" : ";") + k;
        t.row().add(r.rep).add(r.ok).add(r.chi2).add(r.df).add(r.p_value).add(r.indices.nfi).add(r.indices.cfi).add(
            r.indices.tli).add(r.indices.rmsea).add(warn).add(kept);
    }
    return t;
}

inline CsvTable matrix_csv(const Eigen::MatrixXd& m, const std::vector<std::string>& rows,
                           const std::vector<std::string>& cols) {
    std::vector<std::string> header = {""};
    header.insert(header.end(), cols.begin(), cols.end());
    CsvTable t(header);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        t.row().add(rows[static_cast<std::size_t>(i)]);
        for (Eigen::Index j = 0; j < m.cols(); ++j) t.add(m(i, j));
    }
    return t;
}

// ---------------------------------------------------------------- JSON

inline nlohmann::ordered_json to_json(const ParameterSpec& p) {
    return {{"lhs", p.lhs}, {"op", op_text(p)}, {"rhs", p.rhs}};
}

inline nlohmann::ordered_json to_json(const FitIndices& fi) {
    return {{"chi2", fi.chi2}, {"df", fi.df}, {"cfi", fi.cfi}, {"nfi", fi.nfi}, {"tli", fi.tli}, {"rmsea", fi.rmsea}};
}

inline nlohmann::ordered_json fit_json(const ModelSpec& spec, const FitResult& f, const FitIndices& fi) {
    nlohmann::ordered_json j;
    j["converged"] = f.converged;
    j["iterations"] = f.iterations;
    j["n"] = f.moments.n;
    j["chi2"] = f.T_ml;
    j["df"] = f.df;
    j["p_value"] = f.p_value;
    j["F_min"] = f.F_min;
    j["indices"] = to_json(fi);
    j["warnings"] = nlohmann::ordered_json::array();
    for (auto w : f.warnings) j["warnings"].push_back(std::string(warning_name(w)));
    auto& params = j["parameters"] = nlohmann::ordered_json::array();
    for (const auto& r : parameter_table(spec, f)) {
        auto e = to_json(r.param);
        e["free"] = r.theta >= 0;
        e["estimate"] = r.estimate;
        e["se"] = r.se;
        e["z"] = r.z;
        e["p_value"] = r.p;
        params.push_back(e);
    }
    return j;
}

inline nlohmann::ordered_json report_json(const ModelSpec& spec, const TwoSlwReport& r) {
    nlohmann::ordered_json j;
    j["config"] = {{"top_k", r.config.top_k},
                   {"epc_min", r.config.epc_min},
                   {"alpha", r.config.alpha},
                   {"enforce_temporal", r.config.enforce_temporal}};
    j["baseline"] = fit_json(spec, r.baseline_fit, r.baseline_indices);
    auto& lm = j["lm_table"] = nlohmann::ordered_json::array();
    for (const auto& d : r.stage_one) {
        auto e = to_json(d.candidate.param);
        e["rank"] = d.candidate.rank;
        e["lm_chi2"] = d.candidate.lm_chi2;
        e["epc"] = d.candidate.epc;
        e["kept"] = d.kept;
        e["reason"] = d.reason ? std::string(reason_name(*d.reason)) : std::string();
        lm.push_back(e);
    }
    auto& st = j["stage_two"] = nlohmann::ordered_json::array();
    for (const auto& w : r.stage_two) {
        auto e = to_json(w.param);
        e["step"] = w.step_index;
        e["estimate"] = w.estimate;
        e["se"] = w.se;
        e["wald"] = w.wald;
        e["p_value"] = w.p_value;
        e["retained"] = w.retained;
        e["veto"] = w.veto ? std::string(veto_name(*w.veto)) : std::string();
        st.push_back(e);
    }
    j["retained"] = nlohmann::ordered_json::array();
    for (const auto& p : r.retained) j["retained"].push_back(p.key());
    j["improved"] = fit_json(r.improved_spec, r.improved_fit, r.improved_indices);
    auto& dl = j["deltas"] = nlohmann::ordered_json::array();
    for (const auto& d : r.comparison.deltas)
        dl.push_back({{"parameter", d.key}, {"before", d.before}, {"after", d.after}, {"diff", d.diff}});
    j["delta_chi2"] = r.comparison.delta_chi2;
    j["delta_df"] = r.comparison.delta_df;
    return j;
}

inline nlohmann::ordered_json summary_json(const SimulationSummary& s) {
    nlohmann::ordered_json j;
    j["scenario"] = s.scenario;
    j["n"] = s.n;
    j["reps"] = s.reps;
    j["failed"] = s.failed;
    j["aborted"] = s.aborted;
    j["df"] = s.df;
    j["mean_chi2"] = s.mean_chi2;
    j["sd_chi2"] = s.sd_chi2;
    j["mean_p"] = s.mean_p;
    j["rejection_rate"] = s.rejection_rate;
    j["mean_nfi"] = s.mean_nfi;
    j["mean_cfi"] = s.mean_cfi;
    j["mean_tli"] = s.mean_tli;
    j["mean_rmsea"] = s.mean_rmsea;
    if (s.detection) {
        j["detection_rate"] = s.detection_rate;
        j["distractor_rate"] = s.distractor_rate;
        j["false_positive_rate"] = s.false_positive_rate;
        j["empty_rate"] = s.empty_rate;
    }
    return j;
}

/// Wraps a payload with the manifest, the form every JSON output file takes.
inline std::string json_document(const RunManifest& m, nlohmann::ordered_json payload) {
    nlohmann::ordered_json doc;
    doc["manifest"] = to_json(m);
    doc["result"] = std::move(payload);
    return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------- data input

struct CsvData {
    Eigen::MatrixXd values;
    std::vector<std::string> names;
    std::size_t dropped = 0;  // rows with a missing or non-numeric cell
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    for (auto& s : out) {
        s.erase(0, s.find_first_not_of(" \t"));
        s.erase(s.find_last_not_of(" \t\r") + 1);
    }
    return out;
}

inline bool parse_cell(const std::string& s, double& v) {
    if (s.empty() || s == "NA" || s == "NaN" || s == ".") return false;
    char* end = nullptr;
    v = std::strtod(s.c_str(), &end);
    return end && *end == '\0' && std::isfinite(v);
}

}  // namespace detail

/// Reads the columns named in `wanted` (in that order) from a CSV with a header
/// row. Lines starting with '#' are skipped. Incomplete rows are dropped.
inline CsvData read_csv(std::istream& in, const std::vector<std::string>& wanted) {
    std::string line;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        header = detail::split_csv_line(line);
        break;
    }
    std::vector<std::size_t> cols;
    for (const auto& w : wanted) {
        auto it = std::find(header.begin(), header.end(), w);
        if (it == header.end()) throw MissingColumn(w);
        cols.push_back(static_cast<std::size_t>(it - header.begin()));
    }
    CsvData d;
    d.names = wanted;
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r" || line[0] == '#') continue;
        const auto cells = detail::split_csv_line(line);
        std::vector<double> r(cols.size());
        bool ok = true;
        for (std::size_t k = 0; k < cols.size() && ok; ++k)
            ok = cols[k] < cells.size() && detail::parse_cell(cells[cols[k]], r[k]);
        if (ok)
            rows.push_back(std::move(r));
        else
            ++d.dropped;
    }
    d.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t k = 0; k < cols.size(); ++k)
            d.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
    return d;
}

inline CsvData read_csv_file(const std::string& path, const std::vector<std::string>& wanted) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read data file: " + path);
    return read_csv(in, wanted);
}

inline std::string dataset_csv(const Eigen::MatrixXd& values, const std::vector<std::string>& names) {
    std::ostringstream out;
    for (std::size_t j = 0; j < names.size(); ++j) out << (j ? "," : "") << names[j];
    out << "\n";
    char buf[64];
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
        for (Eigen::Index j = 0; j < values.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", values(i, j));
            out << (j ? "," : "") << buf;
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace panelwald
