#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <sstream>

#include "panelwald/report.hpp"

using namespace panelwald;

namespace {

RunManifest fixed_manifest() {
    RunManifest m;
    m.command = "fit";
    m.model_path = "m.model";
    m.seed = 42;
    m.overrides = {{"alpha", "0.05"}};
    m.timestamp = "2000-01-01T00:00:00Z";
    return m;
}

}  // namespace

TEST_CASE("three-decimal cells", "[report]") {
    CHECK(fmt3(0.0) == "0.000");
    CHECK(fmt3(-0.0001) == "0.000");
    CHECK(fmt3(1.23456) == "1.235");
    CHECK(fmt3(-2.5) == "-2.500");
    CHECK(fmt3(std::nan("")) == "NA");
    CHECK(fmt3(std::numeric_limits<double>::infinity()) == "Inf");
}

TEST_CASE("CSV quoting", "[report]") {
    CHECK(csv_field("plain") == "plain");
    CHECK(csv_field("a,b") == "\"a,b\"");
    CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
}

TEST_CASE("tables carry the manifest ahead of the header", "[report]") {
    CsvTable t({"a", "b"});
    t.row().add(1).add(0.5);
    const std::string s = t.str(fixed_manifest());
    CHECK(s ==
          "# panelwald " + std::string(tool_version) +
              "\n# command: fit\n# model: m.model\n# seed: 42\n# alpha: 0.05\n# timestamp: 2000-01-01T00:00:00Z\n"
              "a,b\n1,0.500\n");
}

TEST_CASE("reading CSV data", "[report]") {
    std::istringstream in("# comment\ny, x ,z\n1,2,3\n4,NA,6\n7,8,9\n10,,12\n13\n");
    const auto d = read_csv(in, {"x", "y"});
    CHECK(d.names == std::vector<std::string>{"x", "y"});
    REQUIRE(d.values.rows() == 2);
    CHECK(d.values(0, 0) == 2.0);
    CHECK(d.values(0, 1) == 1.0);
    CHECK(d.values(1, 0) == 8.0);
    CHECK(d.dropped == 3);

    std::istringstream missing("a,b\n1,2\n");
    CHECK_THROWS_AS(read_csv(missing, {"a", "c"}), MissingColumn);
    std::istringstream junk("a\n1x\n2\n");
    CHECK(read_csv(junk, {"a"}).dropped == 1);
}

TEST_CASE("written data reads back exactly", "[report]") {
    Eigen::MatrixXd v(2, 2);
    v << 0.1, -1.0 / 3.0, 1e-300, 12345.678901234567;
    std::istringstream in(dataset_csv(v, {"p", "q"}));
    CHECK(read_csv(in, {"p", "q"}).values == v);
}

TEST_CASE("JSON keeps full precision and writes NaN as null", "[report]") {
    nlohmann::ordered_json j;
    j["third"] = 1.0 / 3.0;
    j["missing"] = std::nan("");
    const auto back = nlohmann::json::parse(json_document(fixed_manifest(), j));
    CHECK(back["result"]["third"].get<double>() == 1.0 / 3.0);
    CHECK(back["result"]["missing"].is_null());
    CHECK(back["manifest"]["seed"] == 42);
    CHECK(back["manifest"]["tool_version"] == tool_version);
}

TEST_CASE("fit and search reports", "[report]") {
    const auto sc = find_scenario("M2_DirectEffect");
    const auto S = moments_from_covariance(sc.sigma().sigma, 2000, sc.population().vars.observed);
    const auto r = run_2slw(sc.analysis(), S);
    const auto m = fixed_manifest();

    const auto j = report_json(sc.analysis(), r);
    CHECK(j["retained"] == nlohmann::json::array({"WFX4~WFX2"}));
    CHECK(j["baseline"]["df"] == 9);
    CHECK(j["improved"]["df"] == 8);
    CHECK(j["lm_table"].size() == r.stage_one.size());

    const std::string lm = lm_table_csv(r).str(m);
    CHECK(lm.find("rank,lhs,op,rhs,lm_chi2,epc,wald,p_value,disposition,veto\n") != std::string::npos);
    CHECK(lm.find(",WFX4,~,WFX2,") != std::string::npos);
    CHECK(lm.find("Retained") != std::string::npos);
    CHECK(deltas_csv(r).size() == r.comparison.deltas.size() + 2);
    CHECK(parameter_csv(sc.analysis(), r.baseline_fit).size() == parameter_table(sc.analysis(), r.baseline_fit).size());
}

TEST_CASE("summary columns follow the calibration table, then detection", "[report]") {
    SimulationSummary s;
    s.scenario = "X";
    s.detection = true;
    s.detection_rate = {{"a~b", 0.5}};
    s.distractor_rate = {{"a~c", 0.25}};
    const auto h = summary_header(s);
    const std::vector<std::string> expected = {"scenario", "n",   "reps",  "failed",     "df",
                                               "chi2",     "sd",  "p_value", "rej_rate", "nfi",
                                               "cfi",      "tli", "rmsea", "empty_rate", "false_positives",
                                               "detect:a~b", "distractor:a~c"};
    CHECK(h == expected);
}
