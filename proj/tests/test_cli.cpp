#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <unistd.h>

namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
};

const fs::path& scratch() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / ("panelwald_cli_test_" + std::to_string(::getpid()));
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

Run run(const std::string& args) {
    const fs::path log = scratch() / "stdout.txt";
    const std::string cmd = std::string("\"") + PANELWALD_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string model(const std::string& name) { return (fs::path(PANELWALD_MODELS_DIR) / name).string(); }

std::set<std::string> lines_of(const std::string& s) {
    std::set<std::string> out;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);)
        if (!l.empty()) out.insert(l);
    return out;
}

}  // namespace

TEST_CASE("validate", "[cli]") {
    auto r = run("validate " + model("riclpm_4wave.model"));
    CHECK(r.code == 0);
    CHECK(r.out.find("df = 9") != std::string::npos);

    const fs::path empty = scratch() / "empty.model";
    std::ofstream(empty).close();
    CHECK(run("validate " + empty.string()).code == 1);

    const fs::path bad = scratch() / "bad.model";
    std::ofstream(bad) << "WFX1 =~ 1*x1\nWFX1 ~ \n";
    r = run("validate " + bad.string());
    CHECK(r.code == 1);
    CHECK(r.out.find("line 2") != std::string::npos);

    const fs::path back = scratch() / "back.model";
    std::ofstream(back) << "x2 ~ x1 + y1\ny2 ~ y1 + x1\nx1 ~ y2\n";
    r = run("validate " + back.string());
    CHECK(r.out.find("TemporalOrderViolation") != std::string::npos);

    CHECK(run("validate " + (scratch() / "nope.model").string()).code == 1);
}

TEST_CASE("fit and diagnose on generated data", "[cli]") {
    const auto data = (scratch() / "m1.csv").string();
    REQUIRE(run("generate M1_Correlation --n 2000 --seed 3 --out " + data).code == 0);

    const auto fit_dir = scratch() / "fit";
    auto r = run("fit " + model("riclpm_4wave.model") + " --data " + data + " --out " + fit_dir.string() +
                 " --dump-matrices");
    CHECK(r.code == 0);
    for (const char* f : {"parameters.csv", "fit.csv", "fit.json", "matrix_A.csv", "implied_sigma.csv"})
        CHECK(fs::exists(fit_dir / f));

    r = run("diagnose " + model("riclpm_4wave.model") + " --data " + data + " --out " + (scratch() / "d05").string());
    CHECK(r.code == 0);
    const auto at05 = lines_of(r.out);
    CHECK(at05.count("WFX4~~WFY2"));
    CHECK(at05.count("WFX2~~WFY4"));
    for (const char* f : {"lm_table.csv", "stage_log.csv", "deltas.csv", "report.json"})
        CHECK(fs::exists(scratch() / "d05" / f));

    r = run("diagnose " + model("riclpm_4wave.model") + " --data " + data + " --alpha 0.01 --out " +
            (scratch() / "d01").string());
    CHECK(r.code == 0);
    for (const auto& l : lines_of(r.out)) CHECK(at05.count(l));

    CHECK(run("fit " + model("riclpm_4wave.model") + " --data " + (scratch() / "none.csv").string()).code == 1);
    CHECK(run("fit " + model("clpm_4wave.model") + " --data " + data).code == 1);  // MissingColumn
}

TEST_CASE("null data retains nothing", "[cli]") {
    const auto data = (scratch() / "null.csv").string();
    REQUIRE(run("generate Baseline4w --n 1000 --seed 2 --out " + data).code == 0);
    auto r = run("diagnose " + model("riclpm_4wave.model") + " --data " + data + " --out " + (scratch() / "dn").string());
    CHECK(r.code == 0);
    CHECK(r.out.find("no parameters retained") != std::string::npos);
}

TEST_CASE("simulate and replicate-table", "[cli]") {
    auto r = run("simulate M2_DirectEffect --n 500 --reps 5 --seed 7 --raw --out " + (scratch() / "s").string());
    CHECK(r.code == 0);
    CHECK(fs::exists(scratch() / "s" / "summary.csv"));
    CHECK(fs::exists(scratch() / "s" / "replications.csv"));

    const auto scn = (fs::path(PANELWALD_MODELS_DIR) / "CLPM_Corr.scn").string();
    CHECK(run("simulate " + scn + " --n 500 --reps 3 --out " + (scratch() / "s2").string()).code == 0);

    r = run("replicate-table T1 --reps 3 --out " + (scratch() / "t1").string());
    CHECK(r.code == 0);
    std::ifstream in(scratch() / "t1" / "paper_vs_ours.csv");
    int rows = 0;
    for (std::string l; std::getline(in, l);)
        if (!l.empty() && l[0] != '#' && l.rfind("n,", 0) != 0) ++rows;
    CHECK(rows == 8);

    CHECK(run("replicate-table T9").code == 1);
    CHECK(run("simulate NoSuchScenario --reps 1").code == 1);
    CHECK(run("simulate Baseline4w --sqrt cube").code == 1);
    CHECK(run("bogus").code == 1);
}
