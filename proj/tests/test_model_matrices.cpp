#include <catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>

#include <random>

#include "panelwald/closed_form.hpp"
#include "panelwald/model_matrices.hpp"
#include "test_models.hpp"

using namespace panelwald;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

RiclpmClosedForm baseline_closed_form(int T) {
    RiclpmClosedForm cf;
    cf.Phi << 0.25, 0.15, 0.15, 0.25;
    cf.Sigma_pi.bottomRightCorner<2, 2>() << 1.0, 0.3, 0.3, 1.0;
    cf.Sigma_eps << 1.0, 0.2, 0.2, 1.0;
    cf.Sigma_v << 1.0, 0.2, 0.2, 1.0;
    cf.T = T;
    return cf;
}

/// Two-wave single-indicator CLPM, x_t = lambda x*_t + e_t, with only the
/// cross-lag WFY1 -> WFX2 free.
std::string single_indicator_text(double lx, double ly, double err) {
    const std::string a = detail::format_number(lx), b = detail::format_number(ly), e = detail::format_number(err);
    return "WFX1 =~ " + a + "*x1\nWFY1 =~ " + b + "*y1\nWFX2 =~ " + a + "*x2\nWFY2 =~ " + b + "*y2\n" +
           "WFX2 ~ 0.25*WFX1 + WFY1\nWFY2 ~ 0.25*WFY1 + 0.15*WFX1\n"
           "WFX1 ~~ 1*WFX1\nWFY1 ~~ 1*WFY1\nWFX1 ~~ 0.3*WFY1\n"
           "WFX2 ~~ 1*WFX2\nWFY2 ~~ 1*WFY2\nWFX2 ~~ 0.2*WFY2\n"
           "x1 ~~ " + e + "*x1\ny1 ~~ " + e + "*y1\nx2 ~~ " + e + "*x2\ny2 ~~ " + e + "*y2\n";
}

}  // namespace

TEST_CASE("identity covariance", "[matrices]") {
    auto ram = build_ram(parse_model("x1 ~~ 1*x1\nx2 ~~ 1*x2\nx3 ~~ 1*x3"));
    auto imp = implied_sigma_ram(ram, Eigen::VectorXd(0));
    CHECK(imp.is_pd);
    CHECK(imp.sigma.isApprox(Eigen::MatrixXd::Identity(3, 3), 1e-15));
    CHECK_THAT(imp.logdet, WithinAbs(0.0, 1e-15));
}

TEST_CASE("two-wave autoregression by hand", "[matrices]") {
    auto ram = build_ram(parse_model("x2 ~ b*x1\nx1 ~~ 1*x1\nx2 ~~ 1*x2"));
    REQUIRE(ram.size() == 1);
    Eigen::VectorXd th(1);
    th << 0.5;
    auto imp = implied_sigma_ram(ram, th);
    Eigen::Matrix2d expect;
    expect << 1.0, 0.5, 0.5, 1.25;
    CHECK((imp.sigma - expect).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("RAM structure invariants", "[matrices]") {
    auto spec = parse_model(testing::baseline_riclpm_text(4));
    auto ram = build_ram(spec);
    CHECK(ram.size() == static_cast<int>(spec.free_count()));
    CHECK(ram.n_observed == 8);
    CHECK(ram.F.rowwise().sum().isOnes());
    for (const auto& cells : ram.theta_map) CHECK(cells.size() >= 1);
    auto th = testing::baseline_theta(ram);
    CHECK(ram.S(th).isApprox(ram.S(th).transpose()));
    CHECK(ram.variables[0] == "x1");
    CHECK(ram.variables[1] == "y1");
}

TEST_CASE("evaluation errors", "[matrices]") {
    auto ram = build_ram(parse_model("a ~ b\nb ~ 1*a\na ~~ 1*a\nb ~~ 1*b"));
    Eigen::VectorXd th(1);
    th << 1.0;
    CHECK_THROWS_AS(implied_sigma_ram(ram, th), SingularSystem);
    th << std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(implied_sigma_ram(ram, th), NonFiniteParameter);
    th << std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(implied_sigma_ram(ram, th), NonFiniteParameter);
    th << 0.5;
    CHECK(implied_sigma_ram(ram, th).is_pd);  // non-recursive but invertible
}

TEST_CASE("closed form without dynamics or traits", "[matrices]") {
    RiclpmClosedForm cf;
    cf.T = 3;
    auto imp = implied_sigma_closed_form(cf);
    CHECK(imp.sigma.isApprox(Eigen::MatrixXd::Identity(6, 6)));
}

TEST_CASE("closed form rejects non-stationary dynamics", "[matrices]") {
    RiclpmClosedForm cf;
    cf.T = 3;
    cf.Phi << 0.9, 0.3, 0.3, 0.9;
    CHECK_THROWS_AS(implied_sigma_closed_form(cf), UnstableProcess);
    CHECK_THROWS_AS(gamma_matrix(cf), UnstableProcess);
    cf.Phi << 1.0, 0.0, 0.0, 0.2;
    CHECK_THROWS_AS(implied_sigma_closed_form(cf), UnstableProcess);
}

TEST_CASE("Gamma is block lower Toeplitz in powers of Phi", "[matrices]") {
    auto cf = baseline_closed_form(4);
    auto G = gamma_matrix(cf);
    Eigen::Matrix2d phi2 = cf.Phi * cf.Phi;
    CHECK(G.block<2, 2>(4, 0).isApprox(phi2));
    CHECK(G.block<2, 2>(6, 2).isApprox(phi2));
    CHECK(G.block<2, 2>(0, 2).isZero());
    // Gamma inverts the differencing operator z_t - Phi z_{t-1}.
    Eigen::MatrixXd Bd = Eigen::MatrixXd::Identity(8, 8);
    for (int t = 1; t < 4; ++t) Bd.block<2, 2>(2 * t, 2 * (t - 1)) = -cf.Phi;
    CHECK((Bd * G).isApprox(Eigen::MatrixXd::Identity(8, 8)));
}

TEST_CASE("baseline RI-CLPM: RAM matches the closed form", "[matrices][oracle]") {
    auto ram = build_ram(parse_model(testing::baseline_riclpm_text(4)));
    auto a = implied_sigma_ram(ram, testing::baseline_theta(ram));
    auto b = implied_sigma_closed_form(baseline_closed_form(4));
    CHECK((a.sigma - b.sigma).cwiseAbs().maxCoeff() < 1e-10);
    CHECK_THAT(a.logdet, WithinAbs(b.logdet, 1e-10));
}

TEST_CASE("RAM matches the closed form on random stable draws", "[matrices][oracle]") {
    std::mt19937_64 rng(17);
    for (int rep = 0; rep < 100; ++rep) {
        auto cf = testing::random_closed_form(rng);
        auto ram = build_ram(parse_model(closed_form_model_text(cf)));
        REQUIRE(ram.size() == 0);
        auto a = implied_sigma_ram(ram, Eigen::VectorXd(0));
        auto b = implied_sigma_closed_form(cf);
        REQUIRE(a.sigma.rows() == 2 * cf.T);
        CHECK((a.sigma - b.sigma).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("analytic Jacobian matches central differences", "[matrices][oracle]") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> jig(-0.1, 0.1);
    const std::string labelled =
        "F =~ 1*a1 + l*b1 + l*c1\nG =~ 1*a2 + m*b2 + c2\nG ~ F\na1 ~~ a2\nb1 ~~ e*b1\nb2 ~~ e*b2\n";
    for (const auto& text : {testing::baseline_riclpm_text(4), testing::baseline_riclpm_text(3), labelled}) {
        auto ram = build_ram(parse_model(text));
        Eigen::VectorXd base = Eigen::VectorXd::Constant(ram.size(), 0.6);
        if (text == testing::baseline_riclpm_text(4)) base = testing::baseline_theta(ram);
        for (int rep = 0; rep < 5; ++rep) {
            Eigen::VectorXd th = base;
            for (int j = 0; j < th.size(); ++j) th[j] += jig(rng);
            auto jac = sigma_jacobian(ram, th);
            REQUIRE(static_cast<int>(jac.size()) == ram.size());
            const double h = 1e-6;
            for (int j = 0; j < ram.size(); ++j) {
                Eigen::VectorXd tp = th, tm = th;
                tp[j] += h;
                tm[j] -= h;
                Eigen::MatrixXd fd = (implied_sigma_ram(ram, tp).sigma - implied_sigma_ram(ram, tm).sigma) / (2 * h);
                CHECK(jac[j].isApprox(jac[j].transpose()));
                const double scale = std::max(1.0, fd.cwiseAbs().maxCoeff());
                CHECK((jac[j] - fd).cwiseAbs().maxCoeff() / scale < 1e-6);
            }
        }
    }
}

TEST_CASE("derivative of a pure S cell is linear", "[matrices]") {
    auto ram = build_ram(parse_model("F =~ 1*a + 0.7*b\nF ~~ 1*F\na ~~ a\nb ~~ 1*b"));
    REQUIRE(ram.size() == 1);
    Eigen::VectorXd th(1);
    th << 0.4;
    auto d = sigma_jacobian(ram, th)[0];
    Eigen::Matrix2d e = Eigen::Matrix2d::Zero();
    e(0, 0) = 1.0;
    CHECK(d.isApprox(e));
}

TEST_CASE("cross-lag derivative scales with the product of loadings", "[matrices]") {
    auto deriv = [](double lx, double ly) {
        auto ram = build_ram(parse_model(single_indicator_text(lx, ly, 1.0)));
        Eigen::VectorXd th(1);
        th << 0.15;
        return sigma_jacobian(ram, th)[0];
    };
    auto d1 = deriv(1.0, 1.0);
    auto d2 = deriv(0.3, 0.3);
    CHECK(d2.isApprox(0.09 * d1, 1e-12));
    // With unequal loadings each entry picks up the loadings of its own pair.
    auto d3 = deriv(0.3, 0.5);
    CHECK(d3(2, 1) == Catch::Approx(0.15 * d1(2, 1)).epsilon(1e-12));
    CHECK(d3(2, 2) == Catch::Approx(0.09 * d1(2, 2)).epsilon(1e-12));
}

TEST_CASE("information of independent variances", "[matrices]") {
    auto ram = build_ram(parse_model("a ~~ a\nb ~~ b\nc ~~ c"));
    Eigen::VectorXd th(3);
    th << 0.5, 2.0, 3.0;
    auto info = fisher_information(ram, th);
    for (int j = 0; j < 3; ++j) {
        CHECK_THAT(info(j, j), WithinRel(0.5 / (th[j] * th[j]), 1e-14));
        for (int k = 0; k < 3; ++k)
            if (k != j) CHECK(info(j, k) == 0.0);
    }
}

TEST_CASE("information matches the trace formula", "[matrices][oracle]") {
    auto ram = build_ram(parse_model(testing::baseline_riclpm_text(4)));
    auto th = testing::baseline_theta(ram);
    auto info = fisher_information(ram, th);
    auto jac = sigma_jacobian(ram, th);
    Eigen::MatrixXd P = implied_sigma_ram(ram, th).sigma.inverse();
    for (int j = 0; j < ram.size(); ++j)
        for (int k = 0; k < ram.size(); ++k) {
            const double ref = 0.5 * (P * jac[j] * P * jac[k]).trace();
            CHECK_THAT(info(j, k), WithinAbs(ref, 1e-10 * std::max(1.0, std::abs(ref))));
        }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(info);
    CHECK(es.eigenvalues().minCoeff() >= -1e-10);
}

TEST_CASE("information requires a positive definite Sigma", "[matrices]") {
    auto ram = build_ram(parse_model("a ~~ a\nb ~~ b\na ~~ c*b"));
    Eigen::VectorXd th(3);
    th << 1.0, 1.0, 2.0;
    CHECK_THROWS_AS(fisher_information(ram, th), NotPositiveDefinite);
}

TEST_CASE("cross-lag information vanishes with weak loadings", "[matrices][identification]") {
    auto info_at = [](double l) {
        auto ram = build_ram(parse_model(single_indicator_text(l, l, 1.0)));
        Eigen::VectorXd th(1);
        th << 0.15;
        return fisher_information(ram, th)(0, 0);
    };
    const double ratio = info_at(0.1) / info_at(1.0);
    CHECK(ratio > 3e-5);
    CHECK(ratio < 3e-3);
    // Once Sigma is dominated by measurement error the decay is exactly quartic.
    const double tail = info_at(0.01) / info_at(0.1);
    const double theory = std::pow(0.1 * 0.1, 2);
    CHECK(tail > theory / 3.0);
    CHECK(tail < theory * 3.0);
}

TEST_CASE("baseline RI-CLPM is identified at the population point", "[matrices][identification]") {
    auto ram = build_ram(parse_model(testing::baseline_riclpm_text(4)));
    auto rep = identification_check(ram, testing::baseline_theta(ram));
    CHECK(rep.rank == ram.size());
    CHECK(rep.deficient.empty());
    CHECK(std::isfinite(rep.condition));
}

TEST_CASE("two parameters on one cell lose exactly one rank", "[matrices][identification]") {
    // b1 ~ F occupies the same A cell as the loading F =~ b1.
    auto ram = build_ram(parse_model("F =~ 1*a1 + b1 + c1 + d1\nb1 ~ F"));
    Eigen::VectorXd th = Eigen::VectorXd::Constant(ram.size(), 0.5);
    auto rep = identification_check(ram, th);
    CHECK(rep.rank == ram.size() - 1);
    REQUIRE(rep.deficient.size() == 2);
    CHECK(ram.theta_names[rep.deficient[0]] == "F=~b1");
    CHECK(ram.theta_names[rep.deficient[1]] == "b1~F");
}

TEST_CASE("identification check never throws", "[matrices][identification]") {
    auto ram = build_ram(parse_model("a ~ b\nb ~ 1*a\na ~~ 1*a\nb ~~ 1*b"));
    Eigen::VectorXd th(1);
    th << 1.0;
    IdentificationReport rep;
    CHECK_NOTHROW(rep = identification_check(ram, th));
    CHECK(rep.deficient.size() == 1);
    CHECK(std::isinf(rep.condition));
}

TEST_CASE("vanishing within-person variance makes the Jacobian ill-conditioned", "[matrices][identification]") {
    const auto ram = build_ram(parse_model(testing::measured_riclpm_text(3)));
    const auto healthy = identification_check(ram, testing::measured_riclpm_theta(ram, 1.0));
    CHECK(healthy.rank == ram.size());
    CHECK(healthy.deficient.empty());

    const auto weak = identification_check(ram, testing::measured_riclpm_theta(ram, 1e-4));
    CHECK(weak.condition > 1e6);
    CHECK(weak.condition > 100.0 * healthy.condition);

    // Further toward the limit some direction drops into the numerical null space.
    const auto limit = identification_check(ram, testing::measured_riclpm_theta(ram, 1e-6));
    CHECK(limit.condition > weak.condition);
    CHECK_FALSE(limit.deficient.empty());
}
