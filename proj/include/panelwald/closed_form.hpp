#pragma once

// Closed-form covariance of the bivariate RI-CLPM,
//
//   B z_i = J pi_i + u_i,   Gamma = B^-1,   Sigma = Gamma (J Sigma_pi J' + Sigma_u) Gamma'
//
// with z_i = (x_1, y_1, ..., x_T, y_T), pi_i = (delta_i, eta_i) and
// u_i = (eps_1, v_2, ..., v_T). Used as the independent oracle for the RAM path.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <string>

#include "panelwald/errors.hpp"
#include "panelwald/model_dsl.hpp"
#include "panelwald/model_matrices.hpp"

namespace panelwald {

struct RiclpmClosedForm {
    /// Transition matrix in (x, y) order: row 0 predicts x_t, row 1 predicts y_t.
    /// Phi(0,0) = AR of x, Phi(0,1) = CL y->x, Phi(1,0) = CL x->y, Phi(1,1) = AR of y.
    Eigen::Matrix2d Phi = Eigen::Matrix2d::Zero();
    /// Loading of the trait factors eta on the first wave.
    Eigen::Matrix2d Psi = Eigen::Matrix2d::Identity();
    /// Covariance of pi = (delta_x, delta_y, eta_x, eta_y).
    Eigen::Matrix4d Sigma_pi = Eigen::Matrix4d::Zero();
    /// Covariance of the first-wave deviations.
    Eigen::Matrix2d Sigma_eps = Eigen::Matrix2d::Identity();
    /// Covariance of the within-wave innovations v_t (t >= 2).
    Eigen::Matrix2d Sigma_v = Eigen::Matrix2d::Identity();
    int T = 2;
};

inline double spectral_radius(const Eigen::Matrix2d& phi) {
    Eigen::EigenSolver<Eigen::Matrix2d> es(phi, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

namespace detail {

inline void require_stable(const RiclpmClosedForm& cf) {
    const double r = spectral_radius(cf.Phi);
    if (!(r < 1.0)) throw UnstableProcess(r);
    if (cf.T < 1) throw Error("wave count must be >= 1");
}

}  // namespace detail

/// Lower block-Toeplitz matrix of powers of Phi.
inline Eigen::MatrixXd gamma_matrix(const RiclpmClosedForm& cf) {
    detail::require_stable(cf);
    const int T = cf.T;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(2 * T, 2 * T);
    Eigen::Matrix2d power = Eigen::Matrix2d::Identity();
    for (int lag = 0; lag < T; ++lag) {
        for (int s = 0; s + lag < T; ++s) G.block<2, 2>(2 * (s + lag), 2 * s) = power;
        power = cf.Phi * power;
    }
    return G;
}

/// Loading of pi on the differenced system B z.
inline Eigen::MatrixXd j_matrix(const RiclpmClosedForm& cf) {
    const int T = cf.T;
    const Eigen::Matrix2d I = Eigen::Matrix2d::Identity();
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(2 * T, 4);
    J.block<2, 2>(0, 0) = I;
    J.block<2, 2>(0, 2) = cf.Psi;
    for (int t = 1; t < T; ++t) {
        J.block<2, 2>(2 * t, 0) = I - cf.Phi;
        J.block<2, 2>(2 * t, 2) = (t == 1) ? Eigen::Matrix2d(I - cf.Phi * cf.Psi) : Eigen::Matrix2d(I - cf.Phi);
    }
    return J;
}

inline Eigen::MatrixXd sigma_u(const RiclpmClosedForm& cf) {
    const int T = cf.T;
    Eigen::MatrixXd U = Eigen::MatrixXd::Zero(2 * T, 2 * T);
    U.block<2, 2>(0, 0) = cf.Sigma_eps;
    for (int t = 1; t < T; ++t) U.block<2, 2>(2 * t, 2 * t) = cf.Sigma_v;
    return U;
}

inline ImpliedCovariance implied_sigma_closed_form(const RiclpmClosedForm& cf) {
    detail::require_stable(cf);
    const Eigen::MatrixXd G = gamma_matrix(cf);
    const Eigen::MatrixXd J = j_matrix(cf);
    return make_implied(G * (J * cf.Sigma_pi * J.transpose() + sigma_u(cf)) * G.transpose());
}

/// The same model written in the DSL with every value fixed, so that the RAM
/// evaluator can reproduce it with an empty parameter vector.
inline std::string closed_form_model_text(const RiclpmClosedForm& cf) {
    auto num = [](double v) { return detail::format_number(v); };
    const int T = cf.T;
    auto xs = [](int t) { return "x" + std::to_string(t); };
    auto ys = [](int t) { return "y" + std::to_string(t); };
    std::string s;
    // Person-level factors: delta loads 1 everywhere, eta loads Psi at wave 1.
    s += "DX =~ ";
    for (int t = 1; t <= T; ++t) s += (t > 1 ? " + 1*" : "1*") + xs(t);
    s += "\nDY =~ ";
    for (int t = 1; t <= T; ++t) s += (t > 1 ? " + 1*" : "1*") + ys(t);
    s += "\nHX =~ " + num(cf.Psi(0, 0)) + "*x1 + " + num(cf.Psi(1, 0)) + "*y1";
    for (int t = 2; t <= T; ++t) s += " + 1*" + xs(t);
    s += "\nHY =~ " + num(cf.Psi(0, 1)) + "*x1 + " + num(cf.Psi(1, 1)) + "*y1";
    for (int t = 2; t <= T; ++t) s += " + 1*" + ys(t);
    s += "\n";
    for (int t = 1; t <= T; ++t) {
        s += "WFX" + std::to_string(t) + " =~ 1*" + xs(t) + "\n";
        s += "WFY" + std::to_string(t) + " =~ 1*" + ys(t) + "\n";
    }
    for (int t = 2; t <= T; ++t) {
        const std::string px = "WFX" + std::to_string(t - 1), py = "WFY" + std::to_string(t - 1);
        s += "WFX" + std::to_string(t) + " ~ " + num(cf.Phi(0, 0)) + "*" + px + " + " + num(cf.Phi(0, 1)) + "*" + py + "\n";
        s += "WFY" + std::to_string(t) + " ~ " + num(cf.Phi(1, 0)) + "*" + px + " + " + num(cf.Phi(1, 1)) + "*" + py + "\n";
    }
    const char* pis[4] = {"DX", "DY", "HX", "HY"};
    for (int i = 0; i < 4; ++i)
        for (int j = i; j < 4; ++j) s += std::string(pis[i]) + " ~~ " + num(cf.Sigma_pi(i, j)) + "*" + pis[j] + "\n";
    s += "WFX1 ~~ " + num(cf.Sigma_eps(0, 0)) + "*WFX1\n";
    s += "WFY1 ~~ " + num(cf.Sigma_eps(1, 1)) + "*WFY1\n";
    s += "WFX1 ~~ " + num(cf.Sigma_eps(0, 1)) + "*WFY1\n";
    for (int t = 2; t <= T; ++t) {
        const std::string wx = "WFX" + std::to_string(t), wy = "WFY" + std::to_string(t);
        s += wx + " ~~ " + num(cf.Sigma_v(0, 0)) + "*" + wx + "\n";
        s += wy + " ~~ " + num(cf.Sigma_v(1, 1)) + "*" + wy + "\n";
        s += wx + " ~~ " + num(cf.Sigma_v(0, 1)) + "*" + wy + "\n";
    }
    for (int t = 1; t <= T; ++t) s += xs(t) + " ~~ 0*" + xs(t) + "\n" + ys(t) + " ~~ 0*" + ys(t) + "\n";
    return s;
}

}  // namespace panelwald
