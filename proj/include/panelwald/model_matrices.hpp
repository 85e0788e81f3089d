#pragma once

// RAM representation of a ModelSpec and everything computed from it:
// implied covariance, its parameter derivatives, expected information and
// the Jacobian rank check.
//
//   Sigma(theta) = F (I - A)^-1 S (I - A)^-T F'
//
// Variables are ordered observed-first, so F = [I_p 0].

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "panelwald/errors.hpp"
#include "panelwald/model_dsl.hpp"

namespace panelwald {

enum class MatrixKind { A, S };

/// One matrix cell driven by a parameter. S cells are stored with row <= col.
struct Cell {
    MatrixKind matrix = MatrixKind::A;
    int row = 0;
    int col = 0;
    friend bool operator==(const Cell&, const Cell&) = default;
};

struct RamSystem {
    std::vector<std::string> variables;  // observed first, then latent
    int n_observed = 0;
    Eigen::MatrixXd A0;  // fixed part of A
    Eigen::MatrixXd S0;  // fixed part of S
    Eigen::MatrixXd F;
    std::vector<std::vector<Cell>> theta_map;  // theta index -> bound cells
    std::vector<std::string> theta_names;      // parameter key, or "@label" for shared labels
    std::map<std::string, int> theta_of_key;   // every free parameter key -> theta index

    int size() const { return static_cast<int>(theta_map.size()); }
    int n_variables() const { return static_cast<int>(variables.size()); }

    int var_index(const std::string& name) const {
        for (int i = 0; i < n_variables(); ++i)
            if (variables[i] == name) return i;
        return -1;
    }

    Eigen::MatrixXd A(const Eigen::VectorXd& theta) const {
        Eigen::MatrixXd a = A0;
        for (int j = 0; j < size(); ++j)
            for (const auto& c : theta_map[j])
                if (c.matrix == MatrixKind::A) a(c.row, c.col) += theta[j];
        return a;
    }

    Eigen::MatrixXd S(const Eigen::VectorXd& theta) const {
        Eigen::MatrixXd s = S0;
        for (int j = 0; j < size(); ++j)
            for (const auto& c : theta_map[j])
                if (c.matrix == MatrixKind::S) {
                    s(c.row, c.col) += theta[j];
                    if (c.row != c.col) s(c.col, c.row) += theta[j];
                }
        return s;
    }
};

/// Builds the RAM matrices for `spec`. Parameters sharing a label share one theta.
inline RamSystem build_ram(const ModelSpec& spec) {
    RamSystem ram;
    for (const auto& v : spec.vars.observed) ram.variables.push_back(v);
    for (const auto& v : spec.vars.latent) ram.variables.push_back(v);
    ram.n_observed = static_cast<int>(spec.vars.observed.size());
    const int m = ram.n_variables();
    ram.A0 = Eigen::MatrixXd::Zero(m, m);
    ram.S0 = Eigen::MatrixXd::Zero(m, m);
    ram.F = Eigen::MatrixXd::Zero(ram.n_observed, m);
    for (int i = 0; i < ram.n_observed; ++i) ram.F(i, i) = 1.0;

    std::map<std::string, int> label_theta;
    for (const auto& p : spec.params) {
        if (p.op == Op::Intercept) continue;
        Cell cell;
        switch (p.op) {
            case Op::Loading:
                cell = {MatrixKind::A, ram.var_index(p.rhs), ram.var_index(p.lhs)};
                break;
            case Op::Regression:
                cell = {MatrixKind::A, ram.var_index(p.lhs), ram.var_index(p.rhs)};
                break;
            default: {
                int a = ram.var_index(p.lhs), b = ram.var_index(p.rhs);
                cell = {MatrixKind::S, std::min(a, b), std::max(a, b)};
            }
        }
        if (!p.free) {
            if (cell.matrix == MatrixKind::A) {
                ram.A0(cell.row, cell.col) += p.value;
            } else {
                ram.S0(cell.row, cell.col) += p.value;
                if (cell.row != cell.col) ram.S0(cell.col, cell.row) += p.value;
            }
            continue;
        }
        int j;
        if (p.label) {
            auto it = label_theta.find(*p.label);
            if (it == label_theta.end()) {
                j = ram.size();
                label_theta[*p.label] = j;
                ram.theta_map.emplace_back();
                ram.theta_names.push_back("@" + *p.label);
            } else {
                j = it->second;
            }
        } else {
            j = ram.size();
            ram.theta_map.emplace_back();
            ram.theta_names.push_back(p.key());
        }
        ram.theta_map[j].push_back(cell);
        ram.theta_of_key[p.key()] = j;
    }
    return ram;
}

struct ImpliedCovariance {
    Eigen::MatrixXd sigma;
    double logdet = 0.0;
    bool is_pd = false;
};

inline ImpliedCovariance make_implied(Eigen::MatrixXd sigma) {
    ImpliedCovariance out;
    sigma = 0.5 * (sigma + sigma.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    out.is_pd = llt.info() == Eigen::Success;
    if (out.is_pd) {
        const auto& L = llt.matrixL();
        double ld = 0.0;
        for (Eigen::Index i = 0; i < sigma.rows(); ++i) {
            double d = L(i, i);
            if (!(d > 0.0)) {
                out.is_pd = false;
                break;
            }
            ld += 2.0 * std::log(d);
        }
        out.logdet = out.is_pd ? ld : std::numeric_limits<double>::quiet_NaN();
    } else {
        out.logdet = std::numeric_limits<double>::quiet_NaN();
    }
    out.sigma = std::move(sigma);
    return out;
}

namespace detail {

/// d Sigma / d theta_j written as sum_k coef_k (v_a v_b' + v_b v_a') over the
/// vector bank V = [F B, F Sigma_full] (p x 2m). A cell (r,c) contributes
/// (FB e_r)(F Sigma_full e_c)' + transpose; an S cell (r,c) contributes
/// (FB e_r)(FB e_c)' + transpose, halved on the diagonal.
struct Dyad {
    int a;
    int b;
    double coef;
};

inline std::vector<Dyad> dyads_of(const std::vector<Cell>& cells, int m) {
    std::vector<Dyad> out;
    for (const auto& c : cells) {
        if (c.matrix == MatrixKind::A)
            out.push_back({c.row, m + c.col, 1.0});
        else
            out.push_back({c.row, c.col, c.row == c.col ? 0.5 : 1.0});
    }
    return out;
}

/// ½ tr(P dSigma_j P dSigma_k) given the P-weighted Gram matrix of the bank.
inline double info_entry(const std::vector<Dyad>& dj, const std::vector<Dyad>& dk, const Eigen::MatrixXd& G) {
    double s = 0.0;
    for (const auto& x : dj)
        for (const auto& y : dk)
            s += x.coef * y.coef * (G(x.a, y.a) * G(x.b, y.b) + G(x.a, y.b) * G(x.b, y.a));
    return s;
}

}  // namespace detail

/// Evaluated RAM model at one theta.
class RamEvaluation {
public:
    RamEvaluation(const RamSystem& ram, const Eigen::VectorXd& theta) : ram_(&ram) {
        if (theta.size() != ram.size()) throw Error("parameter vector has wrong dimension");
        for (Eigen::Index i = 0; i < theta.size(); ++i)
            if (!std::isfinite(theta[i])) throw NonFiniteParameter(static_cast<std::size_t>(i));
        const int m = ram.n_variables();
        const int p = ram.n_observed;
        Eigen::MatrixXd IA = Eigen::MatrixXd::Identity(m, m) - ram.A(theta);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(IA);
        if (m > 0 && !(lu.rcond() > 1e-14)) throw SingularSystem();
        B_ = lu.inverse();
        if (!B_.allFinite()) throw SingularSystem();
        S_ = ram.S(theta);
        sigma_full_ = B_ * S_ * B_.transpose();
        sigma_full_ = 0.5 * (sigma_full_ + sigma_full_.transpose());
        bank_.resize(p, 2 * m);
        bank_.leftCols(m) = B_.topRows(p);
        bank_.rightCols(m) = sigma_full_.topRows(p);
        implied_ = make_implied(sigma_full_.topLeftCorner(p, p));
    }

    const RamSystem& ram() const { return *ram_; }
    const Eigen::MatrixXd& B() const { return B_; }
    const Eigen::MatrixXd& S() const { return S_; }
    const Eigen::MatrixXd& sigma_full() const { return sigma_full_; }
    const ImpliedCovariance& implied() const { return implied_; }
    const Eigen::MatrixXd& bank() const { return bank_; }

    std::vector<detail::Dyad> dyads(int j) const { return detail::dyads_of(ram_->theta_map[j], ram_->n_variables()); }

    Eigen::MatrixXd derivative(int j) const {
        const int p = ram_->n_observed;
        Eigen::MatrixXd d = Eigen::MatrixXd::Zero(p, p);
        for (const auto& dy : dyads(j)) {
            Eigen::MatrixXd outer = bank_.col(dy.a) * bank_.col(dy.b).transpose();
            d += dy.coef * (outer + outer.transpose());
        }
        return d;
    }

private:
    const RamSystem* ram_;
    Eigen::MatrixXd B_;
    Eigen::MatrixXd S_;
    Eigen::MatrixXd sigma_full_;
    Eigen::MatrixXd bank_;
    ImpliedCovariance implied_;
};

inline ImpliedCovariance implied_sigma_ram(const RamSystem& ram, const Eigen::VectorXd& theta) {
    return RamEvaluation(ram, theta).implied();
}

/// d Sigma / d theta_j for every free parameter, each symmetric p x p.
inline std::vector<Eigen::MatrixXd> sigma_jacobian(const RamSystem& ram, const Eigen::VectorXd& theta) {
    RamEvaluation ev(ram, theta);
    std::vector<Eigen::MatrixXd> out;
    out.reserve(ram.size());
    for (int j = 0; j < ram.size(); ++j) out.push_back(ev.derivative(j));
    return out;
}

/// Expected information per observation from an evaluated model:
/// I_jk = ½ tr(Sigma^-1 dSigma_j Sigma^-1 dSigma_k).
inline Eigen::MatrixXd fisher_information(const RamEvaluation& ev) {
    const auto& imp = ev.implied();
    if (!imp.is_pd) throw NotPositiveDefinite("Sigma");
    Eigen::LLT<Eigen::MatrixXd> llt(imp.sigma);
    const Eigen::MatrixXd G = ev.bank().transpose() * llt.solve(ev.bank());
    const int q = ev.ram().size();
    std::vector<std::vector<detail::Dyad>> d(q);
    for (int j = 0; j < q; ++j) d[j] = ev.dyads(j);
    Eigen::MatrixXd info(q, q);
    for (int j = 0; j < q; ++j)
        for (int k = 0; k <= j; ++k) info(j, k) = info(k, j) = detail::info_entry(d[j], d[k], G);
    return info;
}

inline Eigen::MatrixXd fisher_information(const RamSystem& ram, const Eigen::VectorXd& theta) {
    return fisher_information(RamEvaluation(ram, theta));
}

struct IdentificationReport {
    int rank = 0;
    double condition = 0.0;
    std::vector<int> deficient;
    Eigen::VectorXd singular_values;
};

/// Half-vectorization with off-diagonal entries scaled by sqrt(2), so that the
/// Euclidean norm matches the Frobenius norm of the full symmetric matrix.
inline Eigen::VectorXd weighted_vech(const Eigen::MatrixXd& m) {
    const Eigen::Index p = m.rows();
    Eigen::VectorXd v(p * (p + 1) / 2);
    Eigen::Index k = 0;
    for (Eigen::Index c = 0; c < p; ++c)
        for (Eigen::Index r = c; r < p; ++r) v[k++] = (r == c ? 1.0 : std::sqrt(2.0)) * m(r, c);
    return v;
}

/// Column rank of [vech(dSigma/dtheta_j)]. Singular values below 1e-8 * max are null.
inline IdentificationReport identification_check(const RamSystem& ram, const Eigen::VectorXd& theta) {
    IdentificationReport rep;
    const int q = ram.size();
    if (q == 0) return rep;
    std::vector<Eigen::MatrixXd> jac;
    try {
        jac = sigma_jacobian(ram, theta);
    } catch (const Error&) {
        rep.condition = std::numeric_limits<double>::infinity();
        for (int j = 0; j < q; ++j) rep.deficient.push_back(j);
        return rep;
    }
    const Eigen::Index p = ram.n_observed;
    Eigen::MatrixXd J(p * (p + 1) / 2, q);
    for (int j = 0; j < q; ++j) J.col(j) = weighted_vech(jac[j]);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(J, Eigen::ComputeFullV);
    rep.singular_values = Eigen::VectorXd::Zero(q);
    const auto& sv = svd.singularValues();
    for (Eigen::Index i = 0; i < sv.size(); ++i) rep.singular_values[i] = sv[i];
    const double smax = rep.singular_values.maxCoeff();
    const double smin = rep.singular_values.minCoeff();
    const double tol = 1e-8 * smax;
    std::vector<bool> flagged(q, false);
    for (int i = 0; i < q; ++i) {
        if (rep.singular_values[i] > tol) {
            ++rep.rank;
            continue;
        }
        const Eigen::VectorXd v = svd.matrixV().col(i);
        for (int j = 0; j < q; ++j)
            if (std::abs(v[j]) > 1e-6) flagged[j] = true;
    }
    for (int j = 0; j < q; ++j)
        if (flagged[j]) rep.deficient.push_back(j);
    rep.condition = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
    return rep;
}

}  // namespace panelwald
