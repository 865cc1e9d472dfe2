#include "mumimo/linalg.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <iostream>

namespace mumimo {

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

HermitianSolver::HermitianSolver(const CMat& a) : llt_(a) {
    if (llt_.info() == Eigen::Success) return;
    const double scale = std::max(a.diagonal().real().cwiseAbs().mean(), 1.0);
    CMat reg = a;
    reg.diagonal().array() += 1e-12 * scale;
    llt_.compute(reg);
    regularized_ = true;
    warn("Hermitian system not positive definite; applied 1e-12 ridge");
    if (llt_.info() != Eigen::Success) {
        throw std::runtime_error("Hermitian solve failed after ridge regularization");
    }
}

CMat hermitian_part(const CMat& a) { return (a + a.adjoint()) * 0.5; }

double min_eigenvalue(const CMat& a) {
    Eigen::SelfAdjointEigenSolver<CMat> es(hermitian_part(a), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

double max_eigenvalue(const CMat& a) {
    Eigen::SelfAdjointEigenSolver<CMat> es(hermitian_part(a), Eigen::EigenvaluesOnly);
    return es.eigenvalues().maxCoeff();
}

bool is_hermitian(const CMat& a, double tol) {
    if (a.rows() != a.cols()) return false;
    return (a - a.adjoint()).cwiseAbs().maxCoeff() <= tol;
}

bool is_psd(const CMat& a, double rel_tol) {
    Eigen::SelfAdjointEigenSolver<CMat> es(hermitian_part(a), Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().cwiseAbs().maxCoeff();
    return lo >= -rel_tol * std::max(hi, 1e-300);
}

}  // namespace mumimo
