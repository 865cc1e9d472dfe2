#pragma once

#include "mumimo/common.hpp"

namespace mumimo {

/// Cholesky factorization of a Hermitian PSD matrix. When the factorization
/// fails (singular or indefinite within rounding), a ridge of 1e-12 times
/// the mean diagonal is added and a warning is emitted.
class HermitianSolver {
public:
    explicit HermitianSolver(const CMat& a);

    CMat solve(const CMat& b) const { return llt_.solve(b); }
    CVec solve(const CVec& b) const { return llt_.solve(b); }
    bool regularized() const { return regularized_; }

private:
    Eigen::LLT<CMat> llt_;
    bool regularized_ = false;
};

/// (A + A^H) / 2
CMat hermitian_part(const CMat& a);

/// Smallest eigenvalue of the Hermitian part of `a`.
double min_eigenvalue(const CMat& a);
double max_eigenvalue(const CMat& a);

bool is_hermitian(const CMat& a, double tol);

/// PSD within a relative tolerance: lambda_min >= -rel_tol * max(|lambda_max|, 1e-300).
bool is_psd(const CMat& a, double rel_tol);

}  // namespace mumimo
