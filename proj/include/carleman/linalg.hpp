#pragma once

#include <carleman/core.hpp>

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace carleman {

using SparseMatrix = Eigen::SparseMatrix<double>;

enum class Preconditioner { Jacobi, IncompleteCholesky, Cholesky };

inline std::string to_string(Preconditioner p)
{
    switch (p) {
    case Preconditioner::Jacobi: return "jacobi";
    case Preconditioner::IncompleteCholesky: return "ichol";
    default: return "cholesky";
    }
}

inline Preconditioner parse_preconditioner(const std::string& s)
{
    if (s == "jacobi") return Preconditioner::Jacobi;
    if (s == "ichol") return Preconditioner::IncompleteCholesky;
    if (s == "cholesky") return Preconditioner::Cholesky;
    throw ConfigError("unknown preconditioner '" + s + "' (jacobi, ichol, cholesky)", "solver.preconditioner");
}

struct PCGOptions {
    double tol = 1e-10;  // relative residual of the normal equations
    int max_iter = 5000;
    // Abort when the best residual has not improved by this factor over `stall_window` iterations.
    int stall_window = 400;
    double stall_factor = 0.5;
};

struct PCGResult {
    Eigen::VectorXd x;
    int iterations = 0;
    double rel_residual = 0.0;
    std::vector<double> trace;  // relative residual per iteration
};

/**
 * @brief Preconditioned conjugate gradients for the normal equations M^T M x = M^T d.
 *
 * M is applied as a sparse operator and never squared explicitly. The preconditioner is built from
 * `local`, a sparse matrix whose normal matrix approximates M^T M (M itself when it is cheap).
 */
class NormalEquations {
public:
    NormalEquations(const SparseMatrix& M, const SparseMatrix& local, Preconditioner kind) : M_(M), kind_(kind)
    {
        if (kind == Preconditioner::Jacobi) {
            diag_ = Eigen::VectorXd::Zero(M.cols());
            for (int k = 0; k < M.outerSize(); ++k)
                for (SparseMatrix::InnerIterator it(M, k); it; ++it) diag_[it.col()] += it.value() * it.value();
            for (long i = 0; i < diag_.size(); ++i) diag_[i] = diag_[i] > 0.0 ? 1.0 / diag_[i] : 1.0;
            return;
        }
        SparseMatrix N = SparseMatrix(local.transpose()) * local;
        N.makeCompressed();
        if (kind == Preconditioner::Cholesky) {
            llt_.compute(N);
            if (llt_.info() != Eigen::Success) throw SolverError("Cholesky preconditioner failed", NAN);
        } else {
            ichol_.compute(N);
            if (ichol_.info() != Eigen::Success) throw SolverError("incomplete Cholesky preconditioner failed", NAN);
        }
    }

    Eigen::VectorXd apply(const Eigen::VectorXd& x) const { return M_.transpose() * (M_ * x); }

    Eigen::VectorXd precondition(const Eigen::VectorXd& r) const
    {
        switch (kind_) {
        case Preconditioner::Jacobi: return diag_.cwiseProduct(r);
        case Preconditioner::Cholesky: return llt_.solve(r);
        default: return ichol_.solve(r);
        }
    }

    PCGResult solve(const Eigen::VectorXd& d, const PCGOptions& opt = {}) const
    {
        const Eigen::VectorXd b = M_.transpose() * d;
        PCGResult res;
        res.x = Eigen::VectorXd::Zero(M_.cols());
        const double bn = b.norm();
        if (bn == 0.0) return res;
        Eigen::VectorXd r = b, z = precondition(r), p = z;
        double rz = r.dot(z), best = 1.0;
        int best_at = 0;
        for (int it = 1; it <= opt.max_iter; ++it) {
            const Eigen::VectorXd Ap = apply(p);
            const double pAp = p.dot(Ap);
            if (!(pAp > 0.0)) throw SolverError("normal matrix is not positive definite", r.norm() / bn, res.trace);
            const double a = rz / pAp;
            res.x += a * p;
            r -= a * Ap;
            const double rel = r.norm() / bn;
            res.trace.push_back(rel);
            res.iterations = it;
            res.rel_residual = rel;
            if (rel < opt.tol) return res;
            if (rel < opt.stall_factor * best) {
                best = rel;
                best_at = it;
            } else if (it - best_at > opt.stall_window) {
                throw SolverError("conjugate gradients stagnated after " + std::to_string(it) + " iterations", rel,
                                  res.trace);
            }
            z = precondition(r);
            const double rz_new = r.dot(z);
            p = z + (rz_new / rz) * p;
            rz = rz_new;
        }
        throw SolverError("conjugate gradients hit the iteration limit", res.rel_residual, res.trace);
    }

private:
    const SparseMatrix& M_;
    Preconditioner kind_;
    Eigen::VectorXd diag_;
    Eigen::SimplicialLLT<SparseMatrix> llt_;
    Eigen::IncompleteCholesky<double> ichol_;
};

}  // namespace carleman
