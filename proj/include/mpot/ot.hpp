#pragma once

#include <vector>

#include "mpot/matrix.hpp"

namespace mpot::ot {

// Row/column target distributions of a transport problem. Both must be
// probability vectors.
struct Marginals {
    std::vector<double> mu;  // length M
    std::vector<double> nu;  // length N
};

Marginals uniform_marginals(int m, int n);
void validate_marginals(const Marginals& marg);

struct SinkhornConfig {
    double epsilon = 0.05;  // entropic regularization strength
    int max_iter = 100;
    double tol = 1e-6;  // L-inf marginal residual threshold
};

struct TransportPlan {
    Matrix values;  // M x N, nonnegative
    int iterations_used = 0;
    bool converged = false;
};

// Entropy-regularized transport plan via log-domain Sinkhorn iterations.
// Runs until the L-inf marginal residual drops below cfg.tol or max_iter
// is reached; non-convergence is reported through the flag, not an error.
// With tol <= 0 exactly max_iter iterations are performed.
TransportPlan sinkhorn_plan(const Matrix& cost, const Marginals& marg,
                            const SinkhornConfig& cfg);

// <T, C>, the linear transport objective.
double transport_cost(const Matrix& plan, const Matrix& cost);

// sum_ij T_ij log T_ij (negative of the usual Shannon entropy). Requires
// strictly positive entries; entropic plans are interior so this holds.
double plan_entropy(const Matrix& plan);

// max deviation of row sums from mu and column sums from nu.
double marginal_residual(const Matrix& plan, const Marginals& marg);

// Exact minimizer found by enumerating basic feasible solutions of the
// transportation polytope (spanning-tree supports). Test oracle; only
// instances with M*N <= 16 are accepted.
TransportPlan exact_ot_oracle(const Matrix& cost, const Marginals& marg);

// Minimum-cost square assignment; returns for each row its assigned column.
std::vector<int> solve_assignment(const Matrix& cost);

// One-to-one baseline for an M x N pixel-prompt problem: rows are chunked
// into ceil(M/N) groups of at most N and a square assignment is solved per
// chunk. The returned plan holds 1/M at each assigned cell.
TransportPlan hungarian_assignment(const Matrix& cost);

}  // namespace mpot::ot
