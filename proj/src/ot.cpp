#include "mpot/ot.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mpot::ot {

namespace {

constexpr double kSumTol = 1e-12;

void check_shapes(const Matrix& cost, const Marginals& marg) {
    if (cost.rows != static_cast<int>(marg.mu.size()) ||
        cost.cols != static_cast<int>(marg.nu.size()))
        throw std::invalid_argument("cost dimensions do not match marginals");
    if (!all_finite(cost)) throw std::invalid_argument("non-finite cost entry");
}

}  // namespace

Marginals uniform_marginals(int m, int n) {
    if (m < 1 || n < 1) throw std::invalid_argument("marginals need positive dimensions");
    Marginals marg;
    marg.mu.assign(m, 1.0 / m);
    marg.nu.assign(n, 1.0 / n);
    return marg;
}

void validate_marginals(const Marginals& marg) {
    auto check = [](const std::vector<double>& v, const char* name) {
        double s = 0.0;
        for (double x : v) {
            if (x < 0.0 || !std::isfinite(x))
                throw std::invalid_argument(std::string(name) + ": negative or non-finite entry");
            s += x;
        }
        if (std::fabs(s - 1.0) > kSumTol)
            throw std::invalid_argument(std::string(name) + ": does not sum to 1");
    };
    check(marg.mu, "mu");
    check(marg.nu, "nu");
}

TransportPlan sinkhorn_plan(const Matrix& cost, const Marginals& marg,
                            const SinkhornConfig& cfg) {
    check_shapes(cost, marg);
    validate_marginals(marg);
    if (cfg.epsilon <= 0.0 || cfg.max_iter < 1)
        throw std::invalid_argument("invalid Sinkhorn config");

    const int m = cost.rows, n = cost.cols;
    // Multiply by the reciprocal (not divide) so the kernel is bit-identical
    // to the taped solver's scaled cost.
    Matrix log_kernel(m, n);
    const double neg_inv_eps = -1.0 / cfg.epsilon;
    for (size_t i = 0; i < log_kernel.data.size(); ++i)
        log_kernel.data[i] = cost.data[i] * neg_inv_eps;

    std::vector<double> log_mu(m), log_nu(n);
    for (int i = 0; i < m; ++i) log_mu[i] = std::log(marg.mu[i]);
    for (int j = 0; j < n; ++j) log_nu[j] = std::log(marg.nu[j]);

    std::vector<double> log_a(m, 0.0), log_b(n, 0.0);
    Matrix work(m, n);
    TransportPlan plan;
    plan.values = Matrix(m, n);

    for (int t = 1; t <= cfg.max_iter; ++t) {
        // a update: log a_i = log mu_i - lse_j(log K_ij + log b_j)
        for (int i = 0; i < m; ++i) {
            double* wrow = &work.data[static_cast<size_t>(i) * n];
            const double* krow = &log_kernel.data[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) wrow[j] = krow[j] + log_b[j];
            log_a[i] = log_mu[i] - logsumexp(wrow, n, 1);
        }
        // b update: log b_j = log nu_j - lse_i(log K_ij + log a_i)
        for (int i = 0; i < m; ++i) {
            double* wrow = &work.data[static_cast<size_t>(i) * n];
            const double* krow = &log_kernel.data[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) wrow[j] = krow[j] + log_a[i];
        }
        for (int j = 0; j < n; ++j)
            log_b[j] = log_nu[j] - logsumexp(&work.data[j], m, n);

        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                // Association order matches the taped solver so both routes
                // produce bit-identical plans.
                plan.values(i, j) = std::exp((log_kernel(i, j) + log_b[j]) + log_a[i]);

        plan.iterations_used = t;
        if (cfg.tol > 0.0 && marginal_residual(plan.values, marg) < cfg.tol) {
            plan.converged = true;
            break;
        }
    }
    if (!all_finite(plan.values))
        throw std::runtime_error("sinkhorn_plan: non-finite plan (internal log-domain bug)");
    return plan;
}

double transport_cost(const Matrix& plan, const Matrix& cost) {
    if (!plan.same_shape(cost)) throw std::invalid_argument("transport_cost: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < plan.data.size(); ++i) s += plan.data[i] * cost.data[i];
    return s;
}

double plan_entropy(const Matrix& plan) {
    double s = 0.0;
    for (double v : plan.data) {
        if (v <= 0.0) throw std::invalid_argument("plan_entropy: nonpositive entry");
        s += v * std::log(v);
    }
    return s;
}

double marginal_residual(const Matrix& plan, const Marginals& marg) {
    if (plan.rows != static_cast<int>(marg.mu.size()) ||
        plan.cols != static_cast<int>(marg.nu.size()))
        throw std::invalid_argument("marginal_residual: shape mismatch");
    double res = 0.0;
    std::vector<double> col_sum(plan.cols, 0.0);
    for (int i = 0; i < plan.rows; ++i) {
        double row_sum = 0.0;
        for (int j = 0; j < plan.cols; ++j) {
            row_sum += plan(i, j);
            col_sum[j] += plan(i, j);
        }
        res = std::max(res, std::fabs(row_sum - marg.mu[i]));
    }
    for (int j = 0; j < plan.cols; ++j)
        res = std::max(res, std::fabs(col_sum[j] - marg.nu[j]));
    return res;
}

TransportPlan exact_ot_oracle(const Matrix& cost, const Marginals& marg) {
    check_shapes(cost, marg);
    validate_marginals(marg);
    const int m = cost.rows, n = cost.cols;
    const int cells = m * n;
    if (cells > 16) throw std::invalid_argument("exact_ot_oracle: instance too large");

    const int tree_edges = m + n - 1;
    double best_obj = std::numeric_limits<double>::infinity();
    Matrix best_plan;

    std::vector<int> parent(m + n);
    std::vector<double> flow(tree_edges);
    std::vector<int> edge_i(tree_edges), edge_j(tree_edges);

    auto find = [&](int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };

    for (uint32_t mask = 0; mask < (1u << cells); ++mask) {
        if (std::popcount(mask) != tree_edges) continue;

        // Acyclic + spanning over the m+n bipartite nodes => spanning tree.
        std::iota(parent.begin(), parent.end(), 0);
        int components = m + n;
        int e = 0;
        bool cyclic = false;
        for (int c = 0; c < cells && !cyclic; ++c) {
            if (!(mask & (1u << c))) continue;
            const int i = c / n, j = c % n;
            const int ri = find(i), rj = find(m + j);
            if (ri == rj) {
                cyclic = true;
                break;
            }
            parent[ri] = rj;
            --components;
            edge_i[e] = i;
            edge_j[e] = j;
            ++e;
        }
        if (cyclic || components != 1) continue;

        // Unique flow on a tree support: peel leaves.
        std::vector<double> rem(m + n);
        for (int i = 0; i < m; ++i) rem[i] = marg.mu[i];
        for (int j = 0; j < n; ++j) rem[m + j] = marg.nu[j];
        std::vector<int> degree(m + n, 0);
        std::vector<bool> done(tree_edges, false);
        for (int k = 0; k < tree_edges; ++k) {
            ++degree[edge_i[k]];
            ++degree[m + edge_j[k]];
        }
        bool feasible = true;
        for (int solved = 0; solved < tree_edges;) {
            for (int k = 0; k < tree_edges; ++k) {
                if (done[k]) continue;
                const int a = edge_i[k], b = m + edge_j[k];
                int leaf = -1, other = -1;
                if (degree[a] == 1) {
                    leaf = a;
                    other = b;
                } else if (degree[b] == 1) {
                    leaf = b;
                    other = a;
                } else {
                    continue;
                }
                flow[k] = rem[leaf];
                rem[leaf] = 0.0;
                rem[other] -= flow[k];
                --degree[leaf];
                --degree[other];
                done[k] = true;
                ++solved;
            }
        }
        for (int k = 0; k < tree_edges && feasible; ++k)
            if (flow[k] < -kSumTol) feasible = false;
        if (!feasible) continue;

        double obj = 0.0;
        for (int k = 0; k < tree_edges; ++k)
            obj += std::max(flow[k], 0.0) * cost(edge_i[k], edge_j[k]);
        if (obj < best_obj) {
            best_obj = obj;
            best_plan = Matrix(m, n);
            for (int k = 0; k < tree_edges; ++k)
                best_plan(edge_i[k], edge_j[k]) = std::max(flow[k], 0.0);
        }
    }

    if (!std::isfinite(best_obj))
        throw std::runtime_error("exact_ot_oracle: no basic feasible solution found");
    TransportPlan plan;
    plan.values = std::move(best_plan);
    plan.converged = true;
    return plan;
}

std::vector<int> solve_assignment(const Matrix& cost) {
    if (cost.rows != cost.cols) throw std::invalid_argument("solve_assignment: matrix not square");
    if (!all_finite(cost)) throw std::invalid_argument("solve_assignment: non-finite cost");
    const int n = cost.rows;

    // Potentials-based Kuhn-Munkres, 1-indexed with a virtual column 0.
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = 0;
            double delta = std::numeric_limits<double>::infinity();
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j]) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

TransportPlan hungarian_assignment(const Matrix& cost) {
    if (!all_finite(cost)) throw std::invalid_argument("hungarian_assignment: non-finite cost");
    const int m = cost.rows, n = cost.cols;
    TransportPlan plan;
    plan.values = Matrix(m, n);
    plan.converged = true;

    for (int start = 0; start < m; start += n) {
        const int rows = std::min(n, m - start);
        // Pad partial chunks with zero-cost dummy rows so the sub-problem
        // stays square; dummy assignments are discarded.
        Matrix chunk(n, n, 0.0);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < n; ++j) chunk(i, j) = cost(start + i, j);
        const std::vector<int> assign = solve_assignment(chunk);
        for (int i = 0; i < rows; ++i)
            plan.values(start + i, assign[i]) = 1.0 / m;
    }
    return plan;
}

}  // namespace mpot::ot
