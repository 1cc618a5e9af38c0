#pragma once

#include <functional>
#include <vector>

#include "mpot/matrix.hpp"

namespace mpot::ad {

// Node handle on a Tape.
using Var = int;

// Reverse-mode tape over Matrix-valued nodes. The operator set is exactly
// what the pipeline needs: dense linear algebra, entrywise maps,
// log-sum-exp reductions, broadcasts, slicing, and bilinear upsampling.
class Tape {
public:
    Var constant(Matrix value);
    Var param(Matrix value);  // leaf that receives gradients

    const Matrix& value(Var v) const { return nodes_[v].value; }
    const Matrix& grad(Var v) const { return nodes_[v].grad; }
    bool needs_grad(Var v) const { return nodes_[v].needs_grad; }
    size_t num_nodes() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 (loss must be 1x1) and sweeps backward.
    void backward(Var loss);

    // elementwise, same shape
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);

    Var neg(Var a);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var pow_scalar(Var a, double p);

    Var exp_(Var a);
    Var log_(Var a);
    Var sigmoid_(Var a);
    Var tanh_(Var a);
    // Clamps values to [lo, hi]; gradient passes only strictly inside.
    Var clamp_(Var a, double lo, double hi);

    Var matmul(Var a, Var b);
    Var transpose(Var a);

    // broadcasts: v is 1xN (row) or Mx1 (col)
    Var add_rowvec(Var m, Var v);
    Var add_colvec(Var m, Var v);
    Var mul_rowvec(Var m, Var v);
    Var mul_colvec(Var m, Var v);

    Var lse_rows(Var m);  // M x N -> M x 1
    Var lse_cols(Var m);  // M x N -> 1 x N
    Var sum(Var m);       // -> 1 x 1

    Var slice_cols(Var m, int first, int count);
    Var hcat(const std::vector<Var>& parts);
    // Sums consecutive groups of `group` columns: M x (K*group) -> M x K.
    Var block_sum_cols(Var m, int group);

    Var l2_normalize_rows(Var m);
    Var softmax_rows(Var m);

    // Corner-aligned bilinear interpolation applied per column, where each
    // column stores a row-major (h_in x w_in) grid.
    Var upsample_bilinear(Var m, int h_in, int w_in, int h_out, int w_out);

    Var detach(Var a);

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::vector<Var> parents;
        std::function<void(Tape&, Var)> back;  // accumulates into parents' grads
        bool needs_grad = false;
    };

    Var push(Matrix value, std::vector<Var> parents,
             std::function<void(Tape&, Var)> back);
    Matrix& grad_mut(Var v) { return nodes_[v].grad; }

    std::vector<Node> nodes_;
};

}  // namespace mpot::ad
