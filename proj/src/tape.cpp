#include "mpot/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace mpot::ad {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Var Tape::push(Matrix value, std::vector<Var> parents,
               std::function<void(Tape&, Var)> back) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.back = std::move(back);
    for (Var p : n.parents)
        if (nodes_[p].needs_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size()) - 1;
}

Var Tape::constant(Matrix value) {
    return push(std::move(value), {}, nullptr);
}

Var Tape::param(Matrix value) {
    Var v = push(std::move(value), {}, nullptr);
    nodes_[v].needs_grad = true;
    return v;
}

void Tape::backward(Var loss) {
    if (nodes_[loss].value.rows != 1 || nodes_[loss].value.cols != 1)
        throw std::invalid_argument("backward: loss must be scalar");
    for (auto& n : nodes_) {
        if (n.needs_grad)
            n.grad = Matrix(n.value.rows, n.value.cols);
        else
            n.grad = Matrix();
    }
    if (!nodes_[loss].needs_grad) return;  // loss does not depend on any param
    nodes_[loss].grad(0, 0) = 1.0;
    for (Var v = loss; v >= 0; --v) {
        Node& n = nodes_[v];
        if (n.needs_grad && n.back) n.back(*this, v);
    }
}

// ---------------------------------------------------------------------------
// elementwise

Var Tape::add(Var a, Var b) {
    check_same_shape(value(a), value(b), "add");
    Matrix out = value(a);
    const Matrix& vb = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
    return push(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(a)) {
            Matrix& ga = t.grad_mut(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        }
        if (t.needs_grad(b)) {
            Matrix& gb = t.grad_mut(b);
            for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
        }
    });
}

Var Tape::sub(Var a, Var b) {
    check_same_shape(value(a), value(b), "sub");
    Matrix out = value(a);
    const Matrix& vb = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb.data[i];
    return push(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(a)) {
            Matrix& ga = t.grad_mut(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        }
        if (t.needs_grad(b)) {
            Matrix& gb = t.grad_mut(b);
            for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    check_same_shape(value(a), value(b), "mul");
    Matrix out = value(a);
    const Matrix& vb = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
    return push(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& va = t.value(a);
        const Matrix& vb2 = t.value(b);
        if (t.needs_grad(a)) {
            Matrix& ga = t.grad_mut(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * vb2.data[i];
        }
        if (t.needs_grad(b)) {
            Matrix& gb = t.grad_mut(b);
            for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * va.data[i];
        }
    });
}

Var Tape::div(Var a, Var b) {
    check_same_shape(value(a), value(b), "div");
    Matrix out = value(a);
    const Matrix& vb = value(b);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] /= vb.data[i];
    return push(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& va = t.value(a);
        const Matrix& vb2 = t.value(b);
        if (t.needs_grad(a)) {
            Matrix& ga = t.grad_mut(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / vb2.data[i];
        }
        if (t.needs_grad(b)) {
            Matrix& gb = t.grad_mut(b);
            for (size_t i = 0; i < g.data.size(); ++i)
                gb.data[i] -= g.data[i] * va.data[i] / (vb2.data[i] * vb2.data[i]);
        }
    });
}

Var Tape::neg(Var a) { return scale(a, -1.0); }

Var Tape::scale(Var a, double s) {
    Matrix out = value(a);
    for (auto& v : out.data) v *= s;
    return push(std::move(out), {a}, [a, s](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        Matrix& ga = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
    });
}

Var Tape::add_scalar(Var a, double s) {
    Matrix out = value(a);
    for (auto& v : out.data) v += s;
    return push(std::move(out), {a}, [a](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        Matrix& ga = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    });
}

Var Tape::pow_scalar(Var a, double p) {
    Matrix out = value(a);
    for (auto& v : out.data) v = std::pow(v, p);
    return push(std::move(out), {a}, [a, p](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& va = t.value(a);
        Matrix& ga = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i)
            ga.data[i] += g.data[i] * p * std::pow(va.data[i], p - 1.0);
    });
}

Var Tape::exp_(Var a) {
    Matrix out = value(a);
    for (auto& v : out.data) v = std::exp(v);
    return push(std::move(out), {a}, [a](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& vo = t.value(self);
        Matrix& ga = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * vo.data[i];
    });
}

Var Tape::log_(Var a) {
    Matrix out = value(a);
    for (auto& v : out.data) v = std::log(v);
    return push(std::move(out), {a}, [a](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& va = t.value(a);
        Matrix& ga = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / va.data[i];
    });
}

Var Tape::sigmoid_(Var a) {
    Matrix out = value(a);
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return push(std::move(out), {a}, [a](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& vo = t.value(self);
        Matrix& ga = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i)
            ga.data[i] += g.data[i] * vo.data[i] * (1.0 - vo.data[i]);
    });
}

Var Tape::tanh_(Var a) {
    Matrix out = value(a);
    for (auto& v : out.data) v = std::tanh(v);
    return push(std::move(out), {a}, [a](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& vo = t.value(self);
        Matrix& ga = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i)
            ga.data[i] += g.data[i] * (1.0 - vo.data[i] * vo.data[i]);
    });
}

Var Tape::clamp_(Var a, double lo, double hi) {
    Matrix out = value(a);
    for (auto& v : out.data) v = std::clamp(v, lo, hi);
    return push(std::move(out), {a}, [a, lo, hi](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& va = t.value(a);
        Matrix& ga = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i)
            if (va.data[i] > lo && va.data[i] < hi) ga.data[i] += g.data[i];
    });
}

// ---------------------------------------------------------------------------
// linear algebra

Var Tape::matmul(Var a, Var b) {
    Matrix out = mpot::matmul(value(a), value(b));
    return push(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(a)) {
            Matrix da = mpot::matmul(g, mpot::transpose(t.value(b)));
            Matrix& ga = t.grad_mut(a);
            for (size_t i = 0; i < da.data.size(); ++i) ga.data[i] += da.data[i];
        }
        if (t.needs_grad(b)) {
            Matrix db = mpot::matmul(mpot::transpose(t.value(a)), g);
            Matrix& gb = t.grad_mut(b);
            for (size_t i = 0; i < db.data.size(); ++i) gb.data[i] += db.data[i];
        }
    });
}

Var Tape::transpose(Var a) {
    return push(mpot::transpose(value(a)), {a}, [a](Tape& t, Var self) {
        Matrix gt = mpot::transpose(t.grad(self));
        Matrix& ga = t.grad_mut(a);
        for (size_t i = 0; i < gt.data.size(); ++i) ga.data[i] += gt.data[i];
    });
}

// ---------------------------------------------------------------------------
// broadcasts

Var Tape::add_rowvec(Var m, Var v) {
    const Matrix& vm = value(m);
    const Matrix& vv = value(v);
    if (vv.rows != 1 || vv.cols != vm.cols)
        throw std::invalid_argument("add_rowvec: vector shape");
    Matrix out = vm;
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out(i, j) += vv.data[j];
    return push(std::move(out), {m, v}, [m, v](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(m)) {
            Matrix& gm = t.grad_mut(m);
            for (size_t i = 0; i < g.data.size(); ++i) gm.data[i] += g.data[i];
        }
        if (t.needs_grad(v)) {
            Matrix& gv = t.grad_mut(v);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gv.data[j] += g(i, j);
        }
    });
}

Var Tape::add_colvec(Var m, Var v) {
    const Matrix& vm = value(m);
    const Matrix& vv = value(v);
    if (vv.cols != 1 || vv.rows != vm.rows)
        throw std::invalid_argument("add_colvec: vector shape");
    Matrix out = vm;
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out(i, j) += vv.data[i];
    return push(std::move(out), {m, v}, [m, v](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(m)) {
            Matrix& gm = t.grad_mut(m);
            for (size_t i = 0; i < g.data.size(); ++i) gm.data[i] += g.data[i];
        }
        if (t.needs_grad(v)) {
            Matrix& gv = t.grad_mut(v);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gv.data[i] += g(i, j);
        }
    });
}

Var Tape::mul_rowvec(Var m, Var v) {
    const Matrix& vm = value(m);
    const Matrix& vv = value(v);
    if (vv.rows != 1 || vv.cols != vm.cols)
        throw std::invalid_argument("mul_rowvec: vector shape");
    Matrix out = vm;
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out(i, j) *= vv.data[j];
    return push(std::move(out), {m, v}, [m, v](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& vm2 = t.value(m);
        const Matrix& vv2 = t.value(v);
        if (t.needs_grad(m)) {
            Matrix& gm = t.grad_mut(m);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gm(i, j) += g(i, j) * vv2.data[j];
        }
        if (t.needs_grad(v)) {
            Matrix& gv = t.grad_mut(v);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gv.data[j] += g(i, j) * vm2(i, j);
        }
    });
}

Var Tape::mul_colvec(Var m, Var v) {
    const Matrix& vm = value(m);
    const Matrix& vv = value(v);
    if (vv.cols != 1 || vv.rows != vm.rows)
        throw std::invalid_argument("mul_colvec: vector shape");
    Matrix out = vm;
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out(i, j) *= vv.data[i];
    return push(std::move(out), {m, v}, [m, v](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& vm2 = t.value(m);
        const Matrix& vv2 = t.value(v);
        if (t.needs_grad(m)) {
            Matrix& gm = t.grad_mut(m);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gm(i, j) += g(i, j) * vv2.data[i];
        }
        if (t.needs_grad(v)) {
            Matrix& gv = t.grad_mut(v);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) gv.data[i] += g(i, j) * vm2(i, j);
        }
    });
}

// ---------------------------------------------------------------------------
// reductions

Var Tape::lse_rows(Var m) {
    const Matrix& vm = value(m);
    Matrix out(vm.rows, 1);
    for (int i = 0; i < vm.rows; ++i)
        out(i, 0) = logsumexp(&vm.data[static_cast<size_t>(i) * vm.cols], vm.cols, 1);
    return push(std::move(out), {m}, [m](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& vm2 = t.value(m);
        const Matrix& vo = t.value(self);
        Matrix& gm = t.grad_mut(m);
        for (int i = 0; i < vm2.rows; ++i)
            for (int j = 0; j < vm2.cols; ++j)
                gm(i, j) += g(i, 0) * std::exp(vm2(i, j) - vo(i, 0));
    });
}

Var Tape::lse_cols(Var m) {
    const Matrix& vm = value(m);
    Matrix out(1, vm.cols);
    for (int j = 0; j < vm.cols; ++j)
        out(0, j) = logsumexp(&vm.data[j], vm.rows, vm.cols);
    return push(std::move(out), {m}, [m](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& vm2 = t.value(m);
        const Matrix& vo = t.value(self);
        Matrix& gm = t.grad_mut(m);
        for (int i = 0; i < vm2.rows; ++i)
            for (int j = 0; j < vm2.cols; ++j)
                gm(i, j) += g(0, j) * std::exp(vm2(i, j) - vo(0, j));
    });
}

Var Tape::sum(Var m) {
    const Matrix& vm = value(m);
    double s = 0.0;
    for (double v : vm.data) s += v;
    Matrix out(1, 1);
    out(0, 0) = s;
    return push(std::move(out), {m}, [m](Tape& t, Var self) {
        const double g = t.grad(self)(0, 0);
        Matrix& gm = t.grad_mut(m);
        for (auto& v : gm.data) v += g;
    });
}

// ---------------------------------------------------------------------------
// structure

Var Tape::slice_cols(Var m, int first, int count) {
    const Matrix& vm = value(m);
    if (first < 0 || count < 1 || first + count > vm.cols)
        throw std::invalid_argument("slice_cols: range out of bounds");
    Matrix out(vm.rows, count);
    for (int i = 0; i < vm.rows; ++i)
        for (int j = 0; j < count; ++j) out(i, j) = vm(i, first + j);
    return push(std::move(out), {m}, [m, first](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        Matrix& gm = t.grad_mut(m);
        for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) gm(i, first + j) += g(i, j);
    });
}

Var Tape::hcat(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("hcat: empty list");
    const int rows = value(parts[0]).rows;
    int cols = 0;
    for (Var p : parts) {
        if (value(p).rows != rows) throw std::invalid_argument("hcat: row mismatch");
        cols += value(p).cols;
    }
    Matrix out(rows, cols);
    int off = 0;
    for (Var p : parts) {
        const Matrix& vp = value(p);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < vp.cols; ++j) out(i, off + j) = vp(i, j);
        off += vp.cols;
    }
    std::vector<Var> parents = parts;
    return push(std::move(out), parents, [parents](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        int off2 = 0;
        for (Var p : parents) {
            const int pc = t.value(p).cols;
            if (t.needs_grad(p)) {
                Matrix& gp = t.grad_mut(p);
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < pc; ++j) gp(i, j) += g(i, off2 + j);
            }
            off2 += pc;
        }
    });
}

Var Tape::block_sum_cols(Var m, int group) {
    const Matrix& vm = value(m);
    if (group < 1 || vm.cols % group != 0)
        throw std::invalid_argument("block_sum_cols: column count not divisible by group");
    const int out_cols = vm.cols / group;
    Matrix out(vm.rows, out_cols);
    for (int i = 0; i < vm.rows; ++i)
        for (int j = 0; j < vm.cols; ++j) out(i, j / group) += vm(i, j);
    return push(std::move(out), {m}, [m, group](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        Matrix& gm = t.grad_mut(m);
        for (int i = 0; i < gm.rows; ++i)
            for (int j = 0; j < gm.cols; ++j) gm(i, j) += g(i, j / group);
    });
}

Var Tape::l2_normalize_rows(Var m) {
    const Matrix& vm = value(m);
    Matrix out(vm.rows, vm.cols);
    for (int i = 0; i < vm.rows; ++i) {
        double n2 = 0.0;
        for (int j = 0; j < vm.cols; ++j) n2 += vm(i, j) * vm(i, j);
        const double norm = std::sqrt(n2);
        if (norm == 0.0) throw std::invalid_argument("l2_normalize_rows: zero row");
        for (int j = 0; j < vm.cols; ++j) out(i, j) = vm(i, j) / norm;
    }
    return push(std::move(out), {m}, [m](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& vm2 = t.value(m);
        const Matrix& vo = t.value(self);
        Matrix& gm = t.grad_mut(m);
        for (int i = 0; i < vm2.rows; ++i) {
            double n2 = 0.0, dot = 0.0;
            for (int j = 0; j < vm2.cols; ++j) {
                n2 += vm2(i, j) * vm2(i, j);
                dot += g(i, j) * vo(i, j);
            }
            const double norm = std::sqrt(n2);
            for (int j = 0; j < vm2.cols; ++j)
                gm(i, j) += (g(i, j) - vo(i, j) * dot) / norm;
        }
    });
}

Var Tape::softmax_rows(Var m) {
    const Matrix& vm = value(m);
    Matrix out(vm.rows, vm.cols);
    for (int i = 0; i < vm.rows; ++i) {
        const double lse = logsumexp(&vm.data[static_cast<size_t>(i) * vm.cols], vm.cols, 1);
        for (int j = 0; j < vm.cols; ++j) out(i, j) = std::exp(vm(i, j) - lse);
    }
    return push(std::move(out), {m}, [m](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        const Matrix& vo = t.value(self);
        Matrix& gm = t.grad_mut(m);
        for (int i = 0; i < vo.rows; ++i) {
            double dot = 0.0;
            for (int j = 0; j < vo.cols; ++j) dot += g(i, j) * vo(i, j);
            for (int j = 0; j < vo.cols; ++j)
                gm(i, j) += vo(i, j) * (g(i, j) - dot);
        }
    });
}

Var Tape::upsample_bilinear(Var m, int h_in, int w_in, int h_out, int w_out) {
    const Matrix& vm = value(m);
    if (vm.rows != h_in * w_in)
        throw std::invalid_argument("upsample_bilinear: row count != h_in*w_in");
    if (h_out < h_in || w_out < w_in)
        throw std::invalid_argument("upsample_bilinear: target smaller than source");

    // Corner-aligned mapping; degenerate axes (size 1) collapse to index 0.
    auto axis = [](int n_in, int n_out, int t) {
        if (n_in == 1 || n_out == 1) return std::pair<int, double>{0, 0.0};
        const double src = static_cast<double>(t) * (n_in - 1) / (n_out - 1);
        int i0 = static_cast<int>(src);
        if (i0 >= n_in - 1) i0 = n_in - 2;
        return std::pair<int, double>{i0, src - i0};
    };

    struct Weight {
        int src[4];
        double w[4];
    };
    auto weights = std::make_shared<std::vector<Weight>>();
    weights->reserve(static_cast<size_t>(h_out) * w_out);
    for (int y = 0; y < h_out; ++y) {
        auto [y0, fy] = axis(h_in, h_out, y);
        const int y1 = std::min(y0 + 1, h_in - 1);
        for (int x = 0; x < w_out; ++x) {
            auto [x0, fx] = axis(w_in, w_out, x);
            const int x1 = std::min(x0 + 1, w_in - 1);
            Weight wt;
            wt.src[0] = y0 * w_in + x0;
            wt.src[1] = y0 * w_in + x1;
            wt.src[2] = y1 * w_in + x0;
            wt.src[3] = y1 * w_in + x1;
            wt.w[0] = (1 - fy) * (1 - fx);
            wt.w[1] = (1 - fy) * fx;
            wt.w[2] = fy * (1 - fx);
            wt.w[3] = fy * fx;
            weights->push_back(wt);
        }
    }

    Matrix out(h_out * w_out, vm.cols);
    for (int r = 0; r < out.rows; ++r) {
        const Weight& wt = (*weights)[r];
        for (int c = 0; c < vm.cols; ++c) {
            double v = 0.0;
            for (int k = 0; k < 4; ++k) v += wt.w[k] * vm(wt.src[k], c);
            out(r, c) = v;
        }
    }
    return push(std::move(out), {m}, [m, weights](Tape& t, Var self) {
        const Matrix& g = t.grad(self);
        Matrix& gm = t.grad_mut(m);
        for (int r = 0; r < g.rows; ++r) {
            const Weight& wt = (*weights)[r];
            for (int c = 0; c < g.cols; ++c)
                for (int k = 0; k < 4; ++k) gm(wt.src[k], c) += wt.w[k] * g(r, c);
        }
    });
}

Var Tape::detach(Var a) {
    return constant(value(a));
}

}  // namespace mpot::ad
