#include "mgrex/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

#include "mgrex/kernels.hpp"

namespace mgrex::ad {

namespace {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluC = 0.044715;
}  // namespace

Var Graph::push(Tensor val, bool requires_grad, std::function<void(Graph&)> back) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    if (requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::leaf_ref(const Tensor* t, bool requires_grad) {
    Node n;
    n.ref = t;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::leaf(Tensor t, bool requires_grad) {
    Node n;
    n.val = std::move(t);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::add(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    assert(av.same_shape(bv));
    Tensor out = av;
    for (size_t i = 0; i < out.size(); ++i) out.d[i] += bv.d[i];
    int self = static_cast<int>(nodes_.size());
    int ai = a.id, bi = b.id;
    bool req = requires_grad(ai) || requires_grad(bi);
    return push(std::move(out), req, [self, ai, bi](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        if (g.requires_grad(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += gr.d[i];
        }
        if (g.requires_grad(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (size_t i = 0; i < gr.size(); ++i) gb.d[i] += gr.d[i];
        }
    });
}

Var Graph::sub(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    assert(av.same_shape(bv));
    Tensor out = av;
    for (size_t i = 0; i < out.size(); ++i) out.d[i] -= bv.d[i];
    int self = static_cast<int>(nodes_.size());
    int ai = a.id, bi = b.id;
    bool req = requires_grad(ai) || requires_grad(bi);
    return push(std::move(out), req, [self, ai, bi](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        if (g.requires_grad(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += gr.d[i];
        }
        if (g.requires_grad(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (size_t i = 0; i < gr.size(); ++i) gb.d[i] -= gr.d[i];
        }
    });
}

Var Graph::mul(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    assert(av.same_shape(bv));
    Tensor out = av;
    for (size_t i = 0; i < out.size(); ++i) out.d[i] *= bv.d[i];
    int self = static_cast<int>(nodes_.size());
    int ai = a.id, bi = b.id;
    bool req = requires_grad(ai) || requires_grad(bi);
    return push(std::move(out), req, [self, ai, bi](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& av2 = g.val(ai);
        const Tensor& bv2 = g.val(bi);
        if (g.requires_grad(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += gr.d[i] * bv2.d[i];
        }
        if (g.requires_grad(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (size_t i = 0; i < gr.size(); ++i) gb.d[i] += gr.d[i] * av2.d[i];
        }
    });
}

Var Graph::affine(Var a, double k, double c) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (auto& v : out.d) v = k * v + c;
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai, k](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += k * gr.d[i];
    });
}

Var Graph::add_rowvec(Var a, Var row) {
    const Tensor& av = val(a);
    const Tensor& rv = val(row);
    assert(rv.rows == 1 && rv.cols == av.cols);
    Tensor out = av;
    for (int i = 0; i < av.rows; ++i)
        for (int j = 0; j < av.cols; ++j) out.at(i, j) += rv.at(0, j);
    int self = static_cast<int>(nodes_.size());
    int ai = a.id, ri = row.id;
    bool req = requires_grad(ai) || requires_grad(ri);
    return push(std::move(out), req, [self, ai, ri](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        if (g.requires_grad(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += gr.d[i];
        }
        if (g.requires_grad(ri)) {
            Tensor& grow = g.grad_buf(ri);
            for (int i = 0; i < gr.rows; ++i)
                for (int j = 0; j < gr.cols; ++j) grow.at(0, j) += gr.at(i, j);
        }
    });
}

Var Graph::scale_rows(Var a, Var s) {
    const Tensor& av = val(a);
    const Tensor& sv = val(s);
    assert(sv.rows == av.rows && sv.cols == 1);
    Tensor out = av;
    for (int i = 0; i < av.rows; ++i) {
        double f = sv.at(i, 0);
        for (int j = 0; j < av.cols; ++j) out.at(i, j) *= f;
    }
    int self = static_cast<int>(nodes_.size());
    int ai = a.id, si = s.id;
    bool req = requires_grad(ai) || requires_grad(si);
    return push(std::move(out), req, [self, ai, si](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& av2 = g.val(ai);
        const Tensor& sv2 = g.val(si);
        if (g.requires_grad(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (int i = 0; i < gr.rows; ++i) {
                double f = sv2.at(i, 0);
                for (int j = 0; j < gr.cols; ++j) ga.at(i, j) += gr.at(i, j) * f;
            }
        }
        if (g.requires_grad(si)) {
            Tensor& gs = g.grad_buf(si);
            for (int i = 0; i < gr.rows; ++i) {
                double acc = 0.0;
                for (int j = 0; j < gr.cols; ++j) acc += gr.at(i, j) * av2.at(i, j);
                gs.at(i, 0) += acc;
            }
        }
    });
}

Var Graph::scale_all(Var a, Var s) {
    const Tensor& av = val(a);
    const Tensor& sv = val(s);
    assert(sv.rows == 1 && sv.cols == 1);
    double f = sv.d[0];
    Tensor out = av;
    for (auto& v : out.d) v *= f;
    int self = static_cast<int>(nodes_.size());
    int ai = a.id, si = s.id;
    bool req = requires_grad(ai) || requires_grad(si);
    return push(std::move(out), req, [self, ai, si](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& av2 = g.val(ai);
        double f2 = g.val(si).d[0];
        if (g.requires_grad(ai)) {
            Tensor& ga = g.grad_buf(ai);
            for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += gr.d[i] * f2;
        }
        if (g.requires_grad(si)) {
            Tensor& gs = g.grad_buf(si);
            double acc = 0.0;
            for (size_t i = 0; i < gr.size(); ++i) acc += gr.d[i] * av2.d[i];
            gs.d[0] += acc;
        }
    });
}

Var Graph::matmul(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    assert(av.cols == bv.rows);
    Tensor out(av.rows, bv.cols);
    kernels::matmul(av.d.data(), bv.d.data(), out.d.data(), av.rows, av.cols, bv.cols);
    int self = static_cast<int>(nodes_.size());
    int ai = a.id, bi = b.id;
    bool req = requires_grad(ai) || requires_grad(bi);
    return push(std::move(out), req, [self, ai, bi](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& av2 = g.val(ai);
        const Tensor& bv2 = g.val(bi);
        if (g.requires_grad(ai)) {
            Tensor& ga = g.grad_buf(ai);
            kernels::matmul_nt(gr.d.data(), bv2.d.data(), ga.d.data(), gr.rows, gr.cols, bv2.rows, true);
        }
        if (g.requires_grad(bi)) {
            Tensor& gb = g.grad_buf(bi);
            kernels::matmul_tn(av2.d.data(), gr.d.data(), gb.d.data(), av2.rows, av2.cols, gr.cols, true);
        }
    });
}

Var Graph::matmul_nt(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    assert(av.cols == bv.cols);
    Tensor out(av.rows, bv.rows);
    kernels::matmul_nt(av.d.data(), bv.d.data(), out.d.data(), av.rows, av.cols, bv.rows);
    int self = static_cast<int>(nodes_.size());
    int ai = a.id, bi = b.id;
    bool req = requires_grad(ai) || requires_grad(bi);
    return push(std::move(out), req, [self, ai, bi](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;  // (m, n)
        const Tensor& av2 = g.val(ai);           // (m, k)
        const Tensor& bv2 = g.val(bi);           // (n, k)
        if (g.requires_grad(ai)) {
            // dA = G * B : (m,n)*(n,k)
            Tensor& ga = g.grad_buf(ai);
            kernels::matmul(gr.d.data(), bv2.d.data(), ga.d.data(), gr.rows, gr.cols, bv2.cols, true);
        }
        if (g.requires_grad(bi)) {
            // dB = G^T * A : (n,m)*(m,k)
            Tensor& gb = g.grad_buf(bi);
            kernels::matmul_tn(gr.d.data(), av2.d.data(), gb.d.data(), gr.rows, gr.cols, av2.cols, true);
        }
    });
}

Var Graph::matmul_tn(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    assert(av.rows == bv.rows);
    Tensor out(av.cols, bv.cols);
    kernels::matmul_tn(av.d.data(), bv.d.data(), out.d.data(), av.rows, av.cols, bv.cols);
    int self = static_cast<int>(nodes_.size());
    int ai = a.id, bi = b.id;
    bool req = requires_grad(ai) || requires_grad(bi);
    return push(std::move(out), req, [self, ai, bi](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;  // (m, n) with m = a.cols
        const Tensor& av2 = g.val(ai);           // (k, m)
        const Tensor& bv2 = g.val(bi);           // (k, n)
        if (g.requires_grad(ai)) {
            // dA = B * G^T : (k,n)*(n,m)
            Tensor& ga = g.grad_buf(ai);
            kernels::matmul_nt(bv2.d.data(), gr.d.data(), ga.d.data(), bv2.rows, bv2.cols, gr.rows, true);
        }
        if (g.requires_grad(bi)) {
            // dB = A * G : (k,m)*(m,n)
            Tensor& gb = g.grad_buf(bi);
            kernels::matmul(av2.d.data(), gr.d.data(), gb.d.data(), av2.rows, av2.cols, gr.cols, true);
        }
    });
}

Var Graph::slice_rows(Var a, int r0, int r1) {
    const Tensor& av = val(a);
    assert(0 <= r0 && r0 <= r1 && r1 <= av.rows);
    Tensor out(r1 - r0, av.cols);
    std::copy(av.d.begin() + static_cast<size_t>(r0) * av.cols,
              av.d.begin() + static_cast<size_t>(r1) * av.cols, out.d.begin());
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai, r0](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (int i = 0; i < gr.rows; ++i)
            for (int j = 0; j < gr.cols; ++j) ga.at(r0 + i, j) += gr.at(i, j);
    });
}

Var Graph::slice_cols(Var a, int c0, int c1) {
    const Tensor& av = val(a);
    assert(0 <= c0 && c0 <= c1 && c1 <= av.cols);
    Tensor out(av.rows, c1 - c0);
    for (int i = 0; i < av.rows; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = av.at(i, j);
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai, c0](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (int i = 0; i < gr.rows; ++i)
            for (int j = 0; j < gr.cols; ++j) ga.at(i, c0 + j) += gr.at(i, j);
    });
}

Var Graph::concat_rows(std::span<const Var> parts) {
    assert(!parts.empty());
    int cols = val(parts[0]).cols;
    int rows = 0;
    bool req = false;
    for (const Var& p : parts) {
        assert(val(p).cols == cols);
        rows += val(p).rows;
        req = req || requires_grad(p.id);
    }
    Tensor out(rows, cols);
    std::vector<int> ids;
    std::vector<int> offsets;
    int off = 0;
    for (const Var& p : parts) {
        const Tensor& pv = val(p);
        std::copy(pv.d.begin(), pv.d.end(), out.d.begin() + static_cast<size_t>(off) * cols);
        ids.push_back(p.id);
        offsets.push_back(off);
        off += pv.rows;
    }
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), req, [self, ids, offsets](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        for (size_t k = 0; k < ids.size(); ++k) {
            if (!g.requires_grad(ids[k])) continue;
            Tensor& gp = g.grad_buf(ids[k]);
            int off2 = offsets[k];
            for (int i = 0; i < gp.rows; ++i)
                for (int j = 0; j < gp.cols; ++j) gp.at(i, j) += gr.at(off2 + i, j);
        }
    });
}

Var Graph::concat_cols(std::span<const Var> parts) {
    assert(!parts.empty());
    int rows = val(parts[0]).rows;
    int cols = 0;
    bool req = false;
    for (const Var& p : parts) {
        assert(val(p).rows == rows);
        cols += val(p).cols;
        req = req || requires_grad(p.id);
    }
    Tensor out(rows, cols);
    std::vector<int> ids;
    std::vector<int> offsets;
    int off = 0;
    for (const Var& p : parts) {
        const Tensor& pv = val(p);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < pv.cols; ++j) out.at(i, off + j) = pv.at(i, j);
        ids.push_back(p.id);
        offsets.push_back(off);
        off += pv.cols;
    }
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), req, [self, ids, offsets](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        for (size_t k = 0; k < ids.size(); ++k) {
            if (!g.requires_grad(ids[k])) continue;
            Tensor& gp = g.grad_buf(ids[k]);
            int off2 = offsets[k];
            for (int i = 0; i < gp.rows; ++i)
                for (int j = 0; j < gp.cols; ++j) gp.at(i, j) += gr.at(i, off2 + j);
        }
    });
}

Var Graph::relu(Var a) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (auto& v : out.d) v = v > 0.0 ? v : 0.0;
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& av2 = g.val(ai);
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i)
            if (av2.d[i] > 0.0) ga.d[i] += gr.d[i];
    });
}

Var Graph::leaky_relu(Var a, double slope) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (auto& v : out.d) v = v > 0.0 ? v : slope * v;
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai, slope](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& av2 = g.val(ai);
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += gr.d[i] * (av2.d[i] > 0.0 ? 1.0 : slope);
    });
}

Var Graph::tanh_act(Var a) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (auto& v : out.d) v = std::tanh(v);
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& ov = g.val(self);
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += gr.d[i] * (1.0 - ov.d[i] * ov.d[i]);
    });
}

Var Graph::gelu(Var a) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (auto& v : out.d) {
        double u = kSqrt2OverPi * (v + kGeluC * v * v * v);
        v = 0.5 * v * (1.0 + std::tanh(u));
    }
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& av2 = g.val(ai);
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i) {
            double x = av2.d[i];
            double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
            double t = std::tanh(u);
            double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
            double dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            ga.d[i] += gr.d[i] * dy;
        }
    });
}

Var Graph::sigmoid(Var a) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (auto& v : out.d) v = 1.0 / (1.0 + std::exp(-v));
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& ov = g.val(self);
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += gr.d[i] * ov.d[i] * (1.0 - ov.d[i]);
    });
}

Var Graph::log_op(Var a) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (auto& v : out.d) v = std::log(v);
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& av2 = g.val(ai);
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += gr.d[i] / av2.d[i];
    });
}

Var Graph::sqrt_op(Var a) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (auto& v : out.d) v = std::sqrt(v);
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& ov = g.val(self);
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i)
            if (ov.d[i] > 0.0) ga.d[i] += gr.d[i] * 0.5 / ov.d[i];
    });
}

Var Graph::inv(Var a) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (auto& v : out.d) v = 1.0 / v;
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& ov = g.val(self);
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i) ga.d[i] -= gr.d[i] * ov.d[i] * ov.d[i];
    });
}

Var Graph::clamp(Var a, double lo, double hi) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (auto& v : out.d) v = std::min(hi, std::max(lo, v));
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai, lo, hi](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& av2 = g.val(ai);
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i)
            if (av2.d[i] > lo && av2.d[i] < hi) ga.d[i] += gr.d[i];
    });
}

Var Graph::row_sums(Var a) {
    const Tensor& av = val(a);
    Tensor out(av.rows, 1);
    for (int i = 0; i < av.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < av.cols; ++j) s += av.at(i, j);
        out.at(i, 0) = s;
    }
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (int i = 0; i < ga.rows; ++i)
            for (int j = 0; j < ga.cols; ++j) ga.at(i, j) += gr.at(i, 0);
    });
}

Var Graph::sum_all(Var a) {
    const Tensor& av = val(a);
    double s = 0.0;
    for (double v : av.d) s += v;
    Tensor out(1, 1);
    out.d[0] = s;
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai](Graph& g) {
        double gr = g.nodes_[self].grad.d[0];
        Tensor& ga = g.grad_buf(ai);
        for (auto& v : ga.d) v += gr;
    });
}

Var Graph::mean_all(Var a) {
    const Tensor& av = val(a);
    double s = 0.0;
    for (double v : av.d) s += v;
    double n = static_cast<double>(av.size());
    Tensor out(1, 1);
    out.d[0] = s / n;
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai, n](Graph& g) {
        double gr = g.nodes_[self].grad.d[0] / n;
        Tensor& ga = g.grad_buf(ai);
        for (auto& v : ga.d) v += gr;
    });
}

Var Graph::softmax_rows(Var a) {
    const Tensor& av = val(a);
    Tensor out = av;
    for (int i = 0; i < av.rows; ++i) {
        double m = av.at(i, 0);
        for (int j = 1; j < av.cols; ++j) m = std::max(m, av.at(i, j));
        double s = 0.0;
        for (int j = 0; j < av.cols; ++j) {
            double e = std::exp(av.at(i, j) - m);
            out.at(i, j) = e;
            s += e;
        }
        for (int j = 0; j < av.cols; ++j) out.at(i, j) /= s;
    }
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& y = g.val(self);
        Tensor& ga = g.grad_buf(ai);
        for (int i = 0; i < y.rows; ++i) {
            double dot = 0.0;
            for (int j = 0; j < y.cols; ++j) dot += gr.at(i, j) * y.at(i, j);
            for (int j = 0; j < y.cols; ++j) ga.at(i, j) += y.at(i, j) * (gr.at(i, j) - dot);
        }
    });
}

Var Graph::weighted_softmax_rows(Var a, Var w, bool fallback_identity) {
    const Tensor& av = val(a);
    const Tensor& wv = val(w);
    assert(av.same_shape(wv));
    Tensor out(av.rows, av.cols);
    // Per row: y_j = w_j exp(x_j - M) / sum_k w_k exp(x_k - M). Rows with all
    // weights zero cannot be normalized; they become identity basis rows.
    Tensor shifted_exp(av.rows, av.cols);
    std::vector<double> denom(av.rows, 0.0);
    std::vector<char> fallback(av.rows, 0);
    for (int i = 0; i < av.rows; ++i) {
        double m = -1e300;
        bool any = false;
        for (int j = 0; j < av.cols; ++j) {
            if (wv.at(i, j) > 0.0) {
                any = true;
                m = std::max(m, av.at(i, j));
            }
        }
        if (!any) {
            if (!fallback_identity || av.rows != av.cols)
                throw std::runtime_error("weighted_softmax_rows: all-zero weight row without identity fallback");
            fallback[i] = 1;
            out.at(i, i) = 1.0;
            continue;
        }
        double s = 0.0;
        for (int j = 0; j < av.cols; ++j) {
            double e = std::exp(av.at(i, j) - m);
            shifted_exp.at(i, j) = e;
            double t = wv.at(i, j) * e;
            out.at(i, j) = t;
            s += t;
        }
        denom[i] = s;
        for (int j = 0; j < av.cols; ++j) out.at(i, j) /= s;
    }
    int self = static_cast<int>(nodes_.size());
    int ai = a.id, wi = w.id;
    bool req = requires_grad(ai) || requires_grad(wi);
    return push(std::move(out), req,
                [self, ai, wi, shifted_exp, denom, fallback](Graph& g) {
                    const Tensor& gr = g.nodes_[self].grad;
                    const Tensor& y = g.val(self);
                    for (int i = 0; i < y.rows; ++i) {
                        if (fallback[i]) continue;
                        double dot = 0.0;
                        for (int j = 0; j < y.cols; ++j) dot += gr.at(i, j) * y.at(i, j);
                        if (g.requires_grad(ai)) {
                            Tensor& ga = g.grad_buf(ai);
                            for (int j = 0; j < y.cols; ++j)
                                ga.at(i, j) += y.at(i, j) * (gr.at(i, j) - dot);
                        }
                        if (g.requires_grad(wi)) {
                            Tensor& gw = g.grad_buf(wi);
                            for (int j = 0; j < y.cols; ++j)
                                gw.at(i, j) += shifted_exp.at(i, j) / denom[i] * (gr.at(i, j) - dot);
                        }
                    }
                });
}

Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& xv = val(x);
    const Tensor& gv = val(gain);
    const Tensor& bv = val(bias);
    assert(gv.rows == 1 && gv.cols == xv.cols && bv.rows == 1 && bv.cols == xv.cols);
    Tensor out(xv.rows, xv.cols);
    Tensor xhat(xv.rows, xv.cols);
    std::vector<double> inv_std(xv.rows);
    for (int i = 0; i < xv.rows; ++i) {
        double mu = 0.0;
        for (int j = 0; j < xv.cols; ++j) mu += xv.at(i, j);
        mu /= xv.cols;
        double var = 0.0;
        for (int j = 0; j < xv.cols; ++j) {
            double dd = xv.at(i, j) - mu;
            var += dd * dd;
        }
        var /= xv.cols;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < xv.cols; ++j) {
            double h = (xv.at(i, j) - mu) * is;
            xhat.at(i, j) = h;
            out.at(i, j) = h * gv.at(0, j) + bv.at(0, j);
        }
    }
    int self = static_cast<int>(nodes_.size());
    int xi = x.id, gi = gain.id, bi = bias.id;
    bool req = requires_grad(xi) || requires_grad(gi) || requires_grad(bi);
    return push(std::move(out), req, [self, xi, gi, bi, xhat, inv_std](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& gv2 = g.val(gi);
        int rows = gr.rows, cols = gr.cols;
        if (g.requires_grad(gi)) {
            Tensor& gg = g.grad_buf(gi);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) gg.at(0, j) += gr.at(i, j) * xhat.at(i, j);
        }
        if (g.requires_grad(bi)) {
            Tensor& gb = g.grad_buf(bi);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) gb.at(0, j) += gr.at(i, j);
        }
        if (g.requires_grad(xi)) {
            Tensor& gx = g.grad_buf(xi);
            for (int i = 0; i < rows; ++i) {
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int j = 0; j < cols; ++j) {
                    double dxh = gr.at(i, j) * gv2.at(0, j);
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat.at(i, j);
                }
                mean_dxhat /= cols;
                mean_dxhat_xhat /= cols;
                for (int j = 0; j < cols; ++j) {
                    double dxh = gr.at(i, j) * gv2.at(0, j);
                    gx.at(i, j) += inv_std[i] * (dxh - mean_dxhat - xhat.at(i, j) * mean_dxhat_xhat);
                }
            }
        }
    });
}

Var Graph::gather_rows(Var emb, std::vector<int> ids) {
    const Tensor& ev = val(emb);
    Tensor out(static_cast<int>(ids.size()), ev.cols);
    for (size_t t = 0; t < ids.size(); ++t) {
        assert(ids[t] >= 0 && ids[t] < ev.rows);
        std::copy(ev.d.begin() + static_cast<size_t>(ids[t]) * ev.cols,
                  ev.d.begin() + static_cast<size_t>(ids[t] + 1) * ev.cols,
                  out.d.begin() + t * ev.cols);
    }
    int self = static_cast<int>(nodes_.size());
    int ei = emb.id;
    return push(std::move(out), requires_grad(ei), [self, ei, ids](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        Tensor& ge = g.grad_buf(ei);
        for (size_t t = 0; t < ids.size(); ++t)
            for (int j = 0; j < gr.cols; ++j) ge.at(ids[t], j) += gr.at(static_cast<int>(t), j);
    });
}

Var Graph::outer_product(Var u, Var v) {
    const Tensor& uv = val(u);
    const Tensor& vv = val(v);
    assert(uv.cols == 1 && vv.cols == 1);
    Tensor out(uv.rows, vv.rows);
    for (int i = 0; i < uv.rows; ++i)
        for (int j = 0; j < vv.rows; ++j) out.at(i, j) = uv.at(i, 0) * vv.at(j, 0);
    int self = static_cast<int>(nodes_.size());
    int ui = u.id, vi = v.id;
    bool req = requires_grad(ui) || requires_grad(vi);
    return push(std::move(out), req, [self, ui, vi](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        const Tensor& uv2 = g.val(ui);
        const Tensor& vv2 = g.val(vi);
        if (g.requires_grad(ui)) {
            Tensor& gu = g.grad_buf(ui);
            for (int i = 0; i < gr.rows; ++i) {
                double acc = 0.0;
                for (int j = 0; j < gr.cols; ++j) acc += gr.at(i, j) * vv2.at(j, 0);
                gu.at(i, 0) += acc;
            }
        }
        if (g.requires_grad(vi)) {
            Tensor& gv = g.grad_buf(vi);
            for (int j = 0; j < gr.cols; ++j) {
                double acc = 0.0;
                for (int i = 0; i < gr.rows; ++i) acc += gr.at(i, j) * uv2.at(i, 0);
                gv.at(j, 0) += acc;
            }
        }
    });
}

Var Graph::cross_add(Var u, Var v) {
    const Tensor& uv = val(u);
    const Tensor& vv = val(v);
    assert(uv.cols == 1 && vv.cols == 1);
    Tensor out(uv.rows, vv.rows);
    for (int i = 0; i < uv.rows; ++i)
        for (int j = 0; j < vv.rows; ++j) out.at(i, j) = uv.at(i, 0) + vv.at(j, 0);
    int self = static_cast<int>(nodes_.size());
    int ui = u.id, vi = v.id;
    bool req = requires_grad(ui) || requires_grad(vi);
    return push(std::move(out), req, [self, ui, vi](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        if (g.requires_grad(ui)) {
            Tensor& gu = g.grad_buf(ui);
            for (int i = 0; i < gr.rows; ++i) {
                double acc = 0.0;
                for (int j = 0; j < gr.cols; ++j) acc += gr.at(i, j);
                gu.at(i, 0) += acc;
            }
        }
        if (g.requires_grad(vi)) {
            Tensor& gv = g.grad_buf(vi);
            for (int j = 0; j < gr.cols; ++j) {
                double acc = 0.0;
                for (int i = 0; i < gr.rows; ++i) acc += gr.at(i, j);
                gv.at(j, 0) += acc;
            }
        }
    });
}

Var Graph::dropout(Var a, double p, std::mt19937_64& rng) {
    const Tensor& av = val(a);
    Tensor mask(av.rows, av.cols);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    double scale = 1.0 / (1.0 - p);
    for (auto& v : mask.d) v = dist(rng) < p ? 0.0 : scale;
    Tensor out = av;
    for (size_t i = 0; i < out.size(); ++i) out.d[i] *= mask.d[i];
    int self = static_cast<int>(nodes_.size());
    int ai = a.id;
    return push(std::move(out), requires_grad(ai), [self, ai, mask](Graph& g) {
        const Tensor& gr = g.nodes_[self].grad;
        Tensor& ga = g.grad_buf(ai);
        for (size_t i = 0; i < gr.size(); ++i) ga.d[i] += gr.d[i] * mask.d[i];
    });
}

void Graph::backward(Var loss) {
    const Tensor& lv = val(loss);
    assert(lv.rows == 1 && lv.cols == 1);
    (void)lv;
    grad_buf(loss.id).d[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.requires_grad || !n.back || n.grad.empty()) continue;
        n.back(*this);
    }
}

Tensor finite_difference(Tensor& param, const std::function<double()>& loss_fn, double h) {
    Tensor g = Tensor::zeros(param.rows, param.cols);
    for (size_t i = 0; i < param.size(); ++i) {
        double orig = param.d[i];
        param.d[i] = orig + h;
        double up = loss_fn();
        param.d[i] = orig - h;
        double down = loss_fn();
        param.d[i] = orig;
        g.d[i] = (up - down) / (2.0 * h);
    }
    return g;
}

double gradient_rel_error(const Tensor& analytic, const Tensor& numeric) {
    double md = 0.0, ma = 0.0, mn = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        md = std::max(md, std::abs(analytic.d[i] - numeric.d[i]));
        ma = std::max(ma, std::abs(analytic.d[i]));
        mn = std::max(mn, std::abs(numeric.d[i]));
    }
    double scale = std::max(ma, mn);
    if (scale < 1e-12) return md;
    return md / scale;
}

}  // namespace mgrex::ad
