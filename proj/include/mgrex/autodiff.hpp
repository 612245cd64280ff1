#pragma once

#include <functional>
#include <random>
#include <span>
#include <vector>

#include "mgrex/tensor.hpp"

namespace mgrex::ad {

// Eager tape-based reverse-mode autodiff. Each forward op appends a node, so
// creation order is a topological order and backward is a reverse sweep.
// Graphs are per-sample scratch objects; parameter tensors are referenced,
// never copied, and their gradients are read out of the leaf nodes after
// backward().
class Graph;

struct Var {
    Graph* g = nullptr;
    int id = -1;
    bool valid() const { return g != nullptr && id >= 0; }
};

class Graph {
public:
    struct Node {
        Tensor val;                // owned value (unused for ref leaves)
        const Tensor* ref = nullptr;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Graph&)> back;
    };

    const Tensor& val(int id) const {
        const Node& n = nodes_[id];
        return n.ref ? *n.ref : n.val;
    }
    const Tensor& val(Var v) const { return val(v.id); }

    // Gradient buffer, allocated (zeroed) on first touch.
    Tensor& grad_buf(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) {
            const Tensor& v = val(id);
            n.grad = Tensor::zeros(v.rows, v.cols);
        }
        return n.grad;
    }
    const Tensor& grad(Var v) { return grad_buf(v.id); }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }

    size_t node_count() const { return nodes_.size(); }

    // --- leaves ---
    Var leaf_ref(const Tensor* t, bool requires_grad);
    Var leaf(Tensor t, bool requires_grad);
    Var constant(Tensor t) { return leaf(std::move(t), false); }
    Var const_full(int r, int c, double v) { return constant(Tensor::full(r, c, v)); }

    // --- elementwise / broadcast ---
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var affine(Var a, double k, double c);  // k*a + c
    Var add_rowvec(Var a, Var row);         // a(r,c) + row(1,c)
    Var scale_rows(Var a, Var s);           // a(r,c) row i scaled by s(r,1)
    Var scale_all(Var a, Var s);            // a * scalar var s(1,1)

    // --- matmul family ---
    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);  // a(m,k) * b(n,k)^T
    Var matmul_tn(Var a, Var b);  // a(k,m)^T * b(k,n)

    // --- shape ops ---
    Var slice_rows(Var a, int r0, int r1);
    Var slice_cols(Var a, int c0, int c1);
    Var concat_rows(std::span<const Var> parts);
    Var concat_cols(std::span<const Var> parts);

    // --- nonlinearities ---
    Var relu(Var a);
    Var leaky_relu(Var a, double slope);
    Var tanh_act(Var a);
    Var gelu(Var a);
    Var sigmoid(Var a);
    Var log_op(Var a);
    Var sqrt_op(Var a);   // zero subgradient at 0
    Var inv(Var a);       // 1/x
    Var clamp(Var a, double lo, double hi);  // zero grad outside (lo,hi)

    // --- reductions / structure ---
    Var row_sums(Var a);  // (r,c) -> (r,1)
    Var sum_all(Var a);   // -> (1,1)
    Var mean_all(Var a);  // -> (1,1)
    Var softmax_rows(Var a);
    // Row-wise softmax(x) reweighted by w >= 0; rows whose weights are all
    // zero fall back to the identity basis row (square inputs only) and pass
    // no gradient.
    Var weighted_softmax_rows(Var a, Var w, bool fallback_identity);
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
    Var gather_rows(Var emb, std::vector<int> ids);
    Var outer_product(Var u, Var v);  // u(n,1), v(m,1) -> (n,m)
    Var cross_add(Var u, Var v);      // (n,1),(m,1) -> (n,m): u_i + v_j
    Var dropout(Var a, double p, std::mt19937_64& rng);

    void backward(Var loss);

private:
    Var push(Tensor val, bool requires_grad, std::function<void(Graph&)> back);
    std::vector<Node> nodes_;
};

// Central finite-difference gradient of `loss_fn` w.r.t. `param`, for
// gradient checking. `loss_fn` must re-run the full forward pass.
Tensor finite_difference(Tensor& param, const std::function<double()>& loss_fn, double h = 1e-5);

// Scaled max-norm relative error between two gradients.
double gradient_rel_error(const Tensor& analytic, const Tensor& numeric);

}  // namespace mgrex::ad
