#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dcr/tensor.hpp"

namespace dcr {

enum class Op : uint8_t {
    Leaf,
    Const,
    Add,
    BiasAdd,
    Bcast0Add,
    Scale,
    Matmul,
    Transpose,
    LayerNorm,
    SoftmaxRows,
    Gelu,
    Reshape,
    SliceLast,
    SliceRows,
    GatherRows,
    MeanAll,
    MeanAxis1,
    SumAll,
    Mse,
    CrossEntropyLS,
    KlSoftTargets,
    RowBlend,
};

struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in execution order, which is also a
// topological order, so one reverse sweep visits each node exactly once.
// Forward values are computed eagerly through the same kernels the eval path
// uses.
class Tape {
public:
    Var leaf(Tensor& t);       // external tensor; grads accumulate into t.grad if t.requires_grad
    Var constant(Tensor t);    // owned value, detached (no gradient flows out of it)

    Var add(Var a, Var b);
    Var bias_add(Var x, Var b);
    Var bcast0_add(Var x, Var m);
    Var scale(Var a, double c);
    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var layer_norm(Var x, Var gamma, Var beta, double eps);
    Var softmax_rows(Var x);
    Var gelu(Var x);
    Var reshape(Var x, Shape s);
    Var slice_last(Var x, int64_t start, int64_t len);
    Var slice_rows(Var x, int64_t start, int64_t len);
    Var gather_rows(Var table, std::vector<int64_t> idx);
    Var mean_all(Var x);
    Var mean_axis1(Var x);
    Var sum_all(Var x);
    Var mse(Var a, Var b);
    Var cross_entropy_ls(Var logits, std::vector<int> labels, double smoothing);
    Var kl_soft_targets(Var student_logits, Tensor teacher_logits, double temperature);
    // per-row blend over dim 0: out[r] = (1-w[r])*t[r] + w[r]*s[r]
    Var row_blend(Var t_branch, Var s_branch, std::vector<double> student_weights);

    const Tensor& val(Var v) const;
    // internal gradient buffer of a node (empty until backward reaches it)
    std::span<const double> grad_of(Var v) const;

    void backward(Var output);                      // seed of ones
    void backward(Var output, const Tensor& seed);  // seed shape must match output

    size_t node_count() const { return nodes_.size(); }
    std::vector<int32_t> node_inputs(int32_t id) const;
    bool backward_done() const { return backward_done_; }

private:
    struct Node {
        Op op;
        int32_t a = -1, b = -1, c = -1;
        Tensor value;
        std::vector<double> grad;      // lazily allocated
        Tensor* external = nullptr;    // Leaf only
        double scalar0 = 0.0;          // scale factor / eps / smoothing / temperature
        std::vector<double> aux;       // saved stats (LN mean+inv, CE probs, KD probs, blend weights)
        std::vector<int64_t> iaux;     // indices / labels / slice args
    };

    int32_t push(Node n);
    Node& at(Var v);
    const Node& at(Var v) const;
    std::vector<double>& grad_buf(int32_t id);
    void accum(int32_t id, std::span<const double> g);
    void backprop_node(int32_t id);

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// Max over coordinates of |analytic - central difference| / (|central| + 1e-12).
// `f` must build a scalar-valued graph from the leaf var for x.
double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h);

}  // namespace dcr
