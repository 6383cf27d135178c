#include "dcr/tape.hpp"

#include <algorithm>
#include <cmath>

namespace dcr {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

int32_t Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int32_t>(nodes_.size()) - 1;
}

Tape::Node& Tape::at(Var v) {
    if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size()))
        throw StateError("tape: invalid var id " + std::to_string(v.id));
    return nodes_[static_cast<size_t>(v.id)];
}

const Tape::Node& Tape::at(Var v) const { return const_cast<Tape*>(this)->at(v); }

Var Tape::leaf(Tensor& t) {
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].op == Op::Leaf && nodes_[i].external == &t)
            return Var{static_cast<int32_t>(i)};
    }
    Node n;
    n.op = Op::Leaf;
    n.value = t;  // copy of the current values; parameters do not change mid-graph
    n.external = &t;
    return Var{push(std::move(n))};
}

Var Tape::constant(Tensor t) {
    Node n;
    n.op = Op::Const;
    n.value = std::move(t);
    return Var{push(std::move(n))};
}

Var Tape::add(Var a, Var b) {
    Node n;
    n.op = Op::Add;
    n.a = a.id;
    n.b = b.id;
    n.value = kernels::add(at(a).value, at(b).value);
    return Var{push(std::move(n))};
}

Var Tape::bias_add(Var x, Var b) {
    Node n;
    n.op = Op::BiasAdd;
    n.a = x.id;
    n.b = b.id;
    n.value = kernels::bias_add(at(x).value, at(b).value);
    return Var{push(std::move(n))};
}

Var Tape::bcast0_add(Var x, Var m) {
    Node n;
    n.op = Op::Bcast0Add;
    n.a = x.id;
    n.b = m.id;
    n.value = kernels::bcast0_add(at(x).value, at(m).value);
    return Var{push(std::move(n))};
}

Var Tape::scale(Var a, double c) {
    Node n;
    n.op = Op::Scale;
    n.a = a.id;
    n.scalar0 = c;
    n.value = kernels::scale(at(a).value, c);
    return Var{push(std::move(n))};
}

Var Tape::matmul(Var a, Var b) {
    Node n;
    n.op = Op::Matmul;
    n.a = a.id;
    n.b = b.id;
    n.value = kernels::matmul(at(a).value, at(b).value);
    return Var{push(std::move(n))};
}

Var Tape::transpose(Var a) {
    Node n;
    n.op = Op::Transpose;
    n.a = a.id;
    n.value = kernels::transpose(at(a).value);
    return Var{push(std::move(n))};
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
    Node n;
    n.op = Op::LayerNorm;
    n.a = x.id;
    n.b = gamma.id;
    n.c = beta.id;
    n.scalar0 = eps;
    n.value = kernels::layer_norm(at(x).value, at(gamma).value, at(beta).value, eps, &n.aux);
    return Var{push(std::move(n))};
}

Var Tape::softmax_rows(Var x) {
    Node n;
    n.op = Op::SoftmaxRows;
    n.a = x.id;
    n.value = kernels::softmax_rows(at(x).value);
    return Var{push(std::move(n))};
}

Var Tape::gelu(Var x) {
    Node n;
    n.op = Op::Gelu;
    n.a = x.id;
    n.value = kernels::gelu(at(x).value);
    return Var{push(std::move(n))};
}

Var Tape::reshape(Var x, Shape s) {
    Node n;
    n.op = Op::Reshape;
    n.a = x.id;
    n.value = kernels::reshape(at(x).value, std::move(s));
    return Var{push(std::move(n))};
}

Var Tape::slice_last(Var x, int64_t start, int64_t len) {
    Node n;
    n.op = Op::SliceLast;
    n.a = x.id;
    n.iaux = {start, len};
    n.value = kernels::slice_last(at(x).value, start, len);
    return Var{push(std::move(n))};
}

Var Tape::slice_rows(Var x, int64_t start, int64_t len) {
    Node n;
    n.op = Op::SliceRows;
    n.a = x.id;
    n.iaux = {start, len};
    n.value = kernels::slice_rows(at(x).value, start, len);
    return Var{push(std::move(n))};
}

Var Tape::gather_rows(Var table, std::vector<int64_t> idx) {
    Node n;
    n.op = Op::GatherRows;
    n.a = table.id;
    n.value = kernels::gather_rows(at(table).value, idx);
    n.iaux = std::move(idx);
    return Var{push(std::move(n))};
}

Var Tape::mean_all(Var x) {
    Node n;
    n.op = Op::MeanAll;
    n.a = x.id;
    n.value = Tensor::scalar(kernels::mean_all(at(x).value));
    return Var{push(std::move(n))};
}

Var Tape::mean_axis1(Var x) {
    Node n;
    n.op = Op::MeanAxis1;
    n.a = x.id;
    n.value = kernels::mean_axis1(at(x).value);
    return Var{push(std::move(n))};
}

Var Tape::sum_all(Var x) {
    Node n;
    n.op = Op::SumAll;
    n.a = x.id;
    n.value = Tensor::scalar(kernels::sum_all(at(x).value));
    return Var{push(std::move(n))};
}

Var Tape::mse(Var a, Var b) {
    Node n;
    n.op = Op::Mse;
    n.a = a.id;
    n.b = b.id;
    n.value = Tensor::scalar(kernels::mse(at(a).value, at(b).value));
    return Var{push(std::move(n))};
}

Var Tape::cross_entropy_ls(Var logits, std::vector<int> labels, double smoothing) {
    Node n;
    n.op = Op::CrossEntropyLS;
    n.a = logits.id;
    n.scalar0 = smoothing;
    n.value = Tensor::scalar(kernels::cross_entropy_ls(at(logits).value, labels, smoothing, &n.aux));
    n.iaux.assign(labels.begin(), labels.end());
    return Var{push(std::move(n))};
}

Var Tape::kl_soft_targets(Var student_logits, Tensor teacher_logits, double temperature) {
    Node n;
    n.op = Op::KlSoftTargets;
    n.a = student_logits.id;
    n.scalar0 = temperature;
    n.value = Tensor::scalar(
        kernels::kl_soft_targets(at(student_logits).value, teacher_logits, temperature, &n.aux));
    return Var{push(std::move(n))};
}

Var Tape::row_blend(Var t_branch, Var s_branch, std::vector<double> student_weights) {
    const Tensor& tv = at(t_branch).value;
    const Tensor& sv = at(s_branch).value;
    if (!same_shape(tv.shape, sv.shape)) throw DimensionError("row_blend: branch shape mismatch");
    if (static_cast<int64_t>(student_weights.size()) != tv.shape[0])
        throw DimensionError("row_blend: weight count must equal dim 0");
    Node n;
    n.op = Op::RowBlend;
    n.a = t_branch.id;
    n.b = s_branch.id;
    n.value = Tensor(tv.shape);
    const int64_t inner = tv.size() / tv.shape[0];
    for (int64_t r = 0; r < tv.shape[0]; ++r) {
        const double w = student_weights[static_cast<size_t>(r)];
        for (int64_t i = 0; i < inner; ++i)
            n.value.data[r * inner + i] = (1.0 - w) * tv.data[r * inner + i] + w * sv.data[r * inner + i];
    }
    n.aux = std::move(student_weights);
    return Var{push(std::move(n))};
}

const Tensor& Tape::val(Var v) const { return at(v).value; }

std::span<const double> Tape::grad_of(Var v) const { return at(v).grad; }

std::vector<int32_t> Tape::node_inputs(int32_t id) const {
    const Node& n = nodes_.at(static_cast<size_t>(id));
    std::vector<int32_t> in;
    for (int32_t x : {n.a, n.b, n.c})
        if (x >= 0) in.push_back(x);
    return in;
}

std::vector<double>& Tape::grad_buf(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.value.data.size(), 0.0);
    return n.grad;
}

void Tape::accum(int32_t id, std::span<const double> g) {
    std::vector<double>& dst = grad_buf(id);
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

void Tape::backward(Var output) {
    Tensor seed(at(output).value.shape, 1.0);
    backward(output, seed);
}

void Tape::backward(Var output, const Tensor& seed) {
    if (nodes_.empty()) throw StateError("backward: no forward graph has been built");
    if (backward_done_) throw StateError("backward: already run on this graph");
    Node& out = at(output);
    if (!same_shape(seed.shape, out.value.shape))
        throw DimensionError("backward: seed shape " + shape_str(seed.shape) + " does not match output " +
                             shape_str(out.value.shape));
    accum(output.id, seed.data);
    for (int32_t id = output.id; id >= 0; --id) {
        if (!nodes_[static_cast<size_t>(id)].grad.empty()) backprop_node(id);
    }
    backward_done_ = true;
}

void Tape::backprop_node(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const std::vector<double>& g = n.grad;
    switch (n.op) {
        case Op::Const:
            break;
        case Op::Leaf: {
            if (n.external && n.external->requires_grad) {
                n.external->ensure_grad();
                std::vector<double>& dst = *n.external->grad;
                for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
            }
            break;
        }
        case Op::Add: {
            accum(n.a, g);
            accum(n.b, g);
            break;
        }
        case Op::BiasAdd: {
            accum(n.a, g);
            const int64_t m = nodes_[static_cast<size_t>(n.b)].value.size();
            const int64_t rows = static_cast<int64_t>(g.size()) / m;
            std::vector<double> gb(static_cast<size_t>(m), 0.0);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < m; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(r * m + j)];
            accum(n.b, gb);
            break;
        }
        case Op::Bcast0Add: {
            accum(n.a, g);
            const int64_t inner = nodes_[static_cast<size_t>(n.b)].value.size();
            const int64_t B = static_cast<int64_t>(g.size()) / inner;
            std::vector<double> gm(static_cast<size_t>(inner), 0.0);
            for (int64_t bi = 0; bi < B; ++bi)
                for (int64_t i = 0; i < inner; ++i)
                    gm[static_cast<size_t>(i)] += g[static_cast<size_t>(bi * inner + i)];
            accum(n.b, gm);
            break;
        }
        case Op::Scale: {
            std::vector<double> ga(g.size());
            for (size_t i = 0; i < g.size(); ++i) ga[i] = n.scalar0 * g[i];
            accum(n.a, ga);
            break;
        }
        case Op::Matmul: {
            const Tensor& A = nodes_[static_cast<size_t>(n.a)].value;
            const Tensor& B = nodes_[static_cast<size_t>(n.b)].value;
            Tensor G = Tensor::from(n.value.shape, g);
            if (A.rank() == 2 && B.rank() == 2) {
                accum(n.a, kernels::matmul(G, kernels::transpose(B)).data);
                accum(n.b, kernels::matmul(kernels::transpose(A), G).data);
            } else if (A.rank() == 3 && B.rank() == 2) {
                accum(n.a, kernels::matmul(G, kernels::transpose(B)).data);
                // dB sums over the batch
                const int64_t nb = A.shape[0], nr = A.shape[1], k = A.shape[2], m = B.shape[1];
                std::vector<double> gb(static_cast<size_t>(k * m), 0.0);
                for (int64_t bi = 0; bi < nb; ++bi) {
                    const double* a = A.data.data() + bi * nr * k;
                    const double* gg = G.data.data() + bi * nr * m;
                    for (int64_t i = 0; i < nr; ++i)
                        for (int64_t l = 0; l < k; ++l) {
                            const double av = a[i * k + l];
                            for (int64_t j = 0; j < m; ++j)
                                gb[static_cast<size_t>(l * m + j)] += av * gg[i * m + j];
                        }
                }
                accum(n.b, gb);
            } else {  // 3x3
                accum(n.a, kernels::matmul(G, kernels::transpose(B)).data);
                accum(n.b, kernels::matmul(kernels::transpose(A), G).data);
            }
            break;
        }
        case Op::Transpose: {
            Tensor G = Tensor::from(n.value.shape, g);
            accum(n.a, kernels::transpose(G).data);
            break;
        }
        case Op::LayerNorm: {
            const Tensor& X = nodes_[static_cast<size_t>(n.a)].value;
            const Tensor& gamma = nodes_[static_cast<size_t>(n.b)].value;
            const int64_t d = X.shape.back();
            const int64_t rows = X.size() / d;
            std::vector<double> gx(static_cast<size_t>(X.size()), 0.0);
            std::vector<double> ggamma(static_cast<size_t>(d), 0.0);
            std::vector<double> gbeta(static_cast<size_t>(d), 0.0);
            for (int64_t r = 0; r < rows; ++r) {
                const double mean = n.aux[static_cast<size_t>(2 * r)];
                const double inv = n.aux[static_cast<size_t>(2 * r + 1)];
                const double* xr = X.data.data() + r * d;
                const double* gr = g.data() + r * d;
                double sum_gy = 0.0, sum_gy_xhat = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    const double xhat = (xr[j] - mean) * inv;
                    const double gy = gamma.data[static_cast<size_t>(j)] * gr[j];
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat;
                    ggamma[static_cast<size_t>(j)] += gr[j] * xhat;
                    gbeta[static_cast<size_t>(j)] += gr[j];
                }
                const double inv_d = 1.0 / static_cast<double>(d);
                for (int64_t j = 0; j < d; ++j) {
                    const double xhat = (xr[j] - mean) * inv;
                    const double gy = gamma.data[static_cast<size_t>(j)] * gr[j];
                    gx[static_cast<size_t>(r * d + j)] =
                        inv * (gy - inv_d * sum_gy - xhat * inv_d * sum_gy_xhat);
                }
            }
            accum(n.a, gx);
            accum(n.b, ggamma);
            accum(n.c, gbeta);
            break;
        }
        case Op::SoftmaxRows: {
            const Tensor& Y = n.value;
            const int64_t m = Y.shape.back();
            const int64_t rows = Y.size() / m;
            std::vector<double> gx(static_cast<size_t>(Y.size()), 0.0);
            for (int64_t r = 0; r < rows; ++r) {
                const double* yr = Y.data.data() + r * m;
                const double* gr = g.data() + r * m;
                double s = 0.0;
                for (int64_t j = 0; j < m; ++j) s += gr[j] * yr[j];
                for (int64_t j = 0; j < m; ++j) gx[static_cast<size_t>(r * m + j)] = yr[j] * (gr[j] - s);
            }
            accum(n.a, gx);
            break;
        }
        case Op::Gelu: {
            const Tensor& X = nodes_[static_cast<size_t>(n.a)].value;
            std::vector<double> gx(g.size());
            for (size_t i = 0; i < g.size(); ++i) {
                const double v = X.data[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                gx[i] = g[i] * (cdf + v * pdf);
            }
            accum(n.a, gx);
            break;
        }
        case Op::Reshape: {
            accum(n.a, g);
            break;
        }
        case Op::SliceLast: {
            const Tensor& X = nodes_[static_cast<size_t>(n.a)].value;
            const int64_t d = X.shape.back(), start = n.iaux[0], len = n.iaux[1];
            const int64_t rows = X.size() / d;
            std::vector<double> gx(static_cast<size_t>(X.size()), 0.0);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < len; ++j)
                    gx[static_cast<size_t>(r * d + start + j)] = g[static_cast<size_t>(r * len + j)];
            accum(n.a, gx);
            break;
        }
        case Op::SliceRows: {
            const Tensor& X = nodes_[static_cast<size_t>(n.a)].value;
            const int64_t cols = X.shape[1], start = n.iaux[0], len = n.iaux[1];
            std::vector<double> gx(static_cast<size_t>(X.size()), 0.0);
            std::copy_n(g.begin(), len * cols, gx.begin() + start * cols);
            accum(n.a, gx);
            break;
        }
        case Op::GatherRows: {
            const Tensor& T = nodes_[static_cast<size_t>(n.a)].value;
            const int64_t d = T.shape[1];
            std::vector<double> gt(static_cast<size_t>(T.size()), 0.0);
            for (size_t i = 0; i < n.iaux.size(); ++i) {
                const int64_t r = n.iaux[i];
                for (int64_t j = 0; j < d; ++j)
                    gt[static_cast<size_t>(r * d + j)] += g[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
            }
            accum(n.a, gt);
            break;
        }
        case Op::MeanAll: {
            const Tensor& X = nodes_[static_cast<size_t>(n.a)].value;
            std::vector<double> gx(static_cast<size_t>(X.size()), g[0] / static_cast<double>(X.size()));
            accum(n.a, gx);
            break;
        }
        case Op::MeanAxis1: {
            const Tensor& X = nodes_[static_cast<size_t>(n.a)].value;
            const int64_t B = X.shape[0], nr = X.shape[1], d = X.shape[2];
            std::vector<double> gx(static_cast<size_t>(X.size()));
            for (int64_t bi = 0; bi < B; ++bi)
                for (int64_t i = 0; i < nr; ++i)
                    for (int64_t j = 0; j < d; ++j)
                        gx[static_cast<size_t>((bi * nr + i) * d + j)] =
                            g[static_cast<size_t>(bi * d + j)] / static_cast<double>(nr);
            accum(n.a, gx);
            break;
        }
        case Op::SumAll: {
            const Tensor& X = nodes_[static_cast<size_t>(n.a)].value;
            std::vector<double> gx(static_cast<size_t>(X.size()), g[0]);
            accum(n.a, gx);
            break;
        }
        case Op::Mse: {
            const Tensor& A = nodes_[static_cast<size_t>(n.a)].value;
            const Tensor& B = nodes_[static_cast<size_t>(n.b)].value;
            const double c = 2.0 * g[0] / static_cast<double>(A.size());
            std::vector<double> ga(static_cast<size_t>(A.size()));
            std::vector<double> gb(static_cast<size_t>(A.size()));
            for (int64_t i = 0; i < A.size(); ++i) {
                const double diff = A.data[static_cast<size_t>(i)] - B.data[static_cast<size_t>(i)];
                ga[static_cast<size_t>(i)] = c * diff;
                gb[static_cast<size_t>(i)] = -c * diff;
            }
            accum(n.a, ga);
            accum(n.b, gb);
            break;
        }
        case Op::CrossEntropyLS: {
            const Tensor& L = nodes_[static_cast<size_t>(n.a)].value;
            const int64_t B = L.shape[0], C = L.shape[1];
            const double eps = n.scalar0;
            std::vector<double> gl(static_cast<size_t>(B * C));
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t c = 0; c < C; ++c) {
                    double t = eps / static_cast<double>(C);
                    if (c == n.iaux[static_cast<size_t>(b)]) t += 1.0 - eps;
                    gl[static_cast<size_t>(b * C + c)] =
                        g[0] * (n.aux[static_cast<size_t>(b * C + c)] - t) / static_cast<double>(B);
                }
            }
            accum(n.a, gl);
            break;
        }
        case Op::KlSoftTargets: {
            const Tensor& S = nodes_[static_cast<size_t>(n.a)].value;
            const int64_t B = S.shape[0], C = S.shape[1];
            const double T = n.scalar0;
            std::vector<double> gs(static_cast<size_t>(B * C));
            // aux = [p | q]
            for (int64_t i = 0; i < B * C; ++i) {
                const double p = n.aux[static_cast<size_t>(i)];
                const double q = n.aux[static_cast<size_t>(B * C + i)];
                gs[static_cast<size_t>(i)] = g[0] * (T / static_cast<double>(B)) * (q - p);
            }
            accum(n.a, gs);
            break;
        }
        case Op::RowBlend: {
            const Tensor& Tb = nodes_[static_cast<size_t>(n.a)].value;
            const int64_t R = Tb.shape[0];
            const int64_t inner = Tb.size() / R;
            std::vector<double> gt(static_cast<size_t>(Tb.size()));
            std::vector<double> gs(static_cast<size_t>(Tb.size()));
            for (int64_t r = 0; r < R; ++r) {
                const double w = n.aux[static_cast<size_t>(r)];
                for (int64_t i = 0; i < inner; ++i) {
                    gt[static_cast<size_t>(r * inner + i)] = (1.0 - w) * g[static_cast<size_t>(r * inner + i)];
                    gs[static_cast<size_t>(r * inner + i)] = w * g[static_cast<size_t>(r * inner + i)];
                }
            }
            accum(n.a, gt);
            accum(n.b, gs);
            break;
        }
    }
}

double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h) {
    if (h <= 0) throw ParameterError("finite_diff_check: h must be > 0");
    Tensor xa = x;
    xa.requires_grad = true;
    xa.grad.reset();
    Tape tape;
    Var xv = tape.leaf(xa);
    Var y = f(tape, xv);
    if (tape.val(y).size() != 1) throw DimensionError("finite_diff_check: f must be scalar-valued");
    tape.backward(y);
    std::vector<double> analytic(static_cast<size_t>(x.size()), 0.0);
    if (xa.grad) analytic = *xa.grad;

    auto eval_at = [&](const Tensor& xp) {
        Tensor xc = xp;
        xc.requires_grad = false;
        Tape t;
        Var v = t.leaf(xc);
        const double val = t.val(f(t, v)).item();
        if (!std::isfinite(val)) throw NumericError("finite_diff_check: f not finite at perturbed point");
        return val;
    };

    double max_rel = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) {
        Tensor xp = x;
        xp.data[static_cast<size_t>(i)] += h;
        const double fp = eval_at(xp);
        Tensor xm = x;
        xm.data[static_cast<size_t>(i)] -= h;
        const double fm = eval_at(xm);
        const double central = (fp - fm) / (2.0 * h);
        const double rel = std::abs(analytic[static_cast<size_t>(i)] - central) / (std::abs(central) + 1e-12);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace dcr
