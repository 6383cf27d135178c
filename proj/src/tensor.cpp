#include "dcr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dcr {

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
    for (int64_t d : shape)
        if (d <= 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
    data.assign(static_cast<size_t>(numel(shape)), fill);
}

Tensor Tensor::from(Shape s, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(s);
    if (numel(t.shape) != static_cast<int64_t>(values.size()))
        throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(t.shape));
    t.data = std::move(values);
    return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape));
    return data[0];
}

void Tensor::ensure_grad() {
    if (!grad) grad.emplace(data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace kernels {

namespace {

void check_same(const Tensor& a, const Tensor& b, const char* what) {
    if (!same_shape(a.shape, b.shape))
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
}

// rows = product of all dims but the last
int64_t row_count(const Tensor& x) { return x.size() / x.shape.back(); }

void matmul_2d(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
    // c[n,m] += a[n,k] * b[k,m]; ikj order keeps the inner loop contiguous
    for (int64_t i = 0; i < n; ++i) {
        double* ci = c + i * m;
        const double* ai = a + i * k;
        for (int64_t l = 0; l < k; ++l) {
            const double av = ai[l];
            const double* bl = b + l * m;
            for (int64_t j = 0; j < m; ++j) ci[j] += av * bl[j];
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same(a, b, "add");
    Tensor out(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same(a, b, "sub");
    Tensor out(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) out.data[i] = c * a.data[i];
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() == 2 && b.rank() == 2) {
        if (a.shape[1] != b.shape[0])
            throw DimensionError("matmul: inner dims " + shape_str(a.shape) + " x " + shape_str(b.shape));
        Tensor out({a.shape[0], b.shape[1]});
        matmul_2d(a.data.data(), b.data.data(), out.data.data(), a.shape[0], a.shape[1], b.shape[1]);
        return out;
    }
    if (a.rank() == 3 && b.rank() == 2) {
        if (a.shape[2] != b.shape[0])
            throw DimensionError("matmul: inner dims " + shape_str(a.shape) + " x " + shape_str(b.shape));
        Tensor out({a.shape[0], a.shape[1], b.shape[1]});
        const int64_t n = a.shape[1], k = a.shape[2], m = b.shape[1];
        for (int64_t bi = 0; bi < a.shape[0]; ++bi)
            matmul_2d(a.data.data() + bi * n * k, b.data.data(), out.data.data() + bi * n * m, n, k, m);
        return out;
    }
    if (a.rank() == 3 && b.rank() == 3) {
        if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1])
            throw DimensionError("matmul: batched dims " + shape_str(a.shape) + " x " + shape_str(b.shape));
        Tensor out({a.shape[0], a.shape[1], b.shape[2]});
        const int64_t n = a.shape[1], k = a.shape[2], m = b.shape[2];
        for (int64_t bi = 0; bi < a.shape[0]; ++bi)
            matmul_2d(a.data.data() + bi * n * k, b.data.data() + bi * k * m, out.data.data() + bi * n * m, n,
                      k, m);
        return out;
    }
    throw DimensionError("matmul: unsupported ranks " + shape_str(a.shape) + " x " + shape_str(b.shape));
}

Tensor transpose(const Tensor& a) {
    if (a.rank() == 2) {
        Tensor out({a.shape[1], a.shape[0]});
        for (int64_t i = 0; i < a.shape[0]; ++i)
            for (int64_t j = 0; j < a.shape[1]; ++j) out.data[j * a.shape[0] + i] = a.data[i * a.shape[1] + j];
        return out;
    }
    if (a.rank() == 3) {
        Tensor out({a.shape[0], a.shape[2], a.shape[1]});
        const int64_t n = a.shape[1], m = a.shape[2];
        for (int64_t bi = 0; bi < a.shape[0]; ++bi) {
            const double* src = a.data.data() + bi * n * m;
            double* dst = out.data.data() + bi * n * m;
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < m; ++j) dst[j * n + i] = src[i * m + j];
        }
        return out;
    }
    throw DimensionError("transpose: rank must be 2 or 3, got " + shape_str(a.shape));
}

Tensor bias_add(const Tensor& x, const Tensor& b) {
    if (b.rank() != 1 || b.shape[0] != x.shape.back())
        throw DimensionError("bias_add: " + shape_str(x.shape) + " + " + shape_str(b.shape));
    Tensor out(x.shape);
    const int64_t m = b.shape[0], rows = row_count(x);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < m; ++j) out.data[r * m + j] = x.data[r * m + j] + b.data[j];
    return out;
}

Tensor bcast0_add(const Tensor& x, const Tensor& m) {
    if (x.rank() != m.rank() + 1 || !std::equal(m.shape.begin(), m.shape.end(), x.shape.begin() + 1))
        throw DimensionError("bcast0_add: " + shape_str(x.shape) + " + " + shape_str(m.shape));
    Tensor out(x.shape);
    const int64_t inner = m.size();
    for (int64_t bi = 0; bi < x.shape[0]; ++bi)
        for (int64_t i = 0; i < inner; ++i) out.data[bi * inner + i] = x.data[bi * inner + i] + m.data[i];
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  std::vector<double>* save_stats) {
    const int64_t d = x.shape.back();
    if (d < 1) throw DimensionError("layer_norm: empty last dim");
    if (eps < 0) throw ParameterError("layer_norm: eps must be >= 0");
    if (gamma.size() != d || beta.size() != d)
        throw DimensionError("layer_norm: gamma/beta must have length " + std::to_string(d));
    const int64_t rows = row_count(x);
    Tensor out(x.shape);
    if (save_stats) save_stats->assign(static_cast<size_t>(rows * 2), 0.0);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + r * d;
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        if (save_stats) {
            (*save_stats)[static_cast<size_t>(2 * r)] = mean;
            (*save_stats)[static_cast<size_t>(2 * r + 1)] = inv;
        }
        double* yr = out.data.data() + r * d;
        for (int64_t j = 0; j < d; ++j) yr[j] = gamma.data[j] * ((xr[j] - mean) * inv) + beta.data[j];
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    const int64_t m = x.shape.back();
    if (m < 1) throw DimensionError("softmax_rows: empty last dim");
    const int64_t rows = row_count(x);
    Tensor out(x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + r * m;
        double mx = xr[0];
        for (int64_t j = 1; j < m; ++j) mx = std::max(mx, xr[j]);
        double z = 0.0;
        double* yr = out.data.data() + r * m;
        for (int64_t j = 0; j < m; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            z += yr[j];
        }
        for (int64_t j = 0; j < m; ++j) yr[j] /= z;
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out(x.shape);
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (int64_t i = 0; i < x.size(); ++i) {
        const double v = x.data[i];
        out.data[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape s) {
    if (numel(s) != x.size())
        throw DimensionError("reshape: " + shape_str(x.shape) + " -> " + shape_str(s));
    Tensor out;
    out.shape = std::move(s);
    out.data = x.data;
    return out;
}

Tensor slice_last(const Tensor& x, int64_t start, int64_t len) {
    const int64_t d = x.shape.back();
    if (start < 0 || len <= 0 || start + len > d)
        throw DimensionError("slice_last: [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") out of " + std::to_string(d));
    Shape s = x.shape;
    s.back() = len;
    Tensor out(s);
    const int64_t rows = row_count(x);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < len; ++j) out.data[r * len + j] = x.data[r * d + start + j];
    return out;
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
    if (x.rank() != 2) throw DimensionError("slice_rows: rank-2 only, got " + shape_str(x.shape));
    if (start < 0 || len <= 0 || start + len > x.shape[0])
        throw DimensionError("slice_rows: out of range");
    Tensor out({len, x.shape[1]});
    std::copy_n(x.data.begin() + start * x.shape[1], len * x.shape[1], out.data.begin());
    return out;
}

Tensor gather_rows(const Tensor& table, std::span<const int64_t> idx) {
    if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank-2");
    const int64_t d = table.shape[1];
    Tensor out({static_cast<int64_t>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= table.shape[0])
            throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " out of range");
        std::copy_n(table.data.begin() + idx[i] * d, d, out.data.begin() + static_cast<int64_t>(i) * d);
    }
    return out;
}

Tensor mean_axis1(const Tensor& x) {
    if (x.rank() != 3) throw DimensionError("mean_axis1: rank-3 only, got " + shape_str(x.shape));
    const int64_t B = x.shape[0], n = x.shape[1], d = x.shape[2];
    Tensor out({B, d});
    for (int64_t bi = 0; bi < B; ++bi) {
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) out.data[bi * d + j] += x.data[(bi * n + i) * d + j];
        for (int64_t j = 0; j < d; ++j) out.data[bi * d + j] /= static_cast<double>(n);
    }
    return out;
}

double mean_all(const Tensor& x) { return sum_all(x) / static_cast<double>(x.size()); }

double sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data) s += v;
    return s;
}

double mse(const Tensor& a, const Tensor& b) {
    check_same(a, b, "mse");
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

double cross_entropy_ls(const Tensor& logits, std::span<const int> labels, double smoothing,
                        std::vector<double>* save_probs) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy_ls: logits must be [B,C]");
    const int64_t B = logits.shape[0], C = logits.shape[1];
    if (static_cast<int64_t>(labels.size()) != B)
        throw DimensionError("cross_entropy_ls: label count mismatch");
    if (smoothing < 0.0 || smoothing >= 1.0) throw ParameterError("cross_entropy_ls: smoothing in [0,1)");
    if (save_probs) save_probs->assign(static_cast<size_t>(B * C), 0.0);
    double loss = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        if (labels[static_cast<size_t>(b)] < 0 || labels[static_cast<size_t>(b)] >= C)
            throw ParameterError("cross_entropy_ls: label out of range");
        const double* lr = logits.data.data() + b * C;
        double mx = lr[0];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, lr[c]);
        double z = 0.0;
        for (int64_t c = 0; c < C; ++c) z += std::exp(lr[c] - mx);
        const double logz = std::log(z) + mx;
        // target = (1-eps)*onehot + eps/C
        double ls = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            const double logp = lr[c] - logz;
            double t = smoothing / static_cast<double>(C);
            if (c == labels[static_cast<size_t>(b)]) t += 1.0 - smoothing;
            ls -= t * logp;
            if (save_probs) (*save_probs)[static_cast<size_t>(b * C + c)] = std::exp(logp);
        }
        loss += ls;
    }
    return loss / static_cast<double>(B);
}

double kl_soft_targets(const Tensor& student_logits, const Tensor& teacher_logits, double temperature,
                       std::vector<double>* save_probs) {
    if (temperature <= 0) throw ParameterError("kl_soft_targets: temperature must be > 0");
    check_same(student_logits, teacher_logits, "kl_soft_targets");
    if (student_logits.rank() != 2) throw DimensionError("kl_soft_targets: logits must be [B,C]");
    const int64_t B = student_logits.shape[0], C = student_logits.shape[1];
    const Tensor p = softmax_rows(scale(teacher_logits, 1.0 / temperature));
    const Tensor q = softmax_rows(scale(student_logits, 1.0 / temperature));
    if (save_probs) {
        // [p | q] concatenated, used by the tape backward
        save_probs->resize(static_cast<size_t>(2 * B * C));
        std::copy(p.data.begin(), p.data.end(), save_probs->begin());
        std::copy(q.data.begin(), q.data.end(), save_probs->begin() + B * C);
    }
    double kl = 0.0;
    for (int64_t i = 0; i < B * C; ++i) {
        if (p.data[i] > 0.0) kl += p.data[i] * (std::log(p.data[i]) - std::log(q.data[i]));
    }
    return kl * temperature * temperature / static_cast<double>(B);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace kernels

}  // namespace dcr
