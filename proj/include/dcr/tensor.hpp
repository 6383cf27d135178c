#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcr/common.hpp"

namespace dcr {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

// Dense fp64 tensor, row-major, rank 0..3. Carries an optional gradient
// buffer of identical length; frozen tensors (requires_grad == false) never
// receive one.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    static Tensor from(Shape s, std::vector<double> values);
    static Tensor scalar(double v);

    int rank() const { return static_cast<int>(shape.size()); }
    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double item() const;  // requires size() == 1

    void ensure_grad();   // allocate zero-filled grad buffer
    void zero_grad();
    bool all_finite() const;
};

// Value-level kernels. The tape calls these same functions for its forward
// values, so eval-mode and taped forwards are bitwise identical.
namespace kernels {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// [n,k]x[k,m]; [B,n,k]x[k,m]; [B,n,k]x[B,k,m]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // rank-2 swap, rank-3 swaps last two dims
// bias over last dim: [..., m] + [m]
Tensor bias_add(const Tensor& x, const Tensor& b);
// broadcast over dim 0: [B, rest...] + [rest...]
Tensor bcast0_add(const Tensor& x, const Tensor& m);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  std::vector<double>* save_stats = nullptr);
Tensor softmax_rows(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor reshape(const Tensor& x, Shape s);
Tensor slice_last(const Tensor& x, int64_t start, int64_t len);
Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);  // rank-2 only
Tensor gather_rows(const Tensor& table, std::span<const int64_t> idx);
Tensor mean_axis1(const Tensor& x);  // [B,n,d] -> [B,d]
double mean_all(const Tensor& x);
double sum_all(const Tensor& x);
double mse(const Tensor& a, const Tensor& b);
// mean over batch of CE against a label-smoothed target; probs saved for backward
double cross_entropy_ls(const Tensor& logits, std::span<const int> labels, double smoothing,
                        std::vector<double>* save_probs = nullptr);
// temperature-softened KL(teacher || student) * T^2, mean over batch
double kl_soft_targets(const Tensor& student_logits, const Tensor& teacher_logits, double temperature,
                       std::vector<double>* save_probs = nullptr);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);

}  // namespace kernels

}  // namespace dcr
