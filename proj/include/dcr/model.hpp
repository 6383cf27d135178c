#pragma once

#include <map>
#include <string>
#include <vector>

#include "dcr/tape.hpp"
#include "dcr/tensor.hpp"

namespace dcr {

struct ModelSpec {
    int depth = 4;
    int width = 32;
    int heads = 4;
    int seq_len = 16;
    int vocab = 9;
    int num_classes = 8;
    int mlp_mult = 2;  // MLP hidden width as a multiple of width
    std::vector<int> replaced = {1, 2, 3, 4};  // 1-based layer indices

    int head_dim() const { return width / heads; }
    int mlp_hidden() const { return mlp_mult * width; }
    bool is_replaced(int layer) const;
    void validate() const;
};

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;
};

struct BlockParams {
    Tensor ln1_g, ln1_b;
    AttentionParams attn;  // backbone attention; the frozen teacher at replaced sites
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
    std::vector<Tensor*> tensors();
};

// Pre-norm residual transformer over token sequences:
//   x <- x + Attn(LN(x));  x <- x + MLP(LN(x));  logits = head(mean(LN(x)))
// Replaced sites pair the frozen backbone attention (teacher) with a
// cold-start student of identical shape.
struct MicroModel {
    ModelSpec spec;
    Tensor tok_embed;  // [vocab, d]
    Tensor pos_embed;  // [n, d]
    std::vector<BlockParams> blocks;
    Tensor final_ln_g, final_ln_b;
    Tensor head_w, head_b;  // [d, classes], [classes]
    std::map<int, AttentionParams> students;  // keyed by 1-based layer

    static MicroModel init(const ModelSpec& spec, uint64_t seed);
    void add_students(uint64_t seed);

    void set_all_trainable();            // teacher pretraining
    void set_students_only_trainable();  // replacement runs: backbone frozen

    std::vector<Tensor*> backbone_params();
    std::vector<Tensor*> student_params();                 // all sites
    std::vector<Tensor*> student_params_at(int layer);     // one site
    std::vector<Tensor*> trainable_params();
};

// i.i.d. normal entries with std sqrt(2 / fan_in).
Tensor kaiming_init(Shape shape, int64_t fan_in, Rng& rng);

enum class BlockMode { teacher_only, student_only, dcr_blend, theseus_hard, theseus_soft };

// Resolved branch mixing for one site. teacher_w + student_w == 1 unless
// per-row weights are given (per-example gating).
struct SitePlan {
    double teacher_w = 0.0;
    double student_w = 1.0;
    std::vector<double> per_row_student_w;  // optional, one weight per example
    bool eval_teacher = true;
};

// Maps the spec's (mode, gate_value) pair onto branch weights. For dcr_blend
// the gate value is the teacher weight alpha; for the theseus modes it is the
// drawn student gate.
SitePlan site_plan_for(BlockMode mode, double gate_value);

struct BlockOutputs {
    Tensor residual_in;    // x_l
    Tensor normalized;     // h_l = LN(x_l)
    Tensor teacher_branch; // t_l (empty when skipped)
    Tensor student_branch; // s_l (empty for non-replaced forward)
    Tensor residual_out;   // x_l + blended branch (before the MLP sub-block)
};

using TokenBatch = std::vector<std::vector<int>>;

struct EvalOutputs {
    Tensor logits;                    // [B, classes]
    std::vector<BlockOutputs> sites;  // per replaced layer, ascending
    int teacher_branch_evals = 0;
};

struct BranchInjection {
    int layer = -1;                 // 1-based; -1 disables
    const Tensor* branch = nullptr; // [B,n,d] value used in place of the blended branch
};

// Value-only forward. Plans must cover every replaced layer.
EvalOutputs eval_forward(const MicroModel& m, const TokenBatch& tokens,
                         const std::map<int, SitePlan>& plans, bool capture_sites = false,
                         const BranchInjection& inject = {});

// Single-site attention, value level (the spec's attention_forward).
Tensor attention_forward(const AttentionParams& p, const Tensor& h, int heads);

struct TapeSite {
    int layer = 0;
    Var normalized;          // h_l on tape
    Var student_branch;      // s_l on tape
    Var teacher_const;       // t_l as a tape constant (invalid when skipped)
    Var blended_branch;      // the branch actually added to the residual stream
    Tensor teacher_branch;   // detached value (empty when skipped)
    bool teacher_evaluated = false;
};

struct TapeForward {
    Var logits;
    std::vector<TapeSite> sites;
    int teacher_branch_evals = 0;
};

// Differentiable forward. Teacher branches are evaluated through the value
// kernels and enter the graph as constants, so no gradient ever reaches
// teacher parameters.
TapeForward tape_forward(Tape& tape, MicroModel& m, const TokenBatch& tokens,
                         const std::map<int, SitePlan>& plans);

// Convenience: same plan at every replaced site.
std::map<int, SitePlan> uniform_plans(const ModelSpec& spec, const SitePlan& plan);

void save_checkpoint(const MicroModel& m, const std::string& path);
MicroModel load_checkpoint(const std::string& path);

}  // namespace dcr
