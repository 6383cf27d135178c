#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dcr/model.hpp"
#include "dcr/schedules.hpp"

namespace dcr {

enum class Method {
    dcr,
    dcr_dfg,
    theseus_bernoulli,
    theseus_gumbel,
    theseus_gumbel_dfg,
    student_only,
    kd,
};

Method parse_method(const std::string& name);
std::string method_name(Method m);

struct MethodConfig {
    Method method = Method::dcr;
    GateSchedule schedule;           // alpha(t) for dcr, p(t) for theseus variants
    double dfg_weight = 1.0;         // lambda_0
    GateSchedule dfg_schedule;       // lambda(t) = lambda_0 * dfg_schedule(t)
    double kd_temperature = 4.0;
    double kd_weight = 1.0;
    double gumbel_tau = 1.0;
    double label_smoothing = 0.1;
    bool per_example_gates = false;

    bool has_dfg() const { return method == Method::dcr_dfg || method == Method::theseus_gumbel_dfg; }
    bool is_stochastic() const {
        return method == Method::theseus_bernoulli || method == Method::theseus_gumbel ||
               method == Method::theseus_gumbel_dfg;
    }
    static MethodConfig defaults_for(Method m);
};

struct SiteStepInfo {
    int layer = 0;
    GateDraw draw;
    double student_w = 1.0;          // batch mean when per-example gating is on
    double dfg_site_loss = 0.0;      // sum over features, mean over batch
    Tensor teacher_branch;           // value snapshot (empty when skipped / not captured)
    Tensor student_branch;
};

struct StepOutput {
    double total_loss = 0.0;
    double task_loss = 0.0;
    double dfg_loss = 0.0;
    double kd_loss = 0.0;
    double lambda_used = 0.0;
    Tensor logits;
    std::vector<SiteStepInfo> sites;
    int teacher_branch_evals = 0;
    bool teacher_full_pass = false;
};

struct StepOptions {
    bool force_teacher_eval = false;  // evaluate branches even when skippable
    bool capture_branches = false;    // keep branch value snapshots for metrics
};

// Sum over sites of ||s_l - t_l||^2, mean over the batch. Sites must carry
// both branches.
double dfg_loss(const std::vector<BlockOutputs>& sites);

// KL(teacher || student) on temperature-softened distributions, scaled by T^2.
double kd_soft_target_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                           double temperature);

// One training step per the configured method: draws gates (before seeing the
// batch), runs the blended forward, assembles the total objective and fills
// student-parameter gradients. Teacher parameters never receive gradients.
StepOutput training_step(MicroModel& model, const TokenBatch& tokens, const std::vector<int>& labels,
                         const MethodConfig& cfg, double t_fraction, Rng& gate_rng,
                         const StepOptions& opts = {});

}  // namespace dcr
