#include "dcr/engine.hpp"

#include <cmath>
#include <sstream>

namespace dcr {

Method parse_method(const std::string& name) {
    if (name == "dcr") return Method::dcr;
    if (name == "dcr_dfg") return Method::dcr_dfg;
    if (name == "theseus_bernoulli") return Method::theseus_bernoulli;
    if (name == "theseus_gumbel") return Method::theseus_gumbel;
    if (name == "theseus_gumbel_dfg") return Method::theseus_gumbel_dfg;
    if (name == "student_only") return Method::student_only;
    if (name == "kd") return Method::kd;
    throw ConfigError("unknown method '" + name + "'");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::dcr: return "dcr";
        case Method::dcr_dfg: return "dcr_dfg";
        case Method::theseus_bernoulli: return "theseus_bernoulli";
        case Method::theseus_gumbel: return "theseus_gumbel";
        case Method::theseus_gumbel_dfg: return "theseus_gumbel_dfg";
        case Method::student_only: return "student_only";
        case Method::kd: return "kd";
    }
    return "?";
}

MethodConfig MethodConfig::defaults_for(Method m) {
    MethodConfig cfg;
    cfg.method = m;
    switch (m) {
        case Method::dcr:
        case Method::dcr_dfg:
            cfg.schedule = dcr_aggr20();
            break;
        case Method::theseus_bernoulli:
        case Method::theseus_gumbel:
        case Method::theseus_gumbel_dfg:
            cfg.schedule = theseus_aggr20();
            break;
        case Method::student_only:
        case Method::kd:
            cfg.schedule = constant_schedule(0.0);  // unused: sites always run the student
            break;
    }
    cfg.dfg_schedule = dcr_aggr20();
    return cfg;
}

double dfg_loss(const std::vector<BlockOutputs>& sites) {
    double total = 0.0;
    for (const BlockOutputs& s : sites) {
        if (s.teacher_branch.size() == 0)
            throw StateError("dfg_loss: teacher branch missing at a replaced site");
        if (s.student_branch.size() == 0)
            throw StateError("dfg_loss: student branch missing at a replaced site");
        const int64_t B = s.teacher_branch.shape[0];
        const int64_t features = s.teacher_branch.size() / B;
        total += kernels::mse(s.student_branch, s.teacher_branch) * static_cast<double>(features);
    }
    return total;
}

double kd_soft_target_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                           double temperature) {
    return kernels::kl_soft_targets(student_logits, teacher_logits, temperature);
}

namespace {

struct GatePlan {
    GateDraw draw;
    SitePlan plan;
    double mean_student_w = 1.0;
};

GatePlan gate_plan_for_site(const MethodConfig& cfg, double sched_value, int64_t batch, Rng& rng,
                            bool force_teacher) {
    GatePlan gp;
    auto stochastic_site = [&](auto draw_one, GateMechanism mech) {
        gp.draw.mechanism = mech;
        if (cfg.per_example_gates) {
            std::vector<double> w(static_cast<size_t>(batch));
            double sum = 0.0;
            for (double& v : w) {
                v = draw_one();
                sum += v;
            }
            gp.draw.value = sum / static_cast<double>(batch);
            gp.mean_student_w = gp.draw.value;
            bool any_teacher = false;
            for (double v : w)
                if (v < 1.0) any_teacher = true;
            gp.plan.eval_teacher = any_teacher || cfg.has_dfg() || force_teacher;
            if (gp.plan.eval_teacher) {
                gp.plan.per_row_student_w = std::move(w);
                gp.plan.teacher_w = 0.0;
                gp.plan.student_w = 1.0;  // unused with per-row weights
            } else {
                // every row selected the student; plain student forward
                gp.plan.teacher_w = 0.0;
                gp.plan.student_w = 1.0;
            }
        } else {
            const double v = draw_one();
            gp.draw.value = v;
            gp.mean_student_w = v;
            gp.plan.student_w = v;
            gp.plan.teacher_w = 1.0 - v;
            gp.plan.eval_teacher = gp.plan.teacher_w > 0.0 || cfg.has_dfg() || force_teacher;
        }
    };
    switch (cfg.method) {
        case Method::dcr:
        case Method::dcr_dfg: {
            const double alpha = sched_value;  // teacher weight
            gp.draw.mechanism = GateMechanism::deterministic;
            gp.draw.value = alpha;
            gp.mean_student_w = 1.0 - alpha;
            gp.plan.teacher_w = alpha;
            gp.plan.student_w = 1.0 - alpha;
            gp.plan.eval_teacher = alpha > 0.0 || cfg.has_dfg() || force_teacher;
            break;
        }
        case Method::theseus_bernoulli:
            stochastic_site([&] { return static_cast<double>(draw_bernoulli_gate(sched_value, rng)); },
                            GateMechanism::bernoulli);
            break;
        case Method::theseus_gumbel:
        case Method::theseus_gumbel_dfg:
            if (sched_value <= 0.0 || sched_value >= 1.0) {
                gp.draw.mechanism = GateMechanism::deterministic;
                gp.draw.value = sched_value;
                gp.mean_student_w = sched_value;
                gp.plan.student_w = sched_value;
                gp.plan.teacher_w = 1.0 - sched_value;
                gp.plan.eval_teacher = gp.plan.teacher_w > 0.0 || cfg.has_dfg() || force_teacher;
            } else {
                stochastic_site([&] { return draw_gumbel_gate(sched_value, cfg.gumbel_tau, rng); },
                                GateMechanism::gumbel);
                gp.draw.temperature = cfg.gumbel_tau;
            }
            break;
        case Method::student_only:
        case Method::kd: {
            gp.draw.mechanism = GateMechanism::deterministic;
            gp.draw.value = 1.0;
            gp.mean_student_w = 1.0;
            gp.plan.student_w = 1.0;
            gp.plan.teacher_w = 0.0;
            gp.plan.eval_teacher = force_teacher;
            break;
        }
    }
    return gp;
}

}  // namespace

StepOutput training_step(MicroModel& model, const TokenBatch& tokens, const std::vector<int>& labels,
                         const MethodConfig& cfg, double t_fraction, Rng& gate_rng,
                         const StepOptions& opts) {
    if (tokens.empty()) throw ParameterError("training_step: empty batch");
    if (t_fraction < 0.0 || t_fraction > 1.0)
        throw ParameterError("training_step: t_fraction outside [0,1]");

    const double sched_value = cfg.schedule.value(t_fraction);
    const double lambda =
        cfg.has_dfg() ? cfg.dfg_weight * cfg.dfg_schedule.value(t_fraction) : 0.0;
    const int64_t B = static_cast<int64_t>(tokens.size());

    // gates are drawn before the batch is touched, independently per layer
    std::map<int, GatePlan> gates;
    std::map<int, SitePlan> plans;
    for (int l : model.spec.replaced) {
        if (!model.students.count(l)) continue;
        GatePlan gp = gate_plan_for_site(cfg, sched_value, B, gate_rng, opts.force_teacher_eval);
        plans.emplace(l, gp.plan);
        gates.emplace(l, std::move(gp));
    }

    Tape tape;
    TapeForward fwd = tape_forward(tape, model, tokens, plans);

    StepOutput out;
    const Var task = tape.cross_entropy_ls(fwd.logits, labels, cfg.label_smoothing);
    Var total = task;

    Var dfg_var;
    if (cfg.has_dfg()) {
        for (const TapeSite& site : fwd.sites) {
            if (!site.teacher_evaluated)
                throw StateError("training_step: DFG requires the teacher branch at every site");
            const Tensor& t = site.teacher_branch;
            const double features = static_cast<double>(t.size() / t.shape[0]);
            const Var site_loss = tape.scale(tape.mse(site.student_branch, site.teacher_const), features);
            dfg_var = dfg_var.valid() ? tape.add(dfg_var, site_loss) : site_loss;
        }
        if (dfg_var.valid()) {
            out.dfg_loss = tape.val(dfg_var).item();
            if (lambda > 0.0) total = tape.add(total, tape.scale(dfg_var, lambda));
        }
    }

    if (cfg.method == Method::kd) {
        // full frozen teacher pass for soft targets
        const EvalOutputs teacher_out =
            eval_forward(model, tokens, uniform_plans(model.spec, site_plan_for(BlockMode::teacher_only, 1.0)));
        out.teacher_full_pass = true;
        const Var kd = tape.kl_soft_targets(fwd.logits, teacher_out.logits, cfg.kd_temperature);
        out.kd_loss = tape.val(kd).item();
        total = tape.add(total, tape.scale(kd, cfg.kd_weight));
    }

    out.task_loss = tape.val(task).item();
    out.total_loss = tape.val(total).item();
    out.lambda_used = lambda;
    out.logits = tape.val(fwd.logits);
    out.teacher_branch_evals = fwd.teacher_branch_evals;

    if (!std::isfinite(out.total_loss)) {
        std::ostringstream os;
        os << "training_step: non-finite loss (method=" << method_name(cfg.method)
           << ", t=" << t_fraction << ", task=" << out.task_loss << ", dfg=" << out.dfg_loss
           << ", kd=" << out.kd_loss << ")";
        throw NumericError(os.str());
    }

    tape.backward(total);

    for (const TapeSite& site : fwd.sites) {
        SiteStepInfo info;
        info.layer = site.layer;
        const GatePlan& gp = gates.at(site.layer);
        info.draw = gp.draw;
        info.student_w = gp.mean_student_w;
        if (site.teacher_evaluated && site.student_branch.valid()) {
            const Tensor& t = site.teacher_branch;
            const Tensor& s = tape.val(site.student_branch);
            info.dfg_site_loss = kernels::mse(s, t) * static_cast<double>(t.size() / t.shape[0]);
        }
        if (opts.capture_branches) {
            info.teacher_branch = site.teacher_branch;
            if (site.student_branch.valid()) info.student_branch = tape.val(site.student_branch);
        }
        out.sites.push_back(std::move(info));
    }
    return out;
}

}  // namespace dcr
