#include "dcr/theory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "dcr/schedules.hpp"
#include "json.hpp"

namespace dcr {

double theseus_variance_closed_form(double p, std::span<const double> mean_a, double var_a) {
    if (p < 0.0 || p > 1.0) throw ParameterError("theseus_variance_closed_form: p outside [0,1]");
    if (var_a < 0.0) throw ParameterError("theseus_variance_closed_form: var_a < 0");
    return p * var_a + p * (1.0 - p) * kernels::dot(mean_a, mean_a);
}

double soft_gate_variance_closed_form(double p, double var_r, double mean_sq_a, double var_a) {
    if (var_r < 0.0) throw ParameterError("soft_gate_variance_closed_form: var_r < 0");
    return p * p * var_a + var_r * mean_sq_a;
}

// ---------------------------------------------------------------------------
// synthetic families
// ---------------------------------------------------------------------------

std::string family_name(AFamily f) {
    switch (f) {
        case AFamily::deterministic: return "deterministic";
        case AFamily::gaussian: return "gaussian";
        case AFamily::heavy_tail: return "heavy_tail";
    }
    return "?";
}

namespace {

// base direction for each family; scaled noise added per draw
std::vector<double> family_mean(int dim, Rng& rng) {
    std::vector<double> m(static_cast<size_t>(dim));
    for (double& v : m) v = rng.uniform(-1.5, 1.5);
    return m;
}

// student-t via normal / sqrt(chi2/df); df=5 keeps the fourth moment finite
double student_t5(Rng& rng) {
    const double z = rng.normal();
    double chi2 = 0.0;
    for (int i = 0; i < 5; ++i) {
        const double n = rng.normal();
        chi2 += n * n;
    }
    return z / std::sqrt(chi2 / 5.0);
}

std::vector<double> draw_a(AFamily family, const std::vector<double>& mean, Rng& rng) {
    std::vector<double> a = mean;
    switch (family) {
        case AFamily::deterministic:
            break;
        case AFamily::gaussian:
            for (double& v : a) v += 0.8 * rng.normal();
            break;
        case AFamily::heavy_tail:
            for (double& v : a) v += 0.5 * student_t5(rng);
            break;
    }
    return a;
}

struct SampleMoments {
    std::vector<double> mean;
    double trace_var = 0.0;
    double mean_sq = 0.0;
    double se_trace = 0.0;     // MC standard error of trace_var
    double se_norm2 = 0.0;     // MC standard error of ||mean||^2
};

SampleMoments moments_of(const std::vector<std::vector<double>>& xs) {
    const size_t n = xs.size();
    const size_t d = xs[0].size();
    SampleMoments m;
    m.mean.assign(d, 0.0);
    for (const auto& x : xs)
        for (size_t c = 0; c < d; ++c) m.mean[c] += x[c];
    for (double& v : m.mean) v /= static_cast<double>(n);
    // q_k = ||x_k - mean||^2; trace variance = sum_k q_k / (n-1)
    double sum_q = 0.0, sum_q2 = 0.0;
    std::vector<double> per_coord_var(d, 0.0);
    for (const auto& x : xs) {
        double q = 0.0;
        for (size_t c = 0; c < d; ++c) {
            const double diff = x[c] - m.mean[c];
            q += diff * diff;
            per_coord_var[c] += diff * diff;
        }
        sum_q += q;
        sum_q2 += q * q;
        double sq = 0.0;
        for (double v : x) sq += v * v;
        m.mean_sq += sq;
    }
    m.mean_sq /= static_cast<double>(n);
    m.trace_var = sum_q / static_cast<double>(n - 1);
    const double mean_q = sum_q / static_cast<double>(n);
    const double var_q = sum_q2 / static_cast<double>(n) - mean_q * mean_q;
    m.se_trace = std::sqrt(std::max(0.0, var_q) / static_cast<double>(n));
    double se2 = 0.0;
    for (size_t c = 0; c < d; ++c) {
        const double vc = per_coord_var[c] / static_cast<double>(n - 1);
        se2 += 4.0 * m.mean[c] * m.mean[c] * vc / static_cast<double>(n);
    }
    m.se_norm2 = std::sqrt(se2);
    return m;
}

}  // namespace

JointVarianceCheck prop1_check(AFamily family, double p, int64_t draws, int dim, uint64_t seed) {
    if (draws < 16) throw ParameterError("prop1_check: too few draws");
    Rng rng(seed);
    const std::vector<double> mean = family_mean(dim, rng);
    std::vector<std::vector<double>> a_samples;
    std::vector<std::vector<double>> w_samples;
    a_samples.reserve(static_cast<size_t>(draws));
    w_samples.reserve(static_cast<size_t>(draws));
    for (int64_t k = 0; k < draws; ++k) {
        std::vector<double> a = draw_a(family, mean, rng);
        const int z = draw_bernoulli_gate(p, rng);
        std::vector<double> w(a.size(), 0.0);
        if (z) w = a;
        a_samples.push_back(std::move(a));
        w_samples.push_back(std::move(w));
    }
    const SampleMoments ma = moments_of(a_samples);
    const SampleMoments mw = moments_of(w_samples);
    JointVarianceCheck out;
    out.family = family;
    out.p = p;
    out.empirical = mw.trace_var;
    out.predicted = theseus_variance_closed_form(p, ma.mean, ma.trace_var);
    const double se_pred =
        std::sqrt(p * p * ma.se_trace * ma.se_trace +
                  p * (1.0 - p) * p * (1.0 - p) * ma.se_norm2 * ma.se_norm2);
    out.se = std::sqrt(mw.se_trace * mw.se_trace + se_pred * se_pred) + 1e-15;
    out.pass = std::abs(out.empirical - out.predicted) <= 3.0 * out.se;
    return out;
}

RemarkCheck remark_check(double p, double tau, int64_t draws, int dim, uint64_t seed) {
    if (draws < 16) throw ParameterError("remark_check: too few draws");
    Rng rng(seed);
    const std::vector<double> mean = family_mean(dim, rng);
    std::vector<std::vector<double>> a_samples, w_samples;
    a_samples.reserve(static_cast<size_t>(draws));
    w_samples.reserve(static_cast<size_t>(draws));
    double sum_r = 0.0, sum_r2 = 0.0;
    for (int64_t k = 0; k < draws; ++k) {
        std::vector<double> a = draw_a(AFamily::gaussian, mean, rng);
        const double r = draw_gumbel_gate(p, tau, rng);
        sum_r += r;
        sum_r2 += r * r;
        std::vector<double> w(a.size());
        for (size_t c = 0; c < a.size(); ++c) w[c] = r * a[c];
        a_samples.push_back(std::move(a));
        w_samples.push_back(std::move(w));
    }
    const double n = static_cast<double>(draws);
    RemarkCheck out;
    out.tau = tau;
    out.p = p;
    out.mean_r = sum_r / n;
    out.var_r = sum_r2 / n - out.mean_r * out.mean_r;
    const SampleMoments ma = moments_of(a_samples);
    const SampleMoments mw = moments_of(w_samples);
    out.empirical = mw.trace_var;
    out.deterministic_part = out.mean_r * out.mean_r * ma.trace_var;
    out.predicted = soft_gate_variance_closed_form(out.mean_r, out.var_r, ma.mean_sq, ma.trace_var);
    out.se = std::sqrt(mw.se_trace * mw.se_trace + ma.se_trace * ma.se_trace) + 1e-15;
    out.pass = std::abs(out.empirical - out.predicted) <= 3.0 * out.se;
    return out;
}

// ---------------------------------------------------------------------------
// live-model gate variance
// ---------------------------------------------------------------------------

GradSample grad_sample(MicroModel& model, const TokenBatch& tokens, const std::vector<int>& labels,
                       int site_layer, const SitePlan& site_plan, double other_sites_alpha,
                       double label_smoothing, const std::string& method, const GateDraw& draw) {
    if (!model.students.count(site_layer))
        throw ParameterError("grad_sample: no student at layer " + std::to_string(site_layer));
    for (Tensor* t : model.student_params()) t->grad.reset();
    std::map<int, SitePlan> plans;
    for (int l : model.spec.replaced) {
        if (!model.students.count(l)) continue;
        if (l == site_layer) {
            plans.emplace(l, site_plan);
        } else {
            SitePlan other;
            other.teacher_w = other_sites_alpha;
            other.student_w = 1.0 - other_sites_alpha;
            other.eval_teacher = other.teacher_w > 0.0;
            plans.emplace(l, other);
        }
    }
    Tape tape;
    TapeForward fwd = tape_forward(tape, model, tokens, plans);
    const Var loss = tape.cross_entropy_ls(fwd.logits, labels, label_smoothing);
    tape.backward(loss);
    GradSample out;
    out.method = method;
    out.draw = draw;
    for (Tensor* t : model.student_params_at(site_layer)) {
        if (t->grad) out.grad.insert(out.grad.end(), t->grad->begin(), t->grad->end());
        else out.grad.insert(out.grad.end(), t->data.size(), 0.0);
    }
    for (Tensor* t : model.student_params()) t->grad.reset();
    return out;
}

namespace {

// trace of the sample covariance over a set of equal-length vectors
double trace_sample_variance(const std::vector<std::vector<double>>& xs) {
    const size_t n = xs.size();
    if (n < 2) throw ParameterError("trace_sample_variance: need at least 2 samples");
    const size_t d = xs[0].size();
    std::vector<double> mean(d, 0.0);
    for (const auto& x : xs)
        for (size_t c = 0; c < d; ++c) mean[c] += x[c];
    for (double& v : mean) v /= static_cast<double>(n);
    double total = 0.0;
    for (const auto& x : xs) {
        for (size_t c = 0; c < d; ++c) {
            const double diff = x[c] - mean[c];
            total += diff * diff;
        }
    }
    return total / static_cast<double>(n - 1);
}

}  // namespace

VarianceReport empirical_gate_variance(MicroModel& model, int site_layer, double p,
                                       const std::vector<std::pair<TokenBatch, std::vector<int>>>& batches,
                                       int draws_per_batch, double gumbel_tau, double other_sites_alpha,
                                       double label_smoothing, uint64_t seed) {
    if (batches.empty()) throw ParameterError("empirical_gate_variance: no batches");
    if (draws_per_batch < 2)
        throw ParameterError("empirical_gate_variance: need >= 2 gate draws per batch");
    Rng rng(seed);
    VarianceReport rep;
    rep.site_layer = site_layer;
    rep.p = p;
    rep.batches = static_cast<int>(batches.size());
    rep.draws = draws_per_batch;

    double sum_dcr = 0.0, sum_theseus = 0.0, sum_gumbel = 0.0, sum_norm2 = 0.0;
    std::vector<double> theseus_per_batch;
    std::vector<std::vector<double>> all_theseus, all_dcr;
    int batch_id = 0;
    for (const auto& [tokens, labels] : batches) {
        // student-only probe: a(S_l; X)
        SitePlan student_plan;
        student_plan.student_w = 1.0;
        student_plan.teacher_w = 0.0;
        student_plan.eval_teacher = false;
        const GradSample a = grad_sample(model, tokens, labels, site_layer, student_plan,
                                         other_sites_alpha, label_smoothing, "probe", {});
        sum_norm2 += kernels::dot(a.grad, a.grad);

        // DCR arm: deterministic blend at student weight p, repeated draws
        std::vector<std::vector<double>> dcr_grads;
        for (int k = 0; k < draws_per_batch; ++k) {
            SitePlan plan;
            plan.student_w = p;
            plan.teacher_w = 1.0 - p;
            plan.eval_teacher = plan.teacher_w > 0.0;
            GateDraw d;
            d.mechanism = GateMechanism::deterministic;
            d.value = 1.0 - p;  // alpha
            GradSample g = grad_sample(model, tokens, labels, site_layer, plan, other_sites_alpha,
                                       label_smoothing, "dcr", d);
            dcr_grads.push_back(std::move(g.grad));
        }
        sum_dcr += trace_sample_variance(dcr_grads);
        for (auto& g : dcr_grads) all_dcr.push_back(std::move(g));

        // Theseus arm: hard gate at the site only
        std::vector<std::vector<double>> th_grads;
        for (int k = 0; k < draws_per_batch; ++k) {
            const int z = draw_bernoulli_gate(p, rng);
            SitePlan plan;
            plan.student_w = static_cast<double>(z);
            plan.teacher_w = 1.0 - plan.student_w;
            plan.eval_teacher = plan.teacher_w > 0.0;
            GateDraw d;
            d.mechanism = GateMechanism::bernoulli;
            d.value = static_cast<double>(z);
            GradSample g = grad_sample(model, tokens, labels, site_layer, plan, other_sites_alpha,
                                       label_smoothing, "theseus", d);
            th_grads.push_back(std::move(g.grad));
        }
        const double tv = trace_sample_variance(th_grads);
        sum_theseus += tv;
        theseus_per_batch.push_back(tv);
        for (auto& g : th_grads) all_theseus.push_back(std::move(g));

        // soft-gate arm
        if (gumbel_tau > 0.0) {
            std::vector<std::vector<double>> gm_grads;
            for (int k = 0; k < draws_per_batch; ++k) {
                const double r = draw_gumbel_gate(p, gumbel_tau, rng);
                SitePlan plan;
                plan.student_w = r;
                plan.teacher_w = 1.0 - r;
                plan.eval_teacher = true;
                GateDraw d;
                d.mechanism = GateMechanism::gumbel;
                d.value = r;
                d.temperature = gumbel_tau;
                GradSample g = grad_sample(model, tokens, labels, site_layer, plan, other_sites_alpha,
                                           label_smoothing, "gumbel", d);
                gm_grads.push_back(std::move(g.grad));
            }
            sum_gumbel += trace_sample_variance(gm_grads);
        }
        ++batch_id;
    }
    const double nb = static_cast<double>(batches.size());
    rep.mean_sq_a = sum_norm2 / nb;
    rep.dcr_gate_component = sum_dcr / nb;
    rep.theseus_gate_component = sum_theseus / nb;
    rep.gumbel_gate_component = gumbel_tau > 0.0 ? sum_gumbel / nb : 0.0;
    rep.closed_form = p * (1.0 - p) * rep.mean_sq_a;
    rep.theseus_minus_dcr = rep.theseus_gate_component - rep.dcr_gate_component;
    rep.rel_error = rep.closed_form > 0.0
                        ? std::abs(rep.theseus_gate_component - rep.closed_form) / rep.closed_form
                        : std::abs(rep.theseus_gate_component);
    rep.theseus_total_var = trace_sample_variance(all_theseus);
    rep.dcr_total_var = trace_sample_variance(all_dcr);
    double mean_tv = sum_theseus / nb, var_tv = 0.0;
    for (double tv : theseus_per_batch) var_tv += (tv - mean_tv) * (tv - mean_tv);
    var_tv /= std::max(1.0, nb - 1.0);
    rep.se_theseus = std::sqrt(var_tv / nb);
    return rep;
}

// ---------------------------------------------------------------------------
// curvature bias
// ---------------------------------------------------------------------------

CurvatureProbe make_quadratic_probe(int dim, uint64_t seed) {
    Rng rng(seed);
    CurvatureProbe probe;
    probe.name = "quadratic";
    const double c = rng.uniform(0.3, 2.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    std::vector<double> b(static_cast<size_t>(dim));
    for (double& v : b) v = rng.normal();
    probe.psi = [c, b](std::span<const double> y) {
        double s = 0.0;
        for (size_t i = 0; i < y.size(); ++i) s += 0.5 * c * y[i] * y[i] + b[i] * y[i];
        return s;
    };
    probe.hessian_opnorm = [c](std::span<const double>) { return std::abs(c); };
    probe.M = std::abs(c);
    probe.T.resize(static_cast<size_t>(dim));
    probe.S.resize(static_cast<size_t>(dim));
    for (double& v : probe.T) v = rng.uniform(-2.0, 2.0);
    for (double& v : probe.S) v = rng.uniform(-2.0, 2.0);
    probe.p = rng.uniform(0.1, 0.9);
    return probe;
}

namespace {

double lse_hessian_opnorm(std::span<const double> y) {
    const size_t d = y.size();
    double mx = y[0];
    for (double v : y) mx = std::max(mx, v);
    std::vector<double> sig(d);
    double z = 0.0;
    for (size_t i = 0; i < d; ++i) {
        sig[i] = std::exp(y[i] - mx);
        z += sig[i];
    }
    for (double& v : sig) v /= z;
    // H = diag(sig) - sig sig^T, PSD; power iteration for the top eigenvalue
    std::vector<double> v(d, 1.0 / std::sqrt(static_cast<double>(d)));
    double lambda = 0.0;
    for (int it = 0; it < 200; ++it) {
        double dotsv = 0.0;
        for (size_t i = 0; i < d; ++i) dotsv += sig[i] * v[i];
        std::vector<double> hv(d);
        double norm = 0.0;
        for (size_t i = 0; i < d; ++i) {
            hv[i] = sig[i] * v[i] - sig[i] * dotsv;
            norm += hv[i] * hv[i];
        }
        norm = std::sqrt(norm);
        if (norm < 1e-300) return 0.0;
        lambda = norm;
        for (size_t i = 0; i < d; ++i) v[i] = hv[i] / norm;
    }
    return lambda;
}

}  // namespace

CurvatureProbe make_lse_probe(int dim, uint64_t seed, int m_samples) {
    Rng rng(seed);
    CurvatureProbe probe;
    probe.name = "log_sum_exp";
    probe.psi = [](std::span<const double> y) {
        double mx = y[0];
        for (double v : y) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : y) z += std::exp(v - mx);
        return mx + std::log(z);
    };
    probe.hessian_opnorm = lse_hessian_opnorm;
    probe.T.resize(static_cast<size_t>(dim));
    probe.S.resize(static_cast<size_t>(dim));
    for (double& v : probe.T) v = rng.uniform(-2.0, 2.0);
    for (double& v : probe.S) v = rng.uniform(-2.0, 2.0);
    probe.p = rng.uniform(0.1, 0.9);
    double m = 0.0;
    std::vector<double> y(static_cast<size_t>(dim));
    for (int k = 0; k < m_samples; ++k) {
        const double theta = static_cast<double>(k) / static_cast<double>(m_samples - 1);
        for (size_t i = 0; i < y.size(); ++i)
            y[i] = (1.0 - theta) * probe.T[i] + theta * probe.S[i];
        m = std::max(m, lse_hessian_opnorm(y));
    }
    probe.M = m;
    return probe;
}

CurvatureResult curvature_bias_check(const CurvatureProbe& probe, int n_segment_samples) {
    if (n_segment_samples < 1) throw ParameterError("curvature_bias_check: n_samples must be >= 1");
    if (probe.T.size() != probe.S.size()) throw DimensionError("curvature_bias_check: T/S size mismatch");
    // validate M on the segment
    std::vector<double> y(probe.T.size());
    for (int k = 0; k < n_segment_samples; ++k) {
        const double theta = n_segment_samples == 1
                                 ? 0.5
                                 : static_cast<double>(k) / static_cast<double>(n_segment_samples - 1);
        for (size_t i = 0; i < y.size(); ++i)
            y[i] = (1.0 - theta) * probe.T[i] + theta * probe.S[i];
        if (probe.hessian_opnorm(y) > probe.M * (1.0 + 1e-9) + 1e-12)
            throw ParameterError("curvature_bias_check: M is not a valid Hessian bound on the segment");
    }
    // exact enumeration over the binary gate
    const double psi_T = probe.psi(probe.T);
    const double psi_S = probe.psi(probe.S);
    const double e_psi = probe.p * psi_S + (1.0 - probe.p) * psi_T;
    std::vector<double> mu(probe.T.size());
    double delta_sq = 0.0;
    for (size_t i = 0; i < mu.size(); ++i) {
        mu[i] = (1.0 - probe.p) * probe.T[i] + probe.p * probe.S[i];
        const double d = probe.S[i] - probe.T[i];
        delta_sq += d * d;
    }
    CurvatureResult out;
    out.bias = std::abs(e_psi - probe.psi(mu));
    out.bound = 0.5 * probe.M * probe.p * (1.0 - probe.p) * delta_sq;
    out.holds = out.bias <= out.bound + 1e-12 * std::max(1.0, out.bound);
    out.dcr_bias = 0.0;  // deterministic path: E[psi(Y)] == psi(E[Y]) identically
    return out;
}

// ---------------------------------------------------------------------------
// loss path
// ---------------------------------------------------------------------------

namespace {

double path_loss(const PathProbe& probe, const Tensor& branch) {
    std::map<int, SitePlan> plans;
    for (int l : probe.model->spec.replaced) {
        if (!probe.model->students.count(l) || l == probe.site_layer) continue;
        SitePlan plan;
        plan.teacher_w = probe.other_sites_alpha;
        plan.student_w = 1.0 - probe.other_sites_alpha;
        plan.eval_teacher = plan.teacher_w > 0.0;
        plans.emplace(l, plan);
    }
    BranchInjection inj;
    inj.layer = probe.site_layer;
    inj.branch = &branch;
    const EvalOutputs out = eval_forward(*probe.model, probe.tokens, plans, false, inj);
    return kernels::cross_entropy_ls(out.logits, probe.labels, probe.label_smoothing);
}

Tensor blend_branch(const Tensor& T, const Tensor& S, double alpha) {
    Tensor y(T.shape);
    for (int64_t i = 0; i < T.size(); ++i)
        y.data[static_cast<size_t>(i)] = (1.0 - alpha) * T.data[static_cast<size_t>(i)] +
                                         alpha * S.data[static_cast<size_t>(i)];
    return y;
}

}  // namespace

PathProbe make_path_probe(const MicroModel& model, int site_layer, const TokenBatch& tokens,
                          const std::vector<int>& labels, double other_sites_alpha,
                          double label_smoothing, int lipschitz_samples, double safety) {
    if (lipschitz_samples < 3) throw ParameterError("make_path_probe: need >= 3 samples");
    PathProbe probe;
    probe.model = &model;
    probe.site_layer = site_layer;
    probe.tokens = tokens;
    probe.labels = labels;
    probe.label_smoothing = label_smoothing;
    probe.other_sites_alpha = other_sites_alpha;
    // capture the branch endpoints at the site
    SitePlan cap;
    cap.student_w = 1.0;
    cap.teacher_w = 0.0;
    cap.eval_teacher = true;
    const EvalOutputs out =
        eval_forward(model, tokens, uniform_plans(model.spec, cap), /*capture_sites=*/true);
    const std::vector<int>& rep = model.spec.replaced;
    const auto it = std::find(rep.begin(), rep.end(), site_layer);
    if (it == rep.end()) throw ParameterError("make_path_probe: layer is not a replaced site");
    const size_t site_idx = static_cast<size_t>(it - rep.begin());
    probe.teacher_branch = out.sites[site_idx].teacher_branch;
    probe.student_branch = out.sites[site_idx].student_branch;
    double d2 = 0.0;
    for (int64_t i = 0; i < probe.teacher_branch.size(); ++i) {
        const double d = probe.student_branch.data[static_cast<size_t>(i)] -
                         probe.teacher_branch.data[static_cast<size_t>(i)];
        d2 += d * d;
    }
    probe.D = std::sqrt(d2);
    // empirical Lipschitz estimate from consecutive difference quotients
    double max_quotient = 0.0;
    double prev = path_loss(probe, probe.teacher_branch);
    for (int k = 1; k < lipschitz_samples; ++k) {
        const double a = static_cast<double>(k) / static_cast<double>(lipschitz_samples - 1);
        const double cur = path_loss(probe, blend_branch(probe.teacher_branch, probe.student_branch, a));
        const double seg = probe.D / static_cast<double>(lipschitz_samples - 1);
        if (seg > 0.0) max_quotient = std::max(max_quotient, std::abs(cur - prev) / seg);
        prev = cur;
    }
    probe.lipschitz = safety * max_quotient;
    return probe;
}

double loss_path_check(const PathProbe& probe, const std::vector<double>& alpha_grid) {
    const double f0 = path_loss(probe, probe.teacher_branch);
    double max_violation = -std::numeric_limits<double>::infinity();
    for (double a : alpha_grid) {
        if (a < 0.0 || a > 1.0) throw ParameterError("loss_path_check: alpha outside [0,1]");
        const double fa = path_loss(probe, blend_branch(probe.teacher_branch, probe.student_branch, a));
        const double violation = std::abs(fa - f0) - probe.lipschitz * a * probe.D;
        max_violation = std::max(max_violation, violation);
    }
    return max_violation;
}

// ---------------------------------------------------------------------------
// suite
// ---------------------------------------------------------------------------

namespace {

std::vector<std::pair<TokenBatch, std::vector<int>>> slice_batches(const Dataset& ds, int count,
                                                                   int batch_size) {
    if (static_cast<int64_t>(count) * batch_size > ds.size())
        throw ParameterError("theory suite: dataset too small for the requested probe batches");
    std::vector<std::pair<TokenBatch, std::vector<int>>> out;
    for (int i = 0; i < count; ++i) {
        TokenBatch tokens(ds.tokens.begin() + static_cast<int64_t>(i) * batch_size,
                          ds.tokens.begin() + static_cast<int64_t>(i + 1) * batch_size);
        std::vector<int> labels(ds.labels.begin() + static_cast<int64_t>(i) * batch_size,
                                ds.labels.begin() + static_cast<int64_t>(i + 1) * batch_size);
        out.emplace_back(std::move(tokens), std::move(labels));
    }
    return out;
}

}  // namespace

TheorySummary run_theory_suite(const RunConfig& cfg, MicroModel& snapshot, const TaskData& data) {
    TheorySummary summary;
    const double snapshot_alpha = dcr_aggr20().value(cfg.snapshot_fraction);

    {  // Proposition 1: variance decomposition on synthetic families
        PropositionRecord rec;
        rec.name = "prop1";
        rec.tolerance = 3.0;  // in standard-error units
        double worst = 0.0;
        std::ostringstream detail;
        bool pass = true;
        int case_id = 0;
        for (AFamily fam : {AFamily::deterministic, AFamily::gaussian, AFamily::heavy_tail}) {
            for (double p : {0.1, 0.3, 0.5, 0.7, 0.9}) {
                const JointVarianceCheck chk =
                    prop1_check(fam, p, cfg.prop1_draws, 8, mix_seed(cfg.seed, 600 + case_id));
                const double sigmas = std::abs(chk.empirical - chk.predicted) / chk.se;
                worst = std::max(worst, sigmas);
                pass = pass && chk.pass;
                detail << family_name(fam) << " p=" << p << ": emp=" << chk.empirical
                       << " pred=" << chk.predicted << " (" << sigmas << " se)\n";
                ++case_id;
            }
        }
        rec.predicted = 0.0;
        rec.observed = worst;  // worst-case deviation in SE units
        rec.pass = pass;
        rec.detail = detail.str();
        summary.propositions.push_back(rec);
    }

    {  // Proposition 2: live-model gate-induced variance at the probe site
        PropositionRecord rec;
        rec.name = "prop2";
        const auto batches = slice_batches(data.train, cfg.prop2_batches, cfg.prop2_batch_size);
        const VarianceReport rep = empirical_gate_variance(
            snapshot, cfg.prop2_site, cfg.prop2_p, batches, cfg.prop2_draws,
            /*gumbel_tau=*/cfg.gumbel_tau, snapshot_alpha, cfg.label_smoothing, mix_seed(cfg.seed, 700));
        rec.predicted = rep.closed_form;
        rec.observed = rep.theseus_gate_component;
        rec.tolerance = 0.10 * rep.closed_form;
        rec.pass = rep.dcr_gate_component == 0.0 && rep.rel_error <= 0.10;
        std::ostringstream detail;
        detail << "site=" << rep.site_layer << " p=" << rep.p << " dcr_component="
               << rep.dcr_gate_component << " theseus_component=" << rep.theseus_gate_component
               << " gumbel_component=" << rep.gumbel_gate_component << " closed_form="
               << rep.closed_form << " rel_error=" << rep.rel_error << " E||a||^2=" << rep.mean_sq_a
               << "\n";
        rec.detail = detail.str();
        summary.propositions.push_back(rec);
    }

    {  // Soft-gate remark: Var[ra] vs p^2 Var[a] + Var(r) E||a||^2
        PropositionRecord rec;
        rec.name = "remark";
        rec.tolerance = 3.0;
        bool pass = true;
        double worst = 0.0;
        std::vector<std::pair<double, double>> var_r_to_emp;
        std::ostringstream detail;
        int case_id = 0;
        for (double tau : {0.1, 0.5, 1.0, 2.0}) {
            const RemarkCheck chk = remark_check(0.5, tau, cfg.prop1_draws, 8,
                                                 mix_seed(cfg.seed, 800 + case_id));
            pass = pass && chk.pass;
            worst = std::max(worst, std::abs(chk.empirical - chk.predicted) / chk.se);
            var_r_to_emp.emplace_back(chk.var_r, chk.empirical);
            detail << "tau=" << tau << ": Var(r)=" << chk.var_r << " emp=" << chk.empirical
                   << " pred=" << chk.predicted << " det_part=" << chk.deterministic_part << "\n";
            ++case_id;
        }
        std::sort(var_r_to_emp.begin(), var_r_to_emp.end());
        for (size_t i = 1; i < var_r_to_emp.size(); ++i)
            if (var_r_to_emp[i].second < var_r_to_emp[i - 1].second) pass = false;
        rec.observed = worst;
        rec.pass = pass;
        rec.detail = detail.str();
        summary.remark = rec;
    }

    {  // Proposition 3: curvature bias bound
        PropositionRecord rec;
        rec.name = "prop3";
        rec.tolerance = 0.0;
        bool pass = true;
        double max_violation = -std::numeric_limits<double>::infinity();
        double max_quad_gap = 0.0;
        for (int i = 0; i < cfg.prop3_probes; ++i) {
            const bool quad = i % 2 == 0;
            const CurvatureProbe probe = quad ? make_quadratic_probe(4, mix_seed(cfg.seed, 900 + i))
                                              : make_lse_probe(4, mix_seed(cfg.seed, 900 + i));
            const CurvatureResult res = curvature_bias_check(probe, 1000);
            pass = pass && res.holds && res.dcr_bias == 0.0;
            max_violation = std::max(max_violation, res.bias - res.bound);
            if (quad) max_quad_gap = std::max(max_quad_gap, std::abs(res.bias - res.bound));
        }
        pass = pass && max_quad_gap <= 1e-12;
        rec.observed = max_violation;
        rec.pass = pass;
        std::ostringstream detail;
        detail << "max(bias-bound)=" << max_violation << " max quadratic |bias-bound|=" << max_quad_gap
               << " dcr_bias=0\n";
        rec.detail = detail.str();
        summary.propositions.push_back(rec);
    }

    {  // Proposition 4: smooth loss path on the live frozen tail
        PropositionRecord rec;
        rec.name = "prop4";
        rec.tolerance = 0.0;
        std::vector<double> grid;
        for (int k = 0; k < cfg.prop4_grid; ++k)
            grid.push_back(static_cast<double>(k) / static_cast<double>(cfg.prop4_grid - 1));
        double max_violation = -std::numeric_limits<double>::infinity();
        const std::vector<int>& sites = snapshot.spec.replaced;
        const int probe_batch = 8;
        for (int i = 0; i < cfg.prop4_pairs; ++i) {
            const int layer = sites[static_cast<size_t>(i) % sites.size()];
            const int64_t start = static_cast<int64_t>(i) * probe_batch;
            if (start + probe_batch > data.val.size())
                throw ParameterError("theory suite: validation set too small for path probes");
            TokenBatch tokens(data.val.tokens.begin() + start,
                              data.val.tokens.begin() + start + probe_batch);
            std::vector<int> labels(data.val.labels.begin() + start,
                                    data.val.labels.begin() + start + probe_batch);
            const PathProbe probe = make_path_probe(snapshot, layer, tokens, labels, snapshot_alpha,
                                                    cfg.label_smoothing);
            max_violation = std::max(max_violation, loss_path_check(probe, grid));
        }
        rec.observed = max_violation;
        rec.pass = max_violation <= 1e-12;
        std::ostringstream detail;
        detail << "max violation over " << cfg.prop4_pairs << " probes x " << cfg.prop4_grid
               << "-point grids: " << max_violation << "\n";
        rec.detail = detail.str();
        summary.propositions.push_back(rec);
    }

    summary.all_pass = summary.remark.pass;
    for (const PropositionRecord& r : summary.propositions) summary.all_pass = summary.all_pass && r.pass;
    return summary;
}

std::string theory_summary_json(const TheorySummary& s) {
    nlohmann::json j;
    auto record = [](const PropositionRecord& r) {
        nlohmann::json o;
        o["name"] = r.name;
        o["predicted"] = r.predicted;
        o["observed"] = r.observed;
        o["tolerance"] = r.tolerance;
        o["pass"] = r.pass;
        o["detail"] = r.detail;
        return o;
    };
    j["propositions"] = nlohmann::json::array();
    for (const PropositionRecord& r : s.propositions) j["propositions"].push_back(record(r));
    j["remark"] = record(s.remark);
    j["all_pass"] = s.all_pass;
    return j.dump(2);
}

void write_theory_summary(const TheorySummary& s, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw StateError("write_theory_summary: cannot open " + path);
    os << theory_summary_json(s) << "\n";
}

std::string format_theory_tables(const TheorySummary& s) {
    std::ostringstream os;
    auto row = [&](const PropositionRecord& r) {
        os << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << "  predicted=" << r.predicted
           << " observed=" << r.observed << " tolerance=" << r.tolerance << "\n";
        os << r.detail;
        os << "----\n";
    };
    for (const PropositionRecord& r : s.propositions) row(r);
    row(s.remark);
    return os.str();
}

}  // namespace dcr
