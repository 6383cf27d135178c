#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dcr/config.hpp"
#include "dcr/model.hpp"
#include "dcr/train.hpp"

namespace dcr {

// ---------------------------------------------------------------------------
// closed forms
// ---------------------------------------------------------------------------

// Var[z a] = p Var[a] + p(1-p) ||E a||^2 for a hard gate z ~ Bernoulli(p)
// independent of a. var_a is the trace of the covariance of a.
double theseus_variance_closed_form(double p, std::span<const double> mean_a, double var_a);

// Var[r a] = p^2 Var[a] + Var(r) E||a||^2 for a soft gate with E r = p.
double soft_gate_variance_closed_form(double p, double var_r, double mean_sq_a, double var_a);

// ---------------------------------------------------------------------------
// synthetic gradient families (Monte-Carlo checks of Prop 1 / the Remark)
// ---------------------------------------------------------------------------

enum class AFamily { deterministic, gaussian, heavy_tail };
std::string family_name(AFamily f);

struct MomentEstimate {
    std::vector<double> mean;
    double trace_var = 0.0;   // sum of per-coordinate variances
    double mean_sq = 0.0;     // E||a||^2
};

struct JointVarianceCheck {
    AFamily family;
    double p = 0.0;
    double empirical = 0.0;   // trace variance of the gated gradient
    double predicted = 0.0;   // closed form from the sample moments of a
    double se = 0.0;          // Monte-Carlo standard error of the empirical trace
    bool pass = false;        // |empirical - predicted| <= 3 se
};

JointVarianceCheck prop1_check(AFamily family, double p, int64_t draws, int dim, uint64_t seed);

struct RemarkCheck {
    double tau = 0.0;
    double p = 0.0;
    double mean_r = 0.0;
    double var_r = 0.0;
    double empirical = 0.0;   // Var[r a]
    double predicted = 0.0;   // p^2 Var[a] + Var(r) E||a||^2
    double deterministic_part = 0.0;  // p^2 Var[a]
    double se = 0.0;
    bool pass = false;
};

RemarkCheck remark_check(double p, double tau, int64_t draws, int dim, uint64_t seed);

// ---------------------------------------------------------------------------
// live-model gate variance (Prop 2)
// ---------------------------------------------------------------------------

struct GradSample {
    std::string method;
    GateDraw draw;
    std::vector<double> grad;  // flat gradient over the site's student params
    int batch_id = 0;
};

struct VarianceReport {
    int site_layer = 0;
    double p = 0.0;
    int batches = 0;
    int draws = 0;
    double mean_sq_a = 0.0;        // E||a(S_l; X)||^2 from student-only probes
    double dcr_gate_component = 0.0;
    double theseus_gate_component = 0.0;
    double gumbel_gate_component = 0.0;
    double closed_form = 0.0;      // p(1-p) E||a||^2
    double theseus_minus_dcr = 0.0;
    double rel_error = 0.0;        // |theseus - closed| / closed
    double theseus_total_var = 0.0;  // across batches and draws jointly
    double dcr_total_var = 0.0;
    double se_theseus = 0.0;
};

// One task-loss gradient over the student parameters at `site_layer`, with
// the given plan at that site and deterministic plans elsewhere.
GradSample grad_sample(MicroModel& model, const TokenBatch& tokens, const std::vector<int>& labels,
                       int site_layer, const SitePlan& site_plan, double other_sites_alpha,
                       double label_smoothing, const std::string& method, const GateDraw& draw);

// Gates only `site_layer` stochastically (Prop 2 analyses one site against a
// fixed tail); other replaced sites stay on the deterministic snapshot blend.
VarianceReport empirical_gate_variance(MicroModel& model, int site_layer, double p,
                                       const std::vector<std::pair<TokenBatch, std::vector<int>>>& batches,
                                       int draws_per_batch, double gumbel_tau, double other_sites_alpha,
                                       double label_smoothing, uint64_t seed);

// ---------------------------------------------------------------------------
// curvature bias (Prop 3)
// ---------------------------------------------------------------------------

struct CurvatureProbe {
    std::string name;
    std::function<double(std::span<const double>)> psi;
    // operator norm of the Hessian at a point; used to validate M
    std::function<double(std::span<const double>)> hessian_opnorm;
    std::vector<double> T, S;
    double p = 0.5;
    double M = 0.0;
};

struct CurvatureResult {
    double bias = 0.0;   // |E[psi(Y)] - psi(mu)|, E taken exactly over the binary gate
    double bound = 0.0;  // (M/2) p(1-p) ||Delta||^2
    bool holds = false;
    double dcr_bias = 0.0;  // identically 0: the deterministic path has no mixing bias
};

// psi(y) = 0.5 c ||y||^2 + b.y  (isotropic quadratic; the bound is tight)
CurvatureProbe make_quadratic_probe(int dim, uint64_t seed);
// psi = log-sum-exp; M estimated as the max Hessian norm over segment samples
CurvatureProbe make_lse_probe(int dim, uint64_t seed, int m_samples = 1000);

CurvatureResult curvature_bias_check(const CurvatureProbe& probe, int n_segment_samples);

// ---------------------------------------------------------------------------
// loss path (Prop 4)
// ---------------------------------------------------------------------------

struct PathProbe {
    const MicroModel* model = nullptr;
    int site_layer = 0;
    TokenBatch tokens;
    std::vector<int> labels;
    double label_smoothing = 0.1;
    double other_sites_alpha = 0.0;
    Tensor teacher_branch, student_branch;  // path endpoints y(0), y(1)
    double lipschitz = 0.0;                 // safety-factored empirical estimate
    double D = 0.0;                         // >= ||S - T||
};

PathProbe make_path_probe(const MicroModel& model, int site_layer, const TokenBatch& tokens,
                          const std::vector<int>& labels, double other_sites_alpha,
                          double label_smoothing, int lipschitz_samples = 101, double safety = 2.0);

// Loss along the injected blend path; returns max over the grid of
// |f(y(a)) - f(y(0))| - L_y a D  (<= 0 everywhere means the bound holds).
double loss_path_check(const PathProbe& probe, const std::vector<double>& alpha_grid);

// ---------------------------------------------------------------------------
// verification suite
// ---------------------------------------------------------------------------

struct PropositionRecord {
    std::string name;
    double predicted = 0.0;
    double observed = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::string detail;
};

struct TheorySummary {
    std::vector<PropositionRecord> propositions;  // prop1..prop4
    PropositionRecord remark;
    bool all_pass = false;
};

TheorySummary run_theory_suite(const RunConfig& cfg, MicroModel& snapshot, const TaskData& data);
std::string theory_summary_json(const TheorySummary& s);
void write_theory_summary(const TheorySummary& s, const std::string& path);
std::string format_theory_tables(const TheorySummary& s);

}  // namespace dcr
