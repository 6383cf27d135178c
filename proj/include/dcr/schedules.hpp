#pragma once

#include <string>
#include <vector>

#include "dcr/common.hpp"

namespace dcr {

// Deterministic piecewise-linear mapping from training fraction t in [0,1]
// to a gate value in [0,1].
struct GateSchedule {
    std::string name;
    std::vector<std::pair<double, double>> breakpoints;  // (t_fraction, value), t strictly increasing

    double value(double t_fraction) const;
};

// aggr20 handover: teacher weight 1.0 -> 0.3 over the first 10%, 0.3 -> 0.0
// over the next 10%, then 0.
GateSchedule dcr_aggr20();
// student selection probability 0.1 -> 0.7 -> 1.0 on the same phase split.
GateSchedule theseus_aggr20();
GateSchedule constant_schedule(double c);
// a -> b linearly over the first `fraction` of training, then held at b.
GateSchedule linear_schedule(double a, double b, double fraction);
// Parses "dcr_aggr20" | "theseus_aggr20" | "constant:<c>" | "linear:<a>:<b>:<f>".
GateSchedule parse_schedule(const std::string& text);

enum class GateMechanism { deterministic, bernoulli, gumbel };

struct GateDraw {
    GateMechanism mechanism = GateMechanism::deterministic;
    double value = 0.0;       // deterministic: schedule value; bernoulli: 0/1; gumbel: (0,1)
    double temperature = 0.0; // gumbel only
};

// 1 with probability p.
int draw_bernoulli_gate(double p, Rng& rng);

// Binary-concrete relaxation: sigmoid((logit(p) + g) / tau) with g standard
// logistic. Differentiable in p; draws lie strictly inside (0,1).
double draw_gumbel_gate(double p, double tau, Rng& rng);

struct GateConfig {
    GateMechanism mechanism = GateMechanism::deterministic;
    GateSchedule schedule;
    double gumbel_tau = 1.0;
};

// One draw per replaced layer for one step. Deterministic gates share a
// single schedule value across layers; stochastic gates draw independently
// per layer, before the batch is seen.
GateDraw gate_for_step(const GateConfig& cfg, int64_t step, int64_t total_steps, Rng& rng);

}  // namespace dcr
