#include "dcr/schedules.hpp"

#include <cmath>
#include <sstream>

namespace dcr {

double GateSchedule::value(double t) const {
    if (t < 0.0 || t > 1.0)
        throw ParameterError("schedule_value: t_fraction " + std::to_string(t) + " outside [0,1]");
    if (breakpoints.empty()) throw StateError("schedule_value: no breakpoints");
    if (t <= breakpoints.front().first) return breakpoints.front().second;
    for (size_t i = 1; i < breakpoints.size(); ++i) {
        const auto& [t1, v1] = breakpoints[i];
        if (t == t1) return v1;  // exact at breakpoints
        if (t < t1) {
            const auto& [t0, v0] = breakpoints[i - 1];
            return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
        }
    }
    return breakpoints.back().second;
}

GateSchedule dcr_aggr20() {
    return {"dcr_aggr20", {{0.0, 1.0}, {0.10, 0.3}, {0.20, 0.0}, {1.0, 0.0}}};
}

GateSchedule theseus_aggr20() {
    return {"theseus_aggr20", {{0.0, 0.1}, {0.10, 0.7}, {0.20, 1.0}, {1.0, 1.0}}};
}

GateSchedule constant_schedule(double c) {
    if (c < 0.0 || c > 1.0) throw ParameterError("constant schedule: value outside [0,1]");
    std::ostringstream name;
    name << "constant:" << c;
    return {name.str(), {{0.0, c}, {1.0, c}}};
}

GateSchedule linear_schedule(double a, double b, double fraction) {
    if (a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0)
        throw ParameterError("linear schedule: endpoints outside [0,1]");
    if (fraction <= 0.0 || fraction > 1.0) throw ParameterError("linear schedule: fraction outside (0,1]");
    std::ostringstream name;
    name << "linear:" << a << ":" << b << ":" << fraction;
    if (fraction >= 1.0) return {name.str(), {{0.0, a}, {1.0, b}}};
    return {name.str(), {{0.0, a}, {fraction, b}, {1.0, b}}};
}

GateSchedule parse_schedule(const std::string& text) {
    if (text == "dcr_aggr20") return dcr_aggr20();
    if (text == "theseus_aggr20") return theseus_aggr20();
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ':')) parts.push_back(item);
    auto num = [&](const std::string& s) {
        try {
            size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("schedule: bad number '" + s + "' in '" + text + "'");
        }
    };
    if (parts.size() == 2 && parts[0] == "constant") return constant_schedule(num(parts[1]));
    if (parts.size() == 4 && parts[0] == "linear")
        return linear_schedule(num(parts[1]), num(parts[2]), num(parts[3]));
    throw ConfigError("schedule: unknown specification '" + text + "'");
}

int draw_bernoulli_gate(double p, Rng& rng) {
    if (p < 0.0 || p > 1.0) throw ParameterError("draw_bernoulli_gate: p outside [0,1]");
    return rng.bernoulli(p);
}

double draw_gumbel_gate(double p, double tau, Rng& rng) {
    if (p <= 0.0 || p >= 1.0) throw ParameterError("draw_gumbel_gate: p must lie strictly in (0,1)");
    if (tau <= 0.0) throw ParameterError("draw_gumbel_gate: tau must be > 0");
    const double u = rng.uniform_open();
    const double logistic = std::log(u) - std::log1p(-u);  // difference of two Gumbels
    const double logit_p = std::log(p) - std::log1p(-p);
    return 1.0 / (1.0 + std::exp(-(logit_p + logistic) / tau));
}

GateDraw gate_for_step(const GateConfig& cfg, int64_t step, int64_t total_steps, Rng& rng) {
    if (total_steps <= 0 || step < 0 || step > total_steps)
        throw ParameterError("gate_for_step: step outside [0,total_steps]");
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    const double sched = cfg.schedule.value(t);
    GateDraw draw;
    draw.mechanism = cfg.mechanism;
    switch (cfg.mechanism) {
        case GateMechanism::deterministic:
            draw.value = sched;
            break;
        case GateMechanism::bernoulli:
            draw.value = static_cast<double>(draw_bernoulli_gate(sched, rng));
            break;
        case GateMechanism::gumbel:
            // the relaxation degenerates at the schedule endpoints; report
            // those draws as deterministic so gumbel draws stay inside (0,1)
            if (sched <= 0.0 || sched >= 1.0) {
                draw.mechanism = GateMechanism::deterministic;
                draw.value = sched;
            } else {
                draw.temperature = cfg.gumbel_tau;
                draw.value = draw_gumbel_gate(sched, cfg.gumbel_tau, rng);
            }
            break;
    }
    return draw;
}

}  // namespace dcr
