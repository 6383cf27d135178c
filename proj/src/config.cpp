#include "dcr/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dcr/schedules.hpp"

namespace dcr {

GateSchedule RunConfig::resolved_schedule() const {
    if (schedule != "auto") return parse_schedule(schedule);
    const Method m = parse_method(method);
    switch (m) {
        case Method::dcr:
        case Method::dcr_dfg:
            return dcr_aggr20();
        case Method::theseus_bernoulli:
        case Method::theseus_gumbel:
        case Method::theseus_gumbel_dfg:
            return theseus_aggr20();
        case Method::student_only:
        case Method::kd:
            return constant_schedule(1.0);  // sites always run the student
    }
    return dcr_aggr20();
}

MethodConfig RunConfig::method_config() const {
    MethodConfig mc = MethodConfig::defaults_for(parse_method(method));
    mc.schedule = resolved_schedule();
    mc.dfg_weight = dfg_weight;
    mc.dfg_schedule = dcr_aggr20();
    mc.kd_temperature = kd_temperature;
    mc.kd_weight = kd_weight;
    mc.gumbel_tau = gumbel_tau;
    mc.label_smoothing = label_smoothing;
    mc.per_example_gates = per_example_gates;
    return mc;
}

namespace {

int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    if (v.empty() || v == "none") return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int(key, item));
    return out;
}

std::string join_ints(const std::vector<int>& xs) {
    std::ostringstream os;
    for (size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
    return os.str();
}

}  // namespace

void apply_override(RunConfig& c, const std::string& key, const std::string& v) {
    if (key == "depth") c.model.depth = parse_int(key, v);
    else if (key == "width") c.model.width = parse_int(key, v);
    else if (key == "heads") c.model.heads = parse_int(key, v);
    else if (key == "seq_len") c.model.seq_len = parse_int(key, v);
    else if (key == "vocab") c.model.vocab = parse_int(key, v);
    else if (key == "num_classes") c.model.num_classes = parse_int(key, v);
    else if (key == "mlp_mult") c.model.mlp_mult = parse_int(key, v);
    else if (key == "replaced") c.model.replaced = parse_int_list(key, v);
    else if (key == "train_size") c.train_size = parse_int(key, v);
    else if (key == "val_size") c.val_size = parse_int(key, v);
    else if (key == "task_rule") {
        if (v != "marker" && v != "pair")
            throw ConfigError("config: key 'task_rule' expects marker|pair, got '" + v + "'");
        c.task_rule = v;
    }
    else if (key == "method") { parse_method(v); c.method = v; }
    else if (key == "schedule") {
        if (v != "auto") parse_schedule(v);  // validate eagerly
        c.schedule = v;
    }
    else if (key == "dfg_weight") c.dfg_weight = parse_double(key, v);
    else if (key == "kd_temperature") c.kd_temperature = parse_double(key, v);
    else if (key == "kd_weight") c.kd_weight = parse_double(key, v);
    else if (key == "gumbel_tau") c.gumbel_tau = parse_double(key, v);
    else if (key == "per_example_gates") c.per_example_gates = parse_bool(key, v);
    else if (key == "epochs") c.epochs = parse_int(key, v);
    else if (key == "batch_size") c.batch_size = parse_int(key, v);
    else if (key == "lr") c.lr = parse_double(key, v);
    else if (key == "min_lr") c.min_lr = parse_double(key, v);
    else if (key == "weight_decay") c.weight_decay = parse_double(key, v);
    else if (key == "clip_norm") c.clip_norm = parse_double(key, v);
    else if (key == "label_smoothing") c.label_smoothing = parse_double(key, v);
    else if (key == "beta1") c.beta1 = parse_double(key, v);
    else if (key == "beta2") c.beta2 = parse_double(key, v);
    else if (key == "adam_eps") c.adam_eps = parse_double(key, v);
    else if (key == "teacher_epochs") c.teacher_epochs = parse_int(key, v);
    else if (key == "teacher_lr") c.teacher_lr = parse_double(key, v);
    else if (key == "teacher_target_acc") c.teacher_target_acc = parse_double(key, v);
    else if (key == "eval_points") c.eval_points = parse_int(key, v);
    else if (key == "threshold_fraction") c.threshold_fraction = parse_double(key, v);
    else if (key == "compare_methods") {
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) parse_method(item);  // validate eagerly
        c.compare_methods = v;
    }
    else if (key == "prop1_draws") c.prop1_draws = parse_i64(key, v);
    else if (key == "prop2_batches") c.prop2_batches = parse_int(key, v);
    else if (key == "prop2_draws") c.prop2_draws = parse_int(key, v);
    else if (key == "prop2_batch_size") c.prop2_batch_size = parse_int(key, v);
    else if (key == "prop2_site") c.prop2_site = parse_int(key, v);
    else if (key == "prop2_p") c.prop2_p = parse_double(key, v);
    else if (key == "prop3_probes") c.prop3_probes = parse_int(key, v);
    else if (key == "prop4_pairs") c.prop4_pairs = parse_int(key, v);
    else if (key == "prop4_grid") c.prop4_grid = parse_int(key, v);
    else if (key == "snapshot_fraction") c.snapshot_fraction = parse_double(key, v);
    else if (key == "seed") c.seed = parse_u64(key, v);
    else if (key == "teacher") c.teacher_path = v;
    else if (key == "out") c.out_dir = v;
    else throw ConfigError("config: unknown key '" + key + "'");
}

namespace {

void apply_line(RunConfig& cfg, const std::string& raw, const std::string& where) {
    std::string line = raw;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    // trim
    const auto notspace = [](unsigned char ch) { return !std::isspace(ch); };
    line.erase(line.begin(), std::find_if(line.begin(), line.end(), notspace));
    line.erase(std::find_if(line.rbegin(), line.rend(), notspace).base(), line.end());
    if (line.empty()) return;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config: malformed line '" + raw + "' in " + where + " (expected key=value)");
    apply_override(cfg, line.substr(0, eq), line.substr(eq + 1));
}

}  // namespace

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw ConfigError("config: cannot open '" + path + "'");
        std::string line;
        while (std::getline(is, line)) apply_line(cfg, line, path);
    }
    for (const std::string& ov : overrides) apply_line(cfg, ov, "--set override");
    cfg.model.validate();
    if (cfg.batch_size < 1 || cfg.epochs < 1) throw ConfigError("config: epochs and batch_size must be >= 1");
    if (cfg.train_size < cfg.batch_size) throw ConfigError("config: train_size smaller than batch_size");
    return cfg;
}

RunConfig config_from_overrides(const std::vector<std::string>& overrides) {
    return load_config("", overrides);
}

std::string render_config(const RunConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "depth=" << c.model.depth << "\n";
    os << "width=" << c.model.width << "\n";
    os << "heads=" << c.model.heads << "\n";
    os << "seq_len=" << c.model.seq_len << "\n";
    os << "vocab=" << c.model.vocab << "\n";
    os << "num_classes=" << c.model.num_classes << "\n";
    os << "mlp_mult=" << c.model.mlp_mult << "\n";
    os << "replaced=" << join_ints(c.model.replaced) << "\n";
    os << "train_size=" << c.train_size << "\n";
    os << "val_size=" << c.val_size << "\n";
    os << "task_rule=" << c.task_rule << "\n";
    os << "method=" << c.method << "\n";
    os << "schedule=" << c.schedule << "\n";
    os << "dfg_weight=" << c.dfg_weight << "\n";
    os << "kd_temperature=" << c.kd_temperature << "\n";
    os << "kd_weight=" << c.kd_weight << "\n";
    os << "gumbel_tau=" << c.gumbel_tau << "\n";
    os << "per_example_gates=" << (c.per_example_gates ? "true" : "false") << "\n";
    os << "epochs=" << c.epochs << "\n";
    os << "batch_size=" << c.batch_size << "\n";
    os << "lr=" << c.lr << "\n";
    os << "min_lr=" << c.min_lr << "\n";
    os << "weight_decay=" << c.weight_decay << "\n";
    os << "clip_norm=" << c.clip_norm << "\n";
    os << "label_smoothing=" << c.label_smoothing << "\n";
    os << "beta1=" << c.beta1 << "\n";
    os << "beta2=" << c.beta2 << "\n";
    os << "adam_eps=" << c.adam_eps << "\n";
    os << "teacher_epochs=" << c.teacher_epochs << "\n";
    os << "teacher_lr=" << c.teacher_lr << "\n";
    os << "teacher_target_acc=" << c.teacher_target_acc << "\n";
    os << "eval_points=" << c.eval_points << "\n";
    os << "threshold_fraction=" << c.threshold_fraction << "\n";
    os << "compare_methods=" << c.compare_methods << "\n";
    os << "prop1_draws=" << c.prop1_draws << "\n";
    os << "prop2_batches=" << c.prop2_batches << "\n";
    os << "prop2_draws=" << c.prop2_draws << "\n";
    os << "prop2_batch_size=" << c.prop2_batch_size << "\n";
    os << "prop2_site=" << c.prop2_site << "\n";
    os << "prop2_p=" << c.prop2_p << "\n";
    os << "prop3_probes=" << c.prop3_probes << "\n";
    os << "prop4_pairs=" << c.prop4_pairs << "\n";
    os << "prop4_grid=" << c.prop4_grid << "\n";
    os << "snapshot_fraction=" << c.snapshot_fraction << "\n";
    os << "seed=" << c.seed << "\n";
    if (!c.teacher_path.empty()) os << "teacher=" << c.teacher_path << "\n";
    if (!c.out_dir.empty()) os << "out=" << c.out_dir << "\n";
    return os.str();
}

void write_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw StateError("config: cannot write '" + path + "'");
    os << render_config(cfg);
}

}  // namespace dcr
