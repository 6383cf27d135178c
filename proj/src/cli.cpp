#include "dcr/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "CLI11.hpp"
#include "dcr/config.hpp"
#include "dcr/theory.hpp"
#include "dcr/train.hpp"

namespace dcr {

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "run configuration file (key=value lines)");
    cmd->add_option("--set", args.overrides, "override, key=value (repeatable)")->take_all();
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "run seed");
}

RunConfig resolve_config(const CommonArgs& args, bool require_out) {
    RunConfig cfg = load_config(args.config_path, args.overrides);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
    if (require_out && cfg.out_dir.empty())
        throw ConfigError("an output directory is required (--out or config key 'out')");
    return cfg;
}

MicroModel obtain_teacher(const RunConfig& cfg, const TaskData& data, const std::string& cache_dir) {
    if (!cfg.teacher_path.empty()) return load_checkpoint(cfg.teacher_path);
    std::cout << "no teacher checkpoint given; training the reference teacher..." << std::endl;
    RunConfig tcfg = cfg;
    tcfg.out_dir = cache_dir;
    MicroModel teacher;
    const RunRecord rec = train_teacher(tcfg, data, teacher);
    std::cout << "teacher ready: val accuracy " << rec.teacher_val_acc << std::endl;
    return teacher;
}

int cmd_train(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args, /*require_out=*/true);
    if (cfg.teacher_path.empty())
        throw ConfigError("config key 'teacher' (checkpoint path) is required for train");
    const RunRecord rec = run_experiment(cfg);
    std::cout << render_summary(rec);
    if (rec.diverged) {
        std::cout << "run aborted: " << rec.divergence_note << std::endl;
        return 1;
    }
    return 0;
}

int cmd_make_teacher(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args, /*require_out=*/true);
    const TaskData data = make_synthetic_task(task_spec_from(cfg));
    MicroModel teacher;
    const RunRecord rec = train_teacher(cfg, data, teacher);
    std::cout << "teacher val accuracy: " << rec.teacher_val_acc << "\n";
    std::cout << "checkpoint: " << (fs::path(cfg.out_dir) / "teacher.ckpt").string() << "\n";
    return 0;
}

int cmd_verify_theory(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args, /*require_out=*/true);
    fs::create_directories(cfg.out_dir);
    write_config(cfg, (fs::path(cfg.out_dir) / "config_resolved.txt").string());
    const TaskData data = make_synthetic_task(task_spec_from(cfg));
    const MicroModel teacher = obtain_teacher(cfg, data, (fs::path(cfg.out_dir) / "teacher").string());
    std::cout << "building the mid-replacement snapshot..." << std::endl;
    MicroModel snapshot = train_replacement_snapshot(cfg, data, teacher, cfg.snapshot_fraction);
    std::cout << "running the verification suite..." << std::endl;
    const TheorySummary summary = run_theory_suite(cfg, snapshot, data);
    write_theory_summary(summary, (fs::path(cfg.out_dir) / "theory_summary.json").string());
    std::cout << format_theory_tables(summary);
    if (!summary.all_pass) {
        std::cout << "failed:";
        for (const PropositionRecord& r : summary.propositions)
            if (!r.pass) std::cout << " " << r.name;
        if (!summary.remark.pass) std::cout << " remark";
        std::cout << std::endl;
        return 1;
    }
    std::cout << "all theory checks passed" << std::endl;
    return 0;
}

int cmd_compare(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args, /*require_out=*/true);
    fs::create_directories(cfg.out_dir);
    const TaskData data = make_synthetic_task(task_spec_from(cfg));
    const MicroModel teacher = obtain_teacher(cfg, data, (fs::path(cfg.out_dir) / "teacher").string());

    std::vector<std::string> methods;
    {
        std::stringstream ss(cfg.compare_methods);
        std::string item;
        while (std::getline(ss, item, ',')) methods.push_back(item);
    }
    struct Row {
        std::string method;
        int64_t steps = -1;
        double final_acc = 0.0;
        double min_cos = 0.0;
    };
    std::vector<Row> rows;
    for (const std::string& method : methods) {
        RunConfig mc = cfg;
        mc.method = method;
        mc.schedule = "auto";
        mc.out_dir = (fs::path(cfg.out_dir) / method).string();
        std::cout << "running " << method << "..." << std::endl;
        const RunRecord rec = run_experiment(mc, data, teacher);
        Row row;
        row.method = method;
        row.steps = rec.steps_to_threshold;
        row.final_acc = rec.final_val_acc;
        row.min_cos = rec.final_cos_sims.empty()
                          ? 0.0
                          : *std::min_element(rec.final_cos_sims.begin(), rec.final_cos_sims.end());
        rows.push_back(row);
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        const int64_t sa = a.steps < 0 ? std::numeric_limits<int64_t>::max() : a.steps;
        const int64_t sb = b.steps < 0 ? std::numeric_limits<int64_t>::max() : b.steps;
        return sa < sb;
    });
    std::ofstream csv(fs::path(cfg.out_dir) / "compare.csv");
    csv << "method,steps_to_threshold,final_accuracy,min_final_cos\n";
    std::cout << "\nmethod                steps-to-threshold  final-acc  min-final-cos\n";
    for (const Row& r : rows) {
        std::ostringstream line;
        line.setf(std::ios::left);
        line.width(22);
        line << r.method;
        line << (r.steps < 0 ? std::string("not reached") : std::to_string(r.steps)) << "  "
             << r.final_acc << "  " << r.min_cos;
        std::cout << line.str() << "\n";
        csv << r.method << "," << r.steps << "," << r.final_acc << "," << r.min_cos << "\n";
    }
    return 0;
}

int cmd_export(const CommonArgs& args) {
    if (args.out_dir.empty()) throw ConfigError("export: --out must name an existing run directory");
    std::string format = "summary";
    for (const std::string& ov : args.overrides) {
        const size_t eq = ov.find('=');
        if (eq == std::string::npos) throw ConfigError("export: malformed --set '" + ov + "'");
        const std::string key = ov.substr(0, eq);
        if (key == "format") format = ov.substr(eq + 1);
        else throw ConfigError("export: unknown key '" + key + "'");
    }
    const fs::path dir(args.out_dir);
    std::string file;
    if (format == "summary") file = "summary.txt";
    else if (format == "metrics") file = "metrics.csv";
    else if (format == "config") file = "config_resolved.txt";
    else if (format == "theory") file = "theory_summary.json";
    else throw ConfigError("export: unknown format '" + format + "'");
    std::ifstream is(dir / file);
    if (!is) throw ConfigError("export: cannot open " + (dir / file).string());
    std::cout << is.rdbuf();
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"deterministic continuous replacement lab"};
    app.require_subcommand(1);

    CommonArgs train_args, teacher_args, verify_args, compare_args, export_args;
    CLI::App* train = app.add_subcommand("train", "run one replacement training experiment");
    add_common(train, train_args);
    CLI::App* teacher = app.add_subcommand("make-teacher", "train and freeze the reference teacher");
    add_common(teacher, teacher_args);
    CLI::App* verify = app.add_subcommand("verify-theory", "run the proposition checks");
    add_common(verify, verify_args);
    CLI::App* compare = app.add_subcommand("compare", "run the method grid with matched seeds");
    add_common(compare, compare_args);
    CLI::App* exp = app.add_subcommand("export", "print artifacts from a run directory");
    add_common(exp, export_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (train->parsed()) return cmd_train(train_args);
        if (teacher->parsed()) return cmd_make_teacher(teacher_args);
        if (verify->parsed()) return cmd_verify_theory(verify_args);
        if (compare->parsed()) return cmd_compare(compare_args);
        if (exp->parsed()) return cmd_export(export_args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 2;
}

}  // namespace dcr
