#pragma once

#include <string>
#include <vector>

#include "dcr/engine.hpp"
#include "dcr/model.hpp"

namespace dcr {

// Flat key=value run configuration. Defaults mirror the reference training
// recipe (AdamW, base lr 5e-4 cosine-annealed to 1e-6, weight decay 0.05,
// clip 1.0, label smoothing 0.1) plus desk-scale model/task sizes.
struct RunConfig {
    // model
    ModelSpec model;

    // synthetic task
    int train_size = 4096;
    int val_size = 512;
    std::string task_rule = "marker";

    // method
    std::string method = "dcr";
    std::string schedule = "auto";  // auto -> aggr20 family matching the method
    double dfg_weight = 1.0;
    double kd_temperature = 4.0;
    double kd_weight = 1.0;
    double gumbel_tau = 1.0;
    bool per_example_gates = false;

    // optimization; lr is raised above the reference recipe's finetuning
    // value because the cold-start students train from scratch here
    int epochs = 6;
    int batch_size = 32;
    double lr = 3e-3;
    double min_lr = 1e-6;
    double weight_decay = 0.05;
    double clip_norm = 1.0;
    double label_smoothing = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    // teacher pretraining (make-teacher)
    int teacher_epochs = 24;
    double teacher_lr = 1e-3;
    double teacher_target_acc = 0.97;

    // evaluation / summary
    int eval_points = 50;             // metric rows per run
    double threshold_fraction = 0.9;  // of teacher validation accuracy
    std::string compare_methods = "dcr_dfg,dcr,theseus_bernoulli,student_only";

    // theory-lab sizes (acceptance defaults)
    int64_t prop1_draws = 100000;
    int prop2_batches = 64;
    int prop2_draws = 32;
    int prop2_batch_size = 16;
    int prop2_site = 2;
    double prop2_p = 0.5;
    int prop3_probes = 100;
    int prop4_pairs = 20;
    int prop4_grid = 21;
    double snapshot_fraction = 0.15;

    uint64_t seed = 1;
    std::string teacher_path;
    std::string out_dir;

    MethodConfig method_config() const;
    GateSchedule resolved_schedule() const;
    int64_t steps_per_epoch() const { return train_size / batch_size; }
    int64_t total_steps() const { return static_cast<int64_t>(epochs) * steps_per_epoch(); }
};

// Defaults first, file second, overrides last. Unknown keys and type
// mismatches raise ConfigError naming the offending key.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);
RunConfig config_from_overrides(const std::vector<std::string>& overrides);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
std::string render_config(const RunConfig& cfg);  // re-parseable key=value text
void write_config(const RunConfig& cfg, const std::string& path);

}  // namespace dcr
