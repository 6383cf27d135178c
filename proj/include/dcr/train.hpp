#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dcr/config.hpp"
#include "dcr/engine.hpp"
#include "dcr/model.hpp"

namespace dcr {

// Decoupled weight decay (applied multiplicatively before the Adam update),
// bias-corrected moments, global-norm gradient clipping. Parameters whose
// grad buffer is absent are skipped, matching the usual optimizer contract.
class AdamW {
public:
    AdamW(std::vector<Tensor*> params, double beta1, double beta2, double eps, double weight_decay);

    // Clips the global grad norm to clip_norm (<= 0 disables), then updates.
    // Returns the pre-clip global norm. A slot's step count advances only
    // when that parameter carries a gradient.
    double step(double lr, double clip_norm);
    void zero_grad();

private:
    struct Slot {
        Tensor* p;
        std::vector<double> m, v;
        int64_t t = 0;
    };
    std::vector<Slot> slots_;
    double beta1_, beta2_, eps_, weight_decay_;
};

// Single-tensor AdamW update; the class above loops over this.
void adamw_update(Tensor& p, int64_t t, double lr, double beta1, double beta2, double eps,
                  double weight_decay, std::vector<double>& m, std::vector<double>& v);

// base_lr at step 0, min_lr at total_steps, half-cosine between.
double cosine_lr(int64_t step, int64_t total_steps, double base_lr, double min_lr);

// Batch mean of per-example cosine similarity between flattened branch
// outputs. Zero-vector branches contribute 0.
double interface_cosine_similarity(const Tensor& t_branch, const Tensor& s_branch);

struct SyntheticTaskSpec {
    uint64_t seed = 1;
    int seq_len = 16;
    int vocab = 9;        // content tokens 0..vocab-2, marker = vocab-1
    int num_classes = 8;
    int train_size = 4096;
    int val_size = 512;
    // marker: class = token after the unique marker
    // pair:   class = (token after the marker + first token) mod num_classes
    std::string rule = "marker";
};

struct Dataset {
    TokenBatch tokens;
    std::vector<int> labels;
    int64_t size() const { return static_cast<int64_t>(tokens.size()); }
};

struct TaskData {
    Dataset train, val;
};

// Sequence classification where the class is the token that follows a unique
// marker token, so cross-position attention is required. Train and validation
// sets are disjoint; regeneration from the same seed is bit-identical.
TaskData make_synthetic_task(const SyntheticTaskSpec& spec);
SyntheticTaskSpec task_spec_from(const RunConfig& cfg);

struct MetricsRow {
    int64_t step = 0;
    int epoch = 0;
    double t_fraction = 0.0;
    std::vector<double> gates;     // per replaced site
    double train_loss = 0.0;       // total loss on the step's batch
    double task_loss = 0.0;
    double dfg_loss = 0.0;
    double val_accuracy = 0.0;         // live blended model
    double val_accuracy_student = 0.0; // all-student path (threshold metric)
    std::vector<double> cos_sims;  // per replaced site
    double wall_time_s = 0.0;      // persisted separately (timing.csv)
};

struct RunRecord {
    RunConfig config;
    std::vector<MetricsRow> rows;
    double teacher_val_acc = 0.0;
    double final_val_acc = 0.0;          // student path
    int64_t steps_to_threshold = -1;     // -1: never reached
    std::vector<double> final_cos_sims;
    int64_t teacher_branch_evals_last_step = 0;
    bool diverged = false;
    std::string divergence_note;
};

// accuracy of the blended forward at fixed student weight
double evaluate_accuracy(const MicroModel& m, const Dataset& data, double student_w,
                         int64_t batch = 64);

// Trains the reference teacher on the synthetic task (all parameters
// trainable, no students) and freezes it. Persists checkpoint + metrics when
// cfg.out_dir is set.
RunRecord train_teacher(const RunConfig& cfg, const TaskData& data, MicroModel& out_model);

// Full replacement run per Algorithm 1 for the configured method. Persists
// metrics.csv / timing.csv / summary.txt / config_resolved.txt / final.ckpt
// under cfg.out_dir when set.
RunRecord run_experiment(const RunConfig& cfg);
RunRecord run_experiment(const RunConfig& cfg, const TaskData& data, const MicroModel& teacher);

// Runs DCR+DFG from the cold start for `fraction` of the configured steps and
// returns the part-trained model (a frozen mid-replacement snapshot).
MicroModel train_replacement_snapshot(const RunConfig& cfg, const TaskData& data,
                                      const MicroModel& teacher, double fraction);

void write_metrics_csv(const RunRecord& rec, const std::string& path);
void write_timing_csv(const RunRecord& rec, const std::string& path);
void write_summary(const RunRecord& rec, const std::string& path);
std::string render_summary(const RunRecord& rec);

}  // namespace dcr
