#include "dcr/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace dcr {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void adamw_update(Tensor& p, int64_t t, double lr, double beta1, double beta2, double eps,
                  double weight_decay, std::vector<double>& m, std::vector<double>& v) {
    if (!p.grad) return;
    const std::vector<double>& g = *p.grad;
    if (m.size() != g.size() || v.size() != g.size())
        throw DimensionError("adamw_update: state size mismatch");
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < g.size(); ++i) {
        p.data[i] *= 1.0 - lr * weight_decay;
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

AdamW::AdamW(std::vector<Tensor*> params, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (Tensor* p : params) {
        Slot s;
        s.p = p;
        s.m.assign(p->data.size(), 0.0);
        s.v.assign(p->data.size(), 0.0);
        slots_.push_back(std::move(s));
    }
}

double AdamW::step(double lr, double clip_norm) {
    double sq = 0.0;
    for (const Slot& s : slots_) {
        if (!s.p->grad) continue;
        for (double g : *s.p->grad) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("AdamW: non-finite gradient norm");
    if (clip_norm > 0.0 && norm > clip_norm) {
        const double s = clip_norm / norm;
        for (Slot& slot : slots_) {
            if (!slot.p->grad) continue;
            for (double& g : *slot.p->grad) g *= s;
        }
    }
    for (Slot& s : slots_) {
        if (!s.p->grad) continue;
        ++s.t;
        adamw_update(*s.p, s.t, lr, beta1_, beta2_, eps_, weight_decay_, s.m, s.v);
    }
    return norm;
}

void AdamW::zero_grad() {
    for (Slot& s : slots_) s.p->zero_grad();
}

double cosine_lr(int64_t step, int64_t total_steps, double base_lr, double min_lr) {
    if (total_steps <= 0 || step < 0 || step > total_steps)
        throw ParameterError("cosine_lr: step outside [0,total_steps]");
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(kPi * frac));
}

double interface_cosine_similarity(const Tensor& t_branch, const Tensor& s_branch) {
    if (!same_shape(t_branch.shape, s_branch.shape))
        throw DimensionError("interface_cosine_similarity: shape mismatch");
    const int64_t B = t_branch.shape[0];
    const int64_t inner = t_branch.size() / B;
    double total = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        std::span<const double> tb(t_branch.data.data() + b * inner, static_cast<size_t>(inner));
        std::span<const double> sb(s_branch.data.data() + b * inner, static_cast<size_t>(inner));
        const double nt = kernels::l2_norm(tb);
        const double ns = kernels::l2_norm(sb);
        total += (nt == 0.0 || ns == 0.0) ? 0.0 : kernels::dot(tb, sb) / (nt * ns);
    }
    return total / static_cast<double>(B);
}

// ---------------------------------------------------------------------------
// synthetic task
// ---------------------------------------------------------------------------

namespace {

uint64_t fnv1a(const std::vector<int>& seq) {
    uint64_t h = 1469598103934665603ull;
    for (int t : seq) {
        h ^= static_cast<uint64_t>(t) + 0x9e37;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

SyntheticTaskSpec task_spec_from(const RunConfig& cfg) {
    SyntheticTaskSpec s;
    s.seed = mix_seed(cfg.seed, 1);
    s.seq_len = cfg.model.seq_len;
    s.vocab = cfg.model.vocab;
    s.num_classes = cfg.model.num_classes;
    s.train_size = cfg.train_size;
    s.val_size = cfg.val_size;
    s.rule = cfg.task_rule;
    return s;
}

TaskData make_synthetic_task(const SyntheticTaskSpec& spec) {
    if (spec.train_size < 1 || spec.val_size < 1)
        throw ParameterError("make_synthetic_task: split sizes must be >= 1");
    if (spec.seq_len < 3) throw ParameterError("make_synthetic_task: seq_len must be >= 3");
    if (spec.vocab < 3) throw ParameterError("make_synthetic_task: vocab must be >= 3");
    if (spec.rule != "marker" && spec.rule != "pair")
        throw ParameterError("make_synthetic_task: unknown rule '" + spec.rule + "'");
    const bool pair_rule = spec.rule == "pair";
    const int marker = spec.vocab - 1;
    const int content = spec.vocab - 1;  // tokens 0..vocab-2
    Rng rng(spec.seed);
    std::unordered_set<uint64_t> seen;
    TaskData data;
    auto gen_one = [&](Dataset& ds) {
        for (;;) {
            std::vector<int> seq(static_cast<size_t>(spec.seq_len));
            for (int& t : seq) t = static_cast<int>(rng.next_u64() % static_cast<uint64_t>(content));
            // keep position 0 for the pair rule's second operand
            const int lo = pair_rule ? 1 : 0;
            const int j =
                lo + static_cast<int>(rng.next_u64() % static_cast<uint64_t>(spec.seq_len - 1 - lo));
            seq[static_cast<size_t>(j)] = marker;
            const uint64_t h = fnv1a(seq);
            if (seen.count(h)) continue;  // keep splits disjoint
            seen.insert(h);
            const int succ = seq[static_cast<size_t>(j + 1)];
            const int label = pair_rule ? (succ + seq[0]) % spec.num_classes
                                        : succ % spec.num_classes;
            ds.tokens.push_back(std::move(seq));
            ds.labels.push_back(label);
            return;
        }
    };
    for (int i = 0; i < spec.train_size; ++i) gen_one(data.train);
    for (int i = 0; i < spec.val_size; ++i) gen_one(data.val);
    return data;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

double evaluate_accuracy(const MicroModel& m, const Dataset& data, double student_w, int64_t batch) {
    if (data.size() == 0) throw ParameterError("evaluate_accuracy: empty dataset");
    SitePlan plan;
    plan.student_w = student_w;
    plan.teacher_w = 1.0 - student_w;
    plan.eval_teacher = plan.teacher_w > 0.0;
    const std::map<int, SitePlan> plans = uniform_plans(m.spec, plan);
    int64_t correct = 0;
    for (int64_t start = 0; start < data.size(); start += batch) {
        const int64_t stop = std::min(data.size(), start + batch);
        TokenBatch chunk(data.tokens.begin() + start, data.tokens.begin() + stop);
        const EvalOutputs out = eval_forward(m, chunk, plans);
        const int64_t C = out.logits.shape[1];
        for (int64_t b = 0; b < stop - start; ++b) {
            int64_t arg = 0;
            for (int64_t c = 1; c < C; ++c)
                if (out.logits.data[static_cast<size_t>(b * C + c)] >
                    out.logits.data[static_cast<size_t>(b * C + arg)])
                    arg = c;
            if (static_cast<int>(arg) == data.labels[static_cast<size_t>(start + b)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

// live blended student weight for validation of a method at fraction t
double live_student_weight(const MethodConfig& mc, double t) {
    switch (mc.method) {
        case Method::dcr:
        case Method::dcr_dfg:
            return 1.0 - mc.schedule.value(t);  // schedule carries alpha
        case Method::theseus_bernoulli:
        case Method::theseus_gumbel:
        case Method::theseus_gumbel_dfg:
            return mc.schedule.value(t);  // schedule carries p; mean path
        case Method::student_only:
        case Method::kd:
            return 1.0;
    }
    return 1.0;
}

std::vector<double> site_cosines(const MicroModel& m, const Dataset& val, int64_t probe_size) {
    const int64_t n = std::min<int64_t>(probe_size, val.size());
    TokenBatch chunk(val.tokens.begin(), val.tokens.begin() + n);
    SitePlan plan;  // capture both branches
    plan.student_w = 1.0;
    plan.teacher_w = 0.0;
    plan.eval_teacher = true;
    const EvalOutputs out = eval_forward(m, chunk, uniform_plans(m.spec, plan), /*capture_sites=*/true);
    std::vector<double> sims;
    for (const BlockOutputs& site : out.sites)
        sims.push_back(interface_cosine_similarity(site.teacher_branch, site.student_branch));
    return sims;
}

void shuffle_indices(std::vector<int64_t>& idx, Rng& rng) {
    for (int64_t i = static_cast<int64_t>(idx.size()) - 1; i > 0; --i) {
        const int64_t j = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(i + 1));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
}

void persist_run(const RunRecord& rec, const MicroModel* final_model) {
    if (rec.config.out_dir.empty()) return;
    fs::create_directories(rec.config.out_dir);
    const fs::path dir(rec.config.out_dir);
    write_config(rec.config, (dir / "config_resolved.txt").string());
    write_metrics_csv(rec, (dir / "metrics.csv").string());
    write_timing_csv(rec, (dir / "timing.csv").string());
    write_summary(rec, (dir / "summary.txt").string());
    if (final_model) save_checkpoint(*final_model, (dir / "final.ckpt").string());
}

}  // namespace

// ---------------------------------------------------------------------------
// teacher pretraining
// ---------------------------------------------------------------------------

RunRecord train_teacher(const RunConfig& cfg, const TaskData& data, MicroModel& model) {
    RunRecord rec;
    rec.config = cfg;
    model = MicroModel::init(cfg.model, mix_seed(cfg.seed, 2));
    model.set_all_trainable();
    AdamW opt(model.backbone_params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    const int64_t steps_per_epoch = cfg.steps_per_epoch();
    const int64_t total = static_cast<int64_t>(cfg.teacher_epochs) * steps_per_epoch;
    const int64_t eval_every = std::max<int64_t>(1, total / cfg.eval_points);
    std::vector<int64_t> order(static_cast<size_t>(data.train.size()));
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    Rng shuffle_rng(mix_seed(cfg.seed, 3));
    const std::map<int, SitePlan> no_plans;  // no students installed

    for (int64_t s = 0; s < total; ++s) {
        if (s % steps_per_epoch == 0) shuffle_indices(order, shuffle_rng);
        TokenBatch batch;
        std::vector<int> labels;
        for (int64_t k = 0; k < cfg.batch_size; ++k) {
            const int64_t i = order[static_cast<size_t>((s % steps_per_epoch) * cfg.batch_size + k)];
            batch.push_back(data.train.tokens[static_cast<size_t>(i)]);
            labels.push_back(data.train.labels[static_cast<size_t>(i)]);
        }
        const auto t0 = std::chrono::steady_clock::now();
        Tape tape;
        TapeForward fwd = tape_forward(tape, model, batch, no_plans);
        const Var loss = tape.cross_entropy_ls(fwd.logits, labels, cfg.label_smoothing);
        const double loss_val = tape.val(loss).item();
        if (!std::isfinite(loss_val)) throw NumericError("train_teacher: non-finite loss");
        tape.backward(loss);
        opt.step(cosine_lr(s, total, cfg.teacher_lr, cfg.min_lr), cfg.clip_norm);
        opt.zero_grad();
        const auto t1 = std::chrono::steady_clock::now();

        const bool last = s + 1 == total;
        if ((s + 1) % eval_every == 0 || last) {
            MetricsRow row;
            row.step = s + 1;
            row.epoch = static_cast<int>(s / steps_per_epoch);
            row.t_fraction = static_cast<double>(s) / static_cast<double>(total);
            row.train_loss = loss_val;
            row.task_loss = loss_val;
            row.val_accuracy = evaluate_accuracy(model, data.val, 0.0);
            row.val_accuracy_student = row.val_accuracy;
            row.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
            rec.rows.push_back(row);
            if (row.val_accuracy >= cfg.teacher_target_acc) break;
        }
    }
    rec.final_val_acc = rec.rows.empty() ? 0.0 : rec.rows.back().val_accuracy;
    rec.teacher_val_acc = rec.final_val_acc;
    for (Tensor* p : model.backbone_params()) {
        p->requires_grad = false;
        p->grad.reset();
    }
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        save_checkpoint(model, (fs::path(cfg.out_dir) / "teacher.ckpt").string());
        persist_run(rec, nullptr);
    }
    return rec;
}

// ---------------------------------------------------------------------------
// replacement run
// ---------------------------------------------------------------------------

namespace {

struct ReplacementLoop {
    const RunConfig& cfg;
    const TaskData& data;
    MicroModel model;  // teacher backbone + cold students
    MethodConfig mc;
    double teacher_acc = 0.0;

    ReplacementLoop(const RunConfig& cfg_in, const TaskData& data_in, const MicroModel& teacher)
        : cfg(cfg_in), data(data_in), model(teacher) {
        model.spec.replaced = cfg.model.replaced;  // the run config owns the replaced set
        model.spec.validate();
        if (model.spec.replaced.empty())
            throw ConfigError("replacement run: the model spec names no replaced layers");
        mc = cfg.method_config();
        model.add_students(mix_seed(cfg.seed, 4));
        model.set_students_only_trainable();
        teacher_acc = evaluate_accuracy(model, data.val, 0.0);
    }

    RunRecord run(int64_t step_limit) {
        RunRecord rec;
        rec.config = cfg;
        rec.teacher_val_acc = teacher_acc;
        AdamW opt(model.student_params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        const int64_t steps_per_epoch = cfg.steps_per_epoch();
        const int64_t total = cfg.total_steps();
        const int64_t limit = step_limit > 0 ? std::min(step_limit, total) : total;
        const int64_t eval_every = std::max<int64_t>(1, total / cfg.eval_points);
        std::vector<int64_t> order(static_cast<size_t>(data.train.size()));
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
        Rng shuffle_rng(mix_seed(cfg.seed, 3));
        Rng gate_rng(mix_seed(cfg.seed, 5));
        const double threshold = cfg.threshold_fraction * teacher_acc;

        for (int64_t s = 0; s < limit; ++s) {
            if (s % steps_per_epoch == 0) shuffle_indices(order, shuffle_rng);
            TokenBatch batch;
            std::vector<int> labels;
            for (int64_t k = 0; k < cfg.batch_size; ++k) {
                const int64_t i = order[static_cast<size_t>((s % steps_per_epoch) * cfg.batch_size + k)];
                batch.push_back(data.train.tokens[static_cast<size_t>(i)]);
                labels.push_back(data.train.labels[static_cast<size_t>(i)]);
            }
            const double t = static_cast<double>(s) / static_cast<double>(total);
            const auto t0 = std::chrono::steady_clock::now();
            StepOutput step;
            try {
                step = training_step(model, batch, labels, mc, t, gate_rng);
            } catch (const NumericError& e) {
                rec.diverged = true;
                rec.divergence_note = e.what();
                break;
            }
            opt.step(cosine_lr(s, total, cfg.lr, cfg.min_lr), cfg.clip_norm);
            opt.zero_grad();
            const auto t1 = std::chrono::steady_clock::now();

            const bool last = s + 1 == limit;
            if ((s + 1) % eval_every == 0 || last) {
                MetricsRow row;
                row.step = s + 1;
                row.epoch = static_cast<int>(s / steps_per_epoch);
                row.t_fraction = t;
                for (const SiteStepInfo& si : step.sites) row.gates.push_back(si.draw.value);
                row.train_loss = step.total_loss;
                row.task_loss = step.task_loss;
                row.dfg_loss = step.dfg_loss;
                row.val_accuracy = evaluate_accuracy(model, data.val, live_student_weight(mc, t));
                row.val_accuracy_student = evaluate_accuracy(model, data.val, 1.0);
                row.cos_sims = site_cosines(model, data.val, 128);
                row.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
                rec.rows.push_back(std::move(row));
                if (rec.steps_to_threshold < 0 && rec.rows.back().val_accuracy_student >= threshold)
                    rec.steps_to_threshold = s + 1;
                rec.teacher_branch_evals_last_step = step.teacher_branch_evals;
            }
        }
        if (!rec.rows.empty()) {
            rec.final_val_acc = rec.rows.back().val_accuracy_student;
            rec.final_cos_sims = rec.rows.back().cos_sims;
        }
        return rec;
    }
};

}  // namespace

RunRecord run_experiment(const RunConfig& cfg, const TaskData& data, const MicroModel& teacher) {
    ReplacementLoop loop(cfg, data, teacher);
    RunRecord rec = loop.run(0);
    persist_run(rec, &loop.model);
    return rec;
}

RunRecord run_experiment(const RunConfig& cfg) {
    if (cfg.teacher_path.empty())
        throw ConfigError("run_experiment: config key 'teacher' (checkpoint path) is required");
    const MicroModel teacher = load_checkpoint(cfg.teacher_path);
    if (teacher.spec.depth != cfg.model.depth || teacher.spec.width != cfg.model.width ||
        teacher.spec.heads != cfg.model.heads || teacher.spec.seq_len != cfg.model.seq_len ||
        teacher.spec.vocab != cfg.model.vocab || teacher.spec.num_classes != cfg.model.num_classes ||
        teacher.spec.mlp_mult != cfg.model.mlp_mult)
        throw ConfigError("run_experiment: teacher checkpoint does not match the configured model spec");
    const TaskData data = make_synthetic_task(task_spec_from(cfg));
    return run_experiment(cfg, data, teacher);
}

MicroModel train_replacement_snapshot(const RunConfig& cfg, const TaskData& data,
                                      const MicroModel& teacher, double fraction) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw ParameterError("train_replacement_snapshot: fraction outside (0,1]");
    RunConfig snap_cfg = cfg;
    snap_cfg.method = "dcr_dfg";
    snap_cfg.schedule = "auto";
    snap_cfg.out_dir.clear();
    ReplacementLoop loop(snap_cfg, data, teacher);
    const int64_t limit = std::max<int64_t>(1, static_cast<int64_t>(fraction * static_cast<double>(cfg.total_steps())));
    loop.run(limit);
    return std::move(loop.model);
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {

std::string fmt9(double v) {
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
}

}  // namespace

void write_metrics_csv(const RunRecord& rec, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw StateError("write_metrics_csv: cannot open " + path);
    os << "step,epoch,t_fraction";
    for (int l : rec.config.model.replaced) os << ",gate_b" << l;
    os << ",train_loss,task_loss,dfg_loss,val_accuracy,val_accuracy_student";
    for (int l : rec.config.model.replaced) os << ",cos_b" << l;
    os << "\n";
    const size_t nsites = rec.config.model.replaced.size();
    for (const MetricsRow& r : rec.rows) {
        os << r.step << "," << r.epoch << "," << fmt9(r.t_fraction);
        for (size_t i = 0; i < nsites; ++i) os << "," << (i < r.gates.size() ? fmt9(r.gates[i]) : "0");
        os << "," << fmt9(r.train_loss) << "," << fmt9(r.task_loss) << "," << fmt9(r.dfg_loss) << ","
           << fmt9(r.val_accuracy) << "," << fmt9(r.val_accuracy_student);
        for (size_t i = 0; i < nsites; ++i) os << "," << (i < r.cos_sims.size() ? fmt9(r.cos_sims[i]) : "0");
        os << "\n";
    }
    if (rec.diverged) os << "# run aborted: " << rec.divergence_note << "\n";
}

void write_timing_csv(const RunRecord& rec, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw StateError("write_timing_csv: cannot open " + path);
    os << "step,wall_time_s\n";
    for (const MetricsRow& r : rec.rows) os << r.step << "," << fmt9(r.wall_time_s) << "\n";
}

std::string render_summary(const RunRecord& rec) {
    std::ostringstream os;
    os << "method=" << rec.config.method << "\n";
    os << "seed=" << rec.config.seed << "\n";
    os << "steps_to_threshold=" << rec.steps_to_threshold << "\n";
    os << "final_accuracy=" << fmt9(rec.final_val_acc) << "\n";
    os << "teacher_accuracy=" << fmt9(rec.teacher_val_acc) << "\n";
    os << "final_cos_sims=";
    for (size_t i = 0; i < rec.final_cos_sims.size(); ++i)
        os << (i ? "," : "") << fmt9(rec.final_cos_sims[i]);
    os << "\n";
    os << "diverged=" << (rec.diverged ? "true" : "false") << "\n";
    return os.str();
}

void write_summary(const RunRecord& rec, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw StateError("write_summary: cannot open " + path);
    os << render_summary(rec);
}

}  // namespace dcr
