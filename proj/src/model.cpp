#include "dcr/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dcr {

bool ModelSpec::is_replaced(int layer) const {
    return std::find(replaced.begin(), replaced.end(), layer) != replaced.end();
}

void ModelSpec::validate() const {
    if (depth < 1 || width < 1 || heads < 1 || seq_len < 1 || vocab < 2 || num_classes < 2 ||
        mlp_mult < 1)
        throw ConfigError("model spec: all dimensions must be positive");
    if (width % heads != 0) throw ConfigError("model spec: width must be divisible by heads");
    for (int l : replaced)
        if (l < 1 || l > depth)
            throw ConfigError("model spec: replaced layer " + std::to_string(l) + " outside 1.." +
                              std::to_string(depth));
}

std::vector<Tensor*> AttentionParams::tensors() { return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}; }
std::vector<const Tensor*> AttentionParams::tensors() const {
    return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo};
}

std::vector<Tensor*> BlockParams::tensors() {
    std::vector<Tensor*> out = {&ln1_g, &ln1_b};
    for (Tensor* t : attn.tensors()) out.push_back(t);
    for (Tensor* t : {&ln2_g, &ln2_b, &w1, &b1, &w2, &b2}) out.push_back(t);
    return out;
}

Tensor kaiming_init(Shape shape, int64_t fan_in, Rng& rng) {
    if (fan_in < 1) throw ParameterError("kaiming_init: fan_in must be >= 1");
    Tensor t(std::move(shape));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = std * rng.normal();
    return t;
}

namespace {

AttentionParams init_attention(int d, Rng& rng) {
    AttentionParams p;
    p.wq = kaiming_init({d, d}, d, rng);
    p.wk = kaiming_init({d, d}, d, rng);
    p.wv = kaiming_init({d, d}, d, rng);
    p.wo = kaiming_init({d, d}, d, rng);
    p.bq = Tensor({d});
    p.bk = Tensor({d});
    p.bv = Tensor({d});
    p.bo = Tensor({d});
    return p;
}

Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }

}  // namespace

MicroModel MicroModel::init(const ModelSpec& spec, uint64_t seed) {
    spec.validate();
    MicroModel m;
    m.spec = spec;
    Rng rng(mix_seed(seed, 101));
    const int d = spec.width;
    m.tok_embed = Tensor({spec.vocab, d});
    for (double& v : m.tok_embed.data) v = 0.02 * rng.normal();
    m.pos_embed = Tensor({spec.seq_len, d});
    for (double& v : m.pos_embed.data) v = 0.02 * rng.normal();
    for (int l = 0; l < spec.depth; ++l) {
        BlockParams b;
        b.ln1_g = ones({d});
        b.ln1_b = Tensor({d});
        b.attn = init_attention(d, rng);
        b.ln2_g = ones({d});
        b.ln2_b = Tensor({d});
        b.w1 = kaiming_init({d, spec.mlp_hidden()}, d, rng);
        b.b1 = Tensor({spec.mlp_hidden()});
        b.w2 = kaiming_init({spec.mlp_hidden(), d}, spec.mlp_hidden(), rng);
        b.b2 = Tensor({d});
        m.blocks.push_back(std::move(b));
    }
    m.final_ln_g = ones({d});
    m.final_ln_b = Tensor({d});
    m.head_w = kaiming_init({d, spec.num_classes}, d, rng);
    m.head_b = Tensor({spec.num_classes});
    return m;
}

void MicroModel::add_students(uint64_t seed) {
    students.clear();
    for (int l : spec.replaced) {
        Rng rng(mix_seed(seed, 9000 + static_cast<uint64_t>(l)));
        students.emplace(l, init_attention(spec.width, rng));
    }
}

std::vector<Tensor*> MicroModel::backbone_params() {
    std::vector<Tensor*> out = {&tok_embed, &pos_embed};
    for (BlockParams& b : blocks)
        for (Tensor* t : b.tensors()) out.push_back(t);
    for (Tensor* t : {&final_ln_g, &final_ln_b, &head_w, &head_b}) out.push_back(t);
    return out;
}

std::vector<Tensor*> MicroModel::student_params() {
    std::vector<Tensor*> out;
    for (auto& [l, p] : students)
        for (Tensor* t : p.tensors()) out.push_back(t);
    return out;
}

std::vector<Tensor*> MicroModel::student_params_at(int layer) {
    auto it = students.find(layer);
    if (it == students.end()) throw StateError("no student at layer " + std::to_string(layer));
    return it->second.tensors();
}

std::vector<Tensor*> MicroModel::trainable_params() {
    std::vector<Tensor*> out;
    for (Tensor* t : backbone_params())
        if (t->requires_grad) out.push_back(t);
    for (Tensor* t : student_params())
        if (t->requires_grad) out.push_back(t);
    return out;
}

void MicroModel::set_all_trainable() {
    for (Tensor* t : backbone_params()) t->requires_grad = true;
    for (Tensor* t : student_params()) t->requires_grad = true;
}

void MicroModel::set_students_only_trainable() {
    for (Tensor* t : backbone_params()) {
        t->requires_grad = false;
        t->grad.reset();
    }
    for (Tensor* t : student_params()) t->requires_grad = true;
}

SitePlan site_plan_for(BlockMode mode, double gate_value) {
    if (gate_value < 0.0 || gate_value > 1.0)
        throw ParameterError("block_forward: gate value outside [0,1]");
    SitePlan plan;
    switch (mode) {
        case BlockMode::teacher_only:
            plan.teacher_w = 1.0;
            plan.student_w = 0.0;
            break;
        case BlockMode::student_only:
            plan.teacher_w = 0.0;
            plan.student_w = 1.0;
            plan.eval_teacher = false;
            break;
        case BlockMode::dcr_blend:  // gate value is the teacher weight alpha
            plan.teacher_w = gate_value;
            plan.student_w = 1.0 - gate_value;
            plan.eval_teacher = gate_value > 0.0;
            break;
        case BlockMode::theseus_hard:   // gate value is the drawn student gate z
        case BlockMode::theseus_soft: { // gate value is the drawn soft gate r
            plan.student_w = gate_value;
            plan.teacher_w = 1.0 - gate_value;
            plan.eval_teacher = plan.teacher_w > 0.0;
            break;
        }
    }
    return plan;
}

std::map<int, SitePlan> uniform_plans(const ModelSpec& spec, const SitePlan& plan) {
    std::map<int, SitePlan> plans;
    for (int l : spec.replaced) plans.emplace(l, plan);
    return plans;
}

namespace {

std::vector<int64_t> flatten_tokens(const ModelSpec& spec, const TokenBatch& tokens) {
    if (tokens.empty()) throw ParameterError("forward: empty batch");
    std::vector<int64_t> idx;
    idx.reserve(tokens.size() * static_cast<size_t>(spec.seq_len));
    for (const auto& seq : tokens) {
        if (static_cast<int>(seq.size()) != spec.seq_len)
            throw DimensionError("forward: sequence length " + std::to_string(seq.size()) + " != " +
                                 std::to_string(spec.seq_len));
        for (int t : seq) {
            if (t < 0 || t >= spec.vocab) throw ParameterError("forward: token id out of range");
            idx.push_back(t);
        }
    }
    return idx;
}

const SitePlan& plan_for_layer(const std::map<int, SitePlan>& plans, int layer) {
    auto it = plans.find(layer);
    if (it == plans.end())
        throw ConfigError("forward: missing gate for replaced layer " + std::to_string(layer));
    return it->second;
}

// A layer acts as a replacement site only once a student is installed; a
// model without students is the unmodified pretrained forward.
bool is_site(const MicroModel& m, int layer) {
    return m.spec.is_replaced(layer) && m.students.count(layer) > 0;
}

}  // namespace

Tensor attention_forward(const AttentionParams& p, const Tensor& h, int heads) {
    const int64_t d = p.wq.shape[0];
    if (h.shape.back() != d) throw DimensionError("attention_forward: input width mismatch");
    if (d % heads != 0) throw DimensionError("attention_forward: width not divisible by heads");
    const int64_t dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tensor q = kernels::bias_add(kernels::matmul(h, p.wq), p.bq);
    const Tensor k = kernels::bias_add(kernels::matmul(h, p.wk), p.bk);
    const Tensor v = kernels::bias_add(kernels::matmul(h, p.wv), p.bv);
    Tensor acc;
    for (int i = 0; i < heads; ++i) {
        const Tensor qh = kernels::slice_last(q, i * dh, dh);
        const Tensor kh = kernels::slice_last(k, i * dh, dh);
        const Tensor vh = kernels::slice_last(v, i * dh, dh);
        const Tensor scores = kernels::scale(kernels::matmul(qh, kernels::transpose(kh)), inv_sqrt_dh);
        const Tensor ctx = kernels::matmul(kernels::softmax_rows(scores), vh);
        const Tensor partial = kernels::matmul(ctx, kernels::slice_rows(p.wo, i * dh, dh));
        acc = (i == 0) ? partial : kernels::add(acc, partial);
    }
    return kernels::bias_add(acc, p.bo);
}

namespace {

Var attention_tape(Tape& tape, AttentionParams& p, Var h, int heads) {
    const int64_t d = p.wq.shape[0];
    const int64_t dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const Var q = tape.bias_add(tape.matmul(h, tape.leaf(p.wq)), tape.leaf(p.bq));
    const Var k = tape.bias_add(tape.matmul(h, tape.leaf(p.wk)), tape.leaf(p.bk));
    const Var v = tape.bias_add(tape.matmul(h, tape.leaf(p.wv)), tape.leaf(p.bv));
    Var acc;
    const Var wo = tape.leaf(p.wo);
    for (int i = 0; i < heads; ++i) {
        const Var qh = tape.slice_last(q, i * dh, dh);
        const Var kh = tape.slice_last(k, i * dh, dh);
        const Var vh = tape.slice_last(v, i * dh, dh);
        const Var scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh);
        const Var ctx = tape.matmul(tape.softmax_rows(scores), vh);
        const Var partial = tape.matmul(ctx, tape.slice_rows(wo, i * dh, dh));
        acc = (i == 0) ? partial : tape.add(acc, partial);
    }
    return tape.bias_add(acc, tape.leaf(p.bo));
}

constexpr double kLnEps = 1e-5;

}  // namespace

EvalOutputs eval_forward(const MicroModel& m, const TokenBatch& tokens,
                         const std::map<int, SitePlan>& plans, bool capture_sites,
                         const BranchInjection& inject) {
    const ModelSpec& spec = m.spec;
    const std::vector<int64_t> idx = flatten_tokens(spec, tokens);
    const int64_t B = static_cast<int64_t>(tokens.size());
    EvalOutputs out;
    Tensor x = kernels::bcast0_add(
        kernels::reshape(kernels::gather_rows(m.tok_embed, idx), {B, spec.seq_len, spec.width}),
        m.pos_embed);
    for (int l = 1; l <= spec.depth; ++l) {
        const BlockParams& blk = m.blocks[static_cast<size_t>(l - 1)];
        const Tensor h = kernels::layer_norm(x, blk.ln1_g, blk.ln1_b, kLnEps);
        Tensor branch;
        BlockOutputs site;
        const bool replaced = is_site(m, l);
        if (inject.layer == l) {
            if (!inject.branch) throw ParameterError("forward: injection without branch tensor");
            branch = *inject.branch;
        } else if (replaced) {
            const SitePlan& plan = plan_for_layer(plans, l);
            const AttentionParams& student = m.students.at(l);
            Tensor t_branch, s_branch;
            if (plan.eval_teacher || plan.teacher_w > 0.0) {
                t_branch = attention_forward(blk.attn, h, spec.heads);
                out.teacher_branch_evals += 1;
            }
            if (plan.student_w > 0.0 || !plan.per_row_student_w.empty() || capture_sites)
                s_branch = attention_forward(student, h, spec.heads);
            if (!plan.per_row_student_w.empty()) {
                branch = Tensor(t_branch.shape);
                const int64_t inner = t_branch.size() / B;
                for (int64_t r = 0; r < B; ++r) {
                    const double w = plan.per_row_student_w[static_cast<size_t>(r)];
                    for (int64_t i = 0; i < inner; ++i)
                        branch.data[r * inner + i] =
                            (1.0 - w) * t_branch.data[r * inner + i] + w * s_branch.data[r * inner + i];
                }
            } else if (plan.student_w == 1.0 && plan.teacher_w == 0.0) {
                branch = s_branch;
            } else if (plan.teacher_w == 1.0 && plan.student_w == 0.0) {
                branch = t_branch;
            } else {
                branch = kernels::add(kernels::scale(t_branch, plan.teacher_w),
                                      kernels::scale(s_branch, plan.student_w));
            }
            if (capture_sites) {
                site.residual_in = x;
                site.normalized = h;
                site.teacher_branch = t_branch;
                site.student_branch = s_branch;
            }
        } else {
            branch = attention_forward(blk.attn, h, spec.heads);
        }
        x = kernels::add(x, branch);
        if (capture_sites && replaced && inject.layer != l) {
            site.residual_out = x;
            out.sites.push_back(std::move(site));
        }
        const Tensor h2 = kernels::layer_norm(x, blk.ln2_g, blk.ln2_b, kLnEps);
        const Tensor mid = kernels::gelu(kernels::bias_add(kernels::matmul(h2, blk.w1), blk.b1));
        const Tensor mlp = kernels::bias_add(kernels::matmul(mid, blk.w2), blk.b2);
        x = kernels::add(x, mlp);
    }
    const Tensor hf = kernels::layer_norm(x, m.final_ln_g, m.final_ln_b, kLnEps);
    const Tensor pooled = kernels::mean_axis1(hf);
    out.logits = kernels::bias_add(kernels::matmul(pooled, m.head_w), m.head_b);
    if (!out.logits.all_finite()) throw NumericError("eval_forward: non-finite logits");
    return out;
}

TapeForward tape_forward(Tape& tape, MicroModel& m, const TokenBatch& tokens,
                         const std::map<int, SitePlan>& plans) {
    const ModelSpec& spec = m.spec;
    const std::vector<int64_t> idx = flatten_tokens(spec, tokens);
    const int64_t B = static_cast<int64_t>(tokens.size());
    TapeForward out;
    Var x = tape.bcast0_add(
        tape.reshape(tape.gather_rows(tape.leaf(m.tok_embed), idx), {B, spec.seq_len, spec.width}),
        tape.leaf(m.pos_embed));
    for (int l = 1; l <= spec.depth; ++l) {
        BlockParams& blk = m.blocks[static_cast<size_t>(l - 1)];
        const Var h = tape.layer_norm(x, tape.leaf(blk.ln1_g), tape.leaf(blk.ln1_b), kLnEps);
        Var branch;
        if (is_site(m, l)) {
            const SitePlan& plan = plan_for_layer(plans, l);
            AttentionParams& student = m.students.at(l);
            TapeSite site;
            site.layer = l;
            site.normalized = h;
            Var t_const;
            if (plan.eval_teacher || plan.teacher_w > 0.0) {
                // teacher runs through the value kernels: no gradient path
                site.teacher_branch = attention_forward(blk.attn, tape.val(h), spec.heads);
                site.teacher_evaluated = true;
                out.teacher_branch_evals += 1;
                t_const = tape.constant(site.teacher_branch);
            }
            const Var s = attention_tape(tape, student, h, spec.heads);
            site.student_branch = s;
            site.teacher_const = t_const;
            if (!plan.per_row_student_w.empty()) {
                branch = tape.row_blend(t_const, s, plan.per_row_student_w);
            } else if (plan.student_w == 1.0 && plan.teacher_w == 0.0) {
                branch = s;
            } else if (plan.teacher_w == 1.0 && plan.student_w == 0.0) {
                branch = t_const;
            } else {
                branch = tape.add(tape.scale(t_const, plan.teacher_w), tape.scale(s, plan.student_w));
            }
            site.blended_branch = branch;
            out.sites.push_back(std::move(site));
        } else {
            branch = attention_tape(tape, blk.attn, h, spec.heads);
        }
        x = tape.add(x, branch);
        const Var h2 = tape.layer_norm(x, tape.leaf(blk.ln2_g), tape.leaf(blk.ln2_b), kLnEps);
        const Var mid = tape.gelu(tape.bias_add(tape.matmul(h2, tape.leaf(blk.w1)), tape.leaf(blk.b1)));
        const Var mlp = tape.bias_add(tape.matmul(mid, tape.leaf(blk.w2)), tape.leaf(blk.b2));
        x = tape.add(x, mlp);
    }
    const Var hf = tape.layer_norm(x, tape.leaf(m.final_ln_g), tape.leaf(m.final_ln_b), kLnEps);
    const Var pooled = tape.mean_axis1(hf);
    out.logits = tape.bias_add(tape.matmul(pooled, tape.leaf(m.head_w)), tape.leaf(m.head_b));
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint io: plain text, one "name rank dims" line then one data line
// ---------------------------------------------------------------------------

namespace {

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    os << name << " " << t.rank();
    for (int64_t d : t.shape) os << " " << d;
    os << "\n";
    os.precision(17);
    for (int64_t i = 0; i < t.size(); ++i) os << (i ? " " : "") << t.data[static_cast<size_t>(i)];
    os << "\n";
}

std::map<std::string, const Tensor*> named_tensors(const MicroModel& m) {
    std::map<std::string, const Tensor*> out;
    out["tok_embed"] = &m.tok_embed;
    out["pos_embed"] = &m.pos_embed;
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        const std::string pre = "block" + std::to_string(i + 1) + ".";
        const BlockParams& b = m.blocks[i];
        out[pre + "ln1.g"] = &b.ln1_g;
        out[pre + "ln1.b"] = &b.ln1_b;
        const AttentionParams& a = b.attn;
        out[pre + "attn.wq"] = &a.wq;
        out[pre + "attn.bq"] = &a.bq;
        out[pre + "attn.wk"] = &a.wk;
        out[pre + "attn.bk"] = &a.bk;
        out[pre + "attn.wv"] = &a.wv;
        out[pre + "attn.bv"] = &a.bv;
        out[pre + "attn.wo"] = &a.wo;
        out[pre + "attn.bo"] = &a.bo;
        out[pre + "ln2.g"] = &b.ln2_g;
        out[pre + "ln2.b"] = &b.ln2_b;
        out[pre + "mlp.w1"] = &b.w1;
        out[pre + "mlp.b1"] = &b.b1;
        out[pre + "mlp.w2"] = &b.w2;
        out[pre + "mlp.b2"] = &b.b2;
    }
    out["final_ln.g"] = &m.final_ln_g;
    out["final_ln.b"] = &m.final_ln_b;
    out["head.w"] = &m.head_w;
    out["head.b"] = &m.head_b;
    for (const auto& [l, p] : m.students) {
        const std::string pre = "student" + std::to_string(l) + ".";
        out[pre + "wq"] = &p.wq;
        out[pre + "bq"] = &p.bq;
        out[pre + "wk"] = &p.wk;
        out[pre + "bk"] = &p.bk;
        out[pre + "wv"] = &p.wv;
        out[pre + "bv"] = &p.bv;
        out[pre + "wo"] = &p.wo;
        out[pre + "bo"] = &p.bo;
    }
    return out;
}

std::map<std::string, Tensor*> named_tensors_mut(MicroModel& m) {
    std::map<std::string, Tensor*> out;
    for (const auto& [k, v] : named_tensors(m)) out[k] = const_cast<Tensor*>(v);
    return out;
}

}  // namespace

void save_checkpoint(const MicroModel& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw StateError("save_checkpoint: cannot open " + path);
    os << "dcr-checkpoint v1\n";
    os << "spec " << m.spec.depth << " " << m.spec.width << " " << m.spec.heads << " " << m.spec.seq_len
       << " " << m.spec.vocab << " " << m.spec.num_classes << " " << m.spec.mlp_mult << " replaced=";
    for (size_t i = 0; i < m.spec.replaced.size(); ++i)
        os << (i ? "," : "") << m.spec.replaced[i];
    os << "\n";
    const auto named = named_tensors(m);
    os << "tensors " << named.size() << "\n";
    for (const auto& [name, t] : named) write_tensor(os, name, *t);
    if (!os) throw StateError("save_checkpoint: write failed for " + path);
}

MicroModel load_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw StateError("load_checkpoint: cannot open " + path);
    std::string magic, version;
    is >> magic >> version;
    if (magic != "dcr-checkpoint" || version != "v1")
        throw ConfigError("load_checkpoint: bad header in " + path);
    std::string tag;
    ModelSpec spec;
    is >> tag >> spec.depth >> spec.width >> spec.heads >> spec.seq_len >> spec.vocab >>
        spec.num_classes >> spec.mlp_mult;
    if (tag != "spec") throw ConfigError("load_checkpoint: missing spec line");
    std::string replaced_field;
    is >> replaced_field;
    spec.replaced.clear();
    if (replaced_field.rfind("replaced=", 0) != 0)
        throw ConfigError("load_checkpoint: missing replaced= field");
    std::stringstream rs(replaced_field.substr(9));
    std::string item;
    while (std::getline(rs, item, ','))
        if (!item.empty()) spec.replaced.push_back(std::stoi(item));
    MicroModel m = MicroModel::init(spec, 0);
    size_t count = 0;
    is >> tag >> count;
    if (tag != "tensors") throw ConfigError("load_checkpoint: missing tensors line");
    // students may or may not be present; create slots on demand
    auto ensure_student = [&](int layer) {
        if (!m.students.count(layer)) {
            Rng rng(0);
            m.students.emplace(layer, init_attention(spec.width, rng));
        }
    };
    for (size_t i = 0; i < count; ++i) {
        std::string name;
        int rank = 0;
        is >> name >> rank;
        Shape shape(static_cast<size_t>(rank));
        for (int r = 0; r < rank; ++r) is >> shape[static_cast<size_t>(r)];
        Tensor t(shape);
        for (double& v : t.data) is >> v;
        if (!is) throw ConfigError("load_checkpoint: truncated tensor " + name);
        if (name.rfind("student", 0) == 0) {
            const size_t dotpos = name.find('.');
            ensure_student(std::stoi(name.substr(7, dotpos - 7)));
        }
        auto named = named_tensors_mut(m);
        auto it = named.find(name);
        if (it == named.end()) throw ConfigError("load_checkpoint: unknown tensor " + name);
        if (!same_shape(it->second->shape, t.shape))
            throw ConfigError("load_checkpoint: shape mismatch for " + name);
        it->second->data = std::move(t.data);
    }
    return m;
}

}  // namespace dcr
