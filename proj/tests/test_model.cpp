#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "dcr/model.hpp"
#include "doctest.h"

using namespace dcr;

namespace {

ModelSpec tiny_spec() {
    ModelSpec s;
    s.depth = 2;
    s.width = 8;
    s.heads = 2;
    s.seq_len = 4;
    s.vocab = 9;
    s.num_classes = 8;
    s.replaced = {1, 2};
    return s;
}

TokenBatch tiny_batch(const ModelSpec& spec, uint64_t seed, int64_t batch) {
    Rng rng(seed);
    TokenBatch out;
    for (int64_t b = 0; b < batch; ++b) {
        std::vector<int> seq;
        for (int i = 0; i < spec.seq_len; ++i)
            seq.push_back(static_cast<int>(rng.next_u64() % static_cast<uint64_t>(spec.vocab)));
        out.push_back(std::move(seq));
    }
    return out;
}

Tensor rand_tensor(Shape shape, uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
    return t;
}

// plain per-example reference attention, written independently of the kernels
Tensor reference_attention(const AttentionParams& p, const Tensor& h, int heads) {
    const int64_t B = h.shape[0], n = h.shape[1], d = h.shape[2];
    const int64_t dh = d / heads;
    Tensor out({B, n, d});
    auto lin = [&](const Tensor& w, const Tensor& bias, int64_t b, int64_t i, int64_t j) {
        double s = bias.data[static_cast<size_t>(j)];
        for (int64_t k = 0; k < d; ++k)
            s += h.data[static_cast<size_t>((b * n + i) * d + k)] * w.data[static_cast<size_t>(k * d + j)];
        return s;
    };
    for (int64_t b = 0; b < B; ++b) {
        std::vector<double> q(static_cast<size_t>(n * d)), k(static_cast<size_t>(n * d)),
            v(static_cast<size_t>(n * d));
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) {
                q[static_cast<size_t>(i * d + j)] = lin(p.wq, p.bq, b, i, j);
                k[static_cast<size_t>(i * d + j)] = lin(p.wk, p.bk, b, i, j);
                v[static_cast<size_t>(i * d + j)] = lin(p.wv, p.bv, b, i, j);
            }
        std::vector<double> mixed(static_cast<size_t>(n * d), 0.0);
        for (int hd = 0; hd < heads; ++hd) {
            const int64_t off = hd * dh;
            for (int64_t i = 0; i < n; ++i) {
                std::vector<double> scores(static_cast<size_t>(n));
                double mx = -1e300;
                for (int64_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int64_t c = 0; c < dh; ++c)
                        s += q[static_cast<size_t>(i * d + off + c)] * k[static_cast<size_t>(j * d + off + c)];
                    s /= std::sqrt(static_cast<double>(dh));
                    scores[static_cast<size_t>(j)] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (double& s : scores) {
                    s = std::exp(s - mx);
                    z += s;
                }
                for (double& s : scores) s /= z;
                for (int64_t c = 0; c < dh; ++c) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < n; ++j)
                        acc += scores[static_cast<size_t>(j)] * v[static_cast<size_t>(j * d + off + c)];
                    mixed[static_cast<size_t>(i * d + off + c)] = acc;
                }
            }
        }
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) {
                double s = p.bo.data[static_cast<size_t>(j)];
                for (int64_t c = 0; c < d; ++c)
                    s += mixed[static_cast<size_t>(i * d + c)] * p.wo.data[static_cast<size_t>(c * d + j)];
                out.data[static_cast<size_t>((b * n + i) * d + j)] = s;
            }
    }
    return out;
}

}  // namespace

TEST_CASE("kaiming_init: seeded stats, determinism, fan-in scaling") {
    Rng rng(12);
    const int64_t fan_in = 4;
    // empirical std over 10^4 samples within 3 standard errors of sqrt(2/4)
    const int64_t n = 10000;
    Tensor big = kaiming_init({100, 100}, fan_in, rng);
    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += big.data[static_cast<size_t>(i)] / static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = big.data[static_cast<size_t>(i)] - mean;
        var += d * d / static_cast<double>(n - 1);
    }
    const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
    const double se_std = sigma / std::sqrt(2.0 * static_cast<double>(n));
    CHECK(std::abs(std::sqrt(var) - sigma) <= 3.0 * se_std);
    CHECK(std::sqrt(var) > 0.5 * sigma);
    CHECK(std::sqrt(var) < 1.5 * sigma);

    Rng a(77), b(77);
    const Tensor t1 = kaiming_init({4, 4}, 4, a);
    const Tensor t2 = kaiming_init({4, 4}, 4, b);
    CHECK(t1.data == t2.data);

    Rng c(5);
    const Tensor small = kaiming_init({64}, 4, c);
    Rng d(5);
    const Tensor tiny = kaiming_init({64}, 4096, d);
    double s_small = 0, s_tiny = 0;
    for (int i = 0; i < 64; ++i) {
        s_small += small.data[i] * small.data[i];
        s_tiny += tiny.data[i] * tiny.data[i];
    }
    CHECK(s_tiny < s_small);  // sigma = sqrt(2/fan_in) shrinks with fan_in

    Rng e(6);
    CHECK_THROWS_AS(kaiming_init({2, 2}, 0, e), ParameterError);
}

TEST_CASE("attention_forward: single token, zero params, dense reference") {
    const int heads = 2;
    AttentionParams p;
    p.wq = rand_tensor({8, 8}, 1);
    p.wk = rand_tensor({8, 8}, 2);
    p.wv = rand_tensor({8, 8}, 3);
    p.wo = rand_tensor({8, 8}, 4);
    p.bq = rand_tensor({8}, 5);
    p.bk = rand_tensor({8}, 6);
    p.bv = rand_tensor({8}, 7);
    p.bo = rand_tensor({8}, 8);

    // n=1: softmax over a single key gives weight 1, so the output is the
    // out-projection of that value row
    const Tensor h1 = rand_tensor({1, 1, 8}, 9);
    const Tensor y1 = attention_forward(p, h1, heads);
    Tensor v_row({1, 1, 8});
    for (int j = 0; j < 8; ++j) {
        double s = p.bv.data[static_cast<size_t>(j)];
        for (int c = 0; c < 8; ++c) s += h1.data[static_cast<size_t>(c)] * p.wv.data[static_cast<size_t>(c * 8 + j)];
        v_row.data[static_cast<size_t>(j)] = s;
    }
    for (int j = 0; j < 8; ++j) {
        double s = p.bo.data[static_cast<size_t>(j)];
        for (int c = 0; c < 8; ++c) s += v_row.data[static_cast<size_t>(c)] * p.wo.data[static_cast<size_t>(c * 8 + j)];
        CHECK(y1.data[static_cast<size_t>(j)] == doctest::Approx(s).epsilon(1e-12));
    }

    // all-zero params map anything to zero
    AttentionParams zero;
    for (Tensor* t : zero.tensors()) *t = Tensor({8, 8});
    zero.bq = Tensor({8});
    zero.bk = Tensor({8});
    zero.bv = Tensor({8});
    zero.bo = Tensor({8});
    const Tensor y0 = attention_forward(zero, rand_tensor({2, 3, 8}, 10), heads);
    for (double v : y0.data) CHECK(v == 0.0);

    // seeded case against the independently coded dense implementation
    const Tensor h = rand_tensor({3, 4, 8}, 11);
    const Tensor got = attention_forward(p, h, heads);
    const Tensor want = reference_attention(p, h, heads);
    for (int64_t i = 0; i < got.size(); ++i)
        CHECK(got.data[static_cast<size_t>(i)] ==
              doctest::Approx(want.data[static_cast<size_t>(i)]).epsilon(1e-10));
}

TEST_CASE("model spec validation") {
    ModelSpec s = tiny_spec();
    s.replaced = {5};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = tiny_spec();
    s.width = 7;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("endpoint equivalence: alpha=1 is the teacher forward, alpha=0 the student forward") {
    const ModelSpec spec = tiny_spec();
    MicroModel m = MicroModel::init(spec, 42);
    m.add_students(43);
    const TokenBatch batch = tiny_batch(spec, 44, 3);

    const EvalOutputs teacher =
        eval_forward(m, batch, uniform_plans(spec, site_plan_for(BlockMode::teacher_only, 1.0)));
    const EvalOutputs blend1 =
        eval_forward(m, batch, uniform_plans(spec, site_plan_for(BlockMode::dcr_blend, 1.0)));
    CHECK(teacher.logits.data == blend1.logits.data);  // bitwise

    const EvalOutputs student =
        eval_forward(m, batch, uniform_plans(spec, site_plan_for(BlockMode::student_only, 0.0)));
    const EvalOutputs blend0 =
        eval_forward(m, batch, uniform_plans(spec, site_plan_for(BlockMode::dcr_blend, 0.0)));
    CHECK(student.logits.data == blend0.logits.data);
    // and the taped forward agrees with the eval path bitwise
    Tape tape;
    MicroModel m2 = m;
    const TapeForward fwd =
        tape_forward(tape, m2, batch, uniform_plans(spec, site_plan_for(BlockMode::dcr_blend, 1.0)));
    CHECK(tape.val(fwd.logits).data == teacher.logits.data);
}

TEST_CASE("blend is convex: alpha=0.5 branch is the midpoint of the branches") {
    const ModelSpec spec = tiny_spec();
    MicroModel m = MicroModel::init(spec, 7);
    m.add_students(8);
    const TokenBatch batch = tiny_batch(spec, 9, 2);
    const EvalOutputs cap =
        eval_forward(m, batch, uniform_plans(spec, site_plan_for(BlockMode::dcr_blend, 0.5)), true);
    REQUIRE(cap.sites.size() == 2);
    for (const BlockOutputs& site : cap.sites) {
        REQUIRE(site.teacher_branch.size() > 0);
        REQUIRE(site.student_branch.size() > 0);
        // residual_out - residual_in == blended branch, exactly (Eq. 1 algebra)
        for (int64_t i = 0; i < site.residual_in.size(); ++i) {
            const double blended = 0.5 * site.teacher_branch.data[static_cast<size_t>(i)] +
                                   0.5 * site.student_branch.data[static_cast<size_t>(i)];
            CHECK(site.residual_out.data[static_cast<size_t>(i)] -
                      site.residual_in.data[static_cast<size_t>(i)] ==
                  doctest::Approx(blended).epsilon(1e-15));
        }
    }
}

TEST_CASE("gate value outside [0,1] is rejected") {
    CHECK_THROWS_AS(site_plan_for(BlockMode::dcr_blend, 1.5), ParameterError);
    CHECK_THROWS_AS(site_plan_for(BlockMode::theseus_soft, -0.1), ParameterError);
}

TEST_CASE("missing gate for a replaced layer is a configuration error") {
    const ModelSpec spec = tiny_spec();
    MicroModel m = MicroModel::init(spec, 1);
    m.add_students(2);
    std::map<int, SitePlan> plans;
    plans.emplace(1, site_plan_for(BlockMode::dcr_blend, 0.5));  // layer 2 missing
    CHECK_THROWS_AS(eval_forward(m, tiny_batch(spec, 3, 2), plans), ConfigError);
}

TEST_CASE("model without students runs the unmodified pretrained forward") {
    const ModelSpec spec = tiny_spec();
    MicroModel with_students = MicroModel::init(spec, 42);
    with_students.add_students(43);
    MicroModel plain = MicroModel::init(spec, 42);  // same backbone init, no students
    const TokenBatch batch = tiny_batch(spec, 44, 3);
    const EvalOutputs a =
        eval_forward(with_students, batch, uniform_plans(spec, site_plan_for(BlockMode::teacher_only, 1.0)));
    const EvalOutputs b = eval_forward(plain, batch, {});
    CHECK(a.logits.data == b.logits.data);
}

TEST_CASE("model_forward matches a hand-rolled blend loop at alpha=0.3") {
    const ModelSpec spec = tiny_spec();
    MicroModel m = MicroModel::init(spec, 100);
    m.add_students(101);
    const TokenBatch batch = tiny_batch(spec, 102, 3);
    const double alpha = 0.3;
    const EvalOutputs got =
        eval_forward(m, batch, uniform_plans(spec, site_plan_for(BlockMode::dcr_blend, alpha)));

    // independent re-implementation of the blend loop on top of the kernels
    const int64_t B = 3;
    const std::vector<int64_t> flat = [&] {
        std::vector<int64_t> idx;
        for (const auto& seq : batch)
            for (int t : seq) idx.push_back(t);
        return idx;
    }();
    Tensor x = kernels::bcast0_add(
        kernels::reshape(kernels::gather_rows(m.tok_embed, flat), {B, spec.seq_len, spec.width}),
        m.pos_embed);
    for (int l = 1; l <= spec.depth; ++l) {
        const BlockParams& blk = m.blocks[static_cast<size_t>(l - 1)];
        const Tensor h = kernels::layer_norm(x, blk.ln1_g, blk.ln1_b, 1e-5);
        const Tensor t_branch = attention_forward(blk.attn, h, spec.heads);
        const Tensor s_branch = attention_forward(m.students.at(l), h, spec.heads);
        Tensor blended(t_branch.shape);
        for (int64_t i = 0; i < blended.size(); ++i)
            blended.data[static_cast<size_t>(i)] = alpha * t_branch.data[static_cast<size_t>(i)] +
                                                   (1 - alpha) * s_branch.data[static_cast<size_t>(i)];
        x = kernels::add(x, blended);
        const Tensor h2 = kernels::layer_norm(x, blk.ln2_g, blk.ln2_b, 1e-5);
        const Tensor mid = kernels::gelu(kernels::bias_add(kernels::matmul(h2, blk.w1), blk.b1));
        x = kernels::add(x, kernels::bias_add(kernels::matmul(mid, blk.w2), blk.b2));
    }
    const Tensor hf = kernels::layer_norm(x, m.final_ln_g, m.final_ln_b, 1e-5);
    const Tensor logits = kernels::bias_add(kernels::matmul(kernels::mean_axis1(hf), m.head_w), m.head_b);
    for (int64_t i = 0; i < logits.size(); ++i)
        CHECK(got.logits.data[static_cast<size_t>(i)] ==
              doctest::Approx(logits.data[static_cast<size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("teacher branch skipped at student weight 1 without capture") {
    const ModelSpec spec = tiny_spec();
    MicroModel m = MicroModel::init(spec, 5);
    m.add_students(6);
    const EvalOutputs out = eval_forward(
        m, tiny_batch(spec, 7, 2), uniform_plans(spec, site_plan_for(BlockMode::student_only, 0.0)));
    CHECK(out.teacher_branch_evals == 0);
    const EvalOutputs out2 = eval_forward(
        m, tiny_batch(spec, 7, 2), uniform_plans(spec, site_plan_for(BlockMode::dcr_blend, 0.5)));
    CHECK(out2.teacher_branch_evals == 2);
}

TEST_CASE("checkpoint round-trip preserves every tensor bit-exactly") {
    const ModelSpec spec = tiny_spec();
    MicroModel m = MicroModel::init(spec, 314);
    m.add_students(315);
    const std::string path = (std::filesystem::temp_directory_path() / "dcr_ckpt_test.txt").string();
    save_checkpoint(m, path);
    const MicroModel r = load_checkpoint(path);
    CHECK(r.spec.depth == spec.depth);
    CHECK(r.spec.replaced == spec.replaced);
    CHECK(r.tok_embed.data == m.tok_embed.data);
    CHECK(r.blocks[1].attn.wq.data == m.blocks[1].attn.wq.data);
    CHECK(r.blocks[0].w1.data == m.blocks[0].w1.data);
    CHECK(r.students.at(2).wo.data == m.students.at(2).wo.data);
    CHECK(r.head_w.data == m.head_w.data);
    const TokenBatch batch = tiny_batch(spec, 316, 2);
    const auto plans = uniform_plans(spec, site_plan_for(BlockMode::dcr_blend, 0.4));
    CHECK(eval_forward(r, batch, plans).logits.data == eval_forward(m, batch, plans).logits.data);
    std::remove(path.c_str());
}

TEST_CASE("frozen teacher: students train, backbone never receives gradients") {
    const ModelSpec spec = tiny_spec();
    MicroModel m = MicroModel::init(spec, 21);
    m.add_students(22);
    m.set_students_only_trainable();
    const std::vector<double> wq_before = m.blocks[0].attn.wq.data;
    Tape tape;
    const TapeForward fwd = tape_forward(tape, m, tiny_batch(spec, 23, 2),
                                         uniform_plans(spec, site_plan_for(BlockMode::dcr_blend, 0.5)));
    const Var loss = tape.cross_entropy_ls(fwd.logits, {0, 1}, 0.1);
    tape.backward(loss);
    for (Tensor* t : m.backbone_params()) CHECK(!t->grad.has_value());
    bool some_student_grad = false;
    for (Tensor* t : m.student_params())
        if (t->grad.has_value()) some_student_grad = true;
    CHECK(some_student_grad);
    CHECK(m.blocks[0].attn.wq.data == wq_before);
}

TEST_CASE("shape preservation at every site") {
    const ModelSpec spec = tiny_spec();
    MicroModel m = MicroModel::init(spec, 31);
    m.add_students(32);
    const EvalOutputs cap = eval_forward(
        m, tiny_batch(spec, 33, 4), uniform_plans(spec, site_plan_for(BlockMode::dcr_blend, 0.7)), true);
    for (const BlockOutputs& site : cap.sites) {
        CHECK(site.teacher_branch.shape == site.student_branch.shape);
        CHECK(site.teacher_branch.shape == site.residual_in.shape);
    }
}
