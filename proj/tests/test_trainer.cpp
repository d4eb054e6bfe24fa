#include <doctest.h>

#include <cmath>

#include "piattn/trainer.hpp"
#include "test_util.hpp"

using namespace piattn;
using piattn::testing::small_model;

TEST_CASE("cross entropy values") {
    Matrix uniform(3, 16);
    const std::vector<long> t{1, 5, 15};
    CHECK(std::abs(cross_entropy(uniform, t).loss - std::log(16.0)) < 1e-12);

    Matrix sharp(1, 16);
    sharp(0, 4) = 50.0;
    const std::vector<long> hit{4};
    const CrossEntropy ce = cross_entropy(sharp, hit);
    CHECK(ce.loss < 1e-20);
    CHECK(ce.correct == 1);

    const std::vector<long> ignored{kIgnoreIndex, 2, kIgnoreIndex};
    Matrix l(3, 4);
    l(0, 0) = 100.0;
    CHECK(cross_entropy(l, ignored).count == 1);
    CHECK(std::abs(cross_entropy(l, ignored).loss - std::log(4.0)) < 1e-12);

    const std::vector<long> none{kIgnoreIndex, kIgnoreIndex, kIgnoreIndex};
    CHECK_THROWS_AS(cross_entropy(l, none), std::invalid_argument);
    const std::vector<long> bad{0, 9, 0};
    CHECK_THROWS_AS(cross_entropy(l, bad), std::out_of_range);
}

TEST_CASE("cross entropy gradient") {
    Rng rng(60);
    const Matrix logits = rng.normal_matrix(5, 7);
    const std::vector<long> t{3, kIgnoreIndex, 0, 6, 2};
    const CrossEntropy ce = cross_entropy(logits, t);
    Matrix probe = logits;
    const auto f = [&](std::span<const double> v) {
        std::copy(v.begin(), v.end(), probe.values().begin());
        return cross_entropy(probe, t).loss;
    };
    CHECK(grad_check(f, logits.values(), ce.grad.values()).max_rel_error < 1e-7);
    for (std::size_t v = 0; v < 7; ++v) CHECK(ce.grad(1, v) == 0.0);
}

TEST_CASE("AdamW step arithmetic") {
    TrainConfig tc;
    tc.weight_decay = 0.0;
    tc.clip_norm = 1e9;

    SUBCASE("first step moves by lr against the gradient sign") {
        std::vector<double> p{0.0, 1.0};
        const std::vector<double> g{0.5, -2.0};
        AdamState s;
        optimizer_step(p, g, s, tc, 3e-4);
        CHECK(p[0] == doctest::Approx(-3e-4).epsilon(1e-6));
        CHECK(p[1] == doctest::Approx(1.0 + 3e-4).epsilon(1e-9));
        CHECK(s.t == 1);
    }
    SUBCASE("clipping rescales by the global norm") {
        tc.clip_norm = 1.0;
        std::vector<double> p{0.0, 0.0};
        const std::vector<double> g{1.2, 1.6};
        AdamState s;
        const StepReport r = optimizer_step(p, g, s, tc, 1e-3);
        CHECK(r.grad_norm == doctest::Approx(2.0));
        CHECK(r.clip_scale == doctest::Approx(0.5));
        CHECK(s.m[0] == doctest::Approx(0.1 * 0.6));
        CHECK(s.m[1] == doctest::Approx(0.1 * 0.8));
    }
    SUBCASE("decoupled weight decay with zero gradient") {
        tc.weight_decay = 0.1;
        std::vector<double> p{2.0, -4.0};
        const std::vector<double> g{0.0, 0.0};
        AdamState s;
        optimizer_step(p, g, s, tc, 1e-2);
        CHECK(p[0] == doctest::Approx(2.0 - 1e-2 * 0.1 * 2.0).epsilon(1e-14));
        CHECK(p[1] == doctest::Approx(-4.0 + 1e-2 * 0.1 * 4.0).epsilon(1e-14));
    }
    SUBCASE("non-finite gradient is skipped") {
        std::vector<double> p{1.0, 2.0};
        const std::vector<double> g{std::nan(""), 0.0};
        AdamState s;
        CHECK_FALSE(optimizer_step(p, g, s, tc, 1e-2).applied);
        CHECK(p == std::vector<double>{1.0, 2.0});
        CHECK(s.t == 0);
    }
}

TEST_CASE("learning rate schedule") {
    TrainConfig tc;
    tc.lr = 1e-3;
    tc.steps = 100;
    tc.warmup_steps = 10;
    CHECK(learning_rate(tc, 5) == doctest::Approx(5e-4));
    CHECK(learning_rate(tc, 50) == doctest::Approx(1e-3));
    tc.cosine_decay = true;
    CHECK(learning_rate(tc, 10) == doctest::Approx(1e-3));
    CHECK(learning_rate(tc, 55) == doctest::Approx(5e-4));
    CHECK(learning_rate(tc, 100) == doctest::Approx(0.0));
}

TEST_CASE("task batches") {
    SUBCASE("copy targets") {
        TaskSpec s;
        s.vocab = 16;
        s.seq_len = 32;
        s.delay = 8;
        const Task task = load_task(s);
        Rng rng(61);
        const Batch b = make_batch(task, rng, 4);
        for (std::size_t r = 0; r < 4; ++r) {
            for (std::size_t i = 0; i < 8; ++i) CHECK(b.targets[r][i] == kIgnoreIndex);
            for (std::size_t i = 8; i < 32; ++i) CHECK(b.targets[r][i] == static_cast<long>(b.inputs[r][i - 8]));
        }
    }
    SUBCASE("needle layout and determinism") {
        TaskSpec s;
        s.kind = TaskKind::needle_retrieval;
        s.vocab = 10;
        s.seq_len = 24;
        s.min_distance = 6;
        const Task task = load_task(s);
        Rng a(62), b(62);
        const Batch x = make_batch(task, a, 50), y = make_batch(task, b, 50);
        CHECK(x.inputs == y.inputs);
        CHECK(x.targets == y.targets);
        for (std::size_t r = 0; r < 50; ++r) {
            const auto& in = x.inputs[r];
            CHECK(in[23] == needle_query_marker(task));
            std::size_t key = 0, markers = 0;
            for (std::size_t i = 0; i < 23; ++i)
                if (in[i] == needle_key_marker(task)) key = i + 1, ++markers;
            CHECK(markers == 1);
            CHECK(23 - key >= 6);
            CHECK(x.targets[r][23] == static_cast<long>(in[key]));
            for (std::size_t i = 0; i < 23; ++i) CHECK(x.targets[r][i] == kIgnoreIndex);
        }
    }
    SUBCASE("char_lm") {
        TaskSpec s;
        s.kind = TaskKind::char_lm;
        s.seq_len = 16;
        s.corpus = PIATTN_DATA_DIR "/gettysburg.txt";
        const Task task = load_task(s);
        CHECK(task.vocab == task.alphabet.size());
        Rng rng(63);
        const Batch b = make_batch(task, rng, 3);
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t i = 0; i + 1 < 16; ++i) CHECK(b.targets[r][i] == static_cast<long>(b.inputs[r][i + 1]));
        s.corpus = "/nonexistent/corpus.txt";
        CHECK_THROWS_AS(load_task(s), std::runtime_error);
    }
}

namespace {

RunConfig tiny_run() {
    RunConfig rc;
    rc.model = small_model(1, 1, 4, 8);
    rc.task.vocab = 8;
    rc.task.seq_len = 12;
    rc.task.delay = 4;
    rc.train.batch_size = 4;
    rc.train.steps = 6;
    rc.train.eval_interval = 3;
    rc.train.eval_batches = 2;
    rc.train.seed = 5;
    return rc;
}

}  // namespace

TEST_CASE("zero learning rate leaves parameters unchanged") {
    RunConfig rc = tiny_run();
    rc.train.lr = 0.0;
    const Task task = load_task(rc.task);
    Rng rng(rc.train.seed);
    const ModelParams init = init_model(rc.model, rng);
    const TrainResult res = train(rc, task);
    CHECK(flatten(res.params) == flatten(init));
    CHECK(res.steps_run == 6);
    CHECK(res.metrics.size() == 2);
}

TEST_CASE("batch gradient matches finite differences") {
    RunConfig rc = tiny_run();
    const Task task = load_task(rc.task);
    Rng rng(64);
    const ModelParams p = piattn::testing::random_model(rc.model, rng);
    const Batch b = make_batch(task, rng, 3);
    const BatchGradient bg = batch_gradient(p, rc.model, b, 1, 0);
    const auto f = [&](std::span<const double> v) {
        ModelParams q = p;
        unflatten(q, v);
        return batch_gradient(q, rc.model, b, 1, 0).loss;
    };
    CHECK(grad_check(f, flatten(p), flatten(bg.grads), 5e-4, Stencil::four_point).max_rel_error < 1e-6);
}

TEST_CASE("training is identical across thread counts") {
    const RunConfig rc = tiny_run();
    const Task task = load_task(rc.task);
    TrainOptions one, four;
    four.threads = 4;
    const TrainResult a = train(rc, task, one), b = train(rc, task, four);
    CHECK(a.losses == b.losses);
    CHECK(flatten(a.params) == flatten(b.params));
    CHECK(metrics_csv(a.metrics) == metrics_csv(b.metrics));
    CHECK(metrics_csv(a.metrics).rfind("step,loss,accuracy\n", 0) == 0);
}

TEST_CASE("char_lm loss drops below uniform") {
    RunConfig rc;
    rc.task.kind = TaskKind::char_lm;
    rc.task.seq_len = 32;
    rc.task.corpus = PIATTN_DATA_DIR "/gettysburg.txt";
    const Task task = load_task(rc.task);
    rc.model.layers = 2;
    rc.model.d_ff = 64;
    rc.model.vocab = task.vocab;
    rc.model.max_seq = 32;
    rc.model.attention.d_model = 32;
    rc.model.attention.n_heads = 2;
    rc.model.attention.ring_k = 2;
    rc.model.attention.skip_period = 4;
    rc.train.lr = 3e-3;
    rc.train.steps = 500;
    rc.train.batch_size = 8;
    rc.train.eval_interval = 500;
    rc.train.seed = 7;
    const TrainResult res = train(rc, task);
    MESSAGE("char_lm eval loss " << res.final_eval.loss << " vs ln V " << std::log(double(task.vocab)));
    CHECK(res.final_eval.loss < std::log(static_cast<double>(task.vocab)));
}

TEST_CASE("binomial tails") {
    CHECK(binomial_upper_tail(10, 0, 0.3) == 1.0);
    CHECK(binomial_upper_tail(10, 10, 0.5) == doctest::Approx(std::pow(0.5, 10)));
    CHECK(binomial_lower_tail(4, 1, 0.5) == doctest::Approx(5.0 / 16.0));
    CHECK(binomial_upper_tail(4, 2, 0.5) + binomial_lower_tail(4, 1, 0.5) == doctest::Approx(1.0));
}
