#include <doctest.h>

#include <cmath>
#include <limits>

#include "simplexlm/errors.hpp"
#include "simplexlm/simplex.hpp"

using namespace simplexlm;

TEST_SUITE_BEGIN("simplex");

TEST_CASE("rng streams are deterministic and serializable") {
    Rng a = Rng::stream(42, "noise");
    Rng b = Rng::stream(42, "noise");
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    CHECK(Rng::stream(42, "noise").next_u64() != Rng::stream(42, "data").next_u64());

    Rng c = Rng::stream(7, "x");
    c.gaussian();
    const auto st = c.state();
    Rng d;
    d.restore(st);
    for (int i = 0; i < 50; ++i) {
        CHECK(c.gaussian() == d.gaussian());
    }
}

TEST_CASE("logits_initialization produces the almost-one-hot base rows") {
    TokenSeq seq;
    seq.ids = {2};
    const SimplexLogits w = logits_initialization(seq, 4, 5.0);
    REQUIRE(w.values.rows == 1);
    CHECK(w.values(0, 0) == -5.0);
    CHECK(w.values(0, 1) == -5.0);
    CHECK(w.values(0, 2) == 5.0);
    CHECK(w.values(0, 3) == -5.0);

    TokenSeq empty;
    CHECK(logits_initialization(empty, 4, 5.0).values.rows == 0);

    TokenSeq both;
    both.ids = {0, 3};
    const SimplexLogits w2 = logits_initialization(both, 4, 5.0);
    const auto arg = rows_argmax(w2.values);
    CHECK(arg == std::vector<TokenId>{0, 3});

    TokenSeq bad;
    bad.ids = {4};
    CHECK_THROWS_AS(logits_initialization(bad, 4, 5.0), DomainError);
}

TEST_CASE("round-trip identity on random token rows") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int v = 2 + static_cast<int>(rng.below(30));
        TokenSeq seq;
        for (int i = 0; i < 8; ++i) {
            seq.ids.push_back(static_cast<TokenId>(rng.below(static_cast<uint64_t>(v))));
        }
        const SimplexLogits w = logits_initialization(seq, v, 3.0);
        CHECK(rows_argmax(w.values) == seq.ids);
        // base-representation invariant: exactly one +K per row
        for (int i = 0; i < w.values.rows; ++i) {
            int plus = 0;
            for (int j = 0; j < v; ++j) {
                if (w.values(i, j) == 3.0) ++plus;
                else CHECK(w.values(i, j) == -3.0);
            }
            CHECK(plus == 1);
        }
    }
}

TEST_CASE("schedule invariants hold for both kinds and many T") {
    for (const ScheduleKind kind : {ScheduleKind::Cosine, ScheduleKind::Linear}) {
        for (const int t_total : {1, 2, 3, 10, 50, 200, 1000}) {
            const NoiseSchedule s = make_schedule(t_total, kind, 5.0);
            REQUIRE(static_cast<int>(s.alpha_bar.size()) == t_total + 1);
            CHECK(s.alpha_bar[0] == doctest::Approx(1.0).epsilon(1e-12));
            for (int t = 1; t <= t_total; ++t) {
                CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
                CHECK(s.alpha_bar[t] >= 0.0);
                CHECK(s.alpha_bar[t] <= 1.0);
            }
            CHECK(s.alpha_bar[t_total] <= 0.01);
        }
    }
    CHECK_THROWS_AS(make_schedule(0, ScheduleKind::Cosine, 5.0), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, ScheduleKind::Cosine, 0.0), ConfigError);
}

TEST_CASE("linear schedule matches the independently computed value") {
    // Frozen from a standalone evaluation of the scaled-linear beta ramp
    // (endpoints 1e-4/0.02 rescaled by 1000/T, per-step cap 0.999) at T=10.
    const NoiseSchedule s = make_schedule(10, ScheduleKind::Linear, 5.0);
    CHECK(s.alpha_bar[5] == doctest::Approx(0.014377689695473258).epsilon(1e-9));
}

TEST_CASE("cosine T=1 is the minimal schedule [1, ~0]") {
    const NoiseSchedule s = make_schedule(1, ScheduleKind::Cosine, 5.0);
    REQUIRE(s.alpha_bar.size() == 2);
    CHECK(s.alpha_bar[0] == 1.0);
    CHECK(s.alpha_bar[1] <= 0.01);
}

TEST_CASE("add_noise: t=0 is the exact identity") {
    TokenSeq seq;
    seq.ids = {1, 0, 2};
    const SimplexLogits w0 = logits_initialization(seq, 3, 5.0);
    const NoiseSchedule s = make_schedule(10, ScheduleKind::Cosine, 5.0);
    Rng rng(3);
    const SimplexLogits w = add_noise(w0, 0, s, rng);
    for (size_t i = 0; i < w.values.v.size(); ++i) {
        CHECK(w.values.v[i] == w0.values.v[i]);
    }
}

TEST_CASE("add_noise: alpha_bar=0 output ignores the signal") {
    NoiseSchedule s;
    s.total_steps = 1;
    s.alpha_bar = {1.0, 0.0};
    s.k_scale = 5.0;

    TokenSeq a, b;
    a.ids = {0, 1};
    b.ids = {2, 3};
    const SimplexLogits wa = logits_initialization(a, 4, 5.0);
    const SimplexLogits wb = logits_initialization(b, 4, 5.0);
    Rng r1(99), r2(99);
    const SimplexLogits na = add_noise(wa, 1, s, r1);
    const SimplexLogits nb = add_noise(wb, 1, s, r2);
    for (size_t i = 0; i < na.values.v.size(); ++i) {
        CHECK(na.values.v[i] == nb.values.v[i]); // independent of w0
    }
    // and equals K * standard-normal draw
    Rng r3(99);
    for (size_t i = 0; i < na.values.v.size(); ++i) {
        CHECK(na.values.v[i] == doctest::Approx(5.0 * r3.gaussian()).epsilon(1e-12));
    }
}

TEST_CASE("add_noise is bitwise deterministic under a fixed seed") {
    TokenSeq seq;
    seq.ids = {1, 2, 0, 3};
    const SimplexLogits w0 = logits_initialization(seq, 5, 5.0);
    const NoiseSchedule s = make_schedule(10, ScheduleKind::Cosine, 5.0);
    Rng r1(1234), r2(1234);
    const SimplexLogits n1 = add_noise(w0, 5, s, r1);
    const SimplexLogits n2 = add_noise(w0, 5, s, r2);
    for (size_t i = 0; i < n1.values.v.size(); ++i) {
        CHECK(n1.values.v[i] == n2.values.v[i]);
    }
    CHECK_THROWS_AS(add_noise(w0, 11, s, r1), DomainError);
    CHECK_THROWS_AS(add_noise(w0, -1, s, r1), DomainError);
}

TEST_CASE("projection: argmax row and base-representation invariant") {
    Matrix m(1, 3);
    m(0, 0) = 0.1;
    m(0, 1) = 2.0;
    m(0, 2) = -1.0;
    Rng rng(0);
    ProjectionConfig cfg;
    cfg.mode = ProjectionMode::Argmax;
    const SimplexLogits out = logits_projection(SimplexLogits(m, 5.0), cfg, 5.0, rng);
    CHECK(out.values(0, 0) == -5.0);
    CHECK(out.values(0, 1) == 5.0);
    CHECK(out.values(0, 2) == -5.0);
}

TEST_CASE("projection: top-p with p->0 degenerates to argmax") {
    Rng gen(5);
    for (int trial = 0; trial < 25; ++trial) {
        Matrix m(1, 9);
        for (int j = 0; j < 9; ++j) {
            m(0, j) = gen.gaussian();
        }
        ProjectionConfig nucleus;
        nucleus.mode = ProjectionMode::TopP;
        nucleus.top_p = 1e-12;
        ProjectionConfig greedy;
        greedy.mode = ProjectionMode::Argmax;
        Rng r1(trial), r2(trial);
        CHECK(project_tokens(m, nucleus, r1) == project_tokens(m, greedy, r2));
    }
}

TEST_CASE("projection: sampling frequency matches the softmax probability") {
    Matrix m(1, 2);
    m(0, 0) = std::log(1.0);
    m(0, 1) = std::log(3.0); // p = 0.75
    ProjectionConfig cfg;
    cfg.mode = ProjectionMode::Sample;
    cfg.temperature = 1.0;
    Rng rng(2024);
    int hits = 0;
    for (int i = 0; i < 10000; ++i) {
        hits += project_tokens(m, cfg, rng)[0] == 1 ? 1 : 0;
    }
    const double freq = hits / 10000.0;
    CHECK(freq >= 0.72);
    CHECK(freq <= 0.78);
}

TEST_CASE("projection error cases") {
    Matrix m(1, 2);
    m(0, 0) = 1.0;
    m(0, 1) = 0.0;
    Rng rng(0);
    ProjectionConfig bad;
    bad.mode = ProjectionMode::TopP;
    bad.top_p = 0.0;
    CHECK_THROWS_AS(project_tokens(m, bad, rng), ConfigError);
    bad.top_p = -0.5;
    CHECK_THROWS_AS(project_tokens(m, bad, rng), ConfigError);

    ProjectionConfig cfg;
    cfg.mode = ProjectionMode::Sample;
    cfg.temperature = 0.0;
    CHECK_THROWS_AS(project_tokens(m, cfg, rng), ConfigError);

    Matrix inf_row(1, 2);
    inf_row(0, 0) = -std::numeric_limits<double>::infinity();
    inf_row(0, 1) = -std::numeric_limits<double>::infinity();
    ProjectionConfig greedy;
    greedy.mode = ProjectionMode::Argmax;
    CHECK_THROWS_AS(project_tokens(inf_row, greedy, rng), DomainError);
}

TEST_CASE("projection output always has exactly one +K per row") {
    Rng gen(77);
    ProjectionConfig cfg;
    cfg.mode = ProjectionMode::TopP;
    cfg.top_p = 0.9;
    Rng rng(1);
    for (int trial = 0; trial < 30; ++trial) {
        Matrix m(3, 7);
        for (auto& x : m.v) {
            x = 2.0 * gen.gaussian();
        }
        const SimplexLogits out = logits_projection(SimplexLogits(m, 5.0), cfg, 4.0, rng);
        for (int i = 0; i < out.values.rows; ++i) {
            int plus = 0, minus = 0;
            for (int j = 0; j < out.values.cols; ++j) {
                if (out.values(i, j) == 4.0) ++plus;
                if (out.values(i, j) == -4.0) ++minus;
            }
            CHECK(plus == 1);
            CHECK(minus == out.values.cols - 1);
        }
    }
}

TEST_SUITE_END();
