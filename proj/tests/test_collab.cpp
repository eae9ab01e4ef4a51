#include <doctest.h>

#include <cmath>

#include "simplexlm/collaboration.hpp"
#include "simplexlm/errors.hpp"
#include "test_util.hpp"

using namespace simplexlm;

TEST_SUITE_BEGIN("collab");

TEST_CASE("combine_logits reproduces the hand-computed example") {
    Matrix core(1, 2), with(1, 2), without(1, 2);
    core(0, 0) = 2.0;
    core(0, 1) = 0.0;
    with(0, 0) = 0.0;
    with(0, 1) = 2.0;
    without(0, 0) = 1.0;
    without(0, 1) = 1.0;
    const Matrix out = combine_logits(core, with, without, 0.2, 1.0);
    CHECK(out(0, 0) == doctest::Approx(1.4).epsilon(1e-12));
    CHECK(out(0, 1) == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("combine_logits coefficient algebra") {
    Rng rng(3);
    Matrix core(2, 5), with(2, 5), without(2, 5);
    for (auto& x : core.v) x = rng.gaussian();
    for (auto& x : with.v) x = rng.gaussian();
    for (auto& x : without.v) x = rng.gaussian();

    const Matrix at_zero = combine_logits(core, with, without, 0.0, 1.0);
    for (size_t i = 0; i < core.v.size(); ++i) {
        CHECK(at_zero.v[i] == core.v[i]);
    }
    const Matrix at_one = combine_logits(core, with, without, 1.0, 0.0);
    for (size_t i = 0; i < with.v.size(); ++i) {
        CHECK(at_one.v[i] == with.v[i]);
    }
    // alpha=0 ignores the third input entirely
    Matrix other = without;
    for (auto& x : other.v) x += 100.0;
    const Matrix a = combine_logits(core, with, without, 0.3, 0.0);
    const Matrix b = combine_logits(core, with, other, 0.3, 0.0);
    for (size_t i = 0; i < a.v.size(); ++i) {
        CHECK(a.v[i] == b.v[i]);
    }

    Matrix bad(1, 5);
    CHECK_THROWS_AS(combine_logits(bad, with, without, 0.2, 1.0), ContractError);
}

TEST_CASE("combine_logits is affine in each argument") {
    Rng rng(5);
    const double lambda = 0.35, alpha = 1.5;
    Matrix core(3, 4), with(3, 4), without(3, 4), delta(3, 4);
    for (auto& x : core.v) x = rng.gaussian();
    for (auto& x : with.v) x = rng.gaussian();
    for (auto& x : without.v) x = rng.gaussian();
    for (auto& x : delta.v) x = rng.gaussian();

    Matrix shifted = core;
    for (size_t i = 0; i < shifted.v.size(); ++i) shifted.v[i] += delta.v[i];
    const Matrix f0 = combine_logits(core, with, without, lambda, alpha);
    const Matrix f1 = combine_logits(shifted, with, without, lambda, alpha);
    for (size_t i = 0; i < f0.v.size(); ++i) {
        CHECK(f1.v[i] - f0.v[i] ==
              doctest::Approx((1.0 - lambda) * delta.v[i]).epsilon(1e-9));
    }
}

TEST_CASE("shared additive shift moves combined logits and keeps the argmax") {
    Rng rng(8);
    const double lambda = 0.25, alpha = 1.0, shift = 3.75;
    Matrix core(2, 6), with(2, 6), without(2, 6);
    for (auto& x : core.v) x = rng.gaussian();
    for (auto& x : with.v) x = rng.gaussian();
    for (auto& x : without.v) x = rng.gaussian();

    const Matrix base = combine_logits(core, with, without, lambda, alpha);
    for (auto& x : core.v) x += shift;
    for (auto& x : with.v) x += shift;
    for (auto& x : without.v) x += shift;
    const Matrix moved = combine_logits(core, with, without, lambda, alpha);
    for (size_t i = 0; i < base.v.size(); ++i) {
        CHECK(moved.v[i] - base.v[i] == doctest::Approx(shift).epsilon(1e-9));
    }
    CHECK(rows_argmax(base) == rows_argmax(moved));
}

TEST_CASE("ar combine: opposing experts at lambda=0.5 give the uniform distribution") {
    Matrix core(1, 2), with(1, 2), without(1, 2);
    core(0, 0) = std::log(3.0);
    core(0, 1) = std::log(1.0);
    with(0, 0) = std::log(1.0);
    with(0, 1) = std::log(3.0);
    const Matrix combined = combine_logits(core, with, without, 0.5, 0.0);
    std::vector<double> probs(combined.row(0), combined.row(0) + 2);
    softmax_row(probs.data(), 2);
    CHECK(probs[0] == 0.5);
    CHECK(probs[1] == 0.5);
}

namespace {

struct CollabFixture {
    ModelDims dims = testutil::tiny_dims(11, 8, 1, 2, 64, 10, 5);
    DenoiserParams core;
    DenoiserParams user;
    CollabSpec spec;
    DecodeConfig cfg;

    CollabFixture() {
        core = testutil::random_params(dims, 101, 0.1);
        user = testutil::random_params(dims, 202, 0.1);
        spec.core = &core;
        spec.user = &user;
        spec.instruction.ids = {2, 3};
        spec.user_data.ids = {4, 5, 6};
        cfg.diffusion_steps = 10;
        cfg.stop_at = 0.4;
        cfg.block_size = 2;
        cfg.max_rounds = 2;
        cfg.time_quant = 5;
        cfg.k_scale = 5.0;
        cfg.seed = 99;
        cfg.projection.mode = ProjectionMode::TopP;
        cfg.projection.top_p = 0.95;
    }
};

} // namespace

TEST_CASE("lambda=0 collab decode is token-identical to core-only decode") {
    CollabFixture fx;
    fx.spec.lambda_user = 0.0;
    fx.spec.alpha = 1.0;
    const CollabResult collab = collab_decode_diffusion(fx.spec, fx.cfg);

    const ShardTable core_only = ShardTable::single(fx.core, fx.cfg.stop_at);
    TokenSeq prompt;
    prompt.ids = fx.spec.instruction.ids;
    const SequenceResult plain = decode_sequence(core_only, prompt, fx.cfg);
    CHECK(collab.tokens.ids == plain.tokens.ids);
}

TEST_CASE("lambda=1, alpha=0 collab decode equals user-only decode on D+inst") {
    CollabFixture fx;
    fx.spec.lambda_user = 1.0;
    fx.spec.alpha = 0.0;
    const CollabResult collab = collab_decode_diffusion(fx.spec, fx.cfg);

    const ShardTable user_only = ShardTable::single(fx.user, fx.cfg.stop_at);
    TokenSeq prompt;
    prompt.ids = fx.spec.user_data.ids;
    prompt.ids.insert(prompt.ids.end(), fx.spec.instruction.ids.begin(),
                      fx.spec.instruction.ids.end());
    const SequenceResult plain = decode_sequence(user_only, prompt, fx.cfg);
    CHECK(collab.tokens.ids == plain.tokens.ids);
}

TEST_CASE("all three per-iteration passes consume the identical noisy block") {
    CollabFixture fx;
    fx.spec.lambda_user = 0.3;
    const CollabResult res = collab_decode_diffusion(fx.spec, fx.cfg);
    REQUIRE(res.trace.size() == res.hook_trace.size());
    for (size_t i = 0; i < res.trace.size(); ++i) {
        CHECK(res.trace[i].t == res.hook_trace[i].t);
        CHECK(res.trace[i].noisy_sig == res.hook_trace[i].noisy_sig);
    }
}

TEST_CASE("vocabulary mismatch is rejected before any iteration") {
    CollabFixture fx;
    const ModelDims other = testutil::tiny_dims(13, 8, 1, 2, 64, 10, 5);
    const DenoiserParams odd = testutil::random_params(other, 7, 0.1);
    fx.spec.user = &odd;
    CHECK_THROWS_AS(collab_decode_diffusion(fx.spec, fx.cfg), ConfigError);
}

TEST_CASE("ar collaboration reductions under shared seeds") {
    CollabFixture fx;
    ProjectionConfig proj;
    proj.mode = ProjectionMode::Sample;
    proj.temperature = 1.0;

    fx.spec.lambda_user = 0.0;
    const TokenSeq at_zero = collab_decode_ar(fx.spec, 8, proj, 42, 1);
    TokenSeq prompt;
    prompt.ids = fx.spec.instruction.ids;
    const TokenSeq core_plain = ar_decode(fx.core, prompt, 8, proj, 42, 1);
    CHECK(at_zero.ids == core_plain.ids);

    fx.spec.lambda_user = 1.0;
    fx.spec.alpha = 0.0;
    const TokenSeq at_one = collab_decode_ar(fx.spec, 8, proj, 42, 1);
    TokenSeq dprompt;
    dprompt.ids = fx.spec.user_data.ids;
    dprompt.ids.insert(dprompt.ids.end(), fx.spec.instruction.ids.begin(),
                       fx.spec.instruction.ids.end());
    const TokenSeq user_plain = ar_decode(fx.user, dprompt, 8, proj, 42, 1);
    CHECK(at_one.ids == user_plain.ids);
}

TEST_CASE("collab spec validation") {
    CollabFixture fx;
    fx.spec.lambda_user = 1.5;
    CHECK_THROWS_AS(fx.spec.validate(), ConfigError);
    fx.spec.lambda_user = 0.5;
    fx.spec.alpha = -0.1;
    CHECK_THROWS_AS(fx.spec.validate(), ConfigError);
    fx.spec.alpha = 0.0;
    fx.spec.core = nullptr;
    CHECK_THROWS_AS(fx.spec.validate(), ConfigError);
}

TEST_SUITE_END();
