#include "simplexlm/collaboration.hpp"

#include <algorithm>

#include "simplexlm/errors.hpp"

namespace simplexlm {

void CollabSpec::validate() const {
    if (!core || !user) {
        throw ConfigError("collab: both core and user models are required");
    }
    if (core->dims.vocab != user->dims.vocab) {
        throw ConfigError("collab: core and user vocabularies differ");
    }
    if (lambda_user < 0.0 || lambda_user > 1.0) {
        throw ConfigError("collab: lambda_user must be in [0, 1]");
    }
    if (alpha < 0.0) {
        throw ConfigError("collab: alpha must be >= 0");
    }
}

Matrix combine_logits(const Matrix& core, const Matrix& user_with_data,
                      const Matrix& user_without_data, double lambda_user, double alpha) {
    if (core.rows != user_with_data.rows || core.cols != user_with_data.cols ||
        core.rows != user_without_data.rows || core.cols != user_without_data.cols) {
        throw ContractError("combine_logits: input shapes differ");
    }
    Matrix out(core.rows, core.cols);
    const double w_core = 1.0 - lambda_user;
    const double w_with = lambda_user * (1.0 + alpha);
    const double w_without = lambda_user * alpha;
    for (size_t i = 0; i < out.v.size(); ++i) {
        out.v[i] = w_core * core.v[i] + w_with * user_with_data.v[i] -
                   w_without * user_without_data.v[i];
    }
    return out;
}

namespace {

std::vector<TokenId> concat(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    std::vector<TokenId> out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

} // namespace

CollabResult collab_decode_diffusion(const CollabSpec& spec, const DecodeConfig& cfg) {
    spec.validate();
    cfg.validate();
    const ModelDims& core_dims = spec.core->dims;
    const ModelDims& user_dims = spec.user->dims;

    std::vector<TokenId> generated;
    ShardTable core_table = ShardTable::single(*spec.core, cfg.stop_at);

    Rng noise_rng = Rng::stream(cfg.seed, "decode.noise");
    Rng proj_rng = Rng::stream(cfg.seed, "decode.projection");
    std::vector<CtxCache> core_caches(1);
    CtxCache cache_with, cache_without;

    CollabResult res;
    res.tokens.eos_id = cfg.eos_id;

    for (int round = 0; round < cfg.max_rounds; ++round) {
        const std::vector<TokenId> core_ctx = concat(spec.instruction.ids, generated);
        const std::vector<TokenId> user_with_ctx =
            concat(concat(spec.user_data.ids, spec.instruction.ids), generated);
        const std::vector<TokenId> user_without_ctx = core_ctx;
        if (core_ctx.empty()) {
            throw ContractError("collab: instruction must be non-empty");
        }
        if (static_cast<int>(core_ctx.size()) + cfg.block_size > core_dims.max_len ||
            static_cast<int>(user_with_ctx.size()) + cfg.block_size > user_dims.max_len) {
            res.truncated = true;
            break;
        }

        // Per-model self-conditioning streams for this block; reset at t=T.
        Matrix prev_with, prev_without;
        bool has_prev = false;

        EnsembleHook hook = [&](const Matrix& core_logits, const Matrix& noisy,
                                int t) -> Matrix {
            const int t_q = quantize_timestep(t, cfg.time_quant);
            Matrix with_logits =
                decode_forward(*spec.user, user_with_ctx, noisy,
                               has_prev ? &prev_with : nullptr, t, t_q, cache_with);
            Matrix without_logits =
                decode_forward(*spec.user, user_without_ctx, noisy,
                               has_prev ? &prev_without : nullptr, t, t_q, cache_without);
            res.hook_trace.push_back(CollabIterRecord{t, matrix_checksum(noisy)});
            Matrix combined = combine_logits(core_logits, with_logits, without_logits,
                                             spec.lambda_user, spec.alpha);
            if (cfg.self_cond_from_combined) {
                prev_with = combined;
                prev_without = combined;
            } else {
                prev_with = std::move(with_logits);
                prev_without = std::move(without_logits);
            }
            has_prev = true;
            return combined;
        };

        BlockResult block =
            decode_block(core_table, core_ctx, cfg, noise_rng, proj_rng, hook, &core_caches);
        res.rounds += 1;
        for (auto& e : block.trace) {
            res.trace.push_back(std::move(e));
        }

        bool saw_eos = false;
        for (TokenId id : block.tokens) {
            res.tokens.ids.push_back(id);
            generated.push_back(id);
            if (id == cfg.eos_id) {
                saw_eos = true;
                break;
            }
        }
        if (saw_eos) {
            break;
        }
    }
    return res;
}

TokenSeq collab_decode_ar(const CollabSpec& spec, int max_tokens,
                          const ProjectionConfig& proj, uint64_t seed, TokenId eos_id) {
    spec.validate();
    Rng rng = Rng::stream(seed, "decode.projection");

    std::vector<TokenId> generated;
    TokenSeq out;
    out.eos_id = eos_id;
    for (int i = 0; i < max_tokens; ++i) {
        TokenSeq core_ctx(concat(spec.instruction.ids, generated));
        TokenSeq with_ctx(
            concat(concat(spec.user_data.ids, spec.instruction.ids), generated));
        if (core_ctx.length() >= spec.core->dims.max_len ||
            with_ctx.length() >= spec.user->dims.max_len) {
            break;
        }
        auto last_row = [](const Matrix& logits) {
            Matrix row(1, logits.cols);
            std::copy(logits.row(logits.rows - 1), logits.row(logits.rows - 1) + logits.cols,
                      row.row(0));
            return row;
        };
        const Matrix core_logits = last_row(ar_forward(*spec.core, core_ctx));
        const Matrix with_logits = last_row(ar_forward(*spec.user, with_ctx));
        const Matrix without_logits = last_row(ar_forward(*spec.user, core_ctx));
        const Matrix combined = combine_logits(core_logits, with_logits, without_logits,
                                               spec.lambda_user, spec.alpha);
        const TokenId id = project_tokens(combined, proj, rng)[0];
        out.ids.push_back(id);
        generated.push_back(id);
        if (id == eos_id) {
            break;
        }
    }
    return out;
}

} // namespace simplexlm
