#include "simplexlm/decoding.hpp"

#include <cmath>
#include <ostream>

#include "simplexlm/errors.hpp"

namespace simplexlm {

int quantize_timestep(int t, int q) {
    if (t < 0 || q < 1) {
        throw DomainError("quantize_timestep: need t >= 0 and Q >= 1");
    }
    return t - t % q;
}

void DecodeConfig::validate() const {
    if (diffusion_steps < 1) throw ConfigError("decode: diffusion_steps must be >= 1");
    if (stop_at < 0.0 || stop_at >= 1.0) {
        throw ConfigError("decode: stop_at must be in [0, 1)");
    }
    if (block_size < 1) throw ConfigError("decode: block_size must be >= 1");
    if (max_rounds < 1) throw ConfigError("decode: max_rounds must be >= 1");
    if (time_quant < 1) throw ConfigError("decode: time_quant must be >= 1");
    if (k_scale <= 0.0) throw ConfigError("decode: k must be > 0");
}

int DecodeConfig::stop_step() const {
    return static_cast<int>(std::floor(stop_at * diffusion_steps + 1e-9));
}

ShardTable ShardTable::single(const DenoiserParams& model, double lo) {
    ShardTable t;
    t.entries.push_back(ShardEntry{lo, 1.0, &model});
    return t;
}

void ShardTable::prepare(int total_steps) {
    if (entries.empty()) {
        throw ConfigError("shard table: no entries");
    }
    lo_steps.clear();
    hi_steps.clear();
    for (size_t i = 0; i < entries.size(); ++i) {
        const ShardEntry& e = entries[i];
        if (!e.model) {
            throw ConfigError("shard table: entry " + std::to_string(i) + " has no model");
        }
        if (!(e.lo < e.hi)) {
            throw ConfigError("shard table: entry " + std::to_string(i) + " has lo >= hi");
        }
        if (i > 0 && std::abs(entries[i - 1].hi - e.lo) > 1e-9) {
            throw ConfigError("shard table: ranges are not contiguous");
        }
        lo_steps.push_back(static_cast<int>(std::floor(e.lo * total_steps + 1e-9)));
        hi_steps.push_back(static_cast<int>(std::floor(e.hi * total_steps + 1e-9)));
    }
    if (std::abs(entries.back().hi - 1.0) > 1e-9) {
        throw ConfigError("shard table: last range must end at 1.0");
    }
}

int shard_select(int t, const ShardTable& table) {
    for (size_t i = 0; i < table.entries.size(); ++i) {
        if (t > table.lo_steps[i] && t <= table.hi_steps[i]) {
            return static_cast<int>(i);
        }
    }
    throw DispatchError("shard_select: t=" + std::to_string(t) +
                        " is outside every shard range (mis-specified shard table)");
}

BlockResult decode_block(const ShardTable& shards, const std::vector<TokenId>& context,
                         const DecodeConfig& cfg, Rng& noise_rng, Rng& proj_rng,
                         const EnsembleHook& hook, std::vector<CtxCache>* caches) {
    cfg.validate();
    if (context.empty()) {
        throw ContractError("decode_block: context must be non-empty");
    }
    ShardTable table = shards;
    table.prepare(cfg.diffusion_steps);
    std::vector<CtxCache> local_caches;
    if (!caches) {
        local_caches.resize(shards.entries.size());
        caches = &local_caches;
    } else if (caches->size() != shards.entries.size()) {
        caches->assign(shards.entries.size(), CtxCache{});
    }

    const NoiseSchedule schedule =
        make_schedule(cfg.diffusion_steps, cfg.schedule, cfg.k_scale);
    const int total = cfg.diffusion_steps;
    const int stop = cfg.stop_step();
    const int b = cfg.block_size;
    const int vocab = table.entries.front().model->dims.vocab;

    // w~_T ~ N(0, K^2 I)
    Matrix noisy(b, vocab);
    for (double& x : noisy.v) {
        x = cfg.k_scale * noise_rng.gaussian();
    }

    BlockResult res;
    Matrix prev_logits;
    bool has_prev = false;
    SimplexLogits projected;

    for (int t = total; t > stop; --t) {
        const int shard = shard_select(t, table);
        const DenoiserParams& model = *table.entries[static_cast<size_t>(shard)].model;
        const int t_q = quantize_timestep(t, cfg.time_quant);

        DecodeTraceEntry entry;
        entry.t = t;
        entry.shard = shard;
        entry.noisy_sig = matrix_checksum(noisy);
        entry.self_cond_absent = !has_prev;
        entry.self_cond_sig = has_prev ? matrix_checksum(prev_logits) : 0;

        Matrix logits;
        Matrix combined;
        try {
            bool recomputed = false;
            logits = decode_forward(model, context, noisy, has_prev ? &prev_logits : nullptr,
                                    t, t_q, (*caches)[static_cast<size_t>(shard)], &recomputed);
            entry.ctx_recomputed = recomputed;
            combined = hook ? hook(logits, noisy, t) : logits;
            if (!all_finite(combined)) {
                throw NumericError("non-finite logits");
            }
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (decode iteration t=" +
                               std::to_string(t) + ")");
        }
        entry.logits_sig = matrix_checksum(logits);
        entry.argmax_tokens = rows_argmax(combined);

        prev_logits = cfg.self_cond_from_combined ? combined : logits;
        has_prev = true;

        projected = logits_projection(SimplexLogits(std::move(combined), cfg.k_scale),
                                      cfg.projection, cfg.k_scale, proj_rng);
        SimplexLogits renoised = add_noise(projected, t - 1, schedule, noise_rng);
        noisy = std::move(renoised.values);

        res.trace.push_back(std::move(entry));
    }

    res.tokens = rows_argmax(projected.values);
    return res;
}

SequenceResult decode_sequence(const ShardTable& shards, const TokenSeq& prompt,
                               const DecodeConfig& cfg) {
    cfg.validate();
    const DenoiserParams& first = *shards.entries.front().model;
    std::vector<TokenId> context = prompt.ids;
    if (context.empty()) {
        context.push_back(cfg.eos_id);
    }
    if (static_cast<int>(context.size()) + cfg.block_size > first.dims.max_len) {
        throw ContractError("decode_sequence: prompt leaves no block of headroom");
    }

    Rng noise_rng = Rng::stream(cfg.seed, "decode.noise");
    Rng proj_rng = Rng::stream(cfg.seed, "decode.projection");
    std::vector<CtxCache> caches(shards.entries.size());

    SequenceResult res;
    res.tokens.eos_id = cfg.eos_id;
    for (int round = 0; round < cfg.max_rounds; ++round) {
        if (static_cast<int>(context.size()) + cfg.block_size > first.dims.max_len) {
            res.truncated = true;
            break;
        }
        BlockResult block =
            decode_block(shards, context, cfg, noise_rng, proj_rng, nullptr, &caches);
        res.rounds += 1;
        for (auto& e : block.trace) {
            res.trace.push_back(std::move(e));
        }

        bool saw_eos = false;
        for (TokenId id : block.tokens) {
            res.tokens.ids.push_back(id);
            context.push_back(id);
            if (id == cfg.eos_id) {
                saw_eos = true;
                break; // prune trailing tokens after the first eos
            }
        }
        if (saw_eos) {
            break;
        }
    }
    return res;
}

TokenSeq ar_decode(const DenoiserParams& model, const TokenSeq& prompt, int max_tokens,
                   const ProjectionConfig& proj, uint64_t seed, TokenId eos_id) {
    if (prompt.empty()) {
        throw ContractError("ar_decode: prompt must be non-empty");
    }
    Rng rng = Rng::stream(seed, "decode.projection");
    TokenSeq ctx = prompt;
    TokenSeq out;
    out.eos_id = eos_id;
    for (int i = 0; i < max_tokens; ++i) {
        if (ctx.length() >= model.dims.max_len) {
            break;
        }
        Matrix logits = ar_forward(model, ctx);
        Matrix last(1, logits.cols);
        std::copy(logits.row(logits.rows - 1), logits.row(logits.rows - 1) + logits.cols,
                  last.row(0));
        const TokenId id = project_tokens(last, proj, rng)[0];
        out.ids.push_back(id);
        ctx.ids.push_back(id);
        if (id == eos_id) {
            break;
        }
    }
    return out;
}

void write_trace(std::ostream& out, const std::vector<DecodeTraceEntry>& trace) {
    for (const auto& e : trace) {
        out << e.t << '\t' << e.shard << '\t' << (e.self_cond_absent ? "absent" : "prev")
            << '\t' << (e.ctx_recomputed ? 1 : 0) << '\t';
        for (size_t i = 0; i < e.argmax_tokens.size(); ++i) {
            if (i) out << ',';
            out << e.argmax_tokens[i];
        }
        out << '\n';
    }
}

} // namespace simplexlm
