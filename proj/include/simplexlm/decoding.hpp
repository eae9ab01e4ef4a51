#pragma once

#include <functional>
#include <string>
#include <vector>

#include "simplexlm/model.hpp"
#include "simplexlm/simplex.hpp"

namespace simplexlm {

// Appendix-style timestep quantization: t_q = t - (t mod Q).
int quantize_timestep(int t, int q);

struct DecodeConfig {
    int diffusion_steps = 200; // T
    double stop_at = 0.4;      // iterate t in (stop_at*T, T]; 0 runs the full loop
    int block_size = 4;
    int max_rounds = 8;
    ProjectionConfig projection;
    uint64_t seed = 0;
    int time_quant = 50; // Q, context-encoding reuse granularity
    ScheduleKind schedule = ScheduleKind::Cosine;
    double k_scale = 5.0;
    bool self_cond_from_combined = false; // feed ensembled logits back as self-cond
    TokenId eos_id = 1;

    void validate() const;
    int stop_step() const; // floor(stop_at * T)
};

// Time-range shard: model used for t in (lo*T, hi*T].
struct ShardEntry {
    double lo = 0.0;
    double hi = 1.0;
    const DenoiserParams* model = nullptr;
};

struct ShardTable {
    std::vector<ShardEntry> entries; // ascending, contiguous, ending at 1.0
    std::vector<int> lo_steps;       // integer bounds, filled by prepare()
    std::vector<int> hi_steps;

    static ShardTable single(const DenoiserParams& model, double lo = 0.0);
    void prepare(int total_steps); // validates shape, computes integer bounds
};

// Index of the unique shard whose half-open range contains t; exact
// boundaries belong to the lower-labeled shard.
int shard_select(int t, const ShardTable& table);

struct DecodeTraceEntry {
    int t = 0;
    int shard = -1;
    bool self_cond_absent = true;
    uint64_t noisy_sig = 0;     // checksum of the w~_t consumed
    uint64_t logits_sig = 0;    // raw model logits produced (pre-ensemble)
    uint64_t self_cond_sig = 0; // checksum of the logits consumed as self-cond
    bool ctx_recomputed = false;
    std::vector<TokenId> argmax_tokens; // of the post-ensemble logits
};

// Ensemble point of the decode loop, applied to the raw logits before
// projection. Receives the same noisy block the model consumed.
using EnsembleHook =
    std::function<Matrix(const Matrix& logits, const Matrix& noisy, int t)>;

struct BlockResult {
    std::vector<TokenId> tokens;
    std::vector<DecodeTraceEntry> trace;
};

// Iterative denoising of one block: t = T down to stop_step()+1, with
// self-conditioning from the previous iteration (ABSENT at t=T),
// projection and re-noising at alpha_bar[t-1]. Returns the per-row argmax
// of the final projected representation. Context encodings are recomputed
// only when quantize_timestep(t, Q) changes (or the shard switches).
BlockResult decode_block(const ShardTable& shards, const std::vector<TokenId>& context,
                         const DecodeConfig& cfg, Rng& noise_rng, Rng& proj_rng,
                         const EnsembleHook& hook = nullptr,
                         std::vector<CtxCache>* caches = nullptr);

struct SequenceResult {
    TokenSeq tokens;        // generated tokens (prompt excluded); may end in eos
    bool truncated = false; // stopped because max_len ran out mid-round
    int rounds = 0;
    std::vector<DecodeTraceEntry> trace;
};

// Multi-round semi-autoregressive generation: each round appends the
// decoded block to the context; stops on max_rounds or the first block
// containing eos (pruned after the first eos).
SequenceResult decode_sequence(const ShardTable& shards, const TokenSeq& prompt,
                               const DecodeConfig& cfg);

// Plain autoregressive sampling from one model, the token-level baseline.
TokenSeq ar_decode(const DenoiserParams& model, const TokenSeq& prompt, int max_tokens,
                   const ProjectionConfig& proj, uint64_t seed, TokenId eos_id);

void write_trace(std::ostream& out, const std::vector<DecodeTraceEntry>& trace);

} // namespace simplexlm
