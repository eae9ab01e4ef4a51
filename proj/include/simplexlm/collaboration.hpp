#pragma once

#include <vector>

#include "simplexlm/decoding.hpp"
#include "simplexlm/model.hpp"

namespace simplexlm {

// Inference-time ensemble of a large core model and a small user model.
// Only the user model sees the expert data D_user; both see the
// instruction. The user model never exposes its parameters to the core
// (nor vice versa) - the ensemble exchanges logits only.
struct CollabSpec {
    const DenoiserParams* core = nullptr;
    const DenoiserParams* user = nullptr;
    double lambda_user = 0.2;
    double alpha = 1.0; // contrastive weight on the no-expert-data pass
    TokenSeq user_data;   // D_user
    TokenSeq instruction; // w_inst

    void validate() const;
};

// (1 - lambda) * core + lambda * (1 + alpha) * user_with_data
//                     - lambda * alpha * user_without_data, elementwise.
Matrix combine_logits(const Matrix& core, const Matrix& user_with_data,
                      const Matrix& user_without_data, double lambda_user, double alpha);

// Per-iteration bookkeeping from the ensemble hook, for the invariant that
// all three forward passes consumed the identical noisy block.
struct CollabIterRecord {
    int t = 0;
    uint64_t noisy_sig = 0; // as seen by the two user passes
};

struct CollabResult {
    TokenSeq tokens;
    bool truncated = false;
    int rounds = 0;
    std::vector<DecodeTraceEntry> trace;      // driver (core) trace
    std::vector<CollabIterRecord> hook_trace; // user-side consumption records
};

// Block-level diffusion collaboration: at every timestep three forward
// passes run on the same noisy block (core on [inst, generated]; user on
// [D_user, inst, generated] and on [inst, generated]); their logits are
// combined before projection. Each model keeps its own self-conditioning
// stream of raw logits.
CollabResult collab_decode_diffusion(const CollabSpec& spec, const DecodeConfig& cfg);

// Token-level product-of-experts baseline over the same backbone in
// autoregressive mode.
TokenSeq collab_decode_ar(const CollabSpec& spec, int max_tokens,
                          const ProjectionConfig& proj, uint64_t seed, TokenId eos_id);

} // namespace simplexlm
