#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "simplexlm/masking.hpp"
#include "simplexlm/rng.hpp"
#include "simplexlm/tensor.hpp"
#include "simplexlm/tokenizer.hpp"

namespace simplexlm {

struct ModelDims {
    int vocab = 64;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int ffn_hidden = 0; // 0 -> 4 * d_model
    int max_len = 256;
    int total_steps = 200; // T the time tables were built for
    int time_quant = 50;   // Q: granularity of the learned time tables
    bool tie_output = false;        // output head reuses emb_ctx
    bool absent_uniform = false;    // ABSENT self-cond as uniform instead of zero
    double input_temp = 1.0; // softmax temperature on noisy/self-cond logits

    int head_dim() const { return d_model / n_heads; }
    int ffn() const { return ffn_hidden > 0 ? ffn_hidden : 4 * d_model; }
    int time_entries() const { return total_steps / time_quant + 1; }
    // Table index for a raw timestep: quantize then divide.
    int time_index(int t) const;
    void validate() const;
};

template <class S>
struct LayerParamsT {
    Tens<S> ln1_g, ln1_b;
    Tens<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tens<S> ln2_g, ln2_b;
    Tens<S> w1, b1, w2, b2;
};

// All learnable weights. Parameters are float so the in-memory state is
// bit-identical to the 32-bit checkpoint representation; the same struct
// instantiated with double holds gradients.
template <class S>
struct ParamsT {
    ModelDims dims;
    Tens<S> emb_ctx;       // V x d, context token embeddings
    Tens<S> w_diff;        // V x d, applied to softmaxed noisy logits
    Tens<S> w_pred;        // V x d, applied to softmaxed self-conditioning logits
    Tens<S> emb_pos;       // max_len x d
    Tens<S> emb_diff_time; // time_entries x d
    Tens<S> emb_ctx_time;  // time_entries x d
    std::vector<LayerParamsT<S>> layers;
    Tens<S> lnf_g, lnf_b;
    Tens<S> w_out; // d x V; empty when tie_output
    Tens<S> b_out; // 1 x V

    auto& layer(int i) { return layers[static_cast<size_t>(i)]; }
    const auto& layer(int i) const { return layers[static_cast<size_t>(i)]; }
};

using DenoiserParams = ParamsT<float>;
using ParamGrads = ParamsT<double>;

// Fixed traversal order shared by init, serialization and the optimizer.
template <class S, class Fn>
void for_each_tensor(ParamsT<S>& p, Fn&& fn) {
    fn("emb_ctx", p.emb_ctx);
    fn("w_diff", p.w_diff);
    fn("w_pred", p.w_pred);
    fn("emb_pos", p.emb_pos);
    fn("emb_diff_time", p.emb_diff_time);
    fn("emb_ctx_time", p.emb_ctx_time);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        auto& lay = p.layers[l];
        fn(pre + "ln1_g", lay.ln1_g);
        fn(pre + "ln1_b", lay.ln1_b);
        fn(pre + "wq", lay.wq);
        fn(pre + "bq", lay.bq);
        fn(pre + "wk", lay.wk);
        fn(pre + "bk", lay.bk);
        fn(pre + "wv", lay.wv);
        fn(pre + "bv", lay.bv);
        fn(pre + "wo", lay.wo);
        fn(pre + "bo", lay.bo);
        fn(pre + "ln2_g", lay.ln2_g);
        fn(pre + "ln2_b", lay.ln2_b);
        fn(pre + "w1", lay.w1);
        fn(pre + "b1", lay.b1);
        fn(pre + "w2", lay.w2);
        fn(pre + "b2", lay.b2);
    }
    fn("lnf_g", p.lnf_g);
    fn("lnf_b", p.lnf_b);
    if (!p.dims.tie_output) {
        fn("w_out", p.w_out);
    }
    fn("b_out", p.b_out);
}

template <class S>
std::vector<std::pair<std::string, Tens<S>*>> collect_tensors(ParamsT<S>& p) {
    std::vector<std::pair<std::string, Tens<S>*>> out;
    for_each_tensor(p, [&](const std::string& name, Tens<S>& t) {
        out.emplace_back(name, &t);
    });
    return out;
}

DenoiserParams allocate_params(const ModelDims& dims); // zero-filled
DenoiserParams init_params(const ModelDims& dims, uint64_t seed);
ParamGrads make_grads(const ModelDims& dims);
void zero_grads(ParamGrads& g);
size_t param_count(const DenoiserParams& p);
uint64_t params_checksum(const DenoiserParams& p);

// One masked forward pass over the layout [context rows ; noisy block rows].
// When noisy is empty the input is a pure token sequence (autoregressive
// path) and ctx_time is ignored.
struct ModelInput {
    std::vector<TokenId> ctx_tokens;
    std::vector<int> ctx_positions;
    int ctx_time = 0; // raw t fed to the ctx-time table
    Matrix noisy;     // R x V
    const Matrix* self_cond = nullptr; // R x V, null = ABSENT
    std::vector<int> block_positions;
    std::vector<int> block_times; // per-row raw t
    BlockMask mask;   // (C+R) x (C+R)
};

ModelInput make_block_input(const std::vector<TokenId>& ctx_tokens, Matrix noisy,
                            const Matrix* self_cond, int t, int ctx_time_q);

// Embedding-combination stage: rows of the transformer input. Exposed for
// tests of the self-conditioning contribution.
Matrix build_input_hidden(const DenoiserParams& p, const ModelInput& in);

// Predicted logits for the diffusion-block rows only.
Matrix denoise_forward(const DenoiserParams& p, const ModelInput& in);

// Next-token logits, one row per prefix position (causal mask, no time
// embeddings). The same backbone weights serve as the autoregressive
// baseline.
Matrix ar_forward(const DenoiserParams& p, const TokenSeq& prefix);

struct LossSums {
    double nll_sum = 0.0;
    int tokens = 0;
    double mean() const { return tokens > 0 ? nll_sum / tokens : 0.0; }
};

// Per-row negative log-likelihood of each target under softmax(logits row).
std::vector<double> per_token_nll(const Matrix& logits, const std::vector<TokenId>& targets);

// Sum of token-level NLL over unmasked targets plus gradient accumulation
// (pass null to skip the backward pass). Diffusion mode: targets align to
// the block rows. loss_mask entries outside the loss contribute exactly
// zero gradient and zero loss.
LossSums diffusion_loss_and_grads(const DenoiserParams& p, const ModelInput& in,
                                  const std::vector<TokenId>& targets,
                                  const std::vector<uint8_t>& loss_mask,
                                  ParamGrads* grads);

// AR mode: row i predicts tokens[i+1]; loss over targets with index >=
// first_target (i.e. positions first_target..len-1).
LossSums ar_loss_and_grads(const DenoiserParams& p, const std::vector<TokenId>& tokens,
                           int first_target, const std::vector<uint8_t>& loss_mask,
                           ParamGrads* grads);

// Per-shard context encodings (per-layer K/V) reused across decode
// iterations while the quantized context timestep is unchanged.
struct CtxCache {
    int ctx_time = -1;
    uint64_t ctx_sig = 0;
    std::vector<Matrix> k; // per layer, C x d
    std::vector<Matrix> v;
    int recompute_count = 0;
};

// Single-block forward against a cached context. Numerically equivalent to
// denoise_forward over the delta(C, 1, B) layout.
Matrix decode_forward(const DenoiserParams& p, const std::vector<TokenId>& ctx_tokens,
                      const Matrix& noisy, const Matrix* self_cond, int t, int ctx_time_q,
                      CtxCache& cache, bool* ctx_recomputed = nullptr);

} // namespace simplexlm
