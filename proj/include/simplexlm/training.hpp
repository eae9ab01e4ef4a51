#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "simplexlm/model.hpp"
#include "simplexlm/simplex.hpp"
#include "simplexlm/tokenizer.hpp"

namespace simplexlm {

enum class TrainMode { Diffusion, Ar };

struct TrainConfig {
    int block_size = 4;           // B
    int diffusion_steps = 200;    // T
    double self_cond_prob = 0.5;  // p, Bernoulli for the two-pass branch
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 4;
    int steps = 1000;
    int warmup_steps = 0; // self-conditioning disabled (p forced to 0)
    uint64_t seed = 0;
    ScheduleKind schedule = ScheduleKind::Cosine;
    double k_scale = 5.0;
    bool shared_t = false; // one t across all blocks of an example
    // Time-range finetuning: t sampled from (lo*T, hi*T].
    double t_range_lo = 0.0;
    double t_range_hi = 1.0;
    TrainMode mode = TrainMode::Diffusion;
    int checkpoint_every = 500;
    int equiv_check_every = 0; // debug: verify parallel == sequential losses
    std::string out_dir;
    std::string resume;    // checkpoint with full train state
    std::string init_from; // weights only, fresh optimizer

    void validate() const;
};

struct Example {
    TokenSeq prompt;   // non-empty (corpus loader anchors empty prompts on eos)
    TokenSeq response; // non-empty
};

// EOS-padding scheme: the response is padded with eos up to the next
// multiple of B and that padding stays IN the loss; optional further
// padding to pad_to uses pad_id and is loss-masked.
struct PreparedExample {
    TokenSeq prompt;
    TokenSeq response;              // padded
    std::vector<uint8_t> loss_mask; // aligned to response
};

PreparedExample prepare_example(const TokenSeq& prompt, const TokenSeq& response,
                                int block_size, TokenId eos_id, int pad_to = 0,
                                TokenId pad_id = 0);

// UTF-8 text, one example per line, optional TAB between prompt and
// response. Lines without a prompt are anchored on a leading eos token.
std::vector<Example> load_corpus(const std::string& path, const Tokenizer& tok);

struct AdamState {
    DenoiserParams m; // first moments, same shapes as the params
    DenoiserParams v; // second moments
    uint64_t step = 0;
};

AdamState make_adam_state(const ModelDims& dims);

// Decoupled weight decay on matrix-shaped tensors; moments kept in float32
// with double-precision update arithmetic.
void adam_step(DenoiserParams& p, const ParamGrads& g, AdamState& st,
               const TrainConfig& cfg);

// Named rng sub-streams. Fixed serialization order: data, noise, branch,
// projection.
struct TrainStreams {
    Rng data;
    Rng noise;
    Rng branch;
    Rng projection;

    static TrainStreams from_seed(uint64_t seed);
};

struct StepResult {
    double loss = 0.0;
    bool self_conditioned = false;
    std::vector<int> sampled_t;
    int forward_passes = 0;
};

// One optimizer update over a batch: forward-noise every block, coin-flip
// self-conditioning with a gradient-free first pass, cross-entropy descent.
StepResult train_step(DenoiserParams& params, AdamState& adam,
                      const std::vector<PreparedExample>& batch, const TrainConfig& cfg,
                      const NoiseSchedule& schedule, TrainStreams& streams,
                      double self_cond_prob_override = -1.0);

struct TrainRunResult {
    double first_loss = 0.0;
    double last_loss = 0.0;
    int steps_run = 0;
    std::string final_checkpoint;
    DenoiserParams final_params;
};

// Full loop: periodic checkpoints (written atomically, with optimizer and
// rng state for bit-exact resume) plus a line-delimited loss log with
// fields: step, loss, branch, t-list.
TrainRunResult train_loop(const std::vector<Example>& corpus, const ModelDims& dims,
                          const TrainConfig& cfg, std::ostream* loss_log);

} // namespace simplexlm
