#include "simplexlm/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "simplexlm/checkpoint.hpp"
#include "simplexlm/errors.hpp"
#include "simplexlm/masking.hpp"

namespace simplexlm {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (block_size < 1) throw ConfigError("train: block_size must be >= 1");
    if (diffusion_steps < 1) throw ConfigError("train: diffusion_steps must be >= 1");
    if (self_cond_prob < 0.0 || self_cond_prob > 1.0) {
        throw ConfigError("train: self_cond_prob must be in [0, 1]");
    }
    if (learning_rate <= 0.0) throw ConfigError("train: learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
    if (k_scale <= 0.0) throw ConfigError("train: k must be > 0");
    if (t_range_lo < 0.0 || t_range_hi > 1.0 || t_range_lo >= t_range_hi) {
        throw ConfigError("train: t range must satisfy 0 <= lo < hi <= 1");
    }
    if (!resume.empty() && !init_from.empty()) {
        throw ConfigError("train: resume and init_from are mutually exclusive");
    }
}

PreparedExample prepare_example(const TokenSeq& prompt, const TokenSeq& response,
                                int block_size, TokenId eos_id, int pad_to,
                                TokenId pad_id) {
    if (response.empty()) {
        throw ContractError("prepare_example: response must be non-empty");
    }
    if (block_size < 1) {
        throw ConfigError("prepare_example: block_size must be >= 1");
    }
    PreparedExample out;
    out.prompt = prompt;
    out.response = response;
    out.response.eos_id = eos_id;

    const int len = response.length();
    const int padded = (len + block_size - 1) / block_size * block_size;
    // EOS padding inside the final block stays in the loss.
    for (int i = len; i < padded; ++i) {
        out.response.ids.push_back(eos_id);
    }
    out.loss_mask.assign(out.response.ids.size(), 1);

    if (pad_to > 0) {
        if (pad_to < padded || pad_to % block_size != 0) {
            throw ContractError("prepare_example: pad_to must be a block multiple >= padded length");
        }
        for (int i = padded; i < pad_to; ++i) {
            out.response.ids.push_back(pad_id);
            out.loss_mask.push_back(0);
        }
    }
    return out;
}

std::vector<Example> load_corpus(const std::string& path, const Tokenizer& tok) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open corpus: " + path);
    }
    std::vector<Example> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        Example ex;
        const size_t tab = line.find('\t');
        try {
            if (tab == std::string::npos) {
                // No prompt: anchor on a leading eos so the context is
                // never empty.
                ex.prompt.ids = {tok.eos_id()};
                ex.response = tok.encode(line);
            } else {
                ex.prompt = tok.encode(line.substr(0, tab));
                if (ex.prompt.empty()) {
                    ex.prompt.ids = {tok.eos_id()};
                }
                ex.response = tok.encode(line.substr(tab + 1));
            }
        } catch (const DomainError& e) {
            throw DomainError("corpus " + path + " line " + std::to_string(line_no) + ": " +
                              e.what());
        }
        if (ex.response.empty()) {
            throw DomainError("corpus " + path + " line " + std::to_string(line_no) +
                              ": empty response");
        }
        out.push_back(std::move(ex));
    }
    if (out.empty()) {
        throw DomainError("corpus " + path + ": no examples");
    }
    return out;
}

AdamState make_adam_state(const ModelDims& dims) {
    AdamState st;
    st.m = allocate_params(dims);
    st.v = allocate_params(dims);
    st.step = 0;
    return st;
}

void adam_step(DenoiserParams& p, const ParamGrads& g, AdamState& st,
               const TrainConfig& cfg) {
    st.step += 1;
    const double b1 = cfg.adam_beta1;
    const double b2 = cfg.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));

    auto params = collect_tensors(p);
    auto grads = collect_tensors(const_cast<ParamGrads&>(g));
    auto ms = collect_tensors(st.m);
    auto vs = collect_tensors(st.v);
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor32& pt = *params[i].second;
        const Matrix& gt = *grads[i].second;
        Tensor32& mt = *ms[i].second;
        Tensor32& vt = *vs[i].second;
        // Decay matrices and embedding tables, not vectors (norm gains,
        // biases).
        const bool decay = pt.rows > 1;
        for (size_t j = 0; j < pt.v.size(); ++j) {
            const double grad = gt.v[j];
            const double m = b1 * static_cast<double>(mt.v[j]) + (1.0 - b1) * grad;
            const double v = b2 * static_cast<double>(vt.v[j]) + (1.0 - b2) * grad * grad;
            mt.v[j] = static_cast<float>(m);
            vt.v[j] = static_cast<float>(v);
            double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
            if (decay) {
                update += cfg.weight_decay * static_cast<double>(pt.v[j]);
            }
            pt.v[j] = static_cast<float>(static_cast<double>(pt.v[j]) -
                                         cfg.learning_rate * update);
        }
    }
}

TrainStreams TrainStreams::from_seed(uint64_t seed) {
    TrainStreams s;
    s.data = Rng::stream(seed, "data");
    s.noise = Rng::stream(seed, "noise");
    s.branch = Rng::stream(seed, "branch");
    s.projection = Rng::stream(seed, "projection");
    return s;
}

namespace {

int sample_timestep(const TrainConfig& cfg, Rng& rng) {
    const int t_total = cfg.diffusion_steps;
    const int lo = static_cast<int>(std::floor(cfg.t_range_lo * t_total + 1e-9));
    const int hi = static_cast<int>(std::floor(cfg.t_range_hi * t_total + 1e-9));
    if (hi <= lo) {
        throw ConfigError("train: t range collapses to an empty integer range");
    }
    return lo + 1 + static_cast<int>(rng.below(static_cast<uint64_t>(hi - lo)));
}

struct ExampleForward {
    ModelInput input;
    Matrix self_cond_storage;
    std::vector<TokenId> targets;
    std::vector<uint8_t> loss_mask;
    std::vector<int> block_t;
};

ExampleForward build_example_forward(const PreparedExample& ex, const TrainConfig& cfg,
                                     const NoiseSchedule& schedule, int vocab, Rng& noise_rng) {
    ExampleForward ef;
    const int b = cfg.block_size;

    // Trailing blocks that are entirely loss-masked (batch padding past the
    // last block boundary) are dropped from the layout, so masked pad ids
    // can never reach the model and the loss is exactly invariant to them.
    TokenSeq response = ex.response;
    std::vector<uint8_t> loss_mask = ex.loss_mask;
    if (!loss_mask.empty()) {
        int n_eff = 0;
        for (int k = 0; k * b < response.length(); ++k) {
            for (int i = k * b; i < (k + 1) * b; ++i) {
                if (loss_mask[static_cast<size_t>(i)]) {
                    n_eff = k + 1;
                    break;
                }
            }
        }
        if (n_eff == 0) {
            throw ContractError("train: example is entirely loss-masked");
        }
        response.ids.resize(static_cast<size_t>(n_eff) * b);
        loss_mask.resize(static_cast<size_t>(n_eff) * b);
    }

    const ParallelLayout layout = layout_parallel_batch(ex.prompt, response, b);
    const int n = layout.block_count;

    ef.block_t.resize(static_cast<size_t>(n));
    int shared = 0;
    if (cfg.shared_t) {
        shared = sample_timestep(cfg, noise_rng);
    }
    for (int k = 0; k < n; ++k) {
        ef.block_t[static_cast<size_t>(k)] = cfg.shared_t ? shared : sample_timestep(cfg, noise_rng);
    }

    Matrix noisy(n * b, vocab);
    for (int k = 0; k < n; ++k) {
        TokenSeq block;
        block.ids.assign(layout.block_tokens.begin() + static_cast<size_t>(k) * b,
                         layout.block_tokens.begin() + static_cast<size_t>(k + 1) * b);
        SimplexLogits w0 = logits_initialization(block, vocab, cfg.k_scale);
        SimplexLogits wt = add_noise(w0, ef.block_t[static_cast<size_t>(k)], schedule, noise_rng);
        for (int i = 0; i < b; ++i) {
            std::copy(wt.values.row(i), wt.values.row(i) + vocab, noisy.row(k * b + i));
        }
    }

    ef.input.ctx_tokens = layout.clean_tokens;
    ef.input.ctx_positions = layout.clean_positions;
    // Shared context rows take the first block's timestep; decode-time
    // quantization already trains the context encoder to tolerate a
    // timestep mismatch with the block.
    ef.input.ctx_time = ef.block_t[0];
    ef.input.noisy = std::move(noisy);
    ef.input.block_positions = layout.block_positions;
    ef.input.block_times.resize(static_cast<size_t>(n) * b);
    for (int k = 0; k < n; ++k) {
        for (int i = 0; i < b; ++i) {
            ef.input.block_times[static_cast<size_t>(k * b + i)] = ef.block_t[static_cast<size_t>(k)];
        }
    }
    ef.input.mask = layout.mask;
    ef.targets = layout.block_tokens;
    ef.loss_mask = std::move(loss_mask);
    return ef;
}

// Sequential route for the equivalence spot check: block k conditions
// bidirectionally on its own noisy rows and causally on its clean prefix.
std::vector<double> sequential_block_losses(const DenoiserParams& params,
                                            const ExampleForward& ef,
                                            const PreparedExample& ex, int block_size) {
    std::vector<double> out;
    const int n = static_cast<int>(ef.block_t.size());
    const int vocab = params.dims.vocab;
    for (int k = 0; k < n; ++k) {
        std::vector<TokenId> ctx = ex.prompt.ids;
        ctx.insert(ctx.end(), ex.response.ids.begin(),
                   ex.response.ids.begin() + static_cast<size_t>(k) * block_size);
        Matrix noisy(block_size, vocab);
        for (int i = 0; i < block_size; ++i) {
            std::copy(ef.input.noisy.row(k * block_size + i),
                      ef.input.noisy.row(k * block_size + i) + vocab, noisy.row(i));
        }
        ModelInput in = make_block_input(ctx, std::move(noisy), nullptr,
                                         ef.block_t[static_cast<size_t>(k)], ef.input.ctx_time);
        Matrix logits = denoise_forward(params, in);
        std::vector<TokenId> targets(
            ef.targets.begin() + static_cast<size_t>(k) * block_size,
            ef.targets.begin() + static_cast<size_t>(k + 1) * block_size);
        double sum = 0.0;
        for (double nll : per_token_nll(logits, targets)) {
            sum += nll;
        }
        out.push_back(sum);
    }
    return out;
}

void scale_grads(ParamGrads& g, double factor) {
    for_each_tensor(g, [&](const std::string&, Matrix& t) {
        for (double& x : t.v) {
            x *= factor;
        }
    });
}

} // namespace

StepResult train_step(DenoiserParams& params, AdamState& adam,
                      const std::vector<PreparedExample>& batch, const TrainConfig& cfg,
                      const NoiseSchedule& schedule, TrainStreams& streams,
                      double self_cond_prob_override) {
    const double p_branch =
        self_cond_prob_override >= 0.0 ? self_cond_prob_override : cfg.self_cond_prob;
    StepResult res;
    res.self_conditioned = streams.branch.uniform() < p_branch;

    ParamGrads grads = make_grads(params.dims);

    double nll_sum = 0.0;
    int token_count = 0;
    for (const PreparedExample& ex : batch) {
        if (cfg.mode == TrainMode::Ar) {
            std::vector<TokenId> tokens = ex.prompt.ids;
            tokens.insert(tokens.end(), ex.response.ids.begin(), ex.response.ids.end());
            LossSums sums = ar_loss_and_grads(params, tokens, ex.prompt.length(),
                                              ex.loss_mask, &grads);
            res.forward_passes += 1;
            nll_sum += sums.nll_sum;
            token_count += sums.tokens;
            continue;
        }

        ExampleForward ef =
            build_example_forward(ex, cfg, schedule, params.dims.vocab, streams.noise);
        for (int t : ef.block_t) {
            res.sampled_t.push_back(t);
        }
        if (res.self_conditioned) {
            // Gradient-free first pass; its logits feed the second pass as
            // self-conditioning, same t and same noise.
            ef.self_cond_storage = denoise_forward(params, ef.input);
            ef.input.self_cond = &ef.self_cond_storage;
            res.forward_passes += 1;
        }
        LossSums sums =
            diffusion_loss_and_grads(params, ef.input, ef.targets, ef.loss_mask, &grads);
        res.forward_passes += 1;
        nll_sum += sums.nll_sum;
        token_count += sums.tokens;

        if (cfg.equiv_check_every > 0 && adam.step % cfg.equiv_check_every == 0 &&
            !res.self_conditioned && &ex == &batch.front()) {
            Matrix logits = denoise_forward(params, ef.input);
            const std::vector<double> nll = per_token_nll(logits, ef.targets);
            const std::vector<double> seq =
                sequential_block_losses(params, ef, ex, cfg.block_size);
            for (size_t k = 0; k < seq.size(); ++k) {
                double par = 0.0;
                for (int i = 0; i < cfg.block_size; ++i) {
                    par += nll[k * static_cast<size_t>(cfg.block_size) + static_cast<size_t>(i)];
                }
                const double rel = std::abs(par - seq[k]) / std::max(1e-12, std::abs(seq[k]));
                if (rel > 1e-4) {
                    throw NumericError("parallel/sequential loss equivalence violated at block " +
                                       std::to_string(k));
                }
            }
        }
    }

    if (token_count == 0) {
        throw ContractError("train_step: batch contains no in-loss tokens");
    }
    res.loss = nll_sum / token_count;
    if (!std::isfinite(res.loss)) {
        throw NumericError("train_step: non-finite loss");
    }
    scale_grads(grads, 1.0 / token_count);
    adam_step(params, grads, adam, cfg);
    return res;
}

namespace {

void append_rng_meta(CheckpointExtra& extra, const std::string& name, const Rng& rng) {
    const auto st = rng.state();
    for (int i = 0; i < Rng::kStateWords; ++i) {
        extra.meta.emplace_back("rng." + name + "." + std::to_string(i),
                                st[static_cast<size_t>(i)]);
    }
}

bool restore_rng_meta(const CheckpointExtra& extra, const std::string& name, Rng& rng) {
    std::array<uint64_t, Rng::kStateWords> st{};
    int found = 0;
    for (const auto& [key, value] : extra.meta) {
        for (int i = 0; i < Rng::kStateWords; ++i) {
            if (key == "rng." + name + "." + std::to_string(i)) {
                st[static_cast<size_t>(i)] = value;
                ++found;
            }
        }
    }
    if (found != Rng::kStateWords) {
        return false;
    }
    rng.restore(st);
    return true;
}

std::string checkpoint_name(const std::string& dir, int step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt-%06d.bin", step);
    return (fs::path(dir) / buf).string();
}

void save_train_checkpoint(const std::string& path, const DenoiserParams& params,
                           const AdamState& adam, const TrainStreams& streams, int step) {
    CheckpointExtra extra;
    for_each_tensor(const_cast<DenoiserParams&>(adam.m),
                    [&](const std::string& name, Tensor32& t) {
                        extra.tensors.emplace_back("adam.m." + name, t);
                    });
    for_each_tensor(const_cast<DenoiserParams&>(adam.v),
                    [&](const std::string& name, Tensor32& t) {
                        extra.tensors.emplace_back("adam.v." + name, t);
                    });
    extra.meta.emplace_back("train.step", static_cast<uint64_t>(step));
    extra.meta.emplace_back("adam.step", adam.step);
    append_rng_meta(extra, "data", streams.data);
    append_rng_meta(extra, "noise", streams.noise);
    append_rng_meta(extra, "branch", streams.branch);
    append_rng_meta(extra, "projection", streams.projection);
    save_params(params, path, &extra);
}

} // namespace

TrainRunResult train_loop(const std::vector<Example>& corpus, const ModelDims& dims,
                          const TrainConfig& cfg, std::ostream* loss_log) {
    cfg.validate();
    if (corpus.empty()) {
        throw ContractError("train_loop: corpus is empty");
    }
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
    }

    std::vector<PreparedExample> prepared;
    prepared.reserve(corpus.size());
    const TokenId eos = dims.vocab > 1 ? 1 : 0;
    for (const Example& ex : corpus) {
        const TokenId eos_id = ex.response.eos_id.value_or(eos);
        prepared.push_back(
            prepare_example(ex.prompt, ex.response, cfg.block_size, eos_id));
    }

    DenoiserParams params;
    AdamState adam;
    TrainStreams streams = TrainStreams::from_seed(cfg.seed);
    int start_step = 0;

    if (!cfg.resume.empty()) {
        CheckpointExtra extra;
        params = load_params(cfg.resume, &extra);
        adam = make_adam_state(params.dims);
        auto ms = collect_tensors(adam.m);
        auto vs = collect_tensors(adam.v);
        for (auto& [name, tensor] : extra.tensors) {
            for (auto& [pname, pt] : ms) {
                if (name == "adam.m." + pname) *pt = tensor;
            }
            for (auto& [pname, pt] : vs) {
                if (name == "adam.v." + pname) *pt = tensor;
            }
        }
        for (const auto& [key, value] : extra.meta) {
            if (key == "train.step") start_step = static_cast<int>(value);
            if (key == "adam.step") adam.step = value;
        }
        const bool ok = restore_rng_meta(extra, "data", streams.data) &&
                        restore_rng_meta(extra, "noise", streams.noise) &&
                        restore_rng_meta(extra, "branch", streams.branch) &&
                        restore_rng_meta(extra, "projection", streams.projection);
        if (!ok) {
            throw FormatError("resume checkpoint " + cfg.resume + " lacks rng state");
        }
    } else if (!cfg.init_from.empty()) {
        params = load_params(cfg.init_from, nullptr);
        adam = make_adam_state(params.dims);
    } else {
        params = init_params(dims, cfg.seed);
        adam = make_adam_state(dims);
    }

    const NoiseSchedule schedule =
        make_schedule(cfg.diffusion_steps, cfg.schedule, cfg.k_scale);

    TrainRunResult result;
    if (!cfg.out_dir.empty() && cfg.resume.empty()) {
        save_train_checkpoint(checkpoint_name(cfg.out_dir, start_step), params, adam,
                              streams, start_step);
    }

    for (int step = start_step + 1; step <= cfg.steps; ++step) {
        std::vector<PreparedExample> batch;
        batch.reserve(static_cast<size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            batch.push_back(prepared[streams.data.below(prepared.size())]);
        }
        const double p_eff = step <= cfg.warmup_steps ? 0.0 : cfg.self_cond_prob;
        StepResult sr;
        try {
            sr = train_step(params, adam, batch, cfg, schedule, streams, p_eff);
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(step) + ": " + e.what());
        }
        if (result.steps_run == 0) {
            result.first_loss = sr.loss;
        }
        result.last_loss = sr.loss;
        result.steps_run += 1;

        if (loss_log) {
            std::ostringstream line;
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.9g", sr.loss);
            line << step << '\t' << buf << '\t' << (sr.self_conditioned ? 1 : 0) << '\t';
            for (size_t i = 0; i < sr.sampled_t.size(); ++i) {
                if (i) line << ',';
                line << sr.sampled_t[i];
            }
            (*loss_log) << line.str() << '\n';
        }

        if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
            step % cfg.checkpoint_every == 0 && step != cfg.steps) {
            save_train_checkpoint(checkpoint_name(cfg.out_dir, step), params, adam, streams,
                                  step);
        }
    }

    if (!cfg.out_dir.empty()) {
        const std::string final_path =
            cfg.steps > start_step ? checkpoint_name(cfg.out_dir, cfg.steps)
                                   : checkpoint_name(cfg.out_dir, start_step);
        if (cfg.steps > start_step) {
            save_train_checkpoint(final_path, params, adam, streams, cfg.steps);
        }
        result.final_checkpoint = final_path;
    }
    result.final_params = std::move(params);
    return result;
}

} // namespace simplexlm
