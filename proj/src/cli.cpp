#include "simplexlm/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "simplexlm/checkpoint.hpp"
#include "simplexlm/collaboration.hpp"
#include "simplexlm/config.hpp"
#include "simplexlm/decoding.hpp"
#include "simplexlm/errors.hpp"
#include "simplexlm/training.hpp"
#include "simplexlm/version.hpp"

namespace simplexlm {

namespace fs = std::filesystem;

namespace {

int run_guarded(const std::function<void()>& fn, std::ostream& err) {
    try {
        fn();
        return 0;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << '\n';
        return 3;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << '\n';
        return 4;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << '\n';
        return 4;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DomainError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const ContractError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
}

Tokenizer load_tokenizer(const ConfigFile& cfg) {
    const std::string map_path = cfg.get_str("data", "token_map", "");
    return map_path.empty() ? Tokenizer::default_charset() : Tokenizer::from_file(map_path);
}

void write_run_metadata(const ConfigFile& cfg, const std::string& command,
                        uint64_t seed) {
    const std::string dir = cfg.get_str("run", "out_dir", "runs");
    fs::create_directories(dir);
    std::ofstream meta(fs::path(dir) / ("run-meta-" + command + ".txt"));
    if (!meta) {
        throw IoError("cannot write run metadata under " + dir);
    }
    meta << "version = " << kVersionTag << '\n';
    meta << "command = " << command << '\n';
    meta << "seed = " << seed << '\n';
    meta << "config_file = " << cfg.name() << '\n';
    meta << "--- config snapshot ---\n";
    meta << cfg.render();
}

ScheduleKind schedule_from_cfg(const ConfigFile& cfg) {
    return schedule_kind_from_string(cfg.get_str("diffusion", "schedule", "cosine"));
}

ProjectionConfig projection_from_cfg(const ConfigFile& cfg) {
    ProjectionConfig proj;
    proj.mode = projection_mode_from_string(cfg.get_str("decode", "projection", "top-p"));
    proj.top_p = cfg.get_double("decode", "top_p", 0.99);
    proj.temperature = cfg.get_double("decode", "temperature", 1.0);
    return proj;
}

DecodeConfig decode_from_cfg(const ConfigFile& cfg, TokenId eos_id) {
    DecodeConfig dc;
    dc.diffusion_steps = cfg.get_int("diffusion", "steps", 200);
    dc.block_size = cfg.get_int("diffusion", "block_size", 4);
    dc.k_scale = cfg.get_double("diffusion", "k", 5.0);
    dc.schedule = schedule_from_cfg(cfg);
    dc.stop_at = cfg.get_double("decode", "stop_at", 0.4);
    dc.max_rounds = cfg.get_int("decode", "max_rounds", 8);
    dc.projection = projection_from_cfg(cfg);
    dc.seed = cfg.get_u64("decode", "seed", 0);
    dc.time_quant = cfg.get_int("decode", "time_quant", 50);
    dc.self_cond_from_combined = cfg.get_bool("decode", "self_cond_from_combined", false);
    dc.eos_id = eos_id;
    dc.validate();
    return dc;
}

// Shard syntax: "lo:hi:checkpoint-path". A plain "checkpoint" key is the
// unsharded single-model table.
struct LoadedModels {
    std::vector<DenoiserParams> storage;
    ShardTable table;
};

LoadedModels load_decode_models(const ConfigFile& cfg, double stop_at) {
    LoadedModels lm;
    const std::vector<std::string> shard_specs = cfg.get_all("decode", "shard");
    if (!shard_specs.empty()) {
        lm.storage.reserve(shard_specs.size());
        std::vector<std::pair<double, double>> ranges;
        for (const std::string& spec : shard_specs) {
            const size_t c1 = spec.find(':');
            const size_t c2 = c1 == std::string::npos ? std::string::npos
                                                      : spec.find(':', c1 + 1);
            if (c1 == std::string::npos || c2 == std::string::npos) {
                throw ConfigError("decode shard '" + spec + "': expected lo:hi:path");
            }
            double lo = 0.0, hi = 0.0;
            try {
                lo = std::stod(spec.substr(0, c1));
                hi = std::stod(spec.substr(c1 + 1, c2 - c1 - 1));
            } catch (const std::exception&) {
                throw ConfigError("decode shard '" + spec + "': bad range bounds");
            }
            ranges.emplace_back(lo, hi);
            lm.storage.push_back(load_params(spec.substr(c2 + 1)));
        }
        for (size_t i = 0; i < ranges.size(); ++i) {
            lm.table.entries.push_back(
                ShardEntry{ranges[i].first, ranges[i].second, &lm.storage[i]});
        }
    } else {
        const std::string path = cfg.require_str("decode", "checkpoint");
        lm.storage.push_back(load_params(path));
        lm.table = ShardTable::single(lm.storage.back(), stop_at);
        lm.table.entries[0].model = &lm.storage.back();
    }
    return lm;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open: " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) {
        text.pop_back();
    }
    return text;
}

} // namespace

int cmd_train(const std::string& config_path, std::ostream& out, std::ostream& err) {
    return run_guarded(
        [&] {
            const ConfigFile cfg = ConfigFile::parse_file(config_path);
            const Tokenizer tok = load_tokenizer(cfg);

            ModelDims dims;
            dims.vocab = tok.vocab_size();
            dims.d_model = cfg.get_int("model", "d_model", 128);
            dims.n_layers = cfg.get_int("model", "layers", 4);
            dims.n_heads = cfg.get_int("model", "heads", 4);
            dims.ffn_hidden = cfg.get_int("model", "ffn", 0);
            dims.max_len = cfg.get_int("model", "max_len", 256);
            dims.time_quant = cfg.get_int("model", "time_quant", 50);
            dims.tie_output = cfg.get_bool("model", "tie_output", false);
            dims.absent_uniform = cfg.get_bool("model", "absent_uniform", false);
            dims.input_temp = cfg.get_double("model", "input_temp", 1.0);
            dims.total_steps = cfg.get_int("diffusion", "steps", 200);
            dims.validate();

            TrainConfig tc;
            tc.block_size = cfg.get_int("diffusion", "block_size", 4);
            tc.diffusion_steps = dims.total_steps;
            tc.k_scale = cfg.get_double("diffusion", "k", 5.0);
            tc.schedule = schedule_from_cfg(cfg);
            tc.self_cond_prob = cfg.get_double("train", "self_cond_prob", 0.5);
            tc.learning_rate = cfg.get_double("train", "learning_rate", 1e-4);
            tc.weight_decay = cfg.get_double("train", "weight_decay", 0.01);
            tc.batch_size = cfg.get_int("train", "batch_size", 4);
            tc.steps = cfg.get_int("train", "steps", 1000);
            tc.warmup_steps = cfg.get_int("train", "warmup_steps", 0);
            tc.seed = cfg.get_u64("train", "seed", 0);
            tc.shared_t = cfg.get_bool("train", "shared_t", false);
            tc.t_range_lo = cfg.get_double("train", "t_lo", 0.0);
            tc.t_range_hi = cfg.get_double("train", "t_hi", 1.0);
            tc.checkpoint_every = cfg.get_int("train", "checkpoint_every", 500);
            tc.equiv_check_every = cfg.get_int("train", "equiv_check_every", 0);
            tc.out_dir = cfg.get_str("train", "out_dir", "runs/train");
            tc.resume = cfg.get_str("train", "resume", "");
            tc.init_from = cfg.get_str("train", "init_from", "");
            const std::string mode = cfg.get_str("train", "mode", "diffusion");
            if (mode == "ar") {
                tc.mode = TrainMode::Ar;
            } else if (mode == "diffusion") {
                tc.mode = TrainMode::Diffusion;
            } else {
                throw ConfigError("train: mode must be diffusion or ar");
            }
            tc.validate();

            const std::string corpus_path = cfg.require_str("train", "corpus");
            const std::vector<Example> corpus = load_corpus(corpus_path, tok);

            write_run_metadata(cfg, "train", tc.seed);
            fs::create_directories(tc.out_dir);
            std::ofstream loss_log(fs::path(tc.out_dir) / "loss-log.tsv");
            if (!loss_log) {
                throw IoError("cannot write loss log under " + tc.out_dir);
            }

            const TrainRunResult res = train_loop(corpus, dims, tc, &loss_log);
            out << "params\t" << param_count(res.final_params) << '\n';
            out << "steps\t" << res.steps_run << '\n';
            out << "first_loss\t" << res.first_loss << '\n';
            out << "last_loss\t" << res.last_loss << '\n';
            out << "checkpoint\t" << res.final_checkpoint << '\n';
            (void)err;
        },
        err);
}

int cmd_decode(const std::string& config_path, const std::string& prompt,
               bool prompt_is_file, const std::string& trace_path, std::ostream& out,
               std::ostream& err) {
    return run_guarded(
        [&] {
            const ConfigFile cfg = ConfigFile::parse_file(config_path);
            const Tokenizer tok = load_tokenizer(cfg);
            const DecodeConfig dc = decode_from_cfg(cfg, tok.eos_id());
            LoadedModels lm = load_decode_models(cfg, dc.stop_at);
            for (const auto& entry : lm.table.entries) {
                if (entry.model->dims.vocab != tok.vocab_size()) {
                    throw ConfigError("decode: checkpoint vocab does not match tokenizer");
                }
            }

            const std::string prompt_text =
                prompt_is_file ? read_text_file(prompt) : prompt;
            const TokenSeq prompt_ids = tok.encode(prompt_text);

            write_run_metadata(cfg, "decode", dc.seed);
            const SequenceResult res = decode_sequence(lm.table, prompt_ids, dc);
            out << tok.decode(res.tokens.ids) << '\n';
            if (res.truncated) {
                err << "note: generation truncated at max_len\n";
            }
            if (!trace_path.empty()) {
                std::ofstream tf(trace_path);
                if (!tf) {
                    throw IoError("cannot write trace: " + trace_path);
                }
                write_trace(tf, res.trace);
            }
        },
        err);
}

int cmd_collab(const std::string& config_path, const std::string& instruction,
               const std::string& expert_file, const std::vector<double>& lambdas,
               const std::string& expect, std::ostream& out, std::ostream& err) {
    return run_guarded(
        [&] {
            const ConfigFile cfg = ConfigFile::parse_file(config_path);
            const Tokenizer tok = load_tokenizer(cfg);
            const DecodeConfig dc = decode_from_cfg(cfg, tok.eos_id());

            const DenoiserParams core = load_params(cfg.require_str("collab", "core"));
            const DenoiserParams user = load_params(cfg.require_str("collab", "user"));
            if (core.dims.vocab != tok.vocab_size() || user.dims.vocab != tok.vocab_size()) {
                throw ConfigError("collab: checkpoint vocab does not match tokenizer");
            }

            CollabSpec spec;
            spec.core = &core;
            spec.user = &user;
            spec.alpha = cfg.get_double("collab", "alpha", 1.0);
            spec.instruction = tok.encode(instruction);
            spec.user_data = tok.encode(read_text_file(expert_file));

            const std::string mode = cfg.get_str("collab", "mode", "diffusion");
            const int max_tokens = cfg.get_int("collab", "max_tokens",
                                               dc.block_size * dc.max_rounds);

            write_run_metadata(cfg, "collab", dc.seed);
            std::vector<double> lams = lambdas;
            if (lams.empty()) {
                lams.push_back(cfg.get_double("collab", "lambda", 0.2));
            }
            // One row per lambda: lambda, token count, expert-hit flag,
            // decoded text.
            for (double lam : lams) {
                spec.lambda_user = lam;
                spec.validate();
                std::string text;
                int n_tokens = 0;
                if (mode == "autoregressive" || mode == "ar") {
                    const TokenSeq seq =
                        collab_decode_ar(spec, max_tokens, dc.projection, dc.seed, dc.eos_id);
                    text = tok.decode(seq.ids);
                    n_tokens = seq.length();
                } else if (mode == "diffusion") {
                    const CollabResult res = collab_decode_diffusion(spec, dc);
                    text = tok.decode(res.tokens.ids);
                    n_tokens = res.tokens.length();
                } else {
                    throw ConfigError("collab: mode must be diffusion or autoregressive");
                }
                out << lam << '\t' << n_tokens << '\t';
                if (expect.empty()) {
                    out << '-';
                } else {
                    out << (text.find(expect) != std::string::npos ? 1 : 0);
                }
                out << '\t' << text << '\n';
            }
        },
        err);
}

int cmd_eval(const std::string& config_path, const std::string& heldout_path,
             std::ostream& out, std::ostream& err) {
    return run_guarded(
        [&] {
            const ConfigFile cfg = ConfigFile::parse_file(config_path);
            const Tokenizer tok = load_tokenizer(cfg);
            const DenoiserParams model = load_params(cfg.require_str("eval", "checkpoint"));
            if (model.dims.vocab != tok.vocab_size()) {
                throw ConfigError("eval: checkpoint vocab does not match tokenizer");
            }
            const int t_total = cfg.get_int("diffusion", "steps", 200);
            const int block = cfg.get_int("diffusion", "block_size", 4);
            const double k = cfg.get_double("diffusion", "k", 5.0);
            const NoiseSchedule schedule = make_schedule(t_total, schedule_from_cfg(cfg), k);
            const uint64_t seed = cfg.get_u64("eval", "seed", 0);

            const std::vector<Example> heldout = load_corpus(heldout_path, tok);
            write_run_metadata(cfg, "eval", seed);

            // Reconstruction probe: noise every block at a fixed t and
            // measure mean cross-entropy of the true tokens.
            Rng noise = Rng::stream(seed, "eval.noise");
            out << "t\tfraction\tmean_ce\n";
            for (double frac : {0.2, 0.5, 0.8}) {
                const int t = std::max(1, static_cast<int>(std::floor(frac * t_total + 1e-9)));
                double nll_sum = 0.0;
                int tokens = 0;
                for (const Example& ex : heldout) {
                    const PreparedExample pe =
                        prepare_example(ex.prompt, ex.response, block, tok.eos_id());
                    const ParallelLayout layout =
                        layout_parallel_batch(pe.prompt, pe.response, block);
                    Matrix noisy(layout.block_count * block, tok.vocab_size());
                    for (int kk = 0; kk < layout.block_count; ++kk) {
                        TokenSeq blk;
                        blk.ids.assign(
                            layout.block_tokens.begin() + static_cast<size_t>(kk) * block,
                            layout.block_tokens.begin() + static_cast<size_t>(kk + 1) * block);
                        const SimplexLogits w0 =
                            logits_initialization(blk, tok.vocab_size(), k);
                        const SimplexLogits wt = add_noise(w0, t, schedule, noise);
                        for (int i = 0; i < block; ++i) {
                            std::copy(wt.values.row(i), wt.values.row(i) + wt.values.cols,
                                      noisy.row(kk * block + i));
                        }
                    }
                    ModelInput in;
                    in.ctx_tokens = layout.clean_tokens;
                    in.ctx_positions = layout.clean_positions;
                    in.ctx_time = t;
                    in.noisy = std::move(noisy);
                    in.block_positions = layout.block_positions;
                    in.block_times.assign(layout.block_positions.size(), t);
                    in.mask = layout.mask;
                    const Matrix logits = denoise_forward(model, in);
                    const std::vector<double> nll = per_token_nll(logits, layout.block_tokens);
                    for (size_t i = 0; i < nll.size(); ++i) {
                        if (pe.loss_mask[i]) {
                            nll_sum += nll[i];
                            tokens += 1;
                        }
                    }
                }
                out << t << '\t' << frac << '\t' << (tokens ? nll_sum / tokens : 0.0)
                    << '\n';
            }
        },
        err);
}

int cmd_mask_dump(int prompt_len, int block_count, int block_size, std::ostream& out,
                  std::ostream& err) {
    return run_guarded(
        [&] {
            if (prompt_len < 1 || block_count < 1 || block_size < 1) {
                err << "usage: mask-dump C0 N B  (all arguments must be >= 1)\n";
                throw ConfigError("mask-dump: arguments must be >= 1");
            }
            const BlockMask mask = build_block_mask(prompt_len, block_count, block_size);
            for (int i = 0; i < mask.size; ++i) {
                for (int j = 0; j < mask.size; ++j) {
                    out << (mask.at(i, j) ? '1' : '0');
                }
                out << '\n';
            }
        },
        err);
}

} // namespace simplexlm
