#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "simplexlm/cli.hpp"
#include "simplexlm/version.hpp"

namespace {

std::vector<double> parse_lambda_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(std::stod(item));
        }
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Simplex-space diffusion language model: training, denoising "
                 "decoding and inference-time model collaboration"};
    app.set_version_flag("--version", simplexlm::kVersionTag);
    app.require_subcommand(1);

    std::string config_path;
    std::string prompt;
    std::string prompt_file;
    std::string trace_path;
    std::string instruction;
    std::string expert_file;
    std::string lambda_csv;
    std::string expect;
    std::string heldout;
    int c0 = 0, n = 0, b = 0;

    auto* train = app.add_subcommand("train", "Train a model from a config file");
    train->add_option("--config", config_path, "config file")->required();

    auto* decode = app.add_subcommand("decode", "Generate text from a prompt");
    decode->add_option("--config", config_path, "config file")->required();
    auto* opt_prompt = decode->add_option("--prompt", prompt, "prompt text");
    auto* opt_pfile = decode->add_option("--prompt-file", prompt_file, "file with prompt text");
    decode->add_option("--trace", trace_path, "write per-iteration trace to this file");
    opt_prompt->excludes(opt_pfile);

    auto* collab = app.add_subcommand("collab", "Core/user ensemble decode, lambda sweep");
    collab->add_option("--config", config_path, "config file")->required();
    collab->add_option("--instruction", instruction, "shared instruction text")->required();
    collab->add_option("--expert-file", expert_file, "file with the user expert data")
        ->required();
    collab->add_option("--lambdas", lambda_csv, "comma-separated lambda_user values");
    collab->add_option("--expect", expect, "report whether this substring appears");

    auto* eval = app.add_subcommand("eval", "Fixed-t reconstruction probe on held-out data");
    eval->add_option("--config", config_path, "config file")->required();
    eval->add_option("--heldout", heldout, "held-out corpus file")->required();

    auto* mask = app.add_subcommand("mask-dump", "Print the block attention mask as 0/1 rows");
    mask->add_option("c0", c0, "prompt length")->required();
    mask->add_option("n", n, "block count")->required();
    mask->add_option("b", b, "block size")->required();

    CLI11_PARSE(app, argc, argv);

    if (train->parsed()) {
        return simplexlm::cmd_train(config_path, std::cout, std::cerr);
    }
    if (decode->parsed()) {
        if (prompt.empty() && prompt_file.empty()) {
            std::cerr << "decode: provide --prompt or --prompt-file\n";
            return 2;
        }
        const bool is_file = !prompt_file.empty();
        return simplexlm::cmd_decode(config_path, is_file ? prompt_file : prompt, is_file,
                                     trace_path, std::cout, std::cerr);
    }
    if (collab->parsed()) {
        std::vector<double> lambdas;
        try {
            lambdas = parse_lambda_list(lambda_csv);
        } catch (const std::exception&) {
            std::cerr << "collab: bad --lambdas list\n";
            return 2;
        }
        return simplexlm::cmd_collab(config_path, instruction, expert_file, lambdas, expect,
                                     std::cout, std::cerr);
    }
    if (eval->parsed()) {
        return simplexlm::cmd_eval(config_path, heldout, std::cout, std::cerr);
    }
    if (mask->parsed()) {
        return simplexlm::cmd_mask_dump(c0, n, b, std::cout, std::cerr);
    }
    return 2;
}
