#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "simplexlm/model.hpp"
#include "simplexlm/rng.hpp"

namespace testutil {

using namespace simplexlm;

inline ModelDims tiny_dims(int vocab = 11, int d = 8, int layers = 1, int heads = 2,
                           int max_len = 32, int t_total = 10, int t_quant = 5) {
    ModelDims dims;
    dims.vocab = vocab;
    dims.d_model = d;
    dims.n_layers = layers;
    dims.n_heads = heads;
    dims.max_len = max_len;
    dims.total_steps = t_total;
    dims.time_quant = t_quant;
    return dims;
}

// Every tensor randomized, including biases and norm parameters, so
// gradient and oracle checks exercise all terms.
inline DenoiserParams random_params(const ModelDims& dims, uint64_t seed,
                                    double scale = 0.25) {
    DenoiserParams p = allocate_params(dims);
    Rng rng = Rng::stream(seed, "test.params");
    for_each_tensor(p, [&](const std::string& name, Tensor32& t) {
        const size_t dot = name.rfind('.');
        const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
        const bool is_gain = leaf.size() >= 2 && leaf.compare(0, 2, "ln") == 0 &&
                             leaf.back() == 'g';
        for (auto& x : t.v) {
            x = static_cast<float>((is_gain ? 1.0 : 0.0) + scale * rng.gaussian());
        }
    });
    return p;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("simplexlm-test-" + tag + "-" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

} // namespace testutil
