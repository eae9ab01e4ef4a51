#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "simplexlm/model.hpp"

namespace simplexlm {

// Extra payload carried alongside the model weights: optimizer moments as
// named tensors, scalar state (step counter, rng stream words) as named
// u64 metadata. Loading a plain model ignores whatever it does not ask for.
struct CheckpointExtra {
    std::vector<std::pair<std::string, Tensor32>> tensors;
    std::vector<std::pair<std::string, uint64_t>> meta;
};

// Self-describing binary container: magic + version, dimension header,
// named row-major float32 tensors, named u64 metadata, trailing CRC32.
// Writes go to a temp file renamed into place.
void save_params(const DenoiserParams& p, const std::string& path,
                 const CheckpointExtra* extra = nullptr);

DenoiserParams load_params(const std::string& path, CheckpointExtra* extra = nullptr);

} // namespace simplexlm
