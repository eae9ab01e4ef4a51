#include "simplexlm/masking.hpp"

#include <string>

#include "simplexlm/errors.hpp"

namespace simplexlm {

BlockMask build_block_mask(int prompt_len, int block_count, int block_size) {
    if (prompt_len < 1 || block_count < 1 || block_size < 1) {
        throw ConfigError("build_block_mask: c0, n and B must all be >= 1");
    }
    const int c0 = prompt_len;
    const int n = block_count;
    const int b = block_size;
    const int size = c0 + (2 * n - 1) * b;
    const int context_rows = c0 + (n - 1) * b;

    BlockMask m;
    m.size = size;
    m.prompt_len = c0;
    m.block_count = n;
    m.block_size = b;
    m.allow.assign(static_cast<size_t>(size) * size, 0);

    for (int i = 0; i < size; ++i) {
        uint8_t* row = m.allow.data() + static_cast<size_t>(i) * size;
        if (i < context_rows) {
            for (int j = 0; j <= i; ++j) {
                row[j] = 1;
            }
        } else {
            const int k = (i - context_rows) / b;
            for (int j = 0; j < c0 + k * b; ++j) {
                row[j] = 1;
            }
            const int own_begin = c0 + (n - 1 + k) * b;
            for (int j = own_begin; j < own_begin + b; ++j) {
                row[j] = 1;
            }
        }
    }
    return m;
}

BlockMask causal_mask(int size) {
    BlockMask m;
    m.size = size;
    m.allow.assign(static_cast<size_t>(size) * size, 0);
    for (int i = 0; i < size; ++i) {
        uint8_t* row = m.allow.data() + static_cast<size_t>(i) * size;
        for (int j = 0; j <= i; ++j) {
            row[j] = 1;
        }
    }
    return m;
}

ParallelLayout layout_parallel_batch(const TokenSeq& prompt, const TokenSeq& target,
                                     int block_size) {
    if (block_size < 1) {
        throw ConfigError("layout_parallel_batch: B must be >= 1");
    }
    if (prompt.empty()) {
        throw ContractError("layout_parallel_batch: prompt must be non-empty");
    }
    if (target.empty() || target.length() % block_size != 0) {
        throw ContractError(
            "layout_parallel_batch: target length " + std::to_string(target.length()) +
            " is not a positive multiple of B=" + std::to_string(block_size));
    }
    const int c0 = prompt.length();
    const int n = target.length() / block_size;

    ParallelLayout layout;
    layout.prompt_len = c0;
    layout.block_count = n;
    layout.block_size = block_size;

    layout.clean_tokens = prompt.ids;
    layout.clean_tokens.insert(layout.clean_tokens.end(), target.ids.begin(),
                               target.ids.begin() + static_cast<size_t>(n - 1) * block_size);
    layout.clean_positions.resize(layout.clean_tokens.size());
    for (size_t i = 0; i < layout.clean_positions.size(); ++i) {
        layout.clean_positions[i] = static_cast<int>(i);
    }

    layout.block_tokens = target.ids;
    layout.block_positions.resize(target.ids.size());
    for (size_t i = 0; i < layout.block_positions.size(); ++i) {
        layout.block_positions[i] = c0 + static_cast<int>(i);
    }

    layout.mask = build_block_mask(c0, n, block_size);
    return layout;
}

} // namespace simplexlm
