#pragma once

#include <cstdint>
#include <vector>

#include "simplexlm/tokenizer.hpp"

namespace simplexlm {

// Attention-accessibility matrix delta(c0, n, B) over the training layout
// [ w^{<c0+(n-1)B} ; w~^{c0:c0+nB} ] of side c0 + (2n-1)B.
//
// Row regions (0-based):
//   - context rows i < c0+(n-1)B attend causally: delta[i][j] = (j <= i);
//   - diffusion-block k occupies rows [c0+(n-1+k)B, c0+(n+k)B) and attends
//     to the clean prefix j < c0+kB plus its own block, bidirectionally.
//
// One masked forward over this layout trains all n blocks of a sequence at
// once while reusing the uni-directionally encoded context.
struct BlockMask {
    int size = 0;
    int prompt_len = 0; // c0
    int block_count = 0; // n
    int block_size = 0; // B
    std::vector<uint8_t> allow; // size x size, row-major

    bool at(int i, int j) const { return allow[static_cast<size_t>(i) * size + j] != 0; }
};

BlockMask build_block_mask(int prompt_len, int block_count, int block_size);

// Causal size x size mask (j <= i), used by the autoregressive path.
BlockMask causal_mask(int size);

// Token layout for one masked parallel pass: the clean region
// (prompt + target up to the last block boundary) and the duplicated
// noisy-block region, with positional indices assigning ORIGINAL sequence
// positions to both regions.
struct ParallelLayout {
    std::vector<TokenId> clean_tokens;
    std::vector<int> clean_positions;
    std::vector<TokenId> block_tokens; // all n*B target tokens, in order
    std::vector<int> block_positions;  // c0 .. c0+nB-1
    int prompt_len = 0;
    int block_count = 0;
    int block_size = 0;
    BlockMask mask;
};

// Target length must already be a positive multiple of B (EOS padding is
// the trainer's job).
ParallelLayout layout_parallel_batch(const TokenSeq& prompt, const TokenSeq& target,
                                     int block_size);

} // namespace simplexlm
