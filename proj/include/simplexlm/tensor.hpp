#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace simplexlm {

// Dense row-major 2-D tensor. Activations and gradients use double
// (Matrix); learned parameters are stored as float (Tensor32) to match the
// 32-bit checkpoint format bit-for-bit, and are widened to double at the
// point of use.
template <class S>
struct Tens {
    int rows = 0;
    int cols = 0;
    std::vector<S> v;

    Tens() = default;
    Tens(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, S(0)) {}

    S& operator()(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    S operator()(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    S* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const S* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return v.size(); }
    void zero() { v.assign(v.size(), S(0)); }
};

using Matrix = Tens<double>;
using Tensor32 = Tens<float>;

// out (+)= a * b
template <class SB>
void matmul(const Matrix& a, const Tens<SB>& b, Matrix& out, bool accumulate = false);

// out (+)= a * b^T
template <class SB>
void matmul_nt(const Matrix& a, const Tens<SB>& b, Matrix& out, bool accumulate = false);

// out (+)= a^T * b   (grad of a weight: activations^T * upstream)
template <class SO>
void matmul_tn(const Matrix& a, const Matrix& b, Tens<SO>& out, bool accumulate = false);

// In-place softmax of one row of length n; subtracts the max for stability.
void softmax_row(double* x, int n);

// True if every element is finite.
bool all_finite(const Matrix& m);

// FNV-1a over the raw bytes; used to tag tensors in decode traces.
uint64_t matrix_checksum(const Matrix& m);

} // namespace simplexlm
