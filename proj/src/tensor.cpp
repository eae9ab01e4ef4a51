#include "simplexlm/tensor.hpp"

#include <cmath>
#include <cstring>

#include "simplexlm/errors.hpp"

namespace simplexlm {

namespace {

void require(bool ok, const char* what) {
    if (!ok) {
        throw ContractError(what);
    }
}

} // namespace

template <class SB>
void matmul(const Matrix& a, const Tens<SB>& b, Matrix& out, bool accumulate) {
    require(a.cols == b.rows, "matmul: inner dimensions differ");
    if (out.rows != a.rows || out.cols != b.cols) {
        out = Matrix(a.rows, b.cols);
    } else if (!accumulate) {
        out.zero();
    }
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (int l = 0; l < a.cols; ++l) {
            const double ail = arow[l];
            const SB* brow = b.row(l);
            for (int j = 0; j < b.cols; ++j) {
                orow[j] += ail * static_cast<double>(brow[j]);
            }
        }
    }
}

template <class SB>
void matmul_nt(const Matrix& a, const Tens<SB>& b, Matrix& out, bool accumulate) {
    require(a.cols == b.cols, "matmul_nt: inner dimensions differ");
    if (out.rows != a.rows || out.cols != b.rows) {
        out = Matrix(a.rows, b.rows);
    } else if (!accumulate) {
        out.zero();
    }
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const SB* brow = b.row(j);
            double acc = 0.0;
            for (int l = 0; l < a.cols; ++l) {
                acc += arow[l] * static_cast<double>(brow[l]);
            }
            orow[j] += acc;
        }
    }
}

template <class SO>
void matmul_tn(const Matrix& a, const Matrix& b, Tens<SO>& out, bool accumulate) {
    require(a.rows == b.rows, "matmul_tn: inner dimensions differ");
    if (out.rows != a.cols || out.cols != b.cols) {
        out = Tens<SO>(a.cols, b.cols);
    } else if (!accumulate) {
        out.zero();
    }
    for (int l = 0; l < a.rows; ++l) {
        const double* arow = a.row(l);
        const double* brow = b.row(l);
        for (int i = 0; i < a.cols; ++i) {
            const double ali = arow[i];
            SO* orow = out.row(i);
            for (int j = 0; j < b.cols; ++j) {
                orow[j] += static_cast<SO>(ali * brow[j]);
            }
        }
    }
}

template void matmul<double>(const Matrix&, const Matrix&, Matrix&, bool);
template void matmul<float>(const Matrix&, const Tensor32&, Matrix&, bool);
template void matmul_nt<double>(const Matrix&, const Matrix&, Matrix&, bool);
template void matmul_nt<float>(const Matrix&, const Tensor32&, Matrix&, bool);
template void matmul_tn<double>(const Matrix&, const Matrix&, Matrix&, bool);

void softmax_row(double* x, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) {
        mx = x[i] > mx ? x[i] : mx;
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    const double inv = 1.0 / sum;
    for (int i = 0; i < n; ++i) {
        x[i] *= inv;
    }
}

bool all_finite(const Matrix& m) {
    for (double x : m.v) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

uint64_t matrix_checksum(const Matrix& m) {
    uint64_t h = 0xcbf29ce484222325ull;
    const unsigned char* p = reinterpret_cast<const unsigned char*>(m.v.data());
    const size_t n = m.v.size() * sizeof(double);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace simplexlm
