#include "mgrex/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <cstring>

namespace mgrex::kernels {

namespace {

// Work below this many multiply-adds is not worth a parallel region.
constexpr long kParallelCutoff = 1 << 15;

inline void mm_row(const double* A, const double* B, double* C, int k, int n, int i, bool acc) {
    double* c = C + static_cast<size_t>(i) * n;
    if (!acc) std::memset(c, 0, sizeof(double) * n);
    const double* a = A + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
        double av = a[p];
        const double* b = B + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
}

inline void mm_nt_row(const double* A, const double* B, double* C, int k, int n, int i, bool acc) {
    const double* a = A + static_cast<size_t>(i) * k;
    double* c = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
        const double* b = B + static_cast<size_t>(j) * k;
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += a[p] * b[p];
        c[j] = acc ? c[j] + s : s;
    }
}

inline void mm_tn_row(const double* A, const double* B, double* C, int k, int m, int n, int i, bool acc) {
    double* c = C + static_cast<size_t>(i) * n;
    if (!acc) std::memset(c, 0, sizeof(double) * n);
    for (int p = 0; p < k; ++p) {
        double av = A[static_cast<size_t>(p) * m + i];
        const double* b = B + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
}

}  // namespace

void matmul_serial(const double* A, const double* B, double* C, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) mm_row(A, B, C, k, n, i, acc);
}

void matmul(const double* A, const double* B, double* C, int m, int k, int n, bool acc) {
    if (static_cast<long>(m) * k * n < kParallelCutoff || m < 2) {
        matmul_serial(A, B, C, m, k, n, acc);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) mm_row(A, B, C, k, n, i, acc);
}

void matmul_nt_serial(const double* A, const double* B, double* C, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) mm_nt_row(A, B, C, k, n, i, acc);
}

void matmul_nt(const double* A, const double* B, double* C, int m, int k, int n, bool acc) {
    if (static_cast<long>(m) * k * n < kParallelCutoff || m < 2) {
        matmul_nt_serial(A, B, C, m, k, n, acc);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) mm_nt_row(A, B, C, k, n, i, acc);
}

void matmul_tn_serial(const double* A, const double* B, double* C, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) mm_tn_row(A, B, C, k, m, n, i, acc);
}

void matmul_tn(const double* A, const double* B, double* C, int m, int k, int n, bool acc) {
    if (static_cast<long>(m) * k * n < kParallelCutoff || m < 2) {
        matmul_tn_serial(A, B, C, m, k, n, acc);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) mm_tn_row(A, B, C, k, m, n, i, acc);
}

void parallel_for(int n, const std::function<void(int)>& fn) {
#pragma omp parallel for schedule(dynamic, 1)
    for (int i = 0; i < n; ++i) fn(i);
}

void serial_for(int n, const std::function<void(int)>& fn) {
    for (int i = 0; i < n; ++i) fn(i);
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace mgrex::kernels
