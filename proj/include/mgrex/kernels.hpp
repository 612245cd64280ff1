#pragma once

#include <cstddef>
#include <functional>

namespace mgrex::kernels {

// Dense matmul kernels. Each output element accumulates over k in ascending
// order in both the serial and OpenMP variants, so results are bitwise
// identical regardless of thread count.

// C = A(m,k) * B(k,n), optionally accumulating into C.
void matmul_serial(const double* A, const double* B, double* C, int m, int k, int n, bool acc = false);
void matmul(const double* A, const double* B, double* C, int m, int k, int n, bool acc = false);

// C = A(m,k) * B(n,k)^T
void matmul_nt_serial(const double* A, const double* B, double* C, int m, int k, int n, bool acc = false);
void matmul_nt(const double* A, const double* B, double* C, int m, int k, int n, bool acc = false);

// C = A(k,m)^T * B(k,n)
void matmul_tn_serial(const double* A, const double* B, double* C, int m, int k, int n, bool acc = false);
void matmul_tn(const double* A, const double* B, double* C, int m, int k, int n, bool acc = false);

// Parallel loop over independent work items (one item handled entirely by one
// thread, so per-item results do not depend on scheduling).
void parallel_for(int n, const std::function<void(int)>& fn);
void serial_for(int n, const std::function<void(int)>& fn);

int max_threads();

}  // namespace mgrex::kernels
