#pragma once

#include <cstdint>
#include <cstdlib>
#include <string>
#include <unistd.h>

#include <cblas.h>

namespace fuseloc {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
// A is m x k after op, B is k x n after op, C is m x n. Leading dimensions are
// the row strides of the stored (un-transposed) matrices, so head-sized
// sub-blocks of a wider matrix can be multiplied in place.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
    const CBLAS_TRANSPOSE ta = trans_a ? CblasTrans : CblasNoTrans;
    const CBLAS_TRANSPOSE tb = trans_b ? CblasTrans : CblasNoTrans;
    if constexpr (sizeof(T) == sizeof(float)) {
        cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, static_cast<float>(alpha),
                    reinterpret_cast<const float*>(a), lda, reinterpret_cast<const float*>(b), ldb,
                    static_cast<float>(beta), reinterpret_cast<float*>(c), ldc);
    } else {
        cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, static_cast<double>(alpha),
                    reinterpret_cast<const double*>(a), lda, reinterpret_cast<const double*>(b), ldb,
                    static_cast<double>(beta), reinterpret_cast<double*>(c), ldc);
    }
}

// OpenBLAS with DYNAMIC_ARCH selects its kernel from CPUID at load time and
// falls back to a pre-AVX kernel inside VMs that mask vendor strings; that is
// a 4-5x slowdown on every GEMM. The core type can only be forced through the
// environment before the library initializes, so when we detect the fallback
// we set OPENBLAS_CORETYPE and re-exec the current process once. Call first
// thing in main().
inline void ensure_fast_blas(char** argv) {
    openblas_set_num_threads(1);  // determinism: one fixed reduction order per GEMM
    if (std::getenv("FUSELOC_BLAS_REEXEC") != nullptr) return;
    const char* core = openblas_get_corename();
    const bool weak = core != nullptr &&
                      (std::string(core) == "Prescott" || std::string(core) == "Katmai" ||
                       std::string(core) == "Northwood" || std::string(core) == "Banias" ||
                       std::string(core) == "Core2" || std::string(core) == "Penryn" ||
                       std::string(core) == "Nehalem" || std::string(core) == "Atom");
    if (!weak) return;
    const char* want = nullptr;
    if (__builtin_cpu_supports("avx512f") && __builtin_cpu_supports("avx512dq"))
        want = "SKYLAKEX";
    else if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
        want = "HASWELL";
    if (want == nullptr) return;
    ::setenv("OPENBLAS_CORETYPE", want, 1);
    ::setenv("FUSELOC_BLAS_REEXEC", "1", 1);
    ::execv("/proc/self/exe", argv);
    // If exec fails we keep running on the slow kernel; results are identical.
}

}  // namespace fuseloc
