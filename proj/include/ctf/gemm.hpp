#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <vector>

namespace ctf {

// Row-major matrix kernels. Every output element is produced by one
// sequential reduction, so results are bit-reproducible across runs.

namespace detail {

// direct i-k-j product, good for small shapes and single-row inputs
template <typename S>
void gemm_direct(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        S* ci = c + i * n;
        std::memset(ci, 0, static_cast<size_t>(n) * sizeof(S));
        const S* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const S av = ai[p];
            const S* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) {
                ci[j] += av * bp[j];
            }
        }
    }
}

// blocked product: B tiles are packed contiguous and reused across 4-row
// strips of A, which keeps wide outputs compute-bound instead of streaming B
template <typename S>
void gemm_packed(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    constexpr int64_t jb_max = 512;
    constexpr int64_t kb_max = 256;
    static thread_local std::vector<S> pack;
    pack.resize(static_cast<size_t>(jb_max * kb_max));

    for (int64_t i = 0; i < m; ++i) {
        std::memset(c + i * n, 0, static_cast<size_t>(n) * sizeof(S));
    }
    for (int64_t j0 = 0; j0 < n; j0 += jb_max) {
        const int64_t jb = std::min(jb_max, n - j0);
        for (int64_t k0 = 0; k0 < k; k0 += kb_max) {
            const int64_t kb = std::min(kb_max, k - k0);
            for (int64_t p = 0; p < kb; ++p) {
                std::memcpy(pack.data() + p * jb, b + (k0 + p) * n + j0,
                            static_cast<size_t>(jb) * sizeof(S));
            }
            int64_t i = 0;
            for (; i + 4 <= m; i += 4) {
                const S* a0 = a + i * k + k0;
                const S* a1 = a0 + k;
                const S* a2 = a1 + k;
                const S* a3 = a2 + k;
                S* c0 = c + i * n + j0;
                S* c1 = c0 + n;
                S* c2 = c1 + n;
                S* c3 = c2 + n;
                for (int64_t p = 0; p < kb; ++p) {
                    const S x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
                    const S* bp = pack.data() + p * jb;
                    for (int64_t j = 0; j < jb; ++j) {
                        const S bv = bp[j];
                        c0[j] += x0 * bv;
                        c1[j] += x1 * bv;
                        c2[j] += x2 * bv;
                        c3[j] += x3 * bv;
                    }
                }
            }
            for (; i < m; ++i) {
                const S* ai = a + i * k + k0;
                S* ci = c + i * n + j0;
                for (int64_t p = 0; p < kb; ++p) {
                    const S av = ai[p];
                    const S* bp = pack.data() + p * jb;
                    for (int64_t j = 0; j < jb; ++j) {
                        ci[j] += av * bp[j];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// C[m,n] = A[m,k] * B[k,n]
template <typename S>
void gemm(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    if (m < 4 || k * n < (1 << 14)) {
        detail::gemm_direct(a, b, c, m, k, n);
    } else {
        detail::gemm_packed(a, b, c, m, k, n);
    }
}

// C[m,n] += A[m,k] * B[n,k]^T  (rows of A dot rows of B; both contiguous)
template <typename S>
void gemm_nt_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const S* ai = a + i * k;
        S* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const S* bj = b + j * k;
            S acc = S(0);
            for (int64_t p = 0; p < k; ++p) {
                acc += ai[p] * bj[p];
            }
            ci[j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]  (axpy over rows of B)
template <typename S>
void gemm_tn_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const S* ai = a + i * k;
        const S* bi = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const S av = ai[p];
            S* cp = c + p * n;
            for (int64_t j = 0; j < n; ++j) {
                cp[j] += av * bi[j];
            }
        }
    }
}

// y[n] = x[k] * B[k,n] for a single row
template <typename S>
void gemv(const S* x, const S* b, S* y, int64_t k, int64_t n) {
    detail::gemm_direct(x, b, y, 1, k, n);
}

}  // namespace ctf
