#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "fuseloc/common.hpp"

namespace fuseloc {

// Order-insensitive summation. Several contracts in this codebase promise
// *exact* invariance under reorderings of set-like inputs (neighbor order
// inside a grouped neighborhood, token order under aggregation). Plain
// floating-point reduction cannot deliver that, so reductions over such axes
// go through a fixed-point accumulator: every element is rounded once to a
// 2^-44 grid and summed in 128-bit integer arithmetic. Integer addition is
// associative and commutative, so the result depends only on the multiset of
// inputs, and doubling every input doubles the sum exactly.
class ExactSum {
public:
    void add(double v) {
        // Each element is truncated once onto a 2^-60 grid, split over two
        // integer lanes (2^28 above the point, 32 bits below, 32 more in the
        // low lane). Scaling by powers of two is exact and both truncations
        // are per-element, so the pair of lane sums depends only on the
        // multiset of inputs. Everything stays in int64: no __int128 on the
        // per-element path.
        if (!(std::fabs(v) < kMaxMagnitude))
            throw ContractError("diffcore", "exact accumulator input out of range");
        const double scaled = v * kHiScale;                       // exact
        const std::int64_t hi = static_cast<std::int64_t>(scaled);  // trunc toward zero
        const double rem = scaled - static_cast<double>(hi);        // exact, |rem| < 1
        acc_hi_ += hi;
        acc_lo_ += static_cast<std::int64_t>(rem * kLoScale);
        if (++count_ >= kFlushEvery) flush();
    }

    double value() const {
        __int128 total = static_cast<__int128>(total_hi_) + acc_hi_;
        total *= static_cast<std::int64_t>(1) << 32;
        total += static_cast<__int128>(total_lo_) + acc_lo_;
        return static_cast<double>(total) * kInvScale;
    }

    void reset() { *this = ExactSum(); }

private:
    void flush() {
        total_hi_ += acc_hi_;
        total_lo_ += acc_lo_;
        acc_hi_ = 0;
        acc_lo_ = 0;
        count_ = 0;
    }

    static constexpr double kHiScale = 268435456.0;   // 2^28
    static constexpr double kLoScale = 4294967296.0;  // 2^32
    static constexpr double kInvScale = 1.0 / 1152921504606846976.0;  // 2^-60
    static constexpr double kMaxMagnitude = 1048576.0;  // |hi| < 2^48
    static constexpr int kFlushEvery = 1 << 14;          // lanes stay below 2^62
    std::int64_t acc_hi_ = 0;
    std::int64_t acc_lo_ = 0;
    int count_ = 0;
    __int128 total_hi_ = 0;
    __int128 total_lo_ = 0;
};

// Mean and (biased) variance over n values via two exact passes.
template <typename T>
void exact_mean_var(const T* values, std::int64_t n, std::int64_t stride, double* mean, double* var) {
    ExactSum s;
    for (std::int64_t i = 0; i < n; ++i) s.add(static_cast<double>(values[i * stride]));
    double m = s.value() / static_cast<double>(n);
    ExactSum sq;
    for (std::int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(values[i * stride]) - m;
        sq.add(d * d);
    }
    *mean = m;
    *var = sq.value() / static_cast<double>(n);
}

// Column-wise exact sums of a row-major matrix. Same element semantics as
// ExactSum (one truncation onto the 2^-60 grid, integer lane sums), laid out
// so the inner loop vectorizes. Rows are drained into 128-bit totals every
// few thousand rows; the lanes cannot overflow in between as long as every
// element stays below the magnitude guard, which the per-chunk max test
// enforces before the unguarded inner loop runs.
class ExactColumnSums {
public:
    explicit ExactColumnSums(int cols)
        : cols_(cols),
          hi_(static_cast<std::size_t>(cols)),
          lo_(static_cast<std::size_t>(cols)),
          total_hi_(static_cast<std::size_t>(cols)),
          total_lo_(static_cast<std::size_t>(cols)) {}

    template <typename T>
    void add_rows(const T* data, std::int64_t n) {
        // lanes are unsigned (wrap-around is defined) and the magnitude guard
        // is checked after each chunk: a breach throws before any wrapped sum
        // can be observed
        constexpr std::int64_t kChunk = 1 << 13;
        for (std::int64_t start = 0; start < n; start += kChunk) {
            const std::int64_t rows = std::min(kChunk, n - start);
            const T* block = data + start * cols_;
            std::uint64_t* __restrict__ hi = hi_.data();
            std::uint64_t* __restrict__ lo = lo_.data();
            double max_abs = 0.0;
            for (std::int64_t i = 0; i < rows; ++i) {
                const T* __restrict__ row = block + i * cols_;
                for (int c = 0; c < cols_; ++c) {
                    const double v = static_cast<double>(row[c]);
                    max_abs = std::max(max_abs, std::fabs(v));
                    const double scaled = v * 268435456.0;  // 2^28
                    const std::int64_t h = static_cast<std::int64_t>(scaled);
                    const double rem = scaled - static_cast<double>(h);
                    hi[c] += static_cast<std::uint64_t>(h);
                    lo[c] += static_cast<std::uint64_t>(static_cast<std::int64_t>(rem * 4294967296.0));
                }
            }
            if (!(max_abs < 1048576.0))
                throw ContractError("diffcore", "exact accumulator input out of range");
            drain();
        }
    }

    double value(int c) const {
        __int128 total = total_hi_[static_cast<std::size_t>(c)];
        total *= static_cast<std::int64_t>(1) << 32;
        total += total_lo_[static_cast<std::size_t>(c)];
        return static_cast<double>(total) * (1.0 / 1152921504606846976.0);  // 2^-60
    }

private:
    void drain() {
        for (int c = 0; c < cols_; ++c) {
            total_hi_[static_cast<std::size_t>(c)] += static_cast<std::int64_t>(hi_[static_cast<std::size_t>(c)]);
            total_lo_[static_cast<std::size_t>(c)] += static_cast<std::int64_t>(lo_[static_cast<std::size_t>(c)]);
            hi_[static_cast<std::size_t>(c)] = 0;
            lo_[static_cast<std::size_t>(c)] = 0;
        }
    }

    int cols_;
    std::vector<std::uint64_t> hi_, lo_;
    std::vector<__int128> total_hi_, total_lo_;
};

// Per-column mean/variance of a row-major [n, cols] matrix, traversed in row
// order so the memory access stays sequential. The centered-square pass uses
// the same per-element truncation as ExactColumnSums, fused into one sweep.
template <typename T>
void exact_mean_var_columns(const T* data, std::int64_t n, int cols, std::vector<double>* mean,
                            std::vector<double>* var) {
    ExactColumnSums sums(cols);
    sums.add_rows(data, n);
    mean->resize(static_cast<std::size_t>(cols));
    for (int c = 0; c < cols; ++c) (*mean)[static_cast<std::size_t>(c)] = sums.value(c) / static_cast<double>(n);
    std::vector<std::uint64_t> hi(static_cast<std::size_t>(cols)), lo(static_cast<std::size_t>(cols));
    std::vector<__int128> thi(static_cast<std::size_t>(cols)), tlo(static_cast<std::size_t>(cols));
    const double* mu = mean->data();
    constexpr std::int64_t kChunk = 1 << 13;
    for (std::int64_t start = 0; start < n; start += kChunk) {
        const std::int64_t rows = std::min(kChunk, n - start);
        const T* block = data + start * cols;
        std::uint64_t* __restrict__ h = hi.data();
        std::uint64_t* __restrict__ l = lo.data();
        double max_d = 0.0;
        for (std::int64_t i = 0; i < rows; ++i) {
            const T* __restrict__ row = block + i * cols;
            for (int c = 0; c < cols; ++c) {
                const double d = static_cast<double>(row[c]) - mu[c];
                max_d = std::max(max_d, std::fabs(d));
                const double scaled = d * d * 268435456.0;  // 2^28
                const std::int64_t hv = static_cast<std::int64_t>(scaled);
                const double rem = scaled - static_cast<double>(hv);
                h[c] += static_cast<std::uint64_t>(hv);
                l[c] += static_cast<std::uint64_t>(static_cast<std::int64_t>(rem * 4294967296.0));
            }
        }
        if (!(max_d < 1024.0))
            throw ContractError("diffcore", "batch-norm deviation out of accumulator range");
        for (int c = 0; c < cols; ++c) {
            thi[static_cast<std::size_t>(c)] += static_cast<std::int64_t>(hi[static_cast<std::size_t>(c)]);
            tlo[static_cast<std::size_t>(c)] += static_cast<std::int64_t>(lo[static_cast<std::size_t>(c)]);
            hi[static_cast<std::size_t>(c)] = 0;
            lo[static_cast<std::size_t>(c)] = 0;
        }
    }
    var->resize(static_cast<std::size_t>(cols));
    for (int c = 0; c < cols; ++c) {
        __int128 total = thi[static_cast<std::size_t>(c)];
        total *= static_cast<std::int64_t>(1) << 32;
        total += tlo[static_cast<std::size_t>(c)];
        (*var)[static_cast<std::size_t>(c)] =
            static_cast<double>(total) * (1.0 / 1152921504606846976.0) / static_cast<double>(n);
    }
}

// Canonical ordering of matrix rows by content (lexicographic by value, ties
// by original index). Rows with identical content contribute identically to
// any downstream reduction, so reducing in this order is unaffected by the
// order rows arrived in.
template <typename T>
std::vector<int> content_order(const T* rows, int n, int width) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const T* ra = rows + static_cast<std::int64_t>(a) * width;
        const T* rb = rows + static_cast<std::int64_t>(b) * width;
        for (int c = 0; c < width; ++c) {
            if (ra[c] < rb[c]) return true;
            if (rb[c] < ra[c]) return false;
        }
        return a < b;
    });
    return order;
}

}  // namespace fuseloc
