#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "fuseloc/common.hpp"
#include "fuseloc/tensor.hpp"

// Geometric kernels on raw point clouds. Everything here is exhaustive and
// exact: at <= 8192 points per cloud a spatial index buys nothing, and the
// brute-force formulation doubles as its own specification. Distance
// comparisons run in double so selection is stable regardless of the scalar
// type carried by the tensors.

namespace fuseloc {

struct IndexMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<int> idx;  // row-major rows x cols

    int operator()(int r, int c) const { return idx[static_cast<std::size_t>(r) * cols + c]; }
    int& operator()(int r, int c) { return idx[static_cast<std::size_t>(r) * cols + c]; }
};

namespace detail {

template <typename T>
inline double sqdist3(const T* a, const T* b) {
    const double dx = static_cast<double>(a[0]) - static_cast<double>(b[0]);
    const double dy = static_cast<double>(a[1]) - static_cast<double>(b[1]);
    const double dz = static_cast<double>(a[2]) - static_cast<double>(b[2]);
    return dx * dx + dy * dy + dz * dz;
}

}  // namespace detail

// Farthest point sampling. The first pick is `start`; each following pick
// maximizes the minimum distance to everything already selected, ties going
// to the lowest index.
template <typename T>
std::vector<int> farthest_point_sample(const Tensor<T>& coords, int m, int start) {
    if (coords.rank() != 2 || coords.dim(1) != 3)
        throw ContractError("pointops", "fps: coords must be [N,3], got " + coords.shape_string());
    const int n = coords.dim(0);
    if (m < 1 || m > n)
        throw ContractError("pointops", "fps: m=" + std::to_string(m) + " outside [1," + std::to_string(n) + "]");
    if (start < 0 || start >= n) throw ContractError("pointops", "fps: start index out of range");

    std::vector<int> picked;
    picked.reserve(static_cast<std::size_t>(m));
    std::vector<double> min_dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    int current = start;
    picked.push_back(current);
    for (int it = 1; it < m; ++it) {
        const T* c = coords.data() + static_cast<std::int64_t>(current) * 3;
        int best = -1;
        double best_dist = -1.0;
        for (int i = 0; i < n; ++i) {
            const double dist = detail::sqdist3(coords.data() + static_cast<std::int64_t>(i) * 3, c);
            if (dist < min_dist[static_cast<std::size_t>(i)]) min_dist[static_cast<std::size_t>(i)] = dist;
            if (min_dist[static_cast<std::size_t>(i)] > best_dist) {
                best_dist = min_dist[static_cast<std::size_t>(i)];
                best = i;
            }
        }
        current = best;
        picked.push_back(current);
    }
    return picked;
}

// Exhaustive k-nearest-neighbors: row i lists the k reference indices closest
// to query i, ascending by distance, ties by lowest index.
template <typename T>
IndexMatrix knn(const Tensor<T>& queries, const Tensor<T>& refs, int k) {
    if (queries.rank() != 2 || queries.dim(1) != 3 || refs.rank() != 2 || refs.dim(1) != 3)
        throw ContractError("pointops", "knn: coords must be [*,3]");
    const int nq = queries.dim(0), nr = refs.dim(0);
    if (k < 1 || k > nr)
        throw ContractError("pointops", "knn: k=" + std::to_string(k) + " outside [1," + std::to_string(nr) + "]");

    IndexMatrix out{nq, k, std::vector<int>(static_cast<std::size_t>(nq) * k)};
    std::vector<std::pair<double, int>> cand(static_cast<std::size_t>(nr));
    for (int qi = 0; qi < nq; ++qi) {
        const T* q = queries.data() + static_cast<std::int64_t>(qi) * 3;
        for (int rj = 0; rj < nr; ++rj)
            cand[static_cast<std::size_t>(rj)] = {detail::sqdist3(refs.data() + static_cast<std::int64_t>(rj) * 3, q), rj};
        std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
        for (int j = 0; j < k; ++j) out(qi, j) = cand[static_cast<std::size_t>(j)].second;
    }
    return out;
}

// Grouped neighborhood rows: for center i and neighbor j the row holds the
// feature delta followed by the coordinate delta, [f_q - f_s ; p_q - p_s],
// giving a [m, k, D+3] tensor.
template <typename T>
Tensor<T> group_neighborhood(const Tensor<T>& center_coords, const Tensor<T>& center_feats,
                             const Tensor<T>& ref_coords, const Tensor<T>& ref_feats,
                             const IndexMatrix& nbr) {
    if (ref_feats.rank() != 2 || ref_feats.dim(0) != ref_coords.dim(0))
        throw ContractError("pointops", "group: reference features missing or misaligned");
    if (center_feats.dim(0) != center_coords.dim(0) || center_feats.dim(1) != ref_feats.dim(1))
        throw ContractError("pointops", "group: center features misaligned");
    const int m = nbr.rows, k = nbr.cols, fdim = ref_feats.dim(1);
    if (center_coords.dim(0) != m) throw ContractError("pointops", "group: center count != knn rows");
    Tensor<T> rows({m, k, fdim + 3});
    for (int i = 0; i < m; ++i) {
        const T* cs = center_coords.data() + static_cast<std::int64_t>(i) * 3;
        const T* fs = center_feats.data() + static_cast<std::int64_t>(i) * fdim;
        for (int j = 0; j < k; ++j) {
            const int q = nbr(i, j);
            const T* cq = ref_coords.data() + static_cast<std::int64_t>(q) * 3;
            const T* fq = ref_feats.data() + static_cast<std::int64_t>(q) * fdim;
            T* dst = &rows(i, j, 0);
            for (int c = 0; c < fdim; ++c) dst[c] = fq[c] - fs[c];
            for (int c = 0; c < 3; ++c) dst[fdim + c] = cq[c] - cs[c];
        }
    }
    return rows;
}

// Scatters the gradient of the grouped rows back onto reference features
// (+g on neighbors) and center features (-g on centers). The coordinate
// columns carry no gradient: positions are data, not parameters.
template <typename T>
void group_backward(const Tensor<T>& grad_rows, const IndexMatrix& nbr, Tensor<T>& dref_feats,
                    Tensor<T>& dcenter_feats) {
    const int m = nbr.rows, k = nbr.cols;
    const int fdim = dref_feats.dim(1);
    for (int i = 0; i < m; ++i) {
        T* dfs = dcenter_feats.data() + static_cast<std::int64_t>(i) * fdim;
        for (int j = 0; j < k; ++j) {
            const int q = nbr(i, j);
            const T* src = &grad_rows(i, j, 0);
            T* dfq = dref_feats.data() + static_cast<std::int64_t>(q) * fdim;
            for (int c = 0; c < fdim; ++c) {
                dfq[c] += src[c];
                dfs[c] -= src[c];
            }
        }
    }
}

// Spec-level view of one neighborhood, mostly for tests and inspection; the
// hot path works on the flat grouped tensor above.
template <typename T>
struct Neighborhood {
    int center_index = 0;
    std::vector<int> neighbor_indices;
    Tensor<T> grouped;  // [k, D+3]
};

template <typename T>
std::vector<Neighborhood<T>> make_neighborhoods(const std::vector<int>& centers,
                                                const IndexMatrix& nbr, const Tensor<T>& rows) {
    std::vector<Neighborhood<T>> out;
    out.reserve(static_cast<std::size_t>(nbr.rows));
    const int k = nbr.cols, width = rows.dim(2);
    for (int i = 0; i < nbr.rows; ++i) {
        Neighborhood<T> nb;
        nb.center_index = centers[static_cast<std::size_t>(i)];
        nb.neighbor_indices.assign(nbr.idx.begin() + static_cast<std::ptrdiff_t>(i) * k,
                                   nbr.idx.begin() + static_cast<std::ptrdiff_t>(i + 1) * k);
        nb.grouped = Tensor<T>({k, width});
        for (int j = 0; j < k; ++j)
            for (int c = 0; c < width; ++c) nb.grouped(j, c) = rows(i, j, c);
        out.push_back(std::move(nb));
    }
    return out;
}

}  // namespace fuseloc
