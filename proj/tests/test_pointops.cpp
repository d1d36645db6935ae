#include <doctest.h>

#include <algorithm>
#include <set>

#include "fuseloc/pointops.hpp"
#include "fuseloc/rng.hpp"

using namespace fuseloc;

namespace {

Tensor<float> unit_square() {
    return Tensor<float>::from({4, 3}, {0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 0});
}

// coordinates on a 2^-12 grid: translating by another grid value stays exact
Tensor<float> grid_cloud(int n, Rng& rng) {
    Tensor<float> c({n, 3});
    for (std::int64_t i = 0; i < c.numel(); ++i)
        c[i] = static_cast<float>(static_cast<int>(rng.uniform_int(1 << 15))) / 4096.0f;
    return c;
}

// exhaustive-sort kNN oracle
std::vector<int> knn_oracle(const Tensor<float>& refs, const float* q, int k) {
    std::vector<std::pair<double, int>> all;
    for (int i = 0; i < refs.dim(0); ++i) {
        const double dx = refs(i, 0) - q[0], dy = refs(i, 1) - q[1], dz = refs(i, 2) - q[2];
        all.push_back({dx * dx + dy * dy + dz * dz, i});
    }
    std::sort(all.begin(), all.end());
    std::vector<int> out;
    for (int i = 0; i < k; ++i) out.push_back(all[static_cast<std::size_t>(i)].second);
    return out;
}

}  // namespace

TEST_CASE("fps on the unit square") {
    Tensor<float> pts = unit_square();
    SUBCASE("m=2 picks the opposite corner") {
        CHECK(farthest_point_sample(pts, 2, 0) == std::vector<int>{0, 3});
    }
    SUBCASE("m=3 breaks the tie by lowest index") {
        CHECK(farthest_point_sample(pts, 3, 0) == std::vector<int>{0, 3, 1});
    }
    SUBCASE("m=N is a permutation") {
        std::vector<int> all = farthest_point_sample(pts, 4, 0);
        std::set<int> uniq(all.begin(), all.end());
        CHECK(uniq.size() == 4);
    }
    SUBCASE("contract errors") {
        CHECK_THROWS_AS(farthest_point_sample(pts, 5, 0), ContractError);
        CHECK_THROWS_AS(farthest_point_sample(pts, 2, 4), ContractError);
    }
}

TEST_CASE("fps is invariant under rigid translation") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<float> pts = grid_cloud(40, rng);
        Tensor<float> moved = pts;
        const float t[3] = {512.0f, -256.0f, 128.0f};  // grid-aligned shift
        for (int i = 0; i < 40; ++i)
            for (int c = 0; c < 3; ++c) moved(i, c) += t[c];
        CHECK(farthest_point_sample(pts, 12, 0) == farthest_point_sample(moved, 12, 0));
    }
}

TEST_CASE("knn examples and oracle equivalence") {
    SUBCASE("ordered line") {
        Tensor<float> refs = Tensor<float>::from({3, 3}, {0, 0, 0, 1, 0, 0, 2, 0, 0});
        Tensor<float> q = Tensor<float>::from({1, 3}, {0, 0, 0});
        IndexMatrix nn = knn(q, refs, 2);
        CHECK(nn(0, 0) == 0);
        CHECK(nn(0, 1) == 1);
    }
    SUBCASE("self-query returns self") {
        Rng rng(5);
        Tensor<float> refs = grid_cloud(10, rng);
        IndexMatrix nn = knn(refs, refs, 1);
        for (int i = 0; i < 10; ++i) CHECK(nn(i, 0) == i);
    }
    SUBCASE("random clouds match the exhaustive sort") {
        Rng rng(7);
        for (int trial = 0; trial < 20; ++trial) {
            const int n = 16 + static_cast<int>(rng.uniform_int(49));
            Tensor<float> refs({n, 3});
            for (std::int64_t i = 0; i < refs.numel(); ++i) refs[i] = static_cast<float>(rng.normal());
            Tensor<float> queries({8, 3});
            for (std::int64_t i = 0; i < queries.numel(); ++i) queries[i] = static_cast<float>(rng.normal());
            IndexMatrix nn = knn(queries, refs, 8);
            for (int qi = 0; qi < 8; ++qi) {
                std::vector<int> expect = knn_oracle(refs, queries.data() + qi * 3, 8);
                for (int j = 0; j < 8; ++j) CHECK(nn(qi, j) == expect[static_cast<std::size_t>(j)]);
            }
        }
    }
    SUBCASE("k > N is a contract error") {
        Tensor<float> refs = unit_square();
        CHECK_THROWS_AS(knn(refs, refs, 5), ContractError);
    }
}

TEST_CASE("knn is permutation consistent") {
    Rng rng(11);
    Tensor<float> refs = grid_cloud(30, rng);
    Tensor<float> q = grid_cloud(5, rng);
    IndexMatrix base = knn(q, refs, 6);
    // permute refs, remap indices back: neighbor sets must match
    std::vector<int> perm(30);
    for (int i = 0; i < 30; ++i) perm[static_cast<std::size_t>(i)] = (i * 17 + 3) % 30;
    Tensor<float> shuffled({30, 3});
    for (int i = 0; i < 30; ++i)
        for (int c = 0; c < 3; ++c) shuffled(perm[static_cast<std::size_t>(i)], c) = refs(i, c);
    IndexMatrix moved = knn(q, shuffled, 6);
    for (int qi = 0; qi < 5; ++qi) {
        std::set<int> a, b;
        for (int j = 0; j < 6; ++j) {
            a.insert(base(qi, j));
            // map back through the permutation
            int raw = moved(qi, j);
            int orig = -1;
            for (int i = 0; i < 30; ++i)
                if (perm[static_cast<std::size_t>(i)] == raw) orig = i;
            b.insert(orig);
        }
        CHECK(a == b);
    }
}

TEST_CASE("grouped rows follow the [feature delta ; coordinate delta] layout") {
    // center at origin with feature [1], neighbor at (1,0,0) with feature [3]
    Tensor<float> centers = Tensor<float>::from({1, 3}, {0, 0, 0});
    Tensor<float> cfeats = Tensor<float>::from({1, 1}, {1});
    Tensor<float> refs = Tensor<float>::from({2, 3}, {0, 0, 0, 1, 0, 0});
    Tensor<float> rfeats = Tensor<float>::from({2, 1}, {1, 3});
    IndexMatrix nbr{1, 2, {0, 1}};
    Tensor<float> rows = group_neighborhood(centers, cfeats, refs, rfeats, nbr);
    CHECK(rows.shape() == std::vector<int>{1, 2, 4});
    // neighbor 0 is the center itself: all-zero row
    for (int c = 0; c < 4; ++c) CHECK(rows(0, 0, c) == 0.0f);
    // neighbor 1: [f_q - f_s ; p_q - p_s] = [2, 1, 0, 0]
    CHECK(rows(0, 1, 0) == 2.0f);
    CHECK(rows(0, 1, 1) == 1.0f);
    CHECK(rows(0, 1, 2) == 0.0f);
    CHECK(rows(0, 1, 3) == 0.0f);
}

TEST_CASE("grouped rows reconstruct neighbor features exactly") {
    Rng rng(13);
    const int n = 16, k = 4, fdim = 5;
    Tensor<float> coords = grid_cloud(n, rng);
    Tensor<float> feats({n, fdim});
    for (std::int64_t i = 0; i < feats.numel(); ++i)
        feats[i] = static_cast<float>(static_cast<int>(rng.uniform_int(1 << 12))) / 1024.0f;
    std::vector<int> centers = farthest_point_sample(coords, 6, 0);
    Tensor<float> ccoords({6, 3}), cfeats({6, fdim});
    for (int i = 0; i < 6; ++i) {
        for (int c = 0; c < 3; ++c) ccoords(i, c) = coords(centers[static_cast<std::size_t>(i)], c);
        for (int c = 0; c < fdim; ++c) cfeats(i, c) = feats(centers[static_cast<std::size_t>(i)], c);
    }
    IndexMatrix nbr = knn(ccoords, coords, k);
    Tensor<float> rows = group_neighborhood(ccoords, cfeats, coords, feats, nbr);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < k; ++j)
            for (int c = 0; c < fdim; ++c)
                CHECK(rows(i, j, c) + cfeats(i, c) == feats(nbr(i, j), c));  // grid values: exact
}

TEST_CASE("grouped deltas are exactly translation invariant on grid data") {
    Rng rng(17);
    const int n = 24, k = 5;
    Tensor<float> coords = grid_cloud(n, rng);
    Tensor<float> feats({n, 4});
    for (std::int64_t i = 0; i < feats.numel(); ++i)
        feats[i] = static_cast<float>(static_cast<int>(rng.uniform_int(4096))) / 512.0f;
    Tensor<float> moved = coords;
    const float t[3] = {1024.0f, 2048.0f, -4096.0f};
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) moved(i, c) += t[c];

    auto group_all = [&](const Tensor<float>& pts) {
        std::vector<int> fps = farthest_point_sample(pts, 8, 0);
        Tensor<float> cc({8, 3}), cf({8, 4});
        for (int i = 0; i < 8; ++i) {
            for (int c = 0; c < 3; ++c) cc(i, c) = pts(fps[static_cast<std::size_t>(i)], c);
            for (int c = 0; c < 4; ++c) cf(i, c) = feats(fps[static_cast<std::size_t>(i)], c);
        }
        IndexMatrix nbr = knn(cc, pts, k);
        return group_neighborhood(cc, cf, pts, feats, nbr);
    };
    Tensor<float> a = group_all(coords);
    Tensor<float> b = group_all(moved);
    REQUIRE(a.numel() == b.numel());
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("grouped deltas sum to zero over symmetric neighborhoods") {
    // neighbors placed symmetrically about the center
    Tensor<float> centers = Tensor<float>::from({1, 3}, {0, 0, 0});
    Tensor<float> cfeats = Tensor<float>::from({1, 2}, {1, 2});
    Tensor<float> refs = Tensor<float>::from({4, 3}, {1, 0, 0, -1, 0, 0, 0, 2, 0, 0, -2, 0});
    Tensor<float> rfeats = Tensor<float>::from({4, 2}, {3, 1, -1, 3, 0, 5, 4, -1});
    IndexMatrix nbr{1, 4, {0, 1, 2, 3}};
    Tensor<float> rows = group_neighborhood(centers, cfeats, refs, rfeats, nbr);
    for (int c = 2; c < 5; ++c) {  // coordinate delta columns
        float sum = 0.0f;
        for (int j = 0; j < 4; ++j) sum += rows(0, j, c);
        CHECK(sum == 0.0f);
    }
}

TEST_CASE("neighborhood views carry indices and rows") {
    Rng rng(19);
    Tensor<float> coords = grid_cloud(12, rng);
    Tensor<float> feats({12, 2});
    std::vector<int> centers = farthest_point_sample(coords, 3, 0);
    Tensor<float> cc({3, 3}), cf({3, 2});
    for (int i = 0; i < 3; ++i)
        for (int c = 0; c < 3; ++c) cc(i, c) = coords(centers[static_cast<std::size_t>(i)], c);
    IndexMatrix nbr = knn(cc, coords, 4);
    Tensor<float> rows = group_neighborhood(cc, cf, coords, feats, nbr);
    auto views = make_neighborhoods(centers, nbr, rows);
    REQUIRE(views.size() == 3);
    CHECK(views[0].center_index == centers[0]);
    CHECK(views[1].neighbor_indices.size() == 4);
    CHECK(views[2].grouped.shape() == std::vector<int>{4, 5});
}
