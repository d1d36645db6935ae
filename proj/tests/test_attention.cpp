#include <doctest.h>

#include "fuseloc/attention.hpp"
#include "gradcheck_util.hpp"

using namespace fuseloc;

namespace {

AttentionConfig toy_cfg(int dim = 8, int heads = 2, int hidden = 12) {
    AttentionConfig cfg;
    cfg.dim = dim;
    cfg.heads = heads;
    cfg.ffn_hidden = hidden;
    return cfg;
}

template <typename T>
Tensor<T> tokens(int l, int d, Rng& rng, T scale = T(1)) {
    return Tensor<T>::randn({l, d}, rng, scale);
}

template <typename T>
Tensor<T> permute_rows(const Tensor<T>& x, const std::vector<int>& perm) {
    Tensor<T> out(x.shape());
    for (int i = 0; i < x.dim(0); ++i)
        for (int j = 0; j < x.dim(1); ++j) out(perm[static_cast<std::size_t>(i)], j) = x(i, j);
    return out;
}

}  // namespace

TEST_CASE("attention config invariants") {
    AttentionConfig cfg = toy_cfg(10, 3);
    CHECK_THROWS_AS(cfg.validate(), ContractError);  // 10 % 3 != 0
    cfg = toy_cfg();
    cfg.dropout = 0.5;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = toy_cfg();
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.head_dim() == 4);
}

TEST_CASE("msa: single token attends only to itself") {
    AttentionConfig cfg = toy_cfg();
    MultiHeadSelfAttention<float> msa{cfg, "msa"};
    ParameterTable<float> p;
    Rng rng(1);
    msa.init_params(p, rng);
    Rng trng(2);
    Tensor<float> x = tokens<float>(1, 8, trng);
    MsaCtx<float> ctx;
    Tensor<float> y = msa.forward(x, p, &ctx);
    for (int h = 0; h < cfg.heads; ++h) CHECK(ctx.attn[h] == 1.0f);
    // output equals Wo applied to the concatenated per-head values
    Tensor<float> v = linear_forward(x, p.at("msa.wv"), static_cast<const Tensor<float>*>(nullptr));
    Tensor<float> expect = linear_forward(v, p.at("msa.wo"), static_cast<const Tensor<float>*>(nullptr));
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-6));
}

TEST_CASE("msa: identical tokens produce identical outputs") {
    MultiHeadSelfAttention<float> msa{toy_cfg(), "msa"};
    ParameterTable<float> p;
    Rng rng(3);
    msa.init_params(p, rng);
    Rng trng(4);
    Tensor<float> row = tokens<float>(1, 8, trng);
    Tensor<float> x({2, 8});
    for (int j = 0; j < 8; ++j) x(0, j) = x(1, j) = row(0, j);
    Tensor<float> y = msa.forward(x, p, nullptr);
    for (int j = 0; j < 8; ++j) CHECK(y(0, j) == y(1, j));
}

TEST_CASE("msa: exact permutation equivariance") {
    MultiHeadSelfAttention<float> msa{toy_cfg(), "msa"};
    ParameterTable<float> p;
    Rng rng(5);
    msa.init_params(p, rng);
    Rng trng(6);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<float> x = tokens<float>(6, 8, trng);
        std::vector<int> perm{3, 0, 5, 1, 4, 2};
        Tensor<float> y = msa.forward(x, p, nullptr);
        Tensor<float> yp = msa.forward(permute_rows(x, perm), p, nullptr);
        // outputs follow their tokens, bit for bit
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 8; ++j) CHECK(yp(perm[static_cast<std::size_t>(i)], j) == y(i, j));
    }
}

TEST_CASE("msa: attention rows are stochastic within 1e-6") {
    MultiHeadSelfAttention<float> msa{toy_cfg(), "msa"};
    ParameterTable<float> p;
    Rng rng(7);
    msa.init_params(p, rng);
    Rng trng(8);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<float> x = tokens<float>(5, 8, trng);
        MsaCtx<float> ctx;
        msa.forward(x, p, &ctx);
        for (int h = 0; h < 2; ++h)
            for (int i = 0; i < 5; ++i) {
                double sum = 0.0;
                for (int j = 0; j < 5; ++j) {
                    const float a = ctx.attn(h, i, j);
                    CHECK(a >= 0.0f);
                    sum += a;
                }
                CHECK(std::fabs(sum - 1.0) < 1e-6);
            }
    }
}

TEST_CASE("transformer block: zeroed output projections reduce to the identity") {
    TransformerBlock<float> block{toy_cfg(), "blk"};
    ParameterTable<float> p;
    Rng rng(9);
    block.init_params(p, rng);
    p.at("blk.msa.wo").fill(0.0f);
    p.at("blk.ffn.lin2.weight").fill(0.0f);
    p.at("blk.ffn.lin2.bias").fill(0.0f);
    Rng trng(10);
    Tensor<float> x = tokens<float>(5, 8, trng);
    Tensor<float> y = block.forward(x, p, nullptr);
    REQUIRE(y.shape() == x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("transformer block: gradient check") {
    TransformerBlock<double> block{toy_cfg(), "blk"};
    ParameterTable<double> p;
    Rng rng(11);
    block.init_params(p, rng);
    Rng trng(12);
    Tensor<double> x = tokens<double>(4, 8, trng);
    BlockCtx<double> ctx;
    Tensor<double> out = block.forward(x, p, &ctx);
    CHECK(out.shape() == x.shape());
    Rng urng(13);
    Tensor<double> u(out.shape());
    for (std::int64_t i = 0; i < u.numel(); ++i) u[i] = urng.normal();
    ParameterTable<double> grads;
    block.backward(ctx, u, p, grads);
    const double err = fuseloc_test::param_gradcheck(
        p, grads, [&] { return fuseloc_test::weighted_objective(u, [&] { return block.forward(x, p, nullptr); }); });
    CHECK(err < 1e-4);
}

TEST_CASE("cross attention: single key forces the value through") {
    CrossAttention<float> cross{toy_cfg(), "x"};
    ParameterTable<float> p;
    Rng rng(14);
    cross.init_params(p, rng);
    Rng trng(15);
    Tensor<float> xq = tokens<float>(4, 8, trng);
    Tensor<float> kv = tokens<float>(1, 8, trng);
    Tensor<float> y = cross.forward(xq, kv, p, nullptr);
    // every attended row equals Wo applied to the summed per-head values
    Tensor<float> v = linear_forward(kv, p.at("x.wv"), static_cast<const Tensor<float>*>(nullptr));
    Tensor<float> hsum({1, 4});
    for (int h = 0; h < 2; ++h)
        for (int c = 0; c < 4; ++c) hsum(0, c) += v(0, h * 4 + c);
    Tensor<float> expect = linear_forward(hsum, p.at("x.wo"), static_cast<const Tensor<float>*>(nullptr));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 8; ++j) CHECK(y(i, j) == doctest::Approx(expect(0, j)).epsilon(1e-5));
}

TEST_CASE("cross attention: exact key/value permutation invariance") {
    CrossAttention<float> cross{toy_cfg(), "x"};
    ParameterTable<float> p;
    Rng rng(16);
    cross.init_params(p, rng);
    Rng trng(17);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<float> xq = tokens<float>(3, 8, trng);
        Tensor<float> kv = tokens<float>(7, 8, trng);
        std::vector<int> perm{4, 2, 6, 0, 3, 5, 1};
        Tensor<float> y = cross.forward(xq, kv, p, nullptr);
        Tensor<float> yp = cross.forward(xq, permute_rows(kv, perm), p, nullptr);
        for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == yp[i]);
    }
}

TEST_CASE("cross attention: rows sum to one over 20 seeds") {
    CrossAttention<float> cross{toy_cfg(), "x"};
    ParameterTable<float> p;
    Rng rng(18);
    cross.init_params(p, rng);
    for (int seed = 0; seed < 20; ++seed) {
        Rng trng(100 + seed);
        Tensor<float> xq = tokens<float>(4, 8, trng);
        Tensor<float> kv = tokens<float>(6, 8, trng);
        CrossAttnCtx<float> ctx;
        cross.forward(xq, kv, p, &ctx);
        for (int h = 0; h < 2; ++h)
            for (int i = 0; i < 4; ++i) {
                double sum = 0.0;
                for (int j = 0; j < 6; ++j) sum += ctx.attn(h, i, j);
                CHECK(std::fabs(sum - 1.0) < 1e-6);
            }
    }
}

TEST_CASE("cross attention: gradient check incl. the shared q/k projection") {
    CrossAttention<double> cross{toy_cfg(), "x"};
    ParameterTable<double> p;
    Rng rng(19);
    cross.init_params(p, rng);
    Rng trng(20);
    Tensor<double> xq = tokens<double>(3, 8, trng);
    Tensor<double> kv = tokens<double>(5, 8, trng);
    CrossAttnCtx<double> ctx;
    Tensor<double> out = cross.forward(xq, kv, p, &ctx);
    Rng urng(21);
    Tensor<double> u(out.shape());
    for (std::int64_t i = 0; i < u.numel(); ++i) u[i] = urng.normal();
    ParameterTable<double> grads;
    cross.backward(xq, kv, ctx, u, p, grads);
    const double err = fuseloc_test::param_gradcheck(
        p, grads,
        [&] { return fuseloc_test::weighted_objective(u, [&] { return cross.forward(xq, kv, p, nullptr); }); });
    CHECK(err < 1e-4);
}

TEST_CASE("sequence interaction: zeroed cross projections reduce to the FFN residual") {
    SequenceInteraction<float> sis{toy_cfg(), "etm.sis"};
    ParameterTable<float> p;
    Rng rng(22);
    sis.init_params(p, rng);
    p.at("etm.sis.p2i.cross.wo").fill(0.0f);
    p.at("etm.sis.i2p.cross.wo").fill(0.0f);
    Rng trng(23);
    Tensor<float> img = tokens<float>(5, 8, trng);
    Tensor<float> pc = tokens<float>(7, 8, trng);
    auto [img2, pc2] = sis.forward(img, pc, p, nullptr);
    // with the attended half zero and the identity-initialized projection,
    // each direction is exactly the residual FFN of the original tokens
    ResidualFfn<float> f1{8, 12, "etm.sis.p2i.ffn"}, f2{8, 12, "etm.sis.i2p.ffn"};
    Tensor<float> e1 = f1.forward(img, p, nullptr);
    Tensor<float> e2 = f2.forward(pc, p, nullptr);
    for (std::int64_t i = 0; i < e1.numel(); ++i) CHECK(img2[i] == doctest::Approx(e1[i]).epsilon(1e-6));
    for (std::int64_t i = 0; i < e2.numel(); ++i) CHECK(pc2[i] == doctest::Approx(e2[i]).epsilon(1e-6));
}

TEST_CASE("sequence interaction: canonical lengths are preserved") {
    AttentionConfig cfg = toy_cfg(16, 4, 32);
    SequenceInteraction<float> sis{cfg, "etm.sis"};
    ParameterTable<float> p;
    Rng rng(24);
    sis.init_params(p, rng);
    Rng trng(25);
    Tensor<float> img = tokens<float>(120, 16, trng);
    Tensor<float> pc = tokens<float>(256, 16, trng);
    auto [img2, pc2] = sis.forward(img, pc, p, nullptr);
    CHECK(img2.shape() == std::vector<int>{120, 16});
    CHECK(pc2.shape() == std::vector<int>{256, 16});
}

TEST_CASE("sequence interaction: end-to-end gradient check on a 3+4 token pair") {
    SequenceInteraction<double> sis{toy_cfg(), "etm.sis"};
    ParameterTable<double> p;
    Rng rng(26);
    sis.init_params(p, rng);
    Rng trng(27);
    Tensor<double> img = tokens<double>(3, 8, trng);
    Tensor<double> pc = tokens<double>(4, 8, trng);
    SisCtx<double> ctx;
    auto [img2, pc2] = sis.forward(img, pc, p, &ctx);
    Rng urng(28);
    Tensor<double> ui(img2.shape()), up(pc2.shape());
    for (std::int64_t i = 0; i < ui.numel(); ++i) ui[i] = urng.normal();
    for (std::int64_t i = 0; i < up.numel(); ++i) up[i] = urng.normal();
    ParameterTable<double> grads;
    sis.backward(img, pc, ctx, ui, up, p, grads);
    const double err = fuseloc_test::param_gradcheck(p, grads, [&] {
        auto [a, b] = sis.forward(img, pc, p, nullptr);
        double acc = 0.0;
        for (std::int64_t i = 0; i < a.numel(); ++i) acc += ui[i] * a[i];
        for (std::int64_t i = 0; i < b.numel(); ++i) acc += up[i] * b[i];
        return acc;
    });
    CHECK(err < 1e-4);
}

TEST_CASE("feature fusion: zero projection passes the concatenation through") {
    FeatureFusion<float> ffs{8, 2, "etm.ffs"};
    ParameterTable<float> p;
    Rng rng(29);
    ffs.init_params(p, rng);  // projection zero-initialized by default
    Rng trng(30);
    Tensor<float> img = tokens<float>(5, 8, trng);
    Tensor<float> pc = tokens<float>(7, 8, trng);
    Tensor<float> fused = ffs.forward(img, pc, p, Mode::kTrain, nullptr);
    REQUIRE(fused.shape() == std::vector<int>{12, 8});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 8; ++j) CHECK(fused(i, j) == img(i, j));
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 8; ++j) CHECK(fused(5 + i, j) == pc(i, j));
}

TEST_CASE("feature fusion: canonical token count 120+256=376") {
    AttentionConfig cfg = toy_cfg(16, 4, 32);
    FeatureFusion<float> ffs{16, 2, "etm.ffs"};
    ParameterTable<float> p;
    Rng rng(31);
    ffs.init_params(p, rng);
    Rng trng(32);
    Tensor<float> img = tokens<float>(120, 16, trng);
    Tensor<float> pc = tokens<float>(256, 16, trng);
    Tensor<float> fused = ffs.forward(img, pc, p, Mode::kTrain, nullptr);
    CHECK(fused.shape() == std::vector<int>{376, 16});
}

TEST_CASE("feature fusion: gradient check on an 8-token toy") {
    FeatureFusion<double> ffs{6, 2, "etm.ffs"};
    ParameterTable<double> p;
    Rng rng(33);
    ffs.init_params(p, rng);
    // move the projection off zero so its gradient path is exercised, and the
    // depthwise bias off zero so no pre-relu value sits exactly on the kink
    Rng wrng(34);
    Tensor<double>& wp = p.at("etm.ffs.proj.weight");
    for (std::int64_t i = 0; i < wp.numel(); ++i) wp[i] = wrng.normal() * 0.2;
    Tensor<double>& db = p.at("etm.ffs.dw.bias");
    for (std::int64_t i = 0; i < db.numel(); ++i) db[i] = wrng.normal() * 0.1 + (db[i] < 0 ? -0.2 : 0.2);
    Rng trng(35);
    Tensor<double> img = tokens<double>(3, 6, trng);
    Tensor<double> pc = tokens<double>(5, 6, trng);
    FfsCtx<double> ctx;
    Tensor<double> fused = ffs.forward(img, pc, p, Mode::kTrain, &ctx);
    Rng urng(36);
    Tensor<double> u(fused.shape());
    for (std::int64_t i = 0; i < u.numel(); ++i) u[i] = urng.normal();
    ParameterTable<double> grads;
    ffs.backward(ctx, u, p, Mode::kTrain, grads);
    const double err = fuseloc_test::param_gradcheck(p, grads, [&] {
        return fuseloc_test::weighted_objective(u, [&] { return ffs.forward(img, pc, p, Mode::kTrain, nullptr); });
    });
    CHECK(err < 1e-4);
}
