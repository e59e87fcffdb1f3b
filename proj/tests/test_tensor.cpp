#include <doctest.h>

#include <cmath>
#include <vector>

#include "anchorkit/nn_ops.hpp"
#include "anchorkit/tensor.hpp"
#include "anchorkit/threading.hpp"

using namespace anchorkit;

TEST_CASE("latent grid construction and indexing") {
    LatentGrid g(2, 3, 4, 0.5);
    CHECK(g.size() == 24);
    for (double v : g.data) CHECK(v == 0.5);
    g.at(1, 2, 3) = 9.0;
    CHECK(g.data[1 * 12 + 2 * 4 + 3] == 9.0);
    CHECK(g.shape_str() == "2x3x4");
    CHECK_THROWS_AS(LatentGrid(0, 3, 4), contract_error);
    CHECK_THROWS_AS(LatentGrid(1, -1, 4), contract_error);
}

TEST_CASE("latent grid arithmetic") {
    LatentGrid a(1, 2, 2), b(1, 2, 2);
    for (int i = 0; i < 4; ++i) {
        a.data[i] = i + 1.0;
        b.data[i] = 10.0 * (i + 1);
    }
    LatentGrid c = a;
    c += b;
    for (int i = 0; i < 4; ++i) CHECK(c.data[i] == 11.0 * (i + 1));
    c -= b;
    CHECK(max_abs_diff(c, a) == 0.0);
    c *= 3.0;
    for (int i = 0; i < 4; ++i) CHECK(c.data[i] == 3.0 * (i + 1));
    axpy(c, -3.0, a);
    for (int i = 0; i < 4; ++i) CHECK(c.data[i] == 0.0);

    LatentGrid wrong(1, 2, 3);
    CHECK_THROWS_AS(c += wrong, contract_error);
    CHECK_THROWS_AS(axpy(c, 1.0, wrong), contract_error);
    CHECK_THROWS_AS(max_abs_diff(c, wrong), contract_error);
}

TEST_CASE("all_finite flags nan and inf") {
    LatentGrid g(1, 2, 2, 1.0);
    CHECK(all_finite(g));
    g.data[3] = std::nan("");
    CHECK(!all_finite(g));
    g.data[3] = INFINITY;
    CHECK(!all_finite(g));
}

TEST_CASE("matmul matches a plain triple loop") {
    Rng rng(21);
    Matrix a(5, 7), b(7, 3);
    for (double& v : a.data) v = rng.normal();
    for (double& v : b.data) v = rng.normal();
    Matrix got = matmul(a, b);

    Matrix want(5, 3);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 7; ++k) s += a.at(i, k) * b.at(k, j);
            want.at(i, j) = s;
        }
    REQUIRE(got.rows == 5);
    REQUIRE(got.cols == 3);
    for (std::size_t i = 0; i < got.data.size(); ++i)
        CHECK(std::fabs(got.data[i] - want.data[i]) <= 1e-12);

    CHECK_THROWS_AS(matmul(a, Matrix(5, 2)), contract_error);
}

TEST_CASE("transpose round trips") {
    Rng rng(22);
    Matrix a(4, 6);
    for (double& v : a.data) v = rng.normal();
    Matrix t = transpose(a);
    REQUIRE(t.rows == 6);
    REQUIRE(t.cols == 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j) CHECK(t.at(j, i) == a.at(i, j));
    Matrix tt = transpose(t);
    CHECK(tt.data == a.data);
}

namespace {

double conv3x3_ref(const LatentGrid& in, const std::vector<double>& w,
                   const std::vector<double>& b, int oc, int cy, int cx) {
    double acc = b[oc];
    for (int ic = 0; ic < in.channels; ++ic)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                int y = cy + ky - 1, x = cx + kx - 1;
                if (y < 0 || y >= in.height || x < 0 || x >= in.width) continue;
                acc += w[((oc * in.channels + ic) * 3 + ky) * 3 + kx] * in.at(ic, y, x);
            }
    return acc;
}

}  // namespace

TEST_CASE("conv3x3 zero padding and stride") {
    Rng rng(23);
    LatentGrid in(2, 5, 7);
    fill_normal(in, rng);
    std::vector<double> w(3 * 2 * 9), b(3);
    for (double& v : w) v = rng.normal();
    for (double& v : b) v = rng.normal();

    for (int stride : {1, 2}) {
        LatentGrid out = conv3x3(in, w, b, 3, stride);
        int oh = (in.height + stride - 1) / stride;
        int ow = (in.width + stride - 1) / stride;
        REQUIRE(out.height == oh);
        REQUIRE(out.width == ow);
        for (int oc = 0; oc < 3; ++oc)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox)
                    CHECK(std::fabs(out.at(oc, oy, ox) -
                                    conv3x3_ref(in, w, b, oc, oy * stride, ox * stride)) <= 1e-12);
    }
}

TEST_CASE("conv1x1 is a per-pixel linear map") {
    Rng rng(24);
    LatentGrid in(3, 4, 4);
    fill_normal(in, rng);
    std::vector<double> w(2 * 3), b(2);
    for (double& v : w) v = rng.normal();
    for (double& v : b) v = rng.normal();

    LatentGrid out = conv1x1(in, w, b, 2);
    for (int oc = 0; oc < 2; ++oc)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                double want = b[oc];
                for (int ic = 0; ic < 3; ++ic) want += w[oc * 3 + ic] * in.at(ic, y, x);
                CHECK(std::fabs(out.at(oc, y, x) - want) <= 1e-12);
            }
}

TEST_CASE("tanh_inplace applies elementwise") {
    LatentGrid g(1, 1, 3);
    g.data = {-2.0, 0.0, 1.5};
    tanh_inplace(g);
    CHECK(g.data[0] == std::tanh(-2.0));
    CHECK(g.data[1] == 0.0);
    CHECK(g.data[2] == std::tanh(1.5));
}

TEST_CASE("pool_tokens averages each block") {
    LatentGrid feat(1, 4, 4);
    for (int i = 0; i < 16; ++i) feat.data[i] = i;
    Matrix tokens = pool_tokens(feat, 2, 2);
    REQUIRE(tokens.rows == 4);
    REQUIRE(tokens.cols == 1);
    CHECK(tokens.at(0, 0) == doctest::Approx((0 + 1 + 4 + 5) / 4.0).epsilon(1e-15));
    CHECK(tokens.at(1, 0) == doctest::Approx((2 + 3 + 6 + 7) / 4.0).epsilon(1e-15));
    CHECK(tokens.at(2, 0) == doctest::Approx((8 + 9 + 12 + 13) / 4.0).epsilon(1e-15));
    CHECK(tokens.at(3, 0) == doctest::Approx((10 + 11 + 14 + 15) / 4.0).epsilon(1e-15));

    // uneven split still covers every pixel exactly once
    LatentGrid odd(2, 5, 7, 1.0);
    Matrix t2 = pool_tokens(odd, 2, 3);
    for (double v : t2.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("add_tokens_upsampled covers a partition of the grid") {
    LatentGrid feat(2, 5, 7, 0.0);
    Matrix tokens(2 * 3, 2);
    for (double& v : tokens.data) v = 1.0;
    add_tokens_upsampled(feat, tokens, 2, 3);
    for (double v : feat.data) CHECK(v == 1.0);  // each pixel touched exactly once

    Matrix wrong(5, 2);
    CHECK_THROWS_AS(add_tokens_upsampled(feat, wrong, 2, 3), contract_error);
}

TEST_CASE("pool then add_tokens_upsampled fixes constant grids") {
    LatentGrid feat(3, 6, 6, 0.25);
    Matrix tokens = pool_tokens(feat, 2, 2);
    LatentGrid acc(3, 6, 6, 0.0);
    add_tokens_upsampled(acc, tokens, 2, 2);
    for (double v : acc.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("upsample_nearest replicates source pixels") {
    LatentGrid in(1, 2, 2);
    in.data = {1.0, 2.0, 3.0, 4.0};
    LatentGrid out = upsample_nearest(in, 4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            CHECK(out.at(0, y, x) == in.at(0, y / 2, x / 2));

    // identity when sizes match
    LatentGrid same = upsample_nearest(in, 2, 2);
    CHECK(same.data == in.data);
}

TEST_CASE("thread pool runs every index exactly once") {
    ThreadPool pool(4);
    const std::size_t n = 1000;
    std::vector<int> hits(n, 0);
    pool.parallel_for(n, [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) CHECK(h == 1);
    pool.parallel_for(0, [&](std::size_t) { REQUIRE(false); });
}

TEST_CASE("thread pool size clamps to at least one") {
    ThreadPool p0(0);
    CHECK(p0.size() == 1);
    std::vector<int> hits(10, 0);
    p0.parallel_for(10, [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) CHECK(h == 1);
}
