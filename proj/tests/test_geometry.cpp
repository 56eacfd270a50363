#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "rtsu/geometry.hpp"
#include "rtsu/grad_check.hpp"

using rtsu::Dims3;
using rtsu::Tensor;

TEST_CASE("geometric_map coordinate formula") {
    SECTION("single feature at full stride sits at the exact center") {
        auto m = rtsu::geometric_map<double>({1, 1, 1}, 32, {0, 0, 0}, {32, 32, 32});
        for (int a = 0; a < 3; ++a) REQUIRE(m.coords.values()[std::size_t(a)] == 0.0);
    }
    SECTION("two features on a 32 axis with stride 16") {
        auto m = rtsu::geometric_map<double>({1, 1, 2}, 16, {0, 0, 0}, {16, 16, 32});
        // w-axis coords occupy the third row of the (3,P) matrix
        REQUIRE(m.coords.values()[std::size_t(2 * 2 + 0)] == Catch::Approx(-0.25));
        REQUIRE(m.coords.values()[std::size_t(2 * 2 + 1)] == Catch::Approx(0.25));
    }
    SECTION("offset 16 pushes the patch outside and is rejected; offset 8 is exact") {
        REQUIRE_THROWS_WITH(
            rtsu::geometric_map<double>({1, 1, 2}, 16, {0, 0, 16}, {16, 16, 32}),
            Catch::Matchers::ContainsSubstring("outside"));
        auto m = rtsu::geometric_map<double>({1, 1, 2}, 16, {0, 0, 8}, {16, 16, 32});
        REQUIRE(m.coords.values()[std::size_t(2 * 2 + 0)] == Catch::Approx(0.0));
        REQUIRE(m.coords.values()[std::size_t(2 * 2 + 1)] == Catch::Approx(0.5));
    }
    SECTION("clamped variant keeps out-of-scan centers in range") {
        auto m = rtsu::geometric_map_clamped<double>({1, 1, 4}, 8, {0, 0, -16}, {32, 32, 32});
        for (double v : m.coords.values()) {
            REQUIRE(v >= -0.5);
            REQUIRE(v <= 0.5);
        }
    }
}

TEST_CASE("geometric_map invariants") {
    SECTION("translation consistency") {
        auto a = rtsu::geometric_map<double>({2, 2, 2}, 4, {0, 0, 0}, {64, 64, 64});
        auto b = rtsu::geometric_map<double>({2, 2, 2}, 4, {0, 0, 12}, {64, 64, 64});
        std::int64_t P = 8;
        for (std::int64_t p = 0; p < P; ++p) {
            REQUIRE(b.coords.values()[std::size_t(0 * P + p)] ==
                    a.coords.values()[std::size_t(0 * P + p)]);
            REQUIRE(b.coords.values()[std::size_t(2 * P + p)] ==
                    Catch::Approx(a.coords.values()[std::size_t(2 * P + p)] + 12.0 / 64.0)
                        .margin(1e-15));
        }
    }
    SECTION("zero mean over a full uncropped input, up to discretization") {
        auto m = rtsu::geometric_map<double>({4, 6, 8}, 8, {0, 0, 0}, {32, 48, 64});
        std::int64_t P = m.positions();
        for (int a = 0; a < 3; ++a) {
            double mean = 0;
            for (std::int64_t p = 0; p < P; ++p)
                mean += m.coords.values()[std::size_t(a * P + p)];
            mean /= double(P);
            double slack = 8.0 / double(m.source_shape[std::size_t(a)]);
            REQUIRE(std::abs(mean) <= slack);
        }
    }
    SECTION("all coordinates within [-0.5, 0.5]") {
        auto m = rtsu::geometric_map<double>({3, 5, 7}, 8, {4, 8, 0}, {64, 64, 64});
        for (double v : m.coords.values()) {
            REQUIRE(v >= -0.5);
            REQUIRE(v <= 0.5);
        }
    }
}

TEST_CASE("pairwise_geometric_term") {
    rtsu::Rng rng(101);
    auto m = rtsu::geometric_map<double>({2, 2, 2}, 8, {0, 0, 0}, {16, 16, 16});
    auto rand_mat = [&rng](std::int64_t r, std::int64_t c) {
        std::vector<double> v(std::size_t(r * c));
        for (auto& e : v) e = rng.uniform(-1, 1);
        return Tensor<double>::from({r, c}, std::move(v));
    };

    SECTION("zero W_omega gives the zero matrix") {
        auto t = rtsu::pairwise_geometric_term(m, Tensor<double>::zeros({4, 3}), rand_mat(4, 3));
        for (double v : t.values()) REQUIRE(v == 0.0);
    }
    SECTION("a position at the exact grid center has an all-zero row") {
        auto mc = rtsu::geometric_map<double>({1, 1, 3}, 4, {0, 0, 0}, {4, 4, 12});
        // middle position has coords (0,0,0)
        auto t = rtsu::pairwise_geometric_term(mc, rand_mat(4, 3), rand_mat(4, 3));
        for (int j = 0; j < 3; ++j) REQUIRE(t.values()[std::size_t(1 * 3 + j)] == 0.0);
    }
    SECTION("matches the direct double-loop oracle and stays nonnegative") {
        auto wo = rand_mat(5, 3);
        auto wr = rand_mat(5, 3);
        auto t = rtsu::pairwise_geometric_term(m, wo, wr);
        std::int64_t P = m.positions();
        for (std::int64_t i = 0; i < P; ++i)
            for (std::int64_t j = 0; j < P; ++j) {
                double acc = 0;
                for (int c = 0; c < 5; ++c) {
                    double ui = 0, vj = 0;
                    for (int a = 0; a < 3; ++a) {
                        ui += wo.values()[std::size_t(c * 3 + a)] *
                              m.coords.values()[std::size_t(a * P + i)];
                        vj += wr.values()[std::size_t(c * 3 + a)] *
                              m.coords.values()[std::size_t(a * P + j)];
                    }
                    acc += ui * vj;
                }
                double expect = std::max(0.0, acc);
                REQUIRE(t.values()[std::size_t(i * P + j)] ==
                        Catch::Approx(expect).margin(1e-12));
                REQUIRE(t.values()[std::size_t(i * P + j)] >= 0.0);
            }
    }
    SECTION("differentiable in both embeddings") {
        auto wo = rand_mat(4, 3);
        auto wr = rand_mat(4, 3);
        double err = rtsu::grad_check<double>(
            [&] { return rtsu::sum_all(rtsu::pairwise_geometric_term(m, wo, wr)); }, {wo, wr});
        REQUIRE(err < 1e-6);
    }
}
