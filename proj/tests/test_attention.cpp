#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "rtsu/attention.hpp"
#include "rtsu/grad_check.hpp"

using rtsu::Dims3;
using rtsu::GeometricMap;
using rtsu::NonLocalParams;
using rtsu::Shape;
using rtsu::Tensor;

namespace {

Tensor<double> random_tensor(Shape s, rtsu::Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(std::size_t(rtsu::numel(s)));
    for (auto& e : v) e = rng.uniform(lo, hi);
    return Tensor<double>::from(std::move(s), std::move(v));
}

NonLocalParams<double> random_params(std::int64_t c, std::int64_t cp, rtsu::Rng& rng,
                                     std::int64_t steps = 3) {
    NonLocalParams<double> p;
    auto mk = [&](std::int64_t r, std::int64_t k) { return random_tensor({r, k}, rng, -0.5, 0.5); };
    p.w_theta = mk(cp, c);
    p.w_phi = mk(cp, c);
    p.w_g = mk(cp, c);
    p.w_omega = mk(cp, 3);
    p.w_rho = mk(cp, 3);
    p.w_r = mk(c, cp);
    p.steps = steps;
    return p;
}

oracle::NonLocalRef to_ref(const NonLocalParams<double>& p) {
    return {p.w_theta.values(), p.w_phi.values(),  p.w_g.values(), p.w_omega.values(),
            p.w_rho.values(),   p.w_r.values(),    p.channels(),   p.embed_dim()};
}

GeometricMap<double> full_map(Dims3 fd, std::int64_t stride = 8) {
    Dims3 src{fd[0] * stride, fd[1] * stride, fd[2] * stride};
    return rtsu::geometric_map<double>(fd, stride, {0, 0, 0}, src);
}

}  // namespace

TEST_CASE("dense_nonlocal degenerate forms") {
    rtsu::Rng rng(211);
    SECTION("zero embeddings give uniform attention; zero W_r returns the input") {
        auto x = random_tensor({1, 3, 2, 2, 2}, rng);
        auto mu = full_map({2, 2, 2});
        auto p = random_params(3, 2, rng);
        p.w_theta = Tensor<double>::zeros({2, 3});
        p.w_phi = Tensor<double>::zeros({2, 3});
        p.w_omega = Tensor<double>::zeros({2, 3});
        p.w_rho = Tensor<double>::zeros({2, 3});
        p.w_r = Tensor<double>::zeros({3, 2});
        auto z = rtsu::dense_nonlocal(x, mu, p);
        for (std::size_t i = 0; i < z.values().size(); ++i)
            REQUIRE(z.values()[i] == x.values()[i]);  // exact residual identity
    }
    SECTION("single position grid reduces to W_r W_g x + x") {
        auto x = random_tensor({1, 4, 1, 1, 1}, rng);
        auto mu = full_map({1, 1, 1});
        auto p = random_params(4, 2, rng);
        auto z = rtsu::dense_nonlocal(x, mu, p);
        // y = W_g x (softmax over one element is 1)
        std::vector<double> y(2, 0.0);
        for (int c = 0; c < 2; ++c)
            for (int k = 0; k < 4; ++k)
                y[std::size_t(c)] += p.w_g.values()[std::size_t(c * 4 + k)] *
                                     x.values()[std::size_t(k)];
        for (int c = 0; c < 4; ++c) {
            double expect = x.values()[std::size_t(c)];
            for (int k = 0; k < 2; ++k)
                expect += p.w_r.values()[std::size_t(c * 2 + k)] * y[std::size_t(k)];
            REQUIRE(z.values()[std::size_t(c)] == Catch::Approx(expect).margin(1e-12));
        }
    }
    SECTION("grid mismatch rejected") {
        auto x = random_tensor({1, 3, 2, 2, 2}, rng);
        auto mu = full_map({2, 2, 3});
        auto p = random_params(3, 2, rng);
        REQUIRE_THROWS(rtsu::dense_nonlocal(x, mu, p));
    }
}

TEST_CASE("dense_nonlocal matches the pairwise-loop oracle") {
    rtsu::Rng rng(223);
    auto x = random_tensor({1, 4, 2, 2, 2}, rng);
    auto mu = full_map({2, 2, 2});
    auto p = random_params(4, 2, rng);
    auto z = rtsu::dense_nonlocal(x, mu, p);
    auto ref = oracle::dense_nonlocal_ref(x.values(), mu.coords.values(), 8, to_ref(p));
    for (std::size_t i = 0; i < ref.size(); ++i)
        REQUIRE(z.values()[i] == Catch::Approx(ref[i]).margin(1e-10));
}

TEST_CASE("dense_nonlocal permutation consistency") {
    rtsu::Rng rng(227);
    std::int64_t C = 3, P = 8;
    auto x = random_tensor({1, C, 2, 2, 2}, rng);
    auto mu = full_map({2, 2, 2});
    auto p = random_params(C, 2, rng);
    auto z = rtsu::dense_nonlocal(x, mu, p);

    // permute positions of x and mu consistently (any fixed permutation)
    std::vector<std::int64_t> perm{3, 0, 6, 1, 7, 2, 5, 4};
    std::vector<double> xp(x.values().size()), mup(std::size_t(3 * P));
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < P; ++i)
            xp[std::size_t(c * P + i)] =
                x.values()[std::size_t(c * P + perm[std::size_t(i)])];
    for (int a = 0; a < 3; ++a)
        for (std::int64_t i = 0; i < P; ++i)
            mup[std::size_t(a * P + i)] =
                mu.coords.values()[std::size_t(a * P + perm[std::size_t(i)])];
    GeometricMap<double> mu2 = mu;
    mu2.coords = Tensor<double>::from({3, P}, std::move(mup));
    auto z2 = rtsu::dense_nonlocal(Tensor<double>::from({1, C, 2, 2, 2}, std::move(xp)), mu2, p);
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < P; ++i)
            REQUIRE(z2.values()[std::size_t(c * P + i)] ==
                    Catch::Approx(z.values()[std::size_t(c * P + perm[std::size_t(i)])])
                        .margin(1e-11));
}

TEST_CASE("crisscross_step equals masked dense attention") {
    rtsu::Rng rng(229);
    for (Dims3 g : {Dims3{2, 2, 2}, Dims3{3, 4, 2}, Dims3{4, 4, 4}, Dims3{1, 3, 5}}) {
        auto x = random_tensor({1, 4, g[0], g[1], g[2]}, rng);
        auto mu = full_map(g);
        auto p = random_params(4, 3, rng);
        auto z = rtsu::crisscross_step(x, mu, p);
        auto ref = oracle::masked_dense_nonlocal_ref(x.values(), mu.coords.values(), g[0], g[1],
                                                     g[2], to_ref(p));
        for (std::size_t i = 0; i < ref.size(); ++i)
            REQUIRE(z.values()[i] == Catch::Approx(ref[i]).margin(1e-10));
    }
}

TEST_CASE("crisscross on a line grid covers everything and equals dense") {
    rtsu::Rng rng(233);
    auto x = random_tensor({1, 3, 1, 1, 6}, rng);
    auto mu = full_map({1, 1, 6});
    auto p = random_params(3, 2, rng);
    auto dense = rtsu::dense_nonlocal(x, mu, p);
    auto cc = rtsu::crisscross_step(x, mu, p);
    for (std::size_t i = 0; i < cc.values().size(); ++i)
        REQUIRE(cc.values()[i] == Catch::Approx(dense.values()[i]).margin(1e-12));
}

TEST_CASE("crisscross with zero embeddings averages g over the neighborhood") {
    rtsu::Rng rng(239);
    Dims3 g{2, 3, 2};
    std::int64_t P = 12, K = 2 + 3 + 2 - 2;
    auto x = random_tensor({1, 3, g[0], g[1], g[2]}, rng);
    auto mu = full_map(g);
    auto p = random_params(3, 2, rng);
    p.w_theta = Tensor<double>::zeros({2, 3});
    p.w_phi = Tensor<double>::zeros({2, 3});
    p.w_omega = Tensor<double>::zeros({2, 3});
    p.w_rho = Tensor<double>::zeros({2, 3});
    auto z = rtsu::crisscross_step(x, mu, p);
    // expected: z = W_r * mean_{j in Omega_i} (W_g x_j) + x
    auto ref = oracle::masked_dense_nonlocal_ref(x.values(), mu.coords.values(), g[0], g[1], g[2],
                                                 to_ref(p));
    for (std::size_t i = 0; i < ref.size(); ++i)
        REQUIRE(z.values()[i] == Catch::Approx(ref[i]).margin(1e-12));
    // and the uniform weight is 1/K by construction
    auto probe = rtsu::attention_probe(x, mu, p, {0, 0, 0});
    (void)K;
    double sum = 0;
    for (double w : probe.weights) sum += w;
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("recurrent_nonlocal") {
    rtsu::Rng rng(241);
    SECTION("T=1 is exactly one criss-cross step") {
        auto x = random_tensor({1, 3, 2, 2, 3}, rng);
        auto mu = full_map({2, 2, 3});
        auto p = random_params(3, 2, rng, 1);
        auto a = rtsu::recurrent_nonlocal(x, mu, p);
        auto b = rtsu::crisscross_step(x, mu, p);
        REQUIRE(a.values() == b.values());
    }
    SECTION("criss-cross hop graph of 3x4x5 has diameter <= 3") {
        REQUIRE(oracle::bfs_diameter(3, 4, 5) <= 3);
        REQUIRE(oracle::bfs_diameter(3, 4, 5) == 3);
    }
    SECTION("T=3 propagates corner-to-corner gradients on a 4x4x4 grid") {
        auto x = random_tensor({1, 2, 4, 4, 4}, rng);
        x.set_requires_grad(true);
        x.zero_grad();
        auto mu = full_map({4, 4, 4});
        auto p = random_params(2, 2, rng, 3);
        auto z = rtsu::recurrent_nonlocal(x, mu, p);
        // scalar: sum over channels of the (3,3,3) corner output
        auto corner = rtsu::crop(z, {0, 0, 3, 3, 3}, {1, 2, 1, 1, 1});
        rtsu::sum_all(corner).backward();
        // gradient at the opposite corner (0,0,0), any channel
        double g = std::abs(x.grad()[0]) + std::abs(x.grad()[64]);
        REQUIRE(g > 0.0);
    }
    SECTION("residual identity holds for the recurrent form") {
        auto x = random_tensor({1, 3, 2, 2, 2}, rng);
        auto mu = full_map({2, 2, 2});
        auto p = random_params(3, 2, rng, 3);
        p.w_r = Tensor<double>::zeros({3, 2});
        auto z = rtsu::recurrent_nonlocal(x, mu, p);
        for (std::size_t i = 0; i < z.values().size(); ++i)
            REQUIRE(z.values()[i] == x.values()[i]);
    }
}

TEST_CASE("attention_probe") {
    rtsu::Rng rng(251);
    auto x = random_tensor({1, 3, 2, 3, 2}, rng);
    auto mu = full_map({2, 3, 2});
    auto p = random_params(3, 2, rng);

    SECTION("weights are a distribution and match the dense oracle row") {
        auto probe = rtsu::attention_probe(x, mu, p, {1, 2, 0});
        std::int64_t P = 12, i = (1 * 3 + 2) * 2 + 0;
        double sum = 0;
        for (double w : probe.weights) {
            REQUIRE(w >= 0.0);
            sum += w;
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));

        // oracle row: logits and softmax from the pairwise formula
        auto r = to_ref(p);
        std::vector<double> logits(static_cast<std::size_t>(P));
        for (std::int64_t j = 0; j < P; ++j) {
            double f = 0, tau = 0;
            for (std::int64_t c = 0; c < r.Cp; ++c) {
                double ti = 0, pj = 0, ui = 0, vj = 0;
                for (std::int64_t k = 0; k < r.C; ++k) {
                    ti += r.wt[std::size_t(c * r.C + k)] * x.values()[std::size_t(k * P + i)];
                    pj += r.wp[std::size_t(c * r.C + k)] * x.values()[std::size_t(k * P + j)];
                }
                for (int a = 0; a < 3; ++a) {
                    ui += r.wo[std::size_t(c * 3 + a)] *
                          mu.coords.values()[std::size_t(a * P + i)];
                    vj += r.wrho[std::size_t(c * 3 + a)] *
                          mu.coords.values()[std::size_t(a * P + j)];
                }
                f += ti * pj;
                tau += ui * vj;
            }
            logits[std::size_t(j)] = f + std::max(0.0, tau);
        }
        auto wref = oracle::softmax(logits);
        for (std::int64_t j = 0; j < P; ++j) {
            REQUIRE(probe.logits[std::size_t(j)] ==
                    Catch::Approx(logits[std::size_t(j)]).margin(1e-10));
            REQUIRE(probe.weights[std::size_t(j)] ==
                    Catch::Approx(wref[std::size_t(j)]).margin(1e-10));
        }
    }
    SECTION("zero embeddings give uniform weights") {
        auto p0 = random_params(3, 2, rng);
        p0.w_theta = Tensor<double>::zeros({2, 3});
        p0.w_phi = Tensor<double>::zeros({2, 3});
        p0.w_omega = Tensor<double>::zeros({2, 3});
        p0.w_rho = Tensor<double>::zeros({2, 3});
        auto probe = rtsu::attention_probe(x, mu, p0, {0, 0, 0});
        for (double w : probe.weights) REQUIRE(w == Catch::Approx(1.0 / 12).margin(1e-12));
    }
    SECTION("out-of-range location rejected") {
        REQUIRE_THROWS(rtsu::attention_probe(x, mu, p, {2, 0, 0}));
    }
}

TEST_CASE("attention gradient checks") {
    rtsu::Rng rng(257);
    auto x = random_tensor({1, 3, 2, 2, 3}, rng);
    auto mu = full_map({2, 2, 3});
    auto p = random_params(3, 2, rng, 2);
    auto probe = random_tensor({1, 3, 2, 2, 3}, rng);
    std::vector<Tensor<double>> leaves{x,         p.w_theta, p.w_phi, p.w_g,
                                       p.w_omega, p.w_rho,   p.w_r};

    double e_dense = rtsu::grad_check<double>(
        [&] { return rtsu::sum_all(rtsu::mul(rtsu::dense_nonlocal(x, mu, p), probe)); }, leaves);
    REQUIRE(e_dense < 1e-5);

    double e_cc = rtsu::grad_check<double>(
        [&] { return rtsu::sum_all(rtsu::mul(rtsu::crisscross_step(x, mu, p), probe)); }, leaves);
    REQUIRE(e_cc < 1e-5);

    double e_rec = rtsu::grad_check<double>(
        [&] { return rtsu::sum_all(rtsu::mul(rtsu::recurrent_nonlocal(x, mu, p), probe)); },
        leaves);
    REQUIRE(e_rec < 1e-5);
}
