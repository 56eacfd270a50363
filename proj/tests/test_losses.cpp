#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "rtsu/grad_check.hpp"
#include "rtsu/losses.hpp"

using rtsu::Dims3;
using rtsu::Shape;
using rtsu::Tensor;

namespace {

// random soft distribution over C channels per voxel
Tensor<double> random_probs(std::int64_t c, Dims3 d, rtsu::Rng& rng) {
    std::int64_t sp = d[0] * d[1] * d[2];
    std::vector<double> v(std::size_t(c * sp));
    for (std::int64_t vox = 0; vox < sp; ++vox) {
        double sum = 0;
        for (std::int64_t l = 0; l < c; ++l) {
            double e = std::exp(rng.uniform(-2, 2));
            v[std::size_t(l * sp + vox)] = e;
            sum += e;
        }
        for (std::int64_t l = 0; l < c; ++l) v[std::size_t(l * sp + vox)] /= sum;
    }
    return Tensor<double>::from({1, c, d[0], d[1], d[2]}, std::move(v));
}

Tensor<double> one_hot(const std::vector<std::uint8_t>& labels, std::int64_t c, Dims3 d) {
    std::int64_t sp = d[0] * d[1] * d[2];
    std::vector<double> v(std::size_t(c * sp), 0.0);
    for (std::int64_t vox = 0; vox < sp; ++vox)
        v[std::size_t(labels[std::size_t(vox)] * sp + vox)] = 1.0;
    return Tensor<double>::from({1, c, d[0], d[1], d[2]}, std::move(v));
}

}  // namespace

TEST_CASE("border_target") {
    SECTION("uniform nonzero volume has no border") {
        std::vector<std::uint8_t> labels(27, 3);
        auto b = rtsu::border_target(labels, {3, 3, 3});
        for (auto v : b) REQUIRE(v == 0);
    }
    SECTION("two abutting half volumes border along the interface planes") {
        Dims3 d{2, 2, 4};
        std::vector<std::uint8_t> labels(16);
        for (int i = 0; i < 16; ++i) labels[std::size_t(i)] = (i % 4 < 2) ? 1 : 2;
        auto b = rtsu::border_target(labels, d);
        for (std::int64_t z = 0; z < 2; ++z)
            for (std::int64_t y = 0; y < 2; ++y)
                for (std::int64_t x = 0; x < 4; ++x) {
                    bool interface_voxel = (x == 1 || x == 2);
                    REQUIRE(int(b[std::size_t((z * 2 + y) * 4 + x)]) == (interface_voxel ? 1 : 0));
                }
    }
    SECTION("matches a neighbor-scan oracle on random labels") {
        rtsu::Rng rng(401);
        Dims3 d{5, 6, 4};
        std::int64_t sp = 120;
        std::vector<std::uint8_t> labels(static_cast<std::size_t>(sp));
        for (auto& l : labels) l = std::uint8_t(rng.index(4));
        auto got = rtsu::border_target(labels, d);
        const std::int64_t off[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                        {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
        for (std::int64_t z = 0; z < d[0]; ++z)
            for (std::int64_t y = 0; y < d[1]; ++y)
                for (std::int64_t x = 0; x < d[2]; ++x) {
                    auto c = labels[std::size_t((z * d[1] + y) * d[2] + x)];
                    int expect = 0;
                    if (c != 0)
                        for (auto& o : off) {
                            std::int64_t zz = z + o[0], yy = y + o[1], xx = x + o[2];
                            if (zz < 0 || zz >= d[0] || yy < 0 || yy >= d[1] || xx < 0 ||
                                xx >= d[2])
                                continue;
                            if (labels[std::size_t((zz * d[1] + yy) * d[2] + xx)] != c) expect = 1;
                        }
                    REQUIRE(int(got[std::size_t((z * d[1] + y) * d[2] + x)]) == expect);
                }
    }
}

TEST_CASE("generalized_dice") {
    rtsu::Rng rng(409);
    Dims3 d{4, 4, 4};
    std::int64_t sp = 64;
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(sp));
    for (auto& l : labels) l = std::uint8_t(rng.index(3));

    SECTION("perfect one-hot prediction scores 0") {
        auto pred = one_hot(labels, 3, d);
        REQUIRE(rtsu::generalized_dice(pred, labels).item() == Catch::Approx(0.0).margin(1e-14));
    }
    SECTION("all mass on absent labels scores 1") {
        std::vector<std::uint8_t> only01(static_cast<std::size_t>(sp));
        for (std::size_t i = 0; i < only01.size(); ++i) only01[i] = std::uint8_t(i % 2);
        std::vector<double> v(std::size_t(4 * sp), 0.0);
        for (std::int64_t vox = 0; vox < sp; ++vox)
            v[std::size_t(3 * sp + vox)] = 1.0;  // all mass on absent label 3
        auto pred = Tensor<double>::from({1, 4, 4, 4, 4}, std::move(v));
        REQUIRE(rtsu::generalized_dice(pred, only01).item() == Catch::Approx(1.0).margin(1e-14));
    }
    SECTION("matches the direct-formula oracle on soft predictions") {
        auto pred = random_probs(3, d, rng);
        std::vector<std::vector<double>> ref(3, std::vector<double>(std::size_t(sp), 0.0));
        for (std::int64_t v = 0; v < sp; ++v) ref[labels[std::size_t(v)]][std::size_t(v)] = 1.0;
        double expect = oracle::generalized_dice_ref(pred.values(), ref, 3, sp);
        REQUIRE(rtsu::generalized_dice(pred, labels).item() ==
                Catch::Approx(expect).margin(1e-12));
    }
    SECTION("bounded in [0,1] and invariant to voxel permutation") {
        for (int trial = 0; trial < 20; ++trial) {
            auto pred = random_probs(3, d, rng);
            double g = rtsu::generalized_dice(pred, labels).item();
            REQUIRE(g >= 0.0);
            REQUIRE(g <= 1.0);
        }
        auto pred = random_probs(3, d, rng);
        double base = rtsu::generalized_dice(pred, labels).item();
        std::vector<std::int64_t> perm(static_cast<std::size_t>(sp));
        for (std::int64_t i = 0; i < sp; ++i) perm[std::size_t(i)] = (i * 37 + 11) % sp;
        std::vector<double> pv(std::size_t(3 * sp));
        std::vector<std::uint8_t> pl(static_cast<std::size_t>(sp));
        for (std::int64_t v = 0; v < sp; ++v) {
            pl[std::size_t(v)] = labels[std::size_t(perm[std::size_t(v)])];
            for (std::int64_t l = 0; l < 3; ++l)
                pv[std::size_t(l * sp + v)] =
                    pred.values()[std::size_t(l * sp + perm[std::size_t(v)])];
        }
        double permuted =
            rtsu::generalized_dice(Tensor<double>::from({1, 3, 4, 4, 4}, std::move(pv)), pl)
                .item();
        REQUIRE(permuted == Catch::Approx(base).margin(1e-12));
    }
    SECTION("missing labels are excluded; a volume with no labels at all is rejected") {
        std::vector<std::uint8_t> ones(static_cast<std::size_t>(sp), 1);
        auto pred = random_probs(6, d, rng);
        REQUIRE_NOTHROW(rtsu::generalized_dice(pred, ones));
        auto empty = Tensor<double>::from({1, 3, 1, 1, 0}, std::vector<double>{});
        REQUIRE_THROWS_WITH(rtsu::generalized_dice(empty, std::vector<std::uint8_t>{}),
                            Catch::Matchers::ContainsSubstring("empty"));
    }
}

TEST_CASE("generalized_dice gradient") {
    rtsu::Rng rng(431);
    std::vector<std::uint8_t> labels(27);
    for (auto& l : labels) l = std::uint8_t(rng.index(3));
    std::vector<double> lv(81);
    for (auto& e : lv) e = rng.uniform(-1, 1);
    auto logits = Tensor<double>::from({1, 3, 3, 3, 3}, std::move(lv));
    double err = rtsu::grad_check<double>(
        [&] { return rtsu::generalized_dice(rtsu::softmax_channels(logits), labels); }, {logits});
    REQUIRE(err < 1e-6);

    std::vector<std::uint8_t> border(27);
    for (std::size_t i = 0; i < 27; ++i) border[i] = (i % 3 == 0) ? 1 : 0;
    std::vector<double> rv(27);
    for (auto& e : rv) e = rng.uniform(-1, 1);
    auto raw = Tensor<double>::from({1, 1, 3, 3, 3}, std::move(rv));
    double err_b = rtsu::grad_check<double>(
        [&] { return rtsu::generalized_dice_binary(rtsu::sigmoid(raw), border); }, {raw});
    REQUIRE(err_b < 1e-6);
}

TEST_CASE("topk_ce") {
    rtsu::Rng rng(433);
    Dims3 d{2, 2, 5};
    std::int64_t sp = 20;
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(sp));
    for (auto& l : labels) l = std::uint8_t(rng.index(3));

    SECTION("perfect prediction is ~0") {
        auto pred = one_hot(labels, 3, d);
        REQUIRE(rtsu::topk_ce(pred, labels, 0.3).item() <= 1e-11);
    }
    SECTION("k=1 equals the ordinary mean cross-entropy") {
        auto pred = random_probs(3, d, rng);
        double mean_ce = 0;
        for (std::int64_t v = 0; v < sp; ++v)
            mean_ce += -std::log(pred.values()[std::size_t(labels[std::size_t(v)] * sp + v)]);
        mean_ce /= double(sp);
        REQUIRE(rtsu::topk_ce(pred, labels, 1.0).item() == Catch::Approx(mean_ce).margin(1e-12));
    }
    SECTION("constructed volume where 30% of voxels carry cost c") {
        double p = 0.2, c = -std::log(p);
        std::vector<double> v(std::size_t(3 * sp), 0.0);
        for (std::int64_t vox = 0; vox < sp; ++vox) {
            if (vox < 6) {
                v[std::size_t(labels[std::size_t(vox)] * sp + vox)] = p;
                v[std::size_t(((labels[std::size_t(vox)] + 1) % 3) * sp + vox)] = 1 - p;
            } else {
                v[std::size_t(labels[std::size_t(vox)] * sp + vox)] = 1.0;
            }
        }
        auto pred = Tensor<double>::from({1, 3, 2, 2, 5}, std::move(v));
        REQUIRE(rtsu::topk_ce(pred, labels, 0.3).item() == Catch::Approx(c).margin(1e-12));
    }
    SECTION("monotone non-increasing in the k fraction") {
        auto pred = random_probs(3, d, rng);
        double prev = rtsu::topk_ce(pred, labels, 0.05).item();
        for (double k : {0.1, 0.25, 0.5, 0.75, 1.0}) {
            double cur = rtsu::topk_ce(pred, labels, k).item();
            REQUIRE(cur <= prev + 1e-12);
            prev = cur;
        }
    }
    SECTION("gradient flows only through selected voxels") {
        auto pred = random_probs(3, d, rng);
        pred.set_requires_grad(true);
        pred.zero_grad();
        rtsu::topk_ce(pred, labels, 0.3).backward();
        std::int64_t touched = 0;
        for (double g : pred.grad())
            if (g != 0.0) ++touched;
        REQUIRE(touched == 6);  // ceil(0.3*20) voxels, one channel each
    }
}

TEST_CASE("total_loss composition") {
    rtsu::Rng rng(439);
    Dims3 dc{2, 2, 2};
    std::vector<std::uint8_t> lab_c(8), lab_p(8);
    for (auto& l : lab_c) l = std::uint8_t(rng.index(3));
    for (auto& l : lab_p) l = std::uint8_t(rng.index(3));
    rtsu::LossRefs refs;
    refs.labels_coarse = lab_c;
    refs.border_coarse = rtsu::border_target(lab_c, dc);
    refs.labels_patch = lab_p;
    refs.border_patch = rtsu::border_target(lab_p, dc);

    auto make_head = [&](const std::vector<std::uint8_t>& lab,
                         const std::vector<std::uint8_t>& border, bool perfect) {
        rtsu::DualHead<double> h;
        if (perfect) {
            h.lobes = one_hot(lab, 6, dc);
            std::vector<double> b(8);
            for (int i = 0; i < 8; ++i) b[std::size_t(i)] = border[std::size_t(i)];
            h.border = Tensor<double>::from({1, 1, 2, 2, 2}, std::move(b));
        } else {
            h.lobes = random_probs(6, dc, rng);
            std::vector<double> b(8);
            for (auto& e : b) e = rng.uniform(0.05, 0.95);
            h.border = Tensor<double>::from({1, 1, 2, 2, 2}, std::move(b));
        }
        return h;
    };

    SECTION("perfect predictions everywhere give zero") {
        auto s1 = make_head(lab_c, refs.border_coarse, true);
        auto s2 = make_head(lab_p, refs.border_patch, true);
        auto out = rtsu::total_loss(s1, s2, refs, rtsu::TrainingMode::Initial);
        REQUIRE(out.total.item() == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("total equals the sum of the four components exactly") {
        auto s1 = make_head(lab_c, refs.border_coarse, false);
        auto s2 = make_head(lab_p, refs.border_patch, false);
        auto out = rtsu::total_loss(s1, s2, refs, rtsu::TrainingMode::Initial);
        REQUIRE(out.total.item() == out.lobes1 + out.border1 + out.lobes2 + out.border2);
    }
    SECTION("retrain mode adds top-K cross-entropy on both lobe heads") {
        auto s1 = make_head(lab_c, refs.border_coarse, false);
        auto s2 = make_head(lab_p, refs.border_patch, false);
        auto init = rtsu::total_loss(s1, s2, refs, rtsu::TrainingMode::Initial);
        auto retrain = rtsu::total_loss(s1, s2, refs, rtsu::TrainingMode::Retrain);
        double ce1 = rtsu::topk_ce(s1.lobes, refs.labels_coarse, 0.3).item();
        double ce2 = rtsu::topk_ce(s2.lobes, refs.labels_patch, 0.3).item();
        REQUIRE(retrain.total.item() ==
                Catch::Approx(init.total.item() + ce1 + ce2).margin(1e-12));
    }
}
