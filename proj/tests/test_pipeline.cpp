#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <queue>

#include "rtsu/phantom.hpp"
#include "rtsu/pipeline.hpp"
#include "rtsu/volume.hpp"

using rtsu::Dims3;
using rtsu::Volume;

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / fs::path(rtsu::str("rtsu_test_", ::getpid()))) {
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("mhd save/load round trip is bit exact") {
    TempDir tmp;
    Volume v;
    v.dims_xyz = {3, 4, 2};
    v.spacing_xyz = {0.7, 0.8, 1.25};
    rtsu::Rng rng(601);
    v.data.resize(24);
    for (auto& e : v.data) e = rng.uniform(-1000, 1000);
    rtsu::save_volume(tmp.file("vol.mhd"), v, rtsu::MhdType::Double);
    auto back = rtsu::load_volume(tmp.file("vol.mhd"));
    REQUIRE(back.dims_xyz == v.dims_xyz);
    REQUIRE(back.spacing_xyz == v.spacing_xyz);
    REQUIRE(back.data == v.data);  // bit exact

    rtsu::LabelVolume l;
    l.dims_xyz = v.dims_xyz;
    l.spacing_xyz = v.spacing_xyz;
    l.labels.resize(24);
    for (auto& e : l.labels) e = std::uint8_t(rng.index(6));
    rtsu::save_labels(tmp.file("lab.mhd"), l);
    auto lback = rtsu::load_labels(tmp.file("lab.mhd"));
    REQUIRE(lback.labels == l.labels);
}

TEST_CASE("mhd short volumes round trip exactly on integral values") {
    TempDir tmp;
    Volume v;
    v.dims_xyz = {4, 4, 4};
    v.spacing_xyz = {1, 1, 1};
    v.data.resize(64);
    rtsu::Rng rng(607);
    for (auto& e : v.data) e = double(std::int64_t(rng.uniform(-1200, 400)));
    rtsu::save_volume(tmp.file("short.mhd"), v, rtsu::MhdType::Short);
    auto back = rtsu::load_volume(tmp.file("short.mhd"));
    REQUIRE(back.data == v.data);
}

TEST_CASE("mhd rejects malformed input naming the key") {
    TempDir tmp;
    {
        std::ofstream os(tmp.file("nokey.mhd"));
        os << "NDims = 3\nDimSize = 2 2 2\nElementType = MET_DOUBLE\n"
           << "ElementDataFile = nokey.raw\n";
    }
    REQUIRE_THROWS_WITH(rtsu::load_volume(tmp.file("nokey.mhd")),
                        Catch::Matchers::ContainsSubstring("ElementSpacing"));
    {
        std::ofstream os(tmp.file("badsize.mhd"));
        os << "NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\n"
           << "ElementType = MET_DOUBLE\nElementDataFile = badsize.raw\n";
        std::ofstream raw(tmp.file("badsize.raw"), std::ios::binary);
        double d = 0;
        raw.write(reinterpret_cast<char*>(&d), 8);  // 1 of 8 voxels
    }
    REQUIRE_THROWS_WITH(rtsu::load_volume(tmp.file("badsize.mhd")),
                        Catch::Matchers::ContainsSubstring("bytes"));
}

TEST_CASE("hand-written mhd fixture parses to known values") {
    TempDir tmp;
    {
        std::ofstream os(tmp.file("fix.mhd"));
        os << "ObjectType = Image\n"      // extra standard keys are ignored
           << "NDims = 3\n"
           << "BinaryData = True\n"
           << "DimSize = 2 2 2\n"
           << "ElementSpacing = 0.5 0.5 2\n"
           << "ElementType = MET_UCHAR\n"
           << "ElementDataFile = fix.raw\n";
        std::ofstream raw(tmp.file("fix.raw"), std::ios::binary);
        unsigned char bytes[8] = {0, 1, 2, 3, 4, 5, 0, 1};
        raw.write(reinterpret_cast<char*>(bytes), 8);
    }
    auto v = rtsu::load_volume(tmp.file("fix.mhd"));
    REQUIRE(v.dims_xyz == std::array<std::int64_t, 3>{2, 2, 2});
    REQUIRE(v.spacing_xyz == std::array<double, 3>{0.5, 0.5, 2.0});
    // x fastest: value at (x=1,y=0,z=0) is the second byte
    REQUIRE(v.data[1] == 1.0);
    REQUIRE(v.data[5] == 5.0);
    auto labels = rtsu::load_labels(tmp.file("fix.mhd"));
    REQUIRE(labels.labels[4] == 4);
}

TEST_CASE("preprocess endpoint mapping and geometry") {
    Volume v;
    v.dims_xyz = {32, 32, 20};
    v.spacing_xyz = {1.0, 1.0, 1.6};
    v.data.assign(std::size_t(v.voxels()), 0.0);
    v.data[0] = -1200;
    v.data[1] = 400;
    v.data[2] = -400;
    v.data[3] = -5000;  // clamps to -1200
    v.data[4] = 2000;   // clamps to 400

    SECTION("clamp endpoints map to 0, 1, 0.5 before resampling") {
        auto [t, rec] = rtsu::preprocess(v, 32);  // identity in-plane keeps voxels aligned
        // z resampled (spacing 1.6 -> 1.0): check values via the first slice,
        // whose first voxels interpolate within the same x row
        (void)rec;
        // instead verify on an in-plane identity + z-identity volume
        Volume iso = v;
        iso.spacing_xyz = {1.0, 1.0, 1.0};
        auto [t2, rec2] = rtsu::preprocess(iso, 32);
        (void)rec2;
        REQUIRE(t2.values()[0] == Catch::Approx(0.0).margin(1e-12));
        REQUIRE(t2.values()[1] == Catch::Approx(1.0).margin(1e-12));
        REQUIRE(t2.values()[2] == Catch::Approx(0.5).margin(1e-12));
        REQUIRE(t2.values()[3] == Catch::Approx(0.0).margin(1e-12));
        REQUIRE(t2.values()[4] == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("default target is 256x256 in-plane with padded z divisible by 16") {
        auto [t, rec] = rtsu::preprocess(v);
        REQUIRE(t.shape()[3] == 256);
        REQUIRE(t.shape()[4] == 256);
        REQUIRE(t.shape()[2] % 16 == 0);
        REQUIRE(rec.inplane == 256);
        // isotropic target: z spacing equals the post-resample x spacing
        REQUIRE(rec.resampled_spacing[0] == Catch::Approx(rec.resampled_spacing[2]));
    }
    SECTION("clamping is idempotent and rescale is monotone") {
        auto once = [&](double hu) {
            double x = std::min(400.0, std::max(-1200.0, hu));
            return (x + 1200.0) / 1600.0;
        };
        REQUIRE(once(once(-700) * 1600 - 1200) == Catch::Approx(once(-700)));
        double prev = -1;
        for (double hu = -1200; hu <= 400; hu += 50) {
            REQUIRE(once(hu) > prev);
            prev = once(hu);
        }
    }
}

TEST_CASE("postprocess restores the original dims") {
    rtsu::Rng rng(613);
    for (int trial = 0; trial < 8; ++trial) {
        Volume v;
        v.dims_xyz = {std::int64_t(8 + rng.index(40)), std::int64_t(8 + rng.index(40)),
                      std::int64_t(5 + rng.index(28))};
        v.spacing_xyz = {rng.uniform(0.5, 1.2), rng.uniform(0.5, 1.2), rng.uniform(0.5, 2.5)};
        v.data.assign(std::size_t(v.voxels()), -850.0);
        auto [t, rec] = rtsu::preprocess(v, 24);
        auto dims = rtsu::preprocessed_dims(rec);
        REQUIRE(t.shape() == rtsu::Shape{1, 1, dims[0], dims[1], dims[2]});
        std::vector<std::uint8_t> fake(std::size_t(dims[0] * dims[1] * dims[2]), 3);
        auto back = rtsu::postprocess(fake, rec);
        REQUIRE(back.dims_xyz == v.dims_xyz);
        for (auto l : back.labels) REQUIRE(l == 3);  // constant labels survive
    }
}

TEST_CASE("label preprocessing round trips on an already isotropic grid") {
    auto pair = rtsu::phantom(11, {{32, 32, 32}, 1.0, 0.9, 1, 10.0});
    auto [t, rec] = rtsu::preprocess(pair.scan, 32);
    auto coarse = rtsu::preprocess_labels(pair.labels, rec);
    REQUIRE(coarse.size() == std::size_t(rtsu::numel(t.shape())));
    REQUIRE(coarse == pair.labels.labels);  // identity resample
    auto restored = rtsu::postprocess(coarse, rec);
    REQUIRE(restored.labels == pair.labels.labels);
}

TEST_CASE("phantom generation") {
    rtsu::PhantomParams params;
    params.dims = {48, 48, 48};
    params.noise_sigma = 12.0;

    SECTION("same seed gives a bit-identical pair, different seed differs") {
        auto a = rtsu::phantom(7, params);
        auto b = rtsu::phantom(7, params);
        auto c = rtsu::phantom(8, params);
        REQUIRE(a.scan.data == b.scan.data);
        REQUIRE(a.labels.labels == b.labels.labels);
        REQUIRE(a.scan.data != c.scan.data);
    }
    SECTION("all five lobe labels are present") {
        auto p = rtsu::phantom(3, params);
        std::array<std::int64_t, 6> counts{};
        for (auto l : p.labels.labels) ++counts[l];
        for (int l = 1; l <= 5; ++l) REQUIRE(counts[std::size_t(l)] > 0);
        REQUIRE(counts[0] > 0);
    }
    SECTION("voxel label fractions sit within 30% of the analytic targets") {
        auto p = rtsu::phantom(5, params);
        std::array<std::int64_t, 6> counts{};
        for (auto l : p.labels.labels) ++counts[l];
        // quadrature of the implicit partition at 2x subsampling per axis
        std::array<std::int64_t, 6> fine{};
        for (std::int64_t z = 0; z < 2 * params.dims[0]; ++z)
            for (std::int64_t y = 0; y < 2 * params.dims[1]; ++y)
                for (std::int64_t x = 0; x < 2 * params.dims[2]; ++x)
                    ++fine[std::size_t(p.model.label_at(0.5 * z + 0.25, 0.5 * y + 0.25,
                                                        0.5 * x + 0.25))];
        for (int l = 1; l <= 5; ++l) {
            double vox = double(counts[std::size_t(l)]);
            double target = double(fine[std::size_t(l)]) / 8.0;
            REQUIRE(vox > 0.7 * target);
            REQUIRE(vox < 1.3 * target);
        }
    }
    SECTION("each lobe is one 6-connected component") {
        auto p = rtsu::phantom(9, params);
        const Dims3& d = params.dims;
        auto idx = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
            return (z * d[1] + y) * d[2] + x;
        };
        for (int lobe = 1; lobe <= 5; ++lobe) {
            std::vector<std::uint8_t> seen(p.labels.labels.size(), 0);
            std::int64_t total = 0, start = -1;
            for (std::int64_t i = 0; i < std::int64_t(p.labels.labels.size()); ++i)
                if (p.labels.labels[std::size_t(i)] == lobe) {
                    ++total;
                    start = i;
                }
            REQUIRE(total > 0);
            std::queue<std::int64_t> q;
            q.push(start);
            seen[std::size_t(start)] = 1;
            std::int64_t reached = 0;
            while (!q.empty()) {
                auto i = q.front();
                q.pop();
                ++reached;
                std::int64_t z = i / (d[1] * d[2]), y = (i / d[2]) % d[1], x = i % d[2];
                const std::int64_t off[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                                {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
                for (auto& o : off) {
                    std::int64_t zz = z + o[0], yy = y + o[1], xx = x + o[2];
                    if (zz < 0 || zz >= d[0] || yy < 0 || yy >= d[1] || xx < 0 || xx >= d[2])
                        continue;
                    auto j = idx(zz, yy, xx);
                    if (!seen[std::size_t(j)] && p.labels.labels[std::size_t(j)] == lobe) {
                        seen[std::size_t(j)] = 1;
                        q.push(j);
                    }
                }
            }
            REQUIRE(reached == total);
        }
    }
    SECTION("degenerate parameters rejected") {
        rtsu::PhantomParams bad = params;
        bad.fissure_completeness = 1.5;
        REQUIRE_THROWS(rtsu::phantom(1, bad));
        bad = params;
        bad.dims = {4, 4, 4};
        REQUIRE_THROWS(rtsu::phantom(1, bad));
    }
}
