#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "rtsu/core.hpp"
#include "rtsu/volume.hpp"

namespace rtsu {

// Synthetic lobe phantom: two ellipsoidal lungs inside a soft-tissue body,
// the left lung split into two lobes and the right into three by smooth
// randomized surfaces, with thin fissure sheets, tubular vessels and optional
// lesions. A stand-in corpus generator, not an anatomy claim.
struct PhantomParams {
    Dims3 dims{128, 128, 128};  // (z, y, x)
    double spacing_mm = 1.0;
    double fissure_completeness = 0.9;  // fraction of fissure surface rendered
    int lesion_count = 2;
    double noise_sigma = 15.0;  // HU
};

struct PhantomModel {
    struct Ellipsoid {
        std::array<double, 3> center;  // (z, y, x) in voxel units
        std::array<double, 3> semi;
        bool contains(double z, double y, double x) const {
            double a = (z - center[0]) / semi[0];
            double b = (y - center[1]) / semi[1];
            double c = (x - center[2]) / semi[2];
            return a * a + b * b + c * c <= 1.0;
        }
    };
    struct Ripple {  // smooth low-frequency surface offset
        double a1, f1, p1, a2, f2, p2;
        double at(double u, double v) const {
            return a1 * std::sin(6.2831853071795864769 * (f1 * u + p1)) +
                   a2 * std::sin(6.2831853071795864769 * (f2 * v + p2));
        }
    };
    struct Tube {
        std::array<double, 3> a, b;
        double radius;
    };
    struct Blob {
        std::array<double, 3> center;
        double radius;
    };

    Dims3 dims;
    Ellipsoid body, left, right;
    // left oblique and right major fissures: z = z0 + slope*(y-cy) + ripple(y,x)
    double left_z0, left_slope;
    Ripple left_rip;
    double right_z0, right_slope;
    Ripple right_rip;
    // right minor fissure: y = y0 + ripple(z,x), anterior side is the middle lobe
    double minor_y0;
    Ripple minor_rip;
    double fissure_half_width = 0.9;  // voxels
    double completeness;
    Ripple completeness_field;
    std::vector<Tube> vessels;
    std::vector<Blob> lesions;

    double left_surface(double y, double x) const {
        return left_z0 + left_slope * (y - left.center[1]) + left_rip.at(y / dims[1], x / dims[2]);
    }
    double right_surface(double y, double x) const {
        return right_z0 + right_slope * (y - right.center[1]) +
               right_rip.at(y / dims[1], x / dims[2]);
    }
    double minor_surface(double z, double x) const {
        return minor_y0 + minor_rip.at(z / dims[0], x / dims[2]);
    }

    // lobe label at a continuous position (voxel units)
    int label_at(double z, double y, double x) const {
        if (left.contains(z, y, x)) return z > left_surface(y, x) ? 1 : 2;
        if (right.contains(z, y, x)) {
            if (z <= right_surface(y, x)) return 4;
            return y < minor_surface(z, x) ? 5 : 3;
        }
        return 0;
    }

    bool fissure_rendered(double z, double y, double x) const {
        double s = 0.5 + 0.5 * std::sin(6.2831853071795864769 *
                                        (completeness_field.f1 * x / dims[2] +
                                         completeness_field.p1)) *
                             std::sin(6.2831853071795864769 *
                                      (completeness_field.f2 * y / dims[1] +
                                       completeness_field.p2));
        (void)z;
        return s <= completeness;
    }

    // noiseless intensity in HU
    double hu_at(double z, double y, double x) const {
        if (!body.contains(z, y, x)) return -1000.0;
        int lobe = label_at(z, y, x);
        if (lobe == 0) return 40.0;
        double hu = -850.0;
        bool near_fissure = false;
        if (lobe <= 2) {
            near_fissure = std::abs(z - left_surface(y, x)) <= fissure_half_width;
        } else {
            near_fissure = std::abs(z - right_surface(y, x)) <= fissure_half_width ||
                           (z > right_surface(y, x) &&
                            std::abs(y - minor_surface(z, x)) <= fissure_half_width);
        }
        if (near_fissure && fissure_rendered(z, y, x)) hu = std::max(hu, -700.0);
        for (const auto& t : vessels) {
            double az = t.b[0] - t.a[0], ay = t.b[1] - t.a[1], ax = t.b[2] - t.a[2];
            double pz = z - t.a[0], py = y - t.a[1], px = x - t.a[2];
            double len2 = az * az + ay * ay + ax * ax;
            double u = len2 > 0 ? (pz * az + py * ay + px * ax) / len2 : 0.0;
            u = std::min(1.0, std::max(0.0, u));
            double dz = pz - u * az, dy = py - u * ay, dx = px - u * ax;
            if (dz * dz + dy * dy + dx * dx <= t.radius * t.radius) hu = std::max(hu, -150.0);
        }
        for (const auto& l : lesions) {
            double dz = z - l.center[0], dy = y - l.center[1], dx = x - l.center[2];
            if (dz * dz + dy * dy + dx * dx <= l.radius * l.radius) hu = std::max(hu, 0.0);
        }
        return hu;
    }
};

struct PhantomPair {
    Volume scan;
    LabelVolume labels;
    PhantomModel model;
};

inline PhantomPair phantom(std::uint64_t seed, const PhantomParams& params = {}) {
    const Dims3& d = params.dims;
    require(d[0] >= 16 && d[1] >= 16 && d[2] >= 16,
            str("phantom: dims ", d[0], "x", d[1], "x", d[2], " too small"));
    require(params.fissure_completeness >= 0 && params.fissure_completeness <= 1,
            str("phantom: fissure completeness ", params.fissure_completeness, " outside [0,1]"));
    require(params.lesion_count >= 0, "phantom: negative lesion count");
    require(params.noise_sigma >= 0, "phantom: negative noise sigma");
    require(params.spacing_mm > 0, "phantom: non-positive spacing");

    Rng rng(seed);
    auto jitter = [&rng](double v, double rel) { return v * (1.0 + rng.uniform(-rel, rel)); };

    PhantomModel m;
    m.dims = d;
    double Z = double(d[0]), Y = double(d[1]), X = double(d[2]);
    m.body = {{0.50 * Z, 0.52 * Y, 0.50 * X}, {0.47 * Z, 0.42 * Y, 0.47 * X}};
    m.left = {{jitter(0.51 * Z, 0.04), jitter(0.50 * Y, 0.04), jitter(0.29 * X, 0.05)},
              {jitter(0.34 * Z, 0.06), jitter(0.27 * Y, 0.06), jitter(0.155 * X, 0.06)}};
    m.right = {{jitter(0.50 * Z, 0.04), jitter(0.50 * Y, 0.04), jitter(0.71 * X, 0.05)},
               {jitter(0.36 * Z, 0.06), jitter(0.29 * Y, 0.06), jitter(0.165 * X, 0.06)}};

    auto ripple = [&rng](double amp) {
        return PhantomModel::Ripple{rng.uniform(0.5, 1.0) * amp, rng.uniform(0.6, 1.4),
                                    rng.uniform(0, 1),           rng.uniform(0.5, 1.0) * amp,
                                    rng.uniform(1.2, 2.2),       rng.uniform(0, 1)};
    };
    m.left_z0 = m.left.center[0] + jitter(0.05 * Z, 0.5);
    m.left_slope = rng.uniform(0.25, 0.45);
    m.left_rip = ripple(0.03 * Z);
    m.right_z0 = m.right.center[0] - jitter(0.04 * Z, 0.5);
    m.right_slope = rng.uniform(0.25, 0.45);
    m.right_rip = ripple(0.03 * Z);
    m.minor_y0 = m.right.center[1] - jitter(0.10 * Y, 0.3);
    m.minor_rip = ripple(0.03 * Y);
    m.completeness = params.fissure_completeness;
    m.completeness_field = ripple(1.0);
    m.completeness_field.f1 = rng.uniform(1.5, 3.0);
    m.completeness_field.f2 = rng.uniform(1.5, 3.0);

    for (const auto* lung : {&m.left, &m.right}) {
        int tubes = 3 + int(rng.index(3));
        for (int t = 0; t < tubes; ++t) {
            std::array<double, 3> a = lung->center;
            std::array<double, 3> dir{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
            double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-9;
            std::array<double, 3> b{};
            for (int k = 0; k < 3; ++k)
                b[std::size_t(k)] = a[std::size_t(k)] + dir[std::size_t(k)] / norm * 0.8 *
                                                            lung->semi[std::size_t(k)];
            m.vessels.push_back({a, b, rng.uniform(1.0, 2.2) * (X / 128.0)});
        }
    }
    for (int l = 0; l < params.lesion_count; ++l) {
        const auto& lung = (l % 2 == 0) ? m.right : m.left;
        std::array<double, 3> c{};
        for (int k = 0; k < 3; ++k)
            c[std::size_t(k)] = lung.center[std::size_t(k)] +
                                rng.uniform(-0.5, 0.5) * lung.semi[std::size_t(k)];
        m.lesions.push_back({c, rng.uniform(0.03, 0.07) * X});
    }

    PhantomPair out;
    out.model = m;
    out.scan.dims_xyz = {d[2], d[1], d[0]};
    out.scan.spacing_xyz = {params.spacing_mm, params.spacing_mm, params.spacing_mm};
    out.scan.data.resize(std::size_t(d[0] * d[1] * d[2]));
    out.labels.dims_xyz = out.scan.dims_xyz;
    out.labels.spacing_xyz = out.scan.spacing_xyz;
    out.labels.labels.resize(out.scan.data.size());
    std::size_t i = 0;
    for (std::int64_t z = 0; z < d[0]; ++z)
        for (std::int64_t y = 0; y < d[1]; ++y)
            for (std::int64_t x = 0; x < d[2]; ++x, ++i) {
                double cz = z + 0.5, cy = y + 0.5, cx = x + 0.5;
                out.labels.labels[i] = std::uint8_t(m.label_at(cz, cy, cx));
                out.scan.data[i] = m.hu_at(cz, cy, cx) + params.noise_sigma * rng.normal();
            }
    return out;
}

}  // namespace rtsu
