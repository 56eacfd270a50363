#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "rtsu/attention.hpp"
#include "rtsu/conv.hpp"
#include "rtsu/geometry.hpp"
#include "rtsu/tensor.hpp"

namespace rtsu {

// Channel table of the relational U-Net (unscaled). Up-path input widths are
// stored explicitly so an inconsistent table can be rejected.
struct RUNetConfig {
    int stage = 1;
    Padding padding = Padding::Same;
    double width_scale = 1.0;
    std::int64_t in_channels = 1;
    std::array<std::array<std::int64_t, 2>, 3> down{};
    std::array<std::int64_t, 2> bridge{};
    std::array<std::int64_t, 3> up_in{};
    std::array<std::array<std::int64_t, 2>, 3> up{};
    std::int64_t lobe_classes = 6;
    std::int64_t embed_dim = 32;      // C' of the non-local module
    std::int64_t nonlocal_steps = 3;  // T

    static RUNetConfig stage1(double ws = 1.0) {
        RUNetConfig c;
        c.stage = 1;
        c.padding = Padding::Same;
        c.width_scale = ws;
        c.in_channels = 1;
        c.down = {{{16, 24}, {24, 48}, {64, 128}}};
        c.bridge = {128, 256};
        c.up_in = {384, 176, 72};
        c.up = {{{128, 128}, {48, 48}, {24, 24}}};
        return c;
    }

    static RUNetConfig stage2(double ws = 1.0) {
        RUNetConfig c;
        c.stage = 2;
        c.padding = Padding::Valid;
        c.width_scale = ws;
        c.in_channels = 8;
        c.down = {{{24, 48}, {48, 96}, {96, 192}}};
        c.bridge = {192, 384};
        c.up_in = {576, 288, 144};
        c.up = {{{192, 192}, {96, 96}, {48, 48}}};
        return c;
    }

    std::int64_t scaled(std::int64_t c) const {
        auto s = std::int64_t(std::llround(double(c) * width_scale));
        return s < 1 ? 1 : s;
    }

    void validate() const {
        require(width_scale > 0, "runet config: width_scale must be positive");
        require(stage == 1 || stage == 2, str("runet config: stage ", stage));
        const std::int64_t skip[3] = {down[2][1], down[1][1], down[0][1]};
        const std::int64_t carry[3] = {bridge[1], up[0][1], up[1][1]};
        for (int i = 0; i < 3; ++i)
            require(up_in[std::size_t(i)] == carry[i] + skip[i],
                    str("runet config: up", i + 1, " expects ", up_in[std::size_t(i)],
                        " input channels but receives ", carry[i], "+", skip[i]));
    }
};

template <class Real>
struct ConvBlock {
    Tensor<Real> w, b, gamma, beta;
    BatchNormState<Real> bn;
};

template <class Real>
struct DualHead {
    Tensor<Real> lobes;   // 6-channel softmax probabilities
    Tensor<Real> border;  // 1-channel sigmoid probability
};

// Where the feature grid sits relative to the scan the geometric coordinates
// are normalized against. clamp permits patches whose margin reaches into
// padding (boundary tiles).
struct MuSource {
    Dims3 source_shape{};
    Dims3 patch_offset{0, 0, 0};
    bool clamp = false;
};

template <class Real>
struct ForwardTrace {
    Tensor<Real> bridge_pre;
    Tensor<Real> bridge_post;
};

template <class Real>
class RUNet {
public:
    RUNetConfig cfg;
    std::array<std::array<ConvBlock<Real>, 2>, 3> down;
    std::array<ConvBlock<Real>, 2> bridge;
    std::array<std::array<ConvBlock<Real>, 2>, 3> up;
    Tensor<Real> head_lobes_w, head_lobes_b;
    Tensor<Real> head_border_w, head_border_b;
    NonLocalParams<Real> nl;

    static constexpr std::int64_t kBridgeStride = 8;

    static RUNet build(const RUNetConfig& config, std::uint64_t seed) {
        config.validate();
        RUNet net;
        net.cfg = config;
        Rng rng(seed);
        auto conv_block = [&](std::int64_t in, std::int64_t out, std::int64_t k) {
            ConvBlock<Real> blk;
            std::int64_t fan_in = in * k * k * k;
            std::vector<Real> w(std::size_t(out * fan_in));
            double std_dev = std::sqrt(2.0 / double(fan_in));
            for (auto& v : w) v = Real(rng.normal() * std_dev);
            blk.w = Tensor<Real>::from({out, in, k, k, k}, std::move(w), true);
            blk.b = Tensor<Real>::zeros({out}, true);
            blk.gamma = Tensor<Real>::filled({out}, Real(1), true);
            blk.beta = Tensor<Real>::zeros({out}, true);
            blk.bn = BatchNormState<Real>(out);
            return blk;
        };
        const auto& c = config;
        std::int64_t prev = c.in_channels;
        for (int l = 0; l < 3; ++l) {
            net.down[l][0] = conv_block(prev, c.scaled(c.down[l][0]), 3);
            net.down[l][1] = conv_block(c.scaled(c.down[l][0]), c.scaled(c.down[l][1]), 3);
            prev = c.scaled(c.down[l][1]);
        }
        net.bridge[0] = conv_block(prev, c.scaled(c.bridge[0]), 3);
        net.bridge[1] = conv_block(c.scaled(c.bridge[0]), c.scaled(c.bridge[1]), 3);

        std::int64_t nl_c = c.scaled(c.bridge[1]);
        std::int64_t nl_e = c.scaled(c.embed_dim);
        net.nl = NonLocalParams<Real>::init(nl_c, nl_e, rng, c.nonlocal_steps);

        prev = nl_c;
        const std::int64_t skip[3] = {c.down[2][1], c.down[1][1], c.down[0][1]};
        for (int l = 0; l < 3; ++l) {
            std::int64_t cat = prev + c.scaled(skip[l]);
            net.up[l][0] = conv_block(cat, c.scaled(c.up[l][0]), 3);
            net.up[l][1] = conv_block(c.scaled(c.up[l][0]), c.scaled(c.up[l][1]), 3);
            prev = c.scaled(c.up[l][1]);
        }
        auto head = [&](std::int64_t in, std::int64_t out) {
            std::vector<Real> w(std::size_t(out * in));
            double std_dev = std::sqrt(2.0 / double(in));
            for (auto& v : w) v = Real(rng.normal() * std_dev);
            return std::pair<Tensor<Real>, Tensor<Real>>(
                Tensor<Real>::from({out, in, 1, 1, 1}, std::move(w), true),
                Tensor<Real>::zeros({out}, true));
        };
        std::tie(net.head_lobes_w, net.head_lobes_b) = head(prev, c.lobe_classes);
        std::tie(net.head_border_w, net.head_border_b) = head(prev, 1);
        return net;
    }

    DualHead<Real> forward(const Tensor<Real>& x, const MuSource& mu_src, BatchNormMode bn_mode,
                           ForwardTrace<Real>* trace = nullptr) {
        const Shape& s = x.shape();
        require(s.size() == 5 && s[1] == cfg.in_channels,
                str("runet: expected 1x", cfg.in_channels, "xDxHxW input, got ", shape_str(s)));
        if (cfg.padding == Padding::Same)
            for (int a = 0; a < 3; ++a)
                require(s[std::size_t(2 + a)] % 8 == 0,
                        str("runet stage 1: spatial dim ", s[std::size_t(2 + a)],
                            " not divisible by 8"));
        auto block = [&](ConvBlock<Real>& blk, const Tensor<Real>& in) {
            auto y = conv3d(in, blk.w, blk.b, cfg.padding);
            y = batchnorm3d(y, blk.gamma, blk.beta, blk.bn, bn_mode);
            return relu(y);
        };
        Tensor<Real> a = x;
        std::array<Tensor<Real>, 3> skips;
        for (int l = 0; l < 3; ++l) {
            a = block(down[l][0], a);
            a = block(down[l][1], a);
            skips[std::size_t(l)] = a;
            a = maxpool3d(a);
        }
        a = block(bridge[0], a);
        a = block(bridge[1], a);
        if (trace) trace->bridge_pre = a;

        const Shape& bs = a.shape();
        Dims3 fdims{bs[2], bs[3], bs[4]};
        GeometricMap<Real> mu =
            mu_src.clamp ? geometric_map_clamped<Real>(fdims, kBridgeStride, mu_src.patch_offset,
                                                       mu_src.source_shape)
                         : geometric_map<Real>(fdims, kBridgeStride, mu_src.patch_offset,
                                               mu_src.source_shape);
        a = recurrent_nonlocal(a, mu, nl);
        if (trace) trace->bridge_post = a;

        for (int l = 0; l < 3; ++l) {
            a = resize_trilinear(a, a.dim(2) * 2, a.dim(3) * 2, a.dim(4) * 2);
            Tensor<Real> skip = skips[std::size_t(2 - l)];
            if (cfg.padding == Padding::Valid) {
                // center crop the skip tensor down to the carried dims
                Shape starts{0, 0, (skip.dim(2) - a.dim(2)) / 2, (skip.dim(3) - a.dim(3)) / 2,
                             (skip.dim(4) - a.dim(4)) / 2};
                Shape sizes{skip.dim(0), skip.dim(1), a.dim(2), a.dim(3), a.dim(4)};
                skip = crop(skip, starts, sizes);
            }
            a = concat_channels<Real>({a, skip});
            a = block(up[l][0], a);
            a = block(up[l][1], a);
        }
        DualHead<Real> out;
        out.lobes = softmax_channels(conv3d(a, head_lobes_w, head_lobes_b, Padding::Same));
        out.border = sigmoid(conv3d(a, head_border_w, head_border_b, Padding::Same));
        return out;
    }

    // name -> tensor map in a fixed order (checkpoint layout)
    std::vector<std::pair<std::string, Tensor<Real>*>> named_params() {
        std::vector<std::pair<std::string, Tensor<Real>*>> v;
        auto add_block = [&v](const std::string& prefix, ConvBlock<Real>& blk) {
            v.push_back({prefix + ".w", &blk.w});
            v.push_back({prefix + ".b", &blk.b});
            v.push_back({prefix + ".gamma", &blk.gamma});
            v.push_back({prefix + ".beta", &blk.beta});
        };
        for (int l = 0; l < 3; ++l)
            for (int k = 0; k < 2; ++k)
                add_block(str("down", l + 1, ".c", k + 1), down[l][k]);
        add_block("bridge.c1", bridge[0]);
        add_block("bridge.c2", bridge[1]);
        v.push_back({"nl.theta", &nl.w_theta});
        v.push_back({"nl.phi", &nl.w_phi});
        v.push_back({"nl.g", &nl.w_g});
        v.push_back({"nl.omega", &nl.w_omega});
        v.push_back({"nl.rho", &nl.w_rho});
        v.push_back({"nl.r", &nl.w_r});
        for (int l = 0; l < 3; ++l)
            for (int k = 0; k < 2; ++k)
                add_block(str("up", l + 1, ".c", k + 1), up[l][k]);
        v.push_back({"head_lobes.w", &head_lobes_w});
        v.push_back({"head_lobes.b", &head_lobes_b});
        v.push_back({"head_border.w", &head_border_w});
        v.push_back({"head_border.b", &head_border_b});
        return v;
    }

    std::vector<std::pair<std::string, std::vector<Real>*>> named_buffers() {
        std::vector<std::pair<std::string, std::vector<Real>*>> v;
        auto add_block = [&v](const std::string& prefix, ConvBlock<Real>& blk) {
            v.push_back({prefix + ".bn_mean", &blk.bn.running_mean});
            v.push_back({prefix + ".bn_var", &blk.bn.running_var});
        };
        for (int l = 0; l < 3; ++l)
            for (int k = 0; k < 2; ++k)
                add_block(str("down", l + 1, ".c", k + 1), down[l][k]);
        add_block("bridge.c1", bridge[0]);
        add_block("bridge.c2", bridge[1]);
        for (int l = 0; l < 3; ++l)
            for (int k = 0; k < 2; ++k)
                add_block(str("up", l + 1, ".c", k + 1), up[l][k]);
        return v;
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        for (auto& [name, t] : named_params()) n += t->size();
        return n;
    }
};

// Parameter count straight from the channel table (no allocation).
inline std::int64_t count_params(const RUNetConfig& c) {
    c.validate();
    std::int64_t total = 0;
    auto conv = [&](std::int64_t in, std::int64_t out, std::int64_t k, bool norm) {
        total += out * in * k * k * k + out;  // weights + bias
        if (norm) total += 2 * out;           // gamma + beta
    };
    std::int64_t prev = c.in_channels;
    for (int l = 0; l < 3; ++l) {
        conv(prev, c.scaled(c.down[l][0]), 3, true);
        conv(c.scaled(c.down[l][0]), c.scaled(c.down[l][1]), 3, true);
        prev = c.scaled(c.down[l][1]);
    }
    conv(prev, c.scaled(c.bridge[0]), 3, true);
    conv(c.scaled(c.bridge[0]), c.scaled(c.bridge[1]), 3, true);
    std::int64_t C = c.scaled(c.bridge[1]), E = c.scaled(c.embed_dim);
    total += 3 * C * E;  // theta, phi, g
    total += 2 * 3 * E;  // omega, rho
    total += C * E;      // r
    prev = C;
    const std::int64_t skip[3] = {c.down[2][1], c.down[1][1], c.down[0][1]};
    for (int l = 0; l < 3; ++l) {
        conv(prev + c.scaled(skip[l]), c.scaled(c.up[l][0]), 3, true);
        conv(c.scaled(c.up[l][0]), c.scaled(c.up[l][1]), 3, true);
        prev = c.scaled(c.up[l][1]);
    }
    conv(prev, c.lobe_classes, 1, false);
    conv(prev, 1, 1, false);
    return total;
}

struct MacCount {
    std::int64_t conv = 0;
    std::int64_t attention = 0;
    std::int64_t total() const { return conv + attention; }
};

// Multiply-accumulate count for a forward pass at the given input dims:
// convolutions at produced voxels plus non-local embeddings and the
// criss-cross aggregation.
inline MacCount count_macs(const RUNetConfig& c, Dims3 dims) {
    c.validate();
    MacCount m;
    bool valid = c.padding == Padding::Valid;
    auto after_conv = [&](Dims3 d) {
        if (valid)
            for (auto& v : d) v -= 2;
        return d;
    };
    auto vox = [](const Dims3& d) { return d[0] * d[1] * d[2]; };
    auto conv = [&](Dims3& d, std::int64_t in, std::int64_t out, std::int64_t k) {
        if (k == 3) d = after_conv(d);
        m.conv += vox(d) * in * out * k * k * k;
    };
    Dims3 d = dims;
    std::int64_t prev = c.in_channels;
    std::array<Dims3, 3> skip_dims;
    for (int l = 0; l < 3; ++l) {
        conv(d, prev, c.scaled(c.down[l][0]), 3);
        conv(d, c.scaled(c.down[l][0]), c.scaled(c.down[l][1]), 3);
        skip_dims[std::size_t(l)] = d;
        for (auto& v : d) v /= 2;
        prev = c.scaled(c.down[l][1]);
    }
    conv(d, prev, c.scaled(c.bridge[0]), 3);
    conv(d, c.scaled(c.bridge[0]), c.scaled(c.bridge[1]), 3);

    std::int64_t C = c.scaled(c.bridge[1]), E = c.scaled(c.embed_dim);
    std::int64_t P = vox(d), K = d[0] + d[1] + d[2] - 2, T = c.nonlocal_steps;
    m.attention += 2 * 3 * E * P;                    // geometric embeddings, once
    m.attention += T * (3 * C * E * P);              // theta/phi/g per step
    m.attention += T * (3 * P * K * E);              // logits (visual+geometric) + aggregation
    m.attention += T * (C * E * P);                  // reconstruction
    prev = C;
    const std::int64_t skip[3] = {c.down[2][1], c.down[1][1], c.down[0][1]};
    for (int l = 0; l < 3; ++l) {
        for (auto& v : d) v *= 2;
        conv(d, prev + c.scaled(skip[l]), c.scaled(c.up[l][0]), 3);
        conv(d, c.scaled(c.up[l][0]), c.scaled(c.up[l][1]), 3);
        prev = c.scaled(c.up[l][1]);
    }
    conv(d, prev, c.lobe_classes, 1);
    conv(d, prev, 1, 1);
    return m;
}

// Output spatial extent of the valid (stage 2) network for a cubic input.
inline std::int64_t valid_output_extent(std::int64_t in) {
    auto conv2 = [](std::int64_t v) { return v - 4; };
    std::int64_t v = in;
    for (int l = 0; l < 3; ++l) {
        v = conv2(v);
        require(v >= 2 && v % 2 == 0,
                str("valid chain: extent ", v, " cannot be pooled (input ", in, ")"));
        v /= 2;
    }
    v = conv2(v);
    require(v >= 1, str("valid chain: bridge extent ", v, " for input ", in));
    for (int l = 0; l < 3; ++l) {
        v = 2 * v - 4;
        require(v >= 1, str("valid chain: up", l + 1, " extent ", v, " for input ", in));
    }
    return v;
}

// ---------------------------------------------------------------------------
// effective receptive field probe
// ---------------------------------------------------------------------------

struct ErfMasks {
    std::vector<std::uint8_t> before;  // |d bridge_pre(at)/d input| > 0
    std::vector<std::uint8_t> after;   // same, behind the recurrent module
    Dims3 input_dims;
};

// Gradient support of one bridge feature (summed over channels) with respect
// to the input, before and after the non-local module. Uses eval-mode
// normalization so the support reflects the convolutional structure.
template <class Real>
ErfMasks erf_support(RUNet<Real>& net, const Tensor<Real>& input, const MuSource& mu_src,
                     const Dims3& at) {
    auto run = [&](bool post) {
        Tensor<Real> x = Tensor<Real>::from(input.shape(), input.values(), true);
        x.zero_grad();
        ForwardTrace<Real> trace;
        net.forward(x, mu_src, BatchNormMode::Eval, &trace);
        Tensor<Real> bridge = post ? trace.bridge_post : trace.bridge_pre;
        const Shape& bs = bridge.shape();
        for (int a = 0; a < 3; ++a)
            require(at[a] >= 0 && at[a] < bs[std::size_t(2 + a)],
                    str("erf_support: location ", at[a], " outside bridge axis ", a, " of ",
                        bs[std::size_t(2 + a)]));
        auto picked = crop(bridge, {0, 0, at[0], at[1], at[2]}, {1, bs[1], 1, 1, 1});
        sum_all(picked).backward();
        std::vector<std::uint8_t> mask(x.values().size());
        const auto& g = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) mask[i] = g[i] != Real(0) ? 1 : 0;
        return mask;
    };
    ErfMasks masks;
    masks.before = run(false);
    masks.after = run(true);
    masks.input_dims = {input.shape()[2], input.shape()[3], input.shape()[4]};
    return masks;
}

// ---------------------------------------------------------------------------
// checkpoint serialization
// ---------------------------------------------------------------------------

struct ParamRecord {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    require(bool(is), "checkpoint: truncated file");
    return v;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const std::vector<ParamRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), str("checkpoint: cannot open ", path, " for writing"));
    os.write("RTSU1", 5);
    for (const auto& r : records) {
        detail::write_pod<std::uint32_t>(os, std::uint32_t(r.name.size()));
        os.write(r.name.data(), std::streamsize(r.name.size()));
        detail::write_pod<std::uint32_t>(os, std::uint32_t(r.shape.size()));
        for (auto d : r.shape) detail::write_pod<std::uint64_t>(os, std::uint64_t(d));
        os.write(reinterpret_cast<const char*>(r.data.data()),
                 std::streamsize(r.data.size() * sizeof(double)));
    }
    require(bool(os), str("checkpoint: write to ", path, " failed"));
}

inline std::vector<ParamRecord> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), str("checkpoint: cannot open ", path));
    char magic[5];
    is.read(magic, 5);
    require(bool(is) && std::memcmp(magic, "RTSU1", 5) == 0,
            str("checkpoint: ", path, " has no RTSU1 magic"));
    std::vector<ParamRecord> out;
    while (true) {
        std::uint32_t name_len;
        is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (is.eof()) break;
        require(bool(is), "checkpoint: truncated record header");
        ParamRecord r;
        r.name.resize(name_len);
        is.read(r.name.data(), name_len);
        auto dims = detail::read_pod<std::uint32_t>(is);
        r.shape.resize(dims);
        std::int64_t n = 1;
        for (auto& d : r.shape) {
            d = std::int64_t(detail::read_pod<std::uint64_t>(is));
            n *= d;
        }
        r.data.resize(std::size_t(n));
        is.read(reinterpret_cast<char*>(r.data.data()), std::streamsize(n * sizeof(double)));
        require(bool(is), str("checkpoint: truncated data for record ", r.name));
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace rtsu
