#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "rtsu/core.hpp"
#include "rtsu/geometry.hpp"
#include "rtsu/metrics.hpp"

namespace rtsu {

// Scalar volume in MHD file order: x fastest, dims and spacing as written in
// the header (x, y, z). Tensor-facing code uses dhw() = (z, y, x).
struct Volume {
    std::array<std::int64_t, 3> dims_xyz{};
    std::array<double, 3> spacing_xyz{1, 1, 1};
    std::vector<double> data;

    Dims3 dhw() const { return {dims_xyz[2], dims_xyz[1], dims_xyz[0]}; }
    Spacing spacing_dhw() const { return {spacing_xyz[2], spacing_xyz[1], spacing_xyz[0]}; }
    std::int64_t voxels() const { return dims_xyz[0] * dims_xyz[1] * dims_xyz[2]; }
};

struct LabelVolume {
    std::array<std::int64_t, 3> dims_xyz{};
    std::array<double, 3> spacing_xyz{1, 1, 1};
    std::vector<std::uint8_t> labels;  // {0..5}

    Dims3 dhw() const { return {dims_xyz[2], dims_xyz[1], dims_xyz[0]}; }
    Spacing spacing_dhw() const { return {spacing_xyz[2], spacing_xyz[1], spacing_xyz[0]}; }
    std::int64_t voxels() const { return dims_xyz[0] * dims_xyz[1] * dims_xyz[2]; }
};

enum class MhdType { Short, Uchar, Double };

namespace detail {

inline const char* mhd_type_name(MhdType t) {
    switch (t) {
        case MhdType::Short: return "MET_SHORT";
        case MhdType::Uchar: return "MET_UCHAR";
        default: return "MET_DOUBLE";
    }
}

inline std::size_t mhd_elem_size(MhdType t) {
    switch (t) {
        case MhdType::Short: return 2;
        case MhdType::Uchar: return 1;
        default: return 8;
    }
}

struct MhdHeader {
    std::array<std::int64_t, 3> dims{};
    std::array<double, 3> spacing{};
    MhdType type = MhdType::Double;
    std::string data_file;
};

inline MhdHeader parse_mhd_header(const std::string& path) {
    std::ifstream is(path);
    require(bool(is), str("mhd: cannot open ", path));
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            auto b = s.find_first_not_of(" \t\r\n");
            auto e = s.find_last_not_of(" \t\r\n");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto need = [&](const char* key) {
        auto it = kv.find(key);
        require(it != kv.end(), str("mhd: ", path, " is missing key ", key));
        return it->second;
    };
    require(need("NDims") == "3", str("mhd: ", path, ": NDims must be 3, got ", need("NDims")));
    MhdHeader h;
    {
        std::istringstream ss(need("DimSize"));
        for (auto& d : h.dims) {
            ss >> d;
            require(bool(ss) && d >= 1, str("mhd: ", path, ": malformed DimSize"));
        }
    }
    {
        std::istringstream ss(need("ElementSpacing"));
        for (auto& s : h.spacing) {
            ss >> s;
            require(bool(ss) && s > 0, str("mhd: ", path, ": malformed ElementSpacing"));
        }
    }
    std::string t = need("ElementType");
    if (t == "MET_SHORT")
        h.type = MhdType::Short;
    else if (t == "MET_UCHAR")
        h.type = MhdType::Uchar;
    else if (t == "MET_DOUBLE")
        h.type = MhdType::Double;
    else
        fail(str("mhd: ", path, ": unsupported ElementType ", t));
    h.data_file = need("ElementDataFile");
    return h;
}

static_assert(std::endian::native == std::endian::little, "mhd io assumes a little-endian host");

inline std::vector<double> read_raw(const std::string& header_path, const MhdHeader& h) {
    namespace fs = std::filesystem;
    fs::path raw = fs::path(header_path).parent_path() / h.data_file;
    std::ifstream is(raw, std::ios::binary | std::ios::ate);
    require(bool(is), str("mhd: cannot open data file ", raw.string()));
    std::int64_t n = h.dims[0] * h.dims[1] * h.dims[2];
    auto bytes = std::int64_t(is.tellg());
    require(bytes == n * std::int64_t(mhd_elem_size(h.type)),
            str("mhd: ", raw.string(), " holds ", bytes, " bytes, DimSize needs ",
                n * std::int64_t(mhd_elem_size(h.type))));
    is.seekg(0);
    std::vector<double> out(static_cast<std::size_t>(n));
    if (h.type == MhdType::Double) {
        is.read(reinterpret_cast<char*>(out.data()), std::streamsize(n * 8));
    } else if (h.type == MhdType::Short) {
        std::vector<std::int16_t> buf(static_cast<std::size_t>(n));
        is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(n * 2));
        for (std::int64_t i = 0; i < n; ++i) out[std::size_t(i)] = buf[std::size_t(i)];
    } else {
        std::vector<std::uint8_t> buf(static_cast<std::size_t>(n));
        is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(n));
        for (std::int64_t i = 0; i < n; ++i) out[std::size_t(i)] = buf[std::size_t(i)];
    }
    require(bool(is), str("mhd: short read from ", raw.string()));
    return out;
}

inline void write_mhd(const std::string& path, const std::array<std::int64_t, 3>& dims,
                      const std::array<double, 3>& spacing, MhdType type,
                      const void* body, std::size_t bytes) {
    namespace fs = std::filesystem;
    fs::path hp(path);
    require(hp.extension() == ".mhd", str("mhd: expected a .mhd path, got ", path));
    fs::path raw = hp;
    raw.replace_extension(".raw");
    {
        std::ofstream os(hp);
        require(bool(os), str("mhd: cannot open ", path, " for writing"));
        os << "NDims = 3\n";
        os << "DimSize = " << dims[0] << " " << dims[1] << " " << dims[2] << "\n";
        os << "ElementSpacing = " << spacing[0] << " " << spacing[1] << " " << spacing[2] << "\n";
        os << "ElementType = " << mhd_type_name(type) << "\n";
        os << "ElementDataFile = " << raw.filename().string() << "\n";
        require(bool(os), str("mhd: write to ", path, " failed"));
    }
    std::ofstream os(raw, std::ios::binary);
    require(bool(os), str("mhd: cannot open ", raw.string(), " for writing"));
    os.write(static_cast<const char*>(body), std::streamsize(bytes));
    require(bool(os), str("mhd: write to ", raw.string(), " failed"));
}

}  // namespace detail

inline Volume load_volume(const std::string& path) {
    auto h = detail::parse_mhd_header(path);
    Volume v;
    v.dims_xyz = h.dims;
    v.spacing_xyz = h.spacing;
    v.data = detail::read_raw(path, h);
    return v;
}

inline void save_volume(const std::string& path, const Volume& v,
                        MhdType type = MhdType::Double) {
    require(std::int64_t(v.data.size()) == v.voxels(),
            str("mhd: volume holds ", v.data.size(), " values for dims ",
                v.dims_xyz[0], "x", v.dims_xyz[1], "x", v.dims_xyz[2]));
    if (type == MhdType::Double) {
        detail::write_mhd(path, v.dims_xyz, v.spacing_xyz, type, v.data.data(),
                          v.data.size() * 8);
    } else if (type == MhdType::Short) {
        std::vector<std::int16_t> buf(v.data.size());
        for (std::size_t i = 0; i < v.data.size(); ++i) {
            double x = std::llround(v.data[i]);
            buf[i] = std::int16_t(std::min(32767.0, std::max(-32768.0, x)));
        }
        detail::write_mhd(path, v.dims_xyz, v.spacing_xyz, type, buf.data(), buf.size() * 2);
    } else {
        std::vector<std::uint8_t> buf(v.data.size());
        for (std::size_t i = 0; i < v.data.size(); ++i) {
            double x = std::llround(v.data[i]);
            buf[i] = std::uint8_t(std::min(255.0, std::max(0.0, x)));
        }
        detail::write_mhd(path, v.dims_xyz, v.spacing_xyz, type, buf.data(), buf.size());
    }
}

inline LabelVolume load_labels(const std::string& path) {
    auto v = load_volume(path);
    LabelVolume l;
    l.dims_xyz = v.dims_xyz;
    l.spacing_xyz = v.spacing_xyz;
    l.labels.resize(v.data.size());
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        double x = v.data[i];
        require(x >= 0 && x <= 5 && x == std::floor(x),
                str("labels: ", path, " holds non-label value ", x));
        l.labels[i] = std::uint8_t(x);
    }
    return l;
}

inline void save_labels(const std::string& path, const LabelVolume& l) {
    require(std::int64_t(l.labels.size()) == l.voxels(),
            str("mhd: label volume holds ", l.labels.size(), " values for dims ",
                l.dims_xyz[0], "x", l.dims_xyz[1], "x", l.dims_xyz[2]));
    detail::write_mhd(path, l.dims_xyz, l.spacing_xyz, MhdType::Uchar, l.labels.data(),
                      l.labels.size());
}

}  // namespace rtsu
