#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "graphseg/common.hpp"

namespace gseg::nifti {

// ---------------------------------------------------------------------------
// Byte-level file helpers. Gzip streams are written with a fixed header
// (mtime 0, OS byte 255) so identical content produces identical bytes.
// ---------------------------------------------------------------------------

inline std::vector<unsigned char> read_file_raw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

inline bool is_gzip(const std::vector<unsigned char>& bytes) {
    return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

inline std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in,
                                         const std::string& what) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 32) != Z_OK)
        throw io_error("inflateInit failed for " + what);
    std::vector<unsigned char> out;
    out.reserve(in.size() * 4);
    std::array<unsigned char, 1 << 16> buf;
    zs.next_in = const_cast<unsigned char*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    int rc = Z_OK;
    do {
        zs.next_out = buf.data();
        zs.avail_out = static_cast<uInt>(buf.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw format_error("corrupt gzip stream in " + what);
        }
        out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    } while (rc != Z_STREAM_END && (zs.avail_in > 0 || zs.avail_out == 0));
    inflateEnd(&zs);
    if (rc != Z_STREAM_END)
        throw format_error("truncated gzip stream in " + what);
    return out;
}

inline std::vector<unsigned char> gzip_bytes(const unsigned char* data, std::size_t n) {
    z_stream zs{};
    if (deflateInit2(&zs, 6, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        throw io_error("deflateInit failed");
    gz_header gzh{};
    gzh.time = 0;
    gzh.os = 255;
    deflateSetHeader(&zs, &gzh);
    std::vector<unsigned char> out(deflateBound(&zs, static_cast<uLong>(n)));
    zs.next_in = const_cast<unsigned char*>(data);
    zs.avail_in = static_cast<uInt>(n);
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = deflate(&zs, Z_FINISH);
    if (rc != Z_STREAM_END) {
        deflateEnd(&zs);
        throw io_error("deflate failed");
    }
    out.resize(zs.total_out);
    deflateEnd(&zs);
    return out;
}

inline void write_file_raw(const std::string& path, const unsigned char* data,
                           std::size_t n, bool compress) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write file: " + path);
    if (compress) {
        auto gz = gzip_bytes(data, n);
        out.write(reinterpret_cast<const char*>(gz.data()), std::streamsize(gz.size()));
    } else {
        out.write(reinterpret_cast<const char*>(data), std::streamsize(n));
    }
    if (!out) throw io_error("short write: " + path);
}

inline void write_file_raw(const std::string& path, const std::vector<unsigned char>& data,
                           bool compress = false) {
    write_file_raw(path, data.data(), data.size(), compress);
}

// ---------------------------------------------------------------------------
// NIfTI-1 single-file format, little-endian. Accepted on read: uint8 (2),
// int16 (4), float32 (16); everything is converted to float internally.
// ---------------------------------------------------------------------------

#pragma pack(push, 1)
struct Nifti1Header {
    std::int32_t sizeof_hdr;    // must be 348
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code;
    std::int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

struct Image {
    Shape3 shape;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<float> data;                   // x fastest, matching file order
    std::vector<unsigned char> header_bytes;   // the raw 348-byte header as read
};

inline Image read(const std::string& path) {
    auto bytes = read_file_raw(path);
    if (is_gzip(bytes)) bytes = gunzip(bytes, path);
    if (bytes.size() < sizeof(Nifti1Header) + 4)
        throw format_error("file too small for a NIfTI-1 header: " + path);

    Nifti1Header hdr;
    std::memcpy(&hdr, bytes.data(), sizeof(hdr));
    if (hdr.sizeof_hdr != 348) {
        std::int32_t swapped;
        auto* s = reinterpret_cast<unsigned char*>(&swapped);
        s[0] = reinterpret_cast<unsigned char*>(&hdr.sizeof_hdr)[3];
        s[1] = reinterpret_cast<unsigned char*>(&hdr.sizeof_hdr)[2];
        s[2] = reinterpret_cast<unsigned char*>(&hdr.sizeof_hdr)[1];
        s[3] = reinterpret_cast<unsigned char*>(&hdr.sizeof_hdr)[0];
        if (swapped == 348)
            throw format_error("big-endian NIfTI is not supported: " + path);
        throw format_error("bad NIfTI sizeof_hdr in " + path);
    }
    if (std::memcmp(hdr.magic, "n+1", 4) != 0) {
        if (std::memcmp(hdr.magic, "ni1", 4) == 0)
            throw format_error("two-file NIfTI (.hdr/.img) is not supported: " + path);
        throw format_error("bad NIfTI magic bytes in " + path);
    }

    const int ndim = hdr.dim[0];
    if (ndim < 3 || ndim > 7)
        throw format_error("expected a 3D NIfTI volume: " + path);
    for (int d = 4; d <= ndim; ++d)
        if (hdr.dim[d] > 1)
            throw format_error("expected a single 3D volume, got extra dimensions: " + path);

    Image img;
    img.shape = {hdr.dim[1], hdr.dim[2], hdr.dim[3]};
    if (img.shape.x < 1 || img.shape.y < 1 || img.shape.z < 1)
        throw format_error("non-positive NIfTI dimensions in " + path);
    for (int a = 0; a < 3; ++a) {
        const float pd = hdr.pixdim[a + 1];
        img.spacing[a] = (pd > 0.0f) ? double(pd) : 1.0;
    }

    const std::size_t n = img.shape.count();
    const std::size_t offset = std::size_t(hdr.vox_offset);
    std::size_t elem_size;
    switch (hdr.datatype) {
        case kDtUint8: elem_size = 1; break;
        case kDtInt16: elem_size = 2; break;
        case kDtFloat32: elem_size = 4; break;
        default:
            throw format_error("unsupported NIfTI datatype " +
                               std::to_string(hdr.datatype) + " in " + path);
    }
    if (offset < sizeof(Nifti1Header) || bytes.size() < offset + n * elem_size)
        throw format_error("truncated NIfTI voxel data in " + path);

    img.data.resize(n);
    const unsigned char* vox = bytes.data() + offset;
    switch (hdr.datatype) {
        case kDtUint8:
            for (std::size_t i = 0; i < n; ++i) img.data[i] = float(vox[i]);
            break;
        case kDtInt16: {
            for (std::size_t i = 0; i < n; ++i) {
                std::int16_t v;
                std::memcpy(&v, vox + 2 * i, 2);
                img.data[i] = float(v);
            }
            break;
        }
        case kDtFloat32:
            std::memcpy(img.data.data(), vox, n * 4);
            break;
    }

    const float slope = hdr.scl_slope;
    const float inter = hdr.scl_inter;
    if ((slope != 0.0f && slope != 1.0f) || inter != 0.0f) {
        const float s = (slope == 0.0f) ? 1.0f : slope;
        for (auto& v : img.data) v = v * s + inter;
    }

    img.header_bytes.assign(bytes.begin(), bytes.begin() + sizeof(Nifti1Header));
    return img;
}

inline Nifti1Header make_header(const Shape3& shape, const std::array<double, 3>& spacing,
                                std::int16_t datatype) {
    Nifti1Header hdr{};
    hdr.sizeof_hdr = 348;
    hdr.regular = 'r';
    hdr.dim[0] = 3;
    hdr.dim[1] = std::int16_t(shape.x);
    hdr.dim[2] = std::int16_t(shape.y);
    hdr.dim[3] = std::int16_t(shape.z);
    for (int d = 4; d < 8; ++d) hdr.dim[d] = 1;
    hdr.datatype = datatype;
    hdr.bitpix = (datatype == kDtUint8) ? 8 : (datatype == kDtInt16 ? 16 : 32);
    hdr.pixdim[0] = 1.0f;
    hdr.pixdim[1] = float(spacing[0]);
    hdr.pixdim[2] = float(spacing[1]);
    hdr.pixdim[3] = float(spacing[2]);
    hdr.vox_offset = 352.0f;
    hdr.scl_slope = 1.0f;
    hdr.scl_inter = 0.0f;
    hdr.xyzt_units = 2;  // millimetres
    hdr.sform_code = 1;
    hdr.srow_x[0] = float(spacing[0]);
    hdr.srow_y[1] = float(spacing[1]);
    hdr.srow_z[2] = float(spacing[2]);
    std::memcpy(hdr.magic, "n+1", 4);
    return hdr;
}

// Writes a volume. When reference_header is non-empty its 348 bytes are used
// as the base and only the geometry/datatype fields are overwritten.
template <typename T>
void write(const std::string& path, const Shape3& shape,
           const std::array<double, 3>& spacing, const std::vector<T>& data,
           std::int16_t datatype,
           const std::vector<unsigned char>& reference_header = {}) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, std::uint8_t>);
    if (data.size() != shape.count())
        throw shape_error("voxel count does not match shape in NIfTI write");
    if ((std::is_same_v<T, float> && datatype != kDtFloat32) ||
        (std::is_same_v<T, std::uint8_t> && datatype != kDtUint8))
        throw usage_error("NIfTI write datatype does not match buffer type");

    Nifti1Header hdr;
    if (reference_header.size() == sizeof(Nifti1Header)) {
        std::memcpy(&hdr, reference_header.data(), sizeof(hdr));
        hdr.dim[0] = 3;
        hdr.dim[1] = std::int16_t(shape.x);
        hdr.dim[2] = std::int16_t(shape.y);
        hdr.dim[3] = std::int16_t(shape.z);
        for (int d = 4; d < 8; ++d) hdr.dim[d] = 1;
        hdr.datatype = datatype;
        hdr.bitpix = (datatype == kDtUint8) ? 8 : (datatype == kDtInt16 ? 16 : 32);
        hdr.vox_offset = 352.0f;
        hdr.scl_slope = 1.0f;
        hdr.scl_inter = 0.0f;
    } else {
        hdr = make_header(shape, spacing, datatype);
    }

    std::vector<unsigned char> out(352 + data.size() * sizeof(T), 0);
    std::memcpy(out.data(), &hdr, sizeof(hdr));
    // 4 zero bytes: no header extensions
    std::memcpy(out.data() + 352, data.data(), data.size() * sizeof(T));

    const bool compress = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
    write_file_raw(path, out.data(), out.size(), compress);
}

}  // namespace gseg::nifti
