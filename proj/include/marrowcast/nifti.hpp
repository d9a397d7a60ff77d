#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "marrowcast/error.hpp"
#include "marrowcast/volume.hpp"

namespace marrowcast {

static_assert(std::endian::native == std::endian::little,
              "NIfTI I/O assumes a little-endian host");

namespace nifti {

// NIfTI-1 header, 348 bytes. The layout is naturally aligned, so the struct
// can be read and written directly.
struct nifti_1_header {
    std::int32_t sizeof_hdr;    /*   0 */
    char data_type[10];         /*   4 */
    char db_name[18];           /*  14 */
    std::int32_t extents;       /*  32 */
    std::int16_t session_error; /*  36 */
    char regular;               /*  38 */
    char dim_info;              /*  39 */
    std::int16_t dim[8];        /*  40 */
    float intent_p1;            /*  56 */
    float intent_p2;            /*  60 */
    float intent_p3;            /*  64 */
    std::int16_t intent_code;   /*  68 */
    std::int16_t datatype;      /*  70 */
    std::int16_t bitpix;        /*  72 */
    std::int16_t slice_start;   /*  74 */
    float pixdim[8];            /*  76 */
    float vox_offset;           /* 108 */
    float scl_slope;            /* 112 */
    float scl_inter;            /* 116 */
    std::int16_t slice_end;     /* 120 */
    char slice_code;            /* 122 */
    char xyzt_units;            /* 123 */
    float cal_max;              /* 124 */
    float cal_min;              /* 128 */
    float slice_duration;       /* 132 */
    float toffset;              /* 136 */
    std::int32_t glmax;         /* 140 */
    std::int32_t glmin;         /* 144 */
    char descrip[80];           /* 148 */
    char aux_file[24];          /* 228 */
    std::int16_t qform_code;    /* 252 */
    std::int16_t sform_code;    /* 254 */
    float quatern_b;            /* 256 */
    float quatern_c;            /* 260 */
    float quatern_d;            /* 264 */
    float qoffset_x;            /* 268 */
    float qoffset_y;            /* 272 */
    float qoffset_z;            /* 276 */
    float srow_x[4];            /* 280 */
    float srow_y[4];            /* 296 */
    float srow_z[4];            /* 312 */
    char intent_name[16];       /* 328 */
    char magic[4];              /* 344 */
};

static_assert(sizeof(nifti_1_header) == 348, "nifti_1_header must pack to 348 bytes");
static_assert(offsetof(nifti_1_header, dim) == 40);
static_assert(offsetof(nifti_1_header, datatype) == 70);
static_assert(offsetof(nifti_1_header, pixdim) == 76);
static_assert(offsetof(nifti_1_header, vox_offset) == 108);
static_assert(offsetof(nifti_1_header, magic) == 344);

constexpr std::int16_t DT_INT16 = 4;
constexpr std::int16_t DT_FLOAT32 = 16;
constexpr float SINGLE_FILE_OFFSET = 352.0f;

} // namespace nifti

namespace detail {

inline voxel_grid load_nifti_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw io_error("cannot open " + path.string());
    }
    nifti::nifti_1_header hdr{};
    if (!in.read(reinterpret_cast<char*>(&hdr), sizeof(hdr))) {
        throw io_error("truncated header in " + path.string());
    }
    if (hdr.sizeof_hdr != 348) {
        throw format_error(path.string() + ": not a little-endian NIfTI-1 file (sizeof_hdr != 348)");
    }
    const bool magic_n1 = std::memcmp(hdr.magic, "n+1", 4) == 0;
    const bool magic_ni1 = std::memcmp(hdr.magic, "ni1", 4) == 0;
    if (!magic_n1 && !magic_ni1) {
        throw format_error(path.string() + ": bad magic");
    }
    if (magic_ni1) {
        throw unsupported_error(path.string() + ": detached .hdr/.img pairs are not supported");
    }
    if (hdr.dim[0] != 3) {
        throw unsupported_error(path.string() + ": only 3-dimensional images are supported (dim[0]=" +
                                std::to_string(hdr.dim[0]) + ")");
    }
    if (hdr.datatype != nifti::DT_INT16 && hdr.datatype != nifti::DT_FLOAT32) {
        throw unsupported_error(path.string() + ": unsupported datatype code " +
                                std::to_string(hdr.datatype));
    }
    voxel_grid g;
    g.nx = hdr.dim[1];
    g.ny = hdr.dim[2];
    g.nz = hdr.dim[3];
    if (g.nx < 1 || g.ny < 1 || g.nz < 1) {
        throw format_error(path.string() + ": non-positive image dimensions");
    }
    g.sx = hdr.pixdim[1] > 0.0f ? hdr.pixdim[1] : 1.0;
    g.sy = hdr.pixdim[2] > 0.0f ? hdr.pixdim[2] : 1.0;
    g.sz = hdr.pixdim[3] > 0.0f ? hdr.pixdim[3] : 1.0;

    const auto offset = static_cast<std::streamoff>(hdr.vox_offset);
    if (offset < static_cast<std::streamoff>(sizeof(hdr))) {
        throw format_error(path.string() + ": vox_offset overlaps the header");
    }
    in.seekg(offset, std::ios::beg);

    const std::size_t count = g.size();
    g.data.resize(count);
    if (hdr.datatype == nifti::DT_FLOAT32) {
        if (!in.read(reinterpret_cast<char*>(g.data.data()),
                     static_cast<std::streamsize>(count * sizeof(float)))) {
            throw io_error(path.string() + ": truncated data section");
        }
    } else {
        std::vector<std::int16_t> raw(count);
        if (!in.read(reinterpret_cast<char*>(raw.data()),
                     static_cast<std::streamsize>(count * sizeof(std::int16_t)))) {
            throw io_error(path.string() + ": truncated data section");
        }
        const float slope = hdr.scl_slope == 0.0f ? 1.0f : hdr.scl_slope;
        const float inter = hdr.scl_inter;
        for (std::size_t i = 0; i < count; ++i) {
            g.data[i] = slope * static_cast<float>(raw[i]) + inter;
        }
    }
    return g;
}

inline void save_nifti_grid(const voxel_grid& g, const std::filesystem::path& path) {
    g.require_valid("save_nifti");
    nifti::nifti_1_header hdr{};
    std::memset(&hdr, 0, sizeof(hdr));
    hdr.sizeof_hdr = 348;
    hdr.regular = 'r';
    hdr.dim[0] = 3;
    hdr.dim[1] = static_cast<std::int16_t>(g.nx);
    hdr.dim[2] = static_cast<std::int16_t>(g.ny);
    hdr.dim[3] = static_cast<std::int16_t>(g.nz);
    for (int i = 4; i < 8; ++i) hdr.dim[i] = 1;
    hdr.datatype = nifti::DT_FLOAT32;
    hdr.bitpix = 32;
    hdr.pixdim[0] = 1.0f;
    hdr.pixdim[1] = static_cast<float>(g.sx);
    hdr.pixdim[2] = static_cast<float>(g.sy);
    hdr.pixdim[3] = static_cast<float>(g.sz);
    hdr.vox_offset = nifti::SINGLE_FILE_OFFSET;
    hdr.scl_slope = 1.0f;
    hdr.scl_inter = 0.0f;
    hdr.xyzt_units = 2; // mm
    hdr.sform_code = 1;
    hdr.srow_x[0] = static_cast<float>(g.sx);
    hdr.srow_y[1] = static_cast<float>(g.sy);
    hdr.srow_z[2] = static_cast<float>(g.sz);
    std::snprintf(hdr.descrip, sizeof(hdr.descrip), "marrowcast");
    std::memcpy(hdr.magic, "n+1", 4);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw io_error("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(&hdr), sizeof(hdr));
    const char pad[4] = {0, 0, 0, 0}; // no extensions
    out.write(pad, 4);
    out.write(reinterpret_cast<const char*>(g.data.data()),
              static_cast<std::streamsize>(g.data.size() * sizeof(float)));
    if (!out) {
        throw io_error("write failed for " + path.string());
    }
}

} // namespace detail

inline volume load_nifti(const std::filesystem::path& path) {
    volume v;
    static_cast<voxel_grid&>(v) = detail::load_nifti_grid(path);
    v.require_valid("load_nifti(" + path.string() + ")");
    return v;
}

inline mask_volume load_nifti_mask(const std::filesystem::path& path) {
    mask_volume m;
    static_cast<voxel_grid&>(m) = detail::load_nifti_grid(path);
    m.require_valid("load_nifti_mask(" + path.string() + ")");
    m.require_mask_range("load_nifti_mask(" + path.string() + ")");
    return m;
}

inline void save_nifti(const volume& v, const std::filesystem::path& path) {
    detail::save_nifti_grid(v, path);
}

inline void save_nifti(const mask_volume& m, const std::filesystem::path& path) {
    detail::save_nifti_grid(m, path);
}

} // namespace marrowcast
