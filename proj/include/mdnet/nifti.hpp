#pragma once

#include <cstring>

#include <zlib.h>

#include "mdnet/common.hpp"

namespace mdnet {

// Minimal NIfTI-1 single-file (.nii / .nii.gz) reader plus a writer used by
// tests and tooling. Handles the common scalar dtypes, scl_slope/scl_inter
// scaling and byte-swapped (foreign-endian) files. Volumes are exposed as
// [z][y][x] grids with (z,y,x) spacing in mm.

struct NiftiVolume {
  int64_t nz = 0, ny = 0, nx = 0;
  std::array<real, 3> spacing{1.0, 1.0, 1.0};  // (z,y,x)
  std::vector<real> data;                      // z-major, then y, then x

  real at(int64_t z, int64_t y, int64_t x) const { return data[size_t((z * ny + y) * nx + x)]; }
};

namespace nifti_detail {

#pragma pack(push, 1)
struct Header {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

template <class T>
void bswap(T& v) {
  auto* b = reinterpret_cast<uint8_t*>(&v);
  for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
}

inline void swap_header(Header& h) {
  bswap(h.sizeof_hdr);
  for (auto& d : h.dim) bswap(d);
  bswap(h.datatype);
  bswap(h.bitpix);
  for (auto& p : h.pixdim) bswap(p);
  bswap(h.vox_offset);
  bswap(h.scl_slope);
  bswap(h.scl_inter);
}

// dtype codes from the standard
enum : int16_t {
  DT_UINT8 = 2,
  DT_INT16 = 4,
  DT_INT32 = 8,
  DT_FLOAT32 = 16,
  DT_FLOAT64 = 64,
  DT_INT8 = 256,
  DT_UINT16 = 512,
  DT_UINT32 = 768,
};

template <class T>
void decode(const std::vector<uint8_t>& raw, std::vector<real>& out, bool swap) {
  const size_t n = raw.size() / sizeof(T);
  out.resize(n);
  for (size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
    if (swap) bswap(v);
    out[i] = real(v);
  }
}

}  // namespace nifti_detail

inline NiftiVolume read_nifti(const std::string& path) {
  using namespace nifti_detail;
  gzFile f = gzopen(path.c_str(), "rb");  // reads plain and gzip alike
  if (!f) throw IoError("cannot open NIfTI file: " + path);
  struct Closer {
    gzFile f;
    ~Closer() { gzclose(f); }
  } closer{f};

  Header h{};
  if (gzread(f, &h, sizeof(h)) != int(sizeof(h)))
    throw IoError("unreadable NIfTI header (truncated): " + path);
  bool swap = false;
  if (h.sizeof_hdr != 348) {
    swap_header(h);
    swap = true;
    if (h.sizeof_hdr != 348) throw IoError("unreadable NIfTI header (bad sizeof_hdr): " + path);
  }
  if (std::strncmp(h.magic, "n+1", 3) != 0)
    throw IoError("unsupported NIfTI variant (expected single-file n+1 magic): " + path);
  if (h.dim[0] < 3 || h.dim[1] < 1 || h.dim[2] < 1 || h.dim[3] < 1)
    throw IoError("unsupported NIfTI dimensionality in " + path);
  for (int d = 4; d <= h.dim[0]; ++d)
    if (h.dim[d] > 1) throw IoError("only 3-d volumes are supported: " + path);

  NiftiVolume vol;
  vol.nx = h.dim[1];
  vol.ny = h.dim[2];
  vol.nz = h.dim[3];
  vol.spacing = {real(h.pixdim[3]), real(h.pixdim[2]), real(h.pixdim[1])};
  const int64_t n = vol.nx * vol.ny * vol.nz;
  const int bytes_per = h.bitpix / 8;
  if (bytes_per <= 0) throw IoError("bad bitpix in NIfTI header: " + path);

  // skip to the voxel payload
  const int64_t off = int64_t(h.vox_offset);
  if (off < int64_t(sizeof(Header))) throw IoError("bad vox_offset in NIfTI header: " + path);
  std::vector<uint8_t> skip(size_t(off - int64_t(sizeof(Header))));
  if (!skip.empty() && gzread(f, skip.data(), unsigned(skip.size())) != int(skip.size()))
    throw IoError("truncated NIfTI extension block: " + path);

  std::vector<uint8_t> raw(size_t(n * bytes_per));
  // gzread caps at INT_MAX per call; loop for large volumes
  size_t got = 0;
  while (got < raw.size()) {
    const unsigned chunk = unsigned(std::min<size_t>(raw.size() - got, 1u << 30));
    const int r = gzread(f, raw.data() + got, chunk);
    if (r <= 0) throw IoError("truncated NIfTI voxel data: " + path);
    got += size_t(r);
  }

  switch (h.datatype) {
    case DT_UINT8:
      decode<uint8_t>(raw, vol.data, false);
      break;
    case DT_INT8:
      decode<int8_t>(raw, vol.data, false);
      break;
    case DT_INT16:
      decode<int16_t>(raw, vol.data, swap);
      break;
    case DT_UINT16:
      decode<uint16_t>(raw, vol.data, swap);
      break;
    case DT_INT32:
      decode<int32_t>(raw, vol.data, swap);
      break;
    case DT_UINT32:
      decode<uint32_t>(raw, vol.data, swap);
      break;
    case DT_FLOAT32:
      decode<float>(raw, vol.data, swap);
      break;
    case DT_FLOAT64:
      decode<double>(raw, vol.data, swap);
      break;
    default:
      throw IoError("unsupported NIfTI datatype " + std::to_string(h.datatype) + " in " + path);
  }

  real slope = real(h.scl_slope), inter = real(h.scl_inter);
  if (slope == 0.0) slope = 1.0;
  if (slope != 1.0 || inter != 0.0)
    for (real& v : vol.data) v = v * slope + inter;
  return vol;
}

// Writer (float32 payload). Compresses when the path ends in .gz.
inline void write_nifti(const std::string& path, const NiftiVolume& vol) {
  using namespace nifti_detail;
  Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = int16_t(vol.nx);
  h.dim[2] = int16_t(vol.ny);
  h.dim[3] = int16_t(vol.nz);
  for (int d = 4; d < 8; ++d) h.dim[d] = 1;
  h.datatype = DT_FLOAT32;
  h.bitpix = 32;
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = float(vol.spacing[2]);
  h.pixdim[2] = float(vol.spacing[1]);
  h.pixdim[3] = float(vol.spacing[0]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  std::memcpy(h.magic, "n+1", 4);

  std::vector<float> payload(vol.data.size());
  for (size_t i = 0; i < payload.size(); ++i) payload[i] = float(vol.data[i]);
  const char pad[4] = {0, 0, 0, 0};

  const bool gz = path.size() > 3 && path.substr(path.size() - 3) == ".gz";
  if (gz) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot write NIfTI file: " + path);
    bool ok = gzwrite(f, &h, sizeof(h)) == int(sizeof(h)) && gzwrite(f, pad, 4) == 4;
    size_t put = 0;
    const size_t bytes = payload.size() * sizeof(float);
    while (ok && put < bytes) {
      const unsigned chunk = unsigned(std::min<size_t>(bytes - put, 1u << 30));
      ok = gzwrite(f, reinterpret_cast<const uint8_t*>(payload.data()) + put, chunk) ==
           int(chunk);
      put += chunk;
    }
    gzclose(f);
    if (!ok) throw IoError("write failure on NIfTI file: " + path);
  } else {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write NIfTI file: " + path);
    os.write(reinterpret_cast<const char*>(&h), sizeof(h));
    os.write(pad, 4);
    os.write(reinterpret_cast<const char*>(payload.data()),
             std::streamsize(payload.size() * sizeof(float)));
    if (!os) throw IoError("write failure on NIfTI file: " + path);
  }
}

}  // namespace mdnet
