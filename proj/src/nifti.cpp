#include "dsan/nifti.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dsan/error.hpp"

namespace dsan::nifti {

namespace {

#pragma pack(push, 1)
struct Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
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
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtUInt8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;
constexpr std::int16_t kDtUInt16 = 512;

template <typename T>
void read_as(std::ifstream& in, std::vector<float>& out, const std::filesystem::path& path) {
  std::vector<T> raw(out.size());
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size() * sizeof(T)));
  if (!in) throw IoError("truncated voxel data in " + path.string());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<float>(raw[i]);
}

}  // namespace

Volume read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Header hdr{};
  in.read(reinterpret_cast<char*>(&hdr), sizeof(hdr));
  if (!in) throw IoError("truncated NIfTI header in " + path.string());
  if (hdr.sizeof_hdr != 348) {
    throw ParseError("not a little-endian NIfTI-1 file: " + path.string());
  }
  if (std::memcmp(hdr.magic, "n+1", 4) != 0) {
    throw ParseError("unsupported NIfTI magic (only single-file n+1): " + path.string());
  }
  const int ndim = hdr.dim[0];
  if (ndim < 1 || ndim > 7) throw ParseError("bad dim[0] in " + path.string());
  for (int i = 4; i <= ndim; ++i) {
    if (hdr.dim[i] > 1) throw ParseError("only 3D images are supported: " + path.string());
  }
  auto extent = [&](int i) -> std::int64_t { return i <= ndim ? std::max<std::int16_t>(hdr.dim[i], 1) : 1; };
  auto pix = [&](int i) -> double {
    const double p = i <= ndim ? std::fabs(hdr.pixdim[i]) : 1.0;
    return p > 0.0 ? p : 1.0;
  };
  const Shape3 shape{extent(3), extent(2), extent(1)};
  const Spacing3 spacing{pix(3), pix(2), pix(1)};

  in.seekg(static_cast<std::streamoff>(hdr.vox_offset), std::ios::beg);
  std::vector<float> voxels(static_cast<std::size_t>(shape.voxels()));
  switch (hdr.datatype) {
    case kDtUInt8: read_as<std::uint8_t>(in, voxels, path); break;
    case kDtInt16: read_as<std::int16_t>(in, voxels, path); break;
    case kDtUInt16: read_as<std::uint16_t>(in, voxels, path); break;
    case kDtFloat32: read_as<float>(in, voxels, path); break;
    case kDtFloat64: read_as<double>(in, voxels, path); break;
    default:
      throw ParseError("unsupported NIfTI datatype " + std::to_string(hdr.datatype) + " in " +
                       path.string());
  }
  if (hdr.scl_slope != 0.0f && std::isfinite(hdr.scl_slope) &&
      !(hdr.scl_slope == 1.0f && hdr.scl_inter == 0.0f)) {
    for (float& v : voxels) v = v * hdr.scl_slope + hdr.scl_inter;
  }
  return Volume(shape, spacing, std::move(voxels));
}

void write(const std::filesystem::path& path, const Volume& v, StorageType storage) {
  Header hdr{};
  hdr.sizeof_hdr = 348;
  hdr.regular = 'r';
  hdr.dim[0] = 3;
  const Shape3& s = v.shape();
  if (s.w > 32767 || s.h > 32767 || s.d > 32767) {
    throw ContractError("volume too large for NIfTI-1: " + to_string(s));
  }
  hdr.dim[1] = static_cast<std::int16_t>(s.w);
  hdr.dim[2] = static_cast<std::int16_t>(s.h);
  hdr.dim[3] = static_cast<std::int16_t>(s.d);
  for (int i = 4; i < 8; ++i) hdr.dim[i] = 1;
  hdr.pixdim[0] = 1.0f;
  hdr.pixdim[1] = static_cast<float>(v.spacing().x);
  hdr.pixdim[2] = static_cast<float>(v.spacing().y);
  hdr.pixdim[3] = static_cast<float>(v.spacing().z);
  for (int i = 4; i < 8; ++i) hdr.pixdim[i] = 1.0f;
  hdr.vox_offset = 352.0f;
  hdr.scl_slope = 1.0f;
  hdr.xyzt_units = 2;  // millimetres
  hdr.sform_code = 1;
  hdr.srow_x[0] = hdr.pixdim[1];
  hdr.srow_y[1] = hdr.pixdim[2];
  hdr.srow_z[2] = hdr.pixdim[3];
  std::memcpy(hdr.magic, "n+1", 4);

  std::vector<char> payload;
  if (storage == StorageType::kFloat32) {
    hdr.datatype = kDtFloat32;
    hdr.bitpix = 32;
    payload.resize(v.size() * sizeof(float));
    std::memcpy(payload.data(), v.voxels().data(), payload.size());
  } else {
    hdr.datatype = kDtUInt8;
    hdr.bitpix = 8;
    payload.resize(v.size());
    const auto src = v.voxels();
    for (std::size_t i = 0; i < src.size(); ++i) {
      const float x = src[i];
      if (!(x >= 0.0f && x <= 255.0f) || x != std::floor(x)) {
        throw ContractError("uint8 NIfTI storage needs integer voxels in [0,255]: " +
                            path.string());
      }
      payload[i] = static_cast<char>(static_cast<std::uint8_t>(x));
    }
  }

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    const std::array<char, 4> extension{0, 0, 0, 0};
    out.write(reinterpret_cast<const char*>(&hdr), sizeof(hdr));
    out.write(extension.data(), extension.size());
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace dsan::nifti
