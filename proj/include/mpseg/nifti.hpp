#pragma once

// Minimal single-file NIfTI-1 (.nii / .nii.gz) reader and writer. Orientation
// is reduced to spacing plus a translation; rotations in qform/sform are not
// interpreted.

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include "mpseg/error.hpp"
#include "mpseg/volume.hpp"

namespace mpseg::nifti {

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
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

enum class DataType : std::int16_t {
  uint8 = 2,
  int16 = 4,
  int32 = 8,
  float32 = 16,
  float64 = 64,
  int8 = 256,
  uint16 = 512,
  uint32 = 768,
};

namespace detail {

inline int bytes_per_voxel(std::int16_t datatype) {
  switch (static_cast<DataType>(datatype)) {
    case DataType::uint8:
    case DataType::int8: return 1;
    case DataType::int16:
    case DataType::uint16: return 2;
    case DataType::int32:
    case DataType::uint32:
    case DataType::float32: return 4;
    case DataType::float64: return 8;
  }
  return 0;
}

template <typename T>
void swap_bytes(T& v) {
  auto* p = reinterpret_cast<unsigned char*>(&v);
  std::reverse(p, p + sizeof(T));
}

inline void swap_header(Header& h) {
  swap_bytes(h.sizeof_hdr);
  for (auto& d : h.dim) swap_bytes(d);
  swap_bytes(h.datatype);
  swap_bytes(h.bitpix);
  for (auto& p : h.pixdim) swap_bytes(p);
  swap_bytes(h.vox_offset);
  swap_bytes(h.scl_slope);
  swap_bytes(h.scl_inter);
  swap_bytes(h.qform_code);
  swap_bytes(h.sform_code);
  swap_bytes(h.qoffset_x);
  swap_bytes(h.qoffset_y);
  swap_bytes(h.qoffset_z);
  for (auto& s : h.srow_x) swap_bytes(s);
  for (auto& s : h.srow_y) swap_bytes(s);
  for (auto& s : h.srow_z) swap_bytes(s);
}

template <typename S>
double load_as_double(const unsigned char* p, bool swap) {
  S v;
  std::memcpy(&v, p, sizeof(S));
  if (swap) swap_bytes(v);
  return static_cast<double>(v);
}

inline double decode(const unsigned char* p, std::int16_t datatype, bool swap) {
  switch (static_cast<DataType>(datatype)) {
    case DataType::uint8: return load_as_double<std::uint8_t>(p, swap);
    case DataType::int8: return load_as_double<std::int8_t>(p, swap);
    case DataType::int16: return load_as_double<std::int16_t>(p, swap);
    case DataType::uint16: return load_as_double<std::uint16_t>(p, swap);
    case DataType::int32: return load_as_double<std::int32_t>(p, swap);
    case DataType::uint32: return load_as_double<std::uint32_t>(p, swap);
    case DataType::float32: return load_as_double<float>(p, swap);
    case DataType::float64: return load_as_double<double>(p, swap);
  }
  return 0.0;
}

// Shortest decimal that round-trips the stored float, so 0.6f reads as 0.6.
inline double widen(float f) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, f);
  double d = 0.0;
  std::from_chars(buf, r.ptr, d);
  return d;
}

inline bool has_gz_suffix(const std::string& path) {
  return path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

class GzFile {
 public:
  GzFile(const std::string& path, const char* mode) : handle_(gzopen(path.c_str(), mode)) {}
  ~GzFile() {
    if (handle_) gzclose(handle_);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  explicit operator bool() const { return handle_ != nullptr; }
  gzFile get() const { return handle_; }
  int close() {
    int rc = handle_ ? gzclose(handle_) : Z_OK;
    handle_ = nullptr;
    return rc;
  }

 private:
  gzFile handle_;
};

}  // namespace detail

template <typename T>
Volume<T> read(const std::string& path, ChannelKind kind = ChannelKind::OTHER) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::MissingInput, "no such file: " + path);
  detail::GzFile file(path, "rb");
  if (!file) fail(ErrorCode::CorruptFile, "cannot open " + path);

  Header h{};
  if (gzread(file.get(), &h, sizeof(Header)) != static_cast<int>(sizeof(Header)))
    fail(ErrorCode::CorruptFile, "truncated NIfTI header in " + path);
  bool swap = false;
  if (h.sizeof_hdr != 348) {
    detail::swap_header(h);
    swap = true;
    if (h.sizeof_hdr != 348) fail(ErrorCode::CorruptFile, "not a NIfTI-1 file: " + path);
  }
  if (std::memcmp(h.magic, "n+1", 4) != 0) fail(ErrorCode::CorruptFile, "unsupported NIfTI magic in " + path);
  const int bpv = detail::bytes_per_voxel(h.datatype);
  if (bpv == 0) fail(ErrorCode::CorruptFile, "unsupported NIfTI datatype in " + path);
  if (h.dim[0] < 1 || h.dim[0] > 7) fail(ErrorCode::CorruptFile, "bad dim[0] in " + path);
  for (int i = 4; i <= h.dim[0]; ++i)
    if (h.dim[i] > 1) fail(ErrorCode::CorruptFile, "only 3D volumes are supported: " + path);

  Dims3 dims{std::max<int>(1, h.dim[1]), h.dim[0] >= 2 ? std::max<int>(1, h.dim[2]) : 1,
             h.dim[0] >= 3 ? std::max<int>(1, h.dim[3]) : 1};
  using detail::widen;
  Vec3 spacing{h.pixdim[1] > 0 ? widen(h.pixdim[1]) : 1.0, h.pixdim[2] > 0 ? widen(h.pixdim[2]) : 1.0,
               h.pixdim[3] > 0 ? widen(h.pixdim[3]) : 1.0};
  Vec3 centre0{};
  if (h.qform_code > 0) {
    centre0 = {widen(h.qoffset_x), widen(h.qoffset_y), widen(h.qoffset_z)};
  } else if (h.sform_code > 0) {
    centre0 = {widen(h.srow_x[3]), widen(h.srow_y[3]), widen(h.srow_z[3])};
  }
  const Vec3 origin{centre0.x - 0.5 * spacing.x, centre0.y - 0.5 * spacing.y, centre0.z - 0.5 * spacing.z};

  const auto offset = static_cast<long>(h.vox_offset);
  if (offset < static_cast<long>(sizeof(Header))) fail(ErrorCode::CorruptFile, "bad vox_offset in " + path);
  if (gzseek(file.get(), offset, SEEK_SET) != offset) fail(ErrorCode::CorruptFile, "cannot seek to data in " + path);

  Volume<T> vol(dims, spacing, origin, kind);
  std::vector<unsigned char> raw(vol.size() * bpv);
  std::size_t done = 0;
  while (done < raw.size()) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - done, 1u << 30));
    const int got = gzread(file.get(), raw.data() + done, chunk);
    if (got <= 0) fail(ErrorCode::CorruptFile, "truncated voxel data in " + path);
    done += static_cast<std::size_t>(got);
  }
  const bool scaled = h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f);
  for (std::size_t i = 0; i < vol.size(); ++i) {
    double v = detail::decode(raw.data() + i * bpv, h.datatype, swap);
    if (scaled) v = v * h.scl_slope + h.scl_inter;
    vol[i] = static_cast<T>(v);
  }
  return vol;
}

template <typename T>
void write(const Volume<T>& vol, const std::string& path, DataType type = DataType::float32) {
  Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(vol.dims().x);
  h.dim[2] = static_cast<std::int16_t>(vol.dims().y);
  h.dim[3] = static_cast<std::int16_t>(vol.dims().z);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = static_cast<std::int16_t>(type);
  h.bitpix = static_cast<std::int16_t>(8 * detail::bytes_per_voxel(h.datatype));
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = static_cast<float>(vol.spacing().x);
  h.pixdim[2] = static_cast<float>(vol.spacing().y);
  h.pixdim[3] = static_cast<float>(vol.spacing().z);
  for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2 | 8;  // mm, s
  const Vec3 c{vol.origin().x + 0.5 * vol.spacing().x, vol.origin().y + 0.5 * vol.spacing().y,
               vol.origin().z + 0.5 * vol.spacing().z};
  h.qform_code = 1;
  h.sform_code = 1;
  h.qoffset_x = static_cast<float>(c.x);
  h.qoffset_y = static_cast<float>(c.y);
  h.qoffset_z = static_cast<float>(c.z);
  h.srow_x[0] = h.pixdim[1];
  h.srow_x[3] = h.qoffset_x;
  h.srow_y[1] = h.pixdim[2];
  h.srow_y[3] = h.qoffset_y;
  h.srow_z[2] = h.pixdim[3];
  h.srow_z[3] = h.qoffset_z;
  std::memcpy(h.magic, "n+1", 4);

  std::vector<unsigned char> raw(sizeof(Header) + 4 + vol.size() * detail::bytes_per_voxel(h.datatype), 0);
  std::memcpy(raw.data(), &h, sizeof(Header));
  unsigned char* out = raw.data() + 352;
  for (std::size_t i = 0; i < vol.size(); ++i) {
    const double v = static_cast<double>(vol[i]);
    switch (type) {
      case DataType::uint8: { auto x = static_cast<std::uint8_t>(v); std::memcpy(out, &x, 1); out += 1; break; }
      case DataType::int8: { auto x = static_cast<std::int8_t>(v); std::memcpy(out, &x, 1); out += 1; break; }
      case DataType::int16: { auto x = static_cast<std::int16_t>(v); std::memcpy(out, &x, 2); out += 2; break; }
      case DataType::uint16: { auto x = static_cast<std::uint16_t>(v); std::memcpy(out, &x, 2); out += 2; break; }
      case DataType::int32: { auto x = static_cast<std::int32_t>(v); std::memcpy(out, &x, 4); out += 4; break; }
      case DataType::uint32: { auto x = static_cast<std::uint32_t>(v); std::memcpy(out, &x, 4); out += 4; break; }
      case DataType::float32: { auto x = static_cast<float>(v); std::memcpy(out, &x, 4); out += 4; break; }
      case DataType::float64: { std::memcpy(out, &v, 8); out += 8; break; }
    }
  }

  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  detail::GzFile file(path, detail::has_gz_suffix(path) ? "wb6" : "wbT");
  if (!file) fail(ErrorCode::CorruptFile, "cannot open " + path + " for writing");
  std::size_t done = 0;
  while (done < raw.size()) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - done, 1u << 30));
    if (gzwrite(file.get(), raw.data() + done, chunk) != static_cast<int>(chunk))
      fail(ErrorCode::CorruptFile, "write failed for " + path);
    done += chunk;
  }
  if (file.close() != Z_OK) fail(ErrorCode::CorruptFile, "close failed for " + path);
}

}  // namespace mpseg::nifti
