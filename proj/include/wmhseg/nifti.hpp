#pragma once

// NIfTI-1 single-file (.nii) reader and writer. Gzip-compressed files (.nii.gz)
// are inflated through zlib on read and produced on write when the path ends in ".gz".
//
// Header layout (byte offsets): sizeof_hdr 0, dim 40, datatype 70, bitpix 72,
// pixdim 76, vox_offset 108, scl_slope 112, scl_inter 116, xyzt_units 123,
// qform_code 252, sform_code 254, quatern 256, qoffset 268, srow 280, magic 344.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "wmhseg/errors.hpp"
#include "wmhseg/volume.hpp"

namespace wmhseg::nifti {

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kVoxOffset = 352;

enum DataType : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

namespace detail {

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& buf, bool swap) : buf_(buf), swap_(swap) {}

  template <class T>
  T get(std::size_t offset) const {
    if (offset + sizeof(T) > buf_.size()) throw IoError("NIfTI file truncated");
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), buf_.data() + offset, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
  }

 private:
  const std::vector<std::uint8_t>& buf_;
  bool swap_;
};

class ByteWriter {
 public:
  explicit ByteWriter(std::size_t n) : buf_(n, 0) {}

  template <class T>
  void put(std::size_t offset, T v) {
    auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(v);
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    std::memcpy(buf_.data() + offset, raw.data(), sizeof(T));
  }

  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path);
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> chunk;
  for (;;) {
    const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      int err = 0;
      std::string msg = gzerror(f, &err);
      gzclose(f);
      throw IoError("read error in " + path + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return out;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  if (ends_with(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "wb6");
    if (!f) throw IoError("cannot write " + path);
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    const int rc = gzclose(f);
    if (n != static_cast<int>(bytes.size()) || rc != Z_OK) throw IoError("write failed: " + path);
    return;
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace detail

inline std::size_t bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kUint8: return 1;
    case kInt16: return 2;
    case kInt32: return 4;
    case kFloat32: return 4;
    case kFloat64: return 8;
    default:
      throw UnsupportedTypeError("unsupported NIfTI datatype code " + std::to_string(datatype) +
                                 " (supported: 2 uint8, 4 int16, 8 int32, 16 float32, 64 float64)");
  }
}

/// Parses an in-memory NIfTI-1 image. For two-file pairs ("ni1" magic) `buf`
/// holds the .hdr bytes and `pair_data` the .img bytes.
inline Volume parse(const std::vector<std::uint8_t>& buf, const std::string& name = "<memory>",
                    const std::vector<std::uint8_t>* pair_data = nullptr) {
  if (buf.size() < kHeaderSize) throw IoError(name + ": file shorter than a NIfTI-1 header");
  // Byte order: dim[0] must be in 1..7 when read in the file's order.
  bool swap = false;
  {
    const auto dim0 = detail::ByteReader(buf, false).get<std::int16_t>(40);
    if (dim0 < 1 || dim0 > 7) {
      swap = true;
      const auto swapped = detail::ByteReader(buf, true).get<std::int16_t>(40);
      if (swapped < 1 || swapped > 7) throw FormatError(name + ": invalid dim[0]");
    }
  }
  const detail::ByteReader rd(buf, swap);
  if (rd.get<std::int32_t>(0) != static_cast<std::int32_t>(kHeaderSize)) {
    throw FormatError(name + ": header size field is not 348");
  }
  const char* magic = reinterpret_cast<const char*>(buf.data() + 344);
  if (std::memcmp(magic, "n+1\0", 4) != 0 && std::memcmp(magic, "ni1\0", 4) != 0) {
    throw FormatError(name + ": bad NIfTI-1 magic");
  }
  const bool paired = std::memcmp(magic, "ni1\0", 4) == 0;
  if (paired && !pair_data) throw FormatError(name + ": two-file NIfTI header without image data");
  const auto ndim = rd.get<std::int16_t>(40);
  std::array<std::size_t, 3> dims{1, 1, 1};
  for (int i = 1; i <= 7; ++i) {
    const auto d = rd.get<std::int16_t>(40 + 2 * static_cast<std::size_t>(i));
    if (i > ndim) break;
    if (d < 1) throw FormatError(name + ": non-positive dim[" + std::to_string(i) + "]");
    if (i <= 3) {
      dims[static_cast<std::size_t>(i - 1)] = static_cast<std::size_t>(d);
    } else if (d != 1) {
      throw FormatError(name + ": only 3D volumes are supported (dim[" + std::to_string(i) +
                        "] = " + std::to_string(d) + ")");
    }
  }
  const auto datatype = rd.get<std::int16_t>(70);
  const std::size_t bpv = bytes_per_voxel(datatype);

  Volume vol;
  vol.dims = dims;
  vol.datatype_code = datatype;
  vol.orientation.qfac = rd.get<float>(76) < 0 ? -1.0f : 1.0f;
  for (std::size_t i = 0; i < 3; ++i) {
    const float p = std::abs(rd.get<float>(80 + 4 * i));
    if (!(p > 0) || !std::isfinite(p)) throw FormatError(name + ": non-positive voxel spacing");
    vol.spacing[i] = p;
  }
  vol.orientation.qform_code = rd.get<std::int16_t>(252);
  vol.orientation.sform_code = rd.get<std::int16_t>(254);
  for (std::size_t i = 0; i < 3; ++i) {
    vol.orientation.quatern[i] = rd.get<float>(256 + 4 * i);
    vol.orientation.qoffset[i] = rd.get<float>(268 + 4 * i);
  }
  for (std::size_t i = 0; i < 12; ++i) vol.orientation.srow[i] = rd.get<float>(280 + 4 * i);

  const float vox_offset = rd.get<float>(108);
  std::size_t offset = 0;
  if (paired) {
    offset = vox_offset > 0 ? static_cast<std::size_t>(vox_offset) : 0;
  } else {
    offset = static_cast<std::size_t>(vox_offset < 352 ? 352 : vox_offset);
  }
  const std::vector<std::uint8_t>& src = paired ? *pair_data : buf;
  const detail::ByteReader data_rd(src, swap);
  const std::size_t n = vol.voxel_count();
  if (src.size() < offset + n * bpv) {
    throw IoError(name + ": truncated data section (" + std::to_string(src.size()) + " bytes, need " +
                  std::to_string(offset + n * bpv) + ")");
  }
  const float slope = rd.get<float>(112);
  const float inter = rd.get<float>(116);
  const bool scaled = slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f);
  vol.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = offset + i * bpv;
    double v = 0;
    switch (datatype) {
      case kUint8: v = src[at]; break;
      case kInt16: v = data_rd.get<std::int16_t>(at); break;
      case kInt32: v = data_rd.get<std::int32_t>(at); break;
      case kFloat32: v = data_rd.get<float>(at); break;
      case kFloat64: v = data_rd.get<double>(at); break;
      default: break;
    }
    if (scaled) v = static_cast<double>(slope) * v + static_cast<double>(inter);
    vol.data[i] = static_cast<float>(v);
  }
  for (float v : vol.data) {
    if (!std::isfinite(v)) throw FormatError(name + ": non-finite voxel values");
  }
  return vol;
}

inline Volume read(const std::string& path) {
  auto header = detail::read_file(path);
  if (header.size() >= kHeaderSize && std::memcmp(header.data() + 344, "ni1\0", 4) == 0) {
    std::string img = path;
    for (const char* ext : {".hdr.gz", ".hdr"}) {
      if (detail::ends_with(img, ext)) {
        img = img.substr(0, img.size() - std::strlen(ext)) + ".img";
        break;
      }
    }
    if (!std::filesystem::exists(img) && std::filesystem::exists(img + ".gz")) img += ".gz";
    const auto data = detail::read_file(img);
    return parse(header, path, &data);
  }
  return parse(header, path);
}

/// Serializes as little-endian float32, vox_offset 352, magic "n+1".
inline std::vector<std::uint8_t> serialize(const Volume& vol) {
  vol.validate();
  for (std::size_t i = 0; i < 3; ++i) {
    if (vol.dims[i] > 32767) throw ValidationError("volume extent exceeds NIfTI-1 limit");
  }
  const std::size_t n = vol.voxel_count();
  detail::ByteWriter w(kVoxOffset + 4 * n);
  w.put<std::int32_t>(0, static_cast<std::int32_t>(kHeaderSize));
  w.put<char>(38, 'r');  // regular
  w.put<std::int16_t>(40, 3);
  for (std::size_t i = 0; i < 3; ++i) w.put<std::int16_t>(42 + 2 * i, static_cast<std::int16_t>(vol.dims[i]));
  for (std::size_t i = 3; i < 7; ++i) w.put<std::int16_t>(42 + 2 * i, 1);
  w.put<std::int16_t>(70, kFloat32);
  w.put<std::int16_t>(72, 32);
  w.put<float>(76, vol.orientation.qfac);
  for (std::size_t i = 0; i < 3; ++i) w.put<float>(80 + 4 * i, vol.spacing[i]);
  for (std::size_t i = 3; i < 7; ++i) w.put<float>(80 + 4 * i, 1.0f);
  w.put<float>(108, static_cast<float>(kVoxOffset));
  w.put<float>(112, 0.0f);  // no intensity scaling
  w.put<float>(116, 0.0f);
  w.put<std::uint8_t>(123, 2);  // xyzt_units: mm
  w.put<std::int16_t>(252, vol.orientation.qform_code);
  w.put<std::int16_t>(254, vol.orientation.sform_code);
  for (std::size_t i = 0; i < 3; ++i) {
    w.put<float>(256 + 4 * i, vol.orientation.quatern[i]);
    w.put<float>(268 + 4 * i, vol.orientation.qoffset[i]);
  }
  for (std::size_t i = 0; i < 12; ++i) w.put<float>(280 + 4 * i, vol.orientation.srow[i]);
  std::memcpy(w.bytes().data() + 344, "n+1\0", 4);
  for (std::size_t i = 0; i < n; ++i) w.put<float>(kVoxOffset + 4 * i, vol.data[i]);
  return std::move(w.bytes());
}

inline void write(const Volume& vol, const std::string& path) {
  detail::write_file(path, serialize(vol));
}

}  // namespace wmhseg::nifti
