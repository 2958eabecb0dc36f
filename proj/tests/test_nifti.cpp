#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "test_support.hpp"

using namespace wmhseg;

namespace {

// Minimal header writer following the published NIfTI-1 byte layout, kept
// separate from the library's serializer.
struct RawHeader {
  std::vector<std::uint8_t> bytes = std::vector<std::uint8_t>(352, 0);

  template <class T>
  void put(std::size_t off, T v) {
    std::memcpy(bytes.data() + off, &v, sizeof(T));
  }
};

std::vector<std::uint8_t> raw_nifti(std::array<std::int16_t, 3> dims, std::int16_t datatype, std::int16_t bitpix,
                                    const std::vector<std::uint8_t>& payload, float slope = 0, float inter = 0,
                                    const char* magic = "n+1") {
  RawHeader h;
  h.put<std::int32_t>(0, 348);
  h.put<std::int16_t>(40, 3);
  for (int i = 0; i < 3; ++i) h.put<std::int16_t>(42 + 2 * i, dims[static_cast<std::size_t>(i)]);
  for (int i = 3; i < 7; ++i) h.put<std::int16_t>(42 + 2 * i, 1);
  h.put<std::int16_t>(70, datatype);
  h.put<std::int16_t>(72, bitpix);
  h.put<float>(76, 1.0f);
  h.put<float>(80, 0.75f);
  h.put<float>(84, 0.75f);
  h.put<float>(88, 1.5f);
  h.put<float>(108, 352.0f);
  h.put<float>(112, slope);
  h.put<float>(116, inter);
  std::memcpy(h.bytes.data() + 344, magic, 4);
  h.bytes.insert(h.bytes.end(), payload.begin(), payload.end());
  return h.bytes;
}

template <class T>
std::vector<std::uint8_t> payload_of(const std::vector<T>& v) {
  std::vector<std::uint8_t> out(v.size() * sizeof(T));
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

Volume random_volume(std::uint64_t seed) {
  Rng rng(seed);
  const auto nx = static_cast<std::size_t>(rng.uniform_int(1, 20));
  const auto ny = static_cast<std::size_t>(rng.uniform_int(1, 20));
  const auto nz = static_cast<std::size_t>(rng.uniform_int(1, 8));
  Volume v(nx, ny, nz, {static_cast<float>(rng.uniform(0.3, 2)), static_cast<float>(rng.uniform(0.3, 2)),
                        static_cast<float>(rng.uniform(0.5, 5))});
  for (auto& x : v.data) x = static_cast<float>(rng.normal(0, 1000));
  v.orientation.qform_code = 1;
  v.orientation.quatern = {0.1f, 0.2f, 0.3f};
  v.orientation.srow[3] = -90.5f;
  return v;
}

}  // namespace

TEST(Nifti, ReadsFloatRampInXFastestOrder) {
  std::vector<float> ramp(64);
  for (int i = 0; i < 64; ++i) ramp[static_cast<std::size_t>(i)] = static_cast<float>(i);
  const auto vol = nifti::parse(raw_nifti({4, 4, 4}, 16, 32, payload_of(ramp)));
  EXPECT_EQ(vol.dims, (std::array<std::size_t, 3>{4, 4, 4}));
  EXPECT_EQ(vol.at(1, 0, 0), 1.0f);
  EXPECT_EQ(vol.at(0, 1, 0), 4.0f);
  EXPECT_EQ(vol.at(0, 0, 1), 16.0f);
  EXPECT_EQ(vol.at(3, 3, 3), 63.0f);
  EXPECT_EQ(vol.spacing, (std::array<float, 3>{0.75f, 0.75f, 1.5f}));
}

TEST(Nifti, AppliesSlopeAndIntercept) {
  const auto vol = nifti::parse(raw_nifti({1, 1, 1}, 4, 16, payload_of(std::vector<std::int16_t>{5}), 2.0f, 1.0f));
  EXPECT_EQ(vol.data[0], 11.0f);
  // Slope 0 means "no scaling".
  const auto raw = nifti::parse(raw_nifti({1, 1, 1}, 4, 16, payload_of(std::vector<std::int16_t>{5}), 0.0f, 7.0f));
  EXPECT_EQ(raw.data[0], 5.0f);
}

TEST(Nifti, ReadsAllSupportedDatatypes) {
  EXPECT_EQ(nifti::parse(raw_nifti({2, 1, 1}, 2, 8, {7, 255})).data, (std::vector<float>{7, 255}));
  EXPECT_EQ(nifti::parse(raw_nifti({2, 1, 1}, 8, 32, payload_of(std::vector<std::int32_t>{-3, 100000}))).data,
            (std::vector<float>{-3, 100000}));
  EXPECT_EQ(nifti::parse(raw_nifti({2, 1, 1}, 64, 64, payload_of(std::vector<double>{0.5, -2.25}))).data,
            (std::vector<float>{0.5f, -2.25f}));
}

TEST(Nifti, BigEndianDetectedFromDim0) {
  auto b = raw_nifti({2, 1, 1}, 4, 16, {0x00, 0x05, 0x01, 0x00});
  // Byte-swap every header field we set.
  auto swap16 = [&](std::size_t off) { std::swap(b[off], b[off + 1]); };
  auto swap32 = [&](std::size_t off) {
    std::swap(b[off], b[off + 3]);
    std::swap(b[off + 1], b[off + 2]);
  };
  swap32(0);
  for (std::size_t i = 0; i < 8; ++i) swap16(40 + 2 * i);
  swap16(70);
  swap16(72);
  for (std::size_t i = 0; i < 8; ++i) swap32(76 + 4 * i);
  swap32(108);
  const auto vol = nifti::parse(b);
  EXPECT_EQ(vol.data, (std::vector<float>{5, 256}));
  EXPECT_EQ(vol.spacing[2], 1.5f);
}

TEST(Nifti, RejectsMalformedHeaders) {
  const auto ok = raw_nifti({2, 2, 1}, 16, 32, payload_of(std::vector<float>(4, 1.0f)));
  auto bad_size = ok;
  std::int32_t v = 349;
  std::memcpy(bad_size.data(), &v, 4);
  EXPECT_THROW(nifti::parse(bad_size), FormatError);

  auto bad_magic = ok;
  std::memcpy(bad_magic.data() + 344, "n+2", 4);
  EXPECT_THROW(nifti::parse(bad_magic), FormatError);

  try {
    nifti::parse(raw_nifti({1, 1, 1}, 128, 24, {0, 0, 0}));
    FAIL();
  } catch (const UnsupportedTypeError& e) {
    EXPECT_NE(std::string(e.what()).find("128"), std::string::npos) << e.what();
  }

  auto truncated = ok;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(nifti::parse(truncated), IoError);
  EXPECT_THROW(nifti::parse(std::vector<std::uint8_t>(100, 0)), IoError);
}

TEST(Nifti, WrittenHeaderFields) {
  Volume v(3, 2, 1, {1, 2, 3});
  const auto bytes = nifti::serialize(v);
  ASSERT_EQ(bytes.size(), 352u + 6 * 4);
  EXPECT_EQ(bytes[0], 0x5C);  // 348 little-endian
  EXPECT_EQ(bytes[1], 0x01);
  EXPECT_EQ(bytes[2], 0);
  EXPECT_EQ(bytes[3], 0);
  float vox = 0;
  std::memcpy(&vox, bytes.data() + 108, 4);
  EXPECT_EQ(vox, 352.0f);
  EXPECT_EQ(std::memcmp(bytes.data() + 344, "n+1\0", 4), 0);
  std::int16_t dt = 0;
  std::memcpy(&dt, bytes.data() + 70, 2);
  EXPECT_EQ(dt, 16);
}

TEST(Nifti, RoundTripIsBitwiseOnTenRandomVolumes) {
  const auto dir = testing_support::temp_dir("nifti_rt");
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto v = random_volume(s);
    const auto path = (dir / ("v" + std::to_string(s) + (s % 2 ? ".nii.gz" : ".nii"))).string();
    nifti::write(v, path);
    const auto r = nifti::read(path);
    EXPECT_EQ(r.dims, v.dims);
    EXPECT_EQ(r.spacing, v.spacing);
    EXPECT_EQ(r.orientation, v.orientation);
    ASSERT_EQ(r.data.size(), v.data.size());
    EXPECT_EQ(std::memcmp(r.data.data(), v.data.data(), 4 * v.data.size()), 0);
  }
}

TEST(Nifti, ReadsTwoFilePair) {
  const auto dir = testing_support::temp_dir("nifti_pair");
  auto hdr = raw_nifti({2, 1, 1}, 16, 32, {}, 0, 0, "ni1");
  hdr.resize(348);
  float vox = 0;
  std::memcpy(hdr.data() + 108, &vox, 4);
  {
    std::ofstream(dir / "a.hdr", std::ios::binary).write(reinterpret_cast<const char*>(hdr.data()), 348);
    const auto img = payload_of(std::vector<float>{1.5f, 2.5f});
    std::ofstream(dir / "a.img", std::ios::binary).write(reinterpret_cast<const char*>(img.data()), 8);
  }
  EXPECT_EQ(nifti::read((dir / "a.hdr").string()).data, (std::vector<float>{1.5f, 2.5f}));
}

TEST(Nifti, MissingFileIsIoError) { EXPECT_THROW(nifti::read("/nonexistent/x.nii"), IoError); }

// ---------------------------------------------------------------------------
// Preprocessing

TEST(Preprocess, AxialSlicesFollowZ) {
  Volume v(3, 2, 4);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(i);
  const auto s = to_axial_slices(v);
  ASSERT_EQ(s.size(), 4u);
  for (std::size_t z = 0; z < 4; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 3; ++x) EXPECT_EQ(s[z].at(x, y), v.at(x, y, z));
}

TEST(Preprocess, CropPadArithmetic) {
  const auto a = AxisPlacement::compute(300, 256);
  EXPECT_EQ(a.crop_offset, 22u);
  EXPECT_EQ(a.kept, 256u);
  const auto b = AxisPlacement::compute(200, 256);
  EXPECT_EQ(b.pad_low, 28u);
  EXPECT_EQ(b.pad_high(256), 28u);
  const auto c = AxisPlacement::compute(180, 256);
  EXPECT_EQ(c.pad_low, 38u);
  EXPECT_EQ(c.pad_high(256), 38u);
  const auto d = AxisPlacement::compute(181, 256);  // odd remainder goes high
  EXPECT_EQ(d.pad_low, 37u);
  EXPECT_EQ(d.pad_high(256), 38u);
}

TEST(Preprocess, CentralCropWindow) {
  Slice2D s(300, 300);
  for (std::size_t y = 0; y < 300; ++y)
    for (std::size_t x = 0; x < 300; ++x) s.at(x, y) = static_cast<float>(1 + x + 1000 * y);
  const auto p = preprocess_slice(s);
  ASSERT_EQ(p.image.nx, 256u);
  // Normalization is monotone, so corners identify the window.
  const float lo = 1 + 22 + 1000 * 22, hi = 1 + 277 + 1000 * 277;
  EXPECT_FLOAT_EQ(p.image.at(0, 0), 0.0f);
  EXPECT_FLOAT_EQ(p.image.at(255, 255), 1.0f);
  EXPECT_NEAR(p.image.at(1, 0), 1.0 / (hi - lo), 1e-7);
}

TEST(Preprocess, PaddingStaysZeroAndRangeIsUnit) {
  Slice2D s(200, 180);
  Rng rng(1);
  for (auto& v : s.data) v = static_cast<float>(rng.uniform(5, 50));
  const auto p = preprocess_slice(s);
  float lo = 1, hi = 0;
  for (std::size_t y = 0; y < 256; ++y)
    for (std::size_t x = 0; x < 256; ++x) {
      const float v = p.image.at(x, y);
      const bool inside = x >= 28 && x < 228 && y >= 38 && y < 218;
      if (!inside) {
        EXPECT_EQ(v, 0.0f);
      } else {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  EXPECT_EQ(lo, 0.0f);
  EXPECT_EQ(hi, 1.0f);
}

TEST(Preprocess, ConstantSliceIsZero) {
  Slice2D s(50, 60, 3.0f);
  for (float v : preprocess_slice(s).image.data) EXPECT_EQ(v, 0.0f);
  Slice2D z(50, 60, 0.0f);
  for (float v : preprocess_slice(z).image.data) EXPECT_EQ(v, 0.0f);
}

TEST(Preprocess, ExplicitRangeAndClamp) {
  Slice2D s(4, 4, 10.0f);
  s.at(0, 0) = 30.0f;
  const auto p = preprocess_slice(s, IntensityRange{0.0f, 20.0f});
  const auto pl = AxisPlacement::compute(4, 256);
  EXPECT_FLOAT_EQ(p.image.at(pl.pad_low + 1, pl.pad_low), 0.5f);
  EXPECT_FLOAT_EQ(p.image.at(pl.pad_low, pl.pad_low), 1.0f);
}

TEST(Preprocess, MaskRoundTripOnCheckerboard) {
  for (auto [nx, ny] : {std::pair<std::size_t, std::size_t>{300, 181}, {256, 256}, {99, 270}}) {
    Volume v(nx, ny, 3);
    for (std::size_t z = 0; z < 3; ++z)
      for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x) v.at(x, y, z) = static_cast<float>((x + y + z) % 2);
    std::vector<Slice2D> back;
    for (const auto& s : to_axial_slices(v)) {
      const auto pre = preprocess_slice(s);
      const auto mask = preprocess_mask(s);
      back.push_back(unpreprocess_mask(mask, pre.provenance));
      EXPECT_EQ(back.back().nx, nx);
      EXPECT_EQ(back.back().ny, ny);
    }
    const auto r = assemble_volume(back, v);
    const auto px = AxisPlacement::compute(nx, 256), py = AxisPlacement::compute(ny, 256);
    for (std::size_t z = 0; z < 3; ++z)
      for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x) {
          const bool kept = x >= px.crop_offset && x < px.crop_offset + px.kept && y >= py.crop_offset &&
                            y < py.crop_offset + py.kept;
          EXPECT_EQ(r.at(x, y, z), kept ? v.at(x, y, z) : 0.0f);
        }
  }
}

TEST(Preprocess, UnpreprocessNeedsProvenance) {
  Slice2D m(256, 256);
  EXPECT_THROW(unpreprocess_mask(m, SliceProvenance{}), ValidationError);
}

TEST(Preprocess, BatchShapeAndRange) {
  std::vector<PreprocessedSlice> pre;
  Rng rng(3);
  for (int i = 0; i < 3; ++i) {
    Slice2D s(100 + 50 * static_cast<std::size_t>(i), 120);
    for (auto& v : s.data) v = static_cast<float>(rng.uniform(0, 900));
    pre.push_back(preprocess_slice(s));
  }
  const auto b = make_slice_batch(pre);
  EXPECT_EQ(b.tensor.shape(), (Shape{3, 1, 256, 256}));
  EXPECT_EQ(b.provenance.size(), 3u);
  for (float v : b.tensor.vec()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}
