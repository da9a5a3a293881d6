#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "attrdisc/actstore.hpp"
#include "attrdisc/rng.hpp"
#include "test_support.hpp"

namespace attrdisc {
namespace {

using testing::TempDir;

const std::vector<LayerSchema> kLayers{{"conv1", 2, LayerKind::kConv}, {"fc1", 1, LayerKind::kFc}};

ActivationMatrix small_matrix() {
  return ActivationMatrix({"a", "b"}, kLayers, {1.0f, -2.5f, 0.125f, 3.0f, 1e-30f, -0.0f});
}

// Bytes assembled by hand, without the library encoder.
std::string hand_built_actv(const std::string& header, const std::vector<float>& values) {
  std::string out = "ACTV";
  out.push_back('\x01');
  const auto n = static_cast<std::uint32_t>(header.size());
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((n >> (8 * k)) & 0xff));
  out += header;
  for (float v : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
  }
  return out;
}

const std::string kHeader =
    R"({"image_ids":["a","b"],"layers":[{"name":"conv1","unit_count":2,"kind":"conv"},)"
    R"({"name":"fc1","unit_count":1,"kind":"fc"}],"rows":2,"units":3})";

TEST(SpatialMaxPool, HandValues) {
  FeatureMap one{3, 1, 1, {1.0f, -2.0f, 5.0f}};
  EXPECT_EQ(spatial_max_pool(one), (std::vector<float>{1.0f, -2.0f, 5.0f}));
  FeatureMap m{1, 2, 2, {1, 3, 2, 0}};
  EXPECT_EQ(spatial_max_pool(m), std::vector<float>{3.0f});
  FeatureMap flat{2, 3, 2, std::vector<float>(12, 0.7f)};
  EXPECT_EQ(spatial_max_pool(flat), (std::vector<float>{0.7f, 0.7f}));
}

TEST(SpatialMaxPool, RejectsBadInput) {
  FeatureMap empty{2, 0, 3, {}};
  EXPECT_ANY_THROW(spatial_max_pool(empty));
  FeatureMap nan{1, 1, 2, {1.0f, std::numeric_limits<float>::quiet_NaN()}};
  EXPECT_ERROR_KIND(spatial_max_pool(nan), ErrorKind::kNonFinite);
}

TEST(SpatialMaxPool, InvariantToSpatialPermutation) {
  Rng rng(1);
  FeatureMap m{4, 5, 6, std::vector<float>(120)};
  for (auto& v : m.data) v = static_cast<float>(rng.uniform(-1, 1));
  const auto base = spatial_max_pool(m);
  for (int t = 0; t < 10; ++t) {
    for (std::size_t c = 0; c < 4; ++c) rng.shuffle(std::span<float>(m.data.data() + c * 30, 30));
    EXPECT_EQ(spatial_max_pool(m), base);
  }
}

TEST(UnitAddress, FlatIndexBijection) {
  const std::vector<LayerSchema> layers{{"a", 3, LayerKind::kConv}, {"b", 1, LayerKind::kConv}, {"c", 4, LayerKind::kFc}};
  std::size_t flat = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t u = 0; u < layers[l].unit_count; ++u, ++flat) {
      const auto a = unit_address(layers, flat);
      EXPECT_EQ(a.layer_index, l);
      EXPECT_EQ(a.unit_index, u);
      EXPECT_EQ(unit_address(layers, l, u), a);
    }
  }
  EXPECT_EQ(total_units(layers), 8u);
  EXPECT_EQ(layer_offsets(layers), (std::vector<std::size_t>{0, 3, 4, 8}));
  EXPECT_ANY_THROW(unit_address(layers, 8));
  EXPECT_ANY_THROW(unit_address(layers, 0, 3));
}

TEST(Schema, RejectsDuplicateNamesAndEmptyLayers) {
  const std::vector<LayerSchema> dup{{"a", 1, LayerKind::kConv}, {"a", 2, LayerKind::kFc}};
  EXPECT_ANY_THROW(validate_schema(dup));
  const std::vector<LayerSchema> zero{{"a", 0, LayerKind::kConv}};
  EXPECT_ANY_THROW(validate_schema(zero));
}

TEST(ActivationMatrix, ValidatesShapeAndValues) {
  EXPECT_ERROR_KIND(ActivationMatrix({"a"}, kLayers, {1, 2}), ErrorKind::kLengthMismatch);
  EXPECT_ERROR_KIND(ActivationMatrix({"a"}, kLayers, {1, 2, std::numeric_limits<float>::infinity()}),
                    ErrorKind::kNonFinite);
  EXPECT_ERROR_KIND(ActivationMatrix({"a", "a"}, kLayers, std::vector<float>(6)), ErrorKind::kDuplicateId);
}

TEST(ActivationMatrix, ColumnsAndRows) {
  const auto m = small_matrix();
  EXPECT_EQ(m.column(m.address(0)), (std::vector<float>{1.0f, 3.0f}));
  EXPECT_EQ(m.column(m.address(2)), (std::vector<float>{0.125f, -0.0f}));
  const std::vector<std::string> ba{"b", "a"};
  const auto sub = m.rows_for(ba);
  EXPECT_EQ(sub.image_ids(), ba);
  EXPECT_EQ(sub.at(0, 0), 3.0f);
  EXPECT_EQ(sub.at(1, 1), -2.5f);
  EXPECT_EQ(m.column(m.address(1), ba), (std::vector<float>{1e-30f, -2.5f}));
  const std::vector<std::string> zz{"zz"};
  EXPECT_ERROR_KIND(m.rows_for(zz), ErrorKind::kUnknownId);
  EXPECT_ERROR_KIND(m.row_of("zz"), ErrorKind::kUnknownId);
  EXPECT_ERROR_KIND(m.column(UnitAddress{5, 0, 9}), ErrorKind::kOutOfRange);
}

TEST(Actv, DecodesHandBuiltBytes) {
  const auto m = decode_activations(hand_built_actv(kHeader, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(m.image_ids(), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(m.layers(), kLayers);
  EXPECT_EQ(m.values(), (std::vector<float>{1, 2, 3, 4, 5, 6}));
}

TEST(Actv, EncodesToSpecifiedLayout) {
  const auto bytes = encode_activations(small_matrix());
  ASSERT_GE(bytes.size(), 9u);
  EXPECT_EQ(bytes.substr(0, 4), "ACTV");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
  std::uint32_t n = 0;
  for (int k = 0; k < 4; ++k) n |= std::uint32_t(static_cast<unsigned char>(bytes[5 + k])) << (8 * k);
  ASSERT_EQ(bytes.size(), 9 + n + 6 * 4);
  const auto payload = bytes.substr(9 + n);
  const auto matrix = small_matrix();
  const auto& values = matrix.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= std::uint32_t(static_cast<unsigned char>(payload[4 * i + k])) << (8 * k);
    EXPECT_EQ(bits, std::bit_cast<std::uint32_t>(values[i]));
  }
}

TEST(Actv, RoundTripIsBitExact) {
  TempDir dir;
  const auto m = small_matrix();
  write_activations(m, dir / "m.actv");
  const auto back = read_activations(dir / "m.actv");
  EXPECT_TRUE(back == m);
  for (std::size_t i = 0; i < m.values().size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint32_t>(back.values()[i]), std::bit_cast<std::uint32_t>(m.values()[i]));
  }
  EXPECT_EQ(encode_activations(back), encode_activations(m));
}

TEST(Actv, RandomRoundTrips) {
  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    std::vector<LayerSchema> layers;
    const std::size_t nl = 1 + rng.below(4);
    for (std::size_t l = 0; l < nl; ++l) {
      layers.push_back({"l" + std::to_string(l), 1 + rng.below(7), rng.bernoulli(0.5) ? LayerKind::kConv : LayerKind::kFc});
    }
    const std::size_t rows = rng.below(6);
    std::vector<std::string> ids;
    for (std::size_t r = 0; r < rows; ++r) ids.push_back("img" + std::to_string(r));
    std::vector<float> values(rows * total_units(layers));
    for (auto& v : values) v = static_cast<float>(rng.uniform(-1e3, 1e3));
    const ActivationMatrix m(ids, layers, values);
    EXPECT_TRUE(decode_activations(encode_activations(m)) == m);
  }
}

TEST(Actv, RejectsBadMagicAndVersion) {
  auto bytes = encode_activations(small_matrix());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_ERROR_KIND(decode_activations(bad), ErrorKind::kFormat);
  bad = bytes;
  bad[4] = '\x02';
  EXPECT_ERROR_KIND(decode_activations(bad), ErrorKind::kFormat);
  EXPECT_ERROR_KIND(decode_activations("AC"), ErrorKind::kFormat);
}

TEST(Actv, TruncatedPayloadIsLengthMismatch) {
  const auto bytes = encode_activations(small_matrix());
  EXPECT_ERROR_KIND(decode_activations(bytes.substr(0, bytes.size() - 3)), ErrorKind::kLengthMismatch);
  EXPECT_ERROR_KIND(decode_activations(bytes.substr(0, 12)), ErrorKind::kLengthMismatch);
}

TEST(Actv, DeclaredUnitsDisagreeingWithPayloadNamesBoth) {
  const std::string header =
      R"({"image_ids":["a","b"],"layers":[{"name":"l","unit_count":5,"kind":"fc"}],"rows":2,"units":5})";
  try {
    decode_activations(hand_built_actv(header, std::vector<float>(8, 1.0f)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kLengthMismatch);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("U=5"), std::string::npos) << msg;
    EXPECT_NE(msg.find("rows of 4"), std::string::npos) << msg;
  }
}

TEST(Actv, RejectsNonFinitePayload) {
  EXPECT_ERROR_KIND(decode_activations(hand_built_actv(kHeader, {1, 2, 3, std::nanf(""), 5, 6})),
                    ErrorKind::kNonFinite);
}

TEST(Actv, RejectsInconsistentHeader) {
  const std::string wrong_units =
      R"({"image_ids":["a"],"layers":[{"name":"l","unit_count":2,"kind":"fc"}],"rows":1,"units":3})";
  EXPECT_ERROR_KIND(decode_activations(hand_built_actv(wrong_units, {1, 2, 3})), ErrorKind::kFormat);
  EXPECT_ERROR_KIND(decode_activations(hand_built_actv("{not json", {})), ErrorKind::kFormat);
}

}  // namespace
}  // namespace attrdisc
