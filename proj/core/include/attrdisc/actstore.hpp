#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace attrdisc {

enum class LayerKind { kConv, kFc };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view text);

struct LayerSchema {
  std::string name;
  std::size_t unit_count = 0;
  LayerKind kind = LayerKind::kConv;

  bool operator==(const LayerSchema&) const = default;
};

struct UnitAddress {
  std::size_t layer_index = 0;
  std::size_t unit_index = 0;
  std::size_t flat_index = 0;

  bool operator==(const UnitAddress&) const = default;
};

// Names unique, every unit_count >= 1.
void validate_schema(std::span<const LayerSchema> layers);
std::size_t total_units(std::span<const LayerSchema> layers);
UnitAddress unit_address(std::span<const LayerSchema> layers, std::size_t flat_index);
UnitAddress unit_address(std::span<const LayerSchema> layers, std::size_t layer_index, std::size_t unit_index);
// First flat index of each layer, plus the total as a final element.
std::vector<std::size_t> layer_offsets(std::span<const LayerSchema> layers);

// Per-image activation rows, |images| x U, row-major float32. Conv layers
// hold one spatially max-pooled scalar per channel.
class ActivationMatrix {
 public:
  ActivationMatrix() = default;
  ActivationMatrix(std::vector<std::string> image_ids, std::vector<LayerSchema> layers,
                   std::vector<float> values);

  const std::vector<std::string>& image_ids() const { return image_ids_; }
  const std::vector<LayerSchema>& layers() const { return layers_; }
  const std::vector<float>& values() const { return values_; }

  std::size_t rows() const { return image_ids_.size(); }
  std::size_t units() const { return units_; }

  std::span<const float> row(std::size_t r) const { return {values_.data() + r * units_, units_}; }
  float at(std::size_t r, std::size_t flat_index) const { return values_[r * units_ + flat_index]; }

  // Throws kUnknownId.
  std::size_t row_of(std::string_view id) const;
  bool contains(std::string_view id) const;

  UnitAddress address(std::size_t flat_index) const { return unit_address(layers_, flat_index); }

  // Throws kOutOfRange for an address outside the schema.
  std::vector<float> column(const UnitAddress& unit) const;
  std::vector<float> column(const UnitAddress& unit, std::span<const std::string> ids) const;

  // Rows for `ids` in the requested order. Throws kUnknownId.
  ActivationMatrix rows_for(std::span<const std::string> ids) const;

  bool operator==(const ActivationMatrix& other) const;

 private:
  std::vector<std::string> image_ids_;
  std::vector<LayerSchema> layers_;
  std::vector<float> values_;
  std::size_t units_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
};

struct FeatureMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;  // [channels][height][width]
};

// out[c] = max over spatial positions of channel c. Rejects empty spatial
// extent and non-finite input.
std::vector<float> spatial_max_pool(const FeatureMap& map);

// ACTV container:
//   "ACTV" | 0x01 | u32 LE header length n | n bytes UTF-8 JSON header |
//   rows * U float32 LE values, row-major.
inline constexpr std::string_view kActvMagic = "ACTV";
inline constexpr std::uint8_t kActvVersion = 1;

std::string encode_activations(const ActivationMatrix& matrix);
ActivationMatrix decode_activations(std::string_view bytes, std::string_view source = "<memory>");
void write_activations(const ActivationMatrix& matrix, const std::filesystem::path& path);
ActivationMatrix read_activations(const std::filesystem::path& path);

namespace detail {
void append_u32_le(std::string& out, std::uint32_t v);
std::uint32_t read_u32_le(std::string_view bytes, std::size_t offset);
}  // namespace detail

}  // namespace attrdisc
