#include "attrdisc/actstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "attrdisc/error.hpp"
#include "attrdisc/text_io.hpp"
#include "json.hpp"

namespace attrdisc {

using nlohmann::json;

std::string_view to_string(LayerKind kind) { return kind == LayerKind::kConv ? "conv" : "fc"; }

LayerKind parse_layer_kind(std::string_view text) {
  if (text == "conv") return LayerKind::kConv;
  if (text == "fc") return LayerKind::kFc;
  throw Error(ErrorKind::kFormat, fmt::format("unknown layer kind '{}'", text));
}

void validate_schema(std::span<const LayerSchema> layers) {
  std::set<std::string, std::less<>> names;
  for (const auto& l : layers) {
    if (l.unit_count < 1) throw Error(ErrorKind::kInvalidArgument, fmt::format("layer '{}' has no units", l.name));
    if (!names.insert(l.name).second) {
      throw Error(ErrorKind::kInvalidArgument, fmt::format("layer name '{}' repeated", l.name));
    }
  }
}

std::size_t total_units(std::span<const LayerSchema> layers) {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.unit_count;
  return n;
}

std::vector<std::size_t> layer_offsets(std::span<const LayerSchema> layers) {
  std::vector<std::size_t> offsets{0};
  for (const auto& l : layers) offsets.push_back(offsets.back() + l.unit_count);
  return offsets;
}

UnitAddress unit_address(std::span<const LayerSchema> layers, std::size_t flat_index) {
  std::size_t offset = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (flat_index < offset + layers[l].unit_count) return {l, flat_index - offset, flat_index};
    offset += layers[l].unit_count;
  }
  throw Error(ErrorKind::kOutOfRange, fmt::format("flat index {} >= {} units", flat_index, offset));
}

UnitAddress unit_address(std::span<const LayerSchema> layers, std::size_t layer_index, std::size_t unit_index) {
  if (layer_index >= layers.size()) {
    throw Error(ErrorKind::kOutOfRange, fmt::format("layer index {} >= {} layers", layer_index, layers.size()));
  }
  if (unit_index >= layers[layer_index].unit_count) {
    throw Error(ErrorKind::kOutOfRange, fmt::format("unit {} >= {} units in layer '{}'", unit_index,
                                                    layers[layer_index].unit_count, layers[layer_index].name));
  }
  std::size_t offset = 0;
  for (std::size_t l = 0; l < layer_index; ++l) offset += layers[l].unit_count;
  return {layer_index, unit_index, offset + unit_index};
}

ActivationMatrix::ActivationMatrix(std::vector<std::string> image_ids, std::vector<LayerSchema> layers,
                                   std::vector<float> values)
    : image_ids_(std::move(image_ids)), layers_(std::move(layers)), values_(std::move(values)) {
  validate_schema(layers_);
  units_ = total_units(layers_);
  if (values_.size() != image_ids_.size() * units_) {
    throw Error(ErrorKind::kLengthMismatch, fmt::format("expected {} values ({} rows x {} units), got {}",
                                                        image_ids_.size() * units_, image_ids_.size(), units_,
                                                        values_.size()));
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      throw Error(ErrorKind::kNonFinite, fmt::format("row {} unit {} is not finite", i / units_, i % units_));
    }
  }
  index_.reserve(image_ids_.size());
  for (std::size_t r = 0; r < image_ids_.size(); ++r) {
    if (!index_.emplace(image_ids_[r], r).second) {
      throw Error(ErrorKind::kDuplicateId, fmt::format("image id '{}' repeated", image_ids_[r]));
    }
  }
}

std::size_t ActivationMatrix::row_of(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) throw Error(ErrorKind::kUnknownId, fmt::format("image id '{}' not in activations", id));
  return it->second;
}

bool ActivationMatrix::contains(std::string_view id) const { return index_.contains(std::string(id)); }

std::vector<float> ActivationMatrix::column(const UnitAddress& unit) const {
  if (unit_address(layers_, unit.layer_index, unit.unit_index) != unit) {
    throw Error(ErrorKind::kOutOfRange, fmt::format("inconsistent unit address (flat {})", unit.flat_index));
  }
  std::vector<float> out(rows());
  for (std::size_t r = 0; r < rows(); ++r) out[r] = at(r, unit.flat_index);
  return out;
}

std::vector<float> ActivationMatrix::column(const UnitAddress& unit, std::span<const std::string> ids) const {
  if (unit.flat_index >= units_) throw Error(ErrorKind::kOutOfRange, fmt::format("flat index {}", unit.flat_index));
  std::vector<float> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(at(row_of(id), unit.flat_index));
  return out;
}

ActivationMatrix ActivationMatrix::rows_for(std::span<const std::string> ids) const {
  std::vector<float> values;
  values.reserve(ids.size() * units_);
  for (const auto& id : ids) {
    auto r = row(row_of(id));
    values.insert(values.end(), r.begin(), r.end());
  }
  return ActivationMatrix(std::vector<std::string>(ids.begin(), ids.end()), layers_, std::move(values));
}

bool ActivationMatrix::operator==(const ActivationMatrix& other) const {
  if (image_ids_ != other.image_ids_ || layers_ != other.layers_ || values_.size() != other.values_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(values_[i]) != std::bit_cast<std::uint32_t>(other.values_[i])) return false;
  }
  return true;
}

std::vector<float> spatial_max_pool(const FeatureMap& map) {
  if (map.height < 1 || map.width < 1) throw Error(ErrorKind::kInvalidArgument, "feature map has empty spatial extent");
  const std::size_t plane = map.height * map.width;
  if (map.data.size() != map.channels * plane) {
    throw Error(ErrorKind::kLengthMismatch,
                fmt::format("feature map holds {} values, expected {}", map.data.size(), map.channels * plane));
  }
  std::vector<float> out(map.channels);
  for (std::size_t c = 0; c < map.channels; ++c) {
    const float* p = map.data.data() + c * plane;
    float best = p[0];
    for (std::size_t k = 0; k < plane; ++k) {
      if (!std::isfinite(p[k])) throw Error(ErrorKind::kNonFinite, fmt::format("channel {} holds a non-finite value", c));
      best = std::max(best, p[k]);
    }
    out[c] = best;
  }
  return out;
}

namespace detail {

void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t read_u32_le(std::string_view bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  return v;
}

}  // namespace detail

std::string encode_activations(const ActivationMatrix& matrix) {
  json header;
  header["image_ids"] = matrix.image_ids();
  header["layers"] = json::array();
  for (const auto& l : matrix.layers()) {
    header["layers"].push_back({{"name", l.name}, {"unit_count", l.unit_count}, {"kind", to_string(l.kind)}});
  }
  header["rows"] = matrix.rows();
  header["units"] = matrix.units();
  const std::string text = header.dump();

  std::string out;
  out.reserve(9 + text.size() + matrix.values().size() * 4);
  out += kActvMagic;
  out.push_back(static_cast<char>(kActvVersion));
  detail::append_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (float v : matrix.values()) detail::append_u32_le(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

ActivationMatrix decode_activations(std::string_view bytes, std::string_view source) {
  if (bytes.size() < 9 || bytes.substr(0, 4) != kActvMagic) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: missing ACTV magic", source));
  }
  if (static_cast<std::uint8_t>(bytes[4]) != kActvVersion) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: unsupported ACTV version {}", source,
                                                static_cast<int>(static_cast<std::uint8_t>(bytes[4]))));
  }
  const std::size_t header_len = detail::read_u32_le(bytes, 5);
  if (bytes.size() < 9 + header_len) {
    throw Error(ErrorKind::kLengthMismatch,
                fmt::format("{}: header declares {} bytes, only {} available", source, header_len, bytes.size() - 9));
  }
  json header;
  try {
    header = json::parse(bytes.substr(9, header_len));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: bad ACTV header: {}", source, e.what()));
  }
  std::vector<std::string> ids;
  std::vector<LayerSchema> layers;
  std::size_t declared_units = 0;
  try {
    ids = header.at("image_ids").get<std::vector<std::string>>();
    for (const auto& l : header.at("layers")) {
      layers.push_back({l.at("name").get<std::string>(), l.at("unit_count").get<std::size_t>(),
                        parse_layer_kind(l.at("kind").get<std::string>())});
    }
    declared_units = header.at("units").get<std::size_t>();
    if (header.at("rows").get<std::size_t>() != ids.size()) {
      throw Error(ErrorKind::kFormat, fmt::format("{}: header rows disagree with image_ids", source));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: bad ACTV header: {}", source, e.what()));
  }
  validate_schema(layers);
  if (declared_units != total_units(layers)) {
    throw Error(ErrorKind::kFormat, fmt::format("{}: header declares U={} but layers sum to {}", source,
                                                declared_units, total_units(layers)));
  }
  const std::size_t payload = bytes.size() - 9 - header_len;
  const std::size_t expected = ids.size() * declared_units * 4;
  if (payload != expected) {
    std::string detail_msg = fmt::format("{}: expected {} payload bytes ({} rows x U={} x 4), found {}", source,
                                         expected, ids.size(), declared_units, payload);
    if (!ids.empty() && payload % (ids.size() * 4) == 0) {
      detail_msg += fmt::format(" (rows of {} values)", payload / (ids.size() * 4));
    }
    throw Error(ErrorKind::kLengthMismatch, detail_msg);
  }
  std::vector<float> values(ids.size() * declared_units);
  const std::size_t base = 9 + header_len;
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = std::bit_cast<float>(detail::read_u32_le(bytes, base + 4 * i));
  }
  return ActivationMatrix(std::move(ids), std::move(layers), std::move(values));
}

void write_activations(const ActivationMatrix& matrix, const std::filesystem::path& path) {
  write_file_atomic(path, encode_activations(matrix));
}

ActivationMatrix read_activations(const std::filesystem::path& path) {
  return decode_activations(read_file(path), path.string());
}

}  // namespace attrdisc
