#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attrdisc/actstore.hpp"
#include "attrdisc/image.hpp"
#include "attrdisc/rng.hpp"
#include "attrdisc/saliency.hpp"

namespace attrdisc {

enum class BlockKind { kConv, kNorm, kMaxPool, kFc };

std::string_view to_string(BlockKind kind);
BlockKind parse_block_kind(std::string_view text);

// One stage of the reference network. Conv and fc blocks apply a rectifier;
// conv, norm and fc blocks are recorded (conv and norm spatially max-pooled),
// max-pool blocks are not.
struct BlockSpec {
  BlockKind kind = BlockKind::kConv;
  std::string name;
  std::size_t channels = 0;  // conv output channels or fc units
  std::size_t kernel = 3;    // conv kernel side, or pool window
  std::size_t stride = 1;    // conv stride; pools use their window
  double alpha = 0.0;        // norm: x / sqrt(1 + alpha * sum_c x^2)
  // conv: the first `opponent` filters are spatially flat with zero-sum
  // channel weights, responding to colour but not to brightness.
  std::size_t opponent = 0;
  // conv: the next `grating` filters are brightness-only sinusoidal gratings
  // of random orientation, period and phase.
  std::size_t grating = 0;

  bool operator==(const BlockSpec&) const = default;
};

struct RefNetSpec {
  std::uint64_t seed = kDefaultSeed;
  std::size_t input_side = 64;
  std::vector<BlockSpec> blocks;

  // conv1 -> norm1 -> conv2 -> conv3 -> conv4 -> pool -> fc5 -> fc6;
  // 400 recorded units over 7 layers.
  static RefNetSpec small(std::uint64_t seed = kDefaultSeed);

  bool operator==(const RefNetSpec&) const = default;
};

std::string serialize_refnet_spec(const RefNetSpec& spec);
RefNetSpec parse_refnet_spec(std::string_view text, std::string_view source = "<memory>");
RefNetSpec load_refnet_spec(const std::filesystem::path& path);

// Fixed random-weight feature extractor. Weights are He-uniform draws from a
// generator derived from the seed and block name; biases are zero. Inputs are
// shifted to [-0.5, 0.5]. All arithmetic is single-precision in a fixed order.
class RefNet : public ActivationProvider {
 public:
  explicit RefNet(RefNetSpec spec);

  const RefNetSpec& spec() const { return spec_; }
  const std::vector<LayerSchema>& schema() const { return schema_; }
  std::size_t unit_count() const override { return units_; }

  // Throws kInvalidArgument unless the image is input_side square.
  std::vector<float> forward(const Image& image) const;
  // As forward, resizing other sizes to input_side first.
  std::vector<float> activations(const Image& image) const override;

  ActivationMatrix forward_all(std::span<const std::string> ids, std::span<const Image> images,
                               std::size_t jobs = 1) const;

 private:
  struct Shape {
    std::size_t channels = 0, height = 0, width = 0;
  };

  RefNetSpec spec_;
  std::vector<LayerSchema> schema_;
  std::vector<Shape> in_shapes_;
  std::vector<std::vector<float>> weights_;
  std::size_t units_ = 0;
};

}  // namespace attrdisc
