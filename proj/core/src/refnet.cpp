#include "attrdisc/refnet.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "attrdisc/error.hpp"
#include "attrdisc/parallel.hpp"
#include "attrdisc/text_io.hpp"
#include "json.hpp"

namespace attrdisc {

using nlohmann::json;

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::kConv: return "conv";
    case BlockKind::kNorm: return "norm";
    case BlockKind::kMaxPool: return "maxpool";
    case BlockKind::kFc: return "fc";
  }
  return "?";
}

BlockKind parse_block_kind(std::string_view text) {
  if (text == "conv") return BlockKind::kConv;
  if (text == "norm") return BlockKind::kNorm;
  if (text == "maxpool") return BlockKind::kMaxPool;
  if (text == "fc") return BlockKind::kFc;
  throw Error(ErrorKind::kFormat, fmt::format("unknown block kind '{}'", text));
}

namespace {

// Clears the fields a block kind does not read, so equal networks compare equal.
BlockSpec canonical(BlockSpec b) {
  if (b.kind != BlockKind::kConv) b.opponent = b.grating = 0;
  if (b.kind != BlockKind::kNorm) b.alpha = 0.0;
  switch (b.kind) {
    case BlockKind::kConv: break;
    case BlockKind::kNorm: b.channels = b.kernel = b.stride = 0; break;
    case BlockKind::kMaxPool:
      b.channels = 0;
      b.stride = b.kernel;
      break;
    case BlockKind::kFc: b.kernel = b.stride = 0; break;
  }
  return b;
}

}  // namespace

RefNetSpec RefNetSpec::small(std::uint64_t seed) {
  RefNetSpec s;
  s.seed = seed;
  s.input_side = 64;
  s.blocks = {
      {BlockKind::kConv, "conv1", 32, 5, 2, 0.0, 8, 8},
      {BlockKind::kNorm, "norm1", 0, 0, 0, 0.05},
      {BlockKind::kConv, "conv2", 32, 3, 2},
      {BlockKind::kConv, "conv3", 48, 3, 2},
      {BlockKind::kConv, "conv4", 64, 3, 1},
      {BlockKind::kMaxPool, "pool4", 0, 2, 2},
      {BlockKind::kFc, "fc5", 128},
      {BlockKind::kFc, "fc6", 64},
  };
  for (auto& b : s.blocks) b = canonical(b);
  return s;
}

std::string serialize_refnet_spec(const RefNetSpec& spec) {
  json j;
  j["seed"] = spec.seed;
  j["input_side"] = spec.input_side;
  j["blocks"] = json::array();
  for (const auto& b : spec.blocks) {
    json jb{{"type", to_string(b.kind)}, {"name", b.name}};
    switch (b.kind) {
      case BlockKind::kConv:
        jb["channels"] = b.channels;
        jb["kernel"] = b.kernel;
        jb["stride"] = b.stride;
        if (b.opponent > 0) jb["opponent"] = b.opponent;
        if (b.grating > 0) jb["grating"] = b.grating;
        break;
      case BlockKind::kNorm: jb["alpha"] = b.alpha; break;
      case BlockKind::kMaxPool: jb["size"] = b.kernel; break;
      case BlockKind::kFc: jb["units"] = b.channels; break;
    }
    j["blocks"].push_back(std::move(jb));
  }
  return j.dump(2) + "\n";
}

RefNetSpec parse_refnet_spec(std::string_view text, std::string_view source) {
  RefNetSpec spec;
  try {
    const json j = json::parse(text);
    spec.seed = j.value("seed", kDefaultSeed);
    spec.input_side = j.at("input_side").get<std::size_t>();
    for (const auto& jb : j.at("blocks")) {
      BlockSpec b;
      b.kind = parse_block_kind(jb.at("type").get<std::string>());
      b.name = jb.at("name").get<std::string>();
      switch (b.kind) {
        case BlockKind::kConv:
          b.channels = jb.at("channels").get<std::size_t>();
          b.kernel = jb.at("kernel").get<std::size_t>();
          b.stride = jb.value("stride", std::size_t{1});
          b.opponent = jb.value("opponent", std::size_t{0});
          b.grating = jb.value("grating", std::size_t{0});
          break;
        case BlockKind::kNorm: b.alpha = jb.at("alpha").get<double>(); break;
        case BlockKind::kMaxPool:
          b.kernel = jb.at("size").get<std::size_t>();
          b.stride = b.kernel;
          break;
        case BlockKind::kFc: b.channels = jb.at("units").get<std::size_t>(); break;
      }
      spec.blocks.push_back(canonical(std::move(b)));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, fmt::format("{}: {}", source, e.what()));
  }
  return spec;
}

RefNetSpec load_refnet_spec(const std::filesystem::path& path) {
  return parse_refnet_spec(read_file(path), path.string());
}

RefNet::RefNet(RefNetSpec spec) : spec_(std::move(spec)) {
  if (spec_.input_side < 1) throw Error(ErrorKind::kInvalidArgument, "refnet input_side must be >= 1");
  Shape shape{3, spec_.input_side, spec_.input_side};
  bool flat = false;
  for (const auto& b : spec_.blocks) {
    in_shapes_.push_back(shape);
    std::vector<float> w;
    auto draw = [&](std::size_t count, std::size_t fan_in) {
      Rng rng(Rng::derive(spec_.seed, "weights:" + b.name));
      const double limit = std::sqrt(6.0 / double(fan_in));
      w.resize(count);
      for (auto& v : w) v = static_cast<float>(rng.uniform(-limit, limit));
    };
    switch (b.kind) {
      case BlockKind::kConv: {
        if (flat) throw Error(ErrorKind::kInvalidArgument, fmt::format("conv block '{}' after fc", b.name));
        if (b.channels < 1 || b.kernel < 1 || b.stride < 1) {
          throw Error(ErrorKind::kInvalidArgument, fmt::format("conv block '{}' has a zero size", b.name));
        }
        const std::size_t pad = b.kernel / 2;
        if (shape.height + 2 * pad < b.kernel || shape.width + 2 * pad < b.kernel) {
          throw Error(ErrorKind::kInvalidArgument, fmt::format("conv block '{}' kernel exceeds its input", b.name));
        }
        if (b.opponent + b.grating > b.channels) {
          throw Error(ErrorKind::kInvalidArgument,
                      fmt::format("conv block '{}' has more structured filters than channels", b.name));
        }
        draw(b.channels * shape.channels * b.kernel * b.kernel, shape.channels * b.kernel * b.kernel);
        if (b.opponent > 0) {
          Rng rng(Rng::derive(spec_.seed, "opponent:" + b.name));
          const double limit = std::sqrt(6.0 / double(shape.channels * b.kernel * b.kernel));
          const std::size_t taps = b.kernel * b.kernel;
          for (std::size_t oc = 0; oc < b.opponent; ++oc) {
            std::vector<double> a(shape.channels);
            double mean = 0.0;
            for (auto& v : a) {
              v = rng.uniform(-1.0, 1.0);
              mean += v;
            }
            mean /= double(a.size());
            for (std::size_t ic = 0; ic < shape.channels; ++ic) {
              const float v = static_cast<float>((a[ic] - mean) * limit);
              std::fill_n(w.begin() + static_cast<std::ptrdiff_t>((oc * shape.channels + ic) * taps), taps, v);
            }
          }
        }
        if (b.grating > 0) {
          Rng rng(Rng::derive(spec_.seed, "grating:" + b.name));
          const double limit = std::sqrt(6.0 / double(shape.channels * b.kernel * b.kernel));
          const std::size_t taps = b.kernel * b.kernel;
          const double centre = double(b.kernel - 1) / 2.0;
          for (std::size_t oc = b.opponent; oc < b.opponent + b.grating; ++oc) {
            const double theta = rng.uniform(0.0, std::numbers::pi);
            const double period = rng.uniform(3.0, 6.0);
            const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            std::vector<double> g(taps);
            double mean = 0.0;
            for (std::size_t ky = 0; ky < b.kernel; ++ky) {
              for (std::size_t kx = 0; kx < b.kernel; ++kx) {
                const double t = (double(kx) - centre) * std::cos(theta) + (double(ky) - centre) * std::sin(theta);
                g[ky * b.kernel + kx] = std::cos(2.0 * std::numbers::pi * t / period + phase);
                mean += g[ky * b.kernel + kx];
              }
            }
            mean /= double(taps);
            for (std::size_t ic = 0; ic < shape.channels; ++ic) {
              for (std::size_t t = 0; t < taps; ++t) {
                // Snapped to a 2^-12 grid so libm rounding differences cannot leak into the weights.
                const double v = std::round((g[t] - mean) * limit * 4096.0) / 4096.0;
                w[(oc * shape.channels + ic) * taps + t] = static_cast<float>(v);
              }
            }
          }
        }
        shape = {b.channels, (shape.height + 2 * pad - b.kernel) / b.stride + 1,
                 (shape.width + 2 * pad - b.kernel) / b.stride + 1};
        schema_.push_back({b.name, b.channels, LayerKind::kConv});
        break;
      }
      case BlockKind::kNorm:
        if (flat) throw Error(ErrorKind::kInvalidArgument, fmt::format("norm block '{}' after fc", b.name));
        if (b.alpha < 0.0) throw Error(ErrorKind::kInvalidArgument, "norm alpha must be >= 0");
        schema_.push_back({b.name, shape.channels, LayerKind::kConv});
        break;
      case BlockKind::kMaxPool:
        if (flat) throw Error(ErrorKind::kInvalidArgument, fmt::format("pool block '{}' after fc", b.name));
        if (b.kernel < 1 || b.kernel > shape.height || b.kernel > shape.width) {
          throw Error(ErrorKind::kInvalidArgument, fmt::format("pool block '{}' window does not fit", b.name));
        }
        shape = {shape.channels, shape.height / b.kernel, shape.width / b.kernel};
        break;
      case BlockKind::kFc: {
        if (b.channels < 1) throw Error(ErrorKind::kInvalidArgument, fmt::format("fc block '{}' has no units", b.name));
        const std::size_t fan_in = shape.channels * shape.height * shape.width;
        draw(b.channels * fan_in, fan_in);
        shape = {b.channels, 1, 1};
        flat = true;
        schema_.push_back({b.name, b.channels, LayerKind::kFc});
        break;
      }
    }
    weights_.push_back(std::move(w));
  }
  if (schema_.empty()) throw Error(ErrorKind::kInvalidArgument, "refnet records no layers");
  validate_schema(schema_);
  units_ = total_units(schema_);
}

namespace {

void rectify(std::vector<float>& v) {
  for (auto& x : v) x = std::max(x, 0.0f);
}

void record_spatial_max(const std::vector<float>& data, std::size_t channels, std::size_t plane,
                        std::vector<float>& out) {
  for (std::size_t c = 0; c < channels; ++c) {
    const float* p = data.data() + c * plane;
    out.push_back(*std::max_element(p, p + plane));
  }
}

}  // namespace

std::vector<float> RefNet::forward(const Image& image) const {
  if (image.width != spec_.input_side || image.height != spec_.input_side) {
    throw Error(ErrorKind::kInvalidArgument, fmt::format("refnet expects {0}x{0} input, got {1}x{2}",
                                                         spec_.input_side, image.width, image.height));
  }
  const std::size_t side = spec_.input_side;
  std::vector<float> x(3 * side * side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t xx = 0; xx < side; ++xx) {
      for (std::size_t c = 0; c < 3; ++c) x[(c * side + y) * side + xx] = image.at(xx, y, c) - 0.5f;
    }
  }

  std::vector<float> out;
  out.reserve(units_);
  std::vector<float> padded;
  std::vector<float> columns;
  for (std::size_t bi = 0; bi < spec_.blocks.size(); ++bi) {
    const auto& b = spec_.blocks[bi];
    const Shape in = in_shapes_[bi];
    const auto& w = weights_[bi];
    switch (b.kind) {
      case BlockKind::kConv: {
        const std::size_t k = b.kernel;
        const std::size_t s = b.stride;
        const std::size_t pad = k / 2;
        const std::size_t ph = in.height + 2 * pad;
        const std::size_t pw = in.width + 2 * pad;
        const std::size_t oh = (ph - k) / s + 1;
        const std::size_t ow = (pw - k) / s + 1;
        padded.assign(in.channels * ph * pw, 0.0f);
        for (std::size_t c = 0; c < in.channels; ++c) {
          for (std::size_t y = 0; y < in.height; ++y) {
            std::copy_n(x.data() + (c * in.height + y) * in.width, in.width,
                        padded.data() + (c * ph + y + pad) * pw + pad);
          }
        }
        // Lay the receptive fields out as rows of a column matrix so the
        // accumulation below runs over contiguous memory.
        const std::size_t plane = oh * ow;
        const std::size_t taps = in.channels * k * k;
        columns.resize(taps * plane);
        for (std::size_t ic = 0; ic < in.channels; ++ic) {
          const float* src = padded.data() + ic * ph * pw;
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              float* col = columns.data() + ((ic * k + ky) * k + kx) * plane;
              for (std::size_t oy = 0; oy < oh; ++oy) {
                const float* row = src + (oy * s + ky) * pw + kx;
                for (std::size_t ox = 0; ox < ow; ++ox) col[oy * ow + ox] = row[ox * s];
              }
            }
          }
        }
        std::vector<float> y(b.channels * plane, 0.0f);
        constexpr std::size_t kTile = 64;
        for (std::size_t p0 = 0; p0 < plane; p0 += kTile) {
          const std::size_t p1 = std::min(plane, p0 + kTile);
          for (std::size_t oc = 0; oc < b.channels; ++oc) {
            float* dst = y.data() + oc * plane;
            const float* wr = w.data() + oc * taps;
            for (std::size_t t = 0; t < taps; ++t) {
              const float wv = wr[t];
              const float* col = columns.data() + t * plane;
              for (std::size_t p = p0; p < p1; ++p) dst[p] += wv * col[p];
            }
          }
        }
        rectify(y);
        record_spatial_max(y, b.channels, oh * ow, out);
        x = std::move(y);
        break;
      }
      case BlockKind::kNorm: {
        const std::size_t plane = in.height * in.width;
        const float alpha = static_cast<float>(b.alpha);
        for (std::size_t p = 0; p < plane; ++p) {
          float sumsq = 0.0f;
          for (std::size_t c = 0; c < in.channels; ++c) sumsq += x[c * plane + p] * x[c * plane + p];
          const float denom = std::sqrt(1.0f + alpha * sumsq);
          for (std::size_t c = 0; c < in.channels; ++c) x[c * plane + p] /= denom;
        }
        record_spatial_max(x, in.channels, plane, out);
        break;
      }
      case BlockKind::kMaxPool: {
        const std::size_t k = b.kernel;
        const std::size_t oh = in.height / k;
        const std::size_t ow = in.width / k;
        std::vector<float> y(in.channels * oh * ow);
        for (std::size_t c = 0; c < in.channels; ++c) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              float m = x[(c * in.height + oy * k) * in.width + ox * k];
              for (std::size_t dy = 0; dy < k; ++dy) {
                for (std::size_t dx = 0; dx < k; ++dx) {
                  m = std::max(m, x[(c * in.height + oy * k + dy) * in.width + ox * k + dx]);
                }
              }
              y[(c * oh + oy) * ow + ox] = m;
            }
          }
        }
        x = std::move(y);
        break;
      }
      case BlockKind::kFc: {
        const std::size_t fan_in = x.size();
        std::vector<float> y(b.channels, 0.0f);
        for (std::size_t j = 0; j < b.channels; ++j) {
          const float* wr = w.data() + j * fan_in;
          float acc = 0.0f;
          for (std::size_t i = 0; i < fan_in; ++i) acc += wr[i] * x[i];
          y[j] = acc;
        }
        rectify(y);
        out.insert(out.end(), y.begin(), y.end());
        x = std::move(y);
        break;
      }
    }
  }
  for (float v : out) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kNonFinite, "refnet produced a non-finite activation");
  }
  return out;
}

std::vector<float> RefNet::activations(const Image& image) const {
  if (image.width == spec_.input_side && image.height == spec_.input_side) return forward(image);
  return forward(resize_bilinear(image, spec_.input_side, spec_.input_side));
}

ActivationMatrix RefNet::forward_all(std::span<const std::string> ids, std::span<const Image> images,
                                     std::size_t jobs) const {
  if (ids.size() != images.size()) {
    throw Error(ErrorKind::kLengthMismatch, fmt::format("{} ids for {} images", ids.size(), images.size()));
  }
  std::vector<float> values(images.size() * units_);
  parallel_for(images.size(), jobs, [&](std::size_t i) {
    const auto row = forward(images[i]);
    std::copy(row.begin(), row.end(), values.begin() + static_cast<std::ptrdiff_t>(i * units_));
  });
  return ActivationMatrix(std::vector<std::string>(ids.begin(), ids.end()), schema_, std::move(values));
}

}  // namespace attrdisc
