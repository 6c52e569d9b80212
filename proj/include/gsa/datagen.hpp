#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsa/error.hpp"
#include "gsa/numerics/io.hpp"
#include "gsa/numerics/rng.hpp"
#include "gsa/numerics/tensor.hpp"

namespace gsa {

using SampleId = std::uint32_t;

enum class Split : std::uint8_t { kTrain = 0, kTest = 1 };

inline const char* to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

/// Per-pixel class labels, row-major.
struct LabelMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMask() = default;
  LabelMask(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t& at(std::size_t r, std::size_t c) { return labels[r * width + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
  std::size_t size() const noexcept { return labels.size(); }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

/// Throws kUnprocessable unless `mask` has the given extents and every label < classes.
inline void validate_mask(const LabelMask& mask, std::size_t h, std::size_t w,
                          std::size_t classes) {
  if (mask.height != h || mask.width != w || mask.labels.size() != h * w) {
    throw Error(ErrorCode::kUnprocessable,
                "mask extents " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                    " do not match image " + std::to_string(h) + "x" + std::to_string(w));
  }
  for (std::uint8_t v : mask.labels) {
    if (v >= classes) {
      throw Error(ErrorCode::kUnprocessable, "label " + std::to_string(v) +
                                                 " out of range for " + std::to_string(classes) +
                                                 " classes");
    }
  }
}

struct ImageSample {
  SampleId id = 0;
  Split split = Split::kTrain;
  std::vector<float> pixels;  // H*W, z-scored
  std::optional<LabelMask> mask;

  friend bool operator==(const ImageSample&, const ImageSample&) = default;
};

struct DatasetSpec {
  std::size_t n_train = 600;
  std::size_t n_test = 200;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 3;
  double noise = 0.35;
  // Per-sample foreground contrast is drawn uniformly from this range, so the pool
  // mixes easy (high-contrast) and hard (low-contrast) images.
  double contrast_min = 0.25;
  double contrast_max = 1.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2 || classes > 255) {
      throw Error(ErrorCode::kInvalidArgument, "dataset spec: classes must be in [2, 255]");
    }
    if (height < 16 || width < 16) {
      throw Error(ErrorCode::kInvalidArgument, "dataset spec: extents must be at least 16x16");
    }
    if (n_train < 1 || n_test < 1) {
      throw Error(ErrorCode::kInvalidArgument, "dataset spec: split counts must be >= 1");
    }
    if (!(noise >= 0.0) || !(contrast_min > 0.0) || !(contrast_max >= contrast_min)) {
      throw Error(ErrorCode::kInvalidArgument, "dataset spec: bad noise/contrast settings");
    }
  }

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"n_train", s.n_train},   {"n_test", s.n_test},
                     {"height", s.height},     {"width", s.width},
                     {"classes", s.classes},   {"noise", s.noise},
                     {"contrast_min", s.contrast_min}, {"contrast_max", s.contrast_max},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.n_train = j.value("n_train", d.n_train);
  s.n_test = j.value("n_test", d.n_test);
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.classes = j.value("classes", d.classes);
  s.noise = j.value("noise", d.noise);
  s.contrast_min = j.value("contrast_min", d.contrast_min);
  s.contrast_max = j.value("contrast_max", d.contrast_max);
  s.seed = j.value("seed", d.seed);
}

/// Train samples carry ids [0, n_train); test samples [n_train, n_train + n_test).
struct Dataset {
  DatasetSpec spec;
  std::vector<ImageSample> samples;

  const ImageSample& sample(SampleId id) const {
    if (id >= samples.size()) {
      throw Error(ErrorCode::kNotFound, "no sample with id " + std::to_string(id));
    }
    return samples[id];
  }

  bool is_train(SampleId id) const { return sample(id).split == Split::kTrain; }

  std::vector<SampleId> ids(Split split) const {
    std::vector<SampleId> out;
    for (const auto& s : samples)
      if (s.split == split) out.push_back(s.id);
    return out;
  }

  std::size_t pixels_per_image() const { return spec.height * spec.width; }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

namespace detail {

struct Ellipse {
  double cx, cy, a, b, theta;

  bool contains(double x, double y, double scale) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (c * dx + s * dy) / (a * scale);
    const double v = (-s * dx + c * dy) / (b * scale);
    return u * u + v * v <= 1.0;
  }
};

}  // namespace detail

/// Generates one sample from its own stream, so generation order does not matter.
inline ImageSample generate_sample(const DatasetSpec& spec, SampleId id) {
  RngStream rng(spec.seed, "sample/" + std::to_string(id));
  const std::size_t H = spec.height, W = spec.width;
  const double unit = static_cast<double>(std::min(H, W)) / 32.0;
  constexpr int kMaxRetries = 100;

  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    detail::Ellipse e{};
    e.a = rng.uniform(3.0, 10.0) * unit;
    e.b = rng.uniform(3.0, 10.0) * unit;
    e.theta = rng.uniform(0.0, std::numbers::pi);
    const double reach = std::max(e.a, e.b) + 1.0;
    e.cx = rng.uniform(reach, static_cast<double>(W) - reach);
    e.cy = rng.uniform(reach, static_cast<double>(H) - reach);
    // Nested levels: class k occupies scale[k-1] minus scale[k].
    std::vector<double> scales{1.0};
    for (std::size_t k = 2; k < spec.classes; ++k) {
      scales.push_back(scales.back() * rng.uniform(0.35, 0.65));
    }

    LabelMask mask(H, W, 0);
    std::vector<std::size_t> counts(spec.classes, 0);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        const double x = static_cast<double>(c) + 0.5, y = static_cast<double>(r) + 0.5;
        std::uint8_t label = 0;
        for (std::size_t k = 0; k < scales.size(); ++k) {
          if (e.contains(x, y, scales[k])) label = static_cast<std::uint8_t>(k + 1);
        }
        mask.at(r, c) = label;
        ++counts[label];
      }
    if (std::any_of(counts.begin(), counts.end(), [](std::size_t n) { return n == 0; })) continue;

    // Smooth background texture from a few low-frequency plane waves.
    struct Wave {
      double kx, ky, phase, amp;
    };
    std::vector<Wave> waves;
    for (int i = 0; i < 3; ++i) {
      const double freq = rng.uniform(0.5, 2.0) * 2.0 * std::numbers::pi / static_cast<double>(W);
      const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
      waves.push_back({freq * std::cos(dir), freq * std::sin(dir),
                       rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.05, 0.2)});
    }
    const double contrast = rng.uniform(spec.contrast_min, spec.contrast_max);
    std::vector<double> level_mean(spec.classes, 0.0);
    for (std::size_t k = 1; k < spec.classes; ++k) {
      level_mean[k] = contrast * static_cast<double>(k) * rng.uniform(0.8, 1.2);
    }

    std::vector<double> img(H * W);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        double v = level_mean[mask.at(r, c)];
        for (const auto& w : waves) {
          v += w.amp * std::sin(w.kx * static_cast<double>(c) + w.ky * static_cast<double>(r) +
                                w.phase);
        }
        v += spec.noise * rng.normal();
        img[r * W + c] = v;
      }

    double mu = 0.0;
    for (double v : img) mu += v;
    mu /= static_cast<double>(img.size());
    double var = 0.0;
    for (double v : img) var += (v - mu) * (v - mu);
    var /= static_cast<double>(img.size());
    const double sd = std::sqrt(var);
    if (!(sd > 1e-8)) continue;

    ImageSample s;
    s.id = id;
    s.split = id < spec.n_train ? Split::kTrain : Split::kTest;
    s.pixels.resize(H * W);
    for (std::size_t i = 0; i < img.size(); ++i) s.pixels[i] = static_cast<float>((img[i] - mu) / sd);
    s.mask = std::move(mask);
    return s;
  }
  throw Error(ErrorCode::kInvalidArgument,
              "sample " + std::to_string(id) + ": could not place all classes after " +
                  std::to_string(kMaxRetries) + " attempts");
}

inline Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  const std::size_t total = spec.n_train + spec.n_test;
  ds.samples.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    ds.samples.push_back(generate_sample(spec, static_cast<SampleId>(i)));
  }
  return ds;
}

/// Copy of `ds` with the masks of `split` removed (an unlabeled pool export).
inline Dataset strip_masks(Dataset ds, Split split = Split::kTrain) {
  for (auto& s : ds.samples)
    if (s.split == split) s.mask.reset();
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

struct Augmentation {
  bool flip = false;
  float offset = 0.0f;
};

/// Applies a horizontal flip (image and mask jointly) and then a global intensity offset.
inline ImageSample apply_augmentation(const ImageSample& in, std::size_t height,
                                      std::size_t width, const Augmentation& aug) {
  ImageSample out = in;
  if (aug.flip) {
    for (std::size_t r = 0; r < height; ++r) {
      std::reverse(out.pixels.begin() + r * width, out.pixels.begin() + (r + 1) * width);
      if (out.mask) {
        auto row = out.mask->labels.begin() + r * width;
        std::reverse(row, row + width);
      }
    }
  }
  if (aug.offset != 0.0f) {
    for (float& v : out.pixels) v += aug.offset;
  }
  return out;
}

/// Draws an augmentation: flip with probability 0.5, offset uniform in [-0.1, 0.1].
/// Always consumes exactly two uniforms.
inline Augmentation draw_augmentation(RngStream& rng) {
  Augmentation a;
  a.flip = rng.uniform() < 0.5;
  a.offset = static_cast<float>(rng.uniform(-0.1, 0.1));
  return a;
}

inline ImageSample augment(const ImageSample& in, std::size_t height, std::size_t width,
                           RngStream& rng) {
  if (!in.mask) {
    throw Error(ErrorCode::kMissingMask,
                "augment: sample " + std::to_string(in.id) + " has no mask");
  }
  return apply_augmentation(in, height, width, draw_augmentation(rng));
}

// ---------------------------------------------------------------------------
// Dataset file: magic "GSAD1", JSON manifest (spec + sample index with byte
// offsets), then per-sample f32 pixels and optional u8 labels.

inline constexpr std::string_view kDatasetMagic = "GSAD1";

inline std::string encode_dataset(const Dataset& ds) {
  io::Container c;
  c.manifest["format"] = "GSAD1";
  c.manifest["version"] = 1;
  c.manifest["spec"] = ds.spec;
  nlohmann::json index = nlohmann::json::array();
  const std::size_t px = ds.pixels_per_image();
  for (const auto& s : ds.samples) {
    if (s.pixels.size() != px) {
      throw Error(ErrorCode::kShape, "sample " + std::to_string(s.id) + " has wrong pixel count");
    }
    nlohmann::json rec;
    rec["id"] = s.id;
    rec["split"] = to_string(s.split);
    rec["pixels_offset"] = c.payload.size();
    io::put_f32_array<float>(c.payload, s.pixels);
    if (s.mask) {
      rec["mask_offset"] = c.payload.size();
      c.payload.append(reinterpret_cast<const char*>(s.mask->labels.data()), s.mask->labels.size());
    } else {
      rec["mask_offset"] = nullptr;
    }
    index.push_back(rec);
  }
  c.manifest["samples"] = index;
  return io::encode_container(kDatasetMagic, c);
}

inline Dataset decode_dataset(std::string_view bytes) {
  io::Container c = io::decode_container(kDatasetMagic, bytes);
  Dataset ds;
  try {
    if (c.manifest.value("version", 0) != 1) {
      throw Error(ErrorCode::kVersionMismatch, "unsupported dataset version");
    }
    ds.spec = c.manifest.at("spec").get<DatasetSpec>();
    const std::size_t px = ds.spec.height * ds.spec.width;
    const auto& index = c.manifest.at("samples");
    std::size_t expected = 0;
    for (const auto& rec : index) {
      expected += 4 * px;
      if (!rec.at("mask_offset").is_null()) expected += px;
    }
    if (expected > c.payload.size()) throw Error(ErrorCode::kTruncated, "dataset payload truncated");
    if (expected < c.payload.size()) {
      throw Error(ErrorCode::kCorrupt, "dataset manifest/payload length mismatch");
    }
    const auto* base = reinterpret_cast<const unsigned char*>(c.payload.data());
    for (const auto& rec : index) {
      ImageSample s;
      s.id = rec.at("id").get<SampleId>();
      const std::string split = rec.at("split").get<std::string>();
      if (split != "train" && split != "test") {
        throw Error(ErrorCode::kCorrupt, "unknown split '" + split + "'");
      }
      s.split = split == "train" ? Split::kTrain : Split::kTest;
      const std::size_t po = rec.at("pixels_offset").get<std::size_t>();
      if (po > c.payload.size() || 4 * px > c.payload.size() - po) {
        throw Error(ErrorCode::kTruncated, "sample pixels extend past payload");
      }
      s.pixels.resize(px);
      for (std::size_t i = 0; i < px; ++i) s.pixels[i] = io::get_f32(base + po + 4 * i);
      if (!rec.at("mask_offset").is_null()) {
        const std::size_t mo = rec.at("mask_offset").get<std::size_t>();
        if (mo > c.payload.size() || px > c.payload.size() - mo) {
          throw Error(ErrorCode::kTruncated, "sample mask extends past payload");
        }
        LabelMask m(ds.spec.height, ds.spec.width);
        std::copy_n(base + mo, px, m.labels.begin());
        s.mask = std::move(m);
      }
      if (s.id != ds.samples.size()) throw Error(ErrorCode::kCorrupt, "sample ids not dense");
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("dataset manifest: ") + e.what());
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_dataset(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path));
}

}  // namespace gsa
