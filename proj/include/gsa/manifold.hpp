#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsa/datagen.hpp"
#include "gsa/error.hpp"
#include "gsa/numerics/adam.hpp"
#include "gsa/numerics/graph.hpp"
#include "gsa/numerics/io.hpp"
#include "gsa/numerics/layers.hpp"
#include "gsa/numerics/ops.hpp"
#include "gsa/numerics/params.hpp"
#include "gsa/numerics/rng.hpp"

namespace gsa {

using LatentPoint = std::vector<double>;

struct VaeConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  /// One residual block plus a 2x2 max-pool per level.
  std::vector<std::size_t> channels{8, 16, 32};
  std::size_t z_dim = 3;
  double leakiness = 1e-2;

  std::size_t bottom_height() const { return height >> channels.size(); }
  std::size_t bottom_width() const { return width >> channels.size(); }
  std::size_t bottom_size() const { return channels.back() * bottom_height() * bottom_width(); }

  void validate() const {
    if (channels.empty()) throw Error(ErrorCode::kInvalidArgument, "VAE needs at least one level");
    if (z_dim < 1) throw Error(ErrorCode::kInvalidArgument, "z_dim must be >= 1");
    const std::size_t f = std::size_t{1} << channels.size();
    if (height % f != 0 || width % f != 0) {
      throw Error(ErrorCode::kInvalidArgument,
                  "image extents " + std::to_string(height) + "x" + std::to_string(width) +
                      " not divisible by " + std::to_string(f));
    }
  }
};

inline void to_json(nlohmann::json& j, const VaeConfig& c) {
  j = {{"height", c.height},     {"width", c.width},         {"channels", c.channels},
       {"z_dim", c.z_dim},       {"leakiness", c.leakiness}};
}

inline void from_json(const nlohmann::json& j, VaeConfig& c) {
  VaeConfig d;
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.channels = j.value("channels", d.channels);
  c.z_dim = j.value("z_dim", d.z_dim);
  c.leakiness = j.value("leakiness", d.leakiness);
}

struct VaeTrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  /// Multiplier on the KL term of the training objective. At 1.0 the posterior
  /// collapses on the synthetic task and the latent table carries no structure.
  double kl_weight = 0.01;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const VaeTrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"kl_weight", c.kl_weight},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, VaeTrainConfig& c) {
  VaeTrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.kl_weight = j.value("kl_weight", d.kl_weight);
  c.seed = j.value("seed", d.seed);
}

template <class T>
struct Vae {
  VaeConfig config;
  TensorSet<T> params;
  TensorSet<T> buffers;

  template <class U>
  Vae<U> cast() const {
    return {config, params.template cast<U>(), buffers.template cast<U>()};
  }

  friend bool operator==(const Vae& a, const Vae& b) {
    return a.params == b.params && a.buffers == b.buffers;
  }
};

template <class T>
Vae<T> init_vae(const VaeConfig& config, std::uint64_t seed) {
  config.validate();
  Vae<T> v{config, {}, {}};
  RngStream rng(seed, "vae/init");
  const auto& ch = config.channels;
  std::size_t cin = 1;
  for (std::size_t l = 0; l < ch.size(); ++l) {
    nn::add_residual(v.params, v.buffers, "enc" + std::to_string(l), cin, ch[l], rng);
    cin = ch[l];
  }
  nn::add_dense(v.params, "mu", config.bottom_size(), config.z_dim, rng, 0.1);
  nn::add_dense(v.params, "logvar", config.bottom_size(), config.z_dim, rng, 0.1);
  nn::add_dense(v.params, "expand", config.z_dim, config.bottom_size(), rng);
  for (std::size_t l = ch.size(); l-- > 0;) {
    const std::size_t cout = l == 0 ? ch[0] : ch[l - 1];
    nn::add_conv_transpose(v.params, "up" + std::to_string(l), ch[l], ch[l], rng);
    nn::add_residual(v.params, v.buffers, "dec" + std::to_string(l), ch[l], cout, rng);
  }
  nn::add_conv(v.params, "out", ch[0], 1, 1, rng, 0.1);
  return v;
}

struct Posterior {
  Var mu;
  Var logvar;
};

namespace detail {

template <class T>
void expect_images(const Graph<T>& g, Var x, const VaeConfig& c, const char* op) {
  const Shape& s = g.shape(x);
  if (s.size() != 4 || s[1] != 1 || s[2] != c.height || s[3] != c.width) {
    throw Error(ErrorCode::kShape, std::string(op) + ": expected (N, 1, " +
                                       std::to_string(c.height) + ", " + std::to_string(c.width) +
                                       "), got " + shape_str(s));
  }
}

}  // namespace detail

/// g_phi: images (N, 1, H, W) -> mu, logvar each (N, z_dim).
template <class T>
Posterior vae_encode(nn::Forward<T>& f, const VaeConfig& c, Var x) {
  Graph<T>& g = f.graph();
  detail::expect_images(g, x, c, "encode");
  const T slope = static_cast<T>(c.leakiness);
  for (std::size_t l = 0; l < c.channels.size(); ++l) {
    x = ops::max_pool2x2(g, nn::residual(f, x, "enc" + std::to_string(l), slope));
  }
  const Var flat = ops::reshape(g, x, {g.shape(x)[0], c.bottom_size()});
  return {f.dense(flat, "mu"), f.dense(flat, "logvar")};
}

/// f_theta: latents (N, z_dim) -> images (N, 1, H, W).
template <class T>
Var vae_decode(nn::Forward<T>& f, const VaeConfig& c, Var z) {
  Graph<T>& g = f.graph();
  const Shape& zs = g.shape(z);
  if (zs.size() != 2 || zs[1] != c.z_dim) {
    throw Error(ErrorCode::kShape, "decode: expected (N, " + std::to_string(c.z_dim) +
                                       "), got " + shape_str(zs));
  }
  const T slope = static_cast<T>(c.leakiness);
  Var h = ops::leaky_relu(g, f.dense(z, "expand"), slope);
  h = ops::reshape(g, h, {zs[0], c.channels.back(), c.bottom_height(), c.bottom_width()});
  for (std::size_t l = c.channels.size(); l-- > 0;) {
    h = f.up(h, "up" + std::to_string(l));
    h = nn::residual(f, h, "dec" + std::to_string(l), slope);
  }
  return f.conv(h, "out", 0);
}

/// 0.5 * sum_d (mu^2 + exp(logvar) - logvar - 1), summed over latent dimensions and
/// averaged over the batch.
template <class T>
Var kl_divergence(Graph<T>& g, Var mu, Var logvar) {
  const T n = static_cast<T>(g.shape(mu)[0]);
  Var t = ops::add(g, ops::mul(g, mu, mu), ops::exp(g, logvar));
  t = ops::add_scalar(g, ops::sub(g, t, logvar), T(-1));
  return ops::scale(g, ops::sum(g, t), T(0.5) / n);
}

struct VaeLossTerms {
  Var total;
  Var reconstruction;
  Var kl;
};

/// Reconstruction MSE (mean over pixels and batch) of a reparameterized draw
/// z = mu + exp(logvar / 2) * noise, plus the closed-form KL term.
template <class T>
VaeLossTerms vae_loss(nn::Forward<T>& f, const VaeConfig& c, Var x, const Tensor<T>& noise,
                      T kl_weight = T(1)) {
  Graph<T>& g = f.graph();
  const Posterior post = vae_encode(f, c, x);
  if (noise.shape() != g.shape(post.mu)) {
    throw Error(ErrorCode::kShape, "reparameterization noise " + shape_str(noise.shape()) +
                                       " does not match posterior " + shape_str(g.shape(post.mu)));
  }
  const Var sigma = ops::exp(g, ops::scale(g, post.logvar, T(0.5)));
  const Var z = ops::add(g, post.mu, ops::mul(g, sigma, g.constant(noise)));
  const Var recon = ops::mse(g, vae_decode(f, c, z), x);
  const Var kl = kl_divergence(g, post.mu, post.logvar);
  const Var weighted = kl_weight == T(1) ? kl : ops::scale(g, kl, kl_weight);
  return {ops::add(g, recon, weighted), recon, kl};
}

/// Stacks the pixels of `ids` into an (N, 1, H, W) tensor.
template <class T>
Tensor<T> image_batch(const Dataset& ds, const std::vector<SampleId>& ids) {
  const std::size_t hw = ds.pixels_per_image();
  Tensor<T> x({ids.size(), 1, ds.spec.height, ds.spec.width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& px = ds.sample(ids[i]).pixels;
    std::transform(px.begin(), px.end(), x.data() + i * hw, [](float v) { return T(v); });
  }
  return x;
}

template <class T>
Tensor<T> pixels_tensor(const std::vector<float>& pixels, std::size_t h, std::size_t w) {
  if (pixels.size() != h * w) {
    throw Error(ErrorCode::kShape, "image has " + std::to_string(pixels.size()) +
                                       " pixels, expected " + std::to_string(h * w));
  }
  Tensor<T> x({1, 1, h, w});
  std::transform(pixels.begin(), pixels.end(), x.data(), [](float v) { return T(v); });
  return x;
}

struct Encoding {
  LatentPoint mu;
  LatentPoint logvar;
};

/// Posterior of one image (H*W pixels, or a (1, 1, H, W) tensor) in inference mode.
template <class T>
Encoding encode(const Vae<T>& vae, const Tensor<T>& x) {
  Graph<T> g;
  nn::Forward<T> f(g, vae.params, vae.buffers, nn::Mode::kInference, false);
  const Tensor<T>& in =
      x.rank() == 2 ? x.reshaped({1, 1, x.dim(0), x.dim(1)}) : x;
  const Posterior p = vae_encode(f, vae.config, g.constant(in));
  if (g.shape(p.mu)[0] != 1) throw Error(ErrorCode::kShape, "encode takes a single image");
  Encoding e;
  for (T v : g.value(p.mu).values()) e.mu.push_back(static_cast<double>(v));
  for (T v : g.value(p.logvar).values()) e.logvar.push_back(static_cast<double>(v));
  return e;
}

template <class T>
Encoding encode(const Vae<T>& vae, const std::vector<float>& pixels) {
  return encode(vae, pixels_tensor<T>(pixels, vae.config.height, vae.config.width));
}

/// Batched posterior means, rows in the order of `x`.
template <class T>
Tensor<T> encode_means(const Vae<T>& vae, const Tensor<T>& x) {
  Graph<T> g;
  nn::Forward<T> f(g, vae.params, vae.buffers, nn::Mode::kInference, false);
  return g.value(vae_encode(f, vae.config, g.constant(x)).mu);
}

/// Reconstruction of one latent point, H*W values.
template <class T>
std::vector<T> decode(const Vae<T>& vae, const LatentPoint& z) {
  if (z.size() != vae.config.z_dim) {
    throw Error(ErrorCode::kShape, "latent has " + std::to_string(z.size()) +
                                       " dimensions, expected " +
                                       std::to_string(vae.config.z_dim));
  }
  Graph<T> g;
  nn::Forward<T> f(g, vae.params, vae.buffers, nn::Mode::kInference, false);
  Tensor<T> zt({1, z.size()});
  for (std::size_t i = 0; i < z.size(); ++i) zt[i] = static_cast<T>(z[i]);
  return g.value(vae_decode(f, vae.config, g.constant(zt))).values();
}

struct VaeTrainLog {
  std::vector<double> epoch_loss;  // reconstruction + kl_weight * kl
  std::vector<double> epoch_reconstruction;
  std::vector<double> epoch_kl;
};

/// Mini-batch Adam over `ids`, reshuffled each epoch. The final batch of an epoch may
/// be smaller than `batch_size`.
template <class T>
VaeTrainLog train_vae(Vae<T>& vae, const Dataset& ds, const std::vector<SampleId>& ids,
                      const VaeTrainConfig& cfg) {
  if (cfg.batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch size must be >= 1");
  if (ids.size() < cfg.batch_size) {
    throw Error(ErrorCode::kInvalidArgument, "pool of " + std::to_string(ids.size()) +
                                                 " is smaller than batch size " +
                                                 std::to_string(cfg.batch_size));
  }
  Adam<T> adam(AdamConfig{.learning_rate = cfg.learning_rate});
  RngStream shuffle(cfg.seed, "vae/shuffle");
  RngStream noise_rng(cfg.seed, "vae/noise");
  std::vector<SampleId> order = ids;
  VaeTrainLog log;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    double acc[3] = {0, 0, 0};
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<SampleId> batch(order.begin() + start,
                                        order.begin() + std::min(order.size(), start + cfg.batch_size));
      Tensor<T> noise({batch.size(), vae.config.z_dim});
      for (auto& v : noise.values()) v = static_cast<T>(noise_rng.normal());
      Graph<T> g;
      nn::Forward<T> f(g, vae.params, vae.buffers, nn::Mode::kTrain, true);
      const VaeLossTerms terms =
          vae_loss(f, vae.config, g.constant(image_batch<T>(ds, batch)), noise, T(cfg.kl_weight));
      const double parts[3] = {double(g.value(terms.total).item()),
                               double(g.value(terms.reconstruction).item()),
                               double(g.value(terms.kl).item())};
      static constexpr const char* kNames[3] = {"total", "reconstruction", "kl"};
      for (int t = 2; t >= 0; --t) {
        if (!std::isfinite(parts[t])) {
          throw Error(ErrorCode::kDivergence, "VAE diverged at epoch " + std::to_string(epoch) +
                                                  ": non-finite " + kNames[t] + " loss");
        }
      }
      g.backward(terms.total);
      adam.step(vae.params, collect_grads(g, vae.params, f.vars()));
      nn::update_running(vae.buffers, f.stats());
      for (int t = 0; t < 3; ++t) acc[t] += parts[t] * double(batch.size());
    }
    log.epoch_loss.push_back(acc[0] / double(order.size()));
    log.epoch_reconstruction.push_back(acc[1] / double(order.size()));
    log.epoch_kl.push_back(acc[2] / double(order.size()));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Latent table

/// Posterior means of a pool, one row per id, stored at file precision.
struct LatentTable {
  std::size_t z_dim = 0;
  std::vector<SampleId> ids;
  std::vector<float> values;  // ids.size() * z_dim

  std::size_t size() const noexcept { return ids.size(); }
  std::size_t row_of(SampleId id) const {
    auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) {
      throw Error(ErrorCode::kNotFound, "latent table has no id " + std::to_string(id));
    }
    return static_cast<std::size_t>(it - ids.begin());
  }
  LatentPoint at(SampleId id) const {
    const std::size_t r = row_of(id);
    return LatentPoint(values.begin() + r * z_dim, values.begin() + (r + 1) * z_dim);
  }

  friend bool operator==(const LatentTable&, const LatentTable&) = default;
};

/// Sorted ids; each row is encode(vae, x_id).mu.
template <class T>
LatentTable encode_pool(const Vae<T>& vae, const Dataset& ds, std::vector<SampleId> ids,
                        std::size_t chunk = 64) {
  std::sort(ids.begin(), ids.end());
  LatentTable z{vae.config.z_dim, ids, {}};
  z.values.reserve(ids.size() * z.z_dim);
  for (std::size_t s = 0; s < ids.size(); s += chunk) {
    const std::vector<SampleId> part(ids.begin() + s, ids.begin() + std::min(ids.size(), s + chunk));
    const Tensor<T> mu = encode_means(vae, image_batch<T>(ds, part));
    for (T v : mu.values()) z.values.push_back(static_cast<float>(v));
  }
  return z;
}

inline constexpr std::string_view kLatentMagic = "GSLT1";

inline std::string encode_latent_table(const LatentTable& z) {
  if (z.values.size() != z.ids.size() * z.z_dim) {
    throw Error(ErrorCode::kInvalidArgument, "latent table rows do not match ids");
  }
  io::Container c;
  c.manifest = {{"format", "GSLT1"}, {"z_dim", z.z_dim}, {"ids", z.ids}};
  io::put_f32_array<float>(c.payload, z.values);
  return io::encode_container(kLatentMagic, c);
}

inline LatentTable decode_latent_table(std::string_view bytes) {
  const io::Container c = io::decode_container(kLatentMagic, bytes);
  LatentTable z;
  try {
    z.z_dim = c.manifest.at("z_dim").get<std::size_t>();
    z.ids = c.manifest.at("ids").get<std::vector<SampleId>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("bad latent manifest: ") + e.what());
  }
  const std::uint64_t need = 4ULL * z.ids.size() * z.z_dim;
  if (c.payload.size() < need) throw Error(ErrorCode::kTruncated, "latent payload truncated");
  if (c.payload.size() > need) throw Error(ErrorCode::kCorrupt, "manifest/payload length mismatch");
  if (!std::is_sorted(z.ids.begin(), z.ids.end())) {
    throw Error(ErrorCode::kCorrupt, "latent ids not sorted");
  }
  z.values.resize(z.ids.size() * z.z_dim);
  const auto* p = reinterpret_cast<const unsigned char*>(c.payload.data());
  for (std::size_t i = 0; i < z.values.size(); ++i) z.values[i] = io::get_f32(p + 4 * i);
  return z;
}

inline void save_latent_table(const LatentTable& z, const std::filesystem::path& path) {
  io::write_file(path, encode_latent_table(z));
}

inline LatentTable load_latent_table(const std::filesystem::path& path) {
  return decode_latent_table(io::read_file(path));
}

// ---------------------------------------------------------------------------
// VAE checkpoint: GSCK1 with "vae/param/" and "vae/state/" tensors and the config.

template <class T>
std::string encode_vae(const Vae<T>& vae) {
  io::Container c;
  c.manifest["format"] = "GSCK1";
  c.manifest["meta"] = {{"model", "vae"}, {"config", vae.config}};
  c.manifest["tensors"] = nlohmann::json::array();
  io::append_tensors(c, vae.params, "vae/param/");
  io::append_tensors(c, vae.buffers, "vae/state/");
  return io::encode_container(io::kCheckpointMagic, c);
}

template <class T>
Vae<T> decode_vae(std::string_view bytes) {
  const io::Container c = io::decode_container(io::kCheckpointMagic, bytes);
  io::verify_payload_extent(c);
  const nlohmann::json meta = c.manifest.value("meta", nlohmann::json::object());
  if (meta.value("model", "") != "vae") {
    throw Error(ErrorCode::kVersionMismatch, "checkpoint does not hold a VAE");
  }
  VaeConfig cfg = meta.at("config").get<VaeConfig>();
  Vae<T> expect = init_vae<T>(cfg, 0);
  Vae<T> v{cfg, io::extract_tensors<T>(c, "vae/param/"), io::extract_tensors<T>(c, "vae/state/")};
  auto same_layout = [](const TensorSet<T>& a, const TensorSet<T>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].name != b[i].name || a[i].value.shape() != b[i].value.shape()) return false;
    return true;
  };
  if (!same_layout(v.params, expect.params) || !same_layout(v.buffers, expect.buffers)) {
    throw Error(ErrorCode::kCorrupt, "VAE tensors do not match the recorded configuration");
  }
  return v;
}

template <class T>
void save_vae(const Vae<T>& vae, const std::filesystem::path& path) {
  io::write_file(path, encode_vae(vae));
}

template <class T>
Vae<T> load_vae(const std::filesystem::path& path) {
  return decode_vae<T>(io::read_file(path));
}

}  // namespace gsa
