#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsa/datagen.hpp"
#include "gsa/error.hpp"
#include "gsa/manifold.hpp"
#include "gsa/numerics/adam.hpp"
#include "gsa/numerics/graph.hpp"
#include "gsa/numerics/io.hpp"
#include "gsa/numerics/layers.hpp"
#include "gsa/numerics/ops.hpp"
#include "gsa/numerics/params.hpp"
#include "gsa/numerics/rng.hpp"

namespace gsa {

inline constexpr double kDiceSmoothing = 1e-6;

struct UNetConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 3;
  /// Filters per encoder level; each level ends in a 2x2 max-pool.
  std::vector<std::size_t> filters{8, 16, 32, 64};
  std::size_t bottleneck = 128;

  void validate() const {
    if (filters.empty()) throw Error(ErrorCode::kInvalidArgument, "U-Net needs at least one level");
    if (classes < 1) throw Error(ErrorCode::kInvalidArgument, "U-Net needs at least one class");
    const std::size_t f = std::size_t{1} << filters.size();
    if (height % f != 0 || width % f != 0) {
      throw Error(ErrorCode::kInvalidArgument,
                  "image extents " + std::to_string(height) + "x" + std::to_string(width) +
                      " not divisible by " + std::to_string(f));
    }
  }
};

inline void to_json(nlohmann::json& j, const UNetConfig& c) {
  j = {{"height", c.height},   {"width", c.width},          {"classes", c.classes},
       {"filters", c.filters}, {"bottleneck", c.bottleneck}};
}

inline void from_json(const nlohmann::json& j, UNetConfig& c) {
  UNetConfig d;
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.classes = j.value("classes", d.classes);
  c.filters = j.value("filters", d.filters);
  c.bottleneck = j.value("bottleneck", d.bottleneck);
}

template <class T>
struct UNet {
  UNetConfig config;
  TensorSet<T> params;
  TensorSet<T> buffers;

  template <class U>
  UNet<U> cast() const {
    return {config, params.template cast<U>(), buffers.template cast<U>()};
  }

  friend bool operator==(const UNet& a, const UNet& b) {
    return a.params == b.params && a.buffers == b.buffers;
  }
};

namespace detail {

template <class T>
void add_double_conv(UNet<T>& u, const std::string& name, std::size_t cin, std::size_t cout,
                     RngStream& rng) {
  nn::add_conv(u.params, name + ".c1", cin, cout, 3, rng);
  nn::add_norm(u.params, u.buffers, name + ".n1", cout);
  nn::add_conv(u.params, name + ".c2", cout, cout, 3, rng);
  nn::add_norm(u.params, u.buffers, name + ".n2", cout);
}

template <class T>
Var double_conv(nn::Forward<T>& f, Var x, const std::string& name) {
  Graph<T>& g = f.graph();
  x = ops::relu(g, f.norm(f.conv(x, name + ".c1", 1), name + ".n1"));
  return ops::relu(g, f.norm(f.conv(x, name + ".c2", 1), name + ".n2"));
}

}  // namespace detail

template <class T>
UNet<T> init_unet(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  UNet<T> u{config, {}, {}};
  RngStream rng(seed, "seg/init");
  const auto& fl = config.filters;
  std::size_t cin = 1;
  for (std::size_t l = 0; l < fl.size(); ++l) {
    detail::add_double_conv(u, "down" + std::to_string(l), cin, fl[l], rng);
    cin = fl[l];
  }
  detail::add_double_conv(u, "bottom", cin, config.bottleneck, rng);
  cin = config.bottleneck;
  for (std::size_t l = fl.size(); l-- > 0;) {
    nn::add_conv_transpose(u.params, "up" + std::to_string(l), cin, fl[l], rng);
    detail::add_double_conv(u, "upconv" + std::to_string(l), 2 * fl[l], fl[l], rng);
    cin = fl[l];
  }
  nn::add_conv(u.params, "head", fl[0], config.classes, 1, rng);
  return u;
}

/// Images (N, 1, H, W) -> per-pixel class probabilities (N, K, H, W).
template <class T>
Var unet_forward(nn::Forward<T>& f, const UNetConfig& c, Var x) {
  Graph<T>& g = f.graph();
  const Shape& s = g.shape(x);
  if (s.size() != 4 || s[1] != 1 || s[2] != c.height || s[3] != c.width) {
    throw Error(ErrorCode::kShape, "segmenter: expected (N, 1, " + std::to_string(c.height) +
                                       ", " + std::to_string(c.width) + "), got " + shape_str(s));
  }
  std::vector<Var> skips;
  for (std::size_t l = 0; l < c.filters.size(); ++l) {
    x = detail::double_conv(f, x, "down" + std::to_string(l));
    skips.push_back(x);
    x = ops::max_pool2x2(g, x);
  }
  x = detail::double_conv(f, x, "bottom");
  for (std::size_t l = c.filters.size(); l-- > 0;) {
    x = ops::concat_channels(g, f.up(x, "up" + std::to_string(l)), skips[l]);
    x = detail::double_conv(f, x, "upconv" + std::to_string(l));
  }
  return ops::softmax_channels(g, f.conv(x, "head", 0));
}

/// Multi-class soft Dice loss between probabilities (N, K, H, W) and a one-hot target
/// of the same shape: -(1 / NK) * sum_{n,k} 2 sum_p yhat*y / (sum_p yhat^2 + sum_p y^2 + eps).
template <class T>
Var dice_loss(Graph<T>& g, Var yhat, const Tensor<T>& target, T eps = T(kDiceSmoothing)) {
  const Shape& s = g.shape(yhat);
  if (s.size() != 4 || target.shape() != s) {
    throw Error(ErrorCode::kShape, g.next_name("dice_loss") + ": prediction " + shape_str(s) +
                                       " vs target " + shape_str(target.shape()));
  }
  const std::size_t nk = s[0] * s[1], hw = s[2] * s[3];
  const T* p = g.value(yhat).data();
  const T* y = target.data();
  auto inter = std::make_shared<std::vector<T>>(nk, T(0));
  auto denom = std::make_shared<std::vector<T>>(nk, T(0));
  T total = T(0);
  for (std::size_t i = 0; i < nk; ++i) {
    T a = T(0), b = T(0);
    for (std::size_t j = 0; j < hw; ++j) {
      a += p[i * hw + j] * y[i * hw + j];
      b += p[i * hw + j] * p[i * hw + j] + y[i * hw + j] * y[i * hw + j];
    }
    (*inter)[i] = a;
    (*denom)[i] = b + eps;
    total += T(2) * a / (b + eps);
  }
  const T k = T(-1) / static_cast<T>(nk);
  return g.emit("dice_loss", Tensor<T>::scalar(k * total), g.requires_grad(yhat),
                [yhat, target, inter, denom, nk, hw, k](Graph<T>& g, Var self) {
                  const T gy = g.grad(self)[0] * k;
                  const T* p = g.value(yhat).data();
                  const T* y = target.data();
                  T* gp = g.grad(yhat).data();
                  for (std::size_t i = 0; i < nk; ++i) {
                    const T d = (*denom)[i];
                    const T c1 = T(2) / d, c2 = T(4) * (*inter)[i] / (d * d);
                    for (std::size_t j = 0; j < hw; ++j) {
                      const std::size_t q = i * hw + j;
                      gp[q] += gy * (c1 * y[q] - c2 * p[q]);
                    }
                  }
                });
}

/// One-hot encoding (N, K, H, W) of masks.
template <class T>
Tensor<T> one_hot(const std::vector<const LabelMask*>& masks, std::size_t classes) {
  if (masks.empty()) throw Error(ErrorCode::kInvalidArgument, "one_hot of an empty batch");
  const std::size_t h = masks[0]->height, w = masks[0]->width, hw = h * w;
  Tensor<T> out({masks.size(), classes, h, w});
  for (std::size_t n = 0; n < masks.size(); ++n) {
    validate_mask(*masks[n], h, w, classes);
    for (std::size_t j = 0; j < hw; ++j)
      out[(n * classes + masks[n]->labels[j]) * hw + j] = T(1);
  }
  return out;
}

template <class T>
Tensor<T> one_hot(const LabelMask& mask, std::size_t classes) {
  return one_hot<T>(std::vector<const LabelMask*>{&mask}, classes);
}

/// Probabilities (N, K, H, W) in inference mode.
template <class T>
Tensor<T> predict_probabilities(const UNet<T>& u, const Tensor<T>& x) {
  Graph<T> g;
  nn::Forward<T> f(g, u.params, u.buffers, nn::Mode::kInference, false);
  return g.value(unet_forward(f, u.config, g.constant(x)));
}

/// Per-pixel argmax over channels of one (K, H, W) or (1, K, H, W) map; ties go to the
/// lowest class index.
template <class T>
LabelMask argmax_mask(const Tensor<T>& probs) {
  const Shape& s = probs.shape();
  if (!(s.size() == 3 || (s.size() == 4 && s[0] == 1))) {
    throw Error(ErrorCode::kShape, "argmax_mask expects one map, got " + shape_str(s));
  }
  const std::size_t k = s[s.size() - 3], h = s[s.size() - 2], w = s[s.size() - 1], hw = h * w;
  LabelMask m(h, w);
  for (std::size_t j = 0; j < hw; ++j) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (probs[c * hw + j] > probs[best * hw + j]) best = c;
    m.labels[j] = static_cast<std::uint8_t>(best);
  }
  return m;
}

template <class T>
LabelMask predict_mask(const UNet<T>& u, const std::vector<float>& pixels) {
  return argmax_mask(
      predict_probabilities(u, pixels_tensor<T>(pixels, u.config.height, u.config.width)));
}

/// Masks for many images, evaluated in chunks.
template <class T>
std::vector<LabelMask> predict_masks(const UNet<T>& u, const Dataset& ds,
                                     const std::vector<SampleId>& ids, std::size_t chunk = 50) {
  std::vector<LabelMask> out;
  out.reserve(ids.size());
  const std::size_t k = u.config.classes, hw = ds.pixels_per_image();
  for (std::size_t s = 0; s < ids.size(); s += chunk) {
    const std::vector<SampleId> part(ids.begin() + s, ids.begin() + std::min(ids.size(), s + chunk));
    const Tensor<T> probs = predict_probabilities(u, image_batch<T>(ds, part));
    for (std::size_t n = 0; n < part.size(); ++n) {
      Tensor<T> one({k, ds.spec.height, ds.spec.width});
      std::copy(probs.data() + n * k * hw, probs.data() + (n + 1) * k * hw, one.data());
      out.push_back(argmax_mask(one));
    }
  }
  return out;
}

/// dL_Dice / dx for one labeled image at the current parameters, inference-mode
/// normalization. Shape (H, W).
template <class T>
Tensor<T> input_gradient(const UNet<T>& u, const Tensor<T>& x, const LabelMask& y) {
  const UNetConfig& c = u.config;
  const Tensor<T> in = x.rank() == 2 ? x.reshaped({1, 1, x.dim(0), x.dim(1)}) : x;
  if (in.shape() != Shape{1, 1, c.height, c.width}) {
    throw Error(ErrorCode::kShape, "input_gradient: image " + shape_str(x.shape()) +
                                       " does not match " + std::to_string(c.height) + "x" +
                                       std::to_string(c.width));
  }
  validate_mask(y, c.height, c.width, c.classes);
  Graph<T> g;
  nn::Forward<T> f(g, u.params, u.buffers, nn::Mode::kInference, false);
  const Var xv = g.leaf(in, true);
  const Var loss = dice_loss(g, unet_forward(f, c, xv), one_hot<T>(y, c.classes));
  g.backward(loss);
  return g.grad(xv).reshaped({c.height, c.width});
}

template <class T>
Tensor<T> input_gradient(const UNet<T>& u, const std::vector<float>& pixels, const LabelMask& y) {
  return input_gradient(u, pixels_tensor<T>(pixels, u.config.height, u.config.width), y);
}

struct SegTrainConfig {
  std::size_t epochs = 10;
  std::size_t max_batch = 32;
  double learning_rate = 1e-3;
};

/// Annotated training images keyed by id; iteration order is ascending id.
using LabeledSet = std::map<SampleId, LabelMask>;

/// Fine-tunes `u` in place with a fresh Adam state, shuffling and augmenting from
/// `rng`. Returns the mean loss of each epoch.
template <class T>
std::vector<double> train_segmenter(UNet<T>& u, const Dataset& ds, const LabeledSet& labeled,
                                    const SegTrainConfig& cfg, RngStream& rng) {
  if (labeled.empty()) throw Error(ErrorCode::kInvalidArgument, "empty labeled set");
  const UNetConfig& c = u.config;
  const std::size_t batch = std::min(cfg.max_batch, labeled.size());
  std::vector<SampleId> order;
  for (const auto& [id, m] : labeled) {
    validate_mask(m, c.height, c.width, c.classes);
    order.push_back(id);
  }
  Adam<T> adam(AdamConfig{.learning_rate = cfg.learning_rate});
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double acc = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t n = std::min(order.size(), start + batch) - start;
      std::vector<ImageSample> items;
      items.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        ImageSample s = ds.sample(order[start + i]);
        s.mask = labeled.at(order[start + i]);
        items.push_back(augment(s, c.height, c.width, rng));
      }
      const std::size_t hw = c.height * c.width;
      Tensor<T> x({n, 1, c.height, c.width});
      std::vector<const LabelMask*> masks;
      for (std::size_t i = 0; i < n; ++i) {
        std::transform(items[i].pixels.begin(), items[i].pixels.end(), x.data() + i * hw,
                       [](float v) { return T(v); });
        masks.push_back(&*items[i].mask);
      }
      Graph<T> g;
      nn::Forward<T> f(g, u.params, u.buffers, nn::Mode::kTrain, true);
      const Var loss = dice_loss(g, unet_forward(f, c, g.constant(x)), one_hot<T>(masks, c.classes));
      const double lv = double(g.value(loss).item());
      if (!std::isfinite(lv)) {
        throw Error(ErrorCode::kDivergence,
                    "segmenter diverged at epoch " + std::to_string(epoch) + ": non-finite loss");
      }
      g.backward(loss);
      adam.step(u.params, collect_grads(g, u.params, f.vars()));
      nn::update_running(u.buffers, f.stats());
      acc += lv * double(n);
    }
    losses.push_back(acc / double(order.size()));
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Checkpoints: GSCK1 with "seg/param/" and "seg/state/" tensors.

template <class T>
void append_unet(io::Container& c, const UNet<T>& u) {
  c.manifest["meta"]["segmenter"] = u.config;
  io::append_tensors(c, u.params, "seg/param/");
  io::append_tensors(c, u.buffers, "seg/state/");
}

template <class T>
UNet<T> extract_unet(const io::Container& c) {
  const nlohmann::json meta = c.manifest.value("meta", nlohmann::json::object());
  if (!meta.contains("segmenter")) {
    throw Error(ErrorCode::kVersionMismatch, "checkpoint does not hold a segmenter");
  }
  UNetConfig cfg = meta.at("segmenter").get<UNetConfig>();
  UNet<T> expect = init_unet<T>(cfg, 0);
  UNet<T> u{cfg, io::extract_tensors<T>(c, "seg/param/"), io::extract_tensors<T>(c, "seg/state/")};
  auto same_layout = [](const TensorSet<T>& a, const TensorSet<T>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].name != b[i].name || a[i].value.shape() != b[i].value.shape()) return false;
    return true;
  };
  if (!same_layout(u.params, expect.params) || !same_layout(u.buffers, expect.buffers)) {
    throw Error(ErrorCode::kCorrupt, "segmenter tensors do not match the recorded configuration");
  }
  return u;
}

template <class T>
std::string encode_unet(const UNet<T>& u) {
  io::Container c;
  c.manifest["format"] = "GSCK1";
  c.manifest["tensors"] = nlohmann::json::array();
  append_unet(c, u);
  return io::encode_container(io::kCheckpointMagic, c);
}

template <class T>
UNet<T> decode_unet(std::string_view bytes) {
  const io::Container c = io::decode_container(io::kCheckpointMagic, bytes);
  io::verify_payload_extent(c);
  return extract_unet<T>(c);
}

template <class T>
void save_unet(const UNet<T>& u, const std::filesystem::path& path) {
  io::write_file(path, encode_unet(u));
}

template <class T>
UNet<T> load_unet(const std::filesystem::path& path) {
  return decode_unet<T>(io::read_file(path));
}

}  // namespace gsa
