#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsa/datagen.hpp"
#include "gsa/error.hpp"
#include "gsa/manifold.hpp"
#include "gsa/metrics.hpp"
#include "gsa/numerics/io.hpp"
#include "gsa/numerics/rng.hpp"
#include "gsa/sampler.hpp"
#include "gsa/segmenter.hpp"

namespace gsa {

using nlohmann::json;

enum class Strategy { kRandom, kGradient, kOracle };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kRandom: return "random";
    case Strategy::kGradient: return "gradient";
    case Strategy::kOracle: return "oracle";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& name) {
  if (name == "random") return Strategy::kRandom;
  if (name == "gradient") return Strategy::kGradient;
  if (name == "oracle") return Strategy::kOracle;
  throw Error(ErrorCode::kInvalidArgument, "unknown strategy '" + name + "'");
}

struct LoopConfig {
  std::size_t m = 12;
  std::size_t n = 9;
  std::size_t epochs_per_iter = 10;
  Strategy strategy = Strategy::kGradient;
  std::string annotator = "oracle";
  SamplerConfig sampler;
  std::size_t z_dim = 3;
  UNetConfig segmenter;
  double learning_rate = 1e-3;
  std::size_t max_batch = 32;
  /// Segmenter initialization, sample selection and training draw from streams keyed
  /// by this seed.
  std::uint64_t seed = 0;

  std::size_t budget() const { return (n + 1) * m; }

  void validate() const {
    if (m < 1) throw Error(ErrorCode::kInvalidArgument, "m must be >= 1");
    if (max_batch < 1) throw Error(ErrorCode::kInvalidArgument, "max_batch must be >= 1");
    if (annotator != "oracle" && annotator != "human") {
      throw Error(ErrorCode::kInvalidArgument, "unknown annotator '" + annotator + "'");
    }
    sampler.validate();
    segmenter.validate();
  }

  void validate_against(const Dataset& ds) const {
    validate();
    const std::size_t pool = ds.ids(Split::kTrain).size();
    if (budget() > pool) {
      throw Error(ErrorCode::kBudget, "budget exceeds pool: (n+1)*m = " +
                                          std::to_string(budget()) + " > " + std::to_string(pool) +
                                          " training samples");
    }
    if (segmenter.height != ds.spec.height || segmenter.width != ds.spec.width ||
        segmenter.classes != ds.spec.classes) {
      throw Error(ErrorCode::kInvalidArgument, "segmenter extents/classes do not match the dataset");
    }
  }
};

inline void to_json(json& j, const LoopConfig& c) {
  j = {{"m", c.m},
       {"n", c.n},
       {"epochs_per_iter", c.epochs_per_iter},
       {"strategy", to_string(c.strategy)},
       {"annotator", c.annotator},
       {"alpha", c.sampler.alpha},
       {"cos_threshold", c.sampler.cos_threshold},
       {"epsilon_norm", c.sampler.epsilon_norm},
       {"fallback_to_nearest", c.sampler.fallback_to_nearest},
       {"z_dim", c.z_dim},
       {"segmenter", c.segmenter},
       {"learning_rate", c.learning_rate},
       {"max_batch", c.max_batch},
       {"seed", c.seed}};
}

inline void from_json(const json& j, LoopConfig& c) {
  static const std::set<std::string> kKeys{
      "m",         "n",     "epochs_per_iter", "strategy",      "annotator",
      "alpha",     "cos_threshold", "epsilon_norm", "fallback_to_nearest", "z_dim",
      "segmenter", "learning_rate", "max_batch",    "seed"};
  if (!j.is_object()) throw Error(ErrorCode::kInvalidArgument, "loop config must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!kKeys.count(k)) throw Error(ErrorCode::kInvalidArgument, "unknown config key '" + k + "'");
  }
  try {
    LoopConfig d;
    c.m = j.value("m", d.m);
    c.n = j.value("n", d.n);
    c.epochs_per_iter = j.value("epochs_per_iter", d.epochs_per_iter);
    c.strategy = parse_strategy(j.value("strategy", std::string(to_string(d.strategy))));
    c.annotator = j.value("annotator", d.annotator);
    c.sampler.alpha = j.value("alpha", d.sampler.alpha);
    c.sampler.cos_threshold = j.value("cos_threshold", d.sampler.cos_threshold);
    c.sampler.epsilon_norm = j.value("epsilon_norm", d.sampler.epsilon_norm);
    c.sampler.fallback_to_nearest = j.value("fallback_to_nearest", d.sampler.fallback_to_nearest);
    c.z_dim = j.value("z_dim", d.z_dim);
    c.segmenter = j.value("segmenter", d.segmenter);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.max_batch = j.value("max_batch", d.max_batch);
    c.seed = j.value("seed", d.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("invalid config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Pool state

struct PoolState {
  std::vector<SampleId> labeled_order;  // annotation order
  LabeledSet annotations;
  std::set<SampleId> unlabeled;
  std::vector<SampleId> last_suggested;

  std::vector<SampleId> unlabeled_ids() const { return {unlabeled.begin(), unlabeled.end()}; }

  void add(SampleId id, LabelMask mask) {
    if (annotations.count(id)) {
      throw Error(ErrorCode::kConflict, "sample " + std::to_string(id) + " annotated twice");
    }
    if (!unlabeled.erase(id)) {
      throw Error(ErrorCode::kInvalidArgument, "sample " + std::to_string(id) + " is not unlabeled");
    }
    labeled_order.push_back(id);
    annotations.emplace(id, std::move(mask));
  }

  friend bool operator==(const PoolState&, const PoolState&) = default;
};

// ---------------------------------------------------------------------------
// Annotators

/// Yields one mask per requested id, in request order.
class Annotator {
 public:
  virtual ~Annotator() = default;
  virtual std::vector<LabelMask> annotate(std::size_t iteration,
                                          const std::vector<SampleId>& ids) = 0;
};

/// Returns the construction-time mask of a sample.
inline LabelMask oracle_annotation(const Dataset& ds, SampleId id) {
  const auto& s = ds.sample(id);
  if (!s.mask) {
    throw Error(ErrorCode::kMissingMask, "sample " + std::to_string(id) + " has no ground truth");
  }
  return *s.mask;
}

class OracleAnnotator : public Annotator {
 public:
  explicit OracleAnnotator(const Dataset& ds) : ds_(ds) {}
  std::vector<LabelMask> annotate(std::size_t, const std::vector<SampleId>& ids) override {
    std::vector<LabelMask> out;
    for (SampleId id : ids) out.push_back(oracle_annotation(ds_, id));
    return out;
  }

 private:
  const Dataset& ds_;
};

// ---------------------------------------------------------------------------
// Report

struct IterationMetrics {
  std::size_t iteration = 0;
  std::size_t labeled_count = 0;
  double mean_dice = 0.0;
  double std_dice = 0.0;
  std::vector<double> class_dice;
  std::optional<double> hausdorff_mean;
  std::size_t hausdorff_undefined = 0;
  double train_loss = 0.0;

  friend bool operator==(const IterationMetrics&, const IterationMetrics&) = default;
};

struct SuggestionRecord {
  std::size_t iteration = 0;
  SampleId id = 0;
  std::optional<Suggestion> guided;     // gradient strategy
  std::optional<double> predicted_dice;  // oracle strategy

  friend bool operator==(const SuggestionRecord&, const SuggestionRecord&) = default;
};

struct RunReport {
  json config;
  std::vector<IterationMetrics> rows;
  std::vector<std::vector<double>> loss_curve;  // per iteration, per epoch
  std::vector<SuggestionRecord> suggestions;
  std::vector<SampleId> labeled_order;
  double wall_clock_seconds = 0.0;  // not part of the canonical report

  double final_dice() const { return rows.empty() ? 0.0 : rows.back().mean_dice; }
};

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<double> json_opt(const json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

inline void to_json(json& j, const IterationMetrics& r) {
  j = {{"iteration", r.iteration},
       {"labeled_count", r.labeled_count},
       {"mean_dice", r.mean_dice},
       {"std_dice", r.std_dice},
       {"class_dice", r.class_dice},
       {"hausdorff_mean", opt_json(r.hausdorff_mean)},
       {"hausdorff_undefined_count", r.hausdorff_undefined},
       {"train_loss", r.train_loss}};
}

inline void from_json(const json& j, IterationMetrics& r) {
  r.iteration = j.at("iteration").get<std::size_t>();
  r.labeled_count = j.at("labeled_count").get<std::size_t>();
  r.mean_dice = j.at("mean_dice").get<double>();
  r.std_dice = j.at("std_dice").get<double>();
  r.class_dice = j.at("class_dice").get<std::vector<double>>();
  r.hausdorff_mean = json_opt(j.at("hausdorff_mean"));
  r.hausdorff_undefined = j.at("hausdorff_undefined_count").get<std::size_t>();
  r.train_loss = j.at("train_loss").get<double>();
}

inline void to_json(json& j, const SuggestionRecord& s) {
  j = {{"iteration", s.iteration}, {"id", s.id}};
  if (s.guided) {
    j["seed"] = s.guided->seed;
    j["distance"] = s.guided->distance;
    j["cosine"] = opt_json(s.guided->cosine);
    j["fallback"] = s.guided->fallback;
  }
  if (s.predicted_dice) j["predicted_dice"] = *s.predicted_dice;
}

inline void from_json(const json& j, SuggestionRecord& s) {
  s.iteration = j.at("iteration").get<std::size_t>();
  s.id = j.at("id").get<SampleId>();
  s.guided.reset();
  s.predicted_dice.reset();
  if (j.contains("seed")) {
    s.guided = Suggestion{j.at("seed").get<SampleId>(), s.id, j.at("distance").get<double>(),
                          json_opt(j.at("cosine")), j.at("fallback").get<bool>()};
  }
  if (j.contains("predicted_dice")) s.predicted_dice = j.at("predicted_dice").get<double>();
}

/// Canonical report: a deterministic function of the configuration and inputs.
inline json report_json(const RunReport& r) {
  return {{"config", r.config},
          {"metrics", r.rows},
          {"loss_curve", r.loss_curve},
          {"suggestions", r.suggestions},
          {"labeled_order", r.labeled_order}};
}

inline RunReport report_from_json(const json& j) {
  RunReport r;
  r.config = j.at("config");
  r.rows = j.at("metrics").get<std::vector<IterationMetrics>>();
  r.loss_curve = j.at("loss_curve").get<std::vector<std::vector<double>>>();
  r.suggestions = j.at("suggestions").get<std::vector<SuggestionRecord>>();
  r.labeled_order = j.at("labeled_order").get<std::vector<SampleId>>();
  return r;
}

/// Flat metrics table, one row per iteration.
inline std::string report_csv(const RunReport& r, std::size_t classes) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,labeled_count,mean_dice,std_dice";
  for (std::size_t k = 0; k < classes; ++k) os << ",dice_class" << k;
  os << ",hausdorff_mean,hausdorff_undefined_count,train_loss\n";
  for (const auto& row : r.rows) {
    os << row.iteration << ',' << row.labeled_count << ',' << row.mean_dice << ',' << row.std_dice;
    for (std::size_t k = 0; k < classes; ++k)
      os << ',' << (k < row.class_dice.size() ? row.class_dice[k] : 0.0);
    os << ',';
    if (row.hausdorff_mean) os << *row.hausdorff_mean;
    os << ',' << row.hausdorff_undefined << ',' << row.train_loss << '\n';
  }
  return os.str();
}

/// Test-split metrics of the current segmenter.
template <class T>
IterationMetrics evaluate_segmenter(const UNet<T>& seg, const Dataset& ds) {
  const std::vector<SampleId> test = ds.ids(Split::kTest);
  const std::size_t k = ds.spec.classes;
  IterationMetrics m;
  m.class_dice.assign(k, 0.0);
  if (test.empty()) return m;
  const std::vector<LabelMask> pred = predict_masks(seg, ds, test);
  std::vector<double> per_sample;
  double hsum = 0.0;
  std::size_t hcount = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const EvalRecord r = evaluate_mask(pred[i], oracle_annotation(ds, test[i]), k, test[i]);
    per_sample.push_back(r.mean_dice);
    for (std::size_t c = 0; c < k; ++c) m.class_dice[c] += r.dice[c];
    for (std::size_t c = k > 1 ? 1 : 0; c < k; ++c) {
      if (r.hausdorff[c]) {
        hsum += *r.hausdorff[c];
        ++hcount;
      } else {
        ++m.hausdorff_undefined;
      }
    }
  }
  const double nt = double(test.size());
  for (double& v : m.class_dice) v /= nt;
  for (double v : per_sample) m.mean_dice += v;
  m.mean_dice /= nt;
  for (double v : per_sample) m.std_dice += (v - m.mean_dice) * (v - m.mean_dice);
  m.std_dice = std::sqrt(m.std_dice / nt);
  if (hcount) m.hausdorff_mean = hsum / double(hcount);
  return m;
}

// ---------------------------------------------------------------------------
// Loop state and checkpoints

/// Everything needed to continue a run from an iteration boundary.
struct LoopState {
  LoopConfig config;
  std::size_t next_iteration = 0;
  UNet<float> seg;
  PoolState pool;
  RngStream select_rng;
  RngStream train_rng;
  RunReport report;
  std::string fingerprint;
};

/// Identifies the dataset and VAE a run was started against.
inline std::string run_fingerprint(const Dataset& ds, const Vae<float>& vae) {
  std::uint64_t h = detail::fnv1a(encode_vae(vae));
  h = detail::mix64(h ^ detail::fnv1a(json(ds.spec).dump()));
  for (const auto& s : ds.samples) {
    h = detail::mix64(h ^ detail::fnv1a(std::string_view(
                              reinterpret_cast<const char*>(s.pixels.data()), 4 * s.pixels.size())));
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

inline constexpr std::string_view kLoopMagic = "GSLP1";
inline constexpr int kLoopVersion = 1;

inline std::string encode_loop_state(const LoopState& st) {
  io::Container c;
  c.manifest["format"] = "GSLP1";
  c.manifest["version"] = kLoopVersion;
  c.manifest["config"] = st.config;
  c.manifest["next_iteration"] = st.next_iteration;
  c.manifest["labeled_order"] = st.pool.labeled_order;
  c.manifest["last_suggested"] = st.pool.last_suggested;
  c.manifest["select_rng"] = st.select_rng.serialize();
  c.manifest["train_rng"] = st.train_rng.serialize();
  c.manifest["report"] = report_json(st.report);
  c.manifest["fingerprint"] = st.fingerprint;
  c.manifest["tensors"] = json::array();
  append_unet(c, st.seg);
  json ann = json::array();
  for (SampleId id : st.pool.labeled_order) {
    const LabelMask& m = st.pool.annotations.at(id);
    ann.push_back({{"id", id}, {"height", m.height}, {"width", m.width},
                   {"offset", c.payload.size()}});
    c.payload.append(reinterpret_cast<const char*>(m.labels.data()), m.labels.size());
  }
  c.manifest["annotations"] = ann;
  return io::encode_container(kLoopMagic, c);
}

inline LoopState decode_loop_state(std::string_view bytes, const Dataset& ds) {
  const io::Container c = io::decode_container(kLoopMagic, bytes);
  try {
    if (c.manifest.at("version").get<int>() != kLoopVersion) {
      throw Error(ErrorCode::kVersionMismatch,
                  "loop checkpoint version " + c.manifest.at("version").dump() + ", expected " +
                      std::to_string(kLoopVersion));
    }
    std::uint64_t mask_bytes = 0;
    for (const json& a : c.manifest.at("annotations"))
      mask_bytes += a.at("height").get<std::uint64_t>() * a.at("width").get<std::uint64_t>();
    io::verify_payload_extent(c, mask_bytes);
    LoopState st;
    st.config = c.manifest.at("config").get<LoopConfig>();
    st.next_iteration = c.manifest.at("next_iteration").get<std::size_t>();
    st.seg = extract_unet<float>(c);
    st.select_rng = RngStream::deserialize(c.manifest.at("select_rng").get<std::string>());
    st.train_rng = RngStream::deserialize(c.manifest.at("train_rng").get<std::string>());
    st.report = report_from_json(c.manifest.at("report"));
    st.fingerprint = c.manifest.at("fingerprint").get<std::string>();
    st.pool.last_suggested = c.manifest.at("last_suggested").get<std::vector<SampleId>>();
    for (SampleId id : ds.ids(Split::kTrain)) st.pool.unlabeled.insert(id);
    const auto* base = reinterpret_cast<const unsigned char*>(c.payload.data());
    for (const json& a : c.manifest.at("annotations")) {
      LabelMask m(a.at("height").get<std::size_t>(), a.at("width").get<std::size_t>());
      const std::uint64_t off = a.at("offset").get<std::uint64_t>();
      if (off + m.labels.size() > c.payload.size()) {
        throw Error(ErrorCode::kTruncated, "annotation extends past end of payload");
      }
      std::copy(base + off, base + off + m.labels.size(), m.labels.begin());
      validate_mask(m, ds.spec.height, ds.spec.width, ds.spec.classes);
      st.pool.add(a.at("id").get<SampleId>(), std::move(m));
    }
    if (st.pool.labeled_order != c.manifest.at("labeled_order").get<std::vector<SampleId>>()) {
      throw Error(ErrorCode::kCorrupt, "annotation order does not match the labeled list");
    }
    return st;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorrupt, std::string("bad loop checkpoint: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kUnprocessable || e.code() == ErrorCode::kConflict ||
        e.code() == ErrorCode::kInvalidArgument) {
      throw Error(ErrorCode::kCorrupt, std::string("bad loop checkpoint: ") + e.what());
    }
    throw;
  }
}

inline void save_checkpoint(const LoopState& st, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  io::write_file(tmp, encode_loop_state(st));
  std::filesystem::rename(tmp, path);
}

inline LoopState load_checkpoint(const std::filesystem::path& path, const Dataset& ds) {
  return decode_loop_state(io::read_file(path), ds);
}

// ---------------------------------------------------------------------------
// Loop

/// Models shared by every run against one dataset.
struct LoopContext {
  const Dataset& ds;
  Vae<float> vae;
  Vae<double> vae64;
  LatentTable latents;  // train split
  std::string fingerprint;

  LoopContext(const Dataset& d, Vae<float> v)
      : ds(d), vae(std::move(v)), vae64(vae.template cast<double>()),
        latents(encode_pool(vae, d, d.ids(Split::kTrain))), fingerprint(run_fingerprint(d, vae)) {}
};

struct LoopHooks {
  /// Written after every completed iteration and when the loop aborts.
  std::optional<std::filesystem::path> checkpoint;
  /// Stop (without error) once this many iterations have completed.
  std::optional<std::size_t> stop_after;
  std::function<void(const LoopState&)> on_iteration;
  /// Sees each batch before it is sent to the annotator.
  std::function<void(const std::vector<SuggestionRecord>&)> on_suggestions;
};

inline LoopState start_loop(const LoopConfig& cfg, const LoopContext& ctx) {
  cfg.validate_against(ctx.ds);
  if (cfg.z_dim != ctx.vae.config.z_dim) {
    throw Error(ErrorCode::kInvalidArgument, "config z_dim " + std::to_string(cfg.z_dim) +
                                                 " does not match the VAE (" +
                                                 std::to_string(ctx.vae.config.z_dim) + ")");
  }
  LoopState st{cfg,
               0,
               init_unet<float>(cfg.segmenter, cfg.seed),
               {},
               RngStream(cfg.seed, "loop/select"),
               RngStream(cfg.seed, "loop/train"),
               {},
               ctx.fingerprint};
  for (SampleId id : ctx.ds.ids(Split::kTrain)) st.pool.unlabeled.insert(id);
  st.report.config = cfg;
  return st;
}

/// Chooses the next batch. Iteration 0 is always uniform-random.
inline std::vector<SuggestionRecord> select_batch(LoopState& st, const LoopContext& ctx) {
  const LoopConfig& cfg = st.config;
  const std::vector<SampleId> pool = st.pool.unlabeled_ids();
  for (SampleId id : pool) {
    if (!ctx.ds.is_train(id)) throw Error(ErrorCode::kInvalidArgument, "test id in the pool");
  }
  const std::size_t it = st.next_iteration;
  std::vector<SuggestionRecord> out;
  if (it == 0 || cfg.strategy == Strategy::kRandom) {
    for (SampleId id : random_strategy(pool, cfg.m, st.select_rng)) out.push_back({it, id, {}, {}});
  } else if (cfg.strategy == Strategy::kOracle) {
    for (const auto& r : oracle_strategy(st.seg, ctx.ds, pool, cfg.m))
      out.push_back({it, r.id, {}, r.mean_dice});
  } else {
    for (const auto& s : gradient_strategy(st.seg, ctx.vae64, ctx.ds, st.pool.annotations,
                                           st.pool.last_suggested, ctx.latents, pool, cfg.sampler))
      out.push_back({it, s.suggested, s, {}});
  }
  return out;
}

/// One Fig.-2 round: select, annotate, extend L', fine-tune, evaluate.
inline void run_iteration(LoopState& st, const LoopContext& ctx, Annotator& annotator,
                          const LoopHooks& hooks = {}) {
  const std::vector<SuggestionRecord> batch = select_batch(st, ctx);
  std::vector<SampleId> ids;
  for (const auto& r : batch) ids.push_back(r.id);
  if (hooks.on_suggestions) hooks.on_suggestions(batch);
  const std::vector<LabelMask> masks = annotator.annotate(st.next_iteration, ids);
  if (masks.size() != ids.size()) {
    throw Error(ErrorCode::kInvalidArgument, "annotator returned " + std::to_string(masks.size()) +
                                                 " masks for " + std::to_string(ids.size()) + " ids");
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    validate_mask(masks[i], ctx.ds.spec.height, ctx.ds.spec.width, ctx.ds.spec.classes);
    st.pool.add(ids[i], masks[i]);
  }
  st.pool.last_suggested = ids;
  const SegTrainConfig tc{st.config.epochs_per_iter, st.config.max_batch, st.config.learning_rate};
  const std::vector<double> losses =
      train_segmenter(st.seg, ctx.ds, st.pool.annotations, tc, st.train_rng);
  IterationMetrics row = evaluate_segmenter(st.seg, ctx.ds);
  row.iteration = st.next_iteration;
  row.labeled_count = st.pool.annotations.size();
  row.train_loss = losses.empty() ? 0.0 : losses.back();
  st.report.rows.push_back(row);
  st.report.loss_curve.push_back(losses);
  st.report.suggestions.insert(st.report.suggestions.end(), batch.begin(), batch.end());
  st.report.labeled_order = st.pool.labeled_order;
  ++st.next_iteration;
}

inline bool loop_finished(const LoopState& st) { return st.next_iteration > st.config.n; }

/// Continues `st` until all n + 1 iterations are done (or `hooks.stop_after`).
inline RunReport resume_loop(LoopState& st, const LoopContext& ctx, Annotator& annotator,
                             const LoopHooks& hooks = {}) {
  if (st.fingerprint != ctx.fingerprint) {
    throw Error(ErrorCode::kVersionMismatch,
                "checkpoint was written for a different dataset or VAE");
  }
  const auto t0 = std::chrono::steady_clock::now();
  while (!loop_finished(st)) {
    if (hooks.stop_after && st.next_iteration >= *hooks.stop_after) break;
    LoopState boundary = hooks.checkpoint ? st : LoopState{};
    try {
      run_iteration(st, ctx, annotator, hooks);
    } catch (...) {
      if (hooks.checkpoint) save_checkpoint(boundary, *hooks.checkpoint);
      throw;
    }
    if (hooks.checkpoint) save_checkpoint(st, *hooks.checkpoint);
    if (hooks.on_iteration) hooks.on_iteration(st);
  }
  st.report.wall_clock_seconds +=
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return st.report;
}

inline RunReport run_loop(const LoopConfig& cfg, const LoopContext& ctx, Annotator& annotator,
                          const LoopHooks& hooks = {}) {
  LoopState st = start_loop(cfg, ctx);
  return resume_loop(st, ctx, annotator, hooks);
}

// ---------------------------------------------------------------------------
// Experiments

struct StrategyRun {
  std::string name;
  LoopConfig config;
};

struct StrategySummary {
  std::string name;
  json config;
  std::vector<double> final_dice;  // per repetition
  double mean = 0.0;
  double std = 0.0;
  std::size_t fallback_count = 0;
};

struct PairedTest {
  std::string first;
  std::string second;
  bool identical = false;
  std::optional<WilcoxonResult> result;
};

struct Comparison {
  std::size_t repetitions = 0;
  std::uint64_t seed_base = 0;
  std::vector<StrategySummary> strategies;
  std::optional<PairedTest> top_two;
};

inline void to_json(json& j, const WilcoxonResult& w) {
  j = {{"statistic", w.statistic}, {"w_plus", w.w_plus}, {"w_minus", w.w_minus},
       {"p_value", w.p_value},     {"n", w.n},           {"exact", w.exact}};
}

inline void to_json(json& j, const Comparison& c) {
  j = {{"repetitions", c.repetitions}, {"seed_base", c.seed_base}};
  json rows = json::array();
  for (const auto& s : c.strategies) {
    rows.push_back({{"name", s.name},
                    {"config", s.config},
                    {"final_dice", s.final_dice},
                    {"mean_final_dice", s.mean},
                    {"std_final_dice", s.std},
                    {"fallback_count", s.fallback_count}});
  }
  j["strategies"] = rows;
  if (c.top_two) {
    json t = {{"first", c.top_two->first}, {"second", c.top_two->second}};
    if (c.top_two->identical) t["wilcoxon"] = "identical";
    else if (c.top_two->result) t["wilcoxon"] = *c.top_two->result;
    else t["wilcoxon"] = nullptr;
    j["top_two"] = t;
  }
}

/// Two-sided Wilcoxon test on paired final Dice, with all-zero differences reported
/// as identical.
inline PairedTest paired_test(const StrategySummary& a, const StrategySummary& b) {
  PairedTest t{a.name, b.name, false, std::nullopt};
  try {
    t.result = wilcoxon_signed_rank(a.final_dice, b.final_dice);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDegenerate) throw;
    t.identical = true;
  }
  return t;
}

/// Summary of `repetitions` runs of one configuration.
inline StrategySummary summarize_runs(
    const StrategyRun& run, std::size_t repetitions, std::uint64_t seed_base,
    const LoopContext& ctx,
    const std::function<void(const std::string&, std::size_t, const RunReport&)>& on_run = {}) {
  StrategySummary s{run.name, run.config, {}, 0.0, 0.0, 0};
  for (std::size_t r = 0; r < repetitions; ++r) {
    LoopConfig cfg = run.config;
    cfg.seed = seed_base + r;
    OracleAnnotator oracle(ctx.ds);
    const RunReport rep = run_loop(cfg, ctx, oracle);
    s.final_dice.push_back(rep.final_dice());
    for (const auto& rec : rep.suggestions) s.fallback_count += rec.guided && rec.guided->fallback;
    if (on_run) on_run(run.name, r, rep);
  }
  for (double v : s.final_dice) s.mean += v;
  s.mean /= double(repetitions);
  for (double v : s.final_dice) s.std += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(s.std / double(repetitions));
  return s;
}

/// Runs every configuration with seeds seed_base + r for r in [0, repetitions).
/// `on_run` sees each finished report.
inline Comparison compare_strategies(
    const std::vector<StrategyRun>& runs, std::size_t repetitions, std::uint64_t seed_base,
    const LoopContext& ctx,
    const std::function<void(const std::string&, std::size_t, const RunReport&)>& on_run = {}) {
  if (runs.size() < 2) throw Error(ErrorCode::kInvalidArgument, "compare needs >= 2 strategies");
  if (repetitions < 5) throw Error(ErrorCode::kInvalidArgument, "compare needs >= 5 repetitions");
  Comparison cmp{repetitions, seed_base, {}, std::nullopt};
  for (const auto& run : runs)
    cmp.strategies.push_back(summarize_runs(run, repetitions, seed_base, ctx, on_run));
  std::vector<std::size_t> order(cmp.strategies.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return cmp.strategies[a].mean > cmp.strategies[b].mean;
  });
  cmp.top_two = paired_test(cmp.strategies[order[0]], cmp.strategies[order[1]]);
  return cmp;
}

struct AblationPoint {
  std::size_t z_dim = 3;
  bool angular = true;
  std::string label() const {
    return "z" + std::to_string(z_dim) + (angular ? "_angular_on" : "_angular_off");
  }
};

/// cos_threshold -1 makes the cone the whole space.
inline LoopConfig apply_point(LoopConfig cfg, const AblationPoint& p) {
  cfg.z_dim = p.z_dim;
  if (!p.angular) cfg.sampler.cos_threshold = -1.0;
  return cfg;
}

struct AblationBlock {
  AblationPoint point;
  Comparison comparison;
};

inline void to_json(json& j, const AblationBlock& b) {
  j = {{"label", b.point.label()},
       {"z_dim", b.point.z_dim},
       {"angular", b.point.angular},
       {"comparison", b.comparison}};
}

struct Ablation {
  std::vector<AblationBlock> blocks;
};

inline void to_json(json& j, const Ablation& a) { j = {{"blocks", a.blocks}}; }

/// Each grid point runs the gradient strategy with its z_dim and angular setting and is
/// paired against one shared random baseline (random selection reads no latents).
/// `context_for` supplies the context holding a VAE of the requested z_dim.
inline Ablation ablate(
    const std::vector<AblationPoint>& grid, const LoopConfig& base, std::size_t repetitions,
    std::uint64_t seed_base, const std::function<const LoopContext&(std::size_t)>& context_for,
    const std::function<void(const std::string&, std::size_t, const RunReport&)>& on_run = {}) {
  if (grid.empty()) throw Error(ErrorCode::kInvalidArgument, "ablation grid is empty");
  if (repetitions < 5) throw Error(ErrorCode::kInvalidArgument, "ablation needs >= 5 repetitions");
  LoopConfig rnd = base;
  rnd.strategy = Strategy::kRandom;
  rnd.z_dim = grid.front().z_dim;
  const StrategySummary random =
      summarize_runs({"random", rnd}, repetitions, seed_base, context_for(rnd.z_dim), on_run);
  Ablation out;
  for (const auto& p : grid) {
    LoopConfig cfg = apply_point(base, p);
    cfg.strategy = Strategy::kGradient;
    Comparison cmp{repetitions, seed_base, {}, std::nullopt};
    cmp.strategies.push_back(
        summarize_runs({p.label(), cfg}, repetitions, seed_base, context_for(p.z_dim), on_run));
    cmp.strategies.push_back(random);
    const bool first_wins = cmp.strategies[0].mean >= cmp.strategies[1].mean;
    cmp.top_two = first_wins ? paired_test(cmp.strategies[0], cmp.strategies[1])
                             : paired_test(cmp.strategies[1], cmp.strategies[0]);
    out.blocks.push_back({p, std::move(cmp)});
  }
  return out;
}

}  // namespace gsa
