#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "gsa/orchestrator.hpp"

namespace gsa::gateway {

using nlohmann::json;

enum class Phase { kTraining, kAwaiting, kFinished, kAborted, kFailed };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::kTraining: return "training";
    case Phase::kAwaiting: return "awaiting";
    case Phase::kFinished: return "finished";
    case Phase::kAborted: return "aborted";
    case Phase::kFailed: return "failed";
  }
  return "unknown";
}

/// Parses a row-major 2-D integer array into a mask; kUnprocessable on any violation.
inline LabelMask parse_mask(const json& j, std::size_t h, std::size_t w, std::size_t classes) {
  if (!j.is_array() || j.size() != h) {
    throw Error(ErrorCode::kUnprocessable,
                "annotation must be an array of " + std::to_string(h) + " rows");
  }
  LabelMask m(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    const json& row = j[r];
    if (!row.is_array() || row.size() != w) {
      throw Error(ErrorCode::kUnprocessable, "row " + std::to_string(r) + " must have " +
                                                 std::to_string(w) + " labels");
    }
    for (std::size_t c = 0; c < w; ++c) {
      const json& v = row[c];
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0 ||
          v.get<std::int64_t>() >= static_cast<std::int64_t>(classes)) {
        throw Error(ErrorCode::kUnprocessable, "label at (" + std::to_string(r) + ", " +
                                                   std::to_string(c) + ") not in [0, " +
                                                   std::to_string(classes) + ")");
      }
      m.at(r, c) = static_cast<std::uint8_t>(v.get<int>());
    }
  }
  return m;
}

inline json mask_json(const LabelMask& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.height; ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < m.width; ++c) row.push_back(int(m.at(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

/// One human-in-the-loop run. The loop executes on a background thread; its annotation
/// step blocks until every pending id has a submitted mask.
/// Invariant: pending_ and received_ partition the ids of the current batch.
class Session {
 public:
  Session(const LoopContext& ctx, LoopState state, std::filesystem::path checkpoint)
      : ctx_(ctx), state_(std::move(state)), checkpoint_(std::move(checkpoint)) {
    report_ = state_.report;
    labeled_ = state_.pool.annotations;
    iteration_ = state_.next_iteration;
    phase_ = loop_finished(state_) ? Phase::kFinished : Phase::kTraining;
  }

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  ~Session() {
    {
      std::lock_guard lock(mu_);
      abort_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  void start() {
    if (worker_.joinable()) throw Error(ErrorCode::kConflict, "session already started");
    worker_ = std::thread([this] { run(); });
  }

  json session_json() const {
    std::lock_guard lock(mu_);
    json j = {{"iteration", iteration_},
              {"labeled_count", labeled_.size()},
              {"pending_ids", std::vector<SampleId>(pending_.begin(), pending_.end())},
              {"phase", to_string(phase_)},
              {"m", state_config().m},
              {"n", state_config().n}};
    if (!error_.empty()) j["error"] = error_;
    return j;
  }

  json suggestions_json() const {
    std::lock_guard lock(mu_);
    json out = json::array();
    for (const auto& r : batch_) {
      json s = {{"id", r.id}, {"distance", nullptr}, {"cosine", nullptr}, {"fallback", false}};
      if (r.guided) {
        s["seed"] = r.guided->seed;
        s["distance"] = r.guided->distance;
        s["cosine"] = opt_json(r.guided->cosine);
        s["fallback"] = r.guided->fallback;
      }
      s["pending"] = pending_.count(r.id) != 0;
      out.push_back(std::move(s));
    }
    return out;
  }

  json metrics_json() const {
    std::lock_guard lock(mu_);
    return report_json(report_);
  }

  /// Throws kNotFound for ids outside the train split.
  const ImageSample& train_sample(SampleId id) const {
    if (id >= ctx_.ds.samples.size() || !ctx_.ds.is_train(id)) {
      throw Error(ErrorCode::kNotFound, "no training sample " + std::to_string(id));
    }
    return ctx_.ds.sample(id);
  }

  /// A mask the session holds (committed or submitted this round); never ground truth.
  LabelMask annotation(SampleId id) const {
    train_sample(id);
    std::lock_guard lock(mu_);
    if (auto it = received_.find(id); it != received_.end()) return it->second;
    if (auto it = labeled_.find(id); it != labeled_.end()) return it->second;
    throw Error(ErrorCode::kNotFound, "no annotation stored for sample " + std::to_string(id));
  }

  const Dataset& dataset() const { return ctx_.ds; }

  /// Throws kNotFound or kConflict unless `id` can take a submission now.
  void check_submittable(SampleId id) const {
    train_sample(id);
    std::lock_guard lock(mu_);
    require_in_round(id);
  }

  /// Stores a mask for a pending id, or replaces one submitted in the current round.
  json submit(SampleId id, const json& payload) {
    train_sample(id);
    const DatasetSpec& spec = ctx_.ds.spec;
    std::unique_lock lock(mu_);
    require_in_round(id);
    LabelMask m = parse_mask(payload, spec.height, spec.width, spec.classes);
    received_[id] = std::move(m);
    pending_.erase(id);
    const json ack = {{"id", id},
                      {"iteration", iteration_},
                      {"remaining", pending_.size()}};
    lock.unlock();
    cv_.notify_all();
    return ack;
  }

  /// Stops the loop at its next annotation step or iteration boundary and writes the
  /// checkpoint. Blocks until the worker exits.
  json abort() {
    {
      std::lock_guard lock(mu_);
      abort_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
    std::lock_guard lock(mu_);
    return {{"phase", to_string(phase_)}, {"checkpoint", checkpoint_.string()}};
  }

  /// Test helper: waits until `pred(phase, iteration)` holds or the timeout passes.
  template <class Pred>
  bool wait_until(Pred pred, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, timeout, [&] { return pred(phase_, iteration_); });
  }

  RunReport report() const {
    std::lock_guard lock(mu_);
    return report_;
  }

 private:
  class HttpAnnotator : public Annotator {
   public:
    explicit HttpAnnotator(Session& s) : s_(s) {}
    std::vector<LabelMask> annotate(std::size_t iteration,
                                    const std::vector<SampleId>& ids) override {
      std::unique_lock lock(s_.mu_);
      s_.iteration_ = iteration;
      s_.pending_ = std::set<SampleId>(ids.begin(), ids.end());
      s_.received_.clear();
      s_.phase_ = Phase::kAwaiting;
      s_.cv_.notify_all();
      s_.cv_.wait(lock, [&] { return s_.abort_ || s_.pending_.empty(); });
      if (s_.abort_) throw Error(ErrorCode::kAborted, "session aborted");
      std::vector<LabelMask> out;
      for (SampleId id : ids) out.push_back(s_.received_.at(id));
      s_.phase_ = Phase::kTraining;
      s_.cv_.notify_all();
      return out;
    }

   private:
    Session& s_;
  };

  const LoopConfig& state_config() const { return state_.config; }

  void require_in_round(SampleId id) const {
    if (phase_ != Phase::kAwaiting || !(pending_.count(id) || received_.count(id))) {
      throw Error(ErrorCode::kConflict, "sample " + std::to_string(id) +
                                            " is not pending in the current iteration");
    }
  }

  void run() {
    HttpAnnotator annotator(*this);
    LoopHooks hooks;
    hooks.checkpoint = checkpoint_;
    hooks.on_suggestions = [this](const std::vector<SuggestionRecord>& batch) {
      std::lock_guard lock(mu_);
      batch_ = batch;
    };
    hooks.on_iteration = [this](const LoopState& st) {
      {
        std::lock_guard lock(mu_);
        report_ = st.report;
        labeled_ = st.pool.annotations;
        received_.clear();
        iteration_ = st.next_iteration;
        if (abort_) throw Error(ErrorCode::kAborted, "session aborted");
      }
      cv_.notify_all();
    };
    Phase end = Phase::kFinished;
    std::string err;
    try {
      resume_loop(state_, ctx_, annotator, hooks);
    } catch (const Error& e) {
      end = e.code() == ErrorCode::kAborted ? Phase::kAborted : Phase::kFailed;
      if (end == Phase::kFailed) err = std::string(gsa::to_string(e.code())) + ": " + e.what();
    } catch (const std::exception& e) {
      end = Phase::kFailed;
      err = e.what();
    }
    {
      std::lock_guard lock(mu_);
      phase_ = end;
      error_ = err;
      pending_.clear();
    }
    cv_.notify_all();
  }

  const LoopContext& ctx_;
  LoopState state_;  // owned by the worker once started
  std::filesystem::path checkpoint_;

  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  Phase phase_ = Phase::kTraining;
  std::size_t iteration_ = 0;
  std::set<SampleId> pending_;
  std::map<SampleId, LabelMask> received_;
  LabeledSet labeled_;
  std::vector<SuggestionRecord> batch_;
  RunReport report_;
  std::string error_;
  bool abort_ = false;
  std::thread worker_;
};

}  // namespace gsa::gateway
