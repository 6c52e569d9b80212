#include <gtest/gtest.h>
#include <zlib.h>

#include <filesystem>
#include <thread>

#include "gsa/gateway/server.hpp"

namespace gsa::gateway {
namespace {

using namespace std::chrono_literals;

struct World {
  Dataset ds;
  std::unique_ptr<LoopContext> ctx;
};

const World& world() {
  static const World w = [] {
    DatasetSpec s;
    s.height = 16;
    s.width = 16;
    s.n_train = 40;
    s.n_test = 8;
    s.seed = 8;
    World out{generate_dataset(s), nullptr};
    VaeConfig vc;
    vc.height = 16;
    vc.width = 16;
    vc.channels = {4, 8};
    out.ctx = std::make_unique<LoopContext>(out.ds, init_vae<float>(vc, 2));
    return out;
  }();
  return w;
}

LoopConfig small_config() {
  LoopConfig c;
  c.m = 3;
  c.n = 2;
  c.epochs_per_iter = 1;
  c.annotator = "human";
  c.segmenter.height = 16;
  c.segmenter.width = 16;
  c.segmenter.filters = {4, 8};
  c.segmenter.bottleneck = 8;
  c.seed = 6;
  return c;
}

// Server on an ephemeral port around one session.
class Harness {
 public:
  explicit Harness(const LoopConfig& cfg, const std::string& tag)
      : path_(std::filesystem::temp_directory_path() / ("gsa_gw_" + tag + ".gslp")),
        session_(*world().ctx, start_loop(cfg, *world().ctx), path_) {
    install_routes(srv_, session_);
    port_ = srv_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { srv_.listen_after_bind(); });
    srv_.wait_until_ready();
    session_.start();
  }
  ~Harness() {
    session_.abort();
    srv_.stop();
    thread_.join();
    std::filesystem::remove(path_);
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(60, 0);
    return c;
  }
  Session& session() { return session_; }
  const std::filesystem::path& checkpoint() const { return path_; }

  bool await_round(std::size_t iteration) {
    return session_.wait_until(
        [&](Phase p, std::size_t it) {
          return (p == Phase::kAwaiting && it == iteration) || p == Phase::kFinished ||
                 p == Phase::kFailed;
        },
        60s);
  }

 private:
  std::filesystem::path path_;
  Session session_;
  httplib::Server srv_;
  int port_ = 0;
  std::thread thread_;
};

std::vector<SampleId> pending(httplib::Client& c) {
  auto r = c.Get("/api/session");
  return json::parse(r->body).at("pending_ids").get<std::vector<SampleId>>();
}

int post_mask(httplib::Client& c, SampleId id, const json& body) {
  return c.Post("/api/sample/" + std::to_string(id) + "/annotation", body.dump(),
                "application/json")
      ->status;
}

// Minimal independent PNG reader: signature, chunk CRCs, IHDR, inflate, filter 0 rows.
std::vector<std::uint8_t> decode_gray_png(const std::string& png, std::size_t& w, std::size_t& h) {
  EXPECT_EQ(png.substr(0, 8), std::string("\x89PNG\r\n\x1a\n", 8));
  auto be32 = [&](std::size_t o) {
    return (std::uint32_t(std::uint8_t(png[o])) << 24) | (std::uint32_t(std::uint8_t(png[o + 1])) << 16) |
           (std::uint32_t(std::uint8_t(png[o + 2])) << 8) | std::uint32_t(std::uint8_t(png[o + 3]));
  };
  std::string idat;
  for (std::size_t o = 8; o < png.size();) {
    const std::uint32_t len = be32(o);
    const std::string type = png.substr(o + 4, 4);
    const std::string data = png.substr(o + 8, len);
    const std::string typed = png.substr(o + 4, 4 + len);
    EXPECT_EQ(be32(o + 8 + len),
              ::crc32(0, reinterpret_cast<const Bytef*>(typed.data()), uInt(typed.size())));
    if (type == "IHDR") {
      w = be32(o + 8);
      h = be32(o + 12);
      EXPECT_EQ(data[8], 8);
      EXPECT_EQ(data[9], 0);
    }
    if (type == "IDAT") idat += data;
    o += 12 + len;
  }
  std::string raw(h * (w + 1), '\0');
  uLongf n = raw.size();
  EXPECT_EQ(uncompress(reinterpret_cast<Bytef*>(raw.data()), &n,
                       reinterpret_cast<const Bytef*>(idat.data()), idat.size()),
            Z_OK);
  std::vector<std::uint8_t> px;
  for (std::size_t r = 0; r < h; ++r) {
    EXPECT_EQ(raw[r * (w + 1)], 0);
    for (std::size_t c = 0; c < w; ++c) px.push_back(std::uint8_t(raw[r * (w + 1) + 1 + c]));
  }
  return px;
}

TEST(ParseMask, ValidatesShapeAndRange) {
  LabelMask m(2, 3);
  m.at(1, 2) = 2;
  EXPECT_EQ(parse_mask(mask_json(m), 2, 3, 3), m);
  EXPECT_THROW(parse_mask(json::parse("[[0,0,0]]"), 2, 3, 3), Error);
  EXPECT_THROW(parse_mask(json::parse("[[0,0,0],[0,0]]"), 2, 3, 3), Error);
  EXPECT_THROW(parse_mask(json::parse("[[0,0,0],[0,0,3]]"), 2, 3, 3), Error);
  EXPECT_THROW(parse_mask(json::parse("[[0,0,0],[0,0,-1]]"), 2, 3, 3), Error);
  EXPECT_THROW(parse_mask(json::parse("[[0,0,0],[0,0,0.5]]"), 2, 3, 3), Error);
  EXPECT_THROW(parse_mask(json::parse("{\"a\":1}"), 2, 3, 3), Error);
}

TEST(Png, DisplayBytesAreMinMaxScaled) {
  const auto b = png::display_bytes({-1.0f, 0.0f, 1.0f, 3.0f});
  EXPECT_EQ(b, (std::vector<std::uint8_t>{0, 64, 128, 255}));
  EXPECT_EQ(png::display_bytes({2.0f, 2.0f}), (std::vector<std::uint8_t>{0, 0}));
}

TEST(Png, RoundTripsThroughIndependentDecoder) {
  std::vector<std::uint8_t> px(7 * 5);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::uint8_t(i * 7);
  std::size_t w = 0, h = 0;
  EXPECT_EQ(decode_gray_png(png::encode_gray8(7, 5, px), w, h), px);
  EXPECT_EQ(w, 7u);
  EXPECT_EQ(h, 5u);
}

TEST(Server, SuggestionsAfterStartAreExactlyM) {
  Harness h(small_config(), "start");
  ASSERT_TRUE(h.await_round(0));
  auto c = h.client();
  const auto r = c.Get("/api/suggestions");
  ASSERT_EQ(r->status, 200);
  const json s = json::parse(r->body);
  EXPECT_EQ(s.size(), 3u);
  const json sess = json::parse(c.Get("/api/session")->body);
  EXPECT_EQ(sess["phase"], "awaiting");
  EXPECT_EQ(sess["iteration"], 0);
  EXPECT_EQ(sess["pending_ids"].size(), 3u);
}

TEST(Server, RejectsBadSubmissionsWithoutStateChange) {
  Harness h(small_config(), "bad");
  ASSERT_TRUE(h.await_round(0));
  auto c = h.client();
  const auto ids = pending(c);
  const SampleId id = ids[0];
  EXPECT_EQ(post_mask(c, id, mask_json(LabelMask(16, 15))), 422);
  LabelMask big(16, 16);
  big.at(3, 3) = 3;
  EXPECT_EQ(post_mask(c, id, mask_json(big)), 422);
  EXPECT_EQ(c.Post("/api/sample/" + std::to_string(id) + "/annotation", "[[0,", "application/json")
                ->status,
            422);
  EXPECT_EQ(pending(c), ids);

  SampleId other = 0;
  while (std::find(ids.begin(), ids.end(), other) != ids.end()) ++other;
  EXPECT_EQ(post_mask(c, other, mask_json(LabelMask(16, 16))), 409);
  EXPECT_EQ(post_mask(c, 9999, mask_json(LabelMask(16, 16))), 404);
  EXPECT_EQ(post_mask(c, 45, mask_json(LabelMask(16, 16))), 404);  // test split
  EXPECT_EQ(c.Get("/api/sample/" + std::to_string(other) + "/annotation")->status, 404);
  EXPECT_EQ(pending(c), ids);
}

TEST(Server, ResubmissionBeforeAdvanceReplaces) {
  Harness h(small_config(), "resubmit");
  ASSERT_TRUE(h.await_round(0));
  auto c = h.client();
  const SampleId id = pending(c)[0];
  LabelMask a(16, 16), b(16, 16, 1);
  EXPECT_EQ(post_mask(c, id, mask_json(a)), 200);
  EXPECT_EQ(post_mask(c, id, mask_json(b)), 200);
  const auto r = c.Get("/api/sample/" + std::to_string(id) + "/annotation");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(parse_mask(json::parse(r->body), 16, 16, 3), b);
  EXPECT_EQ(pending(c).size(), 2u);
}

TEST(Server, AllMasksAdvanceTheIteration) {
  Harness h(small_config(), "advance");
  ASSERT_TRUE(h.await_round(0));
  auto c = h.client();
  const auto first = pending(c);
  for (SampleId id : first) EXPECT_EQ(post_mask(c, id, mask_json(*world().ds.sample(id).mask)), 200);
  ASSERT_TRUE(h.await_round(1));
  const json sess = json::parse(c.Get("/api/session")->body);
  EXPECT_EQ(sess["iteration"], 1);
  EXPECT_EQ(sess["labeled_count"], 3);
  const auto second = pending(c);
  EXPECT_EQ(second.size(), 3u);
  for (SampleId id : second) EXPECT_EQ(std::count(first.begin(), first.end(), id), 0);
  EXPECT_EQ(post_mask(c, first[0], mask_json(LabelMask(16, 16))), 409);
  EXPECT_EQ(json::parse(c.Get("/api/metrics")->body)["metrics"].size(), 1u);
}

TEST(Server, ImageEndpointServesDisplayPng) {
  Harness h(small_config(), "image");
  auto c = h.client();
  const auto r = c.Get("/api/sample/5/image");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
  std::size_t w = 0, hh = 0;
  const auto px = decode_gray_png(r->body, w, hh);
  EXPECT_EQ(w, 16u);
  EXPECT_EQ(hh, 16u);
  const auto& v = world().ds.sample(5).pixels;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  for (std::size_t i = 0; i < v.size(); ++i)
    EXPECT_EQ(px[i], std::lround(255.0 * (double(v[i]) - *lo) / (double(*hi) - *lo)));
  EXPECT_EQ(c.Get("/api/sample/9999/image")->status, 404);
}

TEST(Server, ScriptedOracleClientMatchesDirectRun) {
  const LoopConfig cfg = small_config();
  OracleAnnotator oracle(world().ds);
  const RunReport direct = run_loop(cfg, *world().ctx, oracle);

  Harness h(cfg, "replay");
  auto c = h.client();
  for (std::size_t it = 0; it <= cfg.n; ++it) {
    ASSERT_TRUE(h.await_round(it));
    for (SampleId id : pending(c))
      ASSERT_EQ(post_mask(c, id, mask_json(*world().ds.sample(id).mask)), 200);
  }
  ASSERT_TRUE(h.session().wait_until([](Phase p, std::size_t) { return p == Phase::kFinished; }, 60s));
  EXPECT_EQ(json::parse(c.Get("/api/metrics")->body).dump(), report_json(direct).dump());
  EXPECT_EQ(json::parse(c.Get("/api/session")->body)["phase"], "finished");
}

TEST(Server, AbortWritesResumableCheckpoint) {
  const LoopConfig cfg = small_config();
  OracleAnnotator oracle(world().ds);
  const RunReport direct = run_loop(cfg, *world().ctx, oracle);

  Harness h(cfg, "abort");
  auto c = h.client();
  ASSERT_TRUE(h.await_round(0));
  for (SampleId id : pending(c)) post_mask(c, id, mask_json(*world().ds.sample(id).mask));
  ASSERT_TRUE(h.await_round(1));
  const auto r = c.Post("/api/control/abort");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body)["phase"], "aborted");
  LoopState st = load_checkpoint(h.checkpoint(), world().ds);
  EXPECT_EQ(st.next_iteration, 1u);
  EXPECT_EQ(report_json(resume_loop(st, *world().ctx, oracle)).dump(), report_json(direct).dump());
}

TEST(EnvPort, DefaultAndOverride) {
  unsetenv("GS_PORT");
  EXPECT_EQ(env_port(), 8080);
  setenv("GS_PORT", "9123", 1);
  EXPECT_EQ(env_port(), 9123);
  setenv("GS_PORT", "nope", 1);
  EXPECT_THROW(env_port(), Error);
  unsetenv("GS_PORT");
}

}  // namespace
}  // namespace gsa::gateway
