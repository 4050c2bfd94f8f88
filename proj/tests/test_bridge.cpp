#include <cstdio>
#include <string>
#include <sys/wait.h>

#include "doctest.h"
#include "json.hpp"
#include "npepfn/bridge.hpp"
#include "npepfn/reference_backend.hpp"
#include "npepfn/rng.hpp"

using namespace npepfn;
using json = nlohmann::json;

namespace {

const std::string kServer = NPEPFN_REFSERVER;

ContextSet line_context(std::size_t m, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0);
  ContextSet ctx{Matrix(m, 2), std::vector<double>(m)};
  for (std::size_t i = 0; i < m; ++i) {
    ctx.features(i, 0) = standard_normal(rng);
    ctx.features(i, 1) = uniform01(rng);
    ctx.targets[i] = 2.0 * ctx.features(i, 0) - ctx.features(i, 1) + 0.3 * standard_normal(rng);
  }
  return ctx;
}

ClassContext class_context(std::size_t m, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0);
  ClassContext ctx{Matrix(m, 2), std::vector<int>(m)};
  for (std::size_t i = 0; i < m; ++i) {
    ctx.features(i, 0) = standard_normal(rng);
    ctx.features(i, 1) = standard_normal(rng);
    ctx.labels[i] = ctx.features(i, 0) + 0.5 * standard_normal(rng) > 0.0 ? 1 : 0;
  }
  return ctx;
}

/// Records the context it receives and answers with a fixed predictive.
class RecordingBackend final : public InContextBackend {
 public:
  BackendCapabilities capabilities() const override { return {}; }
  std::string describe() const override { return "recording"; }
  std::vector<PredictiveDistribution1D> regress(const ContextSet& context, const Matrix& queries,
                                                std::uint64_t) override {
    seen = context;
    return std::vector<PredictiveDistribution1D>(
        queries.rows(), PredictiveDistribution1D({0.0, 1.0}, {0.0, 0.0}));
  }
  ClassProbabilities classify(const ClassContext&, const Matrix&, std::uint64_t) override { return {}; }
  ContextSet seen;
};

/// Runs a shell command, returning its stdout and exit code.
std::pair<std::string, int> run(const std::string& command) {
  FILE* pipe = ::popen(command.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe) != nullptr) out += buf;
  const int status = ::pclose(pipe);
  return {out, WIFEXITED(status) ? WEXITSTATUS(status) : -1};
}

}  // namespace

TEST_CASE("handshake reports version and capabilities") {
  auto bridge = BridgeBackend::spawn(kServer);
  CHECK(bridge->peer_version() == "1");
  CHECK(bridge->capabilities().max_context == 10000);
  CHECK(bridge->capabilities().max_features == 500);
  CHECK(bridge->peer_backend().find("reference") != std::string::npos);
  bridge->close();
}

TEST_CASE("wrong peer version is a mismatch error") {
  try {
    auto bridge = BridgeBackend::spawn(kServer + " --protocol-version 2");
    FAIL("handshake accepted version 2");
  } catch (const BridgeError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
}

TEST_CASE("regress payloads cross the wire bit-exactly") {
  RecordingBackend recorder;
  ProtocolServer server(recorder);
  const ContextSet ctx{Matrix{{0.1, 1.0 / 3.0}, {-2.5e-300, 1e300}, {std::nextafter(1.0, 2.0), -0.0}, {7.0, 5e-324}},
                       {1.0 / 7.0, -0.2, 123456789.123456789, 2.2250738585072014e-308}};
  json req = {{"id", 3},
              {"op", "regress"},
              {"payload", {{"features", json::array()}, {"targets", ctx.targets}, {"queries", {{0.0, 0.0}}}}}};
  for (std::size_t i = 0; i < 4; ++i) req["payload"]["features"].push_back({ctx.features(i, 0), ctx.features(i, 1)});
  const json resp = json::parse(server.handle_line(req.dump()));
  CHECK(resp["status"] == "ok");
  CHECK(resp["id"] == 3);
  CHECK(recorder.seen.features == ctx.features);
  CHECK(recorder.seen.targets == ctx.targets);
}

TEST_CASE("bridge results are identical to the direct reference backend") {
  ReferenceBackend direct;
  auto bridge = BridgeBackend::spawn(kServer);
  const auto ctx = line_context(300, 1);
  const Matrix queries{{0.0, 0.5}, {1.0, 0.2}, {-1.5, 0.9}};
  const auto a = direct.regress(ctx, queries, 7);
  const auto b = bridge->regress(ctx, queries, 7);
  REQUIRE(a.size() == b.size());
  for (std::size_t q = 0; q < a.size(); ++q) {
    CHECK(a[q].grid() == b[q].grid());
    CHECK(a[q].log_density_values() == b[q].log_density_values());
  }
  const auto cctx = class_context(300, 2);
  const auto ca = direct.classify(cctx, queries, 0);
  const auto cb = bridge->classify(cctx, queries, 0);
  CHECK(ca.classes == cb.classes);
  CHECK(ca.probabilities == cb.probabilities);
}

TEST_CASE("bridge regress on a y = x context predicts about 0.5 at 0.5") {
  auto bridge = BridgeBackend::spawn(kServer);
  ContextSet ctx{Matrix(100, 1), std::vector<double>(100)};
  for (std::size_t i = 0; i < 100; ++i) {
    ctx.features(i, 0) = static_cast<double>(i) / 99.0;
    ctx.targets[i] = ctx.features(i, 0);
  }
  const auto pred = bridge->regress(ctx, Matrix{{0.5}}, 0);
  REQUIRE(pred.size() == 1);
  CHECK(pred[0].mean() >= 0.3);
  CHECK(pred[0].mean() <= 0.7);
  CHECK(pred[0].total_mass() == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("responses answered out of order are matched by id") {
  ReferenceBackend direct;
  auto bridge = BridgeBackend::spawn(kServer + " --reverse-batch 4");
  std::vector<ContextSet> contexts;
  std::vector<std::uint64_t> ids;
  const Matrix queries{{0.2, 0.4}};
  for (std::uint64_t s = 0; s < 4; ++s) {
    contexts.push_back(line_context(80 + 10 * s, 10 + s));
    ids.push_back(bridge->submit_regress(contexts.back(), queries, s));
  }
  // The server answers id 4 first; awaiting in submission order must still pair correctly.
  for (std::size_t k = 0; k < 4; ++k) {
    const auto got = bridge->await_regress(ids[k]);
    const auto want = direct.regress(contexts[k], queries, k);
    REQUIRE(got.size() == 1);
    CHECK(got[0].log_density_values() == want[0].log_density_values());
  }
}

TEST_CASE("mismatched widths come back as a structured shape error") {
  auto bridge = BridgeBackend::spawn(kServer);
  const auto ctx = line_context(50, 3);
  try {
    (void)bridge->regress(ctx, Matrix{{0.0, 1.0, 2.0}}, 0);
    FAIL("width mismatch accepted");
  } catch (const RemoteError& e) {
    CHECK(e.kind() == "shape");
  }
  // The connection stays usable.
  CHECK(bridge->regress(ctx, Matrix{{0.0, 1.0}}, 0).size() == 1);

  ReferenceBackend direct;
  ProtocolServer server(direct);
  const json bad = json::parse(server.handle_line(
      R"({"id": 9, "op": "regress", "payload": {"features": [[1, 2]], "targets": [1], "queries": [[1]]}})"));
  CHECK(bad["status"] == "error");
  CHECK(bad["id"] == 9);
  CHECK(bad["payload"]["kind"] == "shape");
  const json unknown = json::parse(server.handle_line(R"({"id": 10, "op": "train"})"));
  CHECK(unknown["payload"]["kind"] == "protocol");
  const json garbage = json::parse(server.handle_line("not json"));
  CHECK(garbage["status"] == "error");
}

TEST_CASE("tcp transport serves the same protocol") {
  FILE* pipe = ::popen((kServer + " --port 0 2>&1").c_str(), "r");
  REQUIRE(pipe != nullptr);
  char line[256] = {};
  REQUIRE(std::fgets(line, sizeof line, pipe) != nullptr);
  const std::string banner = line;
  const auto colon = banner.rfind(':');
  REQUIRE(colon != std::string::npos);
  const auto port = static_cast<std::uint16_t>(std::stoi(banner.substr(colon + 1)));
  {
    auto bridge = make_backend("tcp:127.0.0.1:" + std::to_string(port));
    ReferenceBackend direct;
    const auto ctx = line_context(120, 4);
    const Matrix queries{{0.3, 0.3}};
    CHECK(bridge->regress(ctx, queries, 1)[0].log_density_values() ==
          direct.regress(ctx, queries, 1)[0].log_density_values());
  }
  // Closing the client sends shutdown; the server exits cleanly.
  const int status = ::pclose(pipe);
  CHECK(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
}

TEST_CASE("shutdown request exits with status 0") {
  const auto [out, code] =
      run("printf '%s\\n' '{\"id\":1,\"op\":\"handshake\"}' '{\"id\":2,\"op\":\"shutdown\"}' | " + kServer);
  CHECK(code == 0);
  const auto nl = out.find('\n');
  REQUIRE(nl != std::string::npos);
  const json hello = json::parse(out.substr(0, nl));
  const json bye = json::parse(out.substr(nl + 1));
  CHECK(hello["payload"]["version"] == "1");
  CHECK(bye["id"] == 2);
  CHECK(bye["status"] == "ok");
}

TEST_CASE("backend spec parsing") {
  CHECK(make_backend("reference")->describe().find("reference") != std::string::npos);
  CHECK_THROWS_AS(make_backend("gpu"), Error);
  CHECK_THROWS_AS(make_backend("bridge:/nonexistent/server-binary 2>/dev/null"), BridgeError);
}
