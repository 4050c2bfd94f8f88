#pragma once

// Protocol v1: one JSON document per line.
//   request  {"id": n, "op": "handshake"|"regress"|"classify"|"shutdown", "payload": {...}}
//   response {"id": n, "status": "ok"|"error", "payload": {...}, "error": "..."}
// Matrices are row-major nested arrays. Doubles are written in shortest
// round-trip form, so values cross the wire bit-exactly.

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>

#include "npepfn/backend.hpp"
#include "npepfn/errors.hpp"

namespace npepfn {

inline constexpr std::string_view kProtocolVersion = "1";
inline constexpr std::chrono::milliseconds kDefaultCallTimeout{120000};

/// Transport failure: timeout, closed pipe, malformed response, version mismatch.
class BridgeError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// The peer answered with status "error". `kind` is "shape", "backend" or "protocol".
class RemoteError : public BackendError {
 public:
  RemoteError(std::string kind, const std::string& message)
      : BackendError("remote " + kind + " error: " + message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

// ---- server side ----------------------------------------------------------------

struct ProtocolServerOptions {
  /// Version announced in the handshake.
  std::string protocol_version{kProtocolVersion};
  /// When > 1, regress/classify requests are buffered in groups of this size and
  /// answered in reverse order (exercises client-side reassociation).
  std::size_t reverse_batch = 1;
};

/// Answers protocol requests with any InContextBackend.
class ProtocolServer {
 public:
  explicit ProtocolServer(InContextBackend& backend, ProtocolServerOptions options = {});

  /// One request line in, one response line out (no trailing newline).
  /// Sets *shutdown when the request was a shutdown.
  std::string handle_line(const std::string& line, bool* shutdown = nullptr);

  /// Serves requests from in_fd, writing to out_fd, until EOF or shutdown.
  /// Returns true when stopped by a shutdown request.
  bool serve_fd(int in_fd, int out_fd);

  const ProtocolServerOptions& options() const noexcept { return options_; }

 private:
  InContextBackend* backend_;
  ProtocolServerOptions options_;
};

/// Listening TCP socket on host:port (port 0 picks a free port).
class TcpListener {
 public:
  TcpListener(const std::string& host, std::uint16_t port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  std::uint16_t port() const noexcept { return port_; }
  /// Blocks for one connection; returns its file descriptor.
  int accept_one();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

/// Accepts connections one at a time, serving each until disconnect; returns
/// after a shutdown request.
void serve_tcp(ProtocolServer& server, TcpListener& listener);

// ---- client side ----------------------------------------------------------------

struct BridgeOptions {
  std::chrono::milliseconds timeout = kDefaultCallTimeout;
};

class FdChannel;

/// InContextBackend backed by a protocol peer: a child process speaking on
/// its stdio, or a TCP endpoint. Calls are serialised on one connection;
/// submit/await allow pipelining, with responses matched by id.
class BridgeBackend final : public InContextBackend {
 public:
  /// Runs `command` through /bin/sh -c and handshakes over its stdin/stdout.
  static std::unique_ptr<BridgeBackend> spawn(const std::string& command, BridgeOptions options = {});
  static std::unique_ptr<BridgeBackend> connect(const std::string& host, std::uint16_t port,
                                                BridgeOptions options = {});
  /// "bridge:<command>" or "tcp:<host>:<port>".
  static std::unique_ptr<BridgeBackend> from_spec(std::string_view spec, BridgeOptions options = {});

  ~BridgeBackend() override;
  BridgeBackend(const BridgeBackend&) = delete;
  BridgeBackend& operator=(const BridgeBackend&) = delete;

  BackendCapabilities capabilities() const override { return capabilities_; }
  std::string describe() const override { return description_; }
  std::vector<PredictiveDistribution1D> regress(const ContextSet& context, const Matrix& queries,
                                                std::uint64_t seed) override;
  ClassProbabilities classify(const ClassContext& context, const Matrix& queries, std::uint64_t seed) override;

  std::uint64_t submit_regress(const ContextSet& context, const Matrix& queries, std::uint64_t seed);
  std::uint64_t submit_classify(const ClassContext& context, const Matrix& queries, std::uint64_t seed);
  std::vector<PredictiveDistribution1D> await_regress(std::uint64_t id);
  ClassProbabilities await_classify(std::uint64_t id);

  const std::string& peer_version() const noexcept { return peer_version_; }
  const std::string& peer_backend() const noexcept { return peer_backend_; }

  /// Sends shutdown and waits for the peer; also done by the destructor.
  void close();

 private:
  BridgeBackend(std::unique_ptr<FdChannel> channel, std::string description, BridgeOptions options);
  struct State;
  std::uint64_t send(std::string_view op, const std::string& payload_json);
  void handshake();

  std::unique_ptr<FdChannel> channel_;
  std::string description_;
  BridgeOptions options_;
  BackendCapabilities capabilities_{};
  std::string peer_version_;
  std::string peer_backend_;
  std::mutex mutex_;
  std::uint64_t next_id_ = 1;
  std::unique_ptr<State> state_;
  bool closed_ = false;
};

/// Parses "--backend" values: "reference", "bridge:<command>" or "tcp:<host>:<port>".
std::unique_ptr<InContextBackend> make_backend(std::string_view spec, BridgeOptions options = {});

}  // namespace npepfn
