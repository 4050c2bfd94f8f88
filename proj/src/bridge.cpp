#include "npepfn/bridge.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <map>
#include <thread>
#include <vector>

#include "json.hpp"
#include "npepfn/reference_backend.hpp"

namespace npepfn {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return rows;
}

Matrix matrix_from_json(const json& j, std::size_t empty_cols) {
  if (!j.is_array()) throw ShapeError("matrix must be an array of rows");
  if (j.empty()) return Matrix(0, empty_cols);
  const std::size_t cols = j.front().size();
  Matrix m(j.size(), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& row = j[i];
    if (!row.is_array() || row.size() != cols) throw ShapeError("ragged matrix: row " + std::to_string(i));
    for (std::size_t c = 0; c < cols; ++c) m(i, c) = row[c].get<double>();
  }
  return m;
}

json error_response(const json& id, std::string_view kind, const std::string& message) {
  return json{{"id", id}, {"status", "error"}, {"error", message}, {"payload", {{"kind", kind}}}};
}

bool write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN) {
        pollfd p{fd, POLLOUT, 0};
        ::poll(&p, 1, -1);
        continue;
      }
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

/// Blocking line reader for the server side.
class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}
  bool next(std::string& line) {
    for (;;) {
      const auto pos = buffer_.find('\n');
      if (pos != std::string::npos) {
        line = buffer_.substr(0, pos);
        buffer_.erase(0, pos + 1);
        return true;
      }
      char chunk[65536];
      const ssize_t n = ::read(fd_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        if (buffer_.empty()) return false;
        line.swap(buffer_);
        buffer_.clear();
        return true;
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_;
  std::string buffer_;
};

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

}  // namespace

// ---- server ------------------------------------------------------------------------

ProtocolServer::ProtocolServer(InContextBackend& backend, ProtocolServerOptions options)
    : backend_(&backend), options_(std::move(options)) {}

std::string ProtocolServer::handle_line(const std::string& line, bool* shutdown) {
  if (shutdown != nullptr) *shutdown = false;
  json id = nullptr;
  try {
    const json req = json::parse(line);
    if (!req.is_object()) return error_response(id, "protocol", "request must be a JSON object").dump();
    if (req.contains("id")) id = req["id"];
    if (!req.contains("op") || !req["op"].is_string())
      return error_response(id, "protocol", "request has no op").dump();
    const std::string op = req["op"];
    const json payload = req.value("payload", json::object());
    json out = {{"id", id}, {"status", "ok"}};
    if (op == "handshake") {
      const auto caps = backend_->capabilities();
      out["payload"] = {{"version", options_.protocol_version},
                        {"capabilities", {{"max_context", caps.max_context}, {"max_features", caps.max_features}}},
                        {"backend", backend_->describe()}};
    } else if (op == "shutdown") {
      out["payload"] = json::object();
      if (shutdown != nullptr) *shutdown = true;
    } else if (op == "regress") {
      ContextSet ctx;
      ctx.features = matrix_from_json(payload.at("features"), 0);
      ctx.targets = payload.at("targets").get<std::vector<double>>();
      const Matrix queries = matrix_from_json(payload.at("queries"), ctx.features.cols());
      const auto seed = payload.value("seed", std::uint64_t{0});
      const auto num_samples = payload.value("num_samples", std::size_t{0});
      const auto preds = backend_->regress(ctx, queries, seed);
      json dists = json::array();
      for (std::size_t q = 0; q < preds.size(); ++q) {
        json d = {{"grid", preds[q].grid()}, {"log_density", preds[q].log_density_values()}};
        if (num_samples > 0) {
          Rng rng = make_rng(seed, q);
          std::vector<double> draws(num_samples);
          for (auto& v : draws) v = preds[q].sample(rng);
          d["samples"] = draws;
        }
        dists.push_back(std::move(d));
      }
      out["payload"] = {{"distributions", std::move(dists)}};
    } else if (op == "classify") {
      ClassContext ctx;
      ctx.features = matrix_from_json(payload.at("features"), 0);
      ctx.labels = payload.at("labels").get<std::vector<int>>();
      const Matrix queries = matrix_from_json(payload.at("queries"), ctx.features.cols());
      const auto probs = backend_->classify(ctx, queries, payload.value("seed", std::uint64_t{0}));
      out["payload"] = {{"classes", probs.classes}, {"probabilities", matrix_to_json(probs.probabilities)}};
    } else {
      return error_response(id, "protocol", "unknown op '" + op + "'").dump();
    }
    return out.dump();
  } catch (const json::exception& e) {
    return error_response(id, "protocol", e.what()).dump();
  } catch (const ShapeError& e) {
    return error_response(id, "shape", e.what()).dump();
  } catch (const std::exception& e) {
    return error_response(id, "backend", e.what()).dump();
  }
}

bool ProtocolServer::serve_fd(int in_fd, int out_fd) {
  ignore_sigpipe();
  LineReader reader(in_fd);
  std::vector<std::string> held;
  auto respond = [&](const std::string& line, bool* stop) {
    return write_all(out_fd, handle_line(line, stop) + "\n");
  };
  auto flush_held = [&] {
    bool ok = true;
    for (auto it = held.rbegin(); it != held.rend() && ok; ++it) ok = respond(*it, nullptr);
    held.clear();
    return ok;
  };
  std::string line;
  while (reader.next(line)) {
    if (line.empty()) continue;
    bool deferrable = false;
    if (options_.reverse_batch > 1) {
      const json req = json::parse(line, nullptr, false);
      if (!req.is_discarded() && req.is_object() && req.contains("op")) {
        const auto& op = req["op"];
        deferrable = op == "regress" || op == "classify";
      }
    }
    if (deferrable) {
      held.push_back(line);
      if (held.size() >= options_.reverse_batch && !flush_held()) return false;
      continue;
    }
    if (!flush_held()) return false;
    bool stop = false;
    if (!respond(line, &stop)) return false;
    if (stop) return true;
  }
  flush_held();
  return false;
}

TcpListener::TcpListener(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port_text = std::to_string(port);
  if (::getaddrinfo(host.empty() ? nullptr : host.c_str(), port_text.c_str(), &hints, &res) != 0 || res == nullptr)
    throw BridgeError("cannot resolve listen address '" + host + "'");
  fd_ = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
  if (fd_ < 0) {
    ::freeaddrinfo(res);
    throw BridgeError(errno_text("socket"));
  }
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  const int rc = ::bind(fd_, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0 || ::listen(fd_, 4) != 0) {
    const std::string msg = errno_text("bind/listen");
    ::close(fd_);
    throw BridgeError(msg);
  }
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

int TcpListener::accept_one() {
  for (;;) {
    const int c = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (c >= 0) return c;
    if (errno != EINTR) throw BridgeError(errno_text("accept"));
  }
}

void serve_tcp(ProtocolServer& server, TcpListener& listener) {
  for (;;) {
    const int fd = listener.accept_one();
    const bool stop = server.serve_fd(fd, fd);
    ::close(fd);
    if (stop) return;
  }
}

// ---- client ------------------------------------------------------------------------

/// Line-oriented duplex channel over a pipe pair or a socket, with deadlines.
/// Writes also drain incoming data so a pipelining peer can never deadlock us.
class FdChannel {
 public:
  FdChannel(int read_fd, int write_fd, pid_t child) : read_fd_(read_fd), write_fd_(write_fd), child_(child) {
    ::fcntl(write_fd_, F_SETFL, ::fcntl(write_fd_, F_GETFL) | O_NONBLOCK);
  }
  ~FdChannel() {
    close_write();
    if (read_fd_ >= 0 && read_fd_ != write_fd_) ::close(read_fd_);
    reap(std::chrono::milliseconds(5000));
  }

  void write_line(const std::string& line) {
    std::string_view data = line;
    std::string with_newline;
    if (line.empty() || line.back() != '\n') {
      with_newline = line + "\n";
      data = with_newline;
    }
    while (!data.empty()) {
      pollfd fds[2] = {{write_fd_, POLLOUT, 0}, {read_fd_, POLLIN, 0}};
      const int nfds = read_fd_ == write_fd_ ? 1 : 2;
      if (read_fd_ == write_fd_) fds[0].events |= POLLIN;
      if (::poll(fds, static_cast<nfds_t>(nfds), -1) < 0) {
        if (errno == EINTR) continue;
        throw BridgeError(errno_text("poll"));
      }
      const bool readable = (fds[0].revents & POLLIN) || (nfds == 2 && (fds[1].revents & (POLLIN | POLLHUP)));
      if (readable) fill();
      if (fds[0].revents & (POLLOUT | POLLERR | POLLHUP)) {
        const ssize_t n = is_socket() ? ::send(write_fd_, data.data(), data.size(), MSG_NOSIGNAL)
                                      : ::write(write_fd_, data.data(), data.size());
        if (n < 0) {
          if (errno == EINTR || errno == EAGAIN) continue;
          throw BridgeError("peer closed the connection while sending a request" + exit_note());
        }
        data.remove_prefix(static_cast<std::size_t>(n));
      }
    }
  }

  std::string read_line(std::chrono::milliseconds timeout) {
    const auto deadline = Clock::now() + timeout;
    for (;;) {
      const auto pos = buffer_.find('\n');
      if (pos != std::string::npos) {
        std::string line = buffer_.substr(0, pos);
        buffer_.erase(0, pos + 1);
        return line;
      }
      if (eof_) throw BridgeError("peer closed the connection" + exit_note());
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
      if (left <= 0)
        throw BridgeError("timed out after " + std::to_string(timeout.count() / 1000.0) + " s waiting for the peer");
      pollfd p{read_fd_, POLLIN, 0};
      const int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(left, 1 << 30)));
      if (rc < 0 && errno != EINTR) throw BridgeError(errno_text("poll"));
      if (rc > 0) fill();
    }
  }

  void close_write() {
    if (write_fd_ < 0) return;
    if (write_fd_ == read_fd_) {
      ::shutdown(write_fd_, SHUT_WR);
      ::close(write_fd_);
      read_fd_ = -1;
    } else {
      ::close(write_fd_);
    }
    write_fd_ = -1;
  }

 private:
  bool is_socket() const {
    struct stat st {};
    return ::fstat(write_fd_, &st) == 0 && S_ISSOCK(st.st_mode);
  }

  void fill() {
    char chunk[65536];
    const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
    if (n > 0) {
      buffer_.append(chunk, static_cast<std::size_t>(n));
    } else if (n == 0 || (errno != EINTR && errno != EAGAIN)) {
      eof_ = true;
    }
  }

  std::string exit_note() {
    if (child_ <= 0) return "";
    reap(std::chrono::milliseconds(500));
    if (exit_status_ < 0) return "";
    return " (peer exited with status " + std::to_string(exit_status_) + ")";
  }

  void reap(std::chrono::milliseconds grace) {
    if (child_ <= 0) return;
    const auto deadline = Clock::now() + grace;
    int status = 0;
    for (;;) {
      const pid_t r = ::waitpid(child_, &status, WNOHANG);
      if (r == child_) break;
      if (r < 0) {
        child_ = -1;
        return;
      }
      if (Clock::now() >= deadline) {
        if (grace.count() < 1000) return;  // only a probe; leave the child running
        ::kill(child_, SIGKILL);
        ::waitpid(child_, &status, 0);
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    exit_status_ = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
    child_ = -1;
  }

  int read_fd_;
  int write_fd_;
  pid_t child_;
  int exit_status_ = -1;
  bool eof_ = false;
  std::string buffer_;
};

struct BridgeBackend::State {
  std::map<std::uint64_t, json> pending;

  json await(std::uint64_t id, FdChannel& channel, std::chrono::milliseconds timeout) {
    for (;;) {
      if (auto it = pending.find(id); it != pending.end()) {
        json resp = std::move(it->second);
        pending.erase(it);
        if (resp.value("status", std::string()) != "ok") {
          std::string kind = "backend";
          if (resp.contains("payload") && resp["payload"].is_object())
            kind = resp["payload"].value("kind", kind);
          throw RemoteError(kind, resp.value("error", std::string("unspecified error")));
        }
        return resp.contains("payload") ? std::move(resp["payload"]) : json::object();
      }
      const std::string line = channel.read_line(timeout);
      if (line.empty()) continue;
      json resp = json::parse(line, nullptr, false);
      if (resp.is_discarded() || !resp.is_object())
        throw BridgeError("malformed response from peer: " + line.substr(0, 200));
      if (!resp.contains("id") || !resp["id"].is_number_unsigned()) {
        // An error without a usable id cannot be matched to a request.
        throw BridgeError("response without a request id: " + resp.value("error", line.substr(0, 200)));
      }
      const auto rid = resp["id"].get<std::uint64_t>();
      pending[rid] = std::move(resp);
    }
  }
};

BridgeBackend::BridgeBackend(std::unique_ptr<FdChannel> channel, std::string description, BridgeOptions options)
    : channel_(std::move(channel)),
      description_(std::move(description)),
      options_(options),
      state_(std::make_unique<State>()) {}

BridgeBackend::~BridgeBackend() {
  try {
    close();
  } catch (...) {
  }
}

std::unique_ptr<BridgeBackend> BridgeBackend::spawn(const std::string& command, BridgeOptions options) {
  ignore_sigpipe();
  int to_child[2], from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) throw BridgeError(errno_text("pipe"));
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw BridgeError(errno_text("pipe"));
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw BridgeError(errno_text("fork"));
  if (pid == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  auto channel = std::make_unique<FdChannel>(from_child[0], to_child[1], pid);
  std::unique_ptr<BridgeBackend> b(new BridgeBackend(std::move(channel), "bridge:" + command, options));
  b->handshake();
  return b;
}

std::unique_ptr<BridgeBackend> BridgeBackend::connect(const std::string& host, std::uint16_t port,
                                                      BridgeOptions options) {
  ignore_sigpipe();
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port_text = std::to_string(port);
  if (::getaddrinfo(host.c_str(), port_text.c_str(), &hints, &res) != 0 || res == nullptr)
    throw BridgeError("cannot resolve '" + host + "'");
  int fd = -1;
  for (addrinfo* a = res; a != nullptr; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw BridgeError("cannot connect to " + host + ":" + port_text);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  auto channel = std::make_unique<FdChannel>(fd, fd, -1);
  std::unique_ptr<BridgeBackend> b(
      new BridgeBackend(std::move(channel), "tcp:" + host + ":" + port_text, options));
  b->handshake();
  return b;
}

std::unique_ptr<BridgeBackend> BridgeBackend::from_spec(std::string_view spec, BridgeOptions options) {
  if (spec.starts_with("bridge:")) {
    const auto cmd = spec.substr(7);
    if (cmd.empty()) throw Error("bridge backend needs a command: bridge:<command>");
    return spawn(std::string(cmd), options);
  }
  if (spec.starts_with("tcp:")) {
    const auto rest = spec.substr(4);
    const auto colon = rest.rfind(':');
    std::uint16_t port = 0;
    if (colon != std::string_view::npos) {
      const auto digits = rest.substr(colon + 1);
      const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), port);
      if (ec == std::errc() && ptr == digits.data() + digits.size() && port != 0)
        return connect(std::string(rest.substr(0, colon)), port, options);
    }
    throw Error("tcp backend must look like tcp:<host>:<port>");
  }
  throw Error("unknown bridge spec '" + std::string(spec) + "'");
}

std::uint64_t BridgeBackend::send(std::string_view op, const std::string& payload_json) {
  if (closed_) throw BridgeError("bridge is closed");
  const std::uint64_t id = next_id_++;
  std::string line = "{\"id\":" + std::to_string(id) + ",\"op\":\"" + std::string(op) + "\",\"payload\":";
  line += payload_json;
  line += "}";
  channel_->write_line(line);
  return id;
}

void BridgeBackend::handshake() {
  std::lock_guard lock(mutex_);
  const auto id = send("handshake", json{{"version", kProtocolVersion}}.dump());
  const json payload = state_->await(id, *channel_, options_.timeout);
  peer_version_ = payload.value("version", std::string());
  if (peer_version_ != kProtocolVersion)
    throw BridgeError("protocol version mismatch: client speaks " + std::string(kProtocolVersion) + ", peer speaks '" +
                      peer_version_ + "'");
  if (payload.contains("capabilities")) {
    const auto& caps = payload["capabilities"];
    capabilities_.max_context = caps.value("max_context", capabilities_.max_context);
    capabilities_.max_features = caps.value("max_features", capabilities_.max_features);
  }
  peer_backend_ = payload.value("backend", std::string());
}

void BridgeBackend::close() {
  std::lock_guard lock(mutex_);
  if (closed_) return;
  try {
    const auto id = send("shutdown", "{}");
    state_->await(id, *channel_, std::chrono::milliseconds(5000));
  } catch (const std::exception&) {
  }
  closed_ = true;
  channel_.reset();
}

std::uint64_t BridgeBackend::submit_regress(const ContextSet& context, const Matrix& queries, std::uint64_t seed) {
  json payload = {{"features", matrix_to_json(context.features)},
                  {"targets", context.targets},
                  {"queries", matrix_to_json(queries)},
                  {"seed", seed}};
  std::lock_guard lock(mutex_);
  return send("regress", payload.dump());
}

std::uint64_t BridgeBackend::submit_classify(const ClassContext& context, const Matrix& queries,
                                             std::uint64_t seed) {
  json payload = {{"features", matrix_to_json(context.features)},
                  {"labels", context.labels},
                  {"queries", matrix_to_json(queries)},
                  {"seed", seed}};
  std::lock_guard lock(mutex_);
  return send("classify", payload.dump());
}

std::vector<PredictiveDistribution1D> BridgeBackend::await_regress(std::uint64_t id) {
  json payload;
  {
    std::lock_guard lock(mutex_);
    payload = state_->await(id, *channel_, options_.timeout);
  }
  try {
    std::vector<PredictiveDistribution1D> out;
    const auto& dists = payload.at("distributions");
    out.reserve(dists.size());
    for (const auto& d : dists) {
      auto grid = d.at("grid").get<std::vector<double>>();
      auto logd = d.at("log_density").get<std::vector<double>>();
      try {
        out.push_back(PredictiveDistribution1D::from_normalized(grid, logd));
      } catch (const BackendError&) {
        out.emplace_back(std::move(grid), std::move(logd));
      }
    }
    return out;
  } catch (const json::exception& e) {
    throw BridgeError(std::string("malformed regress response: ") + e.what());
  }
}

ClassProbabilities BridgeBackend::await_classify(std::uint64_t id) {
  json payload;
  {
    std::lock_guard lock(mutex_);
    payload = state_->await(id, *channel_, options_.timeout);
  }
  try {
    ClassProbabilities out;
    out.classes = payload.at("classes").get<std::vector<int>>();
    out.probabilities = matrix_from_json(payload.at("probabilities"), out.classes.size());
    if (out.probabilities.cols() != out.classes.size()) throw BridgeError("class count does not match probabilities");
    return out;
  } catch (const json::exception& e) {
    throw BridgeError(std::string("malformed classify response: ") + e.what());
  }
}

std::vector<PredictiveDistribution1D> BridgeBackend::regress(const ContextSet& context, const Matrix& queries,
                                                             std::uint64_t seed) {
  auto out = await_regress(submit_regress(context, queries, seed));
  if (out.size() != queries.rows()) throw BridgeError("peer returned the wrong number of distributions");
  return out;
}

ClassProbabilities BridgeBackend::classify(const ClassContext& context, const Matrix& queries, std::uint64_t seed) {
  auto out = await_classify(submit_classify(context, queries, seed));
  if (out.probabilities.rows() != queries.rows()) throw BridgeError("peer returned the wrong number of rows");
  return out;
}

std::unique_ptr<InContextBackend> make_backend(std::string_view spec, BridgeOptions options) {
  if (spec == "reference") return std::make_unique<ReferenceBackend>();
  if (spec.starts_with("bridge:") || spec.starts_with("tcp:")) return BridgeBackend::from_spec(spec, options);
  throw Error("unknown backend '" + std::string(spec) + "' (expected reference, bridge:<command> or tcp:<host>:<port>)");
}

}  // namespace npepfn
