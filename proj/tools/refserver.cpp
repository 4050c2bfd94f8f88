// Protocol v1 server around the built-in reference backend. Serves stdio by
// default or TCP with --port. Used as the loopback peer in bridge tests and as
// a template for external model servers.

#include <unistd.h>

#include <iostream>

#include "CLI11.hpp"
#include "npepfn/bridge.hpp"
#include "npepfn/reference_backend.hpp"

int main(int argc, char** argv) {
  CLI::App app{"npepfn-refserver: protocol v1 server backed by the reference backend"};
  std::string version{npepfn::kProtocolVersion};
  std::size_t reverse_batch = 1;
  std::size_t grid = 512;
  int port = -1;
  std::string host = "127.0.0.1";
  app.add_option("--protocol-version", version, "Version announced in the handshake");
  app.add_option("--reverse-batch", reverse_batch, "Answer regress/classify requests in reversed groups of N")
      ->check(CLI::PositiveNumber);
  app.add_option("--grid", grid, "Predictive grid size")->check(CLI::Range(32, 1 << 20));
  app.add_option("--port", port, "Listen on TCP instead of stdio (0 picks a free port)");
  app.add_option("--host", host, "TCP listen address");
  CLI11_PARSE(app, argc, argv);

  try {
    npepfn::ReferenceBackendOptions opts;
    opts.grid_size = grid;
    npepfn::ReferenceBackend backend(opts);
    npepfn::ProtocolServer server(backend, {version, reverse_batch});
    if (port < 0) {
      server.serve_fd(STDIN_FILENO, STDOUT_FILENO);
      return 0;
    }
    npepfn::TcpListener listener(host, static_cast<std::uint16_t>(port));
    std::cerr << "listening on " << host << ":" << listener.port() << std::endl;
    npepfn::serve_tcp(server, listener);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "npepfn-refserver: " << e.what() << "\n";
    return 1;
  }
}
