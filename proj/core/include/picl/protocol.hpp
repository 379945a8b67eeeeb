#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace picl::protocol {

// Newline-delimited JSON objects, one request per line, one response per
// line. Every message has "type" and "session_id". Error responses have
// type "error", ok=false, and a machine-readable "code".

inline constexpr int kProtocolVersion = 1;

enum class AblationMode { DeltaPatch, FullReplace };
std::string_view to_string(AblationMode mode) noexcept;
AblationMode ablation_mode_from_string(std::string_view name);

struct SamplingSettings {
  double temperature = 1.0;
  int top_k = 50;
  double top_p = 0.9;

  nlohmann::json to_json() const;
  static SamplingSettings from_json(const nlohmann::json& j);
  friend bool operator==(const SamplingSettings&, const SamplingSettings&) = default;
};

/// Ground-truth pointer a mock model uses to compute energies and truth
/// continuations. Real adapters ignore it.
struct OracleHint {
  std::string trajectory_path;
  std::string channel;
  std::size_t history_start = 0;
  double scale = 1.0;   // tokenizer a
  double offset = 0.0;  // tokenizer b
  int precision = 3;

  nlohmann::json to_json() const;
  static OracleHint from_json(const nlohmann::json& j);
};

struct HelloResponse {
  int protocol_version = kProtocolVersion;
  std::string model_id;
  std::uint32_t n_blocks = 0;
  std::uint32_t hidden_dim = 0;
  SamplingSettings sampling;

  nlohmann::json to_json() const;
  static HelloResponse from_json(const nlohmann::json& j);
};

struct GenerateRequest {
  std::string prompt;
  std::size_t n_steps = 32;
  std::size_t n_samples = 10;
  std::uint64_t seed = 0;
  std::optional<OracleHint> oracle;

  nlohmann::json to_json() const;
  static GenerateRequest from_json(const nlohmann::json& j);
};

struct GenerateResponse {
  std::vector<std::string> samples;
  std::vector<std::uint64_t> seeds;
  SamplingSettings sampling;

  nlohmann::json to_json() const;
  static GenerateResponse from_json(const nlohmann::json& j);
};

struct CaptureRequest {
  std::string prompt;
  std::vector<std::uint32_t> blocks;
  std::string output_dir;
  std::string basename;
  std::uint32_t context_length = 0;
  std::string trajectory_id;
  std::string channel;
  std::uint64_t seed = 0;
  std::optional<OracleHint> oracle;

  nlohmann::json to_json() const;
  static CaptureRequest from_json(const nlohmann::json& j);
};

struct CapturedFile {
  std::uint32_t block = 0;
  std::string path;
};

struct CaptureResponse {
  std::vector<CapturedFile> files;
  std::vector<std::size_t> token_lengths;
  std::uint32_t hidden_dim = 0;
  SamplingSettings sampling;

  nlohmann::json to_json() const;
  static CaptureResponse from_json(const nlohmann::json& j);
};

struct InterventionEdit {
  std::uint32_t block = 0;
  std::string sae_path;
  std::vector<std::uint32_t> units;
  AblationMode mode = AblationMode::DeltaPatch;

  nlohmann::json to_json() const;
  static InterventionEdit from_json(const nlohmann::json& j);
};

/// Per-sample seeds derived from a request seed.
std::uint64_t sample_seed(std::uint64_t request_seed, std::size_t sample_index) noexcept;

nlohmann::json error_response(std::string_view session_id, std::string_view code,
                              std::string_view message);

/// Moves one request line to a server and returns its response line.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string roundtrip(const std::string& line) = 0;
};

/// Calls a line handler directly, in process.
class InProcessTransport final : public Transport {
 public:
  explicit InProcessTransport(std::function<std::string(std::string_view)> handler)
      : handler_(std::move(handler)) {}
  std::string roundtrip(const std::string& line) override { return handler_(line); }

 private:
  std::function<std::string(std::string_view)> handler_;
};

/// Client over a connected stream socket (TCP or Unix domain).
class SocketTransport final : public Transport {
 public:
  /// "tcp://host:port" or "unix:/path/to/socket".
  explicit SocketTransport(const std::string& address);
  ~SocketTransport() override;
  SocketTransport(const SocketTransport&) = delete;
  SocketTransport& operator=(const SocketTransport&) = delete;
  std::string roundtrip(const std::string& line) override;

 private:
  int fd_ = -1;
  std::string buffer_;
};

/// Spawns `argv` and talks to it over its stdin/stdout.
class ProcessTransport final : public Transport {
 public:
  explicit ProcessTransport(std::vector<std::string> argv);
  ~ProcessTransport() override;
  ProcessTransport(const ProcessTransport&) = delete;
  ProcessTransport& operator=(const ProcessTransport&) = delete;
  std::string roundtrip(const std::string& line) override;

 private:
  int to_child_ = -1;
  int from_child_ = -1;
  int pid_ = -1;
  std::string buffer_;
};

/// "tcp://host:port", "unix:/path" or "exec:<command line>" (split on
/// whitespace, no shell). Other schemes throw Config.
std::unique_ptr<Transport> connect(const std::string& address);

/// Typed client over a transport. Error responses become Error(Protocol)
/// carrying the server's code and message.
class AdapterSession {
 public:
  AdapterSession(std::unique_ptr<Transport> transport, std::string session_id);

  const HelloResponse& hello();
  GenerateResponse generate(const GenerateRequest& req);
  CaptureResponse capture(const CaptureRequest& req);
  void intervene(const InterventionEdit& edit);
  void clear();
  void bye();

  /// Raw exchange, for conformance tests.
  nlohmann::json exchange(const nlohmann::json& request);

  const std::optional<HelloResponse>& server() const noexcept { return server_; }

 private:
  nlohmann::json call(nlohmann::json request, std::string_view expected_type);

  std::unique_ptr<Transport> transport_;
  std::string session_id_;
  std::optional<HelloResponse> server_;
};

/// Server side: one handler instance per connection.
class LineHandler {
 public:
  virtual ~LineHandler() = default;
  virtual std::string handle_line(std::string_view line) = 0;
  /// True once the peer said bye.
  virtual bool finished() const = 0;
};

/// Reads requests from `in` until EOF or bye, writing one response per line.
void serve_stream(LineHandler& handler, std::istream& in, std::ostream& out);

/// Accepts connections on a "tcp://host:port" or "unix:/path" address and
/// serves each on its own thread with a fresh handler. Returns after
/// `max_connections` sessions have finished (0 = never). `on_listening`
/// receives the bound TCP port (0 for Unix sockets) once accepting.
void serve_socket(const std::function<std::unique_ptr<LineHandler>()>& make_handler,
                  const std::string& address, std::size_t max_connections = 0,
                  const std::function<void(std::uint16_t)>& on_listening = {});

}  // namespace picl::protocol
