#include "picl/protocol.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <istream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "picl/error.hpp"
#include "picl/random.hpp"

namespace picl::protocol {

using nlohmann::json;

namespace {

[[noreturn]] void protocol_error(const std::string& what) {
  throw Error(ErrorCode::Protocol, what);
}

const json& field(const json& j, const char* key) {
  if (!j.is_object()) protocol_error("message is not an object");
  auto it = j.find(key);
  if (it == j.end()) protocol_error(std::string("missing field '") + key + "'");
  return *it;
}

std::string get_string(const json& j, const char* key) {
  const json& v = field(j, key);
  if (!v.is_string()) protocol_error(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

std::uint64_t get_unsigned(const json& j, const char* key) {
  const json& v = field(j, key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
    protocol_error(std::string("field '") + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

double get_number(const json& j, const char* key) {
  const json& v = field(j, key);
  if (!v.is_number()) protocol_error(std::string("field '") + key + "' must be a number");
  return v.get<double>();
}

template <typename T>
std::vector<T> get_unsigned_array(const json& j, const char* key) {
  const json& v = field(j, key);
  if (!v.is_array()) protocol_error(std::string("field '") + key + "' must be an array");
  std::vector<T> out;
  out.reserve(v.size());
  for (const auto& e : v) {
    if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<long long>() >= 0))
      protocol_error(std::string("field '") + key + "' must hold non-negative integers");
    out.push_back(e.get<T>());
  }
  return out;
}

std::optional<OracleHint> get_oracle(const json& j) {
  auto it = j.find("oracle");
  if (it == j.end() || it->is_null()) return std::nullopt;
  return OracleHint::from_json(*it);
}

}  // namespace

std::string_view to_string(AblationMode mode) noexcept {
  return mode == AblationMode::DeltaPatch ? "delta_patch" : "full_replace";
}

AblationMode ablation_mode_from_string(std::string_view name) {
  if (name == "delta_patch") return AblationMode::DeltaPatch;
  if (name == "full_replace") return AblationMode::FullReplace;
  throw Error(ErrorCode::InvalidInput, "unknown ablation mode '" + std::string(name) + "'");
}

json SamplingSettings::to_json() const {
  return {{"temperature", temperature}, {"top_k", top_k}, {"top_p", top_p}};
}

SamplingSettings SamplingSettings::from_json(const json& j) {
  SamplingSettings s;
  s.temperature = get_number(j, "temperature");
  s.top_k = static_cast<int>(get_unsigned(j, "top_k"));
  s.top_p = get_number(j, "top_p");
  return s;
}

json OracleHint::to_json() const {
  return {{"trajectory", trajectory_path}, {"channel", channel}, {"history_start", history_start},
          {"scale", scale},                {"offset", offset},   {"precision", precision}};
}

OracleHint OracleHint::from_json(const json& j) {
  OracleHint h;
  h.trajectory_path = get_string(j, "trajectory");
  h.channel = get_string(j, "channel");
  h.history_start = get_unsigned(j, "history_start");
  h.scale = get_number(j, "scale");
  h.offset = get_number(j, "offset");
  h.precision = static_cast<int>(get_unsigned(j, "precision"));
  return h;
}

json HelloResponse::to_json() const {
  return {{"type", "hello"},         {"ok", true},
          {"protocol_version", protocol_version},
          {"model_id", model_id},    {"n_blocks", n_blocks},
          {"hidden_dim", hidden_dim}, {"sampling", sampling.to_json()}};
}

HelloResponse HelloResponse::from_json(const json& j) {
  HelloResponse r;
  r.protocol_version = static_cast<int>(get_unsigned(j, "protocol_version"));
  r.model_id = get_string(j, "model_id");
  r.n_blocks = static_cast<std::uint32_t>(get_unsigned(j, "n_blocks"));
  r.hidden_dim = static_cast<std::uint32_t>(get_unsigned(j, "hidden_dim"));
  r.sampling = SamplingSettings::from_json(field(j, "sampling"));
  return r;
}

json GenerateRequest::to_json() const {
  json j = {{"type", "generate"}, {"prompt", prompt}, {"n_steps", n_steps},
            {"n_samples", n_samples}, {"seed", seed}};
  if (oracle) j["oracle"] = oracle->to_json();
  return j;
}

GenerateRequest GenerateRequest::from_json(const json& j) {
  GenerateRequest r;
  r.prompt = get_string(j, "prompt");
  r.n_steps = get_unsigned(j, "n_steps");
  r.n_samples = get_unsigned(j, "n_samples");
  r.seed = get_unsigned(j, "seed");
  r.oracle = get_oracle(j);
  return r;
}

json GenerateResponse::to_json() const {
  return {{"type", "generate"}, {"ok", true}, {"samples", samples}, {"seeds", seeds},
          {"sampling", sampling.to_json()}};
}

GenerateResponse GenerateResponse::from_json(const json& j) {
  GenerateResponse r;
  const json& samples = field(j, "samples");
  if (!samples.is_array()) protocol_error("field 'samples' must be an array");
  for (const auto& s : samples) {
    if (!s.is_string()) protocol_error("samples must be strings");
    r.samples.push_back(s.get<std::string>());
  }
  r.seeds = get_unsigned_array<std::uint64_t>(j, "seeds");
  if (r.seeds.size() != r.samples.size()) protocol_error("seeds and samples differ in length");
  r.sampling = SamplingSettings::from_json(field(j, "sampling"));
  return r;
}

json CaptureRequest::to_json() const {
  json j = {{"type", "capture"},         {"prompt", prompt},
            {"blocks", blocks},          {"output_dir", output_dir},
            {"basename", basename},      {"context_length", context_length},
            {"trajectory_id", trajectory_id}, {"channel", channel},
            {"seed", seed}};
  if (oracle) j["oracle"] = oracle->to_json();
  return j;
}

CaptureRequest CaptureRequest::from_json(const json& j) {
  CaptureRequest r;
  r.prompt = get_string(j, "prompt");
  r.blocks = get_unsigned_array<std::uint32_t>(j, "blocks");
  r.output_dir = get_string(j, "output_dir");
  r.basename = get_string(j, "basename");
  r.context_length = static_cast<std::uint32_t>(get_unsigned(j, "context_length"));
  r.trajectory_id = get_string(j, "trajectory_id");
  r.channel = get_string(j, "channel");
  r.seed = get_unsigned(j, "seed");
  r.oracle = get_oracle(j);
  return r;
}

json CaptureResponse::to_json() const {
  json files_json = json::array();
  for (const auto& f : files) files_json.push_back({{"block", f.block}, {"path", f.path}});
  return {{"type", "capture"},         {"ok", true},
          {"files", files_json},       {"token_lengths", token_lengths},
          {"hidden_dim", hidden_dim},  {"capture_point", "block_output"},
          {"sampling", sampling.to_json()}};
}

CaptureResponse CaptureResponse::from_json(const json& j) {
  CaptureResponse r;
  const json& files = field(j, "files");
  if (!files.is_array()) protocol_error("field 'files' must be an array");
  for (const auto& f : files) {
    r.files.push_back({static_cast<std::uint32_t>(get_unsigned(f, "block")), get_string(f, "path")});
  }
  r.token_lengths = get_unsigned_array<std::size_t>(j, "token_lengths");
  r.hidden_dim = static_cast<std::uint32_t>(get_unsigned(j, "hidden_dim"));
  r.sampling = SamplingSettings::from_json(field(j, "sampling"));
  return r;
}

json InterventionEdit::to_json() const {
  return {{"type", "intervene"}, {"block", block}, {"sae_path", sae_path},
          {"units", units},      {"mode", std::string(protocol::to_string(mode))}};
}

InterventionEdit InterventionEdit::from_json(const json& j) {
  InterventionEdit e;
  e.block = static_cast<std::uint32_t>(get_unsigned(j, "block"));
  e.sae_path = get_string(j, "sae_path");
  e.units = get_unsigned_array<std::uint32_t>(j, "units");
  const std::string mode = get_string(j, "mode");
  if (mode == "delta_patch") {
    e.mode = AblationMode::DeltaPatch;
  } else if (mode == "full_replace") {
    e.mode = AblationMode::FullReplace;
  } else {
    protocol_error("unknown ablation mode '" + mode + "'");
  }
  return e;
}

std::uint64_t sample_seed(std::uint64_t request_seed, std::size_t sample_index) noexcept {
  return combine_seed(request_seed, sample_index);
}

json error_response(std::string_view session_id, std::string_view code, std::string_view message) {
  return {{"type", "error"},
          {"ok", false},
          {"session_id", session_id},
          {"code", code},
          {"message", message}};
}

// ---------------------------------------------------------------------------
// Transports

namespace {

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      protocol_error(std::string("write failed: ") + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

// Returns false on EOF before any newline.
bool read_line(int fd, std::string& buffer, std::string& line) {
  for (;;) {
    const auto nl = buffer.find('\n');
    if (nl != std::string::npos) {
      line.assign(buffer, 0, nl);
      buffer.erase(0, nl + 1);
      return true;
    }
    char chunk[65536];
    const ssize_t n = ::read(fd, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR) continue;
      protocol_error(std::string("read failed: ") + std::strerror(errno));
    }
    if (n == 0) return false;
    buffer.append(chunk, static_cast<std::size_t>(n));
  }
}

std::string line_roundtrip(int write_fd, int read_fd, std::string& buffer, const std::string& line) {
  require(line.find('\n') == std::string::npos, ErrorCode::Protocol,
          "request must be a single line");
  write_all(write_fd, line + "\n");
  std::string response;
  if (!read_line(read_fd, buffer, response)) protocol_error("connection closed by server");
  return response;
}

struct ParsedAddress {
  bool unix_socket = false;
  std::string host;
  std::uint16_t port = 0;
  std::string path;
};

ParsedAddress parse_socket_address(const std::string& address) {
  ParsedAddress a;
  if (address.rfind("unix:", 0) == 0) {
    a.unix_socket = true;
    a.path = address.substr(5);
    require(!a.path.empty(), ErrorCode::Config, "empty unix socket path");
    require(a.path.size() < sizeof(sockaddr_un{}.sun_path), ErrorCode::Config,
            "unix socket path too long: " + a.path);
    return a;
  }
  if (address.rfind("tcp://", 0) == 0) {
    const std::string rest = address.substr(6);
    const auto colon = rest.rfind(':');
    require(colon != std::string::npos && colon > 0, ErrorCode::Config,
            "expected tcp://host:port, got '" + address + "'");
    a.host = rest.substr(0, colon);
    const std::string port = rest.substr(colon + 1);
    unsigned long value = 0;
    try {
      std::size_t used = 0;
      value = std::stoul(port, &used);
      require(used == port.size(), ErrorCode::Config, "bad port in '" + address + "'");
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::Config, "bad port in '" + address + "'");
    }
    require(value <= 65535, ErrorCode::Config, "port out of range in '" + address + "'");
    a.port = static_cast<std::uint16_t>(value);
    return a;
  }
  throw Error(ErrorCode::Config, "unsupported socket address '" + address + "'");
}

int open_client_socket(const ParsedAddress& a) {
  if (a.unix_socket) {
    const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
    require(fd >= 0, ErrorCode::Io, "socket() failed");
    sockaddr_un sa{};
    sa.sun_family = AF_UNIX;
    std::memcpy(sa.sun_path, a.path.c_str(), a.path.size() + 1);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
      ::close(fd);
      throw Error(ErrorCode::Io, "cannot connect to unix:" + a.path + ": " + std::strerror(errno));
    }
    return fd;
  }
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(a.port);
  if (::getaddrinfo(a.host.c_str(), port.c_str(), &hints, &res) != 0 || res == nullptr)
    throw Error(ErrorCode::Io, "cannot resolve host '" + a.host + "'");
  int fd = -1;
  for (addrinfo* p = res; p != nullptr; p = p->ai_next) {
    fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw Error(ErrorCode::Io, "cannot connect to " + a.host + ":" + port);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return fd;
}

std::vector<std::string> split_command(const std::string& command) {
  std::istringstream in(command);
  std::vector<std::string> argv;
  for (std::string word; in >> word;) argv.push_back(word);
  return argv;
}

}  // namespace

SocketTransport::SocketTransport(const std::string& address)
    : fd_(open_client_socket(parse_socket_address(address))) {}

SocketTransport::~SocketTransport() {
  if (fd_ >= 0) ::close(fd_);
}

std::string SocketTransport::roundtrip(const std::string& line) {
  return line_roundtrip(fd_, fd_, buffer_, line);
}

ProcessTransport::ProcessTransport(std::vector<std::string> argv) {
  require(!argv.empty(), ErrorCode::Config, "empty adapter command");
  // A child that exits early must surface as a read error, not SIGPIPE.
  ::signal(SIGPIPE, SIG_IGN);
  int in_pipe[2];
  int out_pipe[2];
  require(::pipe(in_pipe) == 0 && ::pipe(out_pipe) == 0, ErrorCode::Io, "pipe() failed");
  const pid_t pid = ::fork();
  require(pid >= 0, ErrorCode::Io, "fork() failed");
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    std::vector<char*> args;
    for (auto& a : argv) args.push_back(a.data());
    args.push_back(nullptr);
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  pid_ = pid;
}

ProcessTransport::~ProcessTransport() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
}

std::string ProcessTransport::roundtrip(const std::string& line) {
  return line_roundtrip(to_child_, from_child_, buffer_, line);
}

std::unique_ptr<Transport> connect(const std::string& address) {
  if (address.rfind("exec:", 0) == 0)
    return std::make_unique<ProcessTransport>(split_command(address.substr(5)));
  return std::make_unique<SocketTransport>(address);
}

// ---------------------------------------------------------------------------
// Client session

AdapterSession::AdapterSession(std::unique_ptr<Transport> transport, std::string session_id)
    : transport_(std::move(transport)), session_id_(std::move(session_id)) {
  require(transport_ != nullptr, ErrorCode::InvalidInput, "null transport");
}

json AdapterSession::exchange(const json& request) {
  const std::string reply = transport_->roundtrip(request.dump());
  json parsed = json::parse(reply, nullptr, false);
  if (parsed.is_discarded() || !parsed.is_object()) protocol_error("malformed response line");
  return parsed;
}

json AdapterSession::call(json request, std::string_view expected_type) {
  request["session_id"] = session_id_;
  json reply = exchange(request);
  const std::string type = get_string(reply, "type");
  if (type == "error") {
    throw Error(ErrorCode::Protocol, "adapter error [" + reply.value("code", std::string("?")) +
                                         "]: " + reply.value("message", std::string()));
  }
  if (type != expected_type)
    protocol_error("expected '" + std::string(expected_type) + "' response, got '" + type + "'");
  if (server_ && reply.contains("sampling") &&
      SamplingSettings::from_json(reply["sampling"]) != server_->sampling)
    protocol_error("sampling settings changed mid-session");
  return reply;
}

const HelloResponse& AdapterSession::hello() {
  json reply = call({{"type", "hello"}, {"protocol_version", kProtocolVersion}}, "hello");
  HelloResponse r = HelloResponse::from_json(reply);
  if (r.protocol_version != kProtocolVersion)
    protocol_error("server speaks protocol version " + std::to_string(r.protocol_version));
  server_ = std::move(r);
  return *server_;
}

GenerateResponse AdapterSession::generate(const GenerateRequest& req) {
  return GenerateResponse::from_json(call(req.to_json(), "generate"));
}

CaptureResponse AdapterSession::capture(const CaptureRequest& req) {
  return CaptureResponse::from_json(call(req.to_json(), "capture"));
}

void AdapterSession::intervene(const InterventionEdit& edit) { call(edit.to_json(), "intervene"); }

void AdapterSession::clear() { call({{"type", "clear"}}, "clear"); }

void AdapterSession::bye() { call({{"type", "bye"}}, "bye"); }

// ---------------------------------------------------------------------------
// Server loops

void serve_stream(LineHandler& handler, std::istream& in, std::ostream& out) {
  std::string line;
  while (!handler.finished() && std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out << handler.handle_line(line) << '\n';
    out.flush();
  }
}

namespace {

void serve_fd(LineHandler& handler, int fd) {
  std::string buffer;
  std::string line;
  try {
    while (!handler.finished() && read_line(fd, buffer, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      write_all(fd, handler.handle_line(line) + "\n");
    }
  } catch (const Error&) {
    // Peer vanished; this connection is done.
  }
  ::close(fd);
}

}  // namespace

void serve_socket(const std::function<std::unique_ptr<LineHandler>()>& make_handler,
                  const std::string& address, std::size_t max_connections,
                  const std::function<void(std::uint16_t)>& on_listening) {
  ::signal(SIGPIPE, SIG_IGN);
  const ParsedAddress a = parse_socket_address(address);
  int listen_fd = -1;
  std::uint16_t bound_port = 0;
  if (a.unix_socket) {
    listen_fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
    require(listen_fd >= 0, ErrorCode::Io, "socket() failed");
    ::unlink(a.path.c_str());
    sockaddr_un sa{};
    sa.sun_family = AF_UNIX;
    std::memcpy(sa.sun_path, a.path.c_str(), a.path.size() + 1);
    if (::bind(listen_fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
      ::close(listen_fd);
      throw Error(ErrorCode::Io, "cannot bind unix:" + a.path + ": " + std::strerror(errno));
    }
  } else {
    listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
    require(listen_fd >= 0, ErrorCode::Io, "socket() failed");
    int one = 1;
    ::setsockopt(listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(a.port);
    const std::string host = a.host == "localhost" ? "127.0.0.1" : a.host;
    if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1) {
      ::close(listen_fd);
      throw Error(ErrorCode::Config, "listen host must be an IPv4 address: " + a.host);
    }
    if (::bind(listen_fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
      ::close(listen_fd);
      throw Error(ErrorCode::Io, "cannot bind " + address + ": " + std::strerror(errno));
    }
    socklen_t len = sizeof sa;
    ::getsockname(listen_fd, reinterpret_cast<sockaddr*>(&sa), &len);
    bound_port = ntohs(sa.sin_port);
  }
  if (::listen(listen_fd, 16) != 0) {
    ::close(listen_fd);
    throw Error(ErrorCode::Io, "listen() failed");
  }
  if (on_listening) on_listening(bound_port);

  std::vector<std::jthread> sessions;
  for (std::size_t accepted = 0; max_connections == 0 || accepted < max_connections; ++accepted) {
    const int fd = ::accept(listen_fd, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) {
        --accepted;
        continue;
      }
      break;
    }
    sessions.emplace_back([fd, handler = make_handler()]() mutable { serve_fd(*handler, fd); });
  }
  sessions.clear();
  ::close(listen_fd);
  if (a.unix_socket) ::unlink(a.path.c_str());
}

}  // namespace picl::protocol
