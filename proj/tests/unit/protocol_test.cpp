#include <algorithm>
#include <fstream>
#include <sstream>
#include <future>
#include <thread>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "picl/error.hpp"
#include "picl/io.hpp"
#include "picl/protocol.hpp"

namespace proto = picl::protocol;
using nlohmann::json;

namespace {

// A mock server reachable over one transport kind. Socket servers run on a
// background thread that exits once the single connection closes.
class Served {
 public:
  Served(const std::string& kind, const oracle::TempDir& dir) {
    auto model = picl::mock::MockModel::create({});
    if (kind == "inproc") {
      transport_ = fixture::inproc(model);
    } else if (kind == "exec") {
      transport_ = proto::connect(std::string("exec:") + PICL_BINARY + " mock-serve --stdio");
    } else {
      const std::string address =
          kind == "tcp" ? std::string("tcp://127.0.0.1:0") : "unix:" + (dir / "mock.sock").string();
      std::promise<std::uint16_t> ready;
      auto port = ready.get_future();
      server_ = std::thread([model, address, &ready] {
        proto::serve_socket([&] { return model->new_session(); }, address, 1,
                            [&](std::uint16_t p) { ready.set_value(p); });
      });
      const auto p = port.get();
      transport_ = proto::connect(kind == "tcp" ? "tcp://127.0.0.1:" + std::to_string(p) : address);
    }
  }
  ~Served() {
    transport_.reset();
    if (server_.joinable()) server_.join();
  }

  proto::Transport& transport() { return *transport_; }
  std::unique_ptr<proto::Transport> release() { return std::move(transport_); }

 private:
  std::unique_ptr<proto::Transport> transport_;
  std::thread server_;
};

json load_vectors() {
  std::ifstream in(std::string(PICL_VECTORS_DIR) + "/protocol_conformance.json");
  return json::parse(in);
}

void substitute(json& j, const std::string& tmp) {
  if (j.is_string()) {
    auto s = j.get<std::string>();
    if (auto at = s.find("{tmp}"); at != std::string::npos) j = s.replace(at, 5, tmp);
  } else if (j.is_structured()) {
    for (auto& v : j) substitute(v, tmp);
  }
}

}  // namespace

class Transports : public ::testing::TestWithParam<std::string> {};

TEST_P(Transports, ConformanceVectors) {
  oracle::TempDir dir("picl-proto");
  Served served(GetParam(), dir);
  const auto vectors = load_vectors();
  ASSERT_GT(vectors.size(), 10u);
  for (auto v : vectors) {
    SCOPED_TRACE(v.at("name").get<std::string>());
    substitute(v, dir.path().string());
    const std::string line = v.contains("raw") ? v.at("raw").get<std::string>() : v.at("request").dump();
    const auto reply = json::parse(served.transport().roundtrip(line));
    for (const auto& [key, value] : v.at("expect").items()) {
      ASSERT_TRUE(reply.contains(key)) << key << " missing in " << reply.dump();
      EXPECT_EQ(reply.at(key), value) << key;
    }
    if (v.contains("sizes"))
      for (const auto& [key, n] : v.at("sizes").items()) EXPECT_EQ(reply.at(key).size(), n.get<std::size_t>());
    EXPECT_TRUE(reply.at("session_id").is_string());
    EXPECT_EQ(proto::SamplingSettings::from_json(reply.at("sampling")), proto::SamplingSettings{});
    if (reply.at("type") == "error") {
      EXPECT_EQ(reply.at("ok"), false);
      EXPECT_TRUE(reply.at("message").is_string());
    }
  }
}

TEST_P(Transports, SampleSeedsAndDeterminism) {
  oracle::TempDir dir("picl-proto");
  Served served(GetParam(), dir);
  proto::AdapterSession s(served.release(), "seeds");
  const auto& hello = s.hello();
  EXPECT_EQ(hello.sampling, proto::SamplingSettings{});
  EXPECT_EQ(hello.sampling.top_k, 50);
  proto::GenerateRequest req;
  req.prompt = "5,10,15,20,";
  req.n_steps = 4;
  req.n_samples = 6;
  req.seed = 42;
  const auto a = s.generate(req);
  ASSERT_EQ(a.seeds.size(), 6u);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(a.seeds[k], proto::sample_seed(42, k));
  EXPECT_EQ(s.generate(req).samples, a.samples);
  for (const auto& text : a.samples) EXPECT_EQ(std::count(text.begin(), text.end(), ','), 3);

  // Same request through an in-process server gives the same text.
  auto reference = fixture::session(picl::mock::MockModel::create({}));
  EXPECT_EQ(reference->generate(req).samples, a.samples);

  try {
    proto::InterventionEdit edit;
    edit.block = 80;
    s.intervene(edit);
    FAIL();
  } catch (const picl::Error& e) {
    EXPECT_EQ(e.code(), picl::ErrorCode::Protocol);
    EXPECT_NE(std::string(e.what()).find("out_of_range_block"), std::string::npos);
  }
  s.bye();
}

TEST_P(Transports, CaptureWritesTensors) {
  oracle::TempDir dir("picl-proto");
  Served served(GetParam(), dir);
  proto::AdapterSession s(served.release(), "cap");
  s.hello();
  proto::CaptureRequest req;
  req.prompt = "12,-3,";
  req.blocks = {5, 24};
  req.output_dir = dir.path().string();
  req.basename = "t0_x1";
  req.context_length = 2;
  req.trajectory_id = "t0";
  req.channel = "x1";
  const auto r = s.capture(req);
  ASSERT_EQ(r.files.size(), 2u);
  for (const auto& f : r.files) {
    const auto t = picl::activations::read_tensor(f.path);
    EXPECT_EQ(t.block_index, f.block);
    EXPECT_EQ(t.seq_len, 6u);
    EXPECT_EQ(t.hidden_dim, 16u);
    EXPECT_EQ(picl::read_sidecar(f.path).at("capture_point"), "block_output");
  }
  s.bye();
}

INSTANTIATE_TEST_SUITE_P(Protocol, Transports, ::testing::Values("inproc", "tcp", "unix", "exec"),
                         [](const auto& info) { return info.param; });

TEST(Messages, RoundTrip) {
  proto::GenerateRequest g;
  g.prompt = "1,2,";
  g.n_steps = 3;
  g.oracle = proto::OracleHint{"/tmp/t.csv", "x2", 7, 1.5, -0.25, 3};
  const auto back = proto::GenerateRequest::from_json(g.to_json());
  EXPECT_EQ(back.prompt, g.prompt);
  ASSERT_TRUE(back.oracle.has_value());
  EXPECT_EQ(back.oracle->history_start, 7u);
  EXPECT_EQ(back.oracle->offset, -0.25);
  proto::InterventionEdit e{12, "/x.psae", {1, 2}, proto::AblationMode::FullReplace};
  const auto eb = proto::InterventionEdit::from_json(e.to_json());
  EXPECT_EQ(eb.units, e.units);
  EXPECT_EQ(eb.mode, e.mode);
  EXPECT_EQ(proto::ablation_mode_from_string("delta_patch"), proto::AblationMode::DeltaPatch);
}

TEST(Messages, ClientRejectsMalformedResponses) {
  auto bad_type = std::make_unique<proto::InProcessTransport>([](std::string_view) {
    return std::string(R"({"type":"bye","ok":true,"session_id":"s"})");
  });
  proto::AdapterSession s(std::move(bad_type), "s");
  EXPECT_THROW(s.hello(), picl::Error);
  auto garbage = std::make_unique<proto::InProcessTransport>([](std::string_view) { return std::string("{"); });
  proto::AdapterSession g(std::move(garbage), "s");
  EXPECT_THROW(g.hello(), picl::Error);
}

TEST(Connect, RejectsUnknownScheme) {
  try {
    proto::connect("http://localhost:80");
    FAIL();
  } catch (const picl::Error& e) {
    EXPECT_EQ(e.code(), picl::ErrorCode::Config);
  }
  EXPECT_THROW(proto::connect("unix:/nonexistent/picl.sock"), picl::Error);
}

TEST(ServeStream, StopsAtBye) {
  auto model = picl::mock::MockModel::create({});
  auto handler = model->new_session();
  std::istringstream in(R"({"type":"hello","session_id":"a","protocol_version":1})"
                        "\n"
                        R"({"type":"bye","session_id":"a"})"
                        "\n"
                        R"({"type":"clear","session_id":"a"})"
                        "\n");
  std::ostringstream out;
  proto::serve_stream(*handler, in, out);
  const auto text = out.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  EXPECT_TRUE(handler->finished());
}
