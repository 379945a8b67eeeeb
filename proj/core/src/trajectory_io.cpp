#include <charconv>
#include <sstream>
#include <string>

#include "picl/error.hpp"
#include "picl/io.hpp"
#include "picl/physics.hpp"

namespace picl::physics {

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj,
                      const nlohmann::json& extra_meta) {
  const auto names = channel_names(traj.spec);
  std::vector<std::string> columns{"time"};
  columns.insert(columns.end(), names.begin(), names.end());
  CsvTable table(std::move(columns));
  for (const auto& s : traj.states) {
    table.row().cell(s.time);
    for (double x : s.positions) table.cell(x);
    for (double v : s.velocities) table.cell(v);
  }
  table.write(path);

  nlohmann::json meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
  meta["system"] = traj.spec.to_json();
  meta["dt"] = traj.dt;
  meta["n_states"] = traj.states.size();
  meta["channels"] = names;
  write_sidecar(path, meta);
}

namespace {

double parse_number(const std::string& field, std::size_t line_no) {
  double value = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last)
    throw Error(ErrorCode::Parse, "bad number '" + field + "' on line " + std::to_string(line_no));
  return value;
}

}  // namespace

Trajectory read_trajectory(const std::filesystem::path& path) {
  const auto meta = read_sidecar(path);
  Trajectory traj;
  traj.spec = SystemSpec::from_json(meta.at("system"));
  traj.dt = meta.at("dt").get<double>();

  const auto names = channel_names(traj.spec);
  const auto n = traj.spec.n_coords();
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::Parse, "empty trajectory file");
  const auto header = split_csv_line(line);
  require(header.size() == names.size() + 1 && header[0] == "time", ErrorCode::Parse,
          "trajectory header does not match system " + std::string(to_string(traj.spec.kind)));
  for (std::size_t i = 0; i < names.size(); ++i)
    require(header[i + 1] == names[i], ErrorCode::Parse, "unexpected column " + header[i + 1]);

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    require(fields.size() == header.size(), ErrorCode::Parse,
            "wrong field count on line " + std::to_string(line_no));
    PhaseState s;
    s.time = parse_number(fields[0], line_no);
    s.positions.resize(n);
    s.velocities.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      s.positions[k] = parse_number(fields[1 + k], line_no);
      s.velocities[k] = parse_number(fields[1 + n + k], line_no);
    }
    traj.states.push_back(std::move(s));
  }
  return traj;
}

}  // namespace picl::physics
