#include "picl/correlation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "picl/error.hpp"
#include "picl/io.hpp"

namespace picl::correlation {

double clamp_correlation(double r) noexcept { return std::clamp(r, -1.0, 1.0); }

std::optional<double> StreamingPearson::correlation() const noexcept {
  if (n_ < 2 || !(m2_x_ > 0.0) || !(m2_y_ > 0.0)) return std::nullopt;
  // sqrt of the product keeps rho(x, x) == 1 exactly.
  return clamp_correlation(c_xy_ / std::sqrt(m2_x_ * m2_y_));
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorCode::InvalidInput, "pearson: length mismatch");
  require(x.size() >= 2, ErrorCode::InvalidInput, "pearson: need at least two samples");
  StreamingPearson acc;
  for (std::size_t i = 0; i < x.size(); ++i) acc.add(x[i], y[i]);
  return acc.correlation();
}

std::size_t selection_count(double fraction, std::size_t n) {
  require(fraction > 0.0 && fraction <= 1.0, ErrorCode::InvalidInput, "fraction must be in (0, 1]");
  if (n == 0) return 0;
  const double raw = fraction * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp<std::size_t>(k, 1, n);
}

CorrelationMatrix::CorrelationMatrix(std::uint32_t context_length,
                                     std::vector<std::uint32_t> blocks,
                                     std::vector<std::size_t> units_per_block)
    : context_length_(context_length), blocks_(std::move(blocks)) {
  require(blocks_.size() == units_per_block.size(), ErrorCode::InvalidInput,
          "one unit count per block required");
  std::array<double, kNumQuantities> undefined;
  undefined.fill(std::numeric_limits<double>::quiet_NaN());
  entries_.reserve(blocks_.size());
  for (auto units : units_per_block) entries_.emplace_back(units, undefined);
}

std::size_t CorrelationMatrix::total_pairs() const noexcept {
  std::size_t n = 0;
  for (const auto& b : entries_) n += b.size();
  return n;
}

std::size_t CorrelationMatrix::block_position(std::uint32_t block) const {
  const auto it = std::find(blocks_.begin(), blocks_.end(), block);
  if (it == blocks_.end())
    throw Error(ErrorCode::OutOfRange, "block " + std::to_string(block) + " not in matrix");
  return static_cast<std::size_t>(it - blocks_.begin());
}

std::optional<double> CorrelationMatrix::at(std::size_t block_pos, std::size_t unit,
                                            QuantityKind q) const {
  const double v = entries_.at(block_pos).at(unit)[index_of(q)];
  if (std::isnan(v)) return std::nullopt;
  return v;
}

void CorrelationMatrix::set(std::size_t block_pos, std::size_t unit, QuantityKind q,
                            std::optional<double> rho) {
  entries_.at(block_pos).at(unit)[index_of(q)] =
      rho ? clamp_correlation(*rho) : std::numeric_limits<double>::quiet_NaN();
}

std::size_t CorrelationMatrix::undefined_count(QuantityKind q) const noexcept {
  return total_pairs() - defined_count(q);
}

std::size_t CorrelationMatrix::defined_count(QuantityKind q) const noexcept {
  std::size_t n = 0;
  for (const auto& b : entries_)
    for (const auto& e : b)
      if (!std::isnan(e[index_of(q)])) ++n;
  return n;
}

CorrelationMatrix correlate_all(std::span<const BlockCodes> blocks,
                                std::span<const LabelRow> labels, std::uint32_t context_length) {
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> units;
  for (const auto& b : blocks) {
    require(b.code_dim > 0, ErrorCode::InvalidInput, "block has no code units");
    require(b.codes.size() == labels.size() * b.code_dim, ErrorCode::InvalidInput,
            "codes of block " + std::to_string(b.block) + " are not aligned with the labels");
    ids.push_back(b.block);
    units.push_back(b.code_dim);
  }
  CorrelationMatrix m(context_length, ids, units);
  const auto n = labels.size();

  for (std::size_t bp = 0; bp < blocks.size(); ++bp) {
    const auto& b = blocks[bp];
    const auto C = b.code_dim;
    // Flat Welford state: per unit (mean, m2), per quantity (mean, m2), per pair co-moment.
    std::vector<double> mean_c(C, 0.0), m2_c(C, 0.0), dc(C);
    std::array<double, kNumQuantities> mean_q{}, m2_q{}, resid_q{};
    std::vector<double> co(C * kNumQuantities, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
      const double inv = 1.0 / static_cast<double>(s + 1);
      for (std::size_t q = 0; q < kNumQuantities; ++q) {
        const double y = labels[s][q];
        const double dy = y - mean_q[q];
        mean_q[q] += dy * inv;
        resid_q[q] = y - mean_q[q];
        m2_q[q] += dy * resid_q[q];
      }
      const float* row = b.codes.data() + s * C;
      for (std::size_t u = 0; u < C; ++u) {
        const double x = row[u];
        const double dx = x - mean_c[u];
        mean_c[u] += dx * inv;
        m2_c[u] += dx * (x - mean_c[u]);
        double* cu = co.data() + u * kNumQuantities;
        for (std::size_t q = 0; q < kNumQuantities; ++q) cu[q] += dx * resid_q[q];
      }
    }
    for (std::size_t u = 0; u < C; ++u) {
      for (auto q : kAllQuantities) {
        const auto qi = index_of(q);
        std::optional<double> rho;
        if (n >= 2 && m2_c[u] > 0.0 && m2_q[qi] > 0.0)
          rho = co[u * kNumQuantities + qi] / std::sqrt(m2_c[u] * m2_q[qi]);
        m.set(bp, u, q, rho);
      }
    }
  }
  return m;
}

namespace {

struct Candidate {
  std::uint32_t block;
  std::uint32_t unit;
  double rho;
  double key;
};

std::vector<Candidate> defined_entries(const CorrelationMatrix& m, QuantityKind q, bool by_abs) {
  std::vector<Candidate> out;
  for (std::size_t bp = 0; bp < m.n_blocks(); ++bp) {
    for (std::size_t u = 0; u < m.n_units(bp); ++u) {
      if (auto r = m.at(bp, u, q))
        out.push_back({m.blocks()[bp], static_cast<std::uint32_t>(u), *r, by_abs ? std::abs(*r) : *r});
    }
  }
  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.key != b.key) return a.key > b.key;
    if (a.block != b.block) return a.block < b.block;
    return a.unit < b.unit;
  });
  return out;
}

}  // namespace

TopK top_k(const CorrelationMatrix& m, QuantityKind q, std::size_t k) {
  require(k >= 1, ErrorCode::InvalidInput, "k must be >= 1");
  const auto ranked = defined_entries(m, q, /*by_abs=*/true);
  TopK out;
  out.truncated = k > ranked.size();
  const auto n = std::min(k, ranked.size());
  out.entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.entries.push_back({ranked[i].block, ranked[i].unit, ranked[i].rho, ranked[i].key});
  return out;
}

double BlockTop::mean_abs() const noexcept {
  if (top_abs.empty()) return 0.0;
  double s = 0.0;
  for (double v : top_abs) s += v;
  return s / static_cast<double>(top_abs.size());
}

std::vector<BlockTop> blockwise_top(const CorrelationMatrix& m, QuantityKind q, std::size_t k) {
  require(k >= 1, ErrorCode::InvalidInput, "k must be >= 1");
  std::vector<BlockTop> out;
  out.reserve(m.n_blocks());
  for (std::size_t bp = 0; bp < m.n_blocks(); ++bp) {
    BlockTop bt;
    bt.block = m.blocks()[bp];
    for (std::size_t u = 0; u < m.n_units(bp); ++u)
      if (auto r = m.at(bp, u, q)) bt.top_abs.push_back(std::abs(*r));
    std::sort(bt.top_abs.begin(), bt.top_abs.end(), std::greater<>());
    if (bt.top_abs.size() > k) bt.top_abs.resize(k);
    out.push_back(std::move(bt));
  }
  return out;
}

std::vector<BlockTop> blockwise_max(const CorrelationMatrix& m, QuantityKind q) {
  return blockwise_top(m, q, 1);
}

SyncResult sync_strength(const CorrelationMatrix& m, QuantityKind target,
                         const SyncOptions& options) {
  const auto ranked = defined_entries(m, options.select_quantity, options.select_by_abs);
  SyncResult out;
  const auto k = selection_count(options.fraction, ranked.size());
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& c = ranked[i];
    out.selected.push_back({c.block, c.unit});
    const auto t = m.at(m.block_position(c.block), c.unit, target);
    if (!t) continue;
    xs.push_back(c.rho);
    ys.push_back(*t);
  }
  if (xs.size() >= 2) out.strength = pearson(xs, ys);
  return out;
}

SyncReport sync_report(const CorrelationMatrix& m, const SyncOptions& options) {
  SyncReport report;
  report.fraction = options.fraction;
  for (auto q : kAllQuantities) {
    auto r = sync_strength(m, q, options);
    report.strength[index_of(q)] = r.strength;
    if (report.selected.empty()) report.selected = std::move(r.selected);
  }
  return report;
}

void write_matrix(const CorrelationMatrix& m, const std::filesystem::path& path) {
  CsvTable table({"block", "unit", "quantity", "rho"});
  std::vector<std::size_t> units;
  for (std::size_t bp = 0; bp < m.n_blocks(); ++bp) {
    units.push_back(m.n_units(bp));
    for (std::size_t u = 0; u < m.n_units(bp); ++u) {
      for (auto q : kAllQuantities) {
        const auto r = m.at(bp, u, q);
        table.row()
            .cell(static_cast<long long>(m.blocks()[bp]))
            .cell(u)
            .cell(short_label(q))
            .cell(r ? *r : std::numeric_limits<double>::quiet_NaN());
      }
    }
  }
  table.write(path);
  write_sidecar(path, {{"context_length", m.context_length()},
                       {"blocks", m.blocks()},
                       {"units_per_block", units}});
}

CorrelationMatrix read_matrix(const std::filesystem::path& path) {
  const auto meta = read_sidecar(path);
  CorrelationMatrix m(meta.at("context_length").get<std::uint32_t>(),
                      meta.at("blocks").get<std::vector<std::uint32_t>>(),
                      meta.at("units_per_block").get<std::vector<std::size_t>>());
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  std::map<std::uint32_t, std::size_t> positions;
  for (std::size_t bp = 0; bp < m.n_blocks(); ++bp) positions[m.blocks()[bp]] = bp;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    require(f.size() == 4, ErrorCode::Parse, "correlation row needs 4 fields");
    const auto block = static_cast<std::uint32_t>(std::stoul(f[0]));
    const auto unit = static_cast<std::size_t>(std::stoul(f[1]));
    const auto q = quantity_from_string(f[2]);
    const auto it = positions.find(block);
    require(it != positions.end(), ErrorCode::Parse, "unknown block in correlation table");
    if (f[3] != "nan") m.set(it->second, unit, q, std::stod(f[3]));
  }
  return m;
}

}  // namespace picl::correlation
