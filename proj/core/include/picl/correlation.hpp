#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "picl/quantity.hpp"

namespace picl::correlation {

/// Single-pass co-moment accumulator (Welford). Population convention for
/// both covariance and deviations, so the normalization cancels.
class StreamingPearson {
 public:
  void add(double x, double y) noexcept {
    ++n_;
    const double dx = x - mean_x_;
    mean_x_ += dx / static_cast<double>(n_);
    const double dy = y - mean_y_;
    mean_y_ += dy / static_cast<double>(n_);
    m2_x_ += dx * (x - mean_x_);
    m2_y_ += dy * (y - mean_y_);
    c_xy_ += dx * (y - mean_y_);
  }

  std::size_t count() const noexcept { return n_; }
  double mean_x() const noexcept { return mean_x_; }
  double mean_y() const noexcept { return mean_y_; }

  /// nullopt when either input has zero variance or fewer than two samples.
  std::optional<double> correlation() const noexcept;

 private:
  std::size_t n_ = 0;
  double mean_x_ = 0.0, mean_y_ = 0.0;
  double m2_x_ = 0.0, m2_y_ = 0.0, c_xy_ = 0.0;
};

/// rho = cov(x, y) / (sigma_x sigma_y). Throws on length mismatch or
/// n < 2; nullopt marks an undefined (zero-variance) correlation.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

/// Turns a raw ratio into a correlation: clamps to [-1, 1].
double clamp_correlation(double r) noexcept;

/// ceil(fraction * n), guarded against representation error in fraction.
std::size_t selection_count(double fraction, std::size_t n);

struct PairIndex {
  std::uint32_t block = 0;  // model block index j
  std::uint32_t unit = 0;   // code unit i

  friend auto operator<=>(const PairIndex&, const PairIndex&) = default;
};

/// rho_j(c_i, Q) for every block j, unit i and quantity Q at one context
/// length. Undefined entries are stored as NaN and reported as nullopt.
class CorrelationMatrix {
 public:
  CorrelationMatrix() = default;
  CorrelationMatrix(std::uint32_t context_length, std::vector<std::uint32_t> blocks,
                    std::vector<std::size_t> units_per_block);

  std::uint32_t context_length() const noexcept { return context_length_; }
  const std::vector<std::uint32_t>& blocks() const noexcept { return blocks_; }
  std::size_t n_blocks() const noexcept { return blocks_.size(); }
  std::size_t n_units(std::size_t block_pos) const { return entries_.at(block_pos).size(); }
  std::size_t total_pairs() const noexcept;
  /// Position of model block j in blocks(); throws OutOfRange.
  std::size_t block_position(std::uint32_t block) const;

  std::optional<double> at(std::size_t block_pos, std::size_t unit, QuantityKind q) const;
  void set(std::size_t block_pos, std::size_t unit, QuantityKind q, std::optional<double> rho);

  /// Units whose rho with q is undefined (dead units, or a constant label).
  std::size_t undefined_count(QuantityKind q) const noexcept;
  std::size_t defined_count(QuantityKind q) const noexcept;

 private:
  std::uint32_t context_length_ = 0;
  std::vector<std::uint32_t> blocks_;
  std::vector<std::vector<std::array<double, kNumQuantities>>> entries_;
};

/// Codes of one block's SAE: rows = samples, columns = units.
struct BlockCodes {
  std::uint32_t block = 0;
  std::size_t code_dim = 0;
  std::span<const float> codes;
};

/// Per-sample quantity values, aligned with the code rows.
using LabelRow = std::array<double, kNumQuantities>;

CorrelationMatrix correlate_all(std::span<const BlockCodes> blocks,
                                std::span<const LabelRow> labels, std::uint32_t context_length);

struct RankedEntry {
  std::uint32_t block = 0;
  std::uint32_t unit = 0;
  double rho = 0.0;
  double abs_rho = 0.0;
};

struct TopK {
  std::vector<RankedEntry> entries;
  bool truncated = false;  // fewer defined entries than requested
};

/// Descending |rho|, ties by (block, unit) ascending, undefined excluded.
TopK top_k(const CorrelationMatrix& m, QuantityKind q, std::size_t k);

struct BlockTop {
  std::uint32_t block = 0;
  std::vector<double> top_abs;  // descending |rho|, at most k values
  double max_abs() const noexcept { return top_abs.empty() ? 0.0 : top_abs.front(); }
  double mean_abs() const noexcept;
};

std::vector<BlockTop> blockwise_top(const CorrelationMatrix& m, QuantityKind q, std::size_t k);
std::vector<BlockTop> blockwise_max(const CorrelationMatrix& m, QuantityKind q);

struct SyncOptions {
  QuantityKind select_quantity = QuantityKind::TotalEnergy;
  double fraction = 0.01;
  bool select_by_abs = false;  // default selects by signed rho
};

struct SyncResult {
  std::optional<double> strength;
  std::vector<PairIndex> selected;
};

/// Pearson correlation between rho(c, select_quantity) and rho(c, target)
/// over the top `fraction` of defined (block, unit) pairs ranked by
/// rho(c, select_quantity).
SyncResult sync_strength(const CorrelationMatrix& m, QuantityKind target,
                         const SyncOptions& options = {});

struct SyncReport {
  std::vector<PairIndex> selected;
  std::array<std::optional<double>, kNumQuantities> strength{};
  double fraction = 0.01;
};

SyncReport sync_report(const CorrelationMatrix& m, const SyncOptions& options = {});

/// block,unit,quantity,rho (rho = nan when undefined); context length and
/// block list go to the sidecar.
void write_matrix(const CorrelationMatrix& m, const std::filesystem::path& path);
CorrelationMatrix read_matrix(const std::filesystem::path& path);

}  // namespace picl::correlation
