#pragma once

#include <array>
#include <string_view>

#include "picl/physics.hpp"

namespace picl {

enum class QuantityKind { TotalEnergy = 0, KineticEnergy = 1, PotentialEnergy = 2, RandomBaseline = 3 };

inline constexpr std::size_t kNumQuantities = 4;
inline constexpr std::array<QuantityKind, kNumQuantities> kAllQuantities{
    QuantityKind::TotalEnergy, QuantityKind::KineticEnergy, QuantityKind::PotentialEnergy,
    QuantityKind::RandomBaseline};

constexpr std::size_t index_of(QuantityKind q) noexcept { return static_cast<std::size_t>(q); }

std::string_view to_string(QuantityKind q) noexcept;
QuantityKind quantity_from_string(std::string_view name);

/// Short column label used in report tables: E, KE, PE, Rand.
std::string_view short_label(QuantityKind q) noexcept;

inline double quantity_value(const physics::EnergyBreakdown& e, double random_baseline,
                             QuantityKind q) noexcept {
  switch (q) {
    case QuantityKind::TotalEnergy: return e.total;
    case QuantityKind::KineticEnergy: return e.kinetic;
    case QuantityKind::PotentialEnergy: return e.potential;
    case QuantityKind::RandomBaseline: return random_baseline;
  }
  return 0.0;
}

}  // namespace picl
