#include "picl/quantity.hpp"

#include <string>

#include "picl/error.hpp"

namespace picl {

std::string_view to_string(QuantityKind q) noexcept {
  switch (q) {
    case QuantityKind::TotalEnergy: return "total_energy";
    case QuantityKind::KineticEnergy: return "kinetic_energy";
    case QuantityKind::PotentialEnergy: return "potential_energy";
    case QuantityKind::RandomBaseline: return "random_baseline";
  }
  return "unknown";
}

std::string_view short_label(QuantityKind q) noexcept {
  switch (q) {
    case QuantityKind::TotalEnergy: return "E";
    case QuantityKind::KineticEnergy: return "KE";
    case QuantityKind::PotentialEnergy: return "PE";
    case QuantityKind::RandomBaseline: return "Rand";
  }
  return "?";
}

QuantityKind quantity_from_string(std::string_view name) {
  for (auto q : kAllQuantities)
    if (name == to_string(q) || name == short_label(q)) return q;
  throw Error(ErrorCode::InvalidInput, "unknown quantity '" + std::string(name) + "'");
}

}  // namespace picl
