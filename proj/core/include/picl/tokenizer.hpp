#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace picl::tokenizer {

/// Affine map v -> (v - b) / a applied before digit serialization.
struct ScalingParams {
  double alpha = 0.99;
  double beta = 0.3;
  double a = 1.0;
  double b = 0.0;
  bool degenerate = false;  // a forced to 1 because the percentile was 0

  nlohmann::json to_json() const;
  static ScalingParams from_json(const nlohmann::json& j);

  friend bool operator==(const ScalingParams&, const ScalingParams&) = default;
};

/// Character layout of one time step inside DigitSeries::text.
struct StepSpan {
  std::size_t char_begin = 0;
  std::size_t char_end = 0;  // inclusive
  std::optional<std::size_t> separator;  // index of the trailing ',' if any

  friend bool operator==(const StepSpan&, const StepSpan&) = default;
};

/// Comma-joined signed integer literals, one per time step.
struct DigitSeries {
  std::string text;
  int precision = 3;
  std::vector<StepSpan> alignment;

  std::size_t size() const noexcept { return alignment.size(); }

  /// Rebuild from raw text, validating the one-literal-per-step invariant.
  static DigitSeries from_text(std::string text, int precision);
};

/// b = min - beta (max - min); a = alpha-percentile of (series - b), linear
/// interpolation on the sorted values. A non-positive percentile falls back
/// to a = 1 with the degenerate flag set.
ScalingParams fit_scaling(std::span<const double> series, double alpha = 0.99, double beta = 0.3);

/// round((v - b) / a * 10^precision), half away from zero; "-0" renders as "0".
long long quantize(double value, const ScalingParams& params, int precision);
double dequantize(long long literal, const ScalingParams& params, int precision);

DigitSeries serialize(std::span<const double> series, const ScalingParams& params,
                      int precision = 3);

/// Integer literals of a comma-separated string. Throws ParseError with the
/// character offset of the first malformed literal (including an empty one).
std::vector<long long> parse_literals(std::string_view text);

std::vector<double> parse(const DigitSeries& digits, const ScalingParams& params);

/// The text sent to a model: the series followed by one separator so the
/// continuation starts with the next number.
std::string prompt_text(const DigitSeries& digits);

/// Token index range [first, last] of one time step.
struct TokenRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t representative = 0;  // last token of the number

  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

/// Map each time step to the tokens overlapping its number. Token lengths
/// must partition either `digits.text` or `prompt_text(digits)` exactly.
std::vector<TokenRange> align_tokens(const DigitSeries& digits,
                                     std::span<const std::size_t> token_lengths);

/// Per-step literals of a generated continuation. Steps whose text is not a
/// valid literal, or that were never produced, are nullopt.
struct Continuation {
  std::vector<std::optional<long long>> steps;
  std::size_t invalid = 0;
};

Continuation parse_continuation(std::string_view text, std::size_t n_steps);

}  // namespace picl::tokenizer
