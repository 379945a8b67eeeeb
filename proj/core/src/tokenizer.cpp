#include "picl/tokenizer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include "picl/error.hpp"

namespace picl::tokenizer {

nlohmann::json ScalingParams::to_json() const {
  return {{"alpha", alpha}, {"beta", beta}, {"a", a}, {"b", b}, {"degenerate", degenerate}};
}

ScalingParams ScalingParams::from_json(const nlohmann::json& j) {
  ScalingParams p;
  try {
    p.alpha = j.at("alpha").get<double>();
    p.beta = j.at("beta").get<double>();
    p.a = j.at("a").get<double>();
    p.b = j.at("b").get<double>();
    p.degenerate = j.value("degenerate", false);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("scaling params: ") + e.what());
  }
  require(p.a > 0.0, ErrorCode::InvalidInput, "scale a must be > 0");
  return p;
}

ScalingParams fit_scaling(std::span<const double> series, double alpha, double beta) {
  require(!series.empty(), ErrorCode::InvalidInput, "cannot fit scaling on an empty series");
  require(alpha > 0.0 && alpha <= 1.0, ErrorCode::InvalidInput, "alpha must be in (0, 1]");
  for (double v : series)
    require(std::isfinite(v), ErrorCode::InvalidInput, "series contains non-finite values");

  const auto [lo, hi] = std::minmax_element(series.begin(), series.end());
  ScalingParams p;
  p.alpha = alpha;
  p.beta = beta;
  p.b = *lo - beta * (*hi - *lo);

  std::vector<double> shifted(series.begin(), series.end());
  for (auto& v : shifted) v -= p.b;
  std::sort(shifted.begin(), shifted.end());
  const double pos = alpha * static_cast<double>(shifted.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(i);
  double a = shifted[i];
  if (i + 1 < shifted.size()) a += frac * (shifted[i + 1] - shifted[i]);

  if (!(a > 0.0)) {
    p.a = 1.0;
    p.degenerate = true;
  } else {
    p.a = a;
  }
  return p;
}

long long quantize(double value, const ScalingParams& params, int precision) {
  require(std::isfinite(value), ErrorCode::InvalidInput, "cannot serialize a non-finite value");
  const double scaled = (value - params.b) / params.a * std::pow(10.0, precision);
  require(std::abs(scaled) < 9.0e18, ErrorCode::InvalidInput, "scaled value overflows a literal");
  // llround rounds half away from zero; the integer result has no negative zero.
  return std::llround(scaled);
}

double dequantize(long long literal, const ScalingParams& params, int precision) {
  return static_cast<double>(literal) / std::pow(10.0, precision) * params.a + params.b;
}

DigitSeries serialize(std::span<const double> series, const ScalingParams& params, int precision) {
  require(precision >= 1, ErrorCode::InvalidInput, "precision must be >= 1");
  require(params.a > 0.0, ErrorCode::InvalidInput, "scale a must be > 0");
  DigitSeries out;
  out.precision = precision;
  out.alignment.reserve(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (i) {
      out.alignment.back().separator = out.text.size();
      out.text += ',';
    }
    const auto begin = out.text.size();
    out.text += std::to_string(quantize(series[i], params, precision));
    out.alignment.push_back({begin, out.text.size() - 1, std::nullopt});
  }
  return out;
}

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Parses one literal occupying exactly `field`; nullopt if malformed.
std::optional<long long> parse_literal(std::string_view field) {
  if (field.empty()) return std::nullopt;
  std::size_t i = field[0] == '-' ? 1 : 0;
  if (i == field.size()) return std::nullopt;
  for (std::size_t k = i; k < field.size(); ++k)
    if (!is_digit(field[k])) return std::nullopt;
  long long value = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc{} || ptr != field.data() + field.size()) return std::nullopt;
  return value;
}

}  // namespace

std::vector<long long> parse_literals(std::string_view text) {
  std::vector<long long> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = text.find(',', start);
    const auto end = comma == std::string_view::npos ? text.size() : comma;
    const auto value = parse_literal(text.substr(start, end - start));
    if (!value) throw ParseError(start, "malformed integer literal");
    out.push_back(*value);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

DigitSeries DigitSeries::from_text(std::string text, int precision) {
  require(precision >= 1, ErrorCode::InvalidInput, "precision must be >= 1");
  parse_literals(text);  // validates
  DigitSeries out;
  out.precision = precision;
  std::size_t start = 0;
  for (;;) {
    const auto comma = text.find(',', start);
    if (comma == std::string::npos) {
      out.alignment.push_back({start, text.size() - 1, std::nullopt});
      break;
    }
    out.alignment.push_back({start, comma - 1, comma});
    start = comma + 1;
  }
  out.text = std::move(text);
  return out;
}

std::vector<double> parse(const DigitSeries& digits, const ScalingParams& params) {
  require(params.a > 0.0, ErrorCode::InvalidInput, "scale a must be > 0");
  const auto literals = parse_literals(digits.text);
  std::vector<double> out;
  out.reserve(literals.size());
  for (long long k : literals) out.push_back(dequantize(k, params, digits.precision));
  return out;
}

std::string prompt_text(const DigitSeries& digits) { return digits.text + ","; }

std::vector<TokenRange> align_tokens(const DigitSeries& digits,
                                     std::span<const std::size_t> token_lengths) {
  std::size_t covered = 0;
  for (auto len : token_lengths) {
    if (len == 0) throw Error(ErrorCode::Alignment, "zero-length token");
    covered += len;
  }
  if (covered != digits.text.size() && covered != digits.text.size() + 1) {
    throw Error(ErrorCode::Alignment, "tokens cover " + std::to_string(covered) +
                                          " characters, text has " +
                                          std::to_string(digits.text.size()));
  }

  // token_of[c] = index of the token containing character c
  std::vector<std::size_t> token_of(covered);
  std::size_t pos = 0;
  for (std::size_t t = 0; t < token_lengths.size(); ++t)
    for (std::size_t k = 0; k < token_lengths[t]; ++k) token_of[pos++] = t;

  std::vector<TokenRange> out;
  out.reserve(digits.alignment.size());
  for (const auto& span : digits.alignment) {
    TokenRange r{token_of[span.char_begin], token_of[span.char_end], token_of[span.char_end]};
    if (!out.empty() && r.first <= out.back().last) {
      throw Error(ErrorCode::Alignment,
                  "a token spans two numbers near character " + std::to_string(span.char_begin));
    }
    out.push_back(r);
  }
  return out;
}

Continuation parse_continuation(std::string_view text, std::size_t n_steps) {
  Continuation out;
  out.steps.assign(n_steps, std::nullopt);
  std::size_t start = 0;
  std::size_t step = 0;
  while (step < n_steps && start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto end = comma == std::string_view::npos ? text.size() : comma;
    auto field = text.substr(start, end - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\n')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\n')) field.remove_suffix(1);
    out.steps[step] = parse_literal(field);
    ++step;
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  out.invalid = static_cast<std::size_t>(
      std::count_if(out.steps.begin(), out.steps.end(), [](const auto& s) { return !s; }));
  return out;
}

}  // namespace picl::tokenizer
