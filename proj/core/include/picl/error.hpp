#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace picl {

enum class ErrorCode {
  InvalidInput,
  SingularConfiguration,
  Divergence,
  Parse,
  Alignment,
  BadMagic,
  UnsupportedVersion,
  Truncated,
  DimensionOverflow,
  Io,
  MissingAlignment,
  OutOfRange,
  NonFiniteLoss,
  Protocol,
  Config,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Exception carrying a machine-checkable code. Every failure the library
/// raises on bad input goes through this type.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Parse failure with the character offset of the offending literal.
class ParseError : public Error {
 public:
  ParseError(std::size_t offset, const std::string& what)
      : Error(ErrorCode::Parse, what + " at offset " + std::to_string(offset)),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Integration produced a non-finite state.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : Error(ErrorCode::Divergence, what + " at step " + std::to_string(step)),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// SAE training hit a non-finite loss.
class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(int epoch, std::size_t batch)
      : Error(ErrorCode::NonFiniteLoss,
              "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                  std::to_string(batch)),
        epoch_(epoch),
        batch_(batch) {}

  int epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  int epoch_;
  std::size_t batch_;
};

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace picl
