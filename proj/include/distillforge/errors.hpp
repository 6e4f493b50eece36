#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace distillforge {

enum class ErrorKind {
  dimension,
  domain,
  config,
  validation,
  state,
  size,
  format,
  channel,
  layout,
  io,
  numeric,
  usage,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries a machine-readable kind so
/// the CLI can print `error: <kind>: <message>` on a single line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace distillforge
