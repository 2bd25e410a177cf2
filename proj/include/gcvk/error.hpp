#pragma once

#include <stdexcept>
#include <string>

namespace gcvk {

enum class ErrorKind {
  usage,      // bad command-line or API usage
  config,     // invalid configuration / divisibility violations
  shape,      // tensor extents incompatible with the operation
  layout,     // window layout violations
  numeric,    // NaN / non-finite values, divergence
  domain,     // argument outside the mathematical domain
  format,     // weights file or config document malformed
  unsupported // operation requested in a mode it does not support
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) throw Error(kind, msg);
}

}  // namespace gcvk
