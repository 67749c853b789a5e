#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace virtlab {

/// Every failure the library reports carries a short machine-readable code
/// ("domain", "spec", "constraint", ...) next to the human message. The CLI
/// prints both as `error: <code>: <message>`.
class Error : public std::runtime_error {
public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

private:
  std::string code_;
};

namespace errc {
inline constexpr const char* domain = "domain";
inline constexpr const char* argument = "argument";
inline constexpr const char* model_validity = "model_validity";
inline constexpr const char* mode = "mode";
inline constexpr const char* sampling = "sampling";
inline constexpr const char* buffer_overrun = "buffer_overrun";
inline constexpr const char* range = "range";
inline constexpr const char* spec = "spec";
inline constexpr const char* constraint = "constraint";
inline constexpr const char* parse = "parse";
inline constexpr const char* config = "config";
inline constexpr const char* timing = "timing";
inline constexpr const char* busy = "busy";
inline constexpr const char* stale_handle = "stale_handle";
inline constexpr const char* window = "window";
inline constexpr const char* pairing = "pairing";
inline constexpr const char* data = "data";
inline constexpr const char* dependency = "dependency";
inline constexpr const char* lost_target = "lost_target";
inline constexpr const char* no_signal = "no_signal";
inline constexpr const char* migration = "migration";
inline constexpr const char* integrity = "integrity";
inline constexpr const char* io = "io";
inline constexpr const char* usage = "usage";
inline constexpr const char* endpoint = "endpoint";
}  // namespace errc

[[noreturn]] inline void fail(const char* code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace virtlab
