#ifndef TRAT_ERROR_HPP
#define TRAT_ERROR_HPP

#include <stdexcept>
#include <string>

namespace trat {

// Error categories surfaced to callers and mapped to CLI exit codes.
enum class Errc {
  shape_mismatch,
  invalid_argument,
  parse_error,
  io_error,
  bad_magic,
  bad_crc,
  bad_version,
  truncated,
  count_mismatch,
  not_differentiable,
  numeric_abort,
  verification_failure,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace trat

#endif  // TRAT_ERROR_HPP
