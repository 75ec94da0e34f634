#pragma once

#include <stdexcept>
#include <string>

namespace alignparts {

// Error categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  invalid_argument,  // precondition violated by the caller
  schema,            // malformed file or request body
  conflict,          // inconsistent data (e.g. contradictory decisions)
  environment,       // I/O, ports, missing files
  numeric,           // non-finite values, singular systems
  not_found,
  stale,             // lease or revision no longer current
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::invalid_argument, what);
}

}  // namespace alignparts
