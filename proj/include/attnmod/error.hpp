#pragma once

#include <stdexcept>
#include <string>

namespace attnmod {

// Failure classes; the CLI maps each one to a fixed exit code.
enum class ErrorKind { config, data, model, numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::model: return 4;
    case ErrorKind::numeric: return 5;
  }
  return 1;
}

}  // namespace attnmod
