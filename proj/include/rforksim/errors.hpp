#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rfork {

// Domain-level operation failures. These are values returned through
// Result<T>, not exceptions: a rejected read or a missing descriptor is a
// normal protocol outcome.
enum class Err : std::uint8_t {
  None = 0,
  Rejected,            // one-sided read refused by the target NIC
  NoSuchTarget,
  Timeout,             // destination crashed / unreachable
  MissingAccessKey,
  MalformedDescriptor, // carries byte offset
  AuthFailed,
  NoSuchDescriptor,
  SegFault,
  ProtFault,
  CorruptDescriptor,
  FaultError,          // page unmaterializable (owner dead or page gone)
  NoSuchVma,
  MaxHopsExceeded,
  NoPage,              // fallback handler could not resolve the page
};

const char* err_name(Err e);

// Minimal expected-like carrier (std::expected is not available in C++20
// on this toolchain).
template <typename T>
class Result {
 public:
  Result(T value) : value_(std::move(value)), err_(Err::None) {}
  Result(Err e, std::uint64_t detail = 0) : err_(e), detail_(detail) {}

  bool ok() const { return err_ == Err::None; }
  explicit operator bool() const { return ok(); }
  Err error() const { return err_; }
  std::uint64_t detail() const { return detail_; }

  T& value() { return value_; }
  const T& value() const { return value_; }
  T& operator*() { return value_; }
  const T& operator*() const { return value_; }
  T* operator->() { return &value_; }
  const T* operator->() const { return &value_; }

 private:
  T value_{};
  Err err_;
  std::uint64_t detail_ = 0;
};

template <>
class Result<void> {
 public:
  Result() : err_(Err::None) {}
  Result(Err e, std::uint64_t detail = 0) : err_(e), detail_(detail) {}
  bool ok() const { return err_ == Err::None; }
  explicit operator bool() const { return ok(); }
  Err error() const { return err_; }
  std::uint64_t detail() const { return detail_; }

 private:
  Err err_;
  std::uint64_t detail_ = 0;
};

// Thrown when a run violates an internal consistency invariant (ledger
// mismatch, unsafe reclamation, ...). The CLI maps this to exit code 3.
class SimAssertionError : public std::runtime_error {
 public:
  explicit SimAssertionError(const std::string& what)
      : std::runtime_error(what) {}
};

// Thrown for malformed configs, registries, traces. CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline void sim_assert(bool cond, const std::string& what) {
  if (!cond) throw SimAssertionError(what);
}

}  // namespace rfork
