#pragma once

#include <stdexcept>
#include <string>

namespace wikidyk {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied something that violates an operation's precondition.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// A required artifact (file, backend, store entry) does not exist.
class MissingInput : public Error {
 public:
  using Error::Error;
};

// Connection failure or timeout; safe to retry.
class TransportError : public Error {
 public:
  using Error::Error;
};

// Endpoint answered with a non-2xx status.
class HttpStatusError : public Error {
 public:
  HttpStatusError(int status, const std::string& excerpt)
      : Error("http status " + std::to_string(status) + ": " + excerpt), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

// Response body or value violates the wire contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace wikidyk
