#pragma once

#include <stdexcept>
#include <string>

namespace pseudoseg {

// Error categories map to CLI exit codes (see tools/): config 2, data 3,
// numeric 4. Contract violations are programming errors, not user input.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SamplingError : public DataError {
 public:
  using DataError::DataError;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void check_contract(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline void check_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace pseudoseg
