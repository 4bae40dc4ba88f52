#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace uad {

/// Malformed or inconsistent input data (bad files, shape mismatches).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingModality : public DataError {
 public:
  explicit MissingModality(const std::string& tag)
      : DataError("missing modality file for '" + tag + "'"), tag_(tag) {}
  const std::string& tag() const noexcept { return tag_; }

 private:
  std::string tag_;
};

class NonFiniteData : public DataError {
 public:
  NonFiniteData(const std::string& tag, std::size_t flat_index)
      : DataError("non-finite value in modality '" + tag + "' at flat index " +
                  std::to_string(flat_index)),
        tag_(tag),
        index_(flat_index) {}
  const std::string& tag() const noexcept { return tag_; }
  std::size_t flat_index() const noexcept { return index_; }

 private:
  std::string tag_;
  std::size_t index_;
};

class ShapeMismatch : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (unknown keys, violated invariants).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace uad
