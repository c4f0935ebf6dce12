#pragma once

#include <stdexcept>
#include <string>

namespace imcx {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Image structure is inconsistent (channel sizes differ, wrong bit depth, ...).
class StructuralError : public Error {
 public:
  using Error::Error;
};

// Data is structurally fine but violates a domain rule (missing canonical channel).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class UnsupportedLayerError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace imcx
