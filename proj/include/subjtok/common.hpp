#pragma once

#include <stdexcept>
#include <string>

#include <torch/torch.h>

namespace subjtok {

using torch::Tensor;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad configuration, incompatible dimensions or missing weights.
struct ConfigError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

/// Prompt violates the placeholder contract.
struct PromptError : Error {
  using Error::Error;
};

struct VocabularyError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

/// Raised when a training loss becomes non-finite. `dump_path` points at the
/// diagnostic dump of the offending batch.
struct TrainingError : Error {
  TrainingError(const std::string& msg, std::string dump)
      : Error(msg), dump_path(std::move(dump)) {}
  std::string dump_path;
};

namespace detail {

inline void expect_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace detail

}  // namespace subjtok
