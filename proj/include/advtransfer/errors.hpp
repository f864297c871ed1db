#ifndef ADVTRANSFER_ERRORS_HPP_
#define ADVTRANSFER_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace advtransfer {

// Corpus files missing, truncated or malformed.
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit the requested tiling / model input.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration values (model hyperparameters, budgets, experiment files).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Decrypting with the wrong algorithm/key, or a batch that was never encrypted.
class CipherError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint / run-store persistence failures.
class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace advtransfer

#endif  // ADVTRANSFER_ERRORS_HPP_
