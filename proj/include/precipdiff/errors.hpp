#pragma once

#include <stdexcept>
#include <string>

namespace precipdiff {

// Shape disagreement between operands (wrong channel count, size mismatch).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid static configuration (group count, embedding dim, channel list).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Nonfinite gradient encountered during an optimizer step.
struct NonfiniteGradientError : std::runtime_error {
    explicit NonfiniteGradientError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training produced a nonfinite loss.
struct TrainingDivergenceError : std::runtime_error {
    explicit TrainingDivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Sampler state went nonfinite mid-trajectory.
struct SamplingDivergenceError : std::runtime_error {
    explicit SamplingDivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// File parse failures, kept distinct so callers can tell them apart.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};
struct BadMagicError : ParseError {
    explicit BadMagicError(const std::string& msg) : ParseError(msg) {}
};
struct TruncationError : ParseError {
    explicit TruncationError(const std::string& msg) : ParseError(msg) {}
};
struct ChecksumError : ParseError {
    explicit ChecksumError(const std::string& msg) : ParseError(msg) {}
};

// Metric evaluated over zero valid cells.
struct EmptyComparisonError : std::runtime_error {
    explicit EmptyComparisonError(const std::string& msg) : std::runtime_error(msg) {}
};

// Pearson correlation of a constant field.
struct UndefinedCorrelationError : std::runtime_error {
    explicit UndefinedCorrelationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint task tag does not match the requested inference stage.
struct WrongModelError : std::runtime_error {
    explicit WrongModelError(const std::string& msg) : std::runtime_error(msg) {}
};

// Patch stitching left a cell uncovered.
struct CoverageError : std::runtime_error {
    explicit CoverageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Satellite/radar lists could not be paired by timestamp.
struct PairingError : std::runtime_error {
    explicit PairingError(const std::string& msg) : std::runtime_error(msg) {}
};

// Degenerate least-squares fit (constant predictor).
struct SingularFitError : std::runtime_error {
    explicit SingularFitError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace precipdiff
