#pragma once

#include <stdexcept>

namespace marrowcast {

// Error taxonomy. The CLI maps these onto exit codes: usage problems -> 1,
// data problems -> 2, numerical failures -> 3.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File missing, truncated, or unwritable.
struct io_error : error {
    using error::error;
};

// Structurally invalid file content (bad magic, malformed header).
struct format_error : error {
    using error::error;
};

// Manifest and payload disagree (checkpoint blob length, tensor index).
struct corruption_error : format_error {
    using format_error::format_error;
};

// Recognized input that falls outside the supported subset.
struct unsupported_error : error {
    using error::error;
};

// Dimension or bounds mismatch between operands.
struct shape_error : error {
    using error::error;
};

// Invalid configuration value or unknown configuration key.
struct config_error : error {
    using error::error;
};

// Phantom placement could not be satisfied within bounded retries.
struct generation_error : error {
    using error::error;
};

// Divergence or non-finite values in an iterative computation.
struct numeric_error : error {
    using error::error;
};

// A metric that cannot be computed on the given data (e.g. single-class ROC).
struct undefined_metric_error : error {
    using error::error;
};

// Input that is formally valid but degenerate (e.g. an all-zero volume).
struct degenerate_input_error : error {
    using error::error;
};

} // namespace marrowcast
