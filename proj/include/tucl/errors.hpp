#pragma once

#include <stdexcept>
#include <string>

namespace tucl {

/// Base class for all library errors.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor/volume dimension mismatch.
struct shape_error : error {
    using error::error;
};

/// Invalid argument value (rates, counts, fractions, unknown names).
struct param_error : error {
    using error::error;
};

/// File read/write failure or corrupt container.
struct io_error : error {
    using error::error;
};

/// Violated call contract (non-scalar loss, binarized input where
/// a probabilistic one is required, non-binary metric input).
struct contract_error : error {
    using error::error;
};

/// NaN/Inf reached a place that must stay finite.
struct numeric_error : error {
    using error::error;
};

} // namespace tucl
