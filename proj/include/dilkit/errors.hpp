#pragma once

#include <stdexcept>
#include <string>

namespace dilkit {

/// Shape/dimension mismatch between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Invalid static configuration (bad alpha, heads not dividing dim, ...).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A documented precondition of an operation was violated by the caller.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Training hit a non-finite loss; carries the offending loss name.
struct NumericalAbort : std::runtime_error {
    explicit NumericalAbort(const std::string& loss_name)
        : std::runtime_error("non-finite loss: " + loss_name), loss(loss_name) {}
    std::string loss;
};

}  // namespace dilkit
