#pragma once

#include <stdexcept>
#include <string>

namespace mtp2 {

// Failure category, used by the CLI to map exceptions to exit codes:
// usage -> 1, data -> 2, numeric -> 3.
enum class ErrorCategory { usage, data, numeric };

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

#define MTP2_DEFINE_ERROR(NAME, CATEGORY)                                  \
    class NAME : public Error {                                            \
    public:                                                                \
        explicit NAME(const std::string& what)                             \
            : Error(ErrorCategory::CATEGORY, std::string(#NAME ": ") + what) {} \
    }

MTP2_DEFINE_ERROR(UsageError, usage);
MTP2_DEFINE_ERROR(RhoOutOfRange, usage);
MTP2_DEFINE_ERROR(RankTooLarge, usage);
MTP2_DEFINE_ERROR(InvalidSpec, usage);

MTP2_DEFINE_ERROR(IoError, data);
MTP2_DEFINE_ERROR(ParseError, data);
MTP2_DEFINE_ERROR(DuplicateCell, data);
MTP2_DEFINE_ERROR(EmptyPanel, data);
MTP2_DEFINE_ERROR(InvalidInput, data);
MTP2_DEFINE_ERROR(DimensionMismatch, data);
MTP2_DEFINE_ERROR(DegenerateDenominator, data);
MTP2_DEFINE_ERROR(ZeroVarianceColumn, data);
MTP2_DEFINE_ERROR(WindowMismatch, data);
MTP2_DEFINE_ERROR(MissingCaps, data);
MTP2_DEFINE_ERROR(UniverseTooSmall, data);
MTP2_DEFINE_ERROR(InsufficientHistory, data);
MTP2_DEFINE_ERROR(InsufficientData, data);
MTP2_DEFINE_ERROR(NonpositiveVariance, data);

MTP2_DEFINE_ERROR(NotPositiveDefinite, numeric);
MTP2_DEFINE_ERROR(ConvergenceFailure, numeric);
MTP2_DEFINE_ERROR(NonConvergence, numeric);
MTP2_DEFINE_ERROR(SingularDesign, numeric);
MTP2_DEFINE_ERROR(DegenerateTarget, numeric);

#undef MTP2_DEFINE_ERROR

inline int exit_code_for(const Error& e) {
    switch (e.category()) {
        case ErrorCategory::usage: return 1;
        case ErrorCategory::data: return 2;
        case ErrorCategory::numeric: return 3;
    }
    return 3;
}

} // namespace mtp2
