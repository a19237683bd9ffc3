#pragma once

#include <stdexcept>
#include <string>

namespace mlcs {

/// Base class for every error raised by the library. `category()` is the
/// short tag the CLI prints and maps to an exit code.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* category() const noexcept { return "error"; }
};

#define MLCS_DEFINE_ERROR(Name, tag)                                      \
    class Name : public Error {                                           \
    public:                                                               \
        explicit Name(const std::string& what) : Error(what) {}           \
        const char* category() const noexcept override { return tag; }    \
    };

MLCS_DEFINE_ERROR(DimensionError, "dimension")
MLCS_DEFINE_ERROR(ArgumentError, "argument")
MLCS_DEFINE_ERROR(NumericError, "numeric")
MLCS_DEFINE_ERROR(UsageError, "usage")
MLCS_DEFINE_ERROR(TrainingError, "training")
MLCS_DEFINE_ERROR(PathError, "path")
MLCS_DEFINE_ERROR(ConfigError, "config")
MLCS_DEFINE_ERROR(FormatError, "format")
MLCS_DEFINE_ERROR(NotFoundError, "not-found")
MLCS_DEFINE_ERROR(MetricError, "metric")

#undef MLCS_DEFINE_ERROR

}  // namespace mlcs
