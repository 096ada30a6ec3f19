#pragma once

#include <stdexcept>
#include <string>

namespace ppd {

// Exit-code families used by the CLI: 2 config, 3 data, 4 numeric/capacity.
enum class ErrorKind {
    Shape,
    Domain,
    Config,
    Data,
    Capacity,
    Format,
    Numeric,
    Profile,
    Infeasible,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string & what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define PPD_DEFINE_ERROR(Name, Kind)                                              \
    class Name : public Error {                                                    \
    public:                                                                        \
        explicit Name(const std::string & what) : Error(ErrorKind::Kind, what) {}  \
    };

PPD_DEFINE_ERROR(ShapeError, Shape)
PPD_DEFINE_ERROR(DomainError, Domain)
PPD_DEFINE_ERROR(ConfigError, Config)
PPD_DEFINE_ERROR(DataError, Data)
PPD_DEFINE_ERROR(CapacityError, Capacity)
PPD_DEFINE_ERROR(FormatError, Format)
PPD_DEFINE_ERROR(ProfileError, Profile)
PPD_DEFINE_ERROR(InfeasibleError, Infeasible)

#undef PPD_DEFINE_ERROR

// Carries the residual so callers can report how far off a solve ended.
class NumericError : public Error {
public:
    NumericError(const std::string & what, double residual = 0.0)
        : Error(ErrorKind::Numeric, what), residual_(residual) {}

    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

int exit_code_for(ErrorKind kind) noexcept;

} // namespace ppd
