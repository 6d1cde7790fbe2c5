#pragma once

#include <stdexcept>
#include <string>

namespace vibro {

enum class ErrorKind {
    invalid_argument,
    numeric_failure,
    degenerate_input,
    degenerate_eigenvalue,
    resonance_singularity,
    contraction_violation,
    assumption_violation,
    envelope_violation,
    unsupported,
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::invalid_argument: return "invalid-argument";
        case ErrorKind::numeric_failure: return "numeric-failure";
        case ErrorKind::degenerate_input: return "degenerate-input";
        case ErrorKind::degenerate_eigenvalue: return "degenerate-eigenvalue";
        case ErrorKind::resonance_singularity: return "resonance-singularity";
        case ErrorKind::contraction_violation: return "contraction-violation";
        case ErrorKind::assumption_violation: return "assumption-violation";
        case ErrorKind::envelope_violation: return "envelope-violation";
        case ErrorKind::unsupported: return "unsupported";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
    if (!cond) fail(ErrorKind::invalid_argument, what);
}

}  // namespace vibro
