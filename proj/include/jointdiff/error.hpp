#ifndef JOINTDIFF_ERROR_HPP
#define JOINTDIFF_ERROR_HPP

#include <stdexcept>
#include <string>

namespace jointdiff {

// Error categories map onto CLI exit codes: validation-type errors exit 1,
// runtime-type errors exit 2.
enum class ErrorKind {
    Config,     // invalid configuration value
    Range,      // argument outside its documented domain
    Shape,      // dimension mismatch between arrays
    Numeric,    // non-finite value or numeric guard tripped
    Parse,      // malformed file content
    Integrity,  // payload/manifest inconsistency
    Version,    // unknown file format version
    Usage,      // invalid CLI usage
    Io          // filesystem failure
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    // true for errors that indicate bad inputs rather than a mid-run failure
    bool is_validation() const noexcept {
        switch (kind_) {
            case ErrorKind::Config:
            case ErrorKind::Range:
            case ErrorKind::Shape:
            case ErrorKind::Parse:
            case ErrorKind::Integrity:
            case ErrorKind::Version:
            case ErrorKind::Usage:
                return true;
            default:
                return false;
        }
    }

private:
    ErrorKind kind_;
};

inline Error config_error(const std::string& msg)    { return Error(ErrorKind::Config, msg); }
inline Error range_error(const std::string& msg)     { return Error(ErrorKind::Range, msg); }
inline Error shape_error(const std::string& msg)     { return Error(ErrorKind::Shape, msg); }
inline Error numeric_error(const std::string& msg)   { return Error(ErrorKind::Numeric, msg); }
inline Error parse_error(const std::string& msg)     { return Error(ErrorKind::Parse, msg); }
inline Error integrity_error(const std::string& msg) { return Error(ErrorKind::Integrity, msg); }
inline Error version_error(const std::string& msg)   { return Error(ErrorKind::Version, msg); }
inline Error usage_error(const std::string& msg)     { return Error(ErrorKind::Usage, msg); }
inline Error io_error(const std::string& msg)        { return Error(ErrorKind::Io, msg); }

} // namespace jointdiff

#endif // JOINTDIFF_ERROR_HPP
